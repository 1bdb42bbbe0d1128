#include "cvvnet/gait.hpp"

#include <cmath>

#include "cvvnet/seeds.hpp"

namespace cvvnet {

std::string to_string(ViewGroup v) {
  switch (v) {
    case ViewGroup::Low: return "Low";
    case ViewGroup::Mid: return "Mid";
    case ViewGroup::High: return "High";
  }
  return "?";
}

std::string to_string(Condition c) {
  switch (c) {
    case Condition::NM: return "NM";
    case Condition::BG: return "BG";
    case Condition::CL: return "CL";
  }
  return "?";
}

ViewGroup parse_view_group(const std::string& s) {
  if (s == "Low") return ViewGroup::Low;
  if (s == "Mid") return ViewGroup::Mid;
  if (s == "High") return ViewGroup::High;
  throw FormatError("unknown view group '" + s + "'");
}

Condition parse_condition(const std::string& s) {
  if (s == "NM") return Condition::NM;
  if (s == "BG") return Condition::BG;
  if (s == "CL") return Condition::CL;
  throw FormatError("unknown condition '" + s + "'");
}

ViewGroup view_group_for_angle(double angle_deg) {
  if (!(angle_deg >= 0.0 && angle_deg <= 80.0))
    throw InvalidAngle("vertical angle " + std::to_string(angle_deg) + " outside [0, 80]");
  if (angle_deg < 30.0) return ViewGroup::Low;
  if (angle_deg < 60.0) return ViewGroup::Mid;
  return ViewGroup::High;
}

Index SilhouetteFrame::foreground() const { return mask.cast<Index>().sum(); }

bool SilhouetteFrame::is_binary() const { return (mask.array() <= 1).all(); }

namespace {

struct Extent {
  Index top, bottom;
  double centroid_x;
};

Extent foreground_extent(const Mask& m) {
  Index top = -1, bottom = -1, count = 0;
  double sx = 0;
  for (Index r = 0; r < m.rows(); ++r)
    for (Index c = 0; c < m.cols(); ++c)
      if (m(r, c)) {
        if (top < 0) top = r;
        bottom = r;
        sx += static_cast<double>(c);
        ++count;
      }
  if (count == 0) throw EmptyFrame("frame has no foreground pixel");
  return {top, bottom, sx / static_cast<double>(count)};
}

double sample_bilinear(const Mask& m, double y, double x) {
  const double fy = std::floor(y), fx = std::floor(x);
  const Index y0 = static_cast<Index>(fy), x0 = static_cast<Index>(fx);
  const double wy = y - fy, wx = x - fx;
  auto at = [&](Index r, Index c) -> double {
    return (r >= 0 && r < m.rows() && c >= 0 && c < m.cols()) ? m(r, c) : 0.0;
  };
  const double top = (1 - wx) * at(y0, x0) + (wx > 0 ? wx * at(y0, x0 + 1) : 0.0);
  if (wy == 0) return top;
  const double bot = (1 - wx) * at(y0 + 1, x0) + (wx > 0 ? wx * at(y0 + 1, x0 + 1) : 0.0);
  return (1 - wy) * top + wy * bot;
}

Mask align_once(const Mask& src, Index th, Index tw) {
  const Extent e = foreground_extent(src);
  if (e.bottom == e.top) throw DegenerateFrame("foreground bounding box has zero height");
  // Source pixels per output pixel; output rows 0 and th-1 land exactly on the extreme foreground rows.
  const double step = static_cast<double>(e.bottom - e.top) / static_cast<double>(th - 1);
  // Column j samples x = (j + k) * step with the integer k that centres the centroid between columns.
  const double half = static_cast<double>(tw) / 2.0;
  const double k = std::floor(e.centroid_x / step - (half - 1.0));
  Mask out(th, tw);
  for (Index i = 0; i < th; ++i) {
    const double y = static_cast<double>(e.top) + static_cast<double>(i) * step;
    for (Index j = 0; j < tw; ++j) {
      const double x = (static_cast<double>(j) + k) * step;
      out(i, j) = sample_bilinear(src, y, x) >= 0.5 ? 1 : 0;
    }
  }
  return out;
}

}  // namespace

SilhouetteFrame preprocess_silhouette(const SilhouetteFrame& raw, Index target_h, Index target_w) {
  if (target_h < 2 || target_w < 1) throw ShapeMismatch("preprocess target must be at least 2 x 1");
  if (!raw.is_binary()) throw FormatError("silhouette mask must be binary");
  Mask cur = align_once(raw.mask, target_h, target_w);
  constexpr int kMaxPasses = 16;
  for (int pass = 0; pass < kMaxPasses; ++pass) {
    Mask next = align_once(cur, target_h, target_w);
    if (next == cur) break;
    cur = std::move(next);
  }
  SilhouetteFrame out;
  out.mask = std::move(cur);
  out.source_size = raw.source_size.first > 0 ? raw.source_size : std::pair{raw.height(), raw.width()};
  return out;
}

std::vector<Index> sample_indices(Index seq_length, Index clip_length, SampleMode mode, std::mt19937_64& rng) {
  if (seq_length < 1) throw EmptyInput("cannot sample from an empty sequence");
  std::vector<Index> idx;
  if (mode == SampleMode::EvalFull) {
    for (Index i = 0; i < seq_length; ++i) idx.push_back(i);
    return idx;
  }
  if (clip_length < 1) throw ConfigError("clip_length must be >= 1");
  Index start = 0;
  if (seq_length > clip_length)
    start = static_cast<Index>(uniform_below(rng, static_cast<std::uint64_t>(seq_length - clip_length + 1)));
  for (Index i = 0; i < clip_length; ++i) idx.push_back((start + i) % seq_length);
  return idx;
}

SilhouetteClip sample_clip(const SilhouetteClip& seq, Index clip_length, SampleMode mode, std::mt19937_64& rng) {
  SilhouetteClip out = seq;
  out.frames.clear();
  for (Index i : sample_indices(seq.length(), clip_length, mode, rng))
    out.frames.push_back(seq.frames[static_cast<std::size_t>(i)]);
  return out;
}

TensorF clips_to_tensor(const std::vector<const SilhouetteClip*>& clips) {
  if (clips.empty() || clips.front()->frames.empty()) throw EmptyInput("no clips to stack");
  const Index b = static_cast<Index>(clips.size()), t = clips.front()->length();
  const Index h = clips.front()->frames.front().height(), w = clips.front()->frames.front().width();
  TensorF x({b, 1, t, h, w});
  for (Index n = 0; n < b; ++n) {
    const auto& clip = *clips[static_cast<std::size_t>(n)];
    if (clip.length() != t) throw ShapeMismatch("clips in a batch must share their length");
    for (Index f = 0; f < t; ++f) {
      const auto& m = clip.frames[static_cast<std::size_t>(f)].mask;
      if (m.rows() != h || m.cols() != w) throw ShapeMismatch("frames in a batch must share their size");
      x.flat().segment((n * t + f) * h * w, h * w) = Eigen::Map<const Vector<std::uint8_t>>(m.data(), h * w).cast<float>();
    }
  }
  return x;
}

}  // namespace cvvnet
