#pragma once

// Silhouette domain types, alignment to the network input size, and clip
// sampling.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "cvvnet/errors.hpp"
#include "cvvnet/tensor.hpp"

namespace cvvnet {

using Mask = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr Index kFrameHeight = 64;
inline constexpr Index kFrameWidth = 44;
inline constexpr Index kDefaultClipLength = 30;

enum class ViewGroup { Low, Mid, High };
enum class Condition { NM, BG, CL };

inline constexpr ViewGroup kViewGroups[] = {ViewGroup::Low, ViewGroup::Mid, ViewGroup::High};
inline constexpr Condition kConditions[] = {Condition::NM, Condition::BG, Condition::CL};

std::string to_string(ViewGroup v);
std::string to_string(Condition c);
ViewGroup parse_view_group(const std::string& s);
Condition parse_condition(const std::string& s);

/// Bins: Low [0, 30), Mid [30, 60), High [60, 80]. Throws InvalidAngle outside [0, 80].
ViewGroup view_group_for_angle(double angle_deg);

struct SilhouetteFrame {
  Mask mask;  // values in {0, 1}
  std::pair<Index, Index> source_size{0, 0};

  Index height() const { return mask.rows(); }
  Index width() const { return mask.cols(); }
  Index foreground() const;
  bool is_binary() const;
  bool operator==(const SilhouetteFrame& o) const { return mask == o.mask; }
};

struct SilhouetteClip {
  std::vector<SilhouetteFrame> frames;
  int identity = 0;
  ViewGroup view_group = ViewGroup::Low;
  Condition condition = Condition::NM;
  double vertical_angle_deg = 0.0;

  Index length() const { return static_cast<Index>(frames.size()); }
};

/// Tight vertical crop, horizontal centring on the foreground centroid,
/// isotropic scaling to target height, width crop/pad, bilinear
/// interpolation and a 0.5 threshold. The sampling grid is aligned to the
/// first and last foreground rows and to integer multiples of the scale
/// step horizontally, and the result is re-aligned until it is a fixed
/// point, so preprocess(preprocess(f)) == preprocess(f).
SilhouetteFrame preprocess_silhouette(const SilhouetteFrame& raw, Index target_h = kFrameHeight,
                                      Index target_w = kFrameWidth);

enum class SampleMode { TrainRandom, EvalFull };

/// TrainRandom: one contiguous window of clip_length frames with a uniform
/// start over the valid range; a sequence shorter than the window starts at
/// frame 0 and wraps. EvalFull: the whole sequence.
std::vector<Index> sample_indices(Index seq_length, Index clip_length, SampleMode mode, std::mt19937_64& rng);

SilhouetteClip sample_clip(const SilhouetteClip& seq, Index clip_length, SampleMode mode, std::mt19937_64& rng);

/// Stacks equally long clips into a (B, 1, T, H, W) float batch.
TensorF clips_to_tensor(const std::vector<const SilhouetteClip*>& clips);

}  // namespace cvvnet
