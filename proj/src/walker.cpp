#include "cvvnet/walker.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include <Eigen/Geometry>

#include "cvvnet/seeds.hpp"

namespace cvvnet {

namespace {

using Vec3 = Eigen::Vector3d;
using Vec2 = Eigen::Vector2d;

double unit(std::mt19937_64& rng) { return unit_real(rng); }
double uniform(std::mt19937_64& rng, double lo, double hi) { return lo + (hi - lo) * unit(rng); }

struct Capsule {
  Vec3 a, b;
  double radius;
  bool body;  // inflated under CL
};

struct Camera {
  Vec3 position, right, up, forward;
  double focal, cx, cy;

  // Returns (u, v, depth) in canvas pixels.
  Eigen::Vector3d project(const Vec3& p) const {
    const Vec3 d = p - position;
    const double z = d.dot(forward);
    return {cx + focal * d.dot(right) / z, cy - focal * d.dot(up) / z, z};
  }
};

Camera make_camera(double elevation_deg, const RenderOptions& o, const Vec3& target) {
  const double el = elevation_deg * std::numbers::pi / 180.0;
  const double az = o.walk_azimuth_deg * std::numbers::pi / 180.0;
  // Horizontal direction from the walker towards the camera.
  const Vec3 toward(std::sin(az), -std::cos(az), 0.0);
  Camera c;
  c.position = target + o.camera_distance * (std::cos(el) * toward + std::sin(el) * Vec3::UnitZ());
  c.forward = (target - c.position).normalized();
  c.right = c.forward.cross(Vec3::UnitZ()).normalized();
  c.up = c.right.cross(c.forward);
  c.focal = o.focal_px;
  c.cx = static_cast<double>(o.canvas_width) / 2.0;
  c.cy = static_cast<double>(o.canvas_height) / 2.0;
  return c;
}

double segment_distance(const Vec2& p, const Vec2& a, const Vec2& b) {
  const Vec2 ab = b - a;
  const double len2 = ab.squaredNorm();
  const double t = len2 > 0 ? std::clamp((p - a).dot(ab) / len2, 0.0, 1.0) : 0.0;
  return (p - (a + t * ab)).norm();
}

void draw_capsule(Mask& m, const Camera& cam, const Capsule& c) {
  const auto pa = cam.project(c.a), pb = cam.project(c.b);
  const Vec2 a = pa.head<2>(), b = pb.head<2>();
  const double r = cam.focal * c.radius / (0.5 * (pa.z() + pb.z()));
  const Index r0 = std::max<Index>(0, static_cast<Index>(std::floor(std::min(a.y(), b.y()) - r)));
  const Index r1 = std::min<Index>(m.rows() - 1, static_cast<Index>(std::ceil(std::max(a.y(), b.y()) + r)));
  const Index c0 = std::max<Index>(0, static_cast<Index>(std::floor(std::min(a.x(), b.x()) - r)));
  const Index c1 = std::min<Index>(m.cols() - 1, static_cast<Index>(std::ceil(std::max(a.x(), b.x()) + r)));
  for (Index y = r0; y <= r1; ++y)
    for (Index x = c0; x <= c1; ++x)
      if (segment_distance(Vec2(static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5), a, b) <= r) m(y, x) = 1;
}

double cross(const Vec2& o, const Vec2& a, const Vec2& b) {
  return (a.x() - o.x()) * (b.y() - o.y()) - (a.y() - o.y()) * (b.x() - o.x());
}

// Fills the convex hull of the projected corners of an axis-aligned box.
void draw_box(Mask& m, const Camera& cam, const Vec3& center, const Vec3& half) {
  std::vector<Vec2> pts;
  for (int i = 0; i < 8; ++i) {
    const Vec3 s((i & 1) ? 1 : -1, (i & 2) ? 1 : -1, (i & 4) ? 1 : -1);
    pts.push_back(cam.project(center + s.cwiseProduct(half)).head<2>());
  }
  std::sort(pts.begin(), pts.end(), [](const Vec2& a, const Vec2& b) {
    return a.x() < b.x() || (a.x() == b.x() && a.y() < b.y());
  });
  // Andrew's monotone chain, counter-clockwise.
  std::vector<Vec2> hull(16);
  std::size_t k = 0;
  for (const auto& p : pts) {
    while (k >= 2 && cross(hull[k - 2], hull[k - 1], p) <= 0) --k;
    hull[k++] = p;
  }
  for (std::size_t i = pts.size() - 1, lower = k + 1; i-- > 0;) {
    while (k >= lower && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
    hull[k++] = pts[i];
  }
  hull.resize(k - 1);
  double xmin = 1e9, xmax = -1e9, ymin = 1e9, ymax = -1e9;
  for (const auto& p : hull) {
    xmin = std::min(xmin, p.x());
    xmax = std::max(xmax, p.x());
    ymin = std::min(ymin, p.y());
    ymax = std::max(ymax, p.y());
  }
  const Index r0 = std::max<Index>(0, static_cast<Index>(std::floor(ymin)));
  const Index r1 = std::min<Index>(m.rows() - 1, static_cast<Index>(std::ceil(ymax)));
  const Index c0 = std::max<Index>(0, static_cast<Index>(std::floor(xmin)));
  const Index c1 = std::min<Index>(m.cols() - 1, static_cast<Index>(std::ceil(xmax)));
  for (Index y = r0; y <= r1; ++y)
    for (Index x = c0; x <= c1; ++x) {
      const Vec2 p(static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5);
      bool inside = true;
      for (std::size_t i = 0; i < hull.size() && inside; ++i)
        inside = cross(hull[i], hull[(i + 1) % hull.size()], p) >= 0;
      if (inside) m(y, x) = 1;
    }
}

struct Pose {
  std::vector<Capsule> capsules;
  Vec3 pelvis;
  double hip_half_width;
};

Pose pose_at(const WalkerSpec& s, double phase) {
  const double amp = s.stride_amplitude_rad;
  const double leg = s.upper_leg() + s.lower_leg();
  const double bw = s.body_width;
  Pose pose;
  pose.hip_half_width = 1.2 * bw;
  // Pelvis bobs twice per cycle, lowest at double support.
  pose.pelvis = Vec3(0, 0, leg * (0.97 + 0.02 * std::cos(2 * phase)));
  const Vec3& p = pose.pelvis;
  const Vec3 neck = p + s.torso() * Vec3(std::sin(0.05), 0, std::cos(0.05));
  auto limb = [](const Vec3& root, double len, double angle) {
    return Vec3(root + len * Vec3(std::sin(angle), 0, -std::cos(angle)));
  };
  auto& caps = pose.capsules;
  for (int side : {-1, 1}) {
    const double sgn = static_cast<double>(side);
    const double swing = std::sin(phase + (side < 0 ? 0.0 : std::numbers::pi));
    const double hip = amp * swing;
    const double knee = 1.1 * amp * std::max(0.0, std::sin(phase + 0.6 + (side < 0 ? 0.0 : std::numbers::pi)));
    const Vec3 hip_joint = p + Vec3(0, sgn * pose.hip_half_width, 0);
    const Vec3 knee_joint = limb(hip_joint, s.upper_leg(), hip);
    const Vec3 ankle = limb(knee_joint, s.lower_leg(), hip - knee);
    caps.push_back({hip_joint, knee_joint, 1.0 * bw, true});
    caps.push_back({knee_joint, ankle, 0.8 * bw, true});
    caps.push_back({ankle, ankle + Vec3(0.07, 0, -0.01), 0.5 * bw, true});

    const double shoulder = -0.7 * amp * swing;
    const Vec3 shoulder_joint = neck + Vec3(0, sgn * 1.8 * bw, -0.03);
    const Vec3 elbow = limb(shoulder_joint, s.upper_arm(), shoulder);
    const Vec3 wrist = limb(elbow, s.lower_arm(), shoulder + 0.3 + 0.2 * std::max(0.0, -swing));
    caps.push_back({shoulder_joint, elbow, 0.7 * bw, true});
    caps.push_back({elbow, wrist, 0.6 * bw, true});
    caps.push_back({hip_joint, shoulder_joint, 1.3 * bw, true});
  }
  caps.push_back({p, neck, 1.4 * bw, true});
  const Vec3 head_center = neck + Vec3(0, 0, 0.5 * s.head() + 0.01);
  caps.push_back({head_center, head_center, 0.5 * s.head(), false});
  return pose;
}

}  // namespace

WalkerSpec WalkerSpec::from_seed(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  WalkerSpec s;
  s.identity_seed = seed;
  s.limb_lengths = {uniform(rng, 0.27, 0.37), uniform(rng, 0.09, 0.15), uniform(rng, 0.20, 0.29),
                    uniform(rng, 0.20, 0.29), uniform(rng, 0.14, 0.22), uniform(rng, 0.12, 0.20)};
  s.cadence_hz = uniform(rng, 0.6, 1.6);
  s.stride_amplitude_rad = uniform(rng, 0.25, 0.6);
  s.body_width = uniform(rng, 0.04, 0.08);
  return s;
}

void WalkerSpec::validate() const {
  for (double l : limb_lengths)
    if (!(l > 0)) throw ConfigError("walker limb lengths must be positive");
  if (!(cadence_hz >= 0.5 && cadence_hz <= 2.0)) throw ConfigError("walker cadence must lie in [0.5, 2.0] Hz");
  if (!(body_width > 0) || !(stride_amplitude_rad > 0)) throw ConfigError("walker width and stride must be positive");
}

SilhouetteClip synthesize_walker_clip(const WalkerSpec& spec, double vertical_angle_deg, Condition condition,
                                      Index n_frames, std::uint64_t noise_seed, int identity,
                                      const RenderOptions& options) {
  SilhouetteClip clip;
  clip.view_group = view_group_for_angle(vertical_angle_deg);
  spec.validate();
  if (n_frames < 1) throw EmptyInput("n_frames must be >= 1");
  clip.identity = identity;
  clip.condition = condition;
  clip.vertical_angle_deg = vertical_angle_deg;

  const double leg = spec.upper_leg() + spec.lower_leg();
  const Vec3 target(0, 0, 0.5 * (leg + spec.torso() + spec.head()));
  const Camera cam = make_camera(vertical_angle_deg, options, target);
  std::mt19937_64 noise(noise_seed);
  const double inflate = condition == Condition::CL ? options.coat_factor : 1.0;

  for (Index f = 0; f < n_frames; ++f) {
    const double phase = 2 * std::numbers::pi * spec.cadence_hz * static_cast<double>(f) / options.fps;
    Pose pose = pose_at(spec, phase);
    SilhouetteFrame frame;
    frame.mask = Mask::Zero(options.canvas_height, options.canvas_width);
    frame.source_size = {options.canvas_height, options.canvas_width};
    for (auto& c : pose.capsules) {
      // One draw per capsule per frame regardless of condition keeps conditions comparable.
      const double j = 1.0 + options.jitter * (2.0 * unit(noise) - 1.0);
      c.radius *= j * (c.body ? inflate : 1.0);
      draw_capsule(frame.mask, cam, c);
    }
    const double bag_jitter = 1.0 + options.jitter * (2.0 * unit(noise) - 1.0);
    if (condition == Condition::BG) {
      const double bw = spec.body_width;
      const Vec3 center = pose.pelvis + Vec3(-0.02, -(pose.hip_half_width + 2.5 * bw), 0.3 * spec.torso());
      draw_box(frame.mask, cam, center, bag_jitter * Vec3(0.11, 0.04, 0.12));
    }
    clip.frames.push_back(std::move(frame));
  }
  return clip;
}

}  // namespace cvvnet
