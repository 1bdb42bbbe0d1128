#pragma once

// Procedural articulated walker rendered through an elevated pinhole camera.
// Substitutes for restricted gait datasets at desk scale.

#include <array>
#include <cstdint>

#include "cvvnet/gait.hpp"

namespace cvvnet {

struct WalkerSpec {
  std::uint64_t identity_seed = 0;
  /// torso, head, upper leg, lower leg, upper arm, lower arm (body-height units).
  std::array<double, 6> limb_lengths{0.32, 0.12, 0.25, 0.25, 0.18, 0.16};
  double cadence_hz = 1.0;
  double stride_amplitude_rad = 0.45;
  double body_width = 0.06;

  double torso() const { return limb_lengths[0]; }
  double head() const { return limb_lengths[1]; }
  double upper_leg() const { return limb_lengths[2]; }
  double lower_leg() const { return limb_lengths[3]; }
  double upper_arm() const { return limb_lengths[4]; }
  double lower_arm() const { return limb_lengths[5]; }

  /// Deterministic draw of every field from the seed.
  static WalkerSpec from_seed(std::uint64_t seed);
  /// Throws ConfigError on nonpositive lengths or cadence outside [0.5, 2.0] Hz.
  void validate() const;
};

struct RenderOptions {
  Index canvas_height = 128;
  Index canvas_width = 88;
  double fps = 15.0;
  double camera_distance = 5.0;  // body heights
  double focal_px = 480.0;
  double walk_azimuth_deg = 20.0;  // walking direction relative to the image plane
  double coat_factor = 1.4;        // CL radius inflation
  double jitter = 0.08;            // relative per-frame radius jitter
};

/// Renders n_frames raw (unaligned) binary frames of the walker seen from
/// the given elevation. noise_seed only perturbs segment radii per frame.
/// Throws InvalidAngle outside [0, 80] degrees.
SilhouetteClip synthesize_walker_clip(const WalkerSpec& spec, double vertical_angle_deg, Condition condition,
                                      Index n_frames, std::uint64_t noise_seed, int identity = 0,
                                      const RenderOptions& options = {});

}  // namespace cvvnet
