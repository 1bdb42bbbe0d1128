#pragma once

// Sequence collections: the synthetic manifest, rendering, and the on-disk
// layout (one directory of frames per sequence plus an index of key=value
// records).

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cvvnet/gait.hpp"
#include "cvvnet/walker.hpp"

namespace cvvnet {

struct Sequence {
  std::string name;          // unique, filesystem safe
  std::int64_t sequence_id;  // unique within a dataset; ranking tie-break
  int sequence_index = 0;    // position among the identity's sequences in one (view, condition) cell
  SilhouetteClip clip;       // aligned frames
};

struct Dataset {
  std::vector<Sequence> sequences;

  std::vector<int> identities() const;  // sorted, unique
  Dataset filter(const std::function<bool(const Sequence&)>& keep) const;
};

struct ManifestEntry {
  int identity = 0;
  std::uint64_t identity_seed = 0;
  double vertical_angle_deg = 0.0;
  Condition condition = Condition::NM;
  Index n_frames = 30;
  std::uint64_t noise_seed = 0;
  int sequence_index = 0;
};

struct SynthConfig {
  int identities = 16;
  int sequences_per_cell = 2;
  Index n_frames = 30;
  std::uint64_t seed = 0;
  /// Low sequences use this angle; Mid and High draw uniformly in [30, 60) and [60, 80].
  double low_angle_deg = 0.0;
};

/// Identities x views x conditions x sequences, ordered that way.
std::vector<ManifestEntry> make_manifest(const SynthConfig& config);
std::string format_manifest(const std::vector<ManifestEntry>& entries);
std::vector<ManifestEntry> parse_manifest(const std::string& text);
void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries);
std::vector<ManifestEntry> read_manifest(const std::string& path);

std::string sequence_name(const ManifestEntry& e);
/// Renders and aligns one manifest entry.
Sequence render_entry(const ManifestEntry& entry, std::int64_t sequence_id);
Dataset render_manifest(const std::vector<ManifestEntry>& entries);

/// Frames go to <dir>/<name>/NNNN.<ext>; <dir>/index.txt holds one record per sequence.
void write_dataset(const std::string& dir, const Dataset& data, const std::string& ext = "pgm");
/// Frames that are not already 64x44 are aligned on load.
Dataset read_dataset(const std::string& dir);

}  // namespace cvvnet
