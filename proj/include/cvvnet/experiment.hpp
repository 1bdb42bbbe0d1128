#pragma once

// Desk-scale learning runs on the synthetic walker set and the extractor x
// aggregator ablation grid built on them.

#include <string>
#include <vector>

#include "cvvnet/training.hpp"

namespace cvvnet {

/// Split used by every desk run (closed set over all identities):
///   train   sequence_index 0, every view and condition
///   gallery Low, sequence_index 0
///   probes  Low sequence_index 1 (same view) and High sequence_index 1 (cross view)
/// Probe sequences are never seen in training.
struct DeskConfig {
  SynthConfig data;
  TrainConfig train;

  /// Reduced widths and schedule that fit a single CPU core.
  static DeskConfig defaults();
  /// Reads "desk.*" data keys plus any TrainConfig key; unknown keys raise ConfigError.
  static DeskConfig from_kv(const KeyValues& kv);
  KeyValues to_kv() const;
};

struct DeskSplit {
  Dataset train, gallery, low_probes, high_probes;
};
DeskSplit desk_split(const Dataset& all);

struct DeskResult {
  double low_low_rank1 = 0;   // percent
  double low_high_rank1 = 0;  // percent
  EvalReport low_high;        // DroneGaitStyle over the High probes
  std::vector<StepRecord> trajectory;
  double train_seconds = 0, eval_seconds = 0;
};

/// Trains from scratch on split.train and evaluates. out_dir may be empty.
DeskResult run_desk(const TrainConfig& train, const DeskSplit& split, const std::string& out_dir = "");

struct AblationRow {
  Extractor extractor;
  Aggregator aggregator;
  std::vector<DeskResult> runs;  // one per seed

  std::string label() const;
  /// Seed-mean cross-view rank-1, overall and per condition.
  double mean_rank1() const;
  double mean_rank1(Condition c) const;
};

/// Rows in the order P3D-{Add, Concat, DGA}, HLFE-{Add, Concat, DGA}; seed s
/// sets both the initialization and the data-order seed to base_seed + s.
/// progress, when set, receives one line per finished run.
std::vector<AblationRow> run_ablation(const DeskConfig& desk, const DeskSplit& split, int seeds,
                                      const std::function<void(const std::string&)>& progress = {});
/// Six rows with NM/BG/CL columns plus their mean, as seed-mean Low->High rank-1.
std::string ablation_table(const std::vector<AblationRow>& rows);

}  // namespace cvvnet
