#pragma once

// Probe-gallery retrieval: per-part Euclidean distance, rank-k, mAP and
// view x condition report tables.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "cvvnet/gait.hpp"

namespace cvvnet {

struct EvalRecord {
  Eigen::MatrixXf embedding;  // parts x dim
  int identity = 0;
  ViewGroup view_group = ViewGroup::Low;
  Condition condition = Condition::NM;
  std::int64_t sequence_id = 0;
};

/// Sum over parts of the Euclidean distance between corresponding rows.
Eigen::VectorXd pairwise_distance(const EvalRecord& probe, const std::vector<EvalRecord>& gallery);

/// Gallery indices by ascending distance, ties by ascending sequence_id,
/// with the probe's own sequence_id removed. Throws EmptyGalleryAfterExclusion.
std::vector<std::size_t> ranked_gallery(const EvalRecord& probe, const std::vector<EvalRecord>& gallery);

struct RetrievalStats {
  double rank1 = 0, rank5 = 0, map = 0;  // percent
  Index probes = 0;
  Index skipped_map = 0;  // probes without any positive in the gallery
};

double rank_k(const std::vector<EvalRecord>& probes, const std::vector<EvalRecord>& gallery, Index k);
/// Probes with no positive are skipped and counted in *skipped.
double mean_average_precision(const std::vector<EvalRecord>& probes, const std::vector<EvalRecord>& gallery,
                              Index* skipped = nullptr);
RetrievalStats retrieval_stats(const std::vector<EvalRecord>& probes, const std::vector<EvalRecord>& gallery);

enum class Protocol { DroneGaitStyle, FlatStyle };

struct EvalReport {
  Protocol protocol = Protocol::FlatStyle;
  /// [view][condition] rank-1 percent; NaN for cells without probes.
  std::array<std::array<double, 3>, 3> rank1{};
  std::array<std::array<Index, 3>, 3> probes{};
  RetrievalStats flat;

  std::string table(const std::string& title = "") const;
  std::string key_values() const;
};

/// DroneGaitStyle: each (view, condition) cell's sequences probe the whole
/// record set, self excluded. FlatStyle: one rank-1/5/mAP over all records.
/// Throws MissingLabels if a record has an out-of-range label.
EvalReport cross_view_report(const std::vector<EvalRecord>& records, Protocol protocol);
/// As above with an explicit gallery; probes are grouped by their cell.
EvalReport cross_view_report(const std::vector<EvalRecord>& probes, const std::vector<EvalRecord>& gallery,
                             Protocol protocol);

/// Flat binary table with a text header.
void write_embeddings(const std::string& path, const std::vector<EvalRecord>& records);
std::vector<EvalRecord> read_embeddings(const std::string& path);

}  // namespace cvvnet
