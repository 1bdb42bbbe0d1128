#include "cvvnet/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>

namespace cvvnet {

Eigen::VectorXd pairwise_distance(const EvalRecord& probe, const std::vector<EvalRecord>& gallery) {
  Eigen::VectorXd d(static_cast<Index>(gallery.size()));
  const Eigen::MatrixXd p = probe.embedding.cast<double>();
  for (std::size_t g = 0; g < gallery.size(); ++g) {
    const auto& e = gallery[g].embedding;
    if (e.rows() != p.rows() || e.cols() != p.cols())
      throw ShapeMismatch("embedding " + std::to_string(e.rows()) + "x" + std::to_string(e.cols()) + " vs probe " +
                          std::to_string(p.rows()) + "x" + std::to_string(p.cols()));
    d(static_cast<Index>(g)) = (p - e.cast<double>()).rowwise().norm().sum();
  }
  return d;
}

std::vector<std::size_t> ranked_gallery(const EvalRecord& probe, const std::vector<EvalRecord>& gallery) {
  const Eigen::VectorXd d = pairwise_distance(probe, gallery);
  std::vector<std::size_t> idx;
  for (std::size_t g = 0; g < gallery.size(); ++g)
    if (gallery[g].sequence_id != probe.sequence_id) idx.push_back(g);
  if (idx.empty())
    throw EmptyGalleryAfterExclusion("probe " + std::to_string(probe.sequence_id) + " has no gallery candidate");
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    const double da = d(static_cast<Index>(a)), db = d(static_cast<Index>(b));
    return da < db || (da == db && gallery[a].sequence_id < gallery[b].sequence_id);
  });
  return idx;
}

namespace {

bool hit_within(const EvalRecord& probe, const std::vector<EvalRecord>& gallery, const std::vector<std::size_t>& order,
                Index k) {
  const std::size_t n = std::min(order.size(), static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < n; ++i)
    if (gallery[order[i]].identity == probe.identity) return true;
  return false;
}

// AP over the ranked list; nullopt when the gallery has no positive.
std::optional<double> average_precision(const EvalRecord& probe, const std::vector<EvalRecord>& gallery,
                                        const std::vector<std::size_t>& order) {
  double sum = 0;
  Index hits = 0;
  for (std::size_t i = 0; i < order.size(); ++i)
    if (gallery[order[i]].identity == probe.identity) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(i + 1);
    }
  if (hits == 0) return std::nullopt;
  return sum / static_cast<double>(hits);
}

void check_labels(const std::vector<EvalRecord>& records) {
  for (const auto& r : records) {
    const int v = static_cast<int>(r.view_group), c = static_cast<int>(r.condition);
    if (v < 0 || v > 2 || c < 0 || c > 2)
      throw MissingLabels("record " + std::to_string(r.sequence_id) + " lacks a valid view/condition label");
  }
}

}  // namespace

double rank_k(const std::vector<EvalRecord>& probes, const std::vector<EvalRecord>& gallery, Index k) {
  if (probes.empty()) throw EmptyInput("no probes");
  if (k < 1) throw ConfigError("k must be >= 1");
  Index hits = 0;
  for (const auto& p : probes) hits += hit_within(p, gallery, ranked_gallery(p, gallery), k);
  return 100.0 * static_cast<double>(hits) / static_cast<double>(probes.size());
}

double mean_average_precision(const std::vector<EvalRecord>& probes, const std::vector<EvalRecord>& gallery,
                              Index* skipped) {
  double sum = 0;
  Index used = 0, skip = 0;
  for (const auto& p : probes) {
    if (const auto ap = average_precision(p, gallery, ranked_gallery(p, gallery))) {
      sum += *ap;
      ++used;
    } else {
      ++skip;
    }
  }
  if (skipped) *skipped = skip;
  return used ? 100.0 * sum / static_cast<double>(used) : 0.0;
}

RetrievalStats retrieval_stats(const std::vector<EvalRecord>& probes, const std::vector<EvalRecord>& gallery) {
  RetrievalStats s;
  s.probes = static_cast<Index>(probes.size());
  if (probes.empty()) {
    s.rank1 = s.rank5 = s.map = std::numeric_limits<double>::quiet_NaN();
    return s;
  }
  Index h1 = 0, h5 = 0, used = 0;
  double ap_sum = 0;
  for (const auto& p : probes) {
    const auto order = ranked_gallery(p, gallery);
    h1 += hit_within(p, gallery, order, 1);
    h5 += hit_within(p, gallery, order, 5);
    if (const auto ap = average_precision(p, gallery, order)) {
      ap_sum += *ap;
      ++used;
    } else {
      ++s.skipped_map;
    }
  }
  const double n = static_cast<double>(probes.size());
  s.rank1 = 100.0 * static_cast<double>(h1) / n;
  s.rank5 = 100.0 * static_cast<double>(h5) / n;
  s.map = used ? 100.0 * ap_sum / static_cast<double>(used) : 0.0;
  return s;
}

EvalReport cross_view_report(const std::vector<EvalRecord>& records, Protocol protocol) {
  return cross_view_report(records, records, protocol);
}

EvalReport cross_view_report(const std::vector<EvalRecord>& probes, const std::vector<EvalRecord>& gallery,
                             Protocol protocol) {
  check_labels(probes);
  check_labels(gallery);
  EvalReport r;
  r.protocol = protocol;
  for (auto& row : r.rank1) row.fill(std::numeric_limits<double>::quiet_NaN());
  r.flat = retrieval_stats(probes, gallery);
  if (protocol == Protocol::FlatStyle) return r;
  for (ViewGroup v : kViewGroups)
    for (Condition c : kConditions) {
      std::vector<EvalRecord> cell;
      for (const auto& p : probes)
        if (p.view_group == v && p.condition == c) cell.push_back(p);
      const auto vi = static_cast<std::size_t>(v), ci = static_cast<std::size_t>(c);
      r.probes[vi][ci] = static_cast<Index>(cell.size());
      if (!cell.empty()) r.rank1[vi][ci] = rank_k(cell, gallery, 1);
    }
  return r;
}

namespace {

std::string cell_text(double v) {
  if (std::isnan(v)) return "-";
  char buf[16];
  std::snprintf(buf, sizeof buf, "%.1f", v);
  return buf;
}

}  // namespace

std::string EvalReport::table(const std::string& title) const {
  std::ostringstream out;
  if (!title.empty()) out << title << "\n";
  char line[128];
  if (protocol == Protocol::DroneGaitStyle) {
    std::snprintf(line, sizeof line, "%-6s %7s %7s %7s %7s\n", "view", "NM", "BG", "CL", "mean");
    out << line;
    for (ViewGroup v : kViewGroups) {
      const auto& row = rank1[static_cast<std::size_t>(v)];
      double sum = 0;
      int n = 0;
      for (double x : row)
        if (!std::isnan(x)) sum += x, ++n;
      std::snprintf(line, sizeof line, "%-6s %7s %7s %7s %7s\n", to_string(v).c_str(), cell_text(row[0]).c_str(),
                    cell_text(row[1]).c_str(), cell_text(row[2]).c_str(),
                    cell_text(n ? sum / n : std::numeric_limits<double>::quiet_NaN()).c_str());
      out << line;
    }
  }
  std::snprintf(line, sizeof line, "%-6s %7s %7s %7s\n%-6s %7s %7s %7s\n", "", "rank1", "rank5", "mAP", "all",
                cell_text(flat.rank1).c_str(), cell_text(flat.rank5).c_str(), cell_text(flat.map).c_str());
  out << line;
  return out.str();
}

std::string EvalReport::key_values() const {
  std::ostringstream out;
  out.precision(17);
  out << "protocol=" << (protocol == Protocol::DroneGaitStyle ? "DroneGaitStyle" : "FlatStyle") << "\n";
  out << "rank1=" << flat.rank1 << "\nrank5=" << flat.rank5 << "\nmap=" << flat.map << "\nprobes=" << flat.probes
      << "\nmap_skipped=" << flat.skipped_map << "\n";
  if (protocol == Protocol::DroneGaitStyle)
    for (ViewGroup v : kViewGroups)
      for (Condition c : kConditions) {
        const auto vi = static_cast<std::size_t>(v), ci = static_cast<std::size_t>(c);
        out << "rank1." << to_string(v) << "." << to_string(c) << "=" << rank1[vi][ci] << "\n";
      }
  return out.str();
}

namespace {
constexpr const char* kEmbedMagic = "cvvnet-embeddings 1";
}

void write_embeddings(const std::string& path, const std::vector<EvalRecord>& records) {
  const Index parts = records.empty() ? 0 : records.front().embedding.rows();
  const Index dim = records.empty() ? 0 : records.front().embedding.cols();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write '" + path + "'");
  out << kEmbedMagic << "\nrecords " << records.size() << "\nparts " << parts << "\ndim " << dim
      << "\nrow int64 sequence_id, int32 identity, uint8 view_group, uint8 condition, float32[parts*dim] "
         "row-major\ndata\n";
  for (const auto& r : records) {
    if (r.embedding.rows() != parts || r.embedding.cols() != dim)
      throw ShapeMismatch("all exported embeddings must share their shape");
    const std::int32_t id = r.identity;
    const std::uint8_t v = static_cast<std::uint8_t>(r.view_group), c = static_cast<std::uint8_t>(r.condition);
    out.write(reinterpret_cast<const char*>(&r.sequence_id), sizeof r.sequence_id);
    out.write(reinterpret_cast<const char*>(&id), sizeof id);
    out.write(reinterpret_cast<const char*>(&v), 1);
    out.write(reinterpret_cast<const char*>(&c), 1);
    const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> m = r.embedding;
    out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(float)));
  }
}

std::vector<EvalRecord> read_embeddings(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  std::string line;
  std::getline(in, line);
  if (line != kEmbedMagic) throw FormatError("'" + path + "' is not an embedding table");
  std::size_t n = 0;
  Index parts = 0, dim = 0;
  std::string key;
  in >> key >> n >> key >> parts >> key >> dim;
  std::getline(in, line);
  std::getline(in, line);  // row layout description
  std::getline(in, line);
  if (!in || line != "data") throw FormatError("'" + path + "': malformed header");
  std::vector<EvalRecord> out(n);
  for (auto& r : out) {
    std::int32_t id = 0;
    std::uint8_t v = 0, c = 0;
    in.read(reinterpret_cast<char*>(&r.sequence_id), sizeof r.sequence_id);
    in.read(reinterpret_cast<char*>(&id), sizeof id);
    in.read(reinterpret_cast<char*>(&v), 1);
    in.read(reinterpret_cast<char*>(&c), 1);
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> m(parts, dim);
    in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(float)));
    if (!in) throw FormatError("'" + path + "' is truncated");
    if (v > 2 || c > 2) throw MissingLabels("record " + std::to_string(r.sequence_id) + " has an invalid label");
    r.identity = id;
    r.view_group = static_cast<ViewGroup>(v);
    r.condition = static_cast<Condition>(c);
    r.embedding = m;
  }
  return out;
}

}  // namespace cvvnet
