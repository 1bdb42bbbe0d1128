#include "cvvnet/experiment.hpp"

#include <chrono>
#include <cstdio>
#include <sstream>

namespace cvvnet {

DeskConfig DeskConfig::defaults() {
  DeskConfig d;
  d.data.identities = 16;
  d.data.sequences_per_cell = 2;
  d.data.n_frames = 30;
  auto& m = d.train.model;
  m.stage_channels = {8, 16};
  m.n_heads = 2;
  m.num_classes = d.data.identities;
  auto& t = d.train;
  t.p = 8;
  t.k = 2;
  t.clip_length = 8;
  t.steps = 600;
  t.schedule.total_steps = t.steps;
  // Short horizons need a larger step size; the warmup fraction and the
  // base:max:final ratios are unchanged.
  t.schedule.base_lr *= 5;
  t.schedule.max_lr *= 5;
  return d;
}

DeskConfig DeskConfig::from_kv(const KeyValues& kv) {
  DeskConfig d = defaults();
  // Start from the desk defaults, then let the file override any key.
  KeyValues merged = d.train.to_kv();
  for (const auto& [k, v] : kv.values()) merged.set(k, v);
  auto idx = [&](const char* key, auto& field) {
    if (merged.has(key)) field = static_cast<std::remove_reference_t<decltype(field)>>(parse_index(key, merged.get(key)));
  };
  idx("desk.identities", d.data.identities);
  idx("desk.sequences_per_cell", d.data.sequences_per_cell);
  idx("desk.n_frames", d.data.n_frames);
  if (merged.has("desk.seed")) d.data.seed = parse_u64("desk.seed", merged.get("desk.seed"));
  if (merged.has("desk.low_angle_deg")) d.data.low_angle_deg = parse_real("desk.low_angle_deg", merged.get("desk.low_angle_deg"));
  d.train = TrainConfig::from_kv(merged);
  if (d.data.sequences_per_cell < 2) throw ConfigError("desk.sequences_per_cell must be >= 2 to hold out probes");
  return d;
}

KeyValues DeskConfig::to_kv() const {
  KeyValues kv = train.to_kv();
  kv.set("desk.identities", std::to_string(data.identities));
  kv.set("desk.sequences_per_cell", std::to_string(data.sequences_per_cell));
  kv.set("desk.n_frames", std::to_string(data.n_frames));
  kv.set("desk.seed", std::to_string(data.seed));
  kv.set("desk.low_angle_deg", format_real(data.low_angle_deg));
  return kv;
}

DeskSplit desk_split(const Dataset& all) {
  DeskSplit s;
  s.train = all.filter([](const Sequence& q) { return q.sequence_index == 0; });
  s.gallery = all.filter([](const Sequence& q) { return q.sequence_index == 0 && q.clip.view_group == ViewGroup::Low; });
  s.low_probes =
      all.filter([](const Sequence& q) { return q.sequence_index == 1 && q.clip.view_group == ViewGroup::Low; });
  s.high_probes =
      all.filter([](const Sequence& q) { return q.sequence_index == 1 && q.clip.view_group == ViewGroup::High; });
  if (s.gallery.sequences.empty() || s.low_probes.sequences.empty() || s.high_probes.sequences.empty())
    throw EmptyInput("desk split needs Low and High sequences with sequence_index 0 and 1");
  return s;
}

DeskResult run_desk(const TrainConfig& train, const DeskSplit& split, const std::string& out_dir) {
  using Clock = std::chrono::steady_clock;
  DeskResult r;
  const auto t0 = Clock::now();
  Trainer trainer(train, split.train, out_dir);
  r.trajectory = trainer.run();
  const auto t1 = Clock::now();
  const auto gallery = embed_dataset(trainer.model(), split.gallery);
  r.low_low_rank1 = rank_k(embed_dataset(trainer.model(), split.low_probes), gallery, 1);
  r.low_high = cross_view_report(embed_dataset(trainer.model(), split.high_probes), gallery, Protocol::DroneGaitStyle);
  r.low_high_rank1 = r.low_high.flat.rank1;
  r.train_seconds = std::chrono::duration<double>(t1 - t0).count();
  r.eval_seconds = std::chrono::duration<double>(Clock::now() - t1).count();
  return r;
}

std::string AblationRow::label() const { return to_string(extractor) + "-" + to_string(aggregator); }

double AblationRow::mean_rank1() const {
  double s = 0;
  for (const auto& r : runs) s += r.low_high_rank1;
  return runs.empty() ? 0.0 : s / static_cast<double>(runs.size());
}

double AblationRow::mean_rank1(Condition c) const {
  double s = 0;
  for (const auto& r : runs) s += r.low_high.rank1[static_cast<std::size_t>(ViewGroup::High)][static_cast<std::size_t>(c)];
  return runs.empty() ? 0.0 : s / static_cast<double>(runs.size());
}

std::vector<AblationRow> run_ablation(const DeskConfig& desk, const DeskSplit& split, int seeds,
                                      const std::function<void(const std::string&)>& progress) {
  if (seeds < 1) throw ConfigError("ablation needs at least one seed");
  std::vector<AblationRow> rows;
  for (Extractor e : {Extractor::P3D, Extractor::HLFE})
    for (Aggregator a : {Aggregator::Add, Aggregator::Concat, Aggregator::DGA}) {
      AblationRow row{e, a, {}};
      for (int s = 0; s < seeds; ++s) {
        TrainConfig t = desk.train;
        t.model.extractor = e;
        t.model.aggregator = a;
        t.model.init_seed = desk.train.model.init_seed + static_cast<std::uint64_t>(s);
        t.seed = desk.train.seed + static_cast<std::uint64_t>(s);
        row.runs.push_back(run_desk(t, split));
        if (progress) {
          char line[160];
          std::snprintf(line, sizeof line, "%s seed %d: Low->Low %.1f Low->High %.1f (%.0fs)", row.label().c_str(), s,
                        row.runs.back().low_low_rank1, row.runs.back().low_high_rank1,
                        row.runs.back().train_seconds + row.runs.back().eval_seconds);
          progress(line);
        }
      }
      rows.push_back(std::move(row));
    }
  return rows;
}

std::string ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  char line[128];
  std::snprintf(line, sizeof line, "%-12s %7s %7s %7s %7s\n", "model", "NM", "BG", "CL", "mean");
  out << line;
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%-12s %7.1f %7.1f %7.1f %7.1f\n", r.label().c_str(), r.mean_rank1(Condition::NM),
                  r.mean_rank1(Condition::BG), r.mean_rank1(Condition::CL), r.mean_rank1());
    out << line;
  }
  return out.str();
}

}  // namespace cvvnet
