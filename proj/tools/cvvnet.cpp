// Command-line entry point. Exit codes: 0 success, 1 usage error, 2 runtime failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "cvvnet/analysis.hpp"
#include "cvvnet/experiment.hpp"

using namespace cvvnet;
namespace fs = std::filesystem;

namespace {

constexpr const char* kOutEnv = "CVVNET_OUT";

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "key=value configuration file")->check(CLI::ExistingFile);
  sub->add_option("--seed", c.seed, "overrides the configured seed");
  const char* env = std::getenv(kOutEnv);
  c.out = env && *env ? env : "cvvnet_out";
  sub->add_option("--out", c.out, std::string("output directory (default: $") + kOutEnv + " or ./cvvnet_out)")
      ->capture_default_str();
}

KeyValues load_config(const Common& c) { return c.config.empty() ? KeyValues{} : KeyValues::load(c.config); }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write '" + path.string() + "'");
  out << text;
}

struct Selection {
  std::vector<std::string> views, conditions;
  int sequence_index = -1;

  void add(CLI::App* sub, int default_index) {
    sequence_index = default_index;
    sub->add_option("--views", views, "view groups to keep (Low, Mid, High)")->delimiter(',');
    sub->add_option("--conditions", conditions, "conditions to keep (NM, BG, CL)")->delimiter(',');
    sub->add_option("--sequence-index", sequence_index, "keep only this sequence_index; -1 keeps all")
        ->capture_default_str();
  }

  Dataset apply(const Dataset& d) const {
    std::vector<ViewGroup> vs;
    std::vector<Condition> cs;
    for (const auto& v : views) vs.push_back(parse_view_group(v));
    for (const auto& c : conditions) cs.push_back(parse_condition(c));
    auto out = d.filter([&](const Sequence& s) {
      return (vs.empty() || std::find(vs.begin(), vs.end(), s.clip.view_group) != vs.end()) &&
             (cs.empty() || std::find(cs.begin(), cs.end(), s.clip.condition) != cs.end()) &&
             (sequence_index < 0 || s.sequence_index == sequence_index);
    });
    if (out.sequences.empty()) throw EmptyInput("the selection keeps no sequences");
    return out;
  }
};

CvvNet<float> load_checkpoint_model(const std::string& path) {
  const fs::path p(path);
  return load_model(fs::is_directory(p) ? (p / "model.cvva").string() : path);
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  Common common;
  std::string format = "pgm";
  std::string manifest;
};

int run_synth(const SynthArgs& a) {
  std::vector<ManifestEntry> entries;
  if (!a.manifest.empty()) {
    entries = read_manifest(a.manifest);
  } else {
    const KeyValues kv = load_config(a.common);
    SynthConfig sc;
    if (kv.has("synth.identities")) sc.identities = static_cast<int>(parse_index("synth.identities", kv.get("synth.identities")));
    if (kv.has("synth.sequences_per_cell"))
      sc.sequences_per_cell = static_cast<int>(parse_index("synth.sequences_per_cell", kv.get("synth.sequences_per_cell")));
    if (kv.has("synth.n_frames")) sc.n_frames = parse_index("synth.n_frames", kv.get("synth.n_frames"));
    if (kv.has("synth.low_angle_deg")) sc.low_angle_deg = parse_real("synth.low_angle_deg", kv.get("synth.low_angle_deg"));
    if (kv.has("synth.seed")) sc.seed = parse_u64("synth.seed", kv.get("synth.seed"));
    if (const auto extra = kv.unread(); !extra.empty()) throw ConfigError("unknown config key '" + extra.front() + "'");
    if (a.common.seed) sc.seed = *a.common.seed;
    entries = make_manifest(sc);
  }
  const fs::path out(a.common.out);
  fs::create_directories(out);
  write_manifest((out / "manifest.txt").string(), entries);
  const Dataset data = render_manifest(entries);
  write_dataset((out / "data").string(), data, a.format);
  std::cout << "wrote " << data.sequences.size() << " sequences to " << (out / "data").string() << "\n";
  return 0;
}

struct TrainArgs {
  Common common;
  std::string data, resume;
  Selection select;
  std::optional<Index> steps;
};

int run_train(const TrainArgs& a) {
  const Dataset data = a.select.apply(read_dataset(a.data));
  const KeyValues kv = load_config(a.common);
  KeyValues merged = DeskConfig::defaults().train.to_kv();
  for (const auto& [k, v] : kv.values()) merged.set(k, v);
  if (!kv.has("model.num_classes")) merged.set("model.num_classes", std::to_string(data.identities().size()));
  if (a.common.seed) {
    merged.set("seed", std::to_string(*a.common.seed));
    merged.set("model.init_seed", std::to_string(*a.common.seed));
  }
  if (a.steps) {
    merged.set("steps", std::to_string(*a.steps));
    if (!kv.has("schedule.total_steps")) merged.set("schedule.total_steps", std::to_string(*a.steps));
  }
  const TrainConfig cfg = TrainConfig::from_kv(merged);
  fs::create_directories(a.common.out);
  Trainer trainer = a.resume.empty() ? Trainer(cfg, data, a.common.out) : Trainer::resume(a.resume, data, a.common.out);
  if (!a.resume.empty() && a.steps) trainer.set_steps(*a.steps);
  const auto records = trainer.run();
  if (!records.empty())
    std::cout << "step " << records.back().step << " loss " << records.back().loss.total << "\n";
  std::cout << "final checkpoint " << trainer.checkpoint_dir(trainer.current_step()) << "\n";
  return 0;
}

struct EmbedArgs {
  Common common;
  std::string checkpoint, data;
  Selection select;
};

int run_embed(const EmbedArgs& a) {
  auto model = load_checkpoint_model(a.checkpoint);
  const Dataset data = a.select.apply(read_dataset(a.data));
  fs::create_directories(a.common.out);
  const auto path = fs::path(a.common.out) / "embeddings.bin";
  write_embeddings(path.string(), embed_dataset(model, data));
  std::cout << "wrote " << data.sequences.size() << " embeddings to " << path.string() << "\n";
  return 0;
}

struct EvalArgs {
  Common common;
  std::string probes, gallery;
  std::string protocol = "drone";
};

int run_eval(const EvalArgs& a) {
  const auto probes = read_embeddings(a.probes);
  const auto gallery = a.gallery.empty() ? probes : read_embeddings(a.gallery);
  const Protocol p = a.protocol == "flat" ? Protocol::FlatStyle : Protocol::DroneGaitStyle;
  const EvalReport r = cross_view_report(probes, gallery, p);
  fs::create_directories(a.common.out);
  const std::string table = r.table();
  write_text(fs::path(a.common.out) / "report.txt", r.key_values());
  write_text(fs::path(a.common.out) / "table.txt", table);
  char line[64];
  std::snprintf(line, sizeof line, "rank-1 = %.1f\n", r.flat.rank1);
  std::cout << table << line;
  return 0;
}

struct AblateArgs {
  Common common;
  int seeds = 3;
  std::optional<Index> steps;
};

int run_ablate(const AblateArgs& a) {
  DeskConfig desk = DeskConfig::from_kv(load_config(a.common));
  if (a.common.seed) {
    desk.data.seed = *a.common.seed;
    desk.train.seed = *a.common.seed;
    desk.train.model.init_seed = *a.common.seed;
  }
  if (a.steps) {
    desk.train.steps = *a.steps;
    desk.train.schedule.total_steps = *a.steps;
    desk.train.validate();
  }
  const DeskSplit split = desk_split(render_manifest(make_manifest(desk.data)));
  const auto rows = run_ablation(desk, split, a.seeds, [](const std::string& s) { std::cerr << s << std::endl; });
  const std::string table = ablation_table(rows);
  fs::create_directories(a.common.out);
  write_text(fs::path(a.common.out) / "ablation.txt", table);
  write_text(fs::path(a.common.out) / "config.txt", desk.to_kv().dump());
  std::cout << table;
  return 0;
}

struct AnalysisArgs {
  Common common;
  std::string checkpoint, data, sequence;
  std::string layer = "msaga.1";
  std::string reduce = "mean";
  double alpha = 0.5;
};

// A checkpointed model, or a freshly initialized one from the config.
CvvNet<float> analysis_model(const AnalysisArgs& a) {
  if (!a.checkpoint.empty()) return load_checkpoint_model(a.checkpoint);
  const KeyValues kv = load_config(a.common);
  BackboneConfig m = DeskConfig::defaults().train.model;
  read_backbone(kv, m);
  if (const auto extra = kv.unread(); !extra.empty()) throw ConfigError("unknown config key '" + extra.front() + "'");
  if (a.common.seed) m.init_seed = *a.common.seed;
  return CvvNet<float>(m);
}

// A named sequence from a dataset, or one synthetic Low NM walk.
SilhouetteClip analysis_clip(const AnalysisArgs& a) {
  if (!a.data.empty()) {
    const Dataset d = read_dataset(a.data);
    for (const auto& s : d.sequences)
      if (a.sequence.empty() || s.name == a.sequence) return s.clip;
    throw EmptyInput("sequence '" + a.sequence + "' not found in " + a.data);
  }
  SynthConfig sc;
  sc.identities = 1;
  sc.sequences_per_cell = 1;
  sc.seed = a.common.seed.value_or(0);
  return render_entry(make_manifest(sc).front(), 0).clip;
}

int run_spectrum(const AnalysisArgs& a) {
  auto model = analysis_model(a);
  const auto clip = analysis_clip(a);
  const auto names = model.layer_names();
  if (std::find(names.begin(), names.end(), a.layer) == names.end()) throw UnknownLayer("layer '" + a.layer + "' is not captured");
  LayerCapture<float> capture;
  model.forward(clips_to_tensor({&clip}), Mode::Eval, &capture);
  const auto s = feature_spectrum(capture.at(a.layer), parse_channel_reduce(a.reduce));
  const fs::path out(a.common.out);
  fs::create_directories(out);
  write_png((out / "spectrum.png").string(), spectrum_image(s));
  write_text(out / "spectrum.csv", radial_csv(s));
  std::cout << "layer " << a.layer << " grid " << s.magnitude.rows() << "x" << s.magnitude.cols() << ", "
            << s.radial_profile.size() << " radial bands\n";
  return 0;
}

int run_heatmap(const AnalysisArgs& a) {
  auto model = analysis_model(a);
  const auto o = activation_heatmap(model, analysis_clip(a), a.layer, a.alpha);
  const fs::path out(a.common.out);
  fs::create_directories(out);
  write_png((out / "heatmap.png").string(), o.blend);
  Gray8 act(o.activation.rows(), o.activation.cols());
  for (Index r = 0; r < act.rows(); ++r)
    for (Index c = 0; c < act.cols(); ++c) act(r, c) = static_cast<std::uint8_t>(std::lround(255.0 * o.activation(r, c)));
  write_png((out / "activation.png").string(), act);
  std::cout << "layer " << a.layer << " heatmap " << o.activation.rows() << "x" << o.activation.cols() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-vertical-view gait recognition toolkit"};
  app.require_subcommand(1);
  // Usage errors print the offending flag followed by the full grammar.
  app.failure_message(CLI::FailureMessage::help);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "generate a manifest-driven synthetic walker dataset");
  add_common(s, synth.common);
  s->add_option("--format", synth.format, "frame image format")->check(CLI::IsMember({"pgm", "png"}))->capture_default_str();
  s->add_option("--manifest", synth.manifest, "regenerate from an existing manifest")->check(CLI::ExistingFile);

  TrainArgs train;
  auto* t = app.add_subcommand("train", "train from a config file");
  add_common(t, train.common);
  t->add_option("--data", train.data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  t->add_option("--resume", train.resume, "checkpoint directory to resume from")->check(CLI::ExistingDirectory);
  t->add_option("--steps", train.steps, "overrides the configured step count")->check(CLI::NonNegativeNumber);
  train.select.add(t, 0);

  EmbedArgs embed;
  auto* e = app.add_subcommand("embed", "export embeddings for a dataset split");
  add_common(e, embed.common);
  e->add_option("--checkpoint", embed.checkpoint, "checkpoint directory or model archive")->required()->check(CLI::ExistingPath);
  e->add_option("--data", embed.data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  embed.select.add(e, -1);

  EvalArgs eval;
  auto* v = app.add_subcommand("eval", "retrieval report from exported embeddings");
  add_common(v, eval.common);
  v->add_option("--probes", eval.probes, "probe embeddings")->required()->check(CLI::ExistingFile);
  v->add_option("--gallery", eval.gallery, "gallery embeddings (default: the probes, self excluded)")->check(CLI::ExistingFile);
  v->add_option("--protocol", eval.protocol, "report layout")->check(CLI::IsMember({"drone", "flat"}))->capture_default_str();

  AblateArgs ablate;
  auto* b = app.add_subcommand("ablate", "extractor x aggregator grid at desk scale");
  add_common(b, ablate.common);
  b->add_option("--seeds", ablate.seeds, "seeds per configuration")->check(CLI::PositiveNumber)->capture_default_str();
  b->add_option("--steps", ablate.steps, "overrides the training length")->check(CLI::PositiveNumber);

  AnalysisArgs spectrum, heatmap;
  for (auto [name, help, args] : {std::tuple{"spectrum", "feature-map frequency spectrum (PNG + CSV)", &spectrum},
                                  std::tuple{"heatmap", "activation heatmap over a silhouette (PNG)", &heatmap}}) {
    auto* sub = app.add_subcommand(name, help);
    add_common(sub, args->common);
    sub->add_option("--checkpoint", args->checkpoint, "checkpoint directory or model archive (default: untrained)")
        ->check(CLI::ExistingPath);
    sub->add_option("--data", args->data, "dataset directory (default: one synthetic walk)")->check(CLI::ExistingDirectory);
    sub->add_option("--sequence", args->sequence, "sequence name within --data (default: the first)");
    sub->add_option("--layer", args->layer, "captured layer name")->capture_default_str();
    if (args == &spectrum)
      sub->add_option("--reduce", args->reduce, "channel reduction")->check(CLI::IsMember({"mean", "max"}))->capture_default_str();
    else
      sub->add_option("--alpha", args->alpha, "overlay opacity")->check(CLI::Range(0.0, 1.0))->capture_default_str();
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*s) return run_synth(synth);
    if (*t) return run_train(train);
    if (*e) return run_embed(embed);
    if (*v) return run_eval(eval);
    if (*b) return run_ablate(ablate);
    if (app.got_subcommand("spectrum")) return run_spectrum(spectrum);
    if (app.got_subcommand("heatmap")) return run_heatmap(heatmap);
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 2;
  }
  return 1;
}
