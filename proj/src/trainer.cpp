#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cvvnet/seeds.hpp"
#include "cvvnet/training.hpp"

namespace cvvnet {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
  model.validate();
  loss.validate();
  schedule.validate();
  if (p < 1 || k < 1) throw ConfigError("sampler p and k must be >= 1");
  if (clip_length < 1) throw ConfigError("clip_length must be >= 1");
  if (steps < 0 || steps > schedule.total_steps) throw ConfigError("steps must lie in [0, schedule.total_steps]");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
}

KeyValues TrainConfig::to_kv() const {
  KeyValues kv;
  write_backbone(kv, model);
  kv.set("loss.alpha", format_real(loss.alpha));
  kv.set("loss.beta", format_real(loss.beta));
  kv.set("loss.margin", format_real(loss.margin));
  kv.set("schedule.base_lr", format_real(schedule.base_lr));
  kv.set("schedule.max_lr", format_real(schedule.max_lr));
  kv.set("schedule.total_steps", std::to_string(schedule.total_steps));
  kv.set("schedule.warmup_frac", format_real(schedule.warmup_frac));
  kv.set("schedule.weight_decay", format_real(schedule.weight_decay));
  kv.set("schedule.final_div", format_real(schedule.final_div));
  kv.set("augment.flip", augment.flip ? "true" : "false");
  kv.set("augment.rotate", augment.rotate ? "true" : "false");
  kv.set("augment.erase", augment.erase ? "true" : "false");
  kv.set("sampler.p", std::to_string(p));
  kv.set("sampler.k", std::to_string(k));
  kv.set("clip_length", std::to_string(clip_length));
  kv.set("steps", std::to_string(steps));
  kv.set("checkpoint_every", std::to_string(checkpoint_every));
  kv.set("seed", std::to_string(seed));
  return kv;
}

TrainConfig TrainConfig::from_kv(const KeyValues& kv) {
  TrainConfig c;
  read_backbone(kv, c.model);
  auto real = [&](const char* key, double& f) {
    if (kv.has(key)) f = parse_real(key, kv.get(key));
  };
  auto idx = [&](const char* key, Index& f) {
    if (kv.has(key)) f = parse_index(key, kv.get(key));
  };
  auto flag = [&](const char* key, bool& f) {
    if (kv.has(key)) f = parse_bool(key, kv.get(key));
  };
  real("loss.alpha", c.loss.alpha);
  real("loss.beta", c.loss.beta);
  real("loss.margin", c.loss.margin);
  real("schedule.base_lr", c.schedule.base_lr);
  real("schedule.max_lr", c.schedule.max_lr);
  idx("schedule.total_steps", c.schedule.total_steps);
  real("schedule.warmup_frac", c.schedule.warmup_frac);
  real("schedule.weight_decay", c.schedule.weight_decay);
  real("schedule.final_div", c.schedule.final_div);
  flag("augment.flip", c.augment.flip);
  flag("augment.rotate", c.augment.rotate);
  flag("augment.erase", c.augment.erase);
  idx("sampler.p", c.p);
  idx("sampler.k", c.k);
  idx("clip_length", c.clip_length);
  idx("steps", c.steps);
  idx("checkpoint_every", c.checkpoint_every);
  if (kv.has("seed")) c.seed = parse_u64("seed", kv.get("seed"));
  if (const auto extra = kv.unread(); !extra.empty()) throw ConfigError("unknown config key '" + extra.front() + "'");
  c.validate();
  return c;
}

namespace {

std::vector<int> labels_of(const Dataset& d) {
  std::vector<int> out;
  for (const auto& s : d.sequences) out.push_back(s.clip.identity);
  return out;
}

}  // namespace

Trainer::Trainer(TrainConfig config, const Dataset& train_set, std::string out_dir)
    : config_(std::move(config)),
      data_(&train_set),
      out_dir_(std::move(out_dir)),
      model_((config_.validate(), config_.model)),
      sampler_(labels_of(train_set), config_.p, config_.k, config_.seed) {
  const auto ids = train_set.identities();
  if (static_cast<Index>(ids.size()) > config_.model.num_classes)
    throw ConfigError("model.num_classes " + std::to_string(config_.model.num_classes) + " is below the " +
                      std::to_string(ids.size()) + " training identities");
  for (std::size_t i = 0; i < ids.size(); ++i) class_of_[ids[i]] = static_cast<int>(i);
  if (!out_dir_.empty()) fs::create_directories(out_dir_);
}

Trainer Trainer::resume(const std::string& checkpoint_dir, const Dataset& train_set, std::string out_dir) {
  const fs::path dir(checkpoint_dir);
  Trainer t(TrainConfig::from_kv(KeyValues::load((dir / "config.txt").string())), train_set, std::move(out_dir));
  const Archive model = load_archive((dir / "model.cvva").string());
  restore_model(model, t.model_);
  t.opt_.load(load_archive((dir / "optim.cvva").string()));
  t.step_ = parse_index("step", KeyValues::parse(model.manifest).get("step"));
  // Drop log rows the resumed run is about to recompute.
  if (!t.out_dir_.empty()) {
    const fs::path log = fs::path(t.out_dir_) / "metrics.tsv";
    if (fs::exists(log)) {
      std::ifstream in(log);
      std::string line, kept;
      while (std::getline(in, line)) {
        const bool header = line.rfind("step\t", 0) == 0;
        if (header || std::stol(line.substr(0, line.find('\t'))) < t.step_) kept += line + "\n";
      }
      in.close();
      std::ofstream(log) << kept;
    }
  }
  return t;
}

std::string Trainer::checkpoint_dir(Index step) const {
  char name[32];
  std::snprintf(name, sizeof name, "ckpt_%06ld", static_cast<long>(step));
  return (fs::path(out_dir_) / name).string();
}

void Trainer::save_checkpoint(const std::string& dir) {
  fs::create_directories(dir);
  const KeyValues cfg = config_.to_kv();
  KeyValues extra;
  extra.set("step", std::to_string(step_));
  extra.set("seed", std::to_string(config_.seed));
  extra.set("config_hash", std::to_string(fnv1a(cfg.dump())));
  save_model((fs::path(dir) / "model.cvva").string(), model_, extra);
  Archive opt;
  opt_.save(opt);
  save_archive((fs::path(dir) / "optim.cvva").string(), opt);
  std::ofstream((fs::path(dir) / "config.txt").string()) << cfg.dump();
}

StepRecord Trainer::step() {
  std::mt19937_64 rng(derive_seed(config_.seed, {3, static_cast<std::uint64_t>(step_)}));
  std::vector<SilhouetteClip> clips;
  std::vector<int> labels;
  for (Index i : sampler_.batch(step_)) {
    const auto& seq = data_->sequences[static_cast<std::size_t>(i)];
    clips.push_back(sample_clip(seq.clip, config_.clip_length, SampleMode::TrainRandom, rng));
    augment_clip(clips.back(), config_.augment, rng);
    labels.push_back(class_of_.at(seq.clip.identity));
  }
  std::vector<const SilhouetteClip*> ptrs;
  for (const auto& c : clips) ptrs.push_back(&c);
  const TensorF x = clips_to_tensor(ptrs);

  StepRecord rec;
  rec.step = step_;
  rec.lr = lr_at_step(config_.schedule, step_);
  auto out = model_.forward(x, Mode::Train);
  TensorF d_emb, d_logits;
  rec.loss = total_loss(out.embedding, out.logits, labels, config_.loss, &d_emb, &d_logits);
  if (!std::isfinite(rec.loss.total)) {
    std::string where = "(not persisted)";
    if (!out_dir_.empty()) {
      Archive batch;
      batch.manifest = "step=" + std::to_string(step_) + "\nlabels=";
      for (std::size_t i = 0; i < labels.size(); ++i) batch.manifest += (i ? "," : "") + std::to_string(labels[i]);
      batch.manifest += "\n";
      batch.tensors.emplace_back("input", x);
      where = (fs::path(out_dir_) / ("nonfinite_step_" + std::to_string(step_) + ".cvva")).string();
      save_archive(where, batch);
    }
    throw NonFiniteLoss("loss is not finite at step " + std::to_string(step_) + "; batch saved to " + where);
  }
  model_.zero_grad();
  model_.backward(d_emb, d_logits);
  opt_.step(model_, rec.lr, config_.schedule.weight_decay);
  ++step_;
  log(rec);
  return rec;
}

void Trainer::log(const StepRecord& r) {
  if (out_dir_.empty()) return;
  const fs::path path = fs::path(out_dir_) / "metrics.tsv";
  const bool fresh = !fs::exists(path);
  std::ofstream out(path, std::ios::app);
  if (fresh) out << "step\tlr\tL_tri\tL_ce\tL_total\n";
  char line[256];
  std::snprintf(line, sizeof line, "%ld\t%.9g\t%.9g\t%.9g\t%.9g\n", static_cast<long>(r.step), r.lr, r.loss.triplet,
                r.loss.ce, r.loss.total);
  out << line;
}

std::vector<StepRecord> Trainer::run() {
  std::vector<StepRecord> records;
  if (step_ == 0 && !out_dir_.empty()) save_checkpoint(checkpoint_dir(0));
  while (step_ < config_.steps) {
    records.push_back(step());
    if (!out_dir_.empty() && (step_ == config_.steps ||
                              (config_.checkpoint_every > 0 && step_ % config_.checkpoint_every == 0)))
      save_checkpoint(checkpoint_dir(step_));
  }
  return records;
}

}  // namespace cvvnet

namespace cvvnet {

EvalRecord embed_sequence(CvvNet<float>& model, const Sequence& seq) {
  const TensorF x = clips_to_tensor({&seq.clip});
  const auto out = model.forward(x, Mode::Eval);
  const Index p = out.embedding.dim(1), d = out.embedding.dim(2);
  EvalRecord r;
  r.embedding = Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      out.embedding.data(), p, d);
  r.identity = seq.clip.identity;
  r.view_group = seq.clip.view_group;
  r.condition = seq.clip.condition;
  r.sequence_id = seq.sequence_id;
  return r;
}

std::vector<EvalRecord> embed_dataset(CvvNet<float>& model, const Dataset& data) {
  std::vector<EvalRecord> out;
  for (const auto& s : data.sequences) out.push_back(embed_sequence(model, s));
  return out;
}

}  // namespace cvvnet
