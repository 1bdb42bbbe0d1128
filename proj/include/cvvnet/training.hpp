#pragma once

// Schedule, optimizer, identity-balanced sampling and the training loop.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cvvnet/archive.hpp"
#include "cvvnet/backbone.hpp"
#include "cvvnet/config.hpp"
#include "cvvnet/dataset.hpp"
#include "cvvnet/evaluation.hpp"
#include "cvvnet/losses.hpp"

namespace cvvnet {

struct ScheduleConfig {
  double base_lr = 1e-4;
  double max_lr = 6e-4;
  Index total_steps = 80000;
  double warmup_frac = 0.06;
  double weight_decay = 0.05;
  double final_div = 25.0;  // lr(total_steps) = base_lr / final_div

  void validate() const;
};

/// Cosine ramp base_lr -> max_lr over warmup_frac * total_steps, then cosine
/// decay to base_lr / final_div at total_steps. Throws StepOutOfRange.
double lr_at_step(const ScheduleConfig& s, Index step);

/// Adam moments with decoupled weight decay; parameters flagged decay=false
/// (biases, normalization affine terms) are never decayed.
class AdamW {
 public:
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  void step(CvvNet<float>& model, double lr, double weight_decay);
  Index steps_taken() const { return t_; }

  void save(Archive& a) const;
  void load(const Archive& a);

 private:
  Index t_ = 0;
  std::map<std::string, TensorF> m_, v_;
};

/// P identities x K sequences per batch. Identities are visited in a seeded
/// permutation per epoch; each identity's sequences are drawn without
/// replacement within a batch where possible. batch(step) is a pure
/// function of (seed, step).
class PkSampler {
 public:
  PkSampler(const std::vector<int>& sequence_labels, Index p, Index k, std::uint64_t seed);

  /// Indices into the label list, P*K of them, grouped by identity.
  std::vector<Index> batch(Index step) const;
  Index batches_per_epoch() const { return static_cast<Index>(ids_.size()) / p_; }

 private:
  std::vector<int> ids_;
  std::map<int, std::vector<Index>> pools_;
  Index p_, k_;
  std::uint64_t seed_;
};

struct AugmentConfig {
  bool flip = false;
  bool rotate = false;  // uniform in [-10, 10] degrees, nearest neighbour
  bool erase = false;   // one random rectangle zeroed with probability 0.5
};

/// Applies the enabled transforms to every frame of the clip with a single
/// draw per clip.
void augment_clip(SilhouetteClip& clip, const AugmentConfig& a, std::mt19937_64& rng);

struct TrainConfig {
  BackboneConfig model;
  LossWeights loss;
  ScheduleConfig schedule;
  AugmentConfig augment;
  Index p = 8, k = 2;
  Index clip_length = 30;
  Index steps = 0;  // steps to run; schedule.total_steps is the horizon
  Index checkpoint_every = 0;  // 0: only the final checkpoint
  std::uint64_t seed = 0;      // sampler, clip windows and augmentation

  void validate() const;
  KeyValues to_kv() const;
  /// Unknown keys raise ConfigError.
  static TrainConfig from_kv(const KeyValues& kv);
  std::uint64_t hash() const { return fnv1a(to_kv().dump()); }
};

struct StepRecord {
  Index step;
  double lr;
  LossReport loss;
};

class Trainer {
 public:
  /// out_dir may be empty to disable all file output.
  Trainer(TrainConfig config, const Dataset& train_set, std::string out_dir);

  /// Restores model, optimizer and step from a checkpoint directory.
  static Trainer resume(const std::string& checkpoint_dir, const Dataset& train_set, std::string out_dir);

  /// One optimization step; throws NonFiniteLoss after persisting the batch.
  StepRecord step();
  /// Steps until config.steps, checkpointing on schedule; returns this run's records.
  std::vector<StepRecord> run();

  void save_checkpoint(const std::string& dir);
  std::string checkpoint_dir(Index step) const;

  CvvNet<float>& model() { return model_; }
  const TrainConfig& config() const { return config_; }
  /// Extends or shortens the run; must stay within the schedule horizon.
  void set_steps(Index steps) {
    config_.steps = steps;
    config_.validate();
  }
  Index current_step() const { return step_; }
  /// Identity label -> class index used by the classifier.
  const std::map<int, int>& class_of() const { return class_of_; }

 private:
  TrainConfig config_;
  const Dataset* data_;
  std::string out_dir_;
  CvvNet<float> model_;
  AdamW opt_;
  PkSampler sampler_;
  std::map<int, int> class_of_;
  Index step_ = 0;

  void log(const StepRecord& r);
};

/// Inference over the full-length sequence; the retrieval feature is the
/// pre-normalization embedding.
EvalRecord embed_sequence(CvvNet<float>& model, const Sequence& seq);
std::vector<EvalRecord> embed_dataset(CvvNet<float>& model, const Dataset& data);

}  // namespace cvvnet
