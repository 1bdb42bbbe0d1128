#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "cvvnet/training.hpp"
#include "oracles_pipeline.hpp"

using namespace cvvnet;
namespace fs = std::filesystem;

namespace {

template <typename F>
double max_grad_error(TensorD x, const TensorD& analytic, F loss) {
  double worst = 0;
  for (Index i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + 1e-4;
    const double lp = loss(x);
    x[i] = saved - 1e-4;
    const double lm = loss(x);
    x[i] = saved;
    const double num = (lp - lm) / 2e-4;
    worst = std::max(worst, std::abs(num - analytic[i]) / std::max({std::abs(num), std::abs(analytic[i]), 1e-6}));
  }
  return worst;
}

BackboneConfig tiny_model() {
  BackboneConfig c;
  c.stage_channels = {4, 4};
  c.blocks_per_stage = {1, 1};
  c.stage_strides = {1, 2};
  c.msaga_positions = {{1, 0}};
  c.n_heads = 2;
  c.hpp_bins = {1, 2};
  c.embed_dim = 8;
  c.num_classes = 2;
  return c;
}

// Two identities with two aligned sequences each.
Dataset tiny_dataset(Index frames) {
  SynthConfig sc;
  sc.identities = 2;
  sc.sequences_per_cell = 2;
  sc.n_frames = frames;
  sc.seed = 4;
  auto entries = make_manifest(sc);
  std::vector<ManifestEntry> keep;
  for (const auto& e : entries)
    if (e.vertical_angle_deg == 0.0 && e.condition == Condition::NM) keep.push_back(e);
  return render_manifest(keep);
}

TrainConfig tiny_train(Index steps) {
  TrainConfig c;
  c.model = tiny_model();
  c.p = 2;
  c.k = 2;
  c.clip_length = 3;
  c.steps = steps;
  c.schedule.total_steps = 100;
  c.schedule.base_lr = 1e-3;
  c.schedule.max_lr = 6e-3;
  c.seed = 7;
  return c;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("cvvnet_test_training_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("triplet loss closed forms") {
  const std::vector<int> y{0, 0, 1, 1};
  auto r = triplet_loss(TensorD::constant({4, 2, 3}, 0.7), y, 0.2);
  CHECK(r.loss == doctest::Approx(0.2).epsilon(1e-12));
  CHECK_FALSE(r.no_valid_triplets);
  CHECK(r.active_fraction == 1.0);

  TensorD sep({4, 1, 2});
  sep(2, 0, 0) = sep(3, 0, 0) = 10.0;
  r = triplet_loss(sep, y, 0.2);
  CHECK(r.loss == 0.0);
  CHECK(r.no_valid_triplets);
  CHECK_THROWS_AS(triplet_loss(sep, {0, 0, 1}, 0.2), ShapeMismatch);
}

TEST_CASE("triplet loss matches the triple-loop oracle") {
  std::mt19937_64 rng(21);
  const auto f = TensorD::normal({6, 1, 4}, 1.0, rng);
  const std::vector<int> y{0, 0, 1, 1, 2, 2};
  CHECK(std::abs(triplet_loss(f, y, 0.2).loss - oracle::triplet(f, y, 0.2)) < 1e-6);
  for (int trial = 0; trial < 40; ++trial) {
    const Index b = 3 + static_cast<Index>(rng() % 6);
    std::vector<int> labels;
    for (Index i = 0; i < b; ++i) labels.push_back(static_cast<int>(rng() % 3));
    const auto g = TensorD::normal({b, 1 + static_cast<Index>(rng() % 3), 3}, 0.3, rng);
    const double margin = 0.1 * static_cast<double>(rng() % 5);
    CHECK(std::abs(triplet_loss(g, labels, margin).loss - oracle::triplet(g, labels, margin)) < 1e-6);
  }
}

TEST_CASE("triplet loss gradient matches finite differences") {
  std::mt19937_64 rng(5);
  const auto f = TensorD::normal({6, 2, 3}, 0.5, rng);
  const std::vector<int> y{0, 1, 0, 2, 1, 2};
  TensorD g;
  triplet_loss(f, y, 0.3, &g);
  const double err = max_grad_error(f, g, [&](const TensorD& x) { return triplet_loss(x, y, 0.3).loss; });
  CHECK(err < 1e-4);
}

TEST_CASE("cross-entropy closed forms and oracle") {
  const std::vector<int> y{0, 3};
  CHECK(ce_loss(TensorD({2, 3, 5}), y) == doctest::Approx(std::log(5.0)).epsilon(1e-12));
  TensorD z({2, 1, 5});
  double prev = 1e9;
  for (double gap : {1.0, 5.0, 20.0, 50.0}) {
    z(0, 0, 0) = gap;
    z(1, 0, 3) = gap;
    const double l = ce_loss(z, y);
    CHECK(l < prev);
    prev = l;
  }
  CHECK(prev < 1e-15);

  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const auto logits = TensorD::normal({4, 3, 6}, 2.0, rng);
    std::vector<int> labels;
    for (int i = 0; i < 4; ++i) labels.push_back(static_cast<int>(rng() % 6));
    CHECK(std::abs(ce_loss(logits, labels) - oracle::cross_entropy(logits, labels)) < 1e-6);
  }
  CHECK_THROWS_AS(ce_loss(z, {0, 5}), LabelOutOfRange);
  CHECK_THROWS_AS(ce_loss(z, {-1, 0}), LabelOutOfRange);
}

TEST_CASE("cross-entropy gradient matches finite differences") {
  std::mt19937_64 rng(6);
  const auto z = TensorD::normal({3, 2, 4}, 1.0, rng);
  const std::vector<int> y{1, 0, 3};
  TensorD g;
  ce_loss(z, y, &g);
  CHECK(max_grad_error(z, g, [&](const TensorD& x) { return ce_loss(x, y); }) < 1e-4);
}

TEST_CASE("total loss is the weighted sum of its terms") {
  std::mt19937_64 rng(9);
  const auto f = TensorD::normal({6, 2, 3}, 1.0, rng);
  const auto z = TensorD::normal({6, 2, 4}, 1.0, rng);
  const std::vector<int> y{0, 0, 1, 1, 3, 3};
  const double tri = triplet_loss(f, y, 0.2).loss, ce = ce_loss(z, y);
  CHECK(total_loss(f, z, y, {1, 0, 0.2}).total == tri);
  CHECK(total_loss(f, z, y, {0, 1, 0.2}).total == ce);
  const auto both = total_loss(f, z, y, {1, 1, 0.2});
  CHECK(std::abs(both.total - (oracle::triplet(f, y, 0.2) + oracle::cross_entropy(z, y))) < 1e-6);
  CHECK(both.triplet == tri);
  CHECK(both.ce == ce);
  for (double a : {0.0, 0.5, 2.0})
    for (double b : {0.25, 1.0, 3.0}) CHECK(total_loss(f, z, y, {a, b, 0.2}).total == doctest::Approx(a * tri + b * ce));

  TensorD df, dz, df1, dz1;
  total_loss(f, z, y, {2, 3, 0.2}, &df, &dz);
  triplet_loss(f, y, 0.2, &df1);
  ce_loss(z, y, &dz1);
  CHECK((df.flat() - 2.0 * df1.flat()).cwiseAbs().maxCoeff() < 1e-15);
  CHECK((dz.flat() - 3.0 * dz1.flat()).cwiseAbs().maxCoeff() < 1e-15);
  CHECK_THROWS_AS(total_loss(f, z, y, {0, 0, 0.2}), ConfigError);
  CHECK_THROWS_AS(total_loss(f, z, y, {-1, 1, 0.2}), ConfigError);
}

TEST_CASE("one-cycle schedule endpoints") {
  const ScheduleConfig s;
  CHECK(std::abs(lr_at_step(s, 0) - 1e-4) < 1e-12);
  CHECK(std::abs(lr_at_step(s, 4800) - 6e-4) < 1e-12);
  CHECK(std::abs(lr_at_step(s, 80000) - 4e-6) < 1e-12);
  double prev = 0;
  for (Index t = 0; t <= 4800; t += 100) {
    const double lr = lr_at_step(s, t);
    CHECK(lr >= prev);
    prev = lr;
  }
  for (Index t = 4800; t <= 80000; t += 1000) {
    const double lr = lr_at_step(s, t);
    CHECK(lr <= prev);
    prev = lr;
  }
  CHECK_THROWS_AS(lr_at_step(s, -1), StepOutOfRange);
  CHECK_THROWS_AS(lr_at_step(s, 80001), StepOutOfRange);
  ScheduleConfig bad;
  bad.max_lr = 1e-5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("weight decay is decoupled and skips excluded parameters") {
  CvvNet<float> a(tiny_model()), b(tiny_model());
  AdamW oa, ob;
  a.zero_grad();
  b.zero_grad();
  oa.step(a, 1e-2, 0.0);
  ob.step(b, 1e-2, 0.5);
  CvvNet<float> ref(tiny_model());
  std::map<std::string, TensorF> before, on, off;
  ref.visit([&](const std::string& n, Parameter<float>& p) { before[n] = p.value; });
  a.visit([&](const std::string& n, Parameter<float>& p) { off[n] = p.value; });
  Index excluded = 0;
  b.visit([&](const std::string& n, Parameter<float>& p) {
    on[n] = p.value;
    CHECK(off[n] == before[n]);  // zero gradient, no decay: untouched
    if (!p.decay) {
      CHECK(p.value == before[n]);
      ++excluded;
    } else {
      const TensorF expect = before[n] * static_cast<float>(1.0 - 1e-2 * 0.5);
      CHECK(p.value == expect);
    }
  });
  CHECK(excluded > 0);
}

TEST_CASE("the first Adam step moves each weight by about lr against its gradient") {
  CvvNet<float> m(tiny_model());
  AdamW opt;
  m.zero_grad();
  auto& w = m.fc();
  const TensorF before = w.value;
  for (Index i = 0; i < w.grad.size(); ++i) w.grad[i] = (i % 2 ? 1.0f : -2.0f);
  opt.step(m, 1e-3, 0.0);
  for (Index i = 0; i < w.value.size(); ++i)
    CHECK(w.value[i] - before[i] == doctest::Approx(i % 2 ? -1e-3 : 1e-3).epsilon(1e-3));
  CHECK(opt.steps_taken() == 1);
}

TEST_CASE("P x K sampler structure") {
  const std::vector<int> labels{5, 5, 9, 9};
  const PkSampler one(labels, 2, 2, 1);
  CHECK(one.batches_per_epoch() == 1);
  auto b0 = one.batch(0);
  std::sort(b0.begin(), b0.end());
  CHECK(b0 == std::vector<Index>{0, 1, 2, 3});

  std::vector<int> many;
  for (int id = 0; id < 7; ++id)
    for (int s = 0; s < 1 + id % 3; ++s) many.push_back(id * 10);
  const PkSampler s(many, 3, 4, 11), same(many, 3, 4, 11), other(many, 3, 4, 12);
  bool differs = false;
  for (Index step = 0; step < 50; ++step) {
    const auto batch = s.batch(step);
    REQUIRE(batch.size() == 12);
    std::set<int> ids;
    for (Index i : batch) ids.insert(many[static_cast<std::size_t>(i)]);
    CHECK(ids.size() == 3);
    // Grouped by identity, and distinct sequences whenever the pool allows.
    for (std::size_t g = 0; g < 3; ++g) {
      std::set<Index> seqs;
      for (std::size_t j = 0; j < 4; ++j) {
        CHECK(many[static_cast<std::size_t>(batch[g * 4 + j])] == many[static_cast<std::size_t>(batch[g * 4])]);
        seqs.insert(batch[g * 4 + j]);
      }
      const auto pool = std::count(many.begin(), many.end(), many[static_cast<std::size_t>(batch[g * 4])]);
      CHECK(static_cast<long>(seqs.size()) == std::min<long>(pool, 4));
    }
    CHECK(batch == same.batch(step));
    differs |= batch != other.batch(step);
  }
  CHECK(differs);
  // Within an epoch every identity appears at most once.
  std::set<int> epoch_ids;
  for (Index step = 0; step < s.batches_per_epoch(); ++step)
    for (Index i : s.batch(step)) epoch_ids.insert(many[static_cast<std::size_t>(i)]);
  CHECK(static_cast<Index>(epoch_ids.size()) == 3 * s.batches_per_epoch());
  CHECK_THROWS_AS(PkSampler(labels, 3, 2, 0), InsufficientIdentities);
}

TEST_CASE("augmentations keep frames binary and are off by default") {
  const auto data = tiny_dataset(2);
  auto clip = data.sequences[0].clip;
  std::mt19937_64 rng(1);
  augment_clip(clip, {}, rng);
  for (std::size_t f = 0; f < clip.frames.size(); ++f) CHECK(clip.frames[f] == data.sequences[0].clip.frames[f]);
  AugmentConfig all{true, true, true};
  for (int trial = 0; trial < 10; ++trial) {
    auto c = data.sequences[0].clip;
    augment_clip(c, all, rng);
    for (const auto& f : c.frames) {
      CHECK(f.is_binary());
      CHECK(f.height() == kFrameHeight);
      CHECK(f.width() == kFrameWidth);
    }
  }
  AugmentConfig flip_only{true, false, false};
  bool flipped = false;
  for (int trial = 0; trial < 10 && !flipped; ++trial) {
    auto c = data.sequences[0].clip;
    augment_clip(c, flip_only, rng);
    flipped = c.frames[0].mask == data.sequences[0].clip.frames[0].mask.rowwise().reverse().eval();
  }
  CHECK(flipped);
}

TEST_CASE("train config round trips through key=value text") {
  TrainConfig c = tiny_train(12);
  c.model.aggregator = Aggregator::Concat;
  c.model.msaga_positions = {{0, 0}, {1, 0}};
  c.loss.margin = 0.35;
  c.schedule.warmup_frac = 0.1;
  c.augment.rotate = true;
  const auto text = c.to_kv().dump();
  const TrainConfig back = TrainConfig::from_kv(KeyValues::parse(text));
  CHECK(back.to_kv().dump() == text);
  CHECK(back.hash() == c.hash());
  CHECK(back.model.aggregator == Aggregator::Concat);
  CHECK(back.model.msaga_positions == c.model.msaga_positions);
  CHECK(back.loss.margin == 0.35);
  CHECK(back.augment.rotate);

  CHECK_THROWS_AS(TrainConfig::from_kv(KeyValues::parse("sampler.q=3\n")), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_kv(KeyValues::parse("sampler.p=three\n")), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_kv(KeyValues::parse("steps=5\nschedule.total_steps=4\n")), ConfigError);
  CHECK_THROWS_AS(KeyValues::parse("no equals sign\n"), ConfigError);
  const auto kv = KeyValues::parse("# comment\n a = 1 # trailing\n\na=2\n");
  CHECK(kv.get("a") == "2");
}

TEST_CASE("zero steps writes only the initial checkpoint") {
  const auto data = tiny_dataset(3);
  const auto dir = scratch("zero");
  Trainer t(tiny_train(0), data, dir.string());
  CHECK(t.run().empty());
  std::vector<std::string> entries;
  for (const auto& e : fs::directory_iterator(dir)) entries.push_back(e.path().filename().string());
  CHECK(entries == std::vector<std::string>{"ckpt_000000"});
  CHECK(fs::exists(dir / "ckpt_000000" / "model.cvva"));
  CHECK(fs::exists(dir / "ckpt_000000" / "optim.cvva"));
  CHECK(fs::exists(dir / "ckpt_000000" / "config.txt"));
  fs::remove_all(dir);
}

TEST_CASE("model archives restore forward outputs bitwise") {
  const auto data = tiny_dataset(3);
  Trainer t(tiny_train(3), data, "");
  t.run();
  const auto path = scratch("model.cvva");
  save_model(path.string(), t.model());
  CvvNet<float> back = load_model(path.string());
  const auto x = clips_to_tensor({&data.sequences[0].clip, &data.sequences[3].clip});
  const auto a = t.model().forward(x, Mode::Eval);
  const auto b = back.forward(x, Mode::Eval);
  CHECK(a.embedding == b.embedding);
  CHECK(a.bn_embedding == b.bn_embedding);
  CHECK(a.logits == b.logits);
  auto arch = load_archive(path.string());
  save_archive(path.string() + ".2", arch);
  const auto again = load_archive(path.string() + ".2");
  CHECK(again.manifest == arch.manifest);
  REQUIRE(again.tensors.size() == arch.tensors.size());
  for (std::size_t i = 0; i < arch.tensors.size(); ++i) CHECK(again.tensors[i] == arch.tensors[i]);
  CHECK_THROWS_AS(load_archive(data.sequences[0].name), FormatError);
  fs::remove(path);
  fs::remove(path.string() + ".2");
}

TEST_CASE("resuming reproduces the uninterrupted loss trajectory exactly") {
  const auto data = tiny_dataset(5);
  const auto dir_a = scratch("full"), dir_b = scratch("split");
  auto cfg = tiny_train(8);
  cfg.checkpoint_every = 4;
  Trainer full(cfg, data, dir_a.string());
  const auto ref = full.run();

  auto half = cfg;
  half.steps = 4;
  Trainer first(half, data, dir_b.string());
  auto traj = first.run();
  Trainer second = Trainer::resume(first.checkpoint_dir(4), data, dir_b.string());
  CHECK(second.current_step() == 4);
  second.set_steps(8);
  for (const auto& r : second.run()) traj.push_back(r);

  REQUIRE(traj.size() == ref.size());
  for (std::size_t i = 0; i < ref.size(); ++i) {
    CHECK(traj[i].step == ref[i].step);
    CHECK(traj[i].lr == ref[i].lr);
    CHECK(traj[i].loss.total == ref[i].loss.total);
    CHECK(traj[i].loss.triplet == ref[i].loss.triplet);
  }
  full.model().visit([&](const std::string& n, Parameter<float>& p) {
    second.model().visit([&](const std::string& m, Parameter<float>& q) {
      if (n == m) CHECK(p.value == q.value);
    });
  });
  std::ifstream la(dir_a / "metrics.tsv"), lb(dir_b / "metrics.tsv");
  const std::string ta((std::istreambuf_iterator<char>(la)), {}), tb((std::istreambuf_iterator<char>(lb)), {});
  CHECK(ta == tb);
  CHECK(ta.rfind("step\tlr\tL_tri\tL_ce\tL_total\n", 0) == 0);
  fs::remove_all(dir_a);
  fs::remove_all(dir_b);
}

TEST_CASE("a non-finite loss aborts and persists the batch") {
  const auto data = tiny_dataset(3);
  const auto dir = scratch("nan");
  Trainer t(tiny_train(2), data, dir.string());
  t.model().fc().value[0] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(t.step(), NonFiniteLoss);
  const auto saved = dir / "nonfinite_step_0.cvva";
  REQUIRE(fs::exists(saved));
  const auto batch = load_archive(saved.string());
  CHECK(batch.at("input").shape() == Shape{4, 1, 3, 64, 44});
  CHECK(batch.manifest.find("labels=") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("loss on a fixed batch decreases for nearly every seed") {
  // Sequences as long as the window and a full-coverage P x K batch: every
  // step sees the same four clips.
  const auto data = tiny_dataset(3);
  int decreased = 0;
  const int seeds = 10;
  for (int s = 0; s < seeds; ++s) {
    auto cfg = tiny_train(50);
    cfg.model.init_seed = static_cast<std::uint64_t>(s);
    cfg.seed = static_cast<std::uint64_t>(100 + s);
    Trainer t(cfg, data, "");
    const auto traj = t.run();
    decreased += traj.back().loss.total < traj.front().loss.total;
  }
  CHECK(decreased >= 9);
}
