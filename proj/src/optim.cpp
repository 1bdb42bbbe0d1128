#include <cmath>
#include <numbers>

#include "cvvnet/training.hpp"

namespace cvvnet {

void ScheduleConfig::validate() const {
  if (!(base_lr > 0 && base_lr <= max_lr)) throw ConfigError("schedule requires 0 < base_lr <= max_lr");
  if (total_steps < 1) throw ConfigError("schedule total_steps must be >= 1");
  if (!(warmup_frac > 0 && warmup_frac < 1)) throw ConfigError("schedule warmup_frac must lie in (0, 1)");
  if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be >= 0");
  if (!(final_div >= 1)) throw ConfigError("final_div must be >= 1");
}

double lr_at_step(const ScheduleConfig& s, Index step) {
  s.validate();
  if (step < 0 || step > s.total_steps)
    throw StepOutOfRange("step " + std::to_string(step) + " outside [0, " + std::to_string(s.total_steps) + "]");
  const double warm = s.warmup_frac * static_cast<double>(s.total_steps);
  const double t = static_cast<double>(step);
  if (t <= warm) return s.base_lr + (s.max_lr - s.base_lr) * 0.5 * (1.0 - std::cos(std::numbers::pi * t / warm));
  const double final_lr = s.base_lr / s.final_div;
  const double progress = (t - warm) / (static_cast<double>(s.total_steps) - warm);
  return final_lr + (s.max_lr - final_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

void AdamW::step(CvvNet<float>& model, double lr, double weight_decay) {
  ++t_;
  const float c1 = static_cast<float>(1.0 / (1.0 - std::pow(beta1, static_cast<double>(t_))));
  const float c2 = static_cast<float>(1.0 / (1.0 - std::pow(beta2, static_cast<double>(t_))));
  const float b1 = static_cast<float>(beta1), b2 = static_cast<float>(beta2);
  const float flr = static_cast<float>(lr), feps = static_cast<float>(eps);
  const float shrink = static_cast<float>(1.0 - lr * weight_decay);
  model.visit([&](const std::string& name, Parameter<float>& p) {
    auto mit = m_.try_emplace(name, p.value.shape()).first;
    auto vit = v_.try_emplace(name, p.value.shape()).first;
    auto wm = p.value.flat();
    auto mm = mit->second.flat();
    auto vm = vit->second.flat();
    const auto gm = p.grad.flat();
    auto w = wm.array();
    auto m = mm.array();
    auto v = vm.array();
    const auto g = gm.array();
    if (p.decay) w *= shrink;
    m = b1 * m + (1.0f - b1) * g;
    v = b2 * v + (1.0f - b2) * g.square();
    w -= flr * (c1 * m) / ((c2 * v).sqrt() + feps);
  });
}

void AdamW::save(Archive& a) const {
  a.manifest += "adam_t=" + std::to_string(t_) + "\n";
  for (const auto& [name, t] : m_) a.tensors.emplace_back("m/" + name, t);
  for (const auto& [name, t] : v_) a.tensors.emplace_back("v/" + name, t);
}

void AdamW::load(const Archive& a) {
  const KeyValues kv = KeyValues::parse(a.manifest);
  t_ = parse_index("adam_t", kv.get("adam_t"));
  m_.clear();
  v_.clear();
  for (const auto& [name, t] : a.tensors) {
    if (name.rfind("m/", 0) == 0) m_[name.substr(2)] = t;
    else if (name.rfind("v/", 0) == 0) v_[name.substr(2)] = t;
  }
}

}  // namespace cvvnet
