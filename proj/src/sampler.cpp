#include <cmath>
#include <numbers>

#include "cvvnet/seeds.hpp"
#include "cvvnet/training.hpp"

namespace cvvnet {

PkSampler::PkSampler(const std::vector<int>& sequence_labels, Index p, Index k, std::uint64_t seed)
    : p_(p), k_(k), seed_(seed) {
  if (p < 1 || k < 1) throw ConfigError("sampler p and k must be >= 1");
  for (std::size_t i = 0; i < sequence_labels.size(); ++i)
    pools_[sequence_labels[i]].push_back(static_cast<Index>(i));
  for (const auto& [id, pool] : pools_) ids_.push_back(id);
  if (static_cast<Index>(ids_.size()) < p)
    throw InsufficientIdentities("batch needs " + std::to_string(p) + " identities, dataset has " +
                                 std::to_string(ids_.size()));
}

std::vector<Index> PkSampler::batch(Index step) const {
  if (step < 0) throw StepOutOfRange("sampler step must be >= 0");
  const Index per_epoch = batches_per_epoch();
  const Index epoch = step / per_epoch, slot = step % per_epoch;
  std::vector<int> order = ids_;
  std::mt19937_64 perm(derive_seed(seed_, {0, static_cast<std::uint64_t>(epoch)}));
  shuffle(order.begin(), order.end(), perm);
  std::mt19937_64 pick(derive_seed(seed_, {1, static_cast<std::uint64_t>(step)}));
  std::vector<Index> out;
  for (Index i = 0; i < p_; ++i) {
    std::vector<Index> pool = pools_.at(order[static_cast<std::size_t>(slot * p_ + i)]);
    // Without replacement through the pool, reshuffled whenever it runs out.
    std::size_t next = pool.size();
    for (Index j = 0; j < k_; ++j) {
      if (next == pool.size()) {
        shuffle(pool.begin(), pool.end(), pick);
        next = 0;
      }
      out.push_back(pool[next++]);
    }
  }
  return out;
}

void augment_clip(SilhouetteClip& clip, const AugmentConfig& a, std::mt19937_64& rng) {
  // Fixed draw order regardless of which transforms are enabled.
  const bool flip = unit_real(rng) < 0.5;
  const double angle = (unit_real(rng) * 20.0 - 10.0) * std::numbers::pi / 180.0;
  const bool erase = unit_real(rng) < 0.5;
  const double eh = unit_real(rng), ew = unit_real(rng), ey = unit_real(rng), ex = unit_real(rng);
  for (auto& f : clip.frames) {
    Mask& m = f.mask;
    const Index h = m.rows(), w = m.cols();
    if (a.flip && flip) m = m.rowwise().reverse().eval();
    if (a.rotate) {
      const double cy = 0.5 * static_cast<double>(h - 1), cx = 0.5 * static_cast<double>(w - 1);
      const double c = std::cos(angle), s = std::sin(angle);
      Mask out = Mask::Zero(h, w);
      for (Index y = 0; y < h; ++y)
        for (Index x = 0; x < w; ++x) {
          const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
          const auto sy = static_cast<Index>(std::lround(cy + c * dy - s * dx));
          const auto sx = static_cast<Index>(std::lround(cx + s * dy + c * dx));
          if (sy >= 0 && sy < h && sx >= 0 && sx < w) out(y, x) = m(sy, sx);
        }
      m = std::move(out);
    }
    if (a.erase && erase) {
      const Index rh = std::max<Index>(1, static_cast<Index>(eh * 0.25 * static_cast<double>(h)) + h / 8);
      const Index rw = std::max<Index>(1, static_cast<Index>(ew * 0.25 * static_cast<double>(w)) + w / 8);
      const Index y0 = static_cast<Index>(ey * static_cast<double>(h - rh + 1));
      const Index x0 = static_cast<Index>(ex * static_cast<double>(w - rw + 1));
      m.block(y0, x0, rh, rw).setZero();
    }
  }
}

}  // namespace cvvnet
