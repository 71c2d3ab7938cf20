#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace blxs {

/// Raised when a training run produces non-finite values; runs abort rather
/// than silently clipping.
class divergence_error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct AdamWConfig {
  double lr_max = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct OptimizerState {
  std::size_t step = 0;
  std::vector<double> m, v;
  AdamWConfig hp;

  OptimizerState() = default;
  OptimizerState(std::size_t dim, AdamWConfig cfg)
      : m(dim, 0.0), v(dim, 0.0), hp(cfg) {}
};

/// Decoupled-weight-decay Adam update with bias correction.
inline void adamw_step(OptimizerState& opt, std::span<double> theta,
                       std::span<const double> grad, double lr) {
  if (theta.size() != opt.m.size() || grad.size() != opt.m.size())
    throw std::invalid_argument("adamw_step: parameter/gradient length mismatch");
  for (std::size_t i = 0; i < grad.size(); ++i)
    if (!std::isfinite(grad[i]))
      throw divergence_error("adamw_step: non-finite gradient at coordinate " +
                             std::to_string(i) + " on step " + std::to_string(opt.step + 1));
  opt.step += 1;
  const double bc1 = 1.0 - std::pow(opt.hp.beta1, double(opt.step));
  const double bc2 = 1.0 - std::pow(opt.hp.beta2, double(opt.step));
  for (std::size_t i = 0; i < theta.size(); ++i) {
    opt.m[i] = opt.hp.beta1 * opt.m[i] + (1.0 - opt.hp.beta1) * grad[i];
    opt.v[i] = opt.hp.beta2 * opt.v[i] + (1.0 - opt.hp.beta2) * grad[i] * grad[i];
    const double mhat = opt.m[i] / bc1;
    const double vhat = opt.v[i] / bc2;
    theta[i] -= lr * (mhat / (std::sqrt(vhat) + opt.hp.eps) + opt.hp.weight_decay * theta[i]);
  }
}

enum class Phase { kBurnIn, kSwagCollect };

/// Burn-in: linear warmup to lr_max, then linear decay to zero at
/// total_steps. Collection: the same warmup, then constant lr_max (SWALR
/// style).
struct Schedule {
  Phase phase = Phase::kBurnIn;
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 0;
  double lr_max = 1e-2;
};

inline double lr_at(const Schedule& s, std::size_t step) {
  if (s.warmup_steps > s.total_steps)
    throw std::invalid_argument("lr_at: warmup exceeds total steps");
  if (step < s.warmup_steps)
    return s.lr_max * double(step) / double(s.warmup_steps);
  if (s.phase == Phase::kSwagCollect) return s.lr_max;
  if (step >= s.total_steps) return 0.0;
  return s.lr_max * double(s.total_steps - step) / double(s.total_steps - s.warmup_steps);
}

}  // namespace blxs
