#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "blxs/adapters.hpp"
#include "blxs/backbone.hpp"
#include "blxs/optimizer.hpp"
#include "blxs/rng.hpp"

namespace blxs {

struct TrainConfig {
  AdamWConfig opt;
  std::size_t batch_size = 32;
  std::size_t burn_in_epochs = 25;
  std::size_t swag_epochs = 0;
  // Global epoch index at which collection hooks start firing; defaults to
  // the end of burn-in.
  std::size_t swag_start_epoch = std::size_t(-1);
  double warmup_frac = 0.06;

  std::size_t effective_swag_start() const {
    return swag_start_epoch == std::size_t(-1) ? burn_in_epochs : swag_start_epoch;
  }
};

/// Called at the end of each global epoch with the current packed parameters.
using EpochHook = std::function<void(std::span<const double> theta, std::size_t epoch)>;

struct FineTuneResult {
  std::vector<double> theta;
  std::size_t steps = 0;
  double final_batch_loss = 0.0;
};

namespace detail {

inline std::size_t steps_per_epoch(std::size_t n, std::size_t batch) {
  return (n + batch - 1) / batch;
}

inline std::size_t warmup_of(std::size_t phase_steps, double frac) {
  return std::size_t(std::llround(frac * double(phase_steps)));
}

struct PhaseRunner {
  const Backbone& net;
  AdapterSet& adapters;
  const Batch& train;
  const TrainConfig& cfg;
  OptimizerState& opt;
  const RngStream& rng;
  FineTuneResult& res;

  void run(Phase phase, std::size_t epochs, std::size_t epoch_offset, const EpochHook& hook) {
    const std::size_t n = train.size();
    const std::size_t per_epoch = steps_per_epoch(n, cfg.batch_size);
    const std::size_t phase_steps = per_epoch * epochs;
    const Schedule schedule{phase, warmup_of(phase_steps, cfg.warmup_frac), phase_steps,
                            cfg.opt.lr_max};
    std::vector<double> theta = pack(adapters).values;
    std::size_t phase_step = 0;
    for (std::size_t e = 0; e < epochs; ++e) {
      const std::size_t epoch = epoch_offset + e;
      RngStream shuffle_rng = rng.derive("shuffle", epoch);
      const std::vector<std::size_t> idx = random_permutation(shuffle_rng, n);
      for (std::size_t at = 0; at < n; at += cfg.batch_size) {
        const Batch batch = gather_batch(train, idx, at, std::min(cfg.batch_size, n - at));
        const LossGrads lg = loss_and_grads(net, batch, adapters);
        if (!std::isfinite(lg.loss))
          throw divergence_error("fine_tune: non-finite loss at epoch " + std::to_string(epoch) +
                                 ", step " + std::to_string(res.steps));
        adamw_step(opt, theta, lg.grad, lr_at(schedule, phase_step));
        unpack(theta, adapters);
        ++phase_step;
        ++res.steps;
        res.final_batch_loss = lg.loss;
      }
      if (hook) hook(theta, epoch);
    }
    res.theta = std::move(theta);
  }
};

}  // namespace detail

/// Burn-in then a constant-rate collection phase, one AdamW state throughout.
/// The hook fires at the end of every global epoch; collection decisions
/// (e.g. epoch >= swag_start) belong to the caller.
inline FineTuneResult fine_tune(const Backbone& net, AdapterSet& adapters, const Batch& train,
                                const TrainConfig& cfg, const RngStream& rng,
                                const EpochHook& hook = {}) {
  FineTuneResult res;
  res.theta = pack(adapters).values;
  OptimizerState opt(res.theta.size(), cfg.opt);
  detail::PhaseRunner runner{net, adapters, train, cfg, opt, rng, res};
  if (cfg.burn_in_epochs > 0) runner.run(Phase::kBurnIn, cfg.burn_in_epochs, 0, hook);
  if (cfg.swag_epochs > 0)
    runner.run(Phase::kSwagCollect, cfg.swag_epochs, cfg.burn_in_epochs, hook);
  return res;
}

/// Just the burn-in phase; returns the packed parameters at its end.
inline std::vector<double> burn_in(const Backbone& net, AdapterSet& adapters, const Batch& train,
                                   const TrainConfig& cfg, const RngStream& rng) {
  TrainConfig only = cfg;
  only.swag_epochs = 0;
  return fine_tune(net, adapters, train, only, rng).theta;
}

}  // namespace blxs
