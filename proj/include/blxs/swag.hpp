#pragma once

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "blxs/adapters.hpp"
#include "blxs/backbone.hpp"
#include "blxs/matrix.hpp"
#include "blxs/rng.hpp"

namespace blxs {

/// Running first and second moments of the packed parameters plus a ring of
/// the last k deviation vectors.
class SwagState {
public:
  SwagState() = default;
  SwagState(std::size_t dim, std::size_t k)
      : dim_(dim), k_(k), mean_(dim, 0.0), sq_mean_(dim, 0.0) {}

  void collect(std::span<const double> theta) {
    if (theta.size() != dim_)
      throw std::invalid_argument("swag_collect: got " + std::to_string(theta.size()) +
                                  " values for dim " + std::to_string(dim_));
    n_ += 1;
    const double inv = 1.0 / double(n_);
    for (std::size_t i = 0; i < dim_; ++i) {
      mean_[i] += (theta[i] - mean_[i]) * inv;
      sq_mean_[i] += (theta[i] * theta[i] - sq_mean_[i]) * inv;
    }
    if (k_ > 0) {
      std::vector<double> dev(dim_);
      for (std::size_t i = 0; i < dim_; ++i) dev[i] = theta[i] - mean_[i];
      devs_.push_back(std::move(dev));
      if (devs_.size() > k_) devs_.pop_front();
    }
  }

  std::size_t dim() const { return dim_; }
  std::size_t k() const { return k_; }
  std::size_t collected() const { return n_; }
  const std::vector<double>& mean() const { return mean_; }
  const std::vector<double>& sq_mean() const { return sq_mean_; }
  const std::deque<std::vector<double>>& deviations() const { return devs_; }

private:
  std::size_t dim_ = 0;
  std::size_t k_ = 0;
  std::size_t n_ = 0;
  std::vector<double> mean_, sq_mean_;
  std::deque<std::vector<double>> devs_;  // oldest first, at most k
};

/// Finalized Gaussian posterior over the packed parameters: mean, clamped
/// per-parameter variance, and up to k deviation columns in age order.
struct SwagPosterior {
  std::vector<double> mean;
  std::vector<double> var;
  Matrix dev;  // dim x k_eff
  std::size_t k = 0;
  std::size_t k_eff = 0;
  // Reproduces the covariance formula without the 1/(k_eff - 1)
  // normalization of the deviation term.
  bool unnormalized = false;

  std::size_t dim() const { return mean.size(); }
};

inline constexpr double kVarianceFloor = 1e-12;

inline SwagPosterior swag_finalize(const SwagState& state, bool unnormalized = false) {
  const std::size_t need = state.k() == 0 ? 1 : 2;
  if (state.collected() < need)
    throw std::invalid_argument("swag_finalize: have " + std::to_string(state.collected()) +
                                " collections, need at least " + std::to_string(need));
  SwagPosterior post;
  post.mean = state.mean();
  post.var.resize(state.dim());
  for (std::size_t i = 0; i < state.dim(); ++i) {
    const double raw = state.sq_mean()[i] - state.mean()[i] * state.mean()[i];
    post.var[i] = std::max(raw, kVarianceFloor);
  }
  post.k = state.k();
  post.k_eff = state.deviations().size();
  post.dev = Matrix(state.dim(), post.k_eff);
  std::size_t col = 0;
  for (const std::vector<double>& d : state.deviations()) {
    for (std::size_t i = 0; i < state.dim(); ++i) post.dev(i, col) = d[i];
    ++col;
  }
  post.unnormalized = unnormalized;
  return post;
}

/// Dense covariance implied by the posterior; test-scale oracle.
///
///   k_eff = 0:   diag(var)
///   k_eff >= 2:  diag(var)/2 + D D^T / (2 (k_eff - 1))
///   unnormalized: (diag(var) + D D^T) / 2 for any k_eff
///
/// The normalized form with k_eff = 1 has no defined deviation term and is
/// rejected; the sampler falls back to the diagonal in that case.
inline Matrix posterior_cov_dense(const SwagPosterior& post, std::size_t max_dim = 512) {
  const std::size_t dim = post.dim();
  if (dim > max_dim)
    throw std::invalid_argument("posterior_cov_dense: dim " + std::to_string(dim) +
                                " exceeds test cap " + std::to_string(max_dim));
  Matrix cov(dim, dim);
  if (!post.unnormalized && post.k_eff == 0) {
    for (std::size_t i = 0; i < dim; ++i) cov(i, i) = post.var[i];
    return cov;
  }
  if (!post.unnormalized && post.k_eff == 1)
    throw std::invalid_argument(
        "posterior_cov_dense: k_eff = 1 has no normalized deviation term; "
        "sampling falls back to the diagonal-only posterior");
  const double dev_scale =
      post.unnormalized ? 0.5 : (post.k_eff >= 2 ? 0.5 / double(post.k_eff - 1) : 0.0);
  for (std::size_t i = 0; i < dim; ++i) cov(i, i) = 0.5 * post.var[i];
  for (std::size_t c = 0; c < post.k_eff; ++c)
    for (std::size_t i = 0; i < dim; ++i)
      for (std::size_t j = 0; j < dim; ++j)
        cov(i, j) += dev_scale * post.dev(i, c) * post.dev(j, c);
  return cov;
}

/// One parameter draw: mean + sqrt(var/2) z1 + D z2 / sqrt(2 (k_eff - 1)),
/// with the diagonal-only form (full variance) when there is no usable
/// deviation term. z1 is drawn first, then z2.
inline std::vector<double> swag_sample(const SwagPosterior& post, RngStream& rng) {
  const std::size_t dim = post.dim();
  std::vector<double> theta = post.mean;
  const std::vector<double> z1 = gaussian_vector(rng, dim);
  const bool diag_only = !post.unnormalized && post.k_eff < 2;
  const double diag_scale = diag_only ? 1.0 : 1.0 / std::sqrt(2.0);
  for (std::size_t i = 0; i < dim; ++i)
    theta[i] += diag_scale * std::sqrt(post.var[i]) * z1[i];
  if (post.k_eff > 0 && !diag_only) {
    const std::vector<double> z2 = gaussian_vector(rng, post.k_eff);
    const double dev_scale = post.unnormalized
                                 ? 1.0 / std::sqrt(2.0)
                                 : 1.0 / std::sqrt(2.0 * double(post.k_eff - 1));
    for (std::size_t c = 0; c < post.k_eff; ++c)
      for (std::size_t i = 0; i < dim; ++i)
        theta[i] += dev_scale * post.dev(i, c) * z2[c];
  }
  return theta;
}

/// Averaged class probabilities over S posterior samples.
struct PredictiveSummary {
  Matrix probs;
  std::size_t samples = 0;
};

/// BMA with an injectable sampler: sampler(s) returns the packed parameters
/// of sample s. Probabilities, not logits, are averaged.
inline PredictiveSummary bma_predict_with(
    const Backbone& net, const AdapterSet& adapters, const Batch& batch, std::size_t samples,
    const std::function<std::vector<double>(std::size_t)>& sampler) {
  if (samples < 1) throw std::invalid_argument("bma_predict: need at least one sample");
  PredictiveSummary out;
  out.samples = samples;
  out.probs = Matrix(batch.size(), classes_of(net));
  AdapterSet scratch = adapters;
  for (std::size_t s = 0; s < samples; ++s) {
    unpack(sampler(s), scratch);
    const Matrix p = predict_probs(net, batch, &scratch);
    for (std::size_t i = 0; i < p.size(); ++i) out.probs.data()[i] += p.data()[i];
  }
  for (double& x : out.probs.data()) x /= double(samples);
  return out;
}

/// BMA over swag_sample draws. Each sample uses an independent stream derived
/// from the given parent by sample index, so evaluations could run
/// concurrently and merge deterministically.
inline PredictiveSummary bma_predict(const Backbone& net, const AdapterSet& adapters,
                                     const SwagPosterior& post, const Batch& batch,
                                     std::size_t samples, const RngStream& rng) {
  return bma_predict_with(net, adapters, batch, samples, [&](std::size_t s) {
    RngStream sample_rng = rng.derive("bma-sample", s);
    return swag_sample(post, sample_rng);
  });
}

}  // namespace blxs
