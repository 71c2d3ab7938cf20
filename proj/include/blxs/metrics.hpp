#pragma once

#include <cmath>
#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "blxs/matrix.hpp"

namespace blxs {

/// One reliability-diagram row: a right-closed confidence bin with its
/// population, mean confidence and empirical accuracy.
struct ReliabilityBin {
  double lo = 0.0, hi = 0.0;
  std::size_t count = 0;
  double mean_conf = 0.0;
  double accuracy = 0.0;
};

struct EvalResult {
  double accuracy = 0.0;
  double nll = 0.0;
  double ece = 0.0;
  double brier = 0.0;
  std::size_t n = 0;
  std::vector<ReliabilityBin> bins;
};

namespace detail {

inline void check_probs(const Matrix& probs, const std::vector<int>& labels) {
  if (probs.rows() != labels.size())
    throw std::invalid_argument("metrics: " + std::to_string(labels.size()) + " labels for " +
                                probs.shape_str() + " probabilities");
  if (probs.rows() == 0) throw std::invalid_argument("metrics: empty prediction set");
}

// Ties break toward the lowest class index.
inline std::size_t argmax_row(const Matrix& probs, std::size_t i) {
  std::size_t arg = 0;
  for (std::size_t j = 1; j < probs.cols(); ++j)
    if (probs(i, j) > probs(i, arg)) arg = j;
  return arg;
}

}  // namespace detail

inline double accuracy(const Matrix& probs, const std::vector<int>& labels) {
  detail::check_probs(probs, labels);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < probs.rows(); ++i)
    if (int(detail::argmax_row(probs, i)) == labels[i]) ++hits;
  return double(hits) / double(probs.rows());
}

inline constexpr double kProbFloor = 1e-12;

inline double nll(const Matrix& probs, const std::vector<int>& labels) {
  detail::check_probs(probs, labels);
  double total = 0.0;
  for (std::size_t i = 0; i < probs.rows(); ++i)
    total -= std::log(std::max(probs(i, std::size_t(labels[i])), kProbFloor));
  return total / double(probs.rows());
}

inline double brier(const Matrix& probs, const std::vector<int>& labels) {
  detail::check_probs(probs, labels);
  double total = 0.0;
  for (std::size_t i = 0; i < probs.rows(); ++i)
    for (std::size_t j = 0; j < probs.cols(); ++j) {
      const double target = (int(j) == labels[i]) ? 1.0 : 0.0;
      total += (probs(i, j) - target) * (probs(i, j) - target);
    }
  return total / double(probs.rows());
}

/// Expected calibration error over equal-width right-closed confidence bins
/// ((i-1)/B, i/B]; confidence is the max class probability. Empty bins
/// contribute nothing.
inline std::pair<double, std::vector<ReliabilityBin>> ece(const Matrix& probs,
                                                          const std::vector<int>& labels,
                                                          std::size_t n_bins = 15) {
  detail::check_probs(probs, labels);
  if (n_bins < 1) throw std::invalid_argument("ece: need at least one bin");
  std::vector<ReliabilityBin> bins(n_bins);
  for (std::size_t b = 0; b < n_bins; ++b) {
    bins[b].lo = double(b) / double(n_bins);
    bins[b].hi = double(b + 1) / double(n_bins);
  }
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    const std::size_t arg = detail::argmax_row(probs, i);
    const double conf = probs(i, arg);
    double up = std::ceil(conf * double(n_bins));
    if (up < 1.0) up = 1.0;
    const std::size_t b = std::min(std::size_t(up) - 1, n_bins - 1);
    bins[b].count += 1;
    bins[b].mean_conf += conf;
    if (int(arg) == labels[i]) bins[b].accuracy += 1.0;
  }
  double total = 0.0;
  for (ReliabilityBin& b : bins) {
    if (b.count == 0) continue;
    b.mean_conf /= double(b.count);
    b.accuracy /= double(b.count);
    total += (double(b.count) / double(probs.rows())) * std::abs(b.accuracy - b.mean_conf);
  }
  return {total, bins};
}

inline EvalResult evaluate(const Matrix& probs, const std::vector<int>& labels,
                           std::size_t n_bins = 15) {
  EvalResult res;
  res.accuracy = accuracy(probs, labels);
  res.nll = nll(probs, labels);
  res.brier = brier(probs, labels);
  auto [e, bins] = ece(probs, labels, n_bins);
  res.ece = e;
  res.bins = std::move(bins);
  res.n = labels.size();
  return res;
}

inline std::string reliability_csv(const std::vector<ReliabilityBin>& bins) {
  std::ostringstream out;
  out << "bin_lo,bin_hi,count,mean_conf,acc\n";
  out.precision(17);
  for (const ReliabilityBin& b : bins)
    out << b.lo << ',' << b.hi << ',' << b.count << ',' << b.mean_conf << ',' << b.accuracy
        << '\n';
  return out.str();
}

}  // namespace blxs
