#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "blxs/backbone.hpp"
#include "blxs/matrix.hpp"
#include "blxs/rng.hpp"

namespace blxs {

/// Synthetic task family plus the source-to-target shift knobs. Fine-tuning
/// happens on the target task; the source task stands in for whatever the
/// frozen backbone was pretrained on.
struct DatasetSpec {
  std::string family = "blobs2d";  // blobs2d | moons2d | seq-majority
  std::size_t n_train = 1000;
  std::size_t n_val = 500;
  double noise = 0.5;
  double shift_phi = 0.0;   // input rotation in the (x0, x1) plane, radians
  double shift_rho = 0.0;   // label flip probability
  double shift_tilt = 0.0;  // class-prior tilt
  std::uint64_t seed = 1234;
  std::size_t classes = 3;                   // blobs2d only; moons and seq are binary
  std::size_t seq_len = 12, feat_dim = 16;   // seq-majority only

  std::size_t class_count() const { return family == "blobs2d" ? classes : 2; }
  std::size_t input_dim() const { return family == "seq-majority" ? feat_dim : 2; }
  std::size_t sequence_len() const { return family == "seq-majority" ? seq_len : 1; }
};

struct TaskData {
  Batch train, val;
};

struct DatasetPair {
  TaskData source, target;
};

namespace detail {

inline std::size_t sample_class(RngStream& rng, std::size_t classes, double tilt) {
  if (tilt == 0.0) return std::size_t(rng.next_below(classes));
  std::vector<double> w(classes);
  double total = 0.0;
  for (std::size_t c = 0; c < classes; ++c) {
    w[c] = std::exp(tilt * double(c));
    total += w[c];
  }
  double u = rng.next_unit() * total;
  for (std::size_t c = 0; c + 1 < classes; ++c) {
    u -= w[c];
    if (u < 0.0) return c;
  }
  return classes - 1;
}

}  // namespace detail

/// One raw draw of `n` examples from the family, with class priors tilted by
/// exp(tilt * class). No shift transforms are applied here.
inline Batch sample_family(const DatasetSpec& spec, RngStream rng, std::size_t n, double tilt) {
  Batch b;
  b.seq_len = spec.sequence_len();
  b.inputs = Matrix(n * b.seq_len, spec.input_dim());
  b.labels.resize(n);

  if (spec.family == "blobs2d") {
    const std::size_t classes = spec.classes;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t c = detail::sample_class(rng, classes, tilt);
      const double ang =
          2.0 * std::numbers::pi * double(c) / double(classes) + std::numbers::pi / 2.0;
      b.inputs(i, 0) = 2.0 * std::cos(ang) + spec.noise * rng.next_gaussian();
      b.inputs(i, 1) = 2.0 * std::sin(ang) + spec.noise * rng.next_gaussian();
      b.labels[i] = int(c);
    }
    return b;
  }

  if (spec.family == "moons2d") {
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t c = detail::sample_class(rng, 2, tilt);
      const double t = std::numbers::pi * rng.next_unit();
      double x = std::cos(t), y = std::sin(t);
      if (c == 1) {
        x = 1.0 - x;
        y = 0.5 - y;
      }
      b.inputs(i, 0) = x + spec.noise * rng.next_gaussian();
      b.inputs(i, 1) = y + spec.noise * rng.next_gaussian();
      b.labels[i] = int(c);
    }
    return b;
  }

  if (spec.family == "seq-majority") {
    if (spec.seq_len < 1 || spec.feat_dim < 2)
      throw std::invalid_argument("seq-majority: need seq_len >= 1 and feat_dim >= 2");
    const double p_plus = 1.0 / (1.0 + std::exp(-tilt));
    for (std::size_t i = 0; i < n; ++i) {
      int sum = 0;
      std::vector<int> toks(spec.seq_len);
      do {
        sum = 0;
        for (std::size_t s = 0; s < spec.seq_len; ++s) {
          toks[s] = rng.next_unit() < p_plus ? 1 : -1;
          sum += toks[s];
        }
      } while (sum == 0);  // re-draw ties so the majority label is defined
      for (std::size_t s = 0; s < spec.seq_len; ++s) {
        const std::size_t row = i * spec.seq_len + s;
        b.inputs(row, 0) = double(toks[s]) + spec.noise * rng.next_gaussian();
        b.inputs(row, 1) = 0.0;
        // Sinusoidal position encoding on the remaining feature dims.
        for (std::size_t j = 2; j < spec.feat_dim; ++j) {
          const double freq = std::pow(10000.0, -double(j - 2) / double(spec.feat_dim - 2));
          b.inputs(row, j) = (j % 2 == 0) ? std::sin(double(s) * freq)
                                          : std::cos(double(s) * freq);
        }
      }
      b.labels[i] = sum > 0 ? 1 : 0;
    }
    return b;
  }

  throw std::invalid_argument("unknown dataset family: " + spec.family);
}

/// In-place target shift: rotate the (x0, x1) feature plane by phi, then flip
/// each label to a uniformly random other class with probability rho. The
/// flip stream is independent of the feature noise.
inline void apply_shift(Batch& b, double phi, double rho, std::size_t classes, RngStream flips) {
  if (phi != 0.0) {
    const double c = std::cos(phi), s = std::sin(phi);
    for (std::size_t i = 0; i < b.inputs.rows(); ++i) {
      const double x = b.inputs(i, 0), y = b.inputs(i, 1);
      b.inputs(i, 0) = c * x - s * y;
      b.inputs(i, 1) = s * x + c * y;
    }
  }
  for (int& label : b.labels) {
    const double u = flips.next_unit();
    if (u < rho) {
      const std::size_t other = flips.next_below(classes - 1);
      label = int(other >= std::size_t(label) ? other + 1 : other);
    }
  }
}

/// Source and target tasks with disjoint train/val splits, fully determined
/// by (spec, seed).
inline DatasetPair make_dataset(const DatasetSpec& spec) {
  const RngStream root(spec.seed, "dataset");
  DatasetPair pair;
  pair.source.train = sample_family(spec, root.derive("source.train"), spec.n_train, 0.0);
  pair.source.val = sample_family(spec, root.derive("source.val"), spec.n_val, 0.0);
  pair.target.train =
      sample_family(spec, root.derive("target.train"), spec.n_train, spec.shift_tilt);
  pair.target.val = sample_family(spec, root.derive("target.val"), spec.n_val, spec.shift_tilt);
  apply_shift(pair.target.train, spec.shift_phi, spec.shift_rho, spec.class_count(),
              root.derive("target.train.flip"));
  apply_shift(pair.target.val, spec.shift_phi, spec.shift_rho, spec.class_count(),
              root.derive("target.val.flip"));
  return pair;
}

inline DatasetPair make_dataset(DatasetSpec spec, std::uint64_t seed) {
  spec.seed = seed;
  return make_dataset(spec);
}

}  // namespace blxs
