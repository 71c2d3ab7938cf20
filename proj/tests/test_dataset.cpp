#include <catch2/catch_amalgamated.hpp>

#include "blxs/dataset.hpp"
#include "oracles.hpp"

using namespace blxs;

TEST_CASE("generation is bit-identical for a fixed spec and seed") {
  DatasetSpec spec;
  spec.family = "blobs2d";
  spec.n_train = 100;
  spec.n_val = 40;
  spec.shift_phi = 0.4;
  spec.shift_rho = 0.1;
  const DatasetPair a = make_dataset(spec, 77);
  const DatasetPair b = make_dataset(spec, 77);
  REQUIRE(max_abs_diff(a.target.train.inputs, b.target.train.inputs) == 0.0);
  REQUIRE(a.target.train.labels == b.target.train.labels);
  REQUIRE(max_abs_diff(a.source.val.inputs, b.source.val.inputs) == 0.0);

  const DatasetPair c = make_dataset(spec, 78);
  REQUIRE(max_abs_diff(a.target.train.inputs, c.target.train.inputs) > 0.0);
}

TEST_CASE("null shift leaves the target a raw family draw") {
  DatasetSpec spec;
  spec.family = "moons2d";
  spec.n_train = 60;
  spec.n_val = 20;
  spec.seed = 5;
  const DatasetPair pair = make_dataset(spec);
  const RngStream root(spec.seed, "dataset");
  const Batch raw = sample_family(spec, root.derive("target.train"), spec.n_train, 0.0);
  REQUIRE(max_abs_diff(pair.target.train.inputs, raw.inputs) == 0.0);
  REQUIRE(pair.target.train.labels == raw.labels);
}

TEST_CASE("label flip rate matches the configured rho") {
  DatasetSpec clean;
  clean.family = "blobs2d";
  clean.n_train = 2000;
  clean.n_val = 10;
  clean.seed = 11;
  DatasetSpec noisy = clean;
  noisy.shift_rho = 0.05;

  const DatasetPair a = make_dataset(clean);
  const DatasetPair b = make_dataset(noisy);
  // Same seed: features identical, labels differ exactly at the flips.
  REQUIRE(max_abs_diff(a.target.train.inputs, b.target.train.inputs) == 0.0);
  std::size_t flips = 0;
  for (std::size_t i = 0; i < 2000; ++i)
    if (a.target.train.labels[i] != b.target.train.labels[i]) ++flips;
  const double rate = double(flips) / 2000.0;
  REQUIRE(rate >= 0.04);
  REQUIRE(rate <= 0.06);
}

TEST_CASE("flipped labels always land on a different class") {
  DatasetSpec spec;
  spec.family = "blobs2d";
  spec.classes = 3;
  spec.n_train = 500;
  spec.n_val = 10;
  spec.shift_rho = 1.0;  // flip everything
  DatasetSpec clean = spec;
  clean.shift_rho = 0.0;
  const DatasetPair flipped = make_dataset(spec);
  const DatasetPair base = make_dataset(clean);
  for (std::size_t i = 0; i < 500; ++i) {
    REQUIRE(flipped.target.train.labels[i] != base.target.train.labels[i]);
    REQUIRE(flipped.target.train.labels[i] >= 0);
    REQUIRE(flipped.target.train.labels[i] < 3);
  }
}

TEST_CASE("rotation shift turns the feature plane") {
  DatasetSpec spec;
  spec.family = "blobs2d";
  spec.n_train = 50;
  spec.n_val = 10;
  spec.seed = 13;
  DatasetSpec rotated = spec;
  rotated.shift_phi = std::numbers::pi / 2.0;
  const DatasetPair a = make_dataset(spec);
  const DatasetPair b = make_dataset(rotated);
  for (std::size_t i = 0; i < 50; ++i) {
    // (x, y) -> (-y, x) up to rounding in the rotation arithmetic.
    REQUIRE_THAT(b.target.train.inputs(i, 0),
                 Catch::Matchers::WithinAbs(-a.target.train.inputs(i, 1), 1e-12));
    REQUIRE_THAT(b.target.train.inputs(i, 1),
                 Catch::Matchers::WithinAbs(a.target.train.inputs(i, 0), 1e-12));
  }
}

TEST_CASE("prior tilt skews class frequencies toward higher classes") {
  DatasetSpec spec;
  spec.family = "blobs2d";
  spec.classes = 3;
  spec.n_train = 3000;
  spec.n_val = 10;
  spec.shift_tilt = 1.0;
  const DatasetPair pair = make_dataset(spec);
  std::size_t counts[3] = {0, 0, 0};
  for (int label : pair.target.train.labels) counts[label]++;
  REQUIRE(counts[2] > counts[1]);
  REQUIRE(counts[1] > counts[0]);
  // The source stays untilted.
  std::size_t src_counts[3] = {0, 0, 0};
  for (int label : pair.source.train.labels) src_counts[label]++;
  REQUIRE(double(src_counts[0]) > 0.25 * 3000.0 * 0.8);
}

TEST_CASE("seq-majority batches carry sequences with consistent labels") {
  DatasetSpec spec;
  spec.family = "seq-majority";
  spec.n_train = 80;
  spec.n_val = 10;
  spec.seq_len = 7;
  spec.feat_dim = 12;
  spec.noise = 0.0;
  const DatasetPair pair = make_dataset(spec);
  const Batch& b = pair.source.train;
  REQUIRE(b.seq_len == 7);
  REQUIRE(b.inputs.rows() == 80 * 7);
  REQUIRE(b.inputs.cols() == 12);
  for (std::size_t i = 0; i < 80; ++i) {
    int sum = 0;
    for (std::size_t s = 0; s < 7; ++s) sum += b.inputs(i * 7 + s, 0) > 0.0 ? 1 : -1;
    REQUIRE(sum != 0);
    REQUIRE(b.labels[i] == (sum > 0 ? 1 : 0));
  }
}

TEST_CASE("unknown families are rejected") {
  DatasetSpec spec;
  spec.family = "spirals9d";
  REQUIRE_THROWS_AS(make_dataset(spec), std::invalid_argument);
}
