#include <catch2/catch_amalgamated.hpp>

#include "blxs/rng.hpp"
#include "oracles.hpp"

using namespace blxs;

TEST_CASE("same seed gives identical sequences from fresh streams") {
  RngStream a(42, "init");
  RngStream b(42, "init");
  REQUIRE(gaussian_vector(a, 64) == gaussian_vector(b, 64));
}

TEST_CASE("gaussian draws pass moment checks at n = 1e6") {
  RngStream rng(123, "moments");
  const std::vector<double> v = gaussian_vector(rng, 1'000'000);
  REQUIRE(std::abs(test::sample_mean(v)) <= 0.01);
  REQUIRE(std::abs(test::sample_variance(v) - 1.0) <= 0.01);
}

TEST_CASE("distinct stream labels decorrelate") {
  RngStream root(99);
  RngStream a = root.derive("path-a");
  RngStream b = root.derive("path-b");
  const std::vector<double> va = gaussian_vector(a, 100'000);
  const std::vector<double> vb = gaussian_vector(b, 100'000);
  REQUIRE(std::abs(test::pearson_correlation(va, vb)) < 0.01);
}

TEST_CASE("indexed derivation separates streams") {
  RngStream root(5);
  RngStream s0 = root.derive("sample", 0);
  RngStream s1 = root.derive("sample", 1);
  REQUIRE(s0.key() != s1.key());
  const std::vector<double> v0 = gaussian_vector(s0, 100'000);
  const std::vector<double> v1 = gaussian_vector(s1, 100'000);
  REQUIRE(std::abs(test::pearson_correlation(v0, v1)) < 0.01);

  RngStream again = root.derive("sample", 1);
  REQUIRE(gaussian_vector(again, 16) == std::vector<double>(v1.begin(), v1.begin() + 16));
}

TEST_CASE("derivation does not advance the parent stream") {
  RngStream a(7, "parent");
  RngStream b(7, "parent");
  (void)a.derive("child");
  REQUIRE(a.next_u64() == b.next_u64());
}

TEST_CASE("next_below stays in range and covers values") {
  RngStream rng(31, "below");
  std::vector<int> seen(7, 0);
  for (int i = 0; i < 10'000; ++i) {
    const std::uint64_t x = rng.next_below(7);
    REQUIRE(x < 7);
    seen[std::size_t(x)]++;
  }
  for (int c : seen) REQUIRE(c > 1000);
}

TEST_CASE("random_permutation is a deterministic permutation") {
  RngStream a(55, "perm");
  RngStream b(55, "perm");
  const auto pa = random_permutation(a, 257);
  const auto pb = random_permutation(b, 257);
  REQUIRE(pa == pb);
  std::vector<bool> hit(257, false);
  for (std::size_t x : pa) {
    REQUIRE(x < 257);
    REQUIRE(!hit[x]);
    hit[x] = true;
  }
}

TEST_CASE("gaussian_vector rejects n = 0") {
  RngStream rng(1, "zero");
  REQUIRE_THROWS_AS(gaussian_vector(rng, 0), std::invalid_argument);
}
