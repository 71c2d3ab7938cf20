#include <catch2/catch_amalgamated.hpp>

#include "blxs/rng.hpp"
#include "blxs/svd.hpp"
#include "oracles.hpp"

using namespace blxs;

namespace {

double orthonormality_defect(const Matrix& q) {
  const Matrix g = matmul(transpose(q), q);
  return max_abs_diff(g, Matrix::identity(q.cols()));
}

Matrix diag3(double a, double b, double c) {
  Matrix m(3, 3);
  m(0, 0) = a;
  m(1, 1) = b;
  m(2, 2) = c;
  return m;
}

}  // namespace

TEST_CASE("diagonal matrix keeps its top singular values") {
  const Matrix w = diag3(3, 2, 1);
  const SvdFactors f = truncated_svd(w, 2);
  REQUIRE(f.s.size() == 2);
  REQUIRE_THAT(f.s[0], Catch::Matchers::WithinAbs(3.0, 1e-12));
  REQUIRE_THAT(f.s[1], Catch::Matchers::WithinAbs(2.0, 1e-12));
  REQUIRE(max_abs_diff(svd_reconstruct(f), diag3(3, 2, 0)) <= 1e-12);
  const double tail = frobenius_norm(sub(w, svd_reconstruct(f)));
  REQUIRE_THAT(tail, Catch::Matchers::WithinAbs(1.0, 1e-12));
}

TEST_CASE("exact-rank matrix reconstructs exactly") {
  RngStream rng(3, "svd-rank1");
  const Matrix u = gaussian_matrix(rng, 5, 1);
  const Matrix v = gaussian_matrix(rng, 1, 4);
  const Matrix w = matmul(u, v);
  const SvdFactors f = truncated_svd(w, 1);
  REQUIRE(frobenius_norm(sub(w, svd_reconstruct(f))) <= 1e-10);
}

TEST_CASE("rank-3 truncation error equals sigma_4 from the Gram oracle") {
  RngStream rng(23, "svd-oracle");
  const Matrix w = gaussian_matrix(rng, 6, 4);
  const SvdFactors f = truncated_svd(w, 3);
  const double err = frobenius_norm(sub(w, svd_reconstruct(f)));
  const std::vector<double> sig = test::singular_values_via_gram(w);
  REQUIRE_THAT(err, Catch::Matchers::WithinAbs(sig[3], 1e-8));
}

TEST_CASE("factors are orthonormal across shapes") {
  RngStream rng(29, "svd-orth");
  const struct {
    std::size_t m, n, r;
  } shapes[] = {{6, 4, 4}, {4, 7, 3}, {9, 9, 5}, {3, 8, 2}, {12, 2, 2}};
  for (const auto& sh : shapes) {
    const Matrix w = gaussian_matrix(rng, sh.m, sh.n);
    const SvdFactors f = truncated_svd(w, sh.r);
    REQUIRE(orthonormality_defect(f.u) <= 1e-8);
    REQUIRE(orthonormality_defect(f.v) <= 1e-8);
    for (std::size_t i = 1; i < f.s.size(); ++i) REQUIRE(f.s[i] <= f.s[i - 1]);
    REQUIRE(f.s.back() >= 0.0);
  }
}

TEST_CASE("reconstruction error is nonincreasing in rank") {
  RngStream rng(31, "svd-mono");
  const Matrix w = gaussian_matrix(rng, 7, 5);
  double prev = 1e300;
  for (std::size_t r = 1; r <= 5; ++r) {
    const double err = frobenius_norm(sub(w, svd_reconstruct(truncated_svd(w, r))));
    REQUIRE(err <= prev + 1e-12);
    prev = err;
  }
  REQUIRE(prev <= 1e-8);  // full rank reconstructs
}

TEST_CASE("output is bit-stable for a fixed input") {
  RngStream rng(37, "svd-stable");
  const Matrix w = gaussian_matrix(rng, 5, 5);
  const SvdFactors a = truncated_svd(w, 3);
  const SvdFactors b = truncated_svd(w, 3);
  REQUIRE(a.s == b.s);
  REQUIRE(max_abs_diff(a.u, b.u) == 0.0);
  REQUIRE(max_abs_diff(a.v, b.v) == 0.0);
}

TEST_CASE("sign convention puts the largest U entry positive") {
  RngStream rng(41, "svd-sign");
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix w = gaussian_matrix(rng, 6, 3);
    const SvdFactors f = truncated_svd(w, 3);
    for (std::size_t j = 0; j < 3; ++j) {
      double best = 0.0;
      for (std::size_t i = 0; i < f.u.rows(); ++i)
        if (std::abs(f.u(i, j)) > std::abs(best)) best = f.u(i, j);
      REQUIRE(best > 0.0);
    }
  }
}

TEST_CASE("rank out of range is rejected") {
  const Matrix w(4, 3);
  REQUIRE_THROWS_AS(truncated_svd(w, 0), std::invalid_argument);
  REQUIRE_THROWS_AS(truncated_svd(w, 4), std::invalid_argument);
}

TEST_CASE("rank-deficient input with full requested rank still yields orthonormal U") {
  RngStream rng(43, "svd-deficient");
  const Matrix u = gaussian_matrix(rng, 6, 2);
  const Matrix v = gaussian_matrix(rng, 2, 4);
  const Matrix w = matmul(u, v);  // rank 2
  const SvdFactors f = truncated_svd(w, 4);
  REQUIRE(orthonormality_defect(f.u) <= 1e-8);
  REQUIRE(f.s[2] <= 1e-10);
  REQUIRE(f.s[3] <= 1e-10);
}
