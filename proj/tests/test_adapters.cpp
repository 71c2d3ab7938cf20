#include <catch2/catch_amalgamated.hpp>

#include "blxs/adapters.hpp"
#include "blxs/rng.hpp"
#include "oracles.hpp"

using namespace blxs;

namespace {

Matrix diag3(double a, double b, double c) {
  Matrix m(3, 3);
  m(0, 0) = a;
  m(1, 1) = b;
  m(2, 2) = c;
  return m;
}

// Explicit dense update (alpha/r) * A [R] B, the thing production code never
// materializes.
Matrix dense_update(const AdapterModule& mod) {
  Matrix w = mod.a;
  if (mod.mode == AdapterMode::kLoraXs) w = matmul(w, mod.core);
  w = matmul(w, mod.b);
  return scale(w, mod.alpha / double(mod.rank));
}

AdapterModule random_xs_module(RngStream& rng, const std::string& id, int layer, SiteKind kind,
                               std::size_t m, std::size_t n, std::size_t r, double alpha) {
  const Matrix w0 = gaussian_matrix(rng, m, n);
  AdapterModule mod = init_lora_xs(w0, r, alpha);
  mod.site_id = id;
  mod.layer = layer;
  mod.kind = kind;
  mod.core = gaussian_matrix(rng, r, r, 0.3);
  return mod;
}

}  // namespace

TEST_CASE("init_lora starts with a zero update and deterministic A") {
  RngStream rng1(9, "lora-init");
  RngStream rng2(9, "lora-init");
  const AdapterModule m1 = init_lora(5, 7, 3, 16.0, rng1);
  const AdapterModule m2 = init_lora(5, 7, 3, 16.0, rng2);
  REQUIRE(max_abs_diff(matmul(m1.a, m1.b), Matrix(5, 7)) == 0.0);
  REQUIRE(max_abs_diff(m1.a, m2.a) == 0.0);
  REQUIRE(m1.trainable_count() == (5 + 7) * 3);
  REQUIRE_THROWS_AS(init_lora(5, 7, 6, 16.0, rng1), std::invalid_argument);
}

TEST_CASE("init_lora_xs derives frozen projections from the truncated SVD") {
  const Matrix w0 = diag3(3, 2, 1);
  const AdapterModule mod = init_lora_xs(w0, 2);
  // Columns of A carry the singular values.
  double c0 = 0.0, c1 = 0.0;
  for (std::size_t i = 0; i < 3; ++i) {
    c0 += mod.a(i, 0) * mod.a(i, 0);
    c1 += mod.a(i, 1) * mod.a(i, 1);
  }
  REQUIRE_THAT(std::sqrt(c0), Catch::Matchers::WithinAbs(3.0, 1e-10));
  REQUIRE_THAT(std::sqrt(c1), Catch::Matchers::WithinAbs(2.0, 1e-10));
  REQUIRE(max_abs_diff(matmul(mod.a, mod.b), diag3(3, 2, 0)) <= 1e-10);
  // Zero core means the forward update vanishes at init.
  REQUIRE(max_abs_diff(dense_update(mod), Matrix(3, 3)) == 0.0);
  REQUIRE(mod.trainable_count() == 4);
}

TEST_CASE("identity core reproduces the rank-r truncation norm") {
  RngStream rng(21, "xs-trunc");
  const Matrix w0 = gaussian_matrix(rng, 8, 6);
  AdapterModule mod = init_lora_xs(w0, 4);
  mod.core = Matrix::identity(4);
  const double norm = frobenius_norm(matmul(matmul(mod.a, mod.core), mod.b));
  const std::vector<double> sig = test::singular_values_via_gram(w0);
  double expect = 0.0;
  for (std::size_t i = 0; i < 4; ++i) expect += sig[i] * sig[i];
  REQUIRE_THAT(norm, Catch::Matchers::WithinAbs(std::sqrt(expect), 1e-8));
}

TEST_CASE("adapted_update trivial cases") {
  RngStream rng(23, "upd-trivial");
  AdapterModule mod = random_xs_module(rng, "s", 0, SiteKind::kDense, 4, 5, 2, 16.0);
  mod.core = Matrix(2, 2);
  const Matrix x = gaussian_matrix(rng, 3, 4);
  REQUIRE(max_abs_diff(adapted_update(x, mod), Matrix(3, 5)) == 0.0);

  AdapterModule ident;
  ident.mode = AdapterMode::kLoraXs;
  ident.a = Matrix::identity(2);
  ident.b = Matrix::identity(2);
  ident.core = Matrix::identity(2);
  ident.alpha = 2.0;
  ident.rank = 2;
  const Matrix x2 = gaussian_matrix(rng, 6, 2);
  REQUIRE(max_abs_diff(adapted_update(x2, ident), x2) == 0.0);

  REQUIRE_THROWS_AS(adapted_update(gaussian_matrix(rng, 3, 5), mod), std::invalid_argument);
}

TEST_CASE("adapted_update equals the dense oracle") {
  RngStream rng(29, "upd-oracle");
  for (int trial = 0; trial < 10; ++trial) {
    AdapterModule mod = random_xs_module(rng, "s", 0, SiteKind::kDense, 6, 4, 3, 16.0);
    const Matrix x = gaussian_matrix(rng, 5, 6);
    REQUIRE(max_abs_diff(adapted_update(x, mod), matmul(x, dense_update(mod))) <= 1e-12);
  }
  // Same contract in plain-LoRA mode.
  AdapterModule lora = init_lora(6, 4, 2, 8.0, rng);
  lora.b = gaussian_matrix(rng, 2, 4);
  const Matrix x = gaussian_matrix(rng, 3, 6);
  REQUIRE(max_abs_diff(adapted_update(x, lora), matmul(x, dense_update(lora))) <= 1e-12);
}

TEST_CASE("pack and unpack round-trip with the documented layout") {
  RngStream rng(31, "pack");
  std::vector<AdapterModule> mods;
  mods.push_back(random_xs_module(rng, "blk0.v", 0, SiteKind::kValue, 4, 4, 2, 16.0));
  mods.push_back(random_xs_module(rng, "blk0.q", 0, SiteKind::kQuery, 4, 4, 2, 16.0));
  AdapterSet set(std::move(mods));
  // Sorted by kind: q before v.
  REQUIRE(set[0].site_id == "blk0.q");

  JointParamVector joint = pack(set);
  REQUIRE(joint.values.size() == 8);
  REQUIRE(joint.layout.entries[0].offset == 0);
  REQUIRE(joint.layout.entries[1].offset == 4);

  AdapterSet copy = set;
  copy[0].core = Matrix(2, 2);
  copy[1].core = Matrix(2, 2);
  unpack(joint, copy);
  REQUIRE(max_abs_diff(copy[0].core, set[0].core) == 0.0);
  REQUIRE(max_abs_diff(copy[1].core, set[1].core) == 0.0);
  REQUIRE(pack(copy).values == joint.values);

  REQUIRE_THROWS_AS(unpack(std::vector<double>(7), set), std::invalid_argument);
}

TEST_CASE("lora-mode pack interleaves A then B per site") {
  RngStream rng(37, "pack-lora");
  AdapterModule mod = init_lora(3, 4, 2, 16.0, rng);
  mod.site_id = "fc2";
  AdapterSet set({mod});
  const JointParamVector joint = pack(set);
  REQUIRE(joint.layout.entries.size() == 2);
  REQUIRE(joint.layout.entries[0].role == 'A');
  REQUIRE(joint.layout.entries[1].role == 'B');
  REQUIRE(joint.layout.total == 3 * 2 + 2 * 4);
  const std::vector<double> va = vec(mod.a);
  for (std::size_t i = 0; i < va.size(); ++i) REQUIRE(joint.values[i] == va[i]);
}

TEST_CASE("projector of identity factors is the identity") {
  AdapterModule mod;
  mod.site_id = "s";
  mod.mode = AdapterMode::kLoraXs;
  mod.a = Matrix::identity(2);
  mod.b = Matrix::identity(2);
  mod.core = Matrix(2, 2);
  mod.rank = 2;
  AdapterSet set({mod});
  REQUIRE(max_abs_diff(build_projector(set), Matrix::identity(4)) == 0.0);
}

TEST_CASE("projector is block-diagonal and reproduces flattened updates") {
  RngStream rng(41, "projector");
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<AdapterModule> mods;
    mods.push_back(random_xs_module(rng, "a", 0, SiteKind::kQuery, 4, 3, 2, 16.0));
    mods.push_back(random_xs_module(rng, "b", 0, SiteKind::kValue, 5, 2, 2, 16.0));
    AdapterSet set(std::move(mods));
    const Matrix p = build_projector(set);
    REQUIRE(p.rows() == 4 * 3 + 5 * 2);
    REQUIRE(p.cols() == 8);
    // Off-diagonal blocks are exactly zero.
    for (std::size_t i = 0; i < 12; ++i)
      for (std::size_t j = 4; j < 8; ++j) REQUIRE(p(i, j) == 0.0);
    for (std::size_t i = 12; i < p.rows(); ++i)
      for (std::size_t j = 0; j < 4; ++j) REQUIRE(p(i, j) == 0.0);

    // vec of all effective updates == (alpha/r) * P * theta.
    const JointParamVector joint = pack(set);
    std::vector<double> flat;
    for (const AdapterModule& mod : set) {
      const std::vector<double> v = vec(dense_update(mod));
      flat.insert(flat.end(), v.begin(), v.end());
    }
    std::vector<double> proj(flat.size(), 0.0);
    for (std::size_t i = 0; i < p.rows(); ++i)
      for (std::size_t j = 0; j < p.cols(); ++j) proj[i] += p(i, j) * joint.values[j];
    const double s = set[0].alpha / double(set[0].rank);
    for (double& x : proj) x *= s;
    REQUIRE(max_abs_diff(flat, proj) <= 1e-10);
  }
}

TEST_CASE("projector rejects lora-mode sets and oversized sets") {
  RngStream rng(43, "projector-errors");
  AdapterModule lora = init_lora(4, 4, 2, 16.0, rng);
  lora.site_id = "x";
  REQUIRE_THROWS_AS(build_projector(AdapterSet({lora})), std::invalid_argument);

  AdapterModule big = random_xs_module(rng, "big", 0, SiteKind::kDense, 70, 70, 2, 16.0);
  REQUIRE_THROWS_AS(build_projector(AdapterSet({big})), std::invalid_argument);
}

TEST_CASE("induced covariance of trivial inputs") {
  RngStream rng(47, "icov-trivial");
  AdapterModule mod = random_xs_module(rng, "s", 0, SiteKind::kDense, 3, 2, 2, 16.0);
  const InducedCovariance zero = induced_cov(mod, Matrix(4, 4));
  REQUIRE(max_abs_diff(zero.cov, Matrix(6, 6)) == 0.0);

  AdapterModule ident;
  ident.site_id = "i";
  ident.mode = AdapterMode::kLoraXs;
  ident.a = Matrix::identity(2);
  ident.b = Matrix::identity(2);
  ident.core = Matrix(2, 2);
  ident.rank = 2;
  REQUIRE(max_abs_diff(induced_cov(ident, Matrix::identity(4)).cov, Matrix::identity(4)) == 0.0);

  Matrix asym = Matrix::identity(4);
  asym(0, 1) = 0.5;
  REQUIRE_THROWS_AS(induced_cov(mod, asym), std::invalid_argument);
}

TEST_CASE("induced covariance matches a Monte-Carlo oracle") {
  RngStream rng(53, "icov-mc");
  AdapterModule mod = random_xs_module(rng, "s", 0, SiteKind::kDense, 3, 2, 2, 16.0);
  const std::size_t r2 = 4, mn = 6;
  const Matrix g = gaussian_matrix(rng, r2, r2, 0.5);
  const Matrix sigma = matmul(g, transpose(g));

  const Matrix analytic = induced_cov(mod, sigma).cov;

  const int draws = 200'000;
  Matrix acc(mn, mn);
  RngStream mc = rng.derive("draws");
  for (int d = 0; d < draws; ++d) {
    const std::vector<double> z = gaussian_vector(mc, r2);
    std::vector<double> rv(r2, 0.0);
    for (std::size_t i = 0; i < r2; ++i)
      for (std::size_t j = 0; j < r2; ++j) rv[i] += g(i, j) * z[j];
    const Matrix core = unvec(rv, 2, 2);
    const std::vector<double> w = vec(matmul(matmul(mod.a, core), mod.b));
    for (std::size_t i = 0; i < mn; ++i)
      for (std::size_t j = 0; j < mn; ++j) acc(i, j) += w[i] * w[j];
  }
  for (double& x : acc.data()) x /= double(draws);
  REQUIRE(test::rel_frobenius_diff(acc, analytic) <= 0.03);
}

TEST_CASE("induced covariance is PSD with rank bounded by the core covariance") {
  RngStream rng(59, "icov-psd");
  AdapterModule mod = random_xs_module(rng, "s", 0, SiteKind::kDense, 4, 3, 2, 16.0);
  // Rank-1 core covariance.
  const Matrix u = gaussian_matrix(rng, 4, 1);
  const Matrix sigma = matmul(u, transpose(u));
  const Matrix cov = induced_cov(mod, sigma).cov;
  REQUIRE(test::cholesky_psd(cov, 1e-12));
  const std::vector<double> eig = test::sym_eigenvalues_jacobi(cov);
  REQUIRE(eig[0] > 1e-8);
  for (std::size_t i = 1; i < eig.size(); ++i) REQUIRE(std::abs(eig[i]) <= 1e-10 * eig[0]);
}

TEST_CASE("parameter counts reproduce the published table") {
  const ShapePreset preset = shape_preset("roberta-large");
  const struct {
    Method method;
    std::size_t r, k, expect;
    const char* display;
  } rows[] = {
      {Method::kLora, 2, 0, 196'608, "0.2M"},
      {Method::kLora, 8, 0, 786'432, "0.8M"},
      {Method::kLoraXs, 8, 0, 6'144, "6k"},
      {Method::kLoraXs, 25, 0, 60'000, "60k"},
      {Method::kSwagLora, 2, 10, 2'359'296, "2.4M"},
      {Method::kSwagLora, 8, 10, 9'437'184, "9.4M"},
      {Method::kSwagLora, 8, 5, 5'505'024, "5.5M"},
      {Method::kBLoraXs, 8, 10, 73'728, "74k"},
      {Method::kBLoraXs, 25, 10, 720'000, "0.7M"},
      {Method::kBLoraXs, 25, 5, 420'000, "0.4M"},
  };
  for (const auto& row : rows) {
    const std::size_t got = param_count(row.method, preset, row.r, row.k);
    REQUIRE(got == row.expect);
    REQUIRE(display_param_count(got) == row.display);
  }
}

TEST_CASE("desk-scale presets count their own sites") {
  const ShapePreset mlp = shape_preset("mlp");
  REQUIRE(param_count(Method::kLoraXs, mlp, 8) == 64);
  REQUIRE(param_count(Method::kLora, mlp, 8) == 64 * 8);
  REQUIRE(param_count(Method::kBLoraXs, mlp, 8, 10) == 64 * 12);

  const ShapePreset tfm = shape_preset("transformer");
  REQUIRE(param_count(Method::kLoraXs, tfm, 4) == 8 * 16);
  REQUIRE(param_count(Method::kLora, tfm, 4) == 4 * 32 * 4);
  REQUIRE_THROWS_AS(shape_preset("gpt-17"), std::invalid_argument);
}

TEST_CASE("method names round-trip") {
  for (Method m : {Method::kLora, Method::kLoraXs, Method::kSwagLora, Method::kBLoraXs})
    REQUIRE(parse_method(method_name(m)) == m);
  REQUIRE_THROWS_AS(parse_method("dora"), std::invalid_argument);
}
