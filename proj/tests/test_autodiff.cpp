#include <catch2/catch_amalgamated.hpp>

#include <functional>

#include "blxs/autodiff.hpp"
#include "blxs/rng.hpp"
#include "oracles.hpp"

using namespace blxs;
using ad::Tape;

namespace {

using Builder = std::function<Tape::NodeId(Tape&, const std::vector<Tape::NodeId>&)>;

double eval_scalar(const Builder& build, const std::vector<Matrix>& leaves) {
  Tape tape;
  std::vector<Tape::NodeId> ids;
  for (const Matrix& m : leaves) ids.push_back(tape.leaf(m));
  return tape.value(build(tape, ids))(0, 0);
}

// Central finite differences against the tape gradient, every coordinate of
// every leaf.
void check_gradients(const Builder& build, std::vector<Matrix> leaves, double h = 1e-6,
                     double tol = 1e-6) {
  Tape tape;
  std::vector<Tape::NodeId> ids;
  for (const Matrix& m : leaves) ids.push_back(tape.leaf(m));
  tape.backward(build(tape, ids));

  for (std::size_t l = 0; l < leaves.size(); ++l) {
    const Matrix& g = tape.gradient(ids[l]);
    REQUIRE(!g.empty());
    for (std::size_t i = 0; i < leaves[l].size(); ++i) {
      const double keep = leaves[l].data()[i];
      leaves[l].data()[i] = keep + h;
      const double up = eval_scalar(build, leaves);
      leaves[l].data()[i] = keep - h;
      const double down = eval_scalar(build, leaves);
      leaves[l].data()[i] = keep;
      const double fd = (up - down) / (2.0 * h);
      REQUIRE_THAT(g.data()[i], Catch::Matchers::WithinAbs(fd, tol * std::max(1.0, std::abs(fd))));
    }
  }
}

}  // namespace

TEST_CASE("cross entropy of uniform logits is ln C") {
  Tape tape;
  const auto logits = tape.leaf(Matrix(4, 5));  // all zero -> uniform
  const auto loss = tape.softmax_cross_entropy(logits, {0, 1, 2, 3});
  REQUIRE_THAT(tape.value(loss)(0, 0), Catch::Matchers::WithinAbs(std::log(5.0), 1e-14));
}

TEST_CASE("dense stack gradient matches finite differences") {
  RngStream rng(101, "ad-dense");
  const std::vector<int> labels{0, 2, 1};
  const Builder build = [&](Tape& t, const std::vector<Tape::NodeId>& in) {
    auto h = t.tanh_act(t.add_rowvec(t.matmul(in[0], in[1]), in[2]));
    auto logits = t.add_rowvec(t.matmul(h, in[3]), in[4]);
    return t.softmax_cross_entropy(logits, labels);
  };
  check_gradients(build, {gaussian_matrix(rng, 3, 4), gaussian_matrix(rng, 4, 6),
                          gaussian_matrix(rng, 1, 6), gaussian_matrix(rng, 6, 3),
                          gaussian_matrix(rng, 1, 3)});
}

TEST_CASE("attention-style graph gradient matches finite differences") {
  RngStream rng(103, "ad-attn");
  const std::vector<int> labels{1};
  const Builder build = [&](Tape& t, const std::vector<Tape::NodeId>& in) {
    auto q = t.matmul(in[0], in[1]);
    auto k = t.matmul(in[0], in[2]);
    auto v = t.matmul(in[0], in[3]);
    auto scores = t.scale(t.matmul_bt(q, k), 1.0 / 2.0);
    auto probs = t.softmax_rows(scores);
    auto mixed = t.matmul(probs, v);
    auto pooled = t.mean_rows(mixed);
    auto logits = t.matmul(pooled, in[4]);
    return t.softmax_cross_entropy(logits, labels);
  };
  check_gradients(build, {gaussian_matrix(rng, 5, 4), gaussian_matrix(rng, 4, 4),
                          gaussian_matrix(rng, 4, 4), gaussian_matrix(rng, 4, 4),
                          gaussian_matrix(rng, 4, 3)});
}

TEST_CASE("layer norm gradient matches finite differences") {
  RngStream rng(107, "ad-ln");
  const std::vector<int> labels{2, 0};
  const Builder build = [&](Tape& t, const std::vector<Tape::NodeId>& in) {
    auto y = t.layer_norm(in[0], in[1], in[2]);
    auto logits = t.matmul(y, in[3]);
    return t.softmax_cross_entropy(logits, labels);
  };
  Matrix gamma(1, 6);
  for (std::size_t j = 0; j < 6; ++j) gamma(0, j) = 1.0 + 0.1 * double(j);
  check_gradients(build, {gaussian_matrix(rng, 2, 6), gamma, gaussian_matrix(rng, 1, 6),
                          gaussian_matrix(rng, 6, 4)});
}

TEST_CASE("concat_rows scatters gradients back to its parts") {
  RngStream rng(109, "ad-concat");
  const std::vector<int> labels{0, 1, 1};
  const Builder build = [&](Tape& t, const std::vector<Tape::NodeId>& in) {
    auto rows = t.concat_rows({in[0], in[1], in[2]});
    auto logits = t.matmul(rows, in[3]);
    return t.softmax_cross_entropy(logits, labels);
  };
  check_gradients(build, {gaussian_matrix(rng, 1, 4), gaussian_matrix(rng, 1, 4),
                          gaussian_matrix(rng, 1, 4), gaussian_matrix(rng, 4, 2)});
}

TEST_CASE("gradients accumulate when a node feeds two consumers") {
  RngStream rng(113, "ad-fanout");
  const std::vector<int> labels{1, 0};
  const Builder build = [&](Tape& t, const std::vector<Tape::NodeId>& in) {
    auto h = t.tanh_act(t.matmul(in[0], in[1]));
    auto left = t.matmul(h, in[2]);
    auto right = t.matmul(h, in[3]);
    return t.softmax_cross_entropy(t.add(left, right), labels);
  };
  check_gradients(build, {gaussian_matrix(rng, 2, 3), gaussian_matrix(rng, 3, 3),
                          gaussian_matrix(rng, 3, 2), gaussian_matrix(rng, 3, 2)});
}

TEST_CASE("backward rejects non-scalar roots") {
  Tape tape;
  const auto x = tape.leaf(Matrix(2, 2, 1.0));
  REQUIRE_THROWS_AS(tape.backward(x), std::invalid_argument);
}
