#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "blxs/matrix.hpp"

namespace blxs::ad {

/// Reverse-mode tape over Matrix-valued nodes. A tape is built per forward
/// evaluation and discarded afterwards; nodes refer to earlier nodes only, so
/// backward is a single reverse scan over creation order.
class Tape {
public:
  using NodeId = int;

  NodeId leaf(Matrix value) {
    return push(Op::kLeaf, -1, -1, std::move(value));
  }

  NodeId matmul(NodeId a, NodeId b) {
    return push(Op::kMatmul, a, b, blxs::matmul(val(a), val(b)));
  }

  /// C = A * B^T.
  NodeId matmul_bt(NodeId a, NodeId b) {
    const Matrix& x = val(a);
    const Matrix& y = val(b);
    if (x.cols() != y.cols())
      throw std::invalid_argument("matmul_bt: inner dimensions disagree, " + x.shape_str() +
                                  " * (" + y.shape_str() + ")^T");
    Matrix c(x.rows(), y.rows());
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t j = 0; j < y.rows(); ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < x.cols(); ++k) s += x(i, k) * y(j, k);
        c(i, j) = s;
      }
    return push(Op::kMatmulBt, a, b, std::move(c));
  }

  NodeId add(NodeId a, NodeId b) {
    return push(Op::kAdd, a, b, blxs::add(val(a), val(b)));
  }

  /// Broadcast a 1 x n row vector over every row of a.
  NodeId add_rowvec(NodeId a, NodeId v) {
    const Matrix& x = val(a);
    const Matrix& r = val(v);
    if (r.rows() != 1 || r.cols() != x.cols())
      throw std::invalid_argument("add_rowvec: want 1x" + std::to_string(x.cols()) + ", got " +
                                  r.shape_str());
    Matrix c = x;
    for (std::size_t i = 0; i < c.rows(); ++i)
      for (std::size_t j = 0; j < c.cols(); ++j) c(i, j) += r(0, j);
    return push(Op::kAddRowvec, a, v, std::move(c));
  }

  NodeId scale(NodeId a, double s) {
    NodeId id = push(Op::kScale, a, -1, blxs::scale(val(a), s));
    nodes_[std::size_t(id)].aux_scalar = s;
    return id;
  }

  NodeId tanh_act(NodeId a) {
    Matrix c = val(a);
    for (double& x : c.data()) x = std::tanh(x);
    return push(Op::kTanh, a, -1, std::move(c));
  }

  NodeId softmax_rows(NodeId a) {
    Matrix p = val(a);
    softmax_rows_inplace(p);
    return push(Op::kSoftmaxRows, a, -1, std::move(p));
  }

  /// Row-wise layer normalization with learnable gain and shift (1 x n each).
  NodeId layer_norm(NodeId a, NodeId gamma, NodeId beta, double eps = 1e-5) {
    const Matrix& x = val(a);
    const Matrix& g = val(gamma);
    const Matrix& b = val(beta);
    if (g.rows() != 1 || g.cols() != x.cols() || b.rows() != 1 || b.cols() != x.cols())
      throw std::invalid_argument("layer_norm: gain/shift must be 1x" +
                                  std::to_string(x.cols()));
    const std::size_t n = x.cols();
    Matrix xhat(x.rows(), n);
    Matrix inv_sigma(x.rows(), 1);
    for (std::size_t i = 0; i < x.rows(); ++i) {
      double mu = 0.0;
      for (std::size_t j = 0; j < n; ++j) mu += x(i, j);
      mu /= double(n);
      double var = 0.0;
      for (std::size_t j = 0; j < n; ++j) var += (x(i, j) - mu) * (x(i, j) - mu);
      var /= double(n);
      const double inv = 1.0 / std::sqrt(var + eps);
      inv_sigma(i, 0) = inv;
      for (std::size_t j = 0; j < n; ++j) xhat(i, j) = (x(i, j) - mu) * inv;
    }
    Matrix y(x.rows(), n);
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t j = 0; j < n; ++j) y(i, j) = xhat(i, j) * g(0, j) + b(0, j);
    NodeId id = push(Op::kLayerNorm, a, gamma, std::move(y));
    nodes_[std::size_t(id)].c = beta;
    nodes_[std::size_t(id)].aux0 = std::move(xhat);
    nodes_[std::size_t(id)].aux1 = std::move(inv_sigma);
    return id;
  }

  /// 1 x n row vector of column means (mean pooling across rows).
  NodeId mean_rows(NodeId a) {
    const Matrix& x = val(a);
    Matrix c(1, x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t j = 0; j < x.cols(); ++j) c(0, j) += x(i, j);
    for (double& v : c.data()) v /= double(x.rows());
    return push(Op::kMeanRows, a, -1, std::move(c));
  }

  /// Stack the rows of the given nodes in order.
  NodeId concat_rows(const std::vector<NodeId>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
    std::size_t rows = 0;
    const std::size_t cols = val(parts[0]).cols();
    for (NodeId p : parts) {
      if (val(p).cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
      rows += val(p).rows();
    }
    Matrix c(rows, cols);
    std::size_t at = 0;
    for (NodeId p : parts) {
      const Matrix& x = val(p);
      for (std::size_t i = 0; i < x.rows(); ++i, ++at)
        for (std::size_t j = 0; j < cols; ++j) c(at, j) = x(i, j);
    }
    NodeId id = push(Op::kConcatRows, -1, -1, std::move(c));
    nodes_[std::size_t(id)].parts = parts;
    return id;
  }

  /// Mean softmax cross-entropy over rows; returns a 1x1 scalar node.
  NodeId softmax_cross_entropy(NodeId logits, const std::vector<int>& labels) {
    const Matrix& z = val(logits);
    if (z.rows() != labels.size())
      throw std::invalid_argument("softmax_cross_entropy: " + std::to_string(labels.size()) +
                                  " labels for " + z.shape_str() + " logits");
    Matrix p = z;
    softmax_rows_inplace(p);
    double loss = 0.0;
    for (std::size_t i = 0; i < z.rows(); ++i) {
      const int y = labels[i];
      if (y < 0 || std::size_t(y) >= z.cols())
        throw std::invalid_argument("softmax_cross_entropy: label out of range");
      loss -= std::log(std::max(p(i, std::size_t(y)), 1e-300));
    }
    Matrix out(1, 1);
    out(0, 0) = loss / double(z.rows());
    NodeId id = push(Op::kSoftmaxXent, logits, -1, std::move(out));
    nodes_[std::size_t(id)].aux0 = std::move(p);
    nodes_[std::size_t(id)].labels = labels;
    return id;
  }

  const Matrix& value(NodeId id) const { return val(id); }

  /// Gradient of the last backward() root w.r.t. the given node; empty matrix
  /// if the node did not participate.
  const Matrix& gradient(NodeId id) const { return nodes_[std::size_t(id)].grad; }

  void backward(NodeId root) {
    Matrix& r = nodes_[std::size_t(root)].val;
    if (r.rows() != 1 || r.cols() != 1)
      throw std::invalid_argument("backward: root must be a 1x1 scalar node");
    for (auto& n : nodes_) n.grad = Matrix();
    nodes_[std::size_t(root)].grad = Matrix(1, 1, 1.0);
    for (NodeId id = root; id >= 0; --id) propagate(id);
  }

private:
  enum class Op {
    kLeaf,
    kMatmul,
    kMatmulBt,
    kAdd,
    kAddRowvec,
    kScale,
    kTanh,
    kSoftmaxRows,
    kLayerNorm,
    kMeanRows,
    kConcatRows,
    kSoftmaxXent,
  };

  struct Node {
    Op op;
    NodeId a = -1, b = -1, c = -1;
    Matrix val;
    Matrix grad;
    Matrix aux0, aux1;
    double aux_scalar = 0.0;
    std::vector<NodeId> parts;
    std::vector<int> labels;
  };

  static void softmax_rows_inplace(Matrix& p) {
    for (std::size_t i = 0; i < p.rows(); ++i) {
      double mx = p(i, 0);
      for (std::size_t j = 1; j < p.cols(); ++j) mx = std::max(mx, p(i, j));
      double sum = 0.0;
      for (std::size_t j = 0; j < p.cols(); ++j) {
        p(i, j) = std::exp(p(i, j) - mx);
        sum += p(i, j);
      }
      for (std::size_t j = 0; j < p.cols(); ++j) p(i, j) /= sum;
    }
  }

  NodeId push(Op op, NodeId a, NodeId b, Matrix value) {
    Node n;
    n.op = op;
    n.a = a;
    n.b = b;
    n.val = std::move(value);
    nodes_.push_back(std::move(n));
    return NodeId(nodes_.size()) - 1;
  }

  const Matrix& val(NodeId id) const { return nodes_[std::size_t(id)].val; }

  void accum(NodeId id, const Matrix& g) {
    Matrix& dst = nodes_[std::size_t(id)].grad;
    if (dst.empty())
      dst = g;
    else
      for (std::size_t i = 0; i < dst.size(); ++i) dst.data()[i] += g.data()[i];
  }

  void propagate(NodeId id) {
    Node& n = nodes_[std::size_t(id)];
    if (n.grad.empty() || n.op == Op::kLeaf) return;
    const Matrix& dy = n.grad;
    switch (n.op) {
      case Op::kMatmul: {
        accum(n.a, blxs::matmul(dy, transpose(val(n.b))));
        accum(n.b, blxs::matmul(transpose(val(n.a)), dy));
        break;
      }
      case Op::kMatmulBt: {
        accum(n.a, blxs::matmul(dy, val(n.b)));
        accum(n.b, blxs::matmul(transpose(dy), val(n.a)));
        break;
      }
      case Op::kAdd: {
        accum(n.a, dy);
        accum(n.b, dy);
        break;
      }
      case Op::kAddRowvec: {
        accum(n.a, dy);
        Matrix dv(1, dy.cols());
        for (std::size_t i = 0; i < dy.rows(); ++i)
          for (std::size_t j = 0; j < dy.cols(); ++j) dv(0, j) += dy(i, j);
        accum(n.b, dv);
        break;
      }
      case Op::kScale: {
        accum(n.a, blxs::scale(dy, n.aux_scalar));
        break;
      }
      case Op::kTanh: {
        Matrix dx = dy;
        const Matrix& y = n.val;
        for (std::size_t i = 0; i < dx.size(); ++i)
          dx.data()[i] *= 1.0 - y.data()[i] * y.data()[i];
        accum(n.a, dx);
        break;
      }
      case Op::kSoftmaxRows: {
        const Matrix& p = n.val;
        Matrix dx(p.rows(), p.cols());
        for (std::size_t i = 0; i < p.rows(); ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < p.cols(); ++j) dot += dy(i, j) * p(i, j);
          for (std::size_t j = 0; j < p.cols(); ++j)
            dx(i, j) = p(i, j) * (dy(i, j) - dot);
        }
        accum(n.a, dx);
        break;
      }
      case Op::kLayerNorm: {
        const Matrix& xhat = n.aux0;
        const Matrix& inv_sigma = n.aux1;
        const Matrix& g = val(n.b);
        const std::size_t cols = xhat.cols();
        Matrix dgamma(1, cols), dbeta(1, cols);
        Matrix dx(xhat.rows(), cols);
        for (std::size_t i = 0; i < xhat.rows(); ++i) {
          double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
          for (std::size_t j = 0; j < cols; ++j) {
            const double dxh = dy(i, j) * g(0, j);
            dgamma(0, j) += dy(i, j) * xhat(i, j);
            dbeta(0, j) += dy(i, j);
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xhat(i, j);
          }
          mean_dxhat /= double(cols);
          mean_dxhat_xhat /= double(cols);
          for (std::size_t j = 0; j < cols; ++j) {
            const double dxh = dy(i, j) * g(0, j);
            dx(i, j) = inv_sigma(i, 0) * (dxh - mean_dxhat - xhat(i, j) * mean_dxhat_xhat);
          }
        }
        accum(n.a, dx);
        accum(n.b, dgamma);
        accum(n.c, dbeta);
        break;
      }
      case Op::kMeanRows: {
        const std::size_t rows = val(n.a).rows();
        Matrix dx(rows, dy.cols());
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < dy.cols(); ++j) dx(i, j) = dy(0, j) / double(rows);
        accum(n.a, dx);
        break;
      }
      case Op::kConcatRows: {
        std::size_t at = 0;
        for (NodeId p : n.parts) {
          const std::size_t rows = val(p).rows();
          Matrix dp(rows, dy.cols());
          for (std::size_t i = 0; i < rows; ++i, ++at)
            for (std::size_t j = 0; j < dy.cols(); ++j) dp(i, j) = dy(at, j);
          accum(p, dp);
        }
        break;
      }
      case Op::kSoftmaxXent: {
        const Matrix& p = n.aux0;
        const double scale = dy(0, 0) / double(p.rows());
        Matrix dz = p;
        for (std::size_t i = 0; i < p.rows(); ++i)
          dz(i, std::size_t(n.labels[i])) -= 1.0;
        for (double& x : dz.data()) x *= scale;
        accum(n.a, dz);
        break;
      }
      case Op::kLeaf:
        break;
    }
  }

  std::vector<Node> nodes_;
};

}  // namespace blxs::ad
