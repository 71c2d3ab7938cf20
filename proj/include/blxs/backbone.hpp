#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "blxs/adapters.hpp"
#include "blxs/autodiff.hpp"
#include "blxs/matrix.hpp"
#include "blxs/optimizer.hpp"
#include "blxs/rng.hpp"

namespace blxs {

/// A batch of examples. MLP batches have one row per example; transformer
/// batches store seq_len consecutive rows per example.
struct Batch {
  Matrix inputs;
  std::size_t seq_len = 1;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
};

struct DenseLayer {
  Matrix w;                  // in x out, frozen outside pretrain
  std::vector<double> bias;  // out
  std::string adapter_site;  // empty when the layer is not adaptable
};

struct LayerNormParams {
  std::vector<double> gamma, beta;
};

struct TransformerBlock {
  Matrix wq, wk, wv, wo;  // d x d
  DenseLayer fc1;         // d x ffn
  DenseLayer fc2;         // ffn x d
  LayerNormParams ln1, ln2;
};

struct MlpConfig {
  std::size_t in = 2, hidden1 = 32, hidden2 = 32, classes = 3;
};

struct MlpBackbone {
  MlpConfig cfg;
  DenseLayer fc1, fc2, head;
};

struct TransformerConfig {
  std::size_t d = 16, ffn = 32, blocks = 2, seq_len = 12, classes = 2;
};

struct TransformerBackbone {
  TransformerConfig cfg;
  std::vector<TransformerBlock> blocks;
  DenseLayer head;
};

using Backbone = std::variant<MlpBackbone, TransformerBackbone>;

inline std::size_t classes_of(const Backbone& net) {
  return std::visit([](const auto& n) { return n.cfg.classes; }, net);
}

inline std::size_t expected_seq_len(const Backbone& net) {
  if (const auto* t = std::get_if<TransformerBackbone>(&net)) return t->cfg.seq_len;
  return 1;
}

// ---------------------------------------------------------------------------
// Initialization

inline DenseLayer init_dense(std::size_t in, std::size_t out, RngStream rng,
                             std::string adapter_site = "") {
  DenseLayer l;
  const double std = std::sqrt(2.0 / double(in + out));
  l.w = gaussian_matrix(rng, in, out, std);
  l.bias.assign(out, 0.0);
  l.adapter_site = std::move(adapter_site);
  return l;
}

inline MlpBackbone init_mlp(const MlpConfig& cfg, const RngStream& rng) {
  MlpBackbone net;
  net.cfg = cfg;
  net.fc1 = init_dense(cfg.in, cfg.hidden1, rng.derive("fc1"));
  net.fc2 = init_dense(cfg.hidden1, cfg.hidden2, rng.derive("fc2"), "fc2");
  net.head = init_dense(cfg.hidden2, cfg.classes, rng.derive("head"));
  return net;
}

inline TransformerBackbone init_transformer(const TransformerConfig& cfg, const RngStream& rng) {
  TransformerBackbone net;
  net.cfg = cfg;
  const double std = std::sqrt(1.0 / double(cfg.d));
  for (std::size_t i = 0; i < cfg.blocks; ++i) {
    const std::string prefix = "blk" + std::to_string(i);
    TransformerBlock blk;
    RngStream r = rng.derive(prefix);
    blk.wq = gaussian_matrix(r, cfg.d, cfg.d, std);
    blk.wk = gaussian_matrix(r, cfg.d, cfg.d, std);
    blk.wv = gaussian_matrix(r, cfg.d, cfg.d, std);
    blk.wo = gaussian_matrix(r, cfg.d, cfg.d, std);
    blk.fc1 = init_dense(cfg.d, cfg.ffn, rng.derive(prefix + ".fc1"));
    blk.fc2 = init_dense(cfg.ffn, cfg.d, rng.derive(prefix + ".fc2"), prefix + ".fc_out");
    blk.ln1.gamma.assign(cfg.d, 1.0);
    blk.ln1.beta.assign(cfg.d, 0.0);
    blk.ln2.gamma.assign(cfg.d, 1.0);
    blk.ln2.beta.assign(cfg.d, 0.0);
    net.blocks.push_back(std::move(blk));
  }
  net.head = init_dense(cfg.d, cfg.classes, rng.derive("head"));
  return net;
}

// ---------------------------------------------------------------------------
// Adapter placement

/// Sites a method family may adapt. The XS variants adapt Query, Value,
/// Attention Output and the Output Fully Connected weight of every block;
/// plain LoRA adapts Query and Value. The MLP exposes its second hidden
/// layer either way; heads stay frozen.
inline std::vector<AdapterSite> adapter_sites(const Backbone& net, AdapterMode mode) {
  std::vector<AdapterSite> sites;
  if (const auto* mlp = std::get_if<MlpBackbone>(&net)) {
    sites.push_back({"fc2", 1, SiteKind::kDense, mlp->cfg.hidden1, mlp->cfg.hidden2});
    return sites;
  }
  const auto& tfm = std::get<TransformerBackbone>(net);
  for (std::size_t i = 0; i < tfm.cfg.blocks; ++i) {
    const std::string p = "blk" + std::to_string(i);
    const int layer = int(i);
    sites.push_back({p + ".q", layer, SiteKind::kQuery, tfm.cfg.d, tfm.cfg.d});
    sites.push_back({p + ".v", layer, SiteKind::kValue, tfm.cfg.d, tfm.cfg.d});
    if (mode == AdapterMode::kLoraXs) {
      sites.push_back({p + ".attn_out", layer, SiteKind::kAttnOut, tfm.cfg.d, tfm.cfg.d});
      sites.push_back({p + ".fc_out", layer, SiteKind::kFcOut, tfm.cfg.ffn, tfm.cfg.d});
    }
  }
  return sites;
}

inline const Matrix& site_weight(const Backbone& net, const AdapterSite& site) {
  if (const auto* mlp = std::get_if<MlpBackbone>(&net)) {
    if (site.id == "fc2") return mlp->fc2.w;
    throw std::invalid_argument("site_weight: unknown mlp site " + site.id);
  }
  const auto& tfm = std::get<TransformerBackbone>(net);
  const auto& blk = tfm.blocks.at(std::size_t(site.layer));
  switch (site.kind) {
    case SiteKind::kQuery: return blk.wq;
    case SiteKind::kValue: return blk.wv;
    case SiteKind::kAttnOut: return blk.wo;
    case SiteKind::kFcOut: return blk.fc2.w;
    default: throw std::invalid_argument("site_weight: unknown site kind for " + site.id);
  }
}

/// Builds the adapter set for a method family on a given backbone.
inline AdapterSet make_adapter_set(const Backbone& net, AdapterMode mode, std::size_t rank,
                                   double alpha, RngStream& rng) {
  std::vector<AdapterModule> mods;
  for (const AdapterSite& site : adapter_sites(net, mode)) {
    AdapterModule mod;
    if (mode == AdapterMode::kLoraXs) {
      mod = init_lora_xs(site_weight(net, site), rank, alpha);
    } else {
      RngStream site_rng = rng.derive(site.id);
      mod = init_lora(site.m, site.n, rank, alpha, site_rng);
    }
    mod.site_id = site.id;
    mod.layer = site.layer;
    mod.kind = site.kind;
    mods.push_back(std::move(mod));
  }
  return AdapterSet(std::move(mods));
}

// ---------------------------------------------------------------------------
// Forward graph

namespace detail {

struct GraphBuild {
  ad::Tape tape;
  ad::Tape::NodeId logits = -1;
  std::map<std::string, ad::Tape::NodeId> leaves;
};

inline Matrix rowvec(const std::vector<double>& v) {
  Matrix m(1, v.size());
  for (std::size_t j = 0; j < v.size(); ++j) m(0, j) = v[j];
  return m;
}

inline Matrix slice_rows(const Matrix& m, std::size_t begin, std::size_t count) {
  Matrix out(count, m.cols());
  for (std::size_t i = 0; i < count; ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out(i, j) = m(begin + i, j);
  return out;
}

class GraphBuilder {
public:
  GraphBuilder(GraphBuild& g, const AdapterSet* adapters) : g_(g), adapters_(adapters) {}

  ad::Tape::NodeId leaf(const std::string& name, const Matrix& value) {
    auto it = g_.leaves.find(name);
    if (it != g_.leaves.end()) return it->second;
    const auto id = g_.tape.leaf(value);
    g_.leaves.emplace(name, id);
    return id;
  }

  ad::Tape::NodeId leaf(const std::string& name, const std::vector<double>& value) {
    return leaf(name, rowvec(value));
  }

  /// x * W + bias plus the adapter contribution when the layer has one.
  ad::Tape::NodeId dense(ad::Tape::NodeId x, const DenseLayer& layer, const std::string& name) {
    auto out = g_.tape.matmul(x, leaf(name + ".w", layer.w));
    out = g_.tape.add_rowvec(out, leaf(name + ".b", layer.bias));
    return with_adapter(out, x, layer.adapter_site);
  }

  /// base + (alpha/r) x A [R] B when an adapter is present at the site.
  ad::Tape::NodeId with_adapter(ad::Tape::NodeId base, ad::Tape::NodeId x,
                                const std::string& site_id) {
    if (site_id.empty() || adapters_ == nullptr) return base;
    const AdapterModule* mod = adapters_->find(site_id);
    if (mod == nullptr) return base;
    auto u = g_.tape.matmul(x, leaf(site_id + ":A", mod->a));
    if (mod->mode == AdapterMode::kLoraXs)
      u = g_.tape.matmul(u, leaf(site_id + ":R", mod->core));
    u = g_.tape.matmul(u, leaf(site_id + ":B", mod->b));
    u = g_.tape.scale(u, mod->alpha / double(mod->rank));
    return g_.tape.add(base, u);
  }

  ad::Tape& tape() { return g_.tape; }

private:
  GraphBuild& g_;
  const AdapterSet* adapters_;
};

inline void check_batch(const Backbone& net, const Batch& batch) {
  const std::size_t seq = expected_seq_len(net);
  if (batch.labels.empty()) throw std::invalid_argument("forward: empty batch");
  if (batch.seq_len != seq)
    throw std::invalid_argument("forward: batch seq_len " + std::to_string(batch.seq_len) +
                                " != backbone seq_len " + std::to_string(seq));
  if (batch.inputs.rows() != batch.size() * seq)
    throw std::invalid_argument("forward: inputs have " + std::to_string(batch.inputs.rows()) +
                                " rows for " + std::to_string(batch.size()) + " examples");
  const std::size_t want =
      std::holds_alternative<MlpBackbone>(net) ? std::get<MlpBackbone>(net).cfg.in
                                               : std::get<TransformerBackbone>(net).cfg.d;
  if (batch.inputs.cols() != want)
    throw std::invalid_argument("forward: feature dim " + std::to_string(batch.inputs.cols()) +
                                " != backbone input dim " + std::to_string(want));
}

inline GraphBuild build_graph(const Backbone& net, const Batch& batch,
                              const AdapterSet* adapters) {
  check_batch(net, batch);
  GraphBuild g;
  GraphBuilder b(g, adapters);

  if (const auto* mlp = std::get_if<MlpBackbone>(&net)) {
    auto x = g.tape.leaf(batch.inputs);
    auto h1 = g.tape.tanh_act(b.dense(x, mlp->fc1, "fc1"));
    auto h2 = g.tape.tanh_act(b.dense(h1, mlp->fc2, "fc2"));
    g.logits = b.dense(h2, mlp->head, "head");
    return g;
  }

  const auto& tfm = std::get<TransformerBackbone>(net);
  const double attn_scale = 1.0 / std::sqrt(double(tfm.cfg.d));
  std::vector<ad::Tape::NodeId> pooled;
  for (std::size_t item = 0; item < batch.size(); ++item) {
    auto x = g.tape.leaf(slice_rows(batch.inputs, item * tfm.cfg.seq_len, tfm.cfg.seq_len));
    for (std::size_t i = 0; i < tfm.cfg.blocks; ++i) {
      const TransformerBlock& blk = tfm.blocks[i];
      const std::string p = "blk" + std::to_string(i);
      auto n1 = g.tape.layer_norm(x, b.leaf(p + ".ln1.g", blk.ln1.gamma),
                                  b.leaf(p + ".ln1.b", blk.ln1.beta));
      auto q = b.with_adapter(g.tape.matmul(n1, b.leaf(p + ".wq", blk.wq)), n1, p + ".q");
      auto k = g.tape.matmul(n1, b.leaf(p + ".wk", blk.wk));
      auto v = b.with_adapter(g.tape.matmul(n1, b.leaf(p + ".wv", blk.wv)), n1, p + ".v");
      auto probs = g.tape.softmax_rows(g.tape.scale(g.tape.matmul_bt(q, k), attn_scale));
      auto mixed = g.tape.matmul(probs, v);
      auto attn =
          b.with_adapter(g.tape.matmul(mixed, b.leaf(p + ".wo", blk.wo)), mixed, p + ".attn_out");
      x = g.tape.add(x, attn);
      auto n2 = g.tape.layer_norm(x, b.leaf(p + ".ln2.g", blk.ln2.gamma),
                                  b.leaf(p + ".ln2.b", blk.ln2.beta));
      auto f = g.tape.tanh_act(b.dense(n2, blk.fc1, p + ".fc1"));
      auto ff = b.dense(f, blk.fc2, p + ".fc2");
      x = g.tape.add(x, ff);
    }
    pooled.push_back(g.tape.mean_rows(x));
  }
  auto stacked = g.tape.concat_rows(pooled);
  g.logits = b.dense(stacked, tfm.head, "head");
  return g;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Forward, loss, gradients

inline Matrix forward(const Backbone& net, const Batch& batch,
                      const AdapterSet* adapters = nullptr) {
  detail::GraphBuild g = detail::build_graph(net, batch, adapters);
  return g.tape.value(g.logits);
}

/// Mean negative log softmax probability of the true class.
inline double loss(const Matrix& logits, const std::vector<int>& labels) {
  if (logits.rows() != labels.size())
    throw std::invalid_argument("loss: " + std::to_string(labels.size()) + " labels for " +
                                logits.shape_str() + " logits");
  double total = 0.0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    double mx = logits(i, 0);
    for (std::size_t j = 1; j < logits.cols(); ++j) mx = std::max(mx, logits(i, j));
    double sum = 0.0;
    for (std::size_t j = 0; j < logits.cols(); ++j) sum += std::exp(logits(i, j) - mx);
    total += std::log(sum) + mx - logits(i, std::size_t(labels[i]));
  }
  return total / double(logits.rows());
}

inline Matrix softmax_probs(const Matrix& logits) {
  Matrix p = logits;
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
  return p;
}

inline Matrix predict_probs(const Backbone& net, const Batch& batch,
                            const AdapterSet* adapters = nullptr) {
  return softmax_probs(forward(net, batch, adapters));
}

struct LossGrads {
  double loss = 0.0;
  std::vector<double> grad;  // pack() layout order over the trainable sites
  ParamLayout layout;
};

/// Loss plus the gradient w.r.t. the trainable adapter parameters, packed in
/// layout order. `trainable` restricts to a subset of site ids; by default
/// every site in the set.
inline LossGrads loss_and_grads(const Backbone& net, const Batch& batch,
                                const AdapterSet& adapters,
                                const std::vector<std::string>* trainable = nullptr) {
  std::set<std::string> wanted;
  if (trainable != nullptr) {
    for (const std::string& id : *trainable) {
      if (adapters.find(id) == nullptr)
        throw std::invalid_argument("loss_and_grads: unknown parameter id " + id);
      wanted.insert(id);
    }
  }

  detail::GraphBuild g = detail::build_graph(net, batch, &adapters);
  const auto loss_node = g.tape.softmax_cross_entropy(g.logits, batch.labels);
  g.tape.backward(loss_node);

  LossGrads out;
  out.loss = g.tape.value(loss_node)(0, 0);

  // Restricted pack layout over the requested sites, in set order.
  std::vector<AdapterModule> subset;
  for (const AdapterModule& mod : adapters)
    if (trainable == nullptr || wanted.count(mod.site_id)) subset.push_back(mod);
  AdapterSet sub(std::move(subset));
  out.layout = make_layout(sub);
  out.grad.assign(out.layout.total, 0.0);
  for (const LayoutEntry& e : out.layout.entries) {
    const std::string key = e.site_id + ":" + e.role;
    auto it = g.leaves.find(key);
    if (it == g.leaves.end())
      throw std::logic_error("loss_and_grads: site " + e.site_id + " missing from the graph");
    const Matrix& grad = g.tape.gradient(it->second);
    const std::vector<double> v =
        grad.empty() ? std::vector<double>(e.rows * e.cols, 0.0) : vec(grad);
    std::copy(v.begin(), v.end(), out.grad.begin() + long(e.offset));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Full-parameter view for pretraining

struct ParamRef {
  std::string name;
  double* data;
  std::size_t len;
  std::size_t rows, cols;  // rows=1 for bias/layer-norm vectors
};

inline void collect_dense(DenseLayer& l, const std::string& name, std::vector<ParamRef>& out) {
  out.push_back({name + ".w", l.w.data().data(), l.w.size(), l.w.rows(), l.w.cols()});
  out.push_back({name + ".b", l.bias.data(), l.bias.size(), 1, l.bias.size()});
}

inline std::vector<ParamRef> backbone_params(Backbone& net) {
  std::vector<ParamRef> out;
  if (auto* mlp = std::get_if<MlpBackbone>(&net)) {
    collect_dense(mlp->fc1, "fc1", out);
    collect_dense(mlp->fc2, "fc2", out);
    collect_dense(mlp->head, "head", out);
    return out;
  }
  auto& tfm = std::get<TransformerBackbone>(net);
  for (std::size_t i = 0; i < tfm.blocks.size(); ++i) {
    const std::string p = "blk" + std::to_string(i);
    TransformerBlock& blk = tfm.blocks[i];
    auto mat = [&](Matrix& m, const std::string& name) {
      out.push_back({name, m.data().data(), m.size(), m.rows(), m.cols()});
    };
    mat(blk.wq, p + ".wq");
    mat(blk.wk, p + ".wk");
    mat(blk.wv, p + ".wv");
    mat(blk.wo, p + ".wo");
    collect_dense(blk.fc1, p + ".fc1", out);
    collect_dense(blk.fc2, p + ".fc2", out);
    out.push_back({p + ".ln1.g", blk.ln1.gamma.data(), blk.ln1.gamma.size(), 1,
                   blk.ln1.gamma.size()});
    out.push_back({p + ".ln1.b", blk.ln1.beta.data(), blk.ln1.beta.size(), 1,
                   blk.ln1.beta.size()});
    out.push_back({p + ".ln2.g", blk.ln2.gamma.data(), blk.ln2.gamma.size(), 1,
                   blk.ln2.gamma.size()});
    out.push_back({p + ".ln2.b", blk.ln2.beta.data(), blk.ln2.beta.size(), 1,
                   blk.ln2.beta.size()});
  }
  collect_dense(tfm.head, "head", out);
  return out;
}

// ---------------------------------------------------------------------------
// Pretraining on the source task

struct PretrainConfig {
  std::size_t epochs = 60;
  std::size_t batch_size = 32;
  double lr = 1e-2;
  double acc_target = 0.95;
  AdamWConfig opt{1e-2, 0.9, 0.999, 1e-8, 0.0};
};

struct PretrainResult {
  double train_accuracy = 0.0;
  std::size_t epochs_run = 0;
};

inline Batch gather_batch(const Batch& all, const std::vector<std::size_t>& idx,
                          std::size_t begin, std::size_t count) {
  Batch b;
  b.seq_len = all.seq_len;
  b.inputs = Matrix(count * all.seq_len, all.inputs.cols());
  b.labels.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t src = idx[begin + i];
    b.labels[i] = all.labels[src];
    for (std::size_t s = 0; s < all.seq_len; ++s)
      for (std::size_t j = 0; j < all.inputs.cols(); ++j)
        b.inputs(i * all.seq_len + s, j) = all.inputs(src * all.seq_len + s, j);
  }
  return b;
}

inline double train_accuracy(const Backbone& net, const Batch& data,
                             const AdapterSet* adapters = nullptr) {
  const Matrix logits = forward(net, data, adapters);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    std::size_t arg = 0;
    for (std::size_t j = 1; j < logits.cols(); ++j)
      if (logits(i, j) > logits(i, arg)) arg = j;
    if (int(arg) == data.labels[i]) ++hits;
  }
  return double(hits) / double(logits.rows());
}

/// Trains every backbone weight including the head on the source task until
/// the accuracy target or the epoch cap, then the caller freezes the result.
/// Deterministic given the stream.
inline PretrainResult pretrain(Backbone& net, const Batch& train, const PretrainConfig& cfg,
                               const RngStream& rng) {
  std::vector<ParamRef> params = backbone_params(net);
  std::size_t dim = 0;
  for (const ParamRef& p : params) dim += p.len;
  AdamWConfig hp = cfg.opt;
  hp.lr_max = cfg.lr;
  OptimizerState opt(dim, hp);

  PretrainResult res;
  res.train_accuracy = train_accuracy(net, train);
  const std::size_t n = train.size();
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    RngStream shuffle_rng = rng.derive("shuffle", epoch);
    const std::vector<std::size_t> idx = random_permutation(shuffle_rng, n);
    for (std::size_t at = 0; at < n; at += cfg.batch_size) {
      const std::size_t count = std::min(cfg.batch_size, n - at);
      const Batch batch = gather_batch(train, idx, at, count);
      detail::GraphBuild g = detail::build_graph(net, batch, nullptr);
      const auto loss_node = g.tape.softmax_cross_entropy(g.logits, batch.labels);
      const double batch_loss = g.tape.value(loss_node)(0, 0);
      if (!std::isfinite(batch_loss))
        throw divergence_error("pretrain: non-finite loss at epoch " + std::to_string(epoch) +
                               ", step " + std::to_string(opt.step));
      g.tape.backward(loss_node);

      std::vector<double> theta(dim), grad(dim, 0.0);
      std::size_t off = 0;
      for (const ParamRef& p : params) {
        std::copy(p.data, p.data + p.len, theta.begin() + long(off));
        auto it = g.leaves.find(p.name);
        if (it != g.leaves.end()) {
          const Matrix& gm = g.tape.gradient(it->second);
          if (!gm.empty())
            std::copy(gm.data().begin(), gm.data().end(), grad.begin() + long(off));
        }
        off += p.len;
      }
      adamw_step(opt, theta, grad, cfg.lr);
      off = 0;
      for (const ParamRef& p : params) {
        std::copy(theta.begin() + long(off), theta.begin() + long(off + p.len), p.data);
        off += p.len;
      }
    }
    res.epochs_run = epoch + 1;
    res.train_accuracy = train_accuracy(net, train);
    if (res.train_accuracy >= cfg.acc_target) break;
  }
  return res;
}

}  // namespace blxs
