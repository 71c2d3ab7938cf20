#pragma once

#include <algorithm>
#include <cstdio>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "blxs/matrix.hpp"
#include "blxs/rng.hpp"
#include "blxs/svd.hpp"

namespace blxs {

enum class AdapterMode { kLora, kLoraXs };

/// Site kinds in their frozen packing order within a layer.
enum class SiteKind { kQuery = 0, kValue = 1, kAttnOut = 2, kFcOut = 3, kDense = 4 };

/// Where an adapter can be attached on a backbone: a frozen weight of shape
/// m x n, addressed by a stable id.
struct AdapterSite {
  std::string id;
  int layer = 0;
  SiteKind kind = SiteKind::kDense;
  std::size_t m = 0, n = 0;
};

/// One layer's adaptation state. In kLora mode A and B train and there is no
/// core; in kLoraXs mode A and B are frozen SVD projections and only the
/// r x r core trains.
struct AdapterModule {
  std::string site_id;
  int layer = 0;
  SiteKind kind = SiteKind::kDense;
  AdapterMode mode = AdapterMode::kLoraXs;
  Matrix a;     // m x r
  Matrix b;     // r x n
  Matrix core;  // r x r, kLoraXs only
  double alpha = 16.0;
  std::size_t rank = 0;

  std::size_t in_dim() const { return a.rows(); }
  std::size_t out_dim() const { return b.cols(); }
  std::size_t trainable_count() const {
    return mode == AdapterMode::kLoraXs ? rank * rank : (a.rows() + b.cols()) * rank;
  }
};

inline AdapterModule init_lora(std::size_t m, std::size_t n, std::size_t r, double alpha,
                               RngStream& rng) {
  if (r < 1 || r > std::min(m, n))
    throw std::invalid_argument("init_lora: rank " + std::to_string(r) + " out of range for " +
                                std::to_string(m) + "x" + std::to_string(n));
  AdapterModule mod;
  mod.mode = AdapterMode::kLora;
  mod.a = gaussian_matrix(rng, m, r, 0.02);
  mod.b = Matrix(r, n);  // zero, so the update starts at zero
  mod.alpha = alpha;
  mod.rank = r;
  return mod;
}

inline AdapterModule init_lora_xs(const Matrix& w0, std::size_t r, double alpha = 16.0) {
  const SvdFactors f = truncated_svd(w0, r);
  AdapterModule mod;
  mod.mode = AdapterMode::kLoraXs;
  mod.a = f.u;
  for (std::size_t j = 0; j < r; ++j)
    for (std::size_t i = 0; i < mod.a.rows(); ++i) mod.a(i, j) *= f.s[j];
  mod.b = transpose(f.v);
  mod.core = Matrix(r, r);  // zero: fine-tuning starts at the pretrained function
  mod.alpha = alpha;
  mod.rank = r;
  return mod;
}

/// Additive adapted contribution for a batch of activations, scaled by
/// alpha/r. The r x r contraction order keeps the cost at
/// O(batch * r * (m + n)); the dense update is never materialized.
inline Matrix adapted_update(const Matrix& x, const AdapterModule& mod) {
  if (x.cols() != mod.in_dim())
    throw std::invalid_argument("adapted_update: input " + x.shape_str() +
                                " does not match adapter in-dim " +
                                std::to_string(mod.in_dim()));
  Matrix u = matmul(x, mod.a);
  if (mod.mode == AdapterMode::kLoraXs) u = matmul(u, mod.core);
  u = matmul(u, mod.b);
  return scale(u, mod.alpha / double(mod.rank));
}

/// Ordered set of adapter modules. Order is frozen at construction:
/// ascending layer, then site kind (Q < V < AttnOut < FcOut); the packed
/// parameter layout and all SWAG state depend on it.
class AdapterSet {
public:
  AdapterSet() = default;

  explicit AdapterSet(std::vector<AdapterModule> mods) : mods_(std::move(mods)) {
    std::stable_sort(mods_.begin(), mods_.end(), [](const AdapterModule& x, const AdapterModule& y) {
      return x.layer != y.layer ? x.layer < y.layer : int(x.kind) < int(y.kind);
    });
    for (std::size_t i = 0; i < mods_.size(); ++i) {
      if (!index_.emplace(mods_[i].site_id, i).second)
        throw std::invalid_argument("AdapterSet: duplicate site id " + mods_[i].site_id);
    }
  }

  bool empty() const { return mods_.empty(); }
  std::size_t size() const { return mods_.size(); }
  const AdapterModule& operator[](std::size_t i) const { return mods_[i]; }
  AdapterModule& operator[](std::size_t i) { return mods_[i]; }

  const AdapterModule* find(const std::string& site_id) const {
    auto it = index_.find(site_id);
    return it == index_.end() ? nullptr : &mods_[it->second];
  }

  auto begin() const { return mods_.begin(); }
  auto end() const { return mods_.end(); }
  auto begin() { return mods_.begin(); }
  auto end() { return mods_.end(); }

private:
  std::vector<AdapterModule> mods_;
  std::map<std::string, std::size_t> index_;
};

/// One packed matrix inside the joint parameter vector.
struct LayoutEntry {
  std::string site_id;
  char role;  // 'R' core, 'A', 'B'
  std::size_t rows, cols, offset;
};

struct ParamLayout {
  std::vector<LayoutEntry> entries;
  std::size_t total = 0;

  bool operator==(const ParamLayout& o) const {
    if (total != o.total || entries.size() != o.entries.size()) return false;
    for (std::size_t i = 0; i < entries.size(); ++i) {
      const LayoutEntry &a = entries[i], &b = o.entries[i];
      if (a.site_id != b.site_id || a.role != b.role || a.rows != b.rows || a.cols != b.cols ||
          a.offset != b.offset)
        return false;
    }
    return true;
  }
};

/// Flattened trainable parameters across all adapted layers.
struct JointParamVector {
  std::vector<double> values;
  ParamLayout layout;
};

inline ParamLayout make_layout(const AdapterSet& set) {
  ParamLayout layout;
  std::size_t at = 0;
  for (const AdapterModule& mod : set) {
    if (mod.mode == AdapterMode::kLoraXs) {
      layout.entries.push_back({mod.site_id, 'R', mod.rank, mod.rank, at});
      at += mod.rank * mod.rank;
    } else {
      layout.entries.push_back({mod.site_id, 'A', mod.a.rows(), mod.rank, at});
      at += mod.a.rows() * mod.rank;
      layout.entries.push_back({mod.site_id, 'B', mod.rank, mod.b.cols(), at});
      at += mod.rank * mod.b.cols();
    }
  }
  layout.total = at;
  return layout;
}

/// Trainable matrices of every site flattened into one vector, column-stacked
/// per matrix, in set order.
inline JointParamVector pack(const AdapterSet& set) {
  JointParamVector joint;
  joint.layout = make_layout(set);
  joint.values.reserve(joint.layout.total);
  for (const AdapterModule& mod : set) {
    if (mod.mode == AdapterMode::kLoraXs) {
      const std::vector<double> v = vec(mod.core);
      joint.values.insert(joint.values.end(), v.begin(), v.end());
    } else {
      const std::vector<double> va = vec(mod.a);
      joint.values.insert(joint.values.end(), va.begin(), va.end());
      const std::vector<double> vb = vec(mod.b);
      joint.values.insert(joint.values.end(), vb.begin(), vb.end());
    }
  }
  return joint;
}

inline void unpack(std::span<const double> theta, AdapterSet& set) {
  const ParamLayout layout = make_layout(set);
  if (theta.size() != layout.total)
    throw std::invalid_argument("unpack: got " + std::to_string(theta.size()) +
                                " values, layout holds " + std::to_string(layout.total));
  for (const LayoutEntry& e : layout.entries) {
    AdapterModule& mod = *const_cast<AdapterModule*>(set.find(e.site_id));
    const std::vector<double> chunk(theta.begin() + long(e.offset),
                                    theta.begin() + long(e.offset + e.rows * e.cols));
    Matrix m = unvec(chunk, e.rows, e.cols);
    if (e.role == 'R')
      mod.core = std::move(m);
    else if (e.role == 'A')
      mod.a = std::move(m);
    else
      mod.b = std::move(m);
  }
}

inline void unpack(const JointParamVector& joint, AdapterSet& set) {
  if (!(joint.layout == make_layout(set)))
    throw std::invalid_argument("unpack: layout mismatch with adapter set");
  unpack(std::span<const double>(joint.values), set);
}

/// Test-scale cap shared by the dense oracles below.
inline constexpr std::size_t kDenseOracleCap = 4096;

/// Block-diagonal projector with one kron(B^T, A) block per site in pack
/// order. Maps the packed cores to the column-stacked weight updates
/// (unscaled). Test-scale oracle; rejects large sets.
inline Matrix build_projector(const AdapterSet& set,
                              std::size_t max_flat = kDenseOracleCap) {
  std::size_t out_dim = 0, in_dim = 0;
  for (const AdapterModule& mod : set) {
    if (mod.mode != AdapterMode::kLoraXs)
      throw std::invalid_argument("build_projector: defined only for lora-xs adapter sets");
    out_dim += mod.in_dim() * mod.out_dim();
    in_dim += mod.rank * mod.rank;
  }
  if (out_dim > max_flat)
    throw std::invalid_argument("build_projector: flattened weight size " +
                                std::to_string(out_dim) + " exceeds test cap " +
                                std::to_string(max_flat));
  Matrix p(out_dim, in_dim);
  std::size_t ro = 0, co = 0;
  for (const AdapterModule& mod : set) {
    const Matrix block = kron(transpose(mod.b), mod.a);
    for (std::size_t i = 0; i < block.rows(); ++i)
      for (std::size_t j = 0; j < block.cols(); ++j) p(ro + i, co + j) = block(i, j);
    ro += block.rows();
    co += block.cols();
  }
  return p;
}

/// Dense covariance of one site's flattened weight update induced by a core
/// covariance: (B^T x A) Sigma_R (B^T x A)^T.
struct InducedCovariance {
  std::string site_id;
  Matrix cov;  // (m n) x (m n)
};

inline InducedCovariance induced_cov(const AdapterModule& mod, const Matrix& sigma_r,
                                     std::size_t max_flat = kDenseOracleCap) {
  const std::size_t r2 = mod.rank * mod.rank;
  if (sigma_r.rows() != r2 || sigma_r.cols() != r2)
    throw std::invalid_argument("induced_cov: sigma must be " + std::to_string(r2) + "x" +
                                std::to_string(r2) + ", got " + sigma_r.shape_str());
  for (std::size_t i = 0; i < r2; ++i)
    for (std::size_t j = i + 1; j < r2; ++j)
      if (std::abs(sigma_r(i, j) - sigma_r(j, i)) > 1e-10)
        throw std::invalid_argument("induced_cov: sigma is not symmetric at (" +
                                    std::to_string(i) + "," + std::to_string(j) + ")");
  if (mod.in_dim() * mod.out_dim() > max_flat)
    throw std::invalid_argument("induced_cov: site exceeds test cap");
  const Matrix proj = kron(transpose(mod.b), mod.a);
  InducedCovariance out;
  out.site_id = mod.site_id;
  out.cov = matmul(matmul(proj, sigma_r), transpose(proj));
  // Symmetrize away the last-bit asymmetry of the two matmuls.
  for (std::size_t i = 0; i < out.cov.rows(); ++i)
    for (std::size_t j = i + 1; j < out.cov.cols(); ++j) {
      const double s = 0.5 * (out.cov(i, j) + out.cov(j, i));
      out.cov(i, j) = s;
      out.cov(j, i) = s;
    }
  return out;
}

// ---------------------------------------------------------------------------
// Parameter counting

enum class Method { kLora, kLoraXs, kSwagLora, kBLoraXs };

inline bool is_bayesian(Method m) { return m == Method::kSwagLora || m == Method::kBLoraXs; }
inline bool is_xs(Method m) { return m == Method::kLoraXs || m == Method::kBLoraXs; }

inline std::string method_name(Method m) {
  switch (m) {
    case Method::kLora: return "lora";
    case Method::kLoraXs: return "lora-xs";
    case Method::kSwagLora: return "swag-lora";
    case Method::kBLoraXs: return "b-lora-xs";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  if (s == "lora") return Method::kLora;
  if (s == "lora-xs" || s == "lora_xs") return Method::kLoraXs;
  if (s == "swag-lora" || s == "swag_lora") return Method::kSwagLora;
  if (s == "b-lora-xs" || s == "b_lora_xs") return Method::kBLoraXs;
  throw std::invalid_argument("unknown method: " + s);
}

/// Adapter placement of a model family: which (m, n) weights the plain-LoRA
/// methods adapt and which ones the XS variants adapt.
struct ShapePreset {
  std::string name;
  std::vector<std::pair<std::size_t, std::size_t>> lora_sites;
  std::vector<std::pair<std::size_t, std::size_t>> xs_sites;
};

inline ShapePreset shape_preset(const std::string& name) {
  ShapePreset p;
  p.name = name;
  if (name == "roberta-large" || name == "roberta-large-count-only") {
    // 24 layers; LoRA adapts Query and Value; the XS variants additionally
    // adapt Attention Output and the Output Fully Connected weight.
    for (int layer = 0; layer < 24; ++layer) {
      p.lora_sites.push_back({1024, 1024});  // Q
      p.lora_sites.push_back({1024, 1024});  // V
      p.xs_sites.push_back({1024, 1024});    // Q
      p.xs_sites.push_back({1024, 1024});    // V
      p.xs_sites.push_back({1024, 1024});    // attention output
      p.xs_sites.push_back({4096, 1024});    // output fully connected
    }
    return p;
  }
  if (name == "mlp") {
    p.lora_sites.push_back({32, 32});
    p.xs_sites.push_back({32, 32});
    return p;
  }
  if (name == "transformer") {
    for (int layer = 0; layer < 2; ++layer) {
      p.lora_sites.push_back({16, 16});  // Q
      p.lora_sites.push_back({16, 16});  // V
      p.xs_sites.push_back({16, 16});    // Q
      p.xs_sites.push_back({16, 16});    // V
      p.xs_sites.push_back({16, 16});    // attention output
      p.xs_sites.push_back({32, 16});    // output fully connected
    }
    return p;
  }
  throw std::invalid_argument("unknown shape preset: " + name);
}

/// Trainable-parameter count of a method on a preset. Bayesian methods pay
/// (k + 2) copies of the point budget: mean, variance and k deviation
/// columns.
inline std::size_t param_count(Method method, const ShapePreset& preset, std::size_t r,
                               std::size_t k = 0) {
  std::size_t point = 0;
  if (is_xs(method)) {
    for (const auto& [m, n] : preset.xs_sites) {
      (void)m;
      (void)n;
      point += r * r;
    }
  } else {
    for (const auto& [m, n] : preset.lora_sites) point += (m + n) * r;
  }
  return is_bayesian(method) ? point * (k + 2) : point;
}

/// Rounded display string matching parameter-table conventions:
/// below 100k as "6k", otherwise one decimal of millions, "0.8M".
inline std::string display_param_count(std::size_t count) {
  char buf[32];
  if (count < 100'000) {
    std::snprintf(buf, sizeof buf, "%ldk", std::lround(double(count) / 1000.0));
  } else {
    std::snprintf(buf, sizeof buf, "%.1fM", double(count) / 1e6);
  }
  return buf;
}

}  // namespace blxs
