#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "blxs/adapters.hpp"
#include "blxs/backbone.hpp"
#include "blxs/swag.hpp"

namespace blxs {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace detail {

inline constexpr char kMagic[5] = {'B', 'L', 'X', 'S', '1'};
inline constexpr std::uint32_t kVersion = 1;

inline std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (char c : bytes) {
    h ^= std::uint64_t(static_cast<unsigned char>(c));
    h *= 0x100000001B3ULL;
  }
  return h;
}

class CheckpointWriter {
public:
  explicit CheckpointWriter(const nlohmann::json& meta) {
    buf_.append(kMagic, sizeof kMagic);
    raw(kVersion);
    const std::string text = meta.dump();
    raw(std::uint64_t(text.size()));
    buf_.append(text);
  }

  void array(const std::vector<double>& values) {
    raw(std::uint64_t(values.size()));
    buf_.append(reinterpret_cast<const char*>(values.data()), values.size() * sizeof(double));
  }

  void array(const Matrix& m) { array(m.data()); }

  void write(const std::string& path) {
    const std::uint64_t checksum = fnv1a(buf_);
    std::string out = buf_;
    out.append(reinterpret_cast<const char*>(&checksum), sizeof checksum);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
    f.write(out.data(), std::streamsize(out.size()));
    if (!f) throw std::runtime_error("checkpoint: short write to " + path);
  }

private:
  template <typename T>
  void raw(T value) {
    buf_.append(reinterpret_cast<const char*>(&value), sizeof value);
  }

  std::string buf_;
};

class CheckpointReader {
public:
  explicit CheckpointReader(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (bytes.size() < sizeof kMagic + sizeof kVersion + 2 * sizeof(std::uint64_t))
      throw std::runtime_error("checkpoint: truncated file " + path);
    const std::string body = bytes.substr(0, bytes.size() - sizeof(std::uint64_t));
    std::uint64_t stored = 0;
    std::memcpy(&stored, bytes.data() + bytes.size() - sizeof stored, sizeof stored);
    if (fnv1a(body) != stored)
      throw std::runtime_error("checkpoint: checksum mismatch in " + path);
    buf_ = std::move(body);
    if (std::memcmp(buf_.data(), kMagic, sizeof kMagic) != 0)
      throw std::runtime_error("checkpoint: bad magic in " + path);
    at_ = sizeof kMagic;
    const std::uint32_t version = raw<std::uint32_t>();
    if (version != kVersion)
      throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version) +
                               " in " + path);
    const std::uint64_t meta_len = raw<std::uint64_t>();
    if (at_ + meta_len > buf_.size()) throw std::runtime_error("checkpoint: truncated metadata");
    meta_ = nlohmann::json::parse(buf_.substr(at_, meta_len));
    at_ += meta_len;
  }

  const nlohmann::json& meta() const { return meta_; }

  std::vector<double> array() {
    const std::uint64_t count = raw<std::uint64_t>();
    if (at_ + count * sizeof(double) > buf_.size())
      throw std::runtime_error("checkpoint: truncated array");
    std::vector<double> values(count);
    std::memcpy(values.data(), buf_.data() + at_, count * sizeof(double));
    at_ += count * sizeof(double);
    return values;
  }

  Matrix matrix(std::size_t rows, std::size_t cols) {
    const std::vector<double> values = array();
    if (values.size() != rows * cols)
      throw std::runtime_error("checkpoint: array length does not match recorded shape");
    Matrix m(rows, cols);
    m.data() = values;
    return m;
  }

  void expect_kind(const std::string& kind) const {
    if (meta_.value("kind", "") != kind)
      throw std::runtime_error("checkpoint: expected kind '" + kind + "', found '" +
                               meta_.value("kind", "?") + "'");
  }

private:
  template <typename T>
  T raw() {
    if (at_ + sizeof(T) > buf_.size()) throw std::runtime_error("checkpoint: truncated header");
    T value;
    std::memcpy(&value, buf_.data() + at_, sizeof value);
    at_ += sizeof value;
    return value;
  }

  std::string buf_;
  std::size_t at_ = 0;
  nlohmann::json meta_;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Backbone

inline void save_backbone(const std::string& path, const Backbone& net) {
  Backbone copy = net;
  const std::vector<ParamRef> params = backbone_params(copy);
  nlohmann::json meta;
  meta["kind"] = "backbone";
  if (const auto* mlp = std::get_if<MlpBackbone>(&net)) {
    meta["arch"] = "mlp";
    meta["dims"] = {mlp->cfg.in, mlp->cfg.hidden1, mlp->cfg.hidden2, mlp->cfg.classes};
  } else {
    const auto& tfm = std::get<TransformerBackbone>(net);
    meta["arch"] = "transformer";
    meta["dims"] = {tfm.cfg.d, tfm.cfg.ffn, tfm.cfg.blocks, tfm.cfg.seq_len, tfm.cfg.classes};
  }
  nlohmann::json arrays = nlohmann::json::array();
  for (const ParamRef& p : params) arrays.push_back({{"name", p.name}, {"rows", p.rows}, {"cols", p.cols}});
  meta["arrays"] = std::move(arrays);

  detail::CheckpointWriter w(meta);
  for (const ParamRef& p : params) w.array(std::vector<double>(p.data, p.data + p.len));
  w.write(path);
}

inline Backbone load_backbone(const std::string& path) {
  detail::CheckpointReader r(path);
  r.expect_kind("backbone");
  const std::string arch = r.meta().at("arch");
  const auto dims = r.meta().at("dims");
  Backbone net;
  if (arch == "mlp") {
    net = init_mlp({dims.at(0), dims.at(1), dims.at(2), dims.at(3)}, RngStream(0, "load"));
  } else if (arch == "transformer") {
    net = init_transformer({dims.at(0), dims.at(1), dims.at(2), dims.at(3), dims.at(4)},
                           RngStream(0, "load"));
  } else {
    throw std::runtime_error("checkpoint: unknown arch '" + arch + "'");
  }
  const std::vector<ParamRef> params = backbone_params(net);
  const auto& arrays = r.meta().at("arrays");
  if (arrays.size() != params.size())
    throw std::runtime_error("checkpoint: array count does not match architecture");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (arrays.at(i).at("name") != params[i].name)
      throw std::runtime_error("checkpoint: unexpected array order");
    const std::vector<double> values = r.array();
    if (values.size() != params[i].len)
      throw std::runtime_error("checkpoint: array length mismatch for " + params[i].name);
    std::copy(values.begin(), values.end(), params[i].data);
  }
  return net;
}

// ---------------------------------------------------------------------------
// Adapters

inline void save_adapters(const std::string& path, const AdapterSet& set) {
  nlohmann::json meta;
  meta["kind"] = "adapters";
  nlohmann::json sites = nlohmann::json::array();
  for (const AdapterModule& mod : set) {
    sites.push_back({{"id", mod.site_id},
                     {"layer", mod.layer},
                     {"site_kind", int(mod.kind)},
                     {"mode", mod.mode == AdapterMode::kLoraXs ? "lora-xs" : "lora"},
                     {"m", mod.a.rows()},
                     {"n", mod.b.cols()},
                     {"rank", mod.rank},
                     {"alpha", mod.alpha}});
  }
  meta["sites"] = std::move(sites);
  detail::CheckpointWriter w(meta);
  for (const AdapterModule& mod : set) {
    w.array(mod.a);
    w.array(mod.b);
    if (mod.mode == AdapterMode::kLoraXs) w.array(mod.core);
  }
  w.write(path);
}

inline AdapterSet load_adapters(const std::string& path) {
  detail::CheckpointReader r(path);
  r.expect_kind("adapters");
  std::vector<AdapterModule> mods;
  for (const auto& site : r.meta().at("sites")) {
    AdapterModule mod;
    mod.site_id = site.at("id");
    mod.layer = site.at("layer");
    mod.kind = SiteKind(int(site.at("site_kind")));
    mod.mode = site.at("mode") == "lora-xs" ? AdapterMode::kLoraXs : AdapterMode::kLora;
    mod.rank = site.at("rank");
    mod.alpha = site.at("alpha");
    const std::size_t m = site.at("m"), n = site.at("n");
    mod.a = r.matrix(m, mod.rank);
    mod.b = r.matrix(mod.rank, n);
    if (mod.mode == AdapterMode::kLoraXs) mod.core = r.matrix(mod.rank, mod.rank);
    mods.push_back(std::move(mod));
  }
  return AdapterSet(std::move(mods));
}

// ---------------------------------------------------------------------------
// SWAG posterior

inline void save_posterior(const std::string& path, const SwagPosterior& post) {
  nlohmann::json meta;
  meta["kind"] = "posterior";
  meta["dim"] = post.dim();
  meta["k"] = post.k;
  meta["k_eff"] = post.k_eff;
  meta["unnormalized"] = post.unnormalized;
  detail::CheckpointWriter w(meta);
  w.array(post.mean);
  w.array(post.var);
  w.array(post.dev);
  w.write(path);
}

inline SwagPosterior load_posterior(const std::string& path) {
  detail::CheckpointReader r(path);
  r.expect_kind("posterior");
  SwagPosterior post;
  const std::size_t dim = r.meta().at("dim");
  post.k = r.meta().at("k");
  post.k_eff = r.meta().at("k_eff");
  post.unnormalized = r.meta().at("unnormalized");
  post.mean = r.array();
  post.var = r.array();
  post.dev = r.matrix(dim, post.k_eff);
  if (post.mean.size() != dim || post.var.size() != dim)
    throw std::runtime_error("checkpoint: posterior vector length mismatch");
  return post;
}

}  // namespace blxs
