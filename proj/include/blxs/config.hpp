#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "blxs/adapters.hpp"
#include "blxs/dataset.hpp"

namespace blxs {

/// Everything a single experiment needs; one flat key/value document
/// round-trips the whole struct so emitted results are self-describing.
struct ExperimentConfig {
  DatasetSpec dataset;
  std::string backbone = "mlp";  // mlp | transformer
  Method method = Method::kBLoraXs;
  std::size_t rank = 8;
  std::size_t cov_rank = 10;
  double alpha = 16.0;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::size_t burn_in_epochs = 25;
  std::size_t swag_epochs = 25;
  // -1 keeps collection starting right after burn-in.
  std::int64_t swag_start_epoch = -1;
  std::size_t samples = 15;
  double lr_max = 1e-2;
  double weight_decay = 0.01;
  double warmup_frac = 0.06;
  std::size_t batch = 32;
  double subsample = 1.0;
  std::size_t ece_bins = 15;
  bool cov_unnormalized = false;
  std::size_t pretrain_epochs = 60;
  double pretrain_lr = 1e-2;
  double pretrain_acc_target = 0.95;
  std::string cache_dir;
};

namespace detail {

inline std::string fmt_double(double x) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

inline std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r");
  std::size_t e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

struct ConfigValue {
  std::string raw;

  std::string str() const {
    if (raw.size() >= 2 && raw.front() == '"' && raw.back() == '"')
      return raw.substr(1, raw.size() - 2);
    return raw;
  }
  double num() const {
    try {
      std::size_t used = 0;
      const double v = std::stod(raw, &used);
      if (used != raw.size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      throw std::invalid_argument("config: '" + raw + "' is not a number");
    }
  }
  std::int64_t integer() const {
    const double v = num();
    const auto i = std::int64_t(v);
    if (double(i) != v) throw std::invalid_argument("config: '" + raw + "' is not an integer");
    return i;
  }
  bool boolean() const {
    if (raw == "true") return true;
    if (raw == "false") return false;
    throw std::invalid_argument("config: '" + raw + "' is not a boolean");
  }
  std::vector<std::uint64_t> int_list() const {
    if (raw.size() < 2 || raw.front() != '[' || raw.back() != ']')
      throw std::invalid_argument("config: '" + raw + "' is not a list");
    std::vector<std::uint64_t> out;
    std::stringstream ss(raw.substr(1, raw.size() - 2));
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = trim(item);
      if (item.empty()) continue;
      out.push_back(std::stoull(item));
    }
    return out;
  }
};

}  // namespace detail

/// Parses the flat `key = value` document (strings quoted, integer lists in
/// brackets, `#` comments). Unknown keys are rejected.
inline ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig cfg;
  std::stringstream ss(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(ss, line)) {
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(line_no) +
                                  ": expected key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    const detail::ConfigValue value{detail::trim(line.substr(eq + 1))};

    if (key == "dataset.family") cfg.dataset.family = value.str();
    else if (key == "dataset.n_train") cfg.dataset.n_train = std::size_t(value.integer());
    else if (key == "dataset.n_val") cfg.dataset.n_val = std::size_t(value.integer());
    else if (key == "dataset.noise") cfg.dataset.noise = value.num();
    else if (key == "dataset.shift_phi") cfg.dataset.shift_phi = value.num();
    else if (key == "dataset.shift_rho") cfg.dataset.shift_rho = value.num();
    else if (key == "dataset.shift_tilt") cfg.dataset.shift_tilt = value.num();
    else if (key == "dataset.seed") cfg.dataset.seed = std::uint64_t(value.integer());
    else if (key == "dataset.classes") cfg.dataset.classes = std::size_t(value.integer());
    else if (key == "dataset.seq_len") cfg.dataset.seq_len = std::size_t(value.integer());
    else if (key == "dataset.feat_dim") cfg.dataset.feat_dim = std::size_t(value.integer());
    else if (key == "backbone") cfg.backbone = value.str();
    else if (key == "method") cfg.method = parse_method(value.str());
    else if (key == "rank") cfg.rank = std::size_t(value.integer());
    else if (key == "cov_rank") cfg.cov_rank = std::size_t(value.integer());
    else if (key == "alpha") cfg.alpha = value.num();
    else if (key == "seeds") cfg.seeds = value.int_list();
    else if (key == "burn_in_epochs") cfg.burn_in_epochs = std::size_t(value.integer());
    else if (key == "swag_epochs") cfg.swag_epochs = std::size_t(value.integer());
    else if (key == "swag_start_epoch") cfg.swag_start_epoch = value.integer();
    else if (key == "samples") cfg.samples = std::size_t(value.integer());
    else if (key == "lr_max") cfg.lr_max = value.num();
    else if (key == "weight_decay") cfg.weight_decay = value.num();
    else if (key == "warmup_frac") cfg.warmup_frac = value.num();
    else if (key == "batch") cfg.batch = std::size_t(value.integer());
    else if (key == "subsample") cfg.subsample = value.num();
    else if (key == "ece_bins") cfg.ece_bins = std::size_t(value.integer());
    else if (key == "cov_unnormalized") cfg.cov_unnormalized = value.boolean();
    else if (key == "pretrain_epochs") cfg.pretrain_epochs = std::size_t(value.integer());
    else if (key == "pretrain_lr") cfg.pretrain_lr = value.num();
    else if (key == "pretrain_acc_target") cfg.pretrain_acc_target = value.num();
    else if (key == "cache_dir") cfg.cache_dir = value.str();
    else
      throw std::invalid_argument("config line " + std::to_string(line_no) +
                                  ": unknown key '" + key + "'");
  }
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("config: cannot open " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

/// Canonical document with every field materialized.
inline std::string write_config(const ExperimentConfig& cfg) {
  std::ostringstream out;
  const auto& d = cfg.dataset;
  out << "dataset.family = \"" << d.family << "\"\n";
  out << "dataset.n_train = " << d.n_train << "\n";
  out << "dataset.n_val = " << d.n_val << "\n";
  out << "dataset.noise = " << detail::fmt_double(d.noise) << "\n";
  out << "dataset.shift_phi = " << detail::fmt_double(d.shift_phi) << "\n";
  out << "dataset.shift_rho = " << detail::fmt_double(d.shift_rho) << "\n";
  out << "dataset.shift_tilt = " << detail::fmt_double(d.shift_tilt) << "\n";
  out << "dataset.seed = " << d.seed << "\n";
  out << "dataset.classes = " << d.classes << "\n";
  out << "dataset.seq_len = " << d.seq_len << "\n";
  out << "dataset.feat_dim = " << d.feat_dim << "\n";
  out << "backbone = \"" << cfg.backbone << "\"\n";
  out << "method = \"" << method_name(cfg.method) << "\"\n";
  out << "rank = " << cfg.rank << "\n";
  out << "cov_rank = " << cfg.cov_rank << "\n";
  out << "alpha = " << detail::fmt_double(cfg.alpha) << "\n";
  out << "seeds = [";
  for (std::size_t i = 0; i < cfg.seeds.size(); ++i)
    out << (i ? ", " : "") << cfg.seeds[i];
  out << "]\n";
  out << "burn_in_epochs = " << cfg.burn_in_epochs << "\n";
  out << "swag_epochs = " << cfg.swag_epochs << "\n";
  out << "swag_start_epoch = " << cfg.swag_start_epoch << "\n";
  out << "samples = " << cfg.samples << "\n";
  out << "lr_max = " << detail::fmt_double(cfg.lr_max) << "\n";
  out << "weight_decay = " << detail::fmt_double(cfg.weight_decay) << "\n";
  out << "warmup_frac = " << detail::fmt_double(cfg.warmup_frac) << "\n";
  out << "batch = " << cfg.batch << "\n";
  out << "subsample = " << detail::fmt_double(cfg.subsample) << "\n";
  out << "ece_bins = " << cfg.ece_bins << "\n";
  out << "cov_unnormalized = " << (cfg.cov_unnormalized ? "true" : "false") << "\n";
  out << "pretrain_epochs = " << cfg.pretrain_epochs << "\n";
  out << "pretrain_lr = " << detail::fmt_double(cfg.pretrain_lr) << "\n";
  out << "pretrain_acc_target = " << detail::fmt_double(cfg.pretrain_acc_target) << "\n";
  out << "cache_dir = \"" << cfg.cache_dir << "\"\n";
  return out.str();
}

}  // namespace blxs
