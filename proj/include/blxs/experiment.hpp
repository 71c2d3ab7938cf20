#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "blxs/checkpoint.hpp"
#include "blxs/config.hpp"
#include "blxs/dataset.hpp"
#include "blxs/metrics.hpp"
#include "blxs/swag.hpp"
#include "blxs/train.hpp"

namespace blxs {

/// One run's outcome row. Failed runs (training divergence) keep their config
/// echo and carry NaN metrics.
struct MetricsRecord {
  std::string dataset;
  std::string method;
  std::size_t r = 0;
  std::size_t k = 0;
  std::uint64_t seed = 0;
  double subsample = 1.0;
  std::size_t param_count = 0;
  double accuracy = 0.0, ece = 0.0, nll = 0.0, brier = 0.0;
  double wall_time_s = 0.0;
  bool failed = false;
};

inline AdapterMode mode_of(Method m) {
  return is_xs(m) ? AdapterMode::kLoraXs : AdapterMode::kLora;
}

inline void validate(const ExperimentConfig& cfg) {
  if (cfg.subsample <= 0.0 || cfg.subsample > 1.0)
    throw std::invalid_argument("config: subsample must be in (0, 1]");
  if (cfg.samples < 1) throw std::invalid_argument("config: samples must be >= 1");
  if (cfg.seeds.empty()) throw std::invalid_argument("config: need at least one seed");
  if (cfg.backbone != "mlp" && cfg.backbone != "transformer")
    throw std::invalid_argument("config: unknown backbone '" + cfg.backbone + "'");
  const bool seq = cfg.dataset.family == "seq-majority";
  if (seq != (cfg.backbone == "transformer"))
    throw std::invalid_argument("config: family '" + cfg.dataset.family +
                                "' does not match backbone '" + cfg.backbone + "'");
  (void)shape_preset(cfg.backbone);
}

namespace detail {

inline Backbone fresh_backbone(const ExperimentConfig& cfg, const RngStream& rng) {
  if (cfg.backbone == "mlp")
    return init_mlp({2, 32, 32, cfg.dataset.class_count()}, rng);
  return init_transformer(
      {cfg.dataset.feat_dim, 32, 2, cfg.dataset.seq_len, cfg.dataset.class_count()}, rng);
}

inline std::string pretrain_cache_key(const ExperimentConfig& cfg, std::uint64_t seed) {
  std::ostringstream key;
  const auto& d = cfg.dataset;
  key << cfg.backbone << '|' << d.family << '|' << d.n_train << '|' << d.n_val << '|'
      << fmt_double(d.noise) << '|' << d.seed << '|' << d.classes << '|' << d.seq_len << '|'
      << d.feat_dim << '|' << cfg.pretrain_epochs << '|' << fmt_double(cfg.pretrain_lr) << '|'
      << fmt_double(cfg.pretrain_acc_target) << '|' << seed;
  return key.str();
}

inline Batch subsample_batch(const Batch& all, double fraction, std::uint64_t seed) {
  const std::size_t keep = std::max<std::size_t>(1, std::size_t(double(all.size()) * fraction));
  if (keep >= all.size()) return all;
  RngStream rng(seed, "subsample");
  std::vector<std::size_t> idx = random_permutation(rng, all.size());
  idx.resize(keep);
  return gather_batch(all, idx, 0, keep);
}

}  // namespace detail

/// Shares pretrained backbones across the runs of a sweep; keyed by backbone
/// spec, source dataset spec and run seed. Optionally persisted to disk.
class PretrainCache {
public:
  explicit PretrainCache(std::string dir = "") : dir_(std::move(dir)) {}

  Backbone get_or_train(const std::string& key, const std::function<Backbone()>& make) {
    auto it = mem_.find(key);
    if (it != mem_.end()) return it->second;
    if (!dir_.empty()) {
      const std::string file = path_for(key);
      if (std::filesystem::exists(file)) {
        Backbone net = load_backbone(file);
        mem_.emplace(key, net);
        return net;
      }
    }
    Backbone net = make();
    mem_.emplace(key, net);
    if (!dir_.empty()) {
      std::filesystem::create_directories(dir_);
      save_backbone(path_for(key), net);
    }
    return net;
  }

private:
  std::string path_for(const std::string& key) const {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(detail::fnv1a(key)));
    return (std::filesystem::path(dir_) / ("pretrain_" + std::string(buf) + ".bin")).string();
  }

  std::string dir_;
  std::map<std::string, Backbone> mem_;
};

/// Full pipeline for one seed: pretrain (or cache hit), adapter init,
/// burn-in, optional SWAG collection and BMA, then target-validation metrics.
inline MetricsRecord run_single(const ExperimentConfig& cfg, std::uint64_t seed,
                                PretrainCache* cache = nullptr) {
  const auto t0 = std::chrono::steady_clock::now();
  MetricsRecord rec;
  rec.dataset = cfg.dataset.family;
  rec.method = method_name(cfg.method);
  rec.r = cfg.rank;
  rec.k = is_bayesian(cfg.method) ? cfg.cov_rank : 0;
  rec.seed = seed;
  rec.subsample = cfg.subsample;

  try {
    const DatasetPair data = make_dataset(cfg.dataset);
    const Batch train = detail::subsample_batch(data.target.train, cfg.subsample, seed);

    const RngStream pre_rng(seed, "pretrain");
    auto make_net = [&]() {
      Backbone net = detail::fresh_backbone(cfg, pre_rng.derive("init"));
      PretrainConfig pc;
      pc.epochs = cfg.pretrain_epochs;
      pc.lr = cfg.pretrain_lr;
      pc.acc_target = cfg.pretrain_acc_target;
      pretrain(net, data.source.train, pc, pre_rng.derive("train"));
      return net;
    };
    PretrainCache local;
    PretrainCache& store = cache ? *cache : local;
    const Backbone net = store.get_or_train(detail::pretrain_cache_key(cfg, seed), make_net);

    const RngStream run_rng(seed, "run");
    RngStream init_rng = run_rng.derive("adapter-init");
    AdapterSet adapters =
        make_adapter_set(net, mode_of(cfg.method), cfg.rank, cfg.alpha, init_rng);

    std::size_t dim = 0;
    for (const AdapterModule& mod : adapters) dim += mod.trainable_count();
    rec.param_count = is_bayesian(cfg.method) ? dim * (cfg.cov_rank + 2) : dim;

    TrainConfig tc;
    tc.opt.lr_max = cfg.lr_max;
    tc.opt.weight_decay = cfg.weight_decay;
    tc.batch_size = cfg.batch;
    tc.burn_in_epochs = cfg.burn_in_epochs;
    tc.swag_epochs = is_bayesian(cfg.method) ? cfg.swag_epochs : 0;
    tc.swag_start_epoch = cfg.swag_start_epoch < 0 ? std::size_t(-1)
                                                   : std::size_t(cfg.swag_start_epoch);
    tc.warmup_frac = cfg.warmup_frac;

    SwagState swag(dim, cfg.cov_rank);
    const std::size_t collect_from = tc.effective_swag_start();
    const FineTuneResult fit = fine_tune(
        net, adapters, train, tc, run_rng.derive("fine-tune"),
        [&](std::span<const double> theta, std::size_t epoch) {
          if (is_bayesian(cfg.method) && epoch >= collect_from) swag.collect(theta);
        });

    Matrix probs;
    const std::size_t need = cfg.cov_rank == 0 ? 1 : 2;
    if (is_bayesian(cfg.method) && swag.collected() >= need) {
      const SwagPosterior post = swag_finalize(swag, cfg.cov_unnormalized);
      probs = bma_predict(net, adapters, post, data.target.val, cfg.samples,
                          run_rng.derive("bma"))
                  .probs;
    } else {
      // Not enough collections for a posterior: point prediction at the
      // final parameters.
      probs = predict_probs(net, data.target.val, &adapters);
    }

    const EvalResult eval = evaluate(probs, data.target.val.labels, cfg.ece_bins);
    rec.accuracy = eval.accuracy;
    rec.ece = eval.ece;
    rec.nll = eval.nll;
    rec.brier = eval.brier;
  } catch (const divergence_error&) {
    rec.failed = true;
    rec.accuracy = rec.ece = rec.nll = rec.brier = std::numeric_limits<double>::quiet_NaN();
  }

  rec.wall_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

inline std::vector<MetricsRecord> run_experiment(const ExperimentConfig& cfg,
                                                 PretrainCache* cache = nullptr) {
  validate(cfg);
  std::vector<MetricsRecord> records;
  for (std::uint64_t seed : cfg.seeds) records.push_back(run_single(cfg, seed, cache));
  return records;
}

// ---------------------------------------------------------------------------
// Sweeps

enum class SweepAxis { kRank, kCovRank, kSubsample };

inline SweepAxis parse_axis(const std::string& s) {
  if (s == "rank" || s == "r") return SweepAxis::kRank;
  if (s == "cov-rank" || s == "cov_rank" || s == "k") return SweepAxis::kCovRank;
  if (s == "subsample") return SweepAxis::kSubsample;
  throw std::invalid_argument("unknown sweep axis: " + s);
}

inline std::vector<double> default_axis_values(SweepAxis axis) {
  switch (axis) {
    case SweepAxis::kRank: return {2, 8, 16, 25};
    case SweepAxis::kCovRank: return {0, 2, 5, 10, 20};
    case SweepAxis::kSubsample: return {1.0, 0.5, 0.25, 0.1};
  }
  return {};
}

inline std::vector<MetricsRecord> sweep(const ExperimentConfig& base, SweepAxis axis,
                                        std::vector<double> values,
                                        PretrainCache* cache = nullptr) {
  if (values.empty()) values = default_axis_values(axis);
  std::vector<MetricsRecord> records;
  for (double v : values) {
    ExperimentConfig cfg = base;
    switch (axis) {
      case SweepAxis::kRank: cfg.rank = std::size_t(v); break;
      case SweepAxis::kCovRank: cfg.cov_rank = std::size_t(v); break;
      case SweepAxis::kSubsample: cfg.subsample = v; break;
    }
    const std::vector<MetricsRecord> part = run_experiment(cfg, cache);
    records.insert(records.end(), part.begin(), part.end());
  }
  return records;
}

// ---------------------------------------------------------------------------
// Aggregation

struct MetricStat {
  double median = 0.0;
  double sd = 0.0;
};

struct AggregateRow {
  std::string method;
  std::size_t r = 0;
  std::size_t k = 0;
  double subsample = 1.0;
  std::size_t n_seeds = 0;
  MetricStat accuracy, ece, nll, brier;
};

namespace detail {

inline MetricStat stat_of(std::vector<double> values) {
  MetricStat s;
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  s.median = (n % 2 == 1) ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
  if (n > 1) {
    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= double(n);
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    s.sd = std::sqrt(ss / double(n - 1));
  }
  return s;
}

}  // namespace detail

/// Per (method, r, k, subsample) group: median and sample s.d. of each
/// metric across seeds. Failed records are left out; order of the input does
/// not matter.
inline std::vector<AggregateRow> aggregate(const std::vector<MetricsRecord>& records) {
  if (records.empty()) throw std::invalid_argument("aggregate: no records");
  using Key = std::tuple<std::string, std::size_t, std::size_t, double>;
  std::map<Key, std::vector<const MetricsRecord*>> groups;
  for (const MetricsRecord& rec : records) {
    if (rec.failed) continue;
    groups[{rec.method, rec.r, rec.k, rec.subsample}].push_back(&rec);
  }
  std::vector<AggregateRow> rows;
  for (const auto& [key, group] : groups) {
    AggregateRow row;
    row.method = std::get<0>(key);
    row.r = std::get<1>(key);
    row.k = std::get<2>(key);
    row.subsample = std::get<3>(key);
    row.n_seeds = group.size();
    auto collect = [&](auto field) {
      std::vector<double> v;
      for (const MetricsRecord* rec : group) v.push_back(rec->*field);
      return detail::stat_of(std::move(v));
    };
    row.accuracy = collect(&MetricsRecord::accuracy);
    row.ece = collect(&MetricsRecord::ece);
    row.nll = collect(&MetricsRecord::nll);
    row.brier = collect(&MetricsRecord::brier);
    rows.push_back(std::move(row));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Serialization

inline constexpr const char* kRecordsCsvHeader =
    "dataset,method,r,k,seed,subsample,param_count,accuracy,ece,nll,brier,wall_time_s";

inline std::string records_csv(const std::vector<MetricsRecord>& records) {
  std::ostringstream out;
  out << kRecordsCsvHeader << '\n';
  for (const MetricsRecord& r : records) {
    char wall[32];
    std::snprintf(wall, sizeof wall, "%.3f", r.wall_time_s);
    out << r.dataset << ',' << r.method << ',' << r.r << ',' << r.k << ',' << r.seed << ','
        << detail::fmt_double(r.subsample) << ',' << r.param_count << ','
        << detail::fmt_double(r.accuracy) << ',' << detail::fmt_double(r.ece) << ','
        << detail::fmt_double(r.nll) << ',' << detail::fmt_double(r.brier) << ',' << wall
        << '\n';
  }
  return out.str();
}

inline std::vector<MetricsRecord> parse_records_csv(const std::string& text) {
  std::stringstream ss(text);
  std::string line;
  if (!std::getline(ss, line) || detail::trim(line) != kRecordsCsvHeader)
    throw std::invalid_argument("records csv: missing or unexpected header");
  std::vector<MetricsRecord> records;
  while (std::getline(ss, line)) {
    line = detail::trim(line);
    if (line.empty()) continue;
    std::stringstream row(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(row, field, ',')) fields.push_back(field);
    if (fields.size() != 12)
      throw std::invalid_argument("records csv: expected 12 fields, got " +
                                  std::to_string(fields.size()));
    MetricsRecord r;
    r.dataset = fields[0];
    r.method = fields[1];
    r.r = std::stoull(fields[2]);
    r.k = std::stoull(fields[3]);
    r.seed = std::stoull(fields[4]);
    r.subsample = std::stod(fields[5]);
    r.param_count = std::stoull(fields[6]);
    r.accuracy = std::stod(fields[7]);
    r.ece = std::stod(fields[8]);
    r.nll = std::stod(fields[9]);
    r.brier = std::stod(fields[10]);
    r.wall_time_s = std::stod(fields[11]);
    r.failed = std::isnan(r.accuracy);
    records.push_back(std::move(r));
  }
  return records;
}

inline std::string aggregate_csv(const std::vector<AggregateRow>& rows) {
  std::ostringstream out;
  out << "method,r,k,subsample,n_seeds,acc_median,acc_sd,ece_median,ece_sd,nll_median,nll_sd,"
         "brier_median,brier_sd\n";
  for (const AggregateRow& row : rows) {
    out << row.method << ',' << row.r << ',' << row.k << ','
        << detail::fmt_double(row.subsample) << ',' << row.n_seeds << ','
        << detail::fmt_double(row.accuracy.median) << ',' << detail::fmt_double(row.accuracy.sd)
        << ',' << detail::fmt_double(row.ece.median) << ',' << detail::fmt_double(row.ece.sd)
        << ',' << detail::fmt_double(row.nll.median) << ',' << detail::fmt_double(row.nll.sd)
        << ',' << detail::fmt_double(row.brier.median) << ','
        << detail::fmt_double(row.brier.sd) << '\n';
  }
  return out.str();
}

inline nlohmann::json aggregate_json(const std::vector<AggregateRow>& rows) {
  nlohmann::json out = nlohmann::json::array();
  for (const AggregateRow& row : rows) {
    out.push_back({{"method", row.method},
                   {"r", row.r},
                   {"k", row.k},
                   {"subsample", row.subsample},
                   {"n_seeds", row.n_seeds},
                   {"accuracy", {{"median", row.accuracy.median}, {"sd", row.accuracy.sd}}},
                   {"ece", {{"median", row.ece.median}, {"sd", row.ece.sd}}},
                   {"nll", {{"median", row.nll.median}, {"sd", row.nll.sd}}},
                   {"brier", {{"median", row.brier.median}, {"sd", row.brier.sd}}}});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Parameter-count table and the desk-scale benchmark config

struct ParamCountRow {
  Method method;
  std::size_t r;
  std::int64_t k;  // -1 for non-Bayesian rows
  std::size_t count;
  std::string display;
};

/// The ten published (method, r, k) rows on the roberta-large placement.
inline std::vector<ParamCountRow> param_count_table() {
  const ShapePreset preset = shape_preset("roberta-large");
  const struct {
    Method method;
    std::size_t r;
    std::int64_t k;
  } rows[] = {
      {Method::kLora, 2, -1},      {Method::kLora, 8, -1},      {Method::kLoraXs, 8, -1},
      {Method::kLoraXs, 25, -1},   {Method::kSwagLora, 2, 10},  {Method::kSwagLora, 8, 10},
      {Method::kSwagLora, 8, 5},   {Method::kBLoraXs, 8, 10},   {Method::kBLoraXs, 25, 10},
      {Method::kBLoraXs, 25, 5},
  };
  std::vector<ParamCountRow> table;
  for (const auto& row : rows) {
    const std::size_t count =
        param_count(row.method, preset, row.r, row.k < 0 ? 0 : std::size_t(row.k));
    table.push_back({row.method, row.r, row.k, count, display_param_count(count)});
  }
  return table;
}

inline std::string param_count_csv(const std::vector<ParamCountRow>& table) {
  std::ostringstream out;
  out << "method,r,k,param_count,display\n";
  for (const ParamCountRow& row : table) {
    out << method_name(row.method) << ',' << row.r << ',';
    if (row.k < 0)
      out << '-';
    else
      out << row.k;
    out << ',' << row.count << ',' << row.display << '\n';
  }
  return out.str();
}

/// The blobs2d-with-shift benchmark used by the directional trend checks:
/// a pretrained source task, then a rotated, label-noised, prior-tilted
/// target with a reduced training set.
inline ExperimentConfig blobs_shift_config() {
  ExperimentConfig cfg;
  cfg.dataset.family = "blobs2d";
  cfg.dataset.classes = 3;
  cfg.dataset.n_train = 1200;
  cfg.dataset.n_val = 600;
  cfg.dataset.noise = 0.75;
  cfg.dataset.shift_phi = 0.5;
  cfg.dataset.shift_rho = 0.08;
  cfg.dataset.shift_tilt = 0.4;
  cfg.dataset.seed = 1234;
  cfg.backbone = "mlp";
  cfg.method = Method::kBLoraXs;
  cfg.rank = 8;
  cfg.cov_rank = 10;
  cfg.seeds = {1, 2, 3, 4, 5};
  cfg.subsample = 0.5;
  return cfg;
}

}  // namespace blxs
