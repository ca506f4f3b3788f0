#pragma once

// Experiment runner: JSON config parsing with pointer-tagged errors, the
// training loop with scheduled metric probes and bound monitors, CSV
// trajectory logs with sidecar files, Pearson correlation reports, plot-data
// emission, and the standalone randomized lemma certification.

#include "calcurve/calib.hpp"
#include "calcurve/checkpoint.hpp"
#include "calcurve/csv.hpp"
#include "calcurve/curvature.hpp"
#include "calcurve/data.hpp"
#include "calcurve/loss.hpp"
#include "calcurve/margins.hpp"
#include "calcurve/net.hpp"
#include "calcurve/optim.hpp"

#include <cstdlib>
#include <filesystem>
#include <map>
#include <optional>

namespace calcurve {

constexpr const char* kTrajectorySchema = "calcurve-trajectory-v1";
constexpr const char* kBoundsSchema = "calcurve-bounds-v1";
constexpr const char* kReliabilitySchema = "calcurve-reliability-v1";
constexpr const char* kCorrelationSchema = "calcurve-correlations-v1";

constexpr const char* kTrajectoryHeader =
    "step,split,loss,accuracy,ece,mce,kce,mean_margin,min_margin,q_d,q0_eps,lambda_max,"
    "batch_sharpness,cj_estimate,probe_converged";
constexpr const char* kBoundsHeader = "step,split,bound_id,lhs,rhs,slack,holds,surrogate";
constexpr const char* kReliabilityHeader = "step,split,bin_low,bin_high,count,acc,conf";

class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& message, std::string pointer)
      : std::runtime_error(message + " (at " + pointer + ")"), pointer_(std::move(pointer)) {}
  const std::string& pointer() const { return pointer_; }

 private:
  std::string pointer_;
};

namespace cfgdetail {

template <typename T>
T require(const json& j, const std::string& pointer) {
  try {
    return j.at(json::json_pointer(pointer)).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid or missing config value: ") + e.what(), pointer);
  }
}

template <typename T>
T value_or(const json& j, const std::string& pointer, T def) {
  const json::json_pointer p(pointer);
  if (!j.contains(p)) return def;
  try {
    return j.at(p).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid config value: ") + e.what(), pointer);
  }
}

inline bool has(const json& j, const std::string& pointer) {
  return j.contains(json::json_pointer(pointer));
}

}  // namespace cfgdetail

struct DatasetConfig {
  std::string kind = "gaussian";  // gaussian | cifar10 | cifar10-test | file
  Index classes = 2;
  Index dim = 2;
  Index n_per_class = 100;
  double separation = 1.0;
  std::optional<std::uint64_t> gen_seed;
  std::string path;  // directory for cifar10, file path for kind "file"
  std::optional<SplitSpec> split;
};

struct BoundsProbeConfig {
  bool enabled = true;
  double epsilon = 8.0 / 255.0;
  int pgd_steps = 3;
  double pgd_alpha = 2.0 / 255.0;
  bool grid_certified = false;  // exhaustive grid search, d <= 2 only
  int grid_points = 41;
  double tol = kBoundTol;
};

struct ExperimentConfig {
  DatasetConfig dataset;
  NetworkSpec network;
  LossKind loss_kind = LossKind::CE;
  CalMOConfig calmo;
  OptimizerConfig optimizer;
  long steps = 1;  // 0 = probe-only mode
  Index probe_every = 50;
  int ece_bins = 15;
  CurvatureProbeConfig probe;
  BoundsProbeConfig bounds;
  std::uint64_t seed_global = 0;
  std::uint64_t seed_data = 0;
  std::uint64_t seed_probe = 0;
  std::string log_dir = "run";
};

inline OptimizerKind optimizer_kind_from_string(const std::string& s) {
  if (s == "gd") return OptimizerKind::GD;
  if (s == "sgd") return OptimizerKind::SGD;
  if (s == "adamw") return OptimizerKind::AdamW;
  if (s == "muon") return OptimizerKind::Muon;
  if (s == "sam") return OptimizerKind::SAM;
  if (s == "bulk-sgd") return OptimizerKind::BulkSGD;
  throw SpecError("unknown optimizer kind: " + s);
}

inline std::string to_string(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::GD: return "gd";
    case OptimizerKind::SGD: return "sgd";
    case OptimizerKind::AdamW: return "adamw";
    case OptimizerKind::Muon: return "muon";
    case OptimizerKind::SAM: return "sam";
    case OptimizerKind::BulkSGD: return "bulk-sgd";
  }
  return "?";
}

inline LossKind loss_kind_from_string(const std::string& s) {
  if (s == "ce") return LossKind::CE;
  if (s == "mse") return LossKind::MSE;
  if (s == "calmo") return LossKind::CalMO;
  throw SpecError("unknown loss kind: " + s);
}

inline ExperimentConfig parse_experiment_config(const json& j) {
  using namespace cfgdetail;
  ExperimentConfig cfg;

  cfg.dataset.kind = require<std::string>(j, "/dataset/kind");
  if (cfg.dataset.kind == "gaussian") {
    cfg.dataset.classes = require<Index>(j, "/dataset/classes");
    cfg.dataset.dim = require<Index>(j, "/dataset/dim");
    cfg.dataset.n_per_class = require<Index>(j, "/dataset/n_per_class");
    cfg.dataset.separation = require<double>(j, "/dataset/separation");
    if (has(j, "/dataset/gen_seed"))
      cfg.dataset.gen_seed = require<std::uint64_t>(j, "/dataset/gen_seed");
  } else if (cfg.dataset.kind == "cifar10" || cfg.dataset.kind == "cifar10-test") {
    cfg.dataset.path = value_or<std::string>(j, "/dataset/path", "");
  } else if (cfg.dataset.kind == "file") {
    cfg.dataset.path = require<std::string>(j, "/dataset/path");
  } else {
    throw ConfigError("unknown dataset kind '" + cfg.dataset.kind + "'", "/dataset/kind");
  }
  if (has(j, "/dataset/split")) {
    SplitSpec s;
    s.train_n = require<Index>(j, "/dataset/split/train_n");
    s.val_n = require<Index>(j, "/dataset/split/val_n");
    s.subsample_seed = value_or<std::uint64_t>(j, "/dataset/split/subsample_seed", 0);
    cfg.dataset.split = s;
  }

  cfg.seed_global = value_or<std::uint64_t>(j, "/seeds/global", 0);
  cfg.seed_data = value_or<std::uint64_t>(j, "/seeds/data", 1);
  cfg.seed_probe = value_or<std::uint64_t>(j, "/seeds/probe", 2);

  cfg.network.input_dim = require<Index>(j, "/network/input_dim");
  cfg.network.num_classes = require<Index>(j, "/network/num_classes");
  if (!has(j, "/network/hidden")) throw ConfigError("missing hidden layer list", "/network/hidden");
  const json& hidden = j.at(json::json_pointer("/network/hidden"));
  for (size_t i = 0; i < hidden.size(); ++i) {
    const std::string base = "/network/hidden/" + std::to_string(i);
    HiddenSpec h;
    h.width = require<Index>(j, base + "/width");
    try {
      h.activation = activation_from_string(value_or<std::string>(j, base + "/activation", "tanh"));
    } catch (const SpecError& e) {
      throw ConfigError(e.what(), base + "/activation");
    }
    cfg.network.hidden.push_back(h);
  }
  cfg.network.init_seed = value_or<std::uint64_t>(j, "/network/init_seed", cfg.seed_global);
  try {
    cfg.network.init_scheme =
        init_scheme_from_string(value_or<std::string>(j, "/network/init_scheme", "uniform-fan-in"));
  } catch (const SpecError& e) {
    throw ConfigError(e.what(), "/network/init_scheme");
  }

  try {
    cfg.loss_kind = loss_kind_from_string(value_or<std::string>(j, "/loss/kind", "ce"));
  } catch (const SpecError& e) {
    throw ConfigError(e.what(), "/loss/kind");
  }
  cfg.calmo.lambda_r = value_or<double>(j, "/loss/calmo/lambda_r", cfg.calmo.lambda_r);
  cfg.calmo.lambda_s = value_or<double>(j, "/loss/calmo/lambda_s", cfg.calmo.lambda_s);
  cfg.calmo.epsilon = value_or<double>(j, "/loss/calmo/epsilon", cfg.calmo.epsilon);
  cfg.calmo.pgd_steps = value_or<int>(j, "/loss/calmo/pgd_steps", cfg.calmo.pgd_steps);
  cfg.calmo.pgd_alpha = value_or<double>(j, "/loss/calmo/pgd_alpha", cfg.calmo.pgd_alpha);
  cfg.calmo.random_start = value_or<bool>(j, "/loss/calmo/random_start", cfg.calmo.random_start);

  try {
    cfg.optimizer.kind = optimizer_kind_from_string(require<std::string>(j, "/optimizer/kind"));
  } catch (const SpecError& e) {
    throw ConfigError(e.what(), "/optimizer/kind");
  }
  cfg.optimizer.lr = require<double>(j, "/optimizer/lr");
  cfg.optimizer.batch_size = value_or<Index>(j, "/optimizer/batch_size", 0);
  const double default_momentum = cfg.optimizer.kind == OptimizerKind::Muon ? 0.95 : 0.0;
  cfg.optimizer.momentum = value_or<double>(j, "/optimizer/momentum", default_momentum);
  cfg.optimizer.beta1 = value_or<double>(j, "/optimizer/beta1", cfg.optimizer.beta1);
  cfg.optimizer.beta2 = value_or<double>(j, "/optimizer/beta2", cfg.optimizer.beta2);
  cfg.optimizer.eps = value_or<double>(j, "/optimizer/eps", cfg.optimizer.eps);
  cfg.optimizer.weight_decay = value_or<double>(j, "/optimizer/weight_decay", 0.0);
  cfg.optimizer.sam_rho = value_or<double>(j, "/optimizer/sam_rho", cfg.optimizer.sam_rho);
  cfg.optimizer.muon_ns_steps = value_or<int>(j, "/optimizer/muon_ns_steps", 5);
  cfg.optimizer.bulk_k = value_or<Index>(j, "/optimizer/bulk_k", 1);
  cfg.optimizer.bulk_refresh_every = value_or<Index>(j, "/optimizer/bulk_refresh_every", 50);
  try {
    cfg.optimizer.validate();
  } catch (const SpecError& e) {
    throw ConfigError(e.what(), "/optimizer");
  }

  cfg.steps = require<long>(j, "/steps");
  if (cfg.steps < 0) throw ConfigError("steps must be >= 0", "/steps");
  cfg.probe_every = value_or<Index>(j, "/probe_every", 50);
  if (cfg.probe_every < 1) throw ConfigError("probe_every must be >= 1", "/probe_every");
  cfg.ece_bins = value_or<int>(j, "/ece_bins", 15);

  cfg.probe.power_iters = value_or<int>(j, "/probe/power_iters", 100);
  cfg.probe.tol = value_or<double>(j, "/probe/tol", 1e-6);
  cfg.probe.probe_batch_size = value_or<Index>(j, "/probe/probe_batch_size", 0);
  cfg.probe.rng_seed = cfg.seed_probe;

  cfg.bounds.enabled = value_or<bool>(j, "/bounds/enabled", true);
  cfg.bounds.epsilon = value_or<double>(j, "/bounds/epsilon", cfg.bounds.epsilon);
  cfg.bounds.pgd_steps = value_or<int>(j, "/bounds/pgd_steps", cfg.bounds.pgd_steps);
  cfg.bounds.pgd_alpha = value_or<double>(j, "/bounds/pgd_alpha", cfg.bounds.pgd_alpha);
  cfg.bounds.grid_certified = value_or<bool>(j, "/bounds/grid_certified", false);
  cfg.bounds.grid_points = value_or<int>(j, "/bounds/grid_points", 41);
  cfg.bounds.tol = value_or<double>(j, "/bounds/tol", kBoundTol);

  cfg.log_dir = value_or<std::string>(j, "/log_path", "run");
  return cfg;
}

inline std::string data_dir_or_env(const std::string& configured) {
  if (!configured.empty()) return configured;
  if (const char* env = std::getenv("CALCURVE_DATA_DIR")) return env;
  throw SpecError("no dataset directory: set dataset.path or CALCURVE_DATA_DIR");
}

inline LabeledDataset build_dataset(const DatasetConfig& cfg, std::uint64_t seed_data) {
  if (cfg.kind == "gaussian")
    return gen_gaussian_mixture(cfg.classes, cfg.dim, cfg.n_per_class, cfg.separation,
                                cfg.gen_seed.value_or(seed_data));
  if (cfg.kind == "cifar10") return load_cifar10(data_dir_or_env(cfg.path));
  if (cfg.kind == "cifar10-test") return load_cifar10_test(data_dir_or_env(cfg.path));
  if (cfg.kind == "file") return load_dataset(cfg.path);
  throw SpecError("unknown dataset kind: " + cfg.kind);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t x = a + 0x9E3779B97F4A7C15ULL + b * 0xBF58476D1CE4E5B9ULL;
  x ^= x >> 30;
  x *= 0xBF58476D1CE4E5B9ULL;
  x ^= x >> 27;
  x *= 0x94D049BB133111EBULL;
  x ^= x >> 31;
  return x;
}

struct RunPaths {
  std::string trajectory;
  std::string bounds;
  std::string reliability;
  std::string checkpoint;
  std::string optimizer_state;
};

struct RunResult {
  RunPaths paths;
  bool diverged = false;
  long steps_completed = 0;
  long theorem_violations = 0;  // non-surrogate holds=false rows written
};

inline RunResult run_experiment(const ExperimentConfig& cfg) {
  namespace fs = std::filesystem;
  fs::create_directories(cfg.log_dir);
  RunResult result;
  result.paths.trajectory = cfg.log_dir + "/trajectory.csv";
  result.paths.bounds = cfg.log_dir + "/bounds.csv";
  result.paths.reliability = cfg.log_dir + "/reliability.csv";
  result.paths.checkpoint = cfg.log_dir + "/checkpoint.bin";
  result.paths.optimizer_state = cfg.log_dir + "/optimizer_state.bin";

  LabeledDataset full = build_dataset(cfg.dataset, cfg.seed_data);
  LabeledDataset train, val;
  if (cfg.dataset.split) {
    std::tie(train, val) = split(full, *cfg.dataset.split);
  } else {
    train = std::move(full);
  }
  if (train.n() == 0) throw SpecError("run_experiment: empty training split");
  if (train.dim() != cfg.network.input_dim)
    throw SpecError("run_experiment: network input_dim does not match dataset");
  if (train.num_classes != cfg.network.num_classes)
    throw SpecError("run_experiment: network num_classes does not match dataset");

  Network net(cfg.network);
  ParamVector params = net.init_params();
  OptimizerState state;
  OptimizerConfig opt = cfg.optimizer;
  const bool bounded = train.bounded;

  CsvWriter traj(result.paths.trajectory, kTrajectorySchema, kTrajectoryHeader);
  CsvWriter bounds_csv(result.paths.bounds, kBoundsSchema, kBoundsHeader);
  CsvWriter reliability_csv(result.paths.reliability, kReliabilitySchema, kReliabilityHeader);
  const BinningScheme binning = BinningScheme::equal_width(cfg.ece_bins);

  CalMOConfig bounds_attack;
  bounds_attack.epsilon = cfg.bounds.epsilon;
  bounds_attack.pgd_steps = cfg.bounds.pgd_steps;
  bounds_attack.pgd_alpha = cfg.bounds.pgd_alpha;

  auto minibatch_of = [&](const LabeledDataset& ds, Index size, std::uint64_t seed)
      -> std::pair<Matrix, IntVector> {
    if (size <= 0 || size >= ds.n()) return {ds.features, ds.labels};
    std::vector<Index> idx = sample_indices(ds.n(), size, seed);
    Matrix X(size, ds.dim());
    IntVector y(size);
    for (Index i = 0; i < size; ++i) {
      X.row(i) = ds.features.row(idx[static_cast<size_t>(i)]);
      y[i] = ds.labels[idx[static_cast<size_t>(i)]];
    }
    return {std::move(X), std::move(y)};
  };

  auto write_report = [&](long step, const std::string& split_name, const BoundReport& r) {
    bounds_csv.row({std::to_string(step), split_name, r.bound_id, format_double(r.lhs),
                    format_double(r.rhs), format_double(r.slack), r.holds ? "1" : "0",
                    r.surrogate ? "1" : "0"});
    if (!r.holds && !r.surrogate) ++result.theorem_violations;
  };

  auto probe_split = [&](long step, const std::string& split_name, const LabeledDataset& ds) {
    Forward fw = net.forward_cache(params, ds.features);
    LogitBatch logits{fw.logits, ds.labels};
    ProbBatch probs = softmax(logits);
    auto [labels_hat, conf] = predictions(probs);
    double accuracy = 0;
    for (Index i = 0; i < ds.n(); ++i)
      if (labels_hat[i] == ds.labels[i]) accuracy += 1.0;
    accuracy /= static_cast<double>(ds.n());

    const double loss = loss_value(net, params, ds.features, ds.labels, cfg.loss_kind,
                                   &cfg.calmo, bounded);
    const double ece_value = ece(probs, binning);
    const double mce_value = mce(probs, binning);
    const double kce_value = ds.n() >= 2 ? kce(probs) : 0.0;
    Vector margins_clean = clean_margins(logits);

    // Bound-evaluation slice: the full split unless a probe subset is set.
    // Every oracle input (ECE, margins, lambda, C_J) comes from this slice so
    // the inequalities compare quantities of one empirical distribution.
    Matrix bx = ds.features;
    IntVector by = ds.labels;
    if (cfg.probe.probe_batch_size > 0 && cfg.probe.probe_batch_size < ds.n()) {
      std::tie(bx, by) = minibatch_of(ds, cfg.probe.probe_batch_size,
                                      mix_seed(cfg.seed_probe, static_cast<std::uint64_t>(step) * 2 +
                                                                   (split_name == "train" ? 0 : 1)));
    }

    CurvatureProbeConfig pc = cfg.probe;
    pc.rng_seed = cfg.seed_probe;
    const GnKind gn_kind = cfg.loss_kind == LossKind::MSE ? GnKind::MSE : GnKind::CE;
    SharpnessEstimate lambda = gn_sharpness(net, params, bx, pc, gn_kind);

    auto [mb_x, mb_y] = minibatch_of(
        ds, cfg.probe.probe_batch_size,
        mix_seed(cfg.seed_probe ^ 0xABCDULL,
                 static_cast<std::uint64_t>(step) * 2 + (split_name == "train" ? 0 : 1)));
    SharpnessEstimate batch_est = batch_sharpness(net, params, mb_x, pc, gn_kind);

    const double cj = jacobian_opnorms_batch(net, params, bx, JacobianKind::Parameter).maxCoeff();

    MarginSummary ms;
    double bound_ece = ece_value;
    if (cfg.bounds.enabled) {
      RobustMarginResult rm;
      if (cfg.bounds.grid_certified && ds.dim() <= 2) {
        rm = robust_margins_grid(net, params, bx, by, cfg.bounds.epsilon, cfg.bounds.grid_points,
                                 bounded);
      } else {
        rm = robust_margins_pgd(net, params, bx, by, bounds_attack, bounded);
      }
      Forward bfw = net.forward_cache(params, bx);
      LogitBatch blogits{bfw.logits, by};
      ms = summarize_margins(blogits, rm, cfg.bounds.epsilon);
      ProbBatch bprobs = softmax(blogits);
      bound_ece = ece(bprobs, binning);

      for (const BoundReport& r :
           theorem_overlap_oracle(bound_ece, lambda.lambda_max, ms, cj, ds.num_classes,
                                  cfg.bounds.tol))
        write_report(step, split_name, r);
      SeparableOracleResult sep = theorem_separable_oracle(bound_ece, lambda.lambda_max, ms, cj,
                                                           ds.num_classes, cfg.bounds.tol);
      if (sep.in_regime)
        for (const BoundReport& r : sep.reports) write_report(step, split_name, r);
      write_report(step, split_name,
                   label_free_gn_bound(lambda.lambda_max, ms.predicted, cj, ds.num_classes,
                                       cfg.bounds.tol));
      Index worst = 0;
      double worst_slack = std::numeric_limits<double>::infinity();
      for (Index i = 0; i < ms.clean.size(); ++i) {
        const double slack =
            ms.robust[i] - (ms.clean[i] - cfg.bounds.epsilon * ms.lipschitz[i]);
        if (slack < worst_slack) {
          worst_slack = slack;
          worst = i;
        }
      }
      write_report(step, split_name,
                   lipschitz_lower_oracle(ms.clean[worst], ms.robust[worst], ms.lipschitz[worst],
                                          cfg.bounds.epsilon, cfg.bounds.tol));
    } else {
      RobustMarginResult rm{margins_clean, Vector::Zero(ds.n())};
      ms = summarize_margins(logits, rm, 0.0);
    }

    traj.row({std::to_string(step), split_name, format_double(loss), format_double(accuracy),
              format_double(ece_value), format_double(mce_value), format_double(kce_value),
              format_double(margins_clean.mean()), format_double(margins_clean.minCoeff()),
              format_double(ms.q.q_d), format_double(ms.q.q0), format_double(lambda.lambda_max),
              format_double(batch_est.lambda_max), format_double(cj),
              lambda.converged && batch_est.converged ? "1" : "0"});

    ReliabilityTable table = reliability(probs, binning);
    for (const BinRow& row : table.rows)
      reliability_csv.row({std::to_string(step), split_name, format_double(row.low),
                           format_double(row.high), std::to_string(row.count),
                           format_double(row.acc), format_double(row.conf)});
  };

  auto probe = [&](long step) {
    probe_split(step, "train", train);
    if (val.n() > 0) probe_split(step, "val", val);
  };

  auto grad_at = [&](const ParamVector& p, const Matrix& X, const IntVector& y) {
    return grad_params(net, p, X, y, cfg.loss_kind, &cfg.calmo, bounded);
  };

  TopKFn bulk_top_k = [&](const ParamVector& p) -> std::pair<Matrix, Vector> {
    Matrix bx = train.features;
    if (cfg.probe.probe_batch_size > 0 && cfg.probe.probe_batch_size < train.n()) {
      auto [sx, sy] = minibatch_of(train, cfg.probe.probe_batch_size,
                                   mix_seed(cfg.seed_probe ^ 0xBBULL,
                                            static_cast<std::uint64_t>(state.step)));
      bx = std::move(sx);
    }
    CurvatureProbeConfig pc = cfg.probe;
    pc.rng_seed = cfg.seed_probe;
    const GnKind gn_kind = cfg.loss_kind == LossKind::MSE ? GnKind::MSE : GnKind::CE;
    EigenBasis basis = top_k_eigenvectors(net, params, bx, opt.bulk_k, pc, gn_kind);
    return {std::move(basis.vectors), std::move(basis.eigenvalues)};
  };

  probe(0);
  for (long t = 1; t <= cfg.steps; ++t) {
    try {
      const std::uint64_t batch_seed = mix_seed(cfg.seed_data, static_cast<std::uint64_t>(t));
      switch (opt.kind) {
        case OptimizerKind::GD: {
          ParamVector g = grad_at(params, train.features, train.labels);
          step_gd(params, g, state, opt);
          break;
        }
        case OptimizerKind::SGD: {
          auto [X, y] = minibatch_of(train, opt.batch_size, batch_seed);
          ParamVector g = grad_at(params, X, y);
          step_sgd(params, g, state, opt);
          break;
        }
        case OptimizerKind::AdamW: {
          auto [X, y] = minibatch_of(train, opt.batch_size, batch_seed);
          ParamVector g = grad_at(params, X, y);
          step_adamw(params, g, state, opt);
          break;
        }
        case OptimizerKind::Muon: {
          auto [X, y] = minibatch_of(train, opt.batch_size, batch_seed);
          ParamVector g = grad_at(params, X, y);
          step_muon(params, g, state, opt);
          break;
        }
        case OptimizerKind::SAM: {
          auto [X, y] = minibatch_of(train, opt.batch_size, batch_seed);
          GradFn fn = [&](const ParamVector& p) { return grad_at(p, X, y); };
          step_sam(params, state, opt, fn);
          break;
        }
        case OptimizerKind::BulkSGD: {
          auto [X, y] = minibatch_of(train, opt.batch_size, batch_seed);
          ParamVector g = grad_at(params, X, y);
          step_bulk_sgd(params, g, state, opt, bulk_top_k);
          break;
        }
      }
      if (!params.finite()) throw NumericalError("parameters became non-finite");
    } catch (const NumericalError& e) {
      traj.comment(std::string("terminated: ") + e.what() + " at step " + std::to_string(t));
      result.diverged = true;
      result.steps_completed = t - 1;
      break;
    }
    result.steps_completed = t;
    if (t % cfg.probe_every == 0 || t == cfg.steps) probe(t);
  }

  save_network(result.paths.checkpoint, cfg.network, params);
  save_optimizer_state(result.paths.optimizer_state, state);
  return result;
}

/// Pearson correlation; nullopt when either series is constant.
inline std::optional<double> pearson(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) throw SpecError("pearson: length mismatch");
  if (a.size() < 2) throw SpecError("pearson: needs at least 2 points");
  const double ma = a.mean(), mb = b.mean();
  const Vector da = a.array() - ma, db = b.array() - mb;
  const double va = da.squaredNorm(), vb = db.squaredNorm();
  if (va == 0.0 || vb == 0.0) return std::nullopt;
  return da.dot(db) / std::sqrt(va * vb);
}

struct CorrelationPair {
  std::string metric_a;
  std::string metric_b;
  std::string split = "train";
};

struct TrajectorySeries {
  std::vector<long> steps;
  std::map<std::string, Vector> columns;  // per metric, aligned with steps
};

inline TrajectorySeries trajectory_series(const CsvTable& table, const std::string& split) {
  TrajectorySeries s;
  const Index split_col = table.column("split");
  const Index step_col = table.column("step");
  std::vector<size_t> keep;
  for (size_t r = 0; r < table.rows.size(); ++r)
    if (table.rows[r][static_cast<size_t>(split_col)] == split) keep.push_back(r);
  for (size_t r : keep) s.steps.push_back(std::stol(table.rows[r][static_cast<size_t>(step_col)]));
  for (size_t c = 0; c < table.header.size(); ++c) {
    const std::string& name = table.header[c];
    if (name == "step" || name == "split") continue;
    Vector v(static_cast<Index>(keep.size()));
    for (size_t i = 0; i < keep.size(); ++i) v[static_cast<Index>(i)] = std::stod(table.rows[keep[i]][c]);
    s.columns[name] = std::move(v);
  }
  return s;
}

struct CorrelationSummary {
  CorrelationPair pair;
  std::vector<std::optional<double>> per_run;
  std::optional<double> mean;
  std::optional<double> stddev;
};

inline std::vector<CorrelationSummary> correlation_report(
    const std::vector<std::string>& trajectory_paths, const std::vector<CorrelationPair>& pairs,
    const std::string& out_path) {
  if (pairs.empty()) throw SpecError("correlation_report: no metric pairs requested");
  if (trajectory_paths.empty()) throw SpecError("correlation_report: no runs");

  std::vector<CsvTable> tables;
  for (const auto& p : trajectory_paths) tables.push_back(read_csv(p, kTrajectorySchema));

  std::vector<CorrelationSummary> out;
  for (const CorrelationPair& pair : pairs) {
    CorrelationSummary summary;
    summary.pair = pair;
    std::optional<std::vector<long>> grid;
    std::vector<double> defined;
    for (const CsvTable& t : tables) {
      TrajectorySeries s = trajectory_series(t, pair.split);
      if (!grid) {
        grid = s.steps;
      } else if (*grid != s.steps) {
        throw SpecError("correlation_report: probe grids differ across runs");
      }
      auto r = pearson(s.columns.at(pair.metric_a), s.columns.at(pair.metric_b));
      summary.per_run.push_back(r);
      if (r) defined.push_back(*r);
    }
    if (!defined.empty()) {
      double m = 0;
      for (double r : defined) m += r;
      m /= static_cast<double>(defined.size());
      double var = 0;
      for (double r : defined) var += (r - m) * (r - m);
      var /= static_cast<double>(defined.size());
      summary.mean = m;
      summary.stddev = std::sqrt(var);
    }
    out.push_back(std::move(summary));
  }

  if (!out_path.empty()) {
    CsvWriter csv(out_path, kCorrelationSchema, "metric_a,metric_b,split,run,r");
    auto cell = [](const std::optional<double>& v) {
      return v ? format_double(*v) : std::string("undefined");
    };
    for (const CorrelationSummary& s : out) {
      for (size_t i = 0; i < s.per_run.size(); ++i)
        csv.row({s.pair.metric_a, s.pair.metric_b, s.pair.split, std::to_string(i),
                 cell(s.per_run[i])});
      csv.row({s.pair.metric_a, s.pair.metric_b, s.pair.split, "mean", cell(s.mean)});
      csv.row({s.pair.metric_a, s.pair.metric_b, s.pair.split, "std", cell(s.stddev)});
    }
  }
  return out;
}

enum class PlotKind { Trajectory, Reliability, ScatterEceSharpness };

inline PlotKind plot_kind_from_string(const std::string& s) {
  if (s == "trajectory") return PlotKind::Trajectory;
  if (s == "reliability") return PlotKind::Reliability;
  if (s == "scatter-ece-sharpness") return PlotKind::ScatterEceSharpness;
  throw SpecError("unknown plot kind: " + s);
}

/// Writes tidy CSV series for external plotting from a run's log files.
inline void emit_plot_data(const RunPaths& paths, PlotKind kind, const std::string& out_path) {
  if (kind == PlotKind::Trajectory || kind == PlotKind::ScatterEceSharpness) {
    CsvTable t = read_csv(paths.trajectory, kTrajectorySchema);
    std::vector<std::string> cols =
        kind == PlotKind::Trajectory
            ? std::vector<std::string>{"step", "split", "loss", "accuracy", "ece", "kce",
                                       "lambda_max"}
            : std::vector<std::string>{"step", "split", "ece", "lambda_max"};
    std::string header;
    for (size_t i = 0; i < cols.size(); ++i) header += (i ? "," : "") + cols[i];
    CsvWriter csv(out_path, std::string("calcurve-plot-") +
                                (kind == PlotKind::Trajectory ? "trajectory" : "scatter") + "-v1",
                  header);
    for (const auto& row : t.rows) {
      std::vector<std::string> cells;
      for (const auto& c : cols) cells.push_back(row[static_cast<size_t>(t.column(c))]);
      csv.row(cells);
    }
    return;
  }
  // Reliability at the final probed step.
  CsvTable t = read_csv(paths.reliability, kReliabilitySchema);
  long last = 0;
  for (const auto& row : t.rows) last = std::max(last, std::stol(row[0]));
  CsvWriter csv(out_path, "calcurve-plot-reliability-v1", kReliabilityHeader);
  for (const auto& row : t.rows)
    if (std::stol(row[0]) == last) csv.row(row);
}

// ---------------------------------------------------------------------------
// Randomized lemma certification (the certify-lemmas subcommand).

struct LemmaCounts {
  std::string id;
  long checks = 0;
  long violations = 0;
  double min_slack = std::numeric_limits<double>::infinity();

  void absorb(const BoundReport& r) {
    ++checks;
    if (!r.holds) ++violations;
    min_slack = std::min(min_slack, r.slack);
  }
};

struct LemmaCertification {
  std::vector<LemmaCounts> lemmas;
  bool all_pass = true;

  LemmaCounts& entry(const std::string& id) {
    for (auto& l : lemmas)
      if (l.id == id) return l;
    lemmas.push_back({id});
    return lemmas.back();
  }
};

/// Runs every randomized lemma check: the softmax tail bounds, the Gershgorin
/// eigenvalue bound against dense eigendecomposition, the ECE and per-sample
/// gap bounds on random prediction batches, and the trivial robust-margin
/// comparison on random tiny networks.
inline LemmaCertification run_lemma_certification(long samples, std::uint64_t seed,
                                                  double tol = 1e-10) {
  LemmaCertification cert;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  const double scales[] = {1.0, 3.0, 10.0};

  for (Index K = 2; K <= 10; ++K) {
    for (long s = 0; s < samples; ++s) {
      const double scale = scales[s % 3];
      Vector z(K);
      for (Index k = 0; k < K; ++k) z[k] = scale * normal(rng);
      const int y = static_cast<int>(rng() % static_cast<std::uint64_t>(K));
      for (const BoundReport& r : lemma_tail_oracle(z, y, tol)) cert.entry(r.bound_id).absorb(r);

      // Lemma on the CE logit Hessian, against a dense eigensolver.
      Vector p = softmax(LogitBatch{z.transpose(), IntVector::Zero(1)}).probs.row(0);
      Eigen::SelfAdjointEigenSolver<Matrix> es(logit_hessian(p), Eigen::EigenvaluesOnly);
      cert.entry("lemma-gershgorin")
          .absorb(make_report("lemma-gershgorin", es.eigenvalues().maxCoeff(),
                              2.0 * (1.0 - p.maxCoeff()), tol));
    }
  }

  // ECE vs the mean absolute correctness-confidence gap, and the per-sample
  // gap vs 1 - p_y, on random prediction batches.
  const long batches = std::max<long>(1, samples / 100);
  const BinningScheme binning = BinningScheme::equal_width(15);
  for (long b = 0; b < batches; ++b) {
    const Index K = 2 + static_cast<Index>(rng() % 9);
    const Index n = 100;
    Matrix z(n, K);
    for (Index i = 0; i < n; ++i)
      for (Index k = 0; k < K; ++k) z(i, k) = scales[static_cast<size_t>(b % 3)] * normal(rng);
    IntVector y(n);
    for (Index i = 0; i < n; ++i) y[i] = static_cast<int>(rng() % static_cast<std::uint64_t>(K));
    ProbBatch probs = softmax(LogitBatch{z, y});
    auto [labels_hat, conf] = predictions(probs);
    double gap_sum = 0;
    for (Index i = 0; i < n; ++i) {
      const double correct = labels_hat[i] == y[i] ? 1.0 : 0.0;
      const double gap = std::abs(correct - conf[i]);
      gap_sum += gap;
      cert.entry("lemma-gap-trueprob")
          .absorb(make_report("lemma-gap-trueprob", gap, 1.0 - probs.probs(i, y[i]), 1e-12));
    }
    cert.entry("lemma-ece-absgap")
        .absorb(make_report("lemma-ece-absgap", ece(probs, binning),
                            gap_sum / static_cast<double>(n), 1e-12));
  }

  // Trivial robust-vs-clean margin comparison on random tiny networks.
  const long nets = std::max<long>(4, samples / 2000);
  CalMOConfig attack;
  attack.epsilon = 0.25;
  attack.pgd_steps = 5;
  attack.pgd_alpha = 0.1;
  for (long t = 0; t < nets; ++t) {
    NetworkSpec spec;
    spec.input_dim = 3;
    spec.hidden = {{6, Activation::Tanh}};
    spec.num_classes = 3;
    spec.init_seed = rng();
    Network net(spec);
    ParamVector params = net.init_params();
    const Index n = 16;
    Matrix X(n, 3);
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < 3; ++j) X(i, j) = normal(rng);
    IntVector y(n);
    for (Index i = 0; i < n; ++i) y[i] = static_cast<int>(rng() % 3);
    RobustMarginResult rm = robust_margins_pgd(net, params, X, y, attack, false);
    Vector clean = clean_margins(net.forward(params, X, y));
    for (Index i = 0; i < n; ++i)
      cert.entry("lemma-robust-trivial")
          .absorb(make_report("lemma-robust-trivial", std::exp(-clean[i]), std::exp(-rm.robust[i]),
                              tol));
  }

  for (const auto& l : cert.lemmas)
    if (l.violations > 0) cert.all_pass = false;
  return cert;
}

}  // namespace calcurve
