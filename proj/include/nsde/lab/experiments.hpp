#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "nsde/attack.hpp"
#include "nsde/corrupt.hpp"
#include "nsde/data.hpp"
#include "nsde/evaluate.hpp"
#include "nsde/lab/config.hpp"
#include "nsde/lab/output.hpp"
#include "nsde/model.hpp"
#include "nsde/sensitivity.hpp"
#include "nsde/stability.hpp"
#include "nsde/train.hpp"

namespace nsde::lab {

// Stream ids under a model seed. Every variant trained with the same seed
// shares initialisation and batch order.
inline constexpr std::uint64_t kInitStream = 101;
inline constexpr std::uint64_t kTrainStream = 102;
inline constexpr std::uint64_t kEvalStream = 103;

namespace detail {

inline std::size_t positive(const Config& cfg, const std::string& sec, const std::string& key, long long def) {
  const long long v = cfg.get_int(sec, key, def);
  if (v < 1) cfg.fail(sec, key, "must be >= 1");
  return static_cast<std::size_t>(v);
}

inline double non_negative(const Config& cfg, const std::string& sec, const std::string& key, double def) {
  const double v = cfg.get_double(sec, key, def);
  if (!(v >= 0.0) || !std::isfinite(v)) cfg.fail(sec, key, "must be finite and >= 0");
  return v;
}

inline TimeGrid grid_from(const Config& cfg, const std::string& sec, double t_end, long long n_steps) {
  const double t = cfg.get_double(sec, "t_end", t_end);
  const long long n = cfg.get_int(sec, "n_steps", n_steps);
  if (!(t > 0.0) || !std::isfinite(t)) cfg.fail(sec, "t_end", "must be finite and > 0");
  if (n < 1) cfg.fail(sec, "n_steps", "must be >= 1");
  return TimeGrid(t, static_cast<std::size_t>(n));
}

inline std::optional<FitWindow> window_from(const Config& cfg, const std::string& sec, const TimeGrid& grid) {
  const double lo = cfg.get_double(sec, "fit_t_lo", 0.2 * grid.t_end());
  const double hi = cfg.get_double(sec, "fit_t_hi", grid.t_end());
  if (!(lo >= 0.0 && lo < hi && hi <= grid.t_end())) cfg.fail(sec, "fit_t_lo", "fit window must satisfy 0 <= lo < hi <= T");
  return FitWindow{lo, hi};
}

template <typename Parse>
auto parse_or_fail(const Config& cfg, const std::string& sec, const std::string& key, const std::string& value,
                   Parse&& parse) {
  try {
    return parse(value);
  } catch (const std::invalid_argument& e) {
    cfg.fail(sec, key, e.what());
  }
}

inline std::vector<int> hidden_from(const Config& cfg, const std::string& sec, std::vector<long long> def) {
  std::vector<int> out;
  for (long long h : cfg.get_int_list(sec, "hidden", def)) {
    if (h < 1) cfg.fail(sec, "hidden", "layer widths must be >= 1");
    out.push_back(static_cast<int>(h));
  }
  return out;
}

inline std::string csv_of(const std::function<void(std::ostream&)>& fill) {
  std::ostringstream os;
  fill(os);
  return os.str();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// toy: dx = x dt + sigma x dB

inline void run_toy(const Config& cfg, RunOutput& out, Exec exec) {
  const std::string sec = "toy";
  const auto seed = cfg.get_seed(sec, "seed", 1);
  const auto sigmas = cfg.get_double_list(sec, "sigmas", {0.0, 2.8});
  const double x0 = cfg.get_double(sec, "x0", 1.0);
  if (x0 == 0.0 || !std::isfinite(x0)) cfg.fail(sec, "x0", "must be finite and non-zero");
  const auto grid = detail::grid_from(cfg, sec, 10.0, 10000);
  const auto n_paths = detail::positive(cfg, sec, "n_paths", 64);
  const auto every = detail::positive(cfg, sec, "record_every", 10);
  const auto window = detail::window_from(cfg, sec, grid);
  for (double s : sigmas) {
    if (!(s >= 0.0)) cfg.fail(sec, "sigmas", "sigma must be >= 0");
  }

  const RandomStream root(seed, 0);
  const Eigen::VectorXd h0 = Eigen::VectorXd::Constant(1, x0);
  for (double sigma : sigmas) {
    Dynamics dyn{DriftNet::linear(Eigen::MatrixXd::Identity(1, 1)), DiffusionSpec::multiplicative(sigma)};
    // path j is root.child(j) for both the mean trace and the exponent fit
    std::vector<std::vector<double>> abs_x(n_paths), log_x(n_paths);
    std::vector<double> times;
    for (std::size_t k = 0; k <= grid.n_steps(); ++k) {
      if (k % every == 0 || k == grid.n_steps()) times.push_back(grid.time(k));
    }
    std::vector<char> overflow(n_paths, 0);
    parallel_for(n_paths, exec, [&](std::size_t j) {
      const auto path = sample_brownian_path(root.child(j), grid, 1);
      try {
        integrate_visit(dyn, h0, grid, path, [&](std::size_t k, const Eigen::VectorXd& h) {
          if (k % every != 0 && k != grid.n_steps()) return;
          abs_x[j].push_back(std::abs(h(0)));
          log_x[j].push_back(std::log(std::abs(h(0))));
        });
      } catch (const NumericOverflow&) {
        overflow[j] = 1;
      }
    });
    std::ostringstream csv;
    csv << "t,mean_abs_x,mean_log_abs_x,n_paths\n";
    for (std::size_t r = 0; r < times.size(); ++r) {
      double a = 0.0, l = 0.0;
      std::size_t used = 0;
      for (std::size_t j = 0; j < n_paths; ++j) {
        if (r >= abs_x[j].size()) continue;
        a += abs_x[j][r];
        l += log_x[j][r];
        ++used;
      }
      if (used == 0) break;
      csv << num(times[r]) << ',' << num(a / used) << ',' << num(l / used) << ',' << used << '\n';
    }
    out.write_file("toy_sigma_" + num(sigma) + ".csv", csv.str());

    LyapunovOptions lo;
    lo.n_paths = n_paths;
    lo.fit_window = window;
    lo.record_every = every;
    lo.exec = exec;
    const auto est = lyapunov_exponent(dyn, h0, h0, grid, root, lo);
    long long n_over = 0;
    for (char o : overflow) n_over += o;
    out.counters()["overflowed_paths"] += n_over;
    const std::string variant = sigma == 0.0 ? "ode" : "multiplicative";
    const auto add = [&](const std::string& metric, double v) {
      out.add_result({"toy", "scalar_linear", variant, sigma, seed, metric, v});
    };
    add("lambda_hat", est.lambda_hat);
    add("lambda_std_error", est.std_error);
    add("lambda_ito_closed_form", 1.0 - 0.5 * sigma * sigma);
    double final_abs = 0.0;
    std::size_t finished = 0;
    for (std::size_t j = 0; j < n_paths; ++j) {
      if (abs_x[j].size() == times.size()) {
        final_abs += abs_x[j].back();
        ++finished;
      }
    }
    add("final_mean_abs_x", finished ? final_abs / finished : std::numeric_limits<double>::quiet_NaN());
    add("overflowed_paths", static_cast<double>(n_over));
  }
}

// ---------------------------------------------------------------------------
// stability: Lyapunov-exponent sweep over sigma for f(h) = L h, multiplicative noise

inline void run_stability(const Config& cfg, RunOutput& out, Exec exec) {
  const std::string sec = "stability";
  const auto seed = cfg.get_seed(sec, "seed", 1);
  const double lipschitz = detail::non_negative(cfg, sec, "lipschitz", 1.0);
  const auto n = static_cast<int>(detail::positive(cfg, sec, "state_dim", 1));
  const auto sigmas =
      cfg.get_double_list(sec, "sigmas", {0.0, 0.5, 1.0, 1.2, 1.3, 1.4, 1.5, 1.6, 1.8, 2.0, 2.4, 2.8});
  for (double s : sigmas) {
    if (!(s >= 0.0)) cfg.fail(sec, "sigmas", "sigma must be >= 0");
  }
  const double h0v = cfg.get_double(sec, "h0", 1.0);
  const double eps0v = cfg.get_double(sec, "eps0", 1.0);
  if (eps0v == 0.0) cfg.fail(sec, "eps0", "must be non-zero");
  const auto grid = detail::grid_from(cfg, sec, 10.0, 10000);
  LyapunovOptions lo;
  lo.n_paths = detail::positive(cfg, sec, "n_paths", 64);
  lo.record_every = detail::positive(cfg, sec, "record_every", 10);
  lo.fit_window = detail::window_from(cfg, sec, grid);
  lo.exec = exec;

  const Eigen::MatrixXd a = lipschitz * Eigen::MatrixXd::Identity(n, n);
  const auto rows = stability_sweep(
      [&](double s) { return Dynamics{DriftNet::linear(a), DiffusionSpec::multiplicative(s)}; }, sigmas, lipschitz,
      Eigen::VectorXd::Constant(n, h0v), Eigen::VectorXd::Constant(n, eps0v), grid, RandomStream(seed, 0), lo);
  out.write_file("stability_sweep.csv", detail::csv_of([&](std::ostream& os) { write_sweep_csv(os, rows); }));
  for (const auto& r : rows) {
    const auto add = [&](const std::string& metric, double v) {
      out.add_result({"stability", "linear", "multiplicative", r.sigma, seed, metric, v});
    };
    add("lambda_hat", r.lambda_hat);
    add("lambda_std_error", r.std_error);
    add("bound", r.bound);
    add("stable", r.stable ? 1.0 : 0.0);
    add("overflow_fraction", r.overflow_fraction);
    out.counters()["overflowed_paths"] += static_cast<long long>(std::llround(r.overflow_fraction * lo.n_paths));
  }
  const auto crossing = zero_crossing(rows);
  out.add_result({"stability", "linear", "multiplicative", 0.0, seed, "zero_crossing_sigma",
                  crossing ? *crossing : std::numeric_limits<double>::quiet_NaN()});
  out.add_result({"stability", "linear", "multiplicative", 0.0, seed, "predicted_threshold_sigma",
                  std::sqrt(2.0 * lipschitz)});
}

// ---------------------------------------------------------------------------
// gradcheck: pathwise gradient against the common-random-number central difference

struct GradcheckSummary {
  DiffusionKind variant;
  double sigma = 0.0;
  double max_rel_err = 0.0;
  std::vector<GradCheckRow> rows;
};

inline std::vector<GradcheckSummary> gradcheck(const Config& cfg, Exec exec) {
  const std::string sec = "gradcheck";
  const auto seed = cfg.get_seed(sec, "seed", 1);
  std::vector<DiffusionKind> variants;
  for (const auto& v : cfg.get_list(sec, "variants", {"ode", "additive", "multiplicative", "dropout"})) {
    variants.push_back(detail::parse_or_fail(cfg, sec, "variants", v, parse_diffusion_kind));
  }
  const double sigma = detail::non_negative(cfg, sec, "sigma", 0.3);
  const int n = static_cast<int>(detail::positive(cfg, sec, "state_dim", 4));
  const auto hidden = detail::hidden_from(cfg, sec, {8});
  const auto act = detail::parse_or_fail(cfg, sec, "activation", cfg.get_string(sec, "activation", "tanh"),
                                         parse_activation);
  const auto grid = detail::grid_from(cfg, sec, 1.0, 50);
  const auto n_paths = detail::positive(cfg, sec, "n_paths", 256);
  const double delta = cfg.get_double(sec, "delta", 1e-4);
  if (!(delta > 0.0)) cfg.fail(sec, "delta", "must be > 0");
  const auto n_coords = detail::positive(cfg, sec, "coordinates", 20);
  constexpr std::size_t kBatch = 2;

  std::vector<GradcheckSummary> out;
  for (auto variant : variants) {
    RandomStream init(seed, 1);
    Dynamics dyn{DriftNet::mlp(n, hidden, act, grid.t_end()), DiffusionSpec::make(variant, sigma)};
    dyn.drift.init_params(init);
    std::vector<Eigen::VectorXd> h0s;
    for (std::size_t i = 0; i < kBatch; ++i) {
      Eigen::VectorXd h(n);
      for (int c = 0; c < n; ++c) h(c) = init.gaussian();
      h0s.push_back(h);
    }
    const auto loss = half_squared_norm_loss();
    const std::size_t k = variant == DiffusionKind::zero ? 1 : n_paths;
    const auto paths = variant == DiffusionKind::zero
                           ? PathSet(kBatch, std::vector<BrownianPath>{zero_brownian_path(grid, n)})
                           : make_path_set(RandomStream(seed, 2), grid, n, kBatch, k);
    const auto est = mc_gradient(dyn, grid, loss, h0s, paths, exec);
    RandomStream picker(seed, 3);
    const auto coords = pick_coordinates(picker, dyn.drift.param_count(), n_coords);
    const auto fd = fd_gradient_oracle(dyn, grid, loss, h0s, paths, delta, coords);
    GradcheckSummary s{variant, variant == DiffusionKind::zero ? 0.0 : sigma, 0.0, {}};
    for (std::size_t c = 0; c < coords.size(); ++c) {
      const double a = est.grad_w(static_cast<Eigen::Index>(coords[c]));
      const double b = fd(static_cast<Eigen::Index>(c));
      const double e = relative_error(a, b);
      s.rows.push_back({coords[c], a, b, e});
      s.max_rel_err = std::max(s.max_rel_err, e);
    }
    out.push_back(std::move(s));
  }
  return out;
}

inline void run_gradcheck(const Config& cfg, RunOutput& out, Exec exec) {
  const auto seed = cfg.get_seed("gradcheck", "seed", 1);
  for (const auto& s : gradcheck(cfg, exec)) {
    const std::string v(to_string(s.variant));
    out.write_file("gradcheck_" + v + ".csv",
                   detail::csv_of([&](std::ostream& os) { write_gradcheck_csv(os, s.rows); }));
    out.add_result({"gradcheck", "synthetic", v, s.sigma, seed, "max_rel_err", s.max_rel_err});
    out.add_result({"gradcheck", "synthetic", v, s.sigma, seed, "coordinates", static_cast<double>(s.rows.size())});
  }
}

// ---------------------------------------------------------------------------
// shared setup for the classifier experiments

struct DataBundle {
  std::string name;
  Dataset train, test;
};

inline DataBundle load_data(const Config& cfg) {
  const std::string sec = "data";
  DataBundle d;
  d.name = cfg.get_string(sec, "dataset", "moons");
  const auto seed = cfg.get_seed(sec, "seed", 1);
  if (d.name == "moons" || d.name == "spirals") {
    const auto n_train = detail::positive(cfg, sec, "n_train", 2000);
    const auto n_test = detail::positive(cfg, sec, "n_test", 1000);
    const double noise = detail::non_negative(cfg, sec, "noise_sd", 0.2);
    if (n_train % 2 || n_test % 2) cfg.fail(sec, "n_train", "sample counts must be even");
    // the test split uses seed + 1
    if (d.name == "moons") {
      d.train = make_two_moons(n_train, noise, seed, Split::train);
      d.test = make_two_moons(n_test, noise, seed + 1, Split::test);
    } else {
      const double turns = cfg.get_double(sec, "turns", 1.5);
      if (!(turns > 0.0)) cfg.fail(sec, "turns", "must be > 0");
      d.train = make_spirals(n_train, turns, noise, seed, Split::train);
      d.test = make_spirals(n_test, turns, noise, seed + 1, Split::test);
    }
  } else if (d.name == "idx") {
    const auto need = [&](const std::string& key) {
      const auto v = cfg.get_string(sec, key, "");
      if (v.empty()) cfg.fail(sec, key, "required when dataset = idx");
      return v;
    };
    d.train = load_idx(need("train_images"), need("train_labels"), Split::train);
    d.test = load_idx(need("test_images"), need("test_labels"), Split::test);
    d.test.n_classes = d.train.n_classes = std::max(d.train.n_classes, d.test.n_classes);
  } else {
    cfg.fail(sec, "dataset", "expected moons, spirals or idx, got '" + d.name + "'");
  }
  return d;
}

struct ModelSetup {
  ModelSpec base;
  std::vector<DiffusionKind> variants;
  double sigma = 0.0;

  ModelSpec spec_for(DiffusionKind v) const {
    ModelSpec s = base;
    s.diffusion = DiffusionSpec::make(v, sigma);
    s.diffusion.schedule = base.diffusion.schedule;
    return s;
  }
  double sigma_of(DiffusionKind v) const { return v == DiffusionKind::zero ? 0.0 : sigma; }
};

inline ModelSetup model_setup(const Config& cfg, const DataBundle& data) {
  const std::string sec = "model";
  ModelSetup m;
  for (const auto& v : cfg.get_list(sec, "variants", {"ode", "dropout"})) {
    m.variants.push_back(detail::parse_or_fail(cfg, sec, "variants", v, parse_diffusion_kind));
  }
  // default: dropout keep probability 0.9
  m.sigma = detail::non_negative(cfg, sec, "sigma", dropout_sigma(0.9));
  const auto schedule = cfg.get_string(sec, "schedule", "constant");
  if (schedule == "linear_decay") {
    m.base.diffusion.schedule = SigmaSchedule::linear_decay;
  } else if (schedule != "constant") {
    cfg.fail(sec, "schedule", "expected constant or linear_decay");
  }
  m.base.input_dim = data.train.input_dim();
  m.base.n_classes = data.train.n_classes;
  m.base.state_dim = static_cast<int>(detail::positive(cfg, sec, "state_dim", 8));
  m.base.hidden = detail::hidden_from(cfg, sec, {16});
  m.base.activation =
      detail::parse_or_fail(cfg, sec, "activation", cfg.get_string(sec, "activation", "tanh"), parse_activation);
  const auto grid = detail::grid_from(cfg, sec, 1.0, 20);
  m.base.t_end = grid.t_end();
  m.base.n_steps = grid.n_steps();
  return m;
}

struct TrainSetup {
  std::vector<std::uint64_t> seeds;
  OptimizerConfig opt;
  int ttn_passes = 10;
  std::string checkpoint_dir;
};

inline TrainSetup train_setup(const Config& cfg) {
  const std::string sec = "train";
  TrainSetup t;
  for (long long s : cfg.get_int_list(sec, "seeds", {1, 2, 3, 4, 5})) {
    if (s < 0) cfg.fail(sec, "seeds", "seeds must be non-negative");
    t.seeds.push_back(static_cast<std::uint64_t>(s));
  }
  t.opt.kind = detail::parse_or_fail(cfg, sec, "optimizer", cfg.get_string(sec, "optimizer", "sgd_momentum"),
                                     parse_optimizer);
  t.opt.lr = cfg.get_double(sec, "lr", 0.05);
  if (!(t.opt.lr > 0.0)) cfg.fail(sec, "lr", "must be > 0");
  t.opt.momentum = detail::non_negative(cfg, sec, "momentum", 0.9);
  t.opt.beta1 = detail::non_negative(cfg, sec, "beta1", 0.9);
  t.opt.beta2 = detail::non_negative(cfg, sec, "beta2", 0.999);
  t.opt.eps = detail::non_negative(cfg, sec, "adam_eps", 1e-8);
  t.opt.epochs = static_cast<int>(detail::positive(cfg, sec, "epochs", 40));
  t.opt.batch_size = detail::positive(cfg, sec, "batch_size", 64);
  t.opt.k_paths = detail::positive(cfg, sec, "k_paths", 2);
  t.ttn_passes = static_cast<int>(detail::positive(cfg, sec, "ttn_passes", 10));
  t.checkpoint_dir = cfg.get_string(sec, "checkpoint_dir", "");
  return t;
}

inline std::string model_name(DiffusionKind v, std::uint64_t seed) {
  return std::string(to_string(v)) + "_seed" + std::to_string(seed);
}

inline PredictOptions predict_options(const TrainSetup& t, std::uint64_t seed) {
  return PredictOptions{t.ttn_passes, RandomStream(seed, kEvalStream)};
}

struct TrainedModel {
  ClassifierModel model;
  TrainResult result;
};

inline TrainedModel train_model(const ModelSetup& ms, const TrainSetup& ts, const DataBundle& data, DiffusionKind v,
                                std::uint64_t seed, Exec exec) {
  RandomStream init(seed, kInitStream);
  TrainedModel tm{make_classifier(ms.spec_for(v), init), {}};
  tm.result = train(tm.model, data.train, ts.opt, RandomStream(seed, kTrainStream), exec);
  return tm;
}

/// The trained model for (variant, seed): loaded from [train] checkpoint_dir
/// when set, otherwise trained in-process exactly as `train` does.
inline ClassifierModel obtain_model(const ModelSetup& ms, const TrainSetup& ts, const DataBundle& data,
                                    DiffusionKind v, std::uint64_t seed, RunOutput& out, Exec exec) {
  if (ts.checkpoint_dir.empty()) {
    auto tm = train_model(ms, ts, data, v, seed, exec);
    out.counters()["skipped_samples"] += static_cast<long long>(tm.result.skipped_samples);
    return std::move(tm.model);
  }
  const auto path = std::filesystem::path(ts.checkpoint_dir) / (model_name(v, seed) + ".nsdc");
  auto m = load_checkpoint(path.string());
  if (m.sde.diffusion.kind != v || m.input_dim() != data.train.input_dim()) {
    throw std::runtime_error("checkpoint " + path.string() + " does not match the configured model");
  }
  return m;
}

inline nlohmann::json model_sidecar(const ModelSetup& ms, const TrainSetup& ts, const DataBundle& data,
                                    DiffusionKind v, std::uint64_t seed) {
  const auto spec = ms.spec_for(v);
  nlohmann::json j;
  j["artifact_version"] = kArtifactVersion;
  j["seed"] = seed;
  j["dataset"] = data.name;
  j["model"] = {{"input_dim", spec.input_dim},
                {"state_dim", spec.state_dim},
                {"n_classes", spec.n_classes},
                {"hidden", spec.hidden},
                {"activation", std::string(to_string(spec.activation))},
                {"variant", std::string(to_string(v))},
                {"sigma", spec.diffusion.sigma},
                {"schedule", spec.diffusion.schedule == SigmaSchedule::constant ? "constant" : "linear_decay"},
                {"t_end", spec.t_end},
                {"n_steps", spec.n_steps}};
  j["optimizer"] = {{"kind", ts.opt.kind == OptimizerKind::adam ? "adam" : "sgd_momentum"},
                    {"lr", ts.opt.lr},
                    {"momentum", ts.opt.momentum},
                    {"beta1", ts.opt.beta1},
                    {"beta2", ts.opt.beta2},
                    {"eps", ts.opt.eps},
                    {"epochs", ts.opt.epochs},
                    {"batch_size", ts.opt.batch_size},
                    {"k_paths", ts.opt.k_paths}};
  return j;
}

inline Dataset eval_subset(const Config& cfg, const std::string& sec, const Dataset& test, long long def) {
  return test.spread(detail::positive(cfg, sec, "n_eval", def));
}

// ---------------------------------------------------------------------------
// train: every (variant, seed) pair, test accuracy with and without test-time averaging

inline void run_train(const Config& cfg, RunOutput& out, Exec exec) {
  const auto data = load_data(cfg);
  const auto ms = model_setup(cfg, data);
  const auto ts = train_setup(cfg);
  std::ostringstream history, table;
  history << "variant,seed,epoch,loss,accuracy\n";
  table << "variant,seed,test_accuracy_ttn,test_accuracy_single,train_accuracy\n";
  for (auto v : ms.variants) {
    const std::string vn(to_string(v));
    double sum_ttn = 0.0, sum_single = 0.0;
    for (auto seed : ts.seeds) {
      const auto tm = train_model(ms, ts, data, v, seed, exec);
      out.counters()["skipped_samples"] += static_cast<long long>(tm.result.skipped_samples);
      for (const auto& e : tm.result.history) {
        history << vn << ',' << seed << ',' << e.epoch << ',' << num(e.loss) << ',' << num(e.accuracy) << '\n';
      }
      const auto name = model_name(v, seed);
      std::ostringstream blob;
      write_checkpoint(blob, tm.model);
      out.write_file("checkpoints/" + name + ".nsdc", blob.str());
      out.write_file("checkpoints/" + name + ".json", model_sidecar(ms, ts, data, v, seed).dump(2) + "\n");

      const auto opts = predict_options(ts, seed);
      const auto ttn = evaluate(tm.model, data.test, opts, exec);
      auto single_opts = opts;
      single_opts.ttn_passes = 1;
      const auto single = evaluate(tm.model, data.test, single_opts, exec);
      out.counters()["dropped_passes"] += static_cast<long long>(ttn.dropped_passes + single.dropped_passes);
      const double train_acc = tm.result.history.empty() ? 0.0 : tm.result.history.back().accuracy;
      table << vn << ',' << seed << ',' << num(ttn.accuracy_top1) << ',' << num(single.accuracy_top1) << ','
            << num(train_acc) << '\n';
      const auto add = [&](const std::string& metric, double value) {
        out.add_result({"train", data.name, vn, ms.sigma_of(v), seed, metric, value});
      };
      add("test_accuracy_ttn", ttn.accuracy_top1);
      add("test_accuracy_single", single.accuracy_top1);
      add("train_accuracy", train_acc);
      add("final_loss", tm.result.history.empty() ? 0.0 : tm.result.history.back().loss);
      sum_ttn += ttn.accuracy_top1;
      sum_single += single.accuracy_top1;
    }
    const double n = static_cast<double>(ts.seeds.size());
    table << vn << ",mean," << num(sum_ttn / n) << ',' << num(sum_single / n) << ",\n";
    out.add_result({"train", data.name, vn, ms.sigma_of(v), 0, "mean_test_accuracy_ttn", sum_ttn / n});
    out.add_result({"train", data.name, vn, ms.sigma_of(v), 0, "mean_test_accuracy_single", sum_single / n});
  }
  out.write_file("train_history.csv", history.str());
  out.write_file("generalization.csv", table.str());
}

// ---------------------------------------------------------------------------
// attack: accuracy against PGD budget

struct AttackSetup {
  AttackConfig cfg;
  bool auto_step = true;  // step_size = 2.5 epsilon / steps
  std::vector<double> epsilons;
  std::uint64_t seed = 1;
};

inline AttackSetup attack_setup(const Config& cfg) {
  const std::string sec = "attack";
  AttackSetup a;
  a.cfg.norm = detail::parse_or_fail(cfg, sec, "norm", cfg.get_string(sec, "norm", "l2"), parse_attack_norm);
  a.cfg.steps = static_cast<int>(detail::positive(cfg, sec, "steps", 20));
  a.cfg.grad_paths = detail::positive(cfg, sec, "grad_paths", 8);
  const auto step = cfg.get_string(sec, "step_size", "auto");
  if (step != "auto") {
    a.auto_step = false;
    a.cfg.step_size = detail::non_negative(cfg, sec, "step_size", 0.0);
  }
  a.epsilons = cfg.get_double_list(sec, "epsilons", {0.0, 0.1, 0.2, 0.3, 0.4, 0.5});
  for (double e : a.epsilons) {
    if (!(e >= 0.0)) cfg.fail(sec, "epsilons", "budgets must be >= 0");
  }
  a.seed = cfg.get_seed(sec, "seed", 1);
  return a;
}

inline void run_attack(const Config& cfg, RunOutput& out, Exec exec) {
  const auto data = load_data(cfg);
  const auto ms = model_setup(cfg, data);
  const auto ts = train_setup(cfg);
  const auto as = attack_setup(cfg);
  const auto subset = eval_subset(cfg, "attack", data.test, 200);
  std::ostringstream csv;
  csv << "variant,seed,norm,epsilon,accuracy\n";
  for (auto v : ms.variants) {
    const std::string vn(to_string(v));
    for (auto seed : ts.seeds) {
      const auto model = obtain_model(ms, ts, data, v, seed, out, exec);
      const auto opts = predict_options(ts, seed);
      const auto clean = evaluate(model, subset, opts, exec);
      out.counters()["dropped_passes"] += static_cast<long long>(clean.dropped_passes);
      const auto curve = robustness_curve(model, subset, as.epsilons, as.cfg, as.auto_step,
                                          RandomStream(as.seed, seed), opts, exec);
      out.add_result({"attack", data.name, vn, ms.sigma_of(v), seed, "clean_accuracy", clean.accuracy_top1});
      for (const auto& p : curve) {
        csv << vn << ',' << seed << ',' << to_string(as.cfg.norm) << ',' << num(p.epsilon) << ',' << num(p.accuracy)
            << '\n';
        out.add_result({"attack", data.name, vn, ms.sigma_of(v), seed, "accuracy_eps_" + num(p.epsilon), p.accuracy});
        out.counters()["skipped_attack_steps"] += p.skipped_steps;
      }
    }
  }
  out.write_file("robustness_curve.csv", csv.str());
}

// ---------------------------------------------------------------------------
// corrupt: accuracy per corruption kind and severity

inline void run_corrupt(const Config& cfg, RunOutput& out, Exec exec) {
  const auto data = load_data(cfg);
  const auto ms = model_setup(cfg, data);
  const auto ts = train_setup(cfg);
  const std::string sec = "corrupt";
  std::vector<CorruptionKind> kinds;
  std::vector<std::string> all;
  for (auto k : kAllCorruptions) all.emplace_back(to_string(k));
  for (const auto& k : cfg.get_list(sec, "kinds", all)) {
    kinds.push_back(detail::parse_or_fail(cfg, sec, "kinds", k, parse_corruption));
  }
  const auto seed_c = cfg.get_seed(sec, "seed", 1);
  const auto subset = eval_subset(cfg, sec, data.test, 1000);
  std::ostringstream csv;
  csv << "variant,seed,kind,severity,parameter,accuracy\n";
  for (auto v : ms.variants) {
    const std::string vn(to_string(v));
    for (auto seed : ts.seeds) {
      const auto model = obtain_model(ms, ts, data, v, seed, out, exec);
      const auto m = evaluate_corruptions(model, subset, kinds, seed_c, predict_options(ts, seed), exec);
      out.counters()["dropped_passes"] += static_cast<long long>(m.dropped_passes);
      for (const auto& c : m.cells) {
        csv << vn << ',' << seed << ',' << to_string(c.kind) << ',' << c.severity << ','
            << num(severity_parameter(c.kind, c.severity)) << ',' << num(c.accuracy) << '\n';
      }
      const auto add = [&](const std::string& metric, double value) {
        out.add_result({"corrupt", data.name, vn, ms.sigma_of(v), seed, metric, value});
      };
      add("clean_accuracy", m.accuracy_top1);
      for (const auto& [s, acc] : m.per_severity) add("accuracy_severity_" + std::to_string(s), acc);
      add("m_acc", m.m_acc);
    }
  }
  out.write_file("corruption.csv", csv.str());
}

// ---------------------------------------------------------------------------
// depthprobe: hidden-state perturbation along depth for identical adversarial inputs

struct DepthProbeSummary {
  std::map<DiffusionKind, std::map<std::uint64_t, double>> final_norm;  // mean ||eps_T|| over samples
};

inline DepthProbeSummary run_depthprobe_impl(const Config& cfg, RunOutput& out, Exec exec) {
  const auto data = load_data(cfg);
  const auto ms = model_setup(cfg, data);
  const auto ts = train_setup(cfg);
  auto as = attack_setup(cfg);
  const std::string sec = "depthprobe";
  const double eps = detail::non_negative(cfg, sec, "epsilon", 0.3);
  const auto n_samples = detail::positive(cfg, sec, "n_samples", 50);
  const auto every = detail::positive(cfg, sec, "record_every", 1);
  const auto probe_seed = cfg.get_seed(sec, "seed", 1);
  as.cfg.epsilon = eps;
  if (as.auto_step) as.cfg.step_size = 2.5 * eps / as.cfg.steps;
  const auto subset = data.test.spread(n_samples);
  const FeatureRange range{subset.feature_lo, subset.feature_hi};

  DepthProbeSummary summary;
  std::ostringstream csv;
  csv << "variant,seed,t,mean_eps_norm,n_samples\n";
  for (auto seed : ts.seeds) {
    std::vector<ClassifierModel> models;
    for (auto v : ms.variants) models.push_back(obtain_model(ms, ts, data, v, seed, out, exec));
    // adversarial inputs are crafted once, against the first listed variant, and shared by all
    std::vector<Eigen::VectorXd> adv(subset.size());
    parallel_for(subset.size(), exec, [&](std::size_t i) {
      adv[i] = pgd_attack(models.front(), subset.sample(i), subset.labels[i], as.cfg,
                          RandomStream(as.seed, seed).child(i), range);
    });
    for (std::size_t m = 0; m < models.size(); ++m) {
      const auto v = ms.variants[m];
      std::vector<PerturbationTrace> traces(subset.size());
      parallel_for(subset.size(), exec, [&](std::size_t i) {
        traces[i] = depth_probe(models[m], subset.sample(i), adv[i], RandomStream(probe_seed, 0).child(i), every);
      });
      std::vector<double> times, sums;
      std::vector<std::size_t> counts;
      for (const auto& tr : traces) {
        if (tr.overflowed) {
          ++out.counters()["probe_overflows"];
          continue;
        }
        if (times.empty()) {
          times = tr.times;
          sums.assign(times.size(), 0.0);
          counts.assign(times.size(), 0);
        }
        for (std::size_t r = 0; r < tr.eps_norms.size(); ++r) {
          sums[r] += tr.eps_norms[r];
          ++counts[r];
        }
      }
      const std::string vn(to_string(v));
      for (std::size_t r = 0; r < times.size(); ++r) {
        csv << vn << ',' << seed << ',' << num(times[r]) << ',' << num(sums[r] / counts[r]) << ',' << counts[r] << '\n';
      }
      const double final_norm =
          times.empty() ? std::numeric_limits<double>::quiet_NaN() : sums.back() / counts.back();
      const double initial_norm = times.empty() ? std::numeric_limits<double>::quiet_NaN() : sums.front() / counts.front();
      summary.final_norm[v][seed] = final_norm;
      out.add_result({"depthprobe", data.name, vn, ms.sigma_of(v), seed, "mean_final_eps_norm", final_norm});
      out.add_result({"depthprobe", data.name, vn, ms.sigma_of(v), seed, "mean_initial_eps_norm", initial_norm});
    }
  }
  out.write_file("depth_probe.csv", csv.str());

  std::map<DiffusionKind, double> mean;
  for (const auto& [v, per_seed] : summary.final_norm) {
    double s = 0.0;
    for (const auto& [seed, x] : per_seed) s += x;
    mean[v] = s / static_cast<double>(per_seed.size());
    out.add_result({"depthprobe", data.name, std::string(to_string(v)), ms.sigma_of(v), 0, "mean_final_eps_norm_over_seeds",
                    mean[v]});
  }
  if (mean.contains(DiffusionKind::zero) && mean.contains(DiffusionKind::dropout)) {
    out.add_result({"depthprobe", data.name, "dropout", ms.sigma, 0, "trend_dropout_le_ode",
                    mean[DiffusionKind::dropout] <= mean[DiffusionKind::zero] ? 1.0 : 0.0});
  }
  return summary;
}

inline void run_depthprobe(const Config& cfg, RunOutput& out, Exec exec) { run_depthprobe_impl(cfg, out, exec); }

// ---------------------------------------------------------------------------

inline const std::map<std::string, void (*)(const Config&, RunOutput&, Exec)>& commands() {
  static const std::map<std::string, void (*)(const Config&, RunOutput&, Exec)> table{
      {"toy", run_toy},       {"stability", run_stability}, {"gradcheck", run_gradcheck},
      {"train", run_train},   {"attack", run_attack},       {"corrupt", run_corrupt},
      {"depthprobe", run_depthprobe}};
  return table;
}

/// Runs `command`, writing its files and results.csv under `dir`. A manifest
/// flagged incomplete is written first and replaced by the complete one at the
/// end; a failing run leaves the incomplete manifest with the error message.
inline RunManifest run_command(const std::string& command, const Config& cfg, const std::filesystem::path& dir,
                               Exec exec) {
  const auto it = commands().find(command);
  if (it == commands().end()) throw ConfigError("", "unknown command '" + command + "'");
  RunManifest manifest;
  manifest.command = command;
  manifest.config_text = cfg.text();
  manifest.threads = exec.threads;
  manifest.started = utc_timestamp();
  manifest.write(dir);
  RunOutput out(dir);
  try {
    it->second(cfg, out, exec);
    out.write_results();
  } catch (const std::exception& e) {
    manifest.resolved = cfg.resolved();
    manifest.outputs = out.files();
    manifest.counters = out.counters();
    manifest.error = e.what();
    manifest.finished = utc_timestamp();
    manifest.write(dir);
    throw;
  }
  manifest.resolved = cfg.resolved();
  manifest.outputs = out.files();
  manifest.counters = out.counters();
  manifest.finished = utc_timestamp();
  manifest.complete = true;
  manifest.write(dir);
  return manifest;
}

}  // namespace nsde::lab
