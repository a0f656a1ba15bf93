#pragma once

// Experiment configs and the plan / verify / train / bench commands.
//
// Config schema (version 1, JSON object, unknown keys rejected):
//   version        1
//   network        reference name ("vgg13", "vgg-64mp", "synthetic") or an
//                  inline table {"split_index": m, "layers": [{"kind": ...}, ...]}
//   input_channels image channels (default 1)
//   image_size     square input size in pixels
//   grid           [rows, cols]
//   batch_size, steps, learning_rate, seed, precision ("single" | "double")
//   mode           "sgd" | "ssgd" | "lockstep"
//   dataset        {"train": n, "test": n}
//   tolerances     optional overrides {"loss", "logit", "split_map", "grad_rel"}
//   fd             {"enabled", "eps", "coords", "tolerance"}
//   bench_steps, threads, out_dir

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ssgd/data.hpp"
#include "ssgd/equivalence.hpp"
#include "ssgd/memory_model.hpp"
#include "ssgd/memory_tracker.hpp"
#include "ssgd/network.hpp"
#include "ssgd/planner.hpp"
#include "ssgd/reference.hpp"
#include "ssgd/st4.hpp"
#include "ssgd/streaming.hpp"
#include "ssgd/tensor.hpp"

namespace ssgd {

enum ExitCode : int {
  kExitOk = 0,
  kExitConfig = 1,
  kExitPlan = 2,
  kExitEquivalence = 3,
  kExitDivergence = 4,
};

enum class TrainMode { sgd, ssgd, lockstep };

inline std::string mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::sgd: return "sgd";
    case TrainMode::ssgd: return "ssgd";
    default: return "lockstep";
  }
}

inline DType parse_precision(const std::string& s) {
  if (s == "single") return DType::f32;
  if (s == "double") return DType::f64;
  throw ConfigError("precision must be 'single' or 'double', got '" + s + "'");
}

struct FdOptions {
  bool enabled = true;
  double eps = 1e-5;
  int coords = 200;
  double tolerance = 1e-5;
};

struct ExperimentConfig {
  int version = 1;
  std::string network_name;  // empty for inline networks
  NetworkSpec net;
  int image_size = 0;
  int rows = 1, cols = 1;
  int batch_size = 1;
  int steps = 0;
  double learning_rate = 0.01;
  std::uint64_t seed = 0;
  DType precision = DType::f32;
  TrainMode mode = TrainMode::ssgd;
  int train_size = 2;
  int test_size = 2;
  std::optional<double> tol_loss, tol_logit, tol_split_map, tol_grad_rel;
  FdOptions fd;
  int bench_steps = 2;
  int threads = 1;
  std::string out_dir = "out";

  Tolerances tolerances() const {
    Tolerances t = Tolerances::defaults(precision);
    if (tol_loss) t.loss = *tol_loss;
    if (tol_logit) t.logit = *tol_logit;
    if (tol_split_map) t.split_map = *tol_split_map;
    if (tol_grad_rel) t.grad_rel = *tol_grad_rel;
    return t;
  }
};

/// Command-line values that take precedence over the config file.
struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<DType> precision;
  std::optional<std::string> out_dir;
  std::optional<int> threads;
};

// ---------------------------------------------------------------- network JSON

inline nlohmann::json network_to_json(const NetworkSpec& net) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : net.layers) {
    nlohmann::json j{{"kind", std::string(kind_name(l.kind))}};
    const auto& g = l.geometry;
    if (l.kind == LayerKind::conv)
      j.update({{"c_in", g.c_in}, {"c_out", g.c_out}, {"k", g.k}, {"s", g.s}, {"p", g.p}});
    else if (l.kind == LayerKind::maxpool)
      j.update({{"k", g.k}, {"s", g.s}});
    else if (l.kind == LayerKind::dense)
      j["width"] = l.width;
    layers.push_back(j);
  }
  return {{"input_channels", net.input_channels},
          {"split_index", net.split_index},
          {"layers", layers}};
}

namespace detail {

inline void reject_unknown(const nlohmann::json& j, std::set<std::string> allowed,
                           const std::string& where) {
  for (const auto& [k, v] : j.items())
    if (!allowed.count(k)) throw ConfigError(where + ": unknown key '" + k + "'");
}

template <class V>
V get_or(const nlohmann::json& j, const char* key, V fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<V>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(std::string("key '") + key + "' has the wrong type");
  }
}

template <class V>
V require(const nlohmann::json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw ConfigError(where + ": missing key '" + key + "'");
  return get_or<V>(j, key, V{});
}

inline void require_positive(long long v, const char* what) {
  if (v <= 0) throw ConfigError(std::string(what) + " must be positive");
}

}  // namespace detail

inline NetworkSpec network_from_json(const nlohmann::json& j, int input_channels) {
  if (!j.is_object()) throw ConfigError("network must be a name or an object");
  detail::reject_unknown(j, {"input_channels", "split_index", "layers"}, "network");
  NetworkSpec net;
  net.input_channels = detail::get_or<int>(j, "input_channels", input_channels);
  net.split_index = detail::require<std::size_t>(j, "split_index", "network");
  const auto& layers = j.contains("layers") ? j.at("layers") : nlohmann::json();
  if (!layers.is_array() || layers.empty()) throw ConfigError("network: 'layers' must be a non-empty array");
  for (const auto& lj : layers) {
    if (!lj.is_object()) throw ConfigError("network: layer entries must be objects");
    const auto kind = layer_kind_from_string(detail::require<std::string>(lj, "kind", "layer"));
    const std::string where = "layer " + std::to_string(net.layers.size());
    switch (kind) {
      case LayerKind::conv:
        detail::reject_unknown(lj, {"kind", "c_in", "c_out", "k", "s", "p"}, where);
        net.layers.push_back(LayerSpec::conv(
            detail::require<int>(lj, "c_in", where), detail::require<int>(lj, "c_out", where),
            detail::require<int>(lj, "k", where), detail::get_or<int>(lj, "s", 1),
            detail::get_or<int>(lj, "p", 0)));
        break;
      case LayerKind::maxpool:
        detail::reject_unknown(lj, {"kind", "k", "s"}, where);
        net.layers.push_back(
            LayerSpec::maxpool(detail::require<int>(lj, "k", where), detail::require<int>(lj, "s", where)));
        break;
      case LayerKind::dense:
        detail::reject_unknown(lj, {"kind", "width"}, where);
        net.layers.push_back(LayerSpec::dense(detail::require<int>(lj, "width", where)));
        break;
      case LayerKind::relu:
        detail::reject_unknown(lj, {"kind"}, where);
        net.layers.push_back(LayerSpec::relu());
        break;
      case LayerKind::flatten:
        detail::reject_unknown(lj, {"kind"}, where);
        net.layers.push_back(LayerSpec::flatten());
        break;
    }
  }
  return net;
}

// ------------------------------------------------------------------ config I/O

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  using detail::get_or;
  using detail::require;
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  detail::reject_unknown(j,
                         {"version", "network", "input_channels", "image_size", "grid", "batch_size",
                          "steps", "learning_rate", "seed", "precision", "mode", "dataset",
                          "tolerances", "fd", "bench_steps", "threads", "out_dir", "description"},
                         "config");
  ExperimentConfig c;
  c.version = require<int>(j, "version", "config");
  if (c.version != 1) throw ConfigError("unsupported config version " + std::to_string(c.version));

  const int channels = get_or<int>(j, "input_channels", 1);
  detail::require_positive(channels, "input_channels");
  if (!j.contains("network")) throw ConfigError("config: missing key 'network'");
  const auto& nj = j.at("network");
  if (nj.is_string()) {
    c.network_name = nj.get<std::string>();
    c.net = reference_network(c.network_name, channels);
  } else {
    c.net = network_from_json(nj, channels);
  }

  c.image_size = require<int>(j, "image_size", "config");
  detail::require_positive(c.image_size, "image_size");
  if (j.contains("grid")) {
    const auto& g = j.at("grid");
    if (!g.is_array() || g.size() != 2 || !g[0].is_number_integer() || !g[1].is_number_integer())
      throw ConfigError("grid must be [rows, cols]");
    c.rows = g[0].get<int>();
    c.cols = g[1].get<int>();
    detail::require_positive(c.rows, "grid rows");
    detail::require_positive(c.cols, "grid cols");
  }
  c.batch_size = get_or<int>(j, "batch_size", c.batch_size);
  detail::require_positive(c.batch_size, "batch_size");
  c.steps = get_or<int>(j, "steps", c.steps);
  if (c.steps < 0) throw ConfigError("steps must be >= 0");
  c.learning_rate = get_or<double>(j, "learning_rate", c.learning_rate);
  if (!(c.learning_rate > 0) || !std::isfinite(c.learning_rate))
    throw ConfigError("learning_rate must be positive");
  if (j.contains("seed")) {
    if (!j.at("seed").is_number_unsigned()) throw ConfigError("seed must be a non-negative integer");
    c.seed = j.at("seed").get<std::uint64_t>();
  }
  c.precision = parse_precision(get_or<std::string>(j, "precision", "single"));
  const auto mode = get_or<std::string>(j, "mode", "ssgd");
  if (mode == "sgd") c.mode = TrainMode::sgd;
  else if (mode == "ssgd") c.mode = TrainMode::ssgd;
  else if (mode == "lockstep") c.mode = TrainMode::lockstep;
  else throw ConfigError("mode must be sgd, ssgd or lockstep, got '" + mode + "'");

  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    if (!d.is_object()) throw ConfigError("dataset must be an object");
    detail::reject_unknown(d, {"train", "test"}, "dataset");
    c.train_size = get_or<int>(d, "train", c.train_size);
    c.test_size = get_or<int>(d, "test", c.test_size);
  }
  for (int n : {c.train_size, c.test_size})
    if (n < 2 || n % 2 != 0) throw ConfigError("dataset sizes must be even and >= 2");

  if (j.contains("tolerances")) {
    const auto& t = j.at("tolerances");
    if (!t.is_object()) throw ConfigError("tolerances must be an object");
    detail::reject_unknown(t, {"loss", "logit", "split_map", "grad_rel"}, "tolerances");
    auto opt = [&](const char* k) -> std::optional<double> {
      if (!t.contains(k)) return std::nullopt;
      const double v = get_or<double>(t, k, 0.0);
      if (!(v >= 0)) throw ConfigError(std::string("tolerance ") + k + " must be >= 0");
      return v;
    };
    c.tol_loss = opt("loss");
    c.tol_logit = opt("logit");
    c.tol_split_map = opt("split_map");
    c.tol_grad_rel = opt("grad_rel");
  }
  if (j.contains("fd")) {
    const auto& f = j.at("fd");
    if (!f.is_object()) throw ConfigError("fd must be an object");
    detail::reject_unknown(f, {"enabled", "eps", "coords", "tolerance"}, "fd");
    c.fd.enabled = get_or<bool>(f, "enabled", c.fd.enabled);
    c.fd.eps = get_or<double>(f, "eps", c.fd.eps);
    c.fd.coords = get_or<int>(f, "coords", c.fd.coords);
    c.fd.tolerance = get_or<double>(f, "tolerance", c.fd.tolerance);
    if (!(c.fd.eps > 0) || c.fd.coords < 1 || !(c.fd.tolerance >= 0))
      throw ConfigError("fd: eps and coords must be positive, tolerance >= 0");
  }
  c.bench_steps = get_or<int>(j, "bench_steps", c.bench_steps);
  detail::require_positive(c.bench_steps, "bench_steps");
  c.threads = get_or<int>(j, "threads", c.threads);
  detail::require_positive(c.threads, "threads");
  c.out_dir = get_or<std::string>(j, "out_dir", c.out_dir);

  try {
    validate_network(c.net, c.image_size);
  } catch (const ShapeError& e) {
    throw ConfigError(std::string("network: ") + e.what());
  }
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed config " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

inline void apply_overrides(ExperimentConfig& c, const Overrides& o) {
  if (o.seed) c.seed = *o.seed;
  if (o.precision) c.precision = *o.precision;
  if (o.out_dir) c.out_dir = *o.out_dir;
  if (o.threads) {
    if (*o.threads < 1) throw ConfigError("threads must be positive");
    c.threads = *o.threads;
  }
}

// --------------------------------------------------------------------- helpers

/// Tile plan for the config; infeasible or invalid plans raise PlanError.
inline TilePlan plan_for(const ExperimentConfig& c) {
  TilePlan plan = build_tile_plan(c.net, c.image_size, c.rows, c.cols);
  const auto v = validate_tile_plan(plan, c.net);
  if (!v.ok) throw PlanError("plan fails " + v.predicate + ": " + v.detail);
  return plan;
}

inline std::filesystem::path ensure_dir(const std::string& dir) {
  std::filesystem::path p(dir);
  std::error_code ec;
  std::filesystem::create_directories(p, ec);
  if (ec) throw ConfigError("cannot create output directory " + dir + ": " + ec.message());
  return p;
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

template <class T>
void write_checkpoint(const std::filesystem::path& dir, const Params<T>& params) {
  std::filesystem::create_directories(dir);
  for (std::size_t l = 0; l < params.size(); ++l) {
    if (params[l].empty()) continue;
    const std::string stem = "layer" + std::to_string(l);
    write_st4(dir / (stem + ".weights.st4"), params[l].weights);
    Tensor4<T> bias(Shape4{1, 1, 1, static_cast<int>(params[l].bias.size())});
    std::copy(params[l].bias.begin(), params[l].bias.end(), bias.values().begin());
    write_st4(dir / (stem + ".bias.st4"), bias);
  }
}

template <class T>
Params<T> read_checkpoint(const std::filesystem::path& dir, const NetworkSpec& net, int image_size) {
  Params<T> params = zero_params<T>(net, image_size);
  for (std::size_t l = 0; l < params.size(); ++l) {
    if (params[l].empty()) continue;
    const std::string stem = "layer" + std::to_string(l);
    auto w = read_st4<T>(dir / (stem + ".weights.st4"));
    auto b = read_st4<T>(dir / (stem + ".bias.st4"));
    if (w.shape() != params[l].weights.shape() || b.size() != params[l].bias.size())
      throw ShapeError("checkpoint " + stem + " does not match the network");
    params[l].weights = std::move(w);
    params[l].bias.assign(b.values().begin(), b.values().end());
  }
  return params;
}

// -------------------------------------------------------------------- training

struct TrainStep {
  int step = 0;
  double loss = 0;
  double train_acc_running = 0;
  std::uint64_t peak_bytes = 0;
};

template <class T>
struct TrainRun {
  Params<T> params;
  std::vector<TrainStep> steps;
  std::vector<int> test_predictions;
  double test_accuracy = 0;
};

inline int predict(double logit) { return logit > 0 ? 1 : 0; }

/// Mini-batch SGD with one executor. Step s consumes samples (s * B + b) mod n;
/// train_acc_running covers the most recent min(seen, n) training predictions.
template <class T>
TrainRun<T> train_model(const NetworkSpec& net, Params<T> params,
                        const std::vector<SyntheticSample<T>>& train,
                        const std::vector<SyntheticSample<T>>& test, const TilePlan* plan,
                        TrainMode mode, int steps, int batch_size, double lr, int threads = 1) {
  if (mode == TrainMode::lockstep) throw ConfigError("train runs one arm: mode must be sgd or ssgd");
  if (mode == TrainMode::ssgd && plan == nullptr) throw Error("ssgd training needs a plan");
  TrainRun<T> run;
  const std::size_t n = train.size();
  std::vector<int> recent(n, -1);  // 1 correct, 0 wrong, -1 not seen yet
  std::size_t cursor = 0;
  for (int step = 0; step < steps; ++step) {
    std::vector<ParamGrads<T>> gs;
    double loss = 0;
    std::uint64_t peak = 0;
    for (int b = 0; b < batch_size; ++b) {
      const auto& sample = train[(static_cast<std::size_t>(step) * batch_size + b) % n];
      double logit;
      if (mode == TrainMode::sgd) {
        MemoryTracker tracker;
        auto r = baseline_forward_backward(net, params, sample.image, sample.label, &tracker);
        peak = std::max(peak, tracker.peak());
        loss += r.loss;
        logit = r.logit;
        gs.push_back(std::move(r.grads));
      } else {
        auto r = streaming_forward_backward(net, params, sample.image, sample.label, *plan, threads);
        peak = std::max(peak, r.record.peak_resident_bytes);
        loss += r.outputs.loss;
        logit = r.outputs.logit;
        gs.push_back(std::move(r.outputs.grads));
      }
      recent[cursor++ % n] = predict(logit) == sample.label ? 1 : 0;
    }
    TrainStep m;
    m.step = step;
    m.loss = loss / batch_size;
    if (!std::isfinite(m.loss))
      throw NonFiniteError("training diverged: non-finite loss at step " + std::to_string(step));
    int seen = 0, correct = 0;
    for (int r : recent)
      if (r >= 0) ++seen, correct += r;
    m.train_acc_running = static_cast<double>(correct) / seen;
    m.peak_bytes = peak;
    run.steps.push_back(m);
    sgd_step(params, accumulate_minibatch(gs), static_cast<T>(lr));
  }
  int correct = 0;
  for (const auto& s : test) {
    const double logit = mode == TrainMode::sgd ? baseline_logit(net, params, s.image)
                                                : streaming_logit(net, params, s.image, *plan);
    if (!std::isfinite(logit)) throw NonFiniteError("non-finite logit on the test set");
    run.test_predictions.push_back(predict(logit));
    correct += run.test_predictions.back() == s.label;
  }
  run.test_accuracy = test.empty() ? 0 : static_cast<double>(correct) / test.size();
  run.params = std::move(params);
  return run;
}

inline void write_train_csv(std::ostream& os, const std::vector<TrainStep>& steps) {
  os << "step,loss,train_acc_running,peak_bytes\n";
  os.precision(17);
  for (const auto& m : steps)
    os << m.step << ',' << m.loss << ',' << m.train_acc_running << ',' << m.peak_bytes << '\n';
}

// -------------------------------------------------------------------- commands

struct CommandIo {
  std::ostream& out = std::cout;
  std::ostream& err = std::cerr;
};

inline int cmd_plan(const ExperimentConfig& c, CommandIo io = {}) {
  const TilePlan plan = plan_for(c);
  const auto whole = estimate_whole_image(c.net, c.image_size, c.batch_size, c.precision);
  const auto stream = estimate_streaming(c.net, plan, c.batch_size, c.precision);
  const double reduction = reduction_report(whole, stream);
  const auto plan_json = to_json(plan);
  io.out << plan_json.dump(2) << '\n';
  print_memory_table(io.out, whole);
  print_memory_table(io.out, stream);
  io.out << std::fixed << std::setprecision(2) << "reduction " << reduction << "%\n"
         << std::defaultfloat;
  io.out << "tiles " << plan.tiles.size() << '\n';
  const auto dir = ensure_dir(c.out_dir);
  write_json(dir / "plan.json", plan_json);
  write_json(dir / "memory.json",
             {{"whole_image", to_json(whole)}, {"streaming", to_json(stream)}, {"reduction_percent", reduction}});
  return kExitOk;
}

struct VerifySummary {
  bool pass = true;
  std::string failure;  // first offending quantity
  nlohmann::json report;
};

namespace detail {

inline nlohmann::json report_json(const EquivalenceReport& r) {
  nlohmann::json q = nlohmann::json::array();
  for (const auto& d : r.quantities)
    q.push_back({{"name", d.name}, {"max_abs", d.max_abs}, {"max_rel", d.max_rel},
                 {"mean_abs", d.mean_abs}, {"tolerance", d.tolerance},
                 {"relative", d.relative}, {"pass", d.pass}});
  return {{"pass", r.pass}, {"quantities", q}};
}

template <class T>
VerifySummary verify_typed(const ExperimentConfig& c, const TilePlan& plan, std::ostream& out,
                           const std::filesystem::path& dir) {
  VerifySummary s;
  auto fail = [&](const std::string& what) {
    if (s.pass) s.failure = what;
    s.pass = false;
  };
  const Tolerances tol = c.tolerances();
  const auto data = synth_dataset<T>(c.seed, c.image_size, c.train_size, c.net.input_channels);
  const auto params0 = init_params<T>(c.net, c.image_size, c.seed);

  // same parameters, same image: every quantity of both executors
  const auto& x0 = data.front();
  const auto base = baseline_forward_backward(c.net, params0, x0.image, x0.label);
  const auto strm = streaming_forward_backward(c.net, params0, x0.image, x0.label, plan, c.threads);
  const auto rep = compare_runs(strm.outputs, base, tol);
  s.report["initial"] = report_json(rep);
  out << "initial-parameter comparison (" << dtype_name(c.precision) << ")\n";
  for (const auto& q : rep.quantities)
    out << "  " << std::left << std::setw(20) << q.name << std::right << " max_abs " << q.max_abs
        << " max_rel " << q.max_rel << (q.pass ? "" : "  FAIL") << '\n';
  if (const auto* f = rep.first_failure()) fail(f->name);

  LockstepOptions opt;
  opt.steps = c.steps;
  opt.batch_size = c.batch_size;
  opt.learning_rate = c.learning_rate;
  opt.threads = c.threads;
  const auto ls = lockstep_train(c.net, params0, data, plan, opt);
  {
    std::ofstream csv(dir / "paired.csv");
    write_paired_csv(csv, ls.steps);
  }
  for (const auto& m : ls.steps)
    if (!(m.abs_diff <= tol.loss)) {
      fail("lockstep.loss@step" + std::to_string(m.step));
      break;
    }
  out << "lockstep " << ls.steps.size() << " steps: mean |loss diff| " << ls.mean_loss_diff()
      << ", max " << ls.max_loss_diff() << " (tolerance " << tol.loss << "), final param max diff "
      << ls.final_param_max_abs_diff << '\n';
  s.report["lockstep"] = {{"steps", ls.steps.size()},
                          {"mean_loss_diff", ls.mean_loss_diff()},
                          {"max_loss_diff", ls.max_loss_diff()},
                          {"final_param_max_abs_diff", ls.final_param_max_abs_diff}};
  return s;
}

}  // namespace detail

/// Initial-parameter equivalence, lockstep training and finite differences.
/// Returns kExitEquivalence naming the first quantity out of tolerance.
inline int cmd_verify(const ExperimentConfig& c, CommandIo io = {}) {
  const TilePlan plan = plan_for(c);
  const auto dir = ensure_dir(c.out_dir);
  io.out.precision(6);
  VerifySummary s = c.precision == DType::f64 ? detail::verify_typed<double>(c, plan, io.out, dir)
                                              : detail::verify_typed<float>(c, plan, io.out, dir);
  if (c.fd.enabled) {
    // gradient ground truth is always taken in double precision
    const auto data = synth_dataset<double>(c.seed, c.image_size, 2, c.net.input_channels);
    const auto params = init_params<double>(c.net, c.image_size, c.seed);
    for (auto ex : {Executor::whole_image, Executor::streaming}) {
      const std::string name = ex == Executor::whole_image ? "fd.whole_image" : "fd.streaming";
      const auto fd = finite_difference_check(c.net, params, data[0].image, data[0].label, c.fd.eps,
                                              ex, &plan, c.fd.coords, c.seed);
      const bool ok = fd.max_rel_error <= c.fd.tolerance;
      io.out << name << ": " << fd.coords_checked << " coords (" << fd.coords_skipped
             << " skipped at activation switches), max rel error " << fd.max_rel_error
             << " (tolerance " << c.fd.tolerance << ")" << (ok ? "" : "  FAIL") << '\n';
      s.report[name] = {{"coords", fd.coords_checked},
                        {"coords_skipped", fd.coords_skipped},
                        {"max_rel_error", fd.max_rel_error},
                        {"max_abs_error", fd.max_abs_error},
                        {"tolerance", c.fd.tolerance},
                        {"pass", ok}};
      if (!ok && s.pass) s.failure = name;
      s.pass = s.pass && ok;
    }
  }
  s.report["pass"] = s.pass;
  if (!s.pass) s.report["failure"] = s.failure;
  write_json(dir / "verify.json", s.report);
  if (!s.pass) {
    io.err << "equivalence failure: " << s.failure << '\n';
    return kExitEquivalence;
  }
  io.out << "verify: PASS\n";
  return kExitOk;
}

namespace detail {

template <class T>
int train_typed(const ExperimentConfig& c, CommandIo io) {
  std::optional<TilePlan> plan;
  if (c.mode == TrainMode::ssgd) plan = plan_for(c);
  const auto train = synth_dataset<T>(c.seed, c.image_size, c.train_size, c.net.input_channels);
  const auto test = synth_dataset<T>(c.seed + 1, c.image_size, c.test_size, c.net.input_channels);
  const auto dir = ensure_dir(c.out_dir);
  const auto run = train_model(c.net, init_params<T>(c.net, c.image_size, c.seed), train, test,
                               plan ? &*plan : nullptr, c.mode, c.steps, c.batch_size,
                               c.learning_rate, c.threads);
  {
    std::ofstream csv(dir / "metrics.csv");
    write_train_csv(csv, run.steps);
  }
  write_checkpoint(dir / "checkpoint", run.params);
  write_json(dir / "summary.json", {{"mode", mode_name(c.mode)},
                                    {"precision", dtype_name(c.precision)},
                                    {"steps", c.steps},
                                    {"final_loss", run.steps.empty() ? 0.0 : run.steps.back().loss},
                                    {"test_accuracy", run.test_accuracy}});
  io.out << "trained " << c.steps << " steps (" << mode_name(c.mode) << ", "
         << dtype_name(c.precision) << ")";
  if (!run.steps.empty()) io.out << ", final loss " << run.steps.back().loss;
  io.out << ", test accuracy " << run.test_accuracy << '\n';
  return kExitOk;
}

struct BenchArm {
  double seconds_per_step = 0;
  std::uint64_t peak_bytes = 0;
};

template <class T>
std::pair<BenchArm, BenchArm> bench_typed(const ExperimentConfig& c) {
  const TilePlan plan = plan_for(c);
  const auto train = synth_dataset<T>(c.seed, c.image_size, c.train_size, c.net.input_channels);
  const auto params = init_params<T>(c.net, c.image_size, c.seed);
  auto arm = [&](TrainMode mode) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto run = train_model(c.net, params, train, {}, &plan, mode, c.bench_steps, c.batch_size,
                                 c.learning_rate, c.threads);
    const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - t0;
    BenchArm a;
    a.seconds_per_step = dt.count() / c.bench_steps;
    for (const auto& m : run.steps) a.peak_bytes = std::max(a.peak_bytes, m.peak_bytes);
    return a;
  };
  const BenchArm sgd = arm(TrainMode::sgd);
  const BenchArm ssgd = arm(TrainMode::ssgd);
  return {sgd, ssgd};
}

}  // namespace detail

inline int cmd_train(const ExperimentConfig& c, CommandIo io = {}) {
  try {
    return c.precision == DType::f64 ? detail::train_typed<double>(c, io)
                                     : detail::train_typed<float>(c, io);
  } catch (const NonFiniteError& e) {
    io.err << "divergence: " << e.what() << '\n';
    return kExitDivergence;
  }
}

/// Wall time per training step and instrumented peak bytes, sgd vs ssgd.
inline int cmd_bench(const ExperimentConfig& c, CommandIo io = {}) {
  const auto [sgd, ssgd] = c.precision == DType::f64 ? detail::bench_typed<double>(c)
                                                     : detail::bench_typed<float>(c);
  const double overhead = sgd.seconds_per_step > 0 ? ssgd.seconds_per_step / sgd.seconds_per_step : 0;
  io.out << std::left << std::setw(6) << "arm" << std::right << std::setw(16) << "s/step"
         << std::setw(18) << "peak bytes\n";
  for (const auto& [name, a] : {std::pair{"sgd", sgd}, std::pair{"ssgd", ssgd}})
    io.out << std::left << std::setw(6) << name << std::right << std::setw(16) << a.seconds_per_step
           << std::setw(18) << a.peak_bytes << '\n';
  io.out << "ssgd/sgd time ratio " << overhead << '\n';
  const auto dir = ensure_dir(c.out_dir);
  write_json(dir / "bench.json",
             {{"steps", c.bench_steps},
              {"batch_size", c.batch_size},
              {"grid", {c.rows, c.cols}},
              {"sgd", {{"seconds_per_step", sgd.seconds_per_step}, {"peak_bytes", sgd.peak_bytes}}},
              {"ssgd", {{"seconds_per_step", ssgd.seconds_per_step}, {"peak_bytes", ssgd.peak_bytes}}},
              {"time_ratio", overhead}});
  return kExitOk;
}

/// Maps the engine's exceptions onto the exit-code contract.
template <class Fn>
int run_command(Fn&& fn, std::ostream& err = std::cerr) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const PlanError& e) {
    err << "plan infeasible: " << e.what() << '\n';
    return kExitPlan;
  } catch (const NondeterminismError& e) {
    err << "equivalence failure: " << e.what() << '\n';
    return kExitEquivalence;
  } catch (const NonFiniteError& e) {
    err << "divergence: " << e.what() << '\n';
    return kExitDivergence;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  }
}

}  // namespace ssgd
