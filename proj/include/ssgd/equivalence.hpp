#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "ssgd/data.hpp"
#include "ssgd/planner.hpp"
#include "ssgd/streaming.hpp"

namespace ssgd {

struct NondeterminismError : Error {
  using Error::Error;
};

/// |a - b| / max(|a|, |b|, 1e-30).
inline double relative_difference(double a, double b) {
  const double d = std::abs(a - b);
  return d == 0 ? 0 : d / std::max({std::abs(a), std::abs(b), 1e-30});
}

/// Pass thresholds. Loss, logit and split map compare absolute differences;
/// parameter gradients compare the elementwise relative difference.
struct Tolerances {
  double loss = 1e-10;
  double logit = 1e-10;
  double split_map = 0;
  double grad_rel = 1e-9;

  static Tolerances defaults(DType d) {
    if (d == DType::f64) return {};
    return {1e-4, 1e-4, 0, 1e-4};
  }
};

struct QuantityDiff {
  std::string name;
  double max_abs = 0;
  double max_rel = 0;
  double mean_abs = 0;
  double tolerance = 0;
  bool relative = false;  // tolerance applies to max_rel instead of max_abs
  bool pass = true;
};

struct EquivalenceReport {
  std::vector<QuantityDiff> quantities;
  bool pass = true;

  const QuantityDiff* first_failure() const {
    for (const auto& q : quantities)
      if (!q.pass) return &q;
    return nullptr;
  }
  const QuantityDiff& at(const std::string& name) const {
    for (const auto& q : quantities)
      if (q.name == name) return q;
    throw Error("no quantity named " + name);
  }
};

namespace detail {

template <class T>
QuantityDiff diff_values(std::string name, std::span<const T> a, std::span<const T> b,
                         double tol, bool relative) {
  if (a.size() != b.size()) throw ShapeError("compare: size mismatch in " + name);
  QuantityDiff q{std::move(name), 0, 0, 0, tol, relative, true};
  double sum = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = a[i], y = b[i];
    const double d = std::abs(x - y);
    q.max_abs = std::max(q.max_abs, d);
    q.max_rel = std::max(q.max_rel, relative_difference(x, y));
    sum += d;
  }
  q.mean_abs = a.empty() ? 0 : sum / static_cast<double>(a.size());
  q.pass = (relative ? q.max_rel : q.max_abs) <= tol;
  return q;
}

}  // namespace detail

/// Elementwise comparison of two executor runs. Symmetric in its arguments.
template <class T>
EquivalenceReport compare_runs(const RunOutputs<T>& a, const RunOutputs<T>& b,
                               const Tolerances& tol) {
  if (a.split_map.shape() != b.split_map.shape()) throw ShapeError("compare: split map shape mismatch");
  if (a.grads.layers.size() != b.grads.layers.size())
    throw ShapeError("compare: gradient layer count mismatch");
  EquivalenceReport r;
  const T la[1] = {a.loss}, lb[1] = {b.loss};
  const T ga[1] = {a.logit}, gb[1] = {b.logit};
  r.quantities.push_back(detail::diff_values<T>("loss", la, lb, tol.loss, false));
  r.quantities.push_back(detail::diff_values<T>("logit", ga, gb, tol.logit, false));
  r.quantities.push_back(detail::diff_values<T>("split_map", a.split_map.values(),
                                                b.split_map.values(), tol.split_map, false));
  for (std::size_t l = 0; l < a.grads.layers.size(); ++l) {
    const auto& x = a.grads.layers[l];
    const auto& y = b.grads.layers[l];
    if (x.empty() && y.empty()) continue;
    if (x.weights.shape() != y.weights.shape()) throw ShapeError("compare: gradient shape mismatch");
    const std::string base = "layer" + std::to_string(l);
    using G = GradScalar;
    r.quantities.push_back(detail::diff_values<G>(base + ".weights", x.weights.values(),
                                                  y.weights.values(), tol.grad_rel, true));
    r.quantities.push_back(detail::diff_values<G>(base + ".bias", std::span<const G>(x.bias),
                                                  std::span<const G>(y.bias), tol.grad_rel, true));
  }
  r.pass = std::all_of(r.quantities.begin(), r.quantities.end(), [](const auto& q) { return q.pass; });
  return r;
}

/// Largest elementwise relative difference across all gradient tensors.
template <class T>
double max_grad_rel_diff(const ParamGrads<T>& a, const ParamGrads<T>& b) {
  double m = 0;
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    const auto& x = a.layers[l];
    const auto& y = b.layers[l];
    for (std::size_t i = 0; i < x.weights.size(); ++i)
      m = std::max(m, relative_difference(x.weights[i], y.weights[i]));
    for (std::size_t i = 0; i < x.bias.size(); ++i)
      m = std::max(m, relative_difference(x.bias[i], y.bias[i]));
  }
  return m;
}

template <class T>
double max_param_abs_diff(const Params<T>& a, const Params<T>& b) {
  double m = 0;
  for (std::size_t l = 0; l < a.size(); ++l) {
    for (std::size_t i = 0; i < a[l].weights.size(); ++i)
      m = std::max(m, std::abs(static_cast<double>(a[l].weights[i]) - b[l].weights[i]));
    for (std::size_t i = 0; i < a[l].bias.size(); ++i)
      m = std::max(m, std::abs(static_cast<double>(a[l].bias[i]) - b[l].bias[i]));
  }
  return m;
}

struct StepMetrics {
  int step = 0;
  double loss_sgd = 0;
  double loss_ssgd = 0;
  double abs_diff = 0;
  double max_grad_rel_diff = 0;
};

template <class T>
struct LockstepResult {
  std::vector<StepMetrics> steps;
  Params<T> params_sgd;
  Params<T> params_ssgd;
  double final_param_max_abs_diff = 0;

  double mean_loss_diff() const {
    if (steps.empty()) return 0;
    double s = 0;
    for (const auto& m : steps) s += m.abs_diff;
    return s / static_cast<double>(steps.size());
  }
  double max_loss_diff() const {
    double s = 0;
    for (const auto& m : steps) s = std::max(s, m.abs_diff);
    return s;
  }
};

struct LockstepOptions {
  int steps = 0;
  int batch_size = 1;
  double learning_rate = 0.01;
  int threads = 1;
  bool check_determinism = true;
};

/// Trains the whole-image arm and the streaming arm side by side from the
/// same parameters on the same data order; step s uses samples
/// (s * batch + b) mod n.
template <class T>
LockstepResult<T> lockstep_train(const NetworkSpec& net, const Params<T>& params0,
                                 const std::vector<SyntheticSample<T>>& dataset,
                                 const TilePlan& plan, const LockstepOptions& opt) {
  if (dataset.empty() && opt.steps > 0) throw Error("lockstep: empty dataset");
  if (opt.batch_size < 1) throw Error("lockstep: batch size must be >= 1");
  LockstepResult<T> r;
  r.params_sgd = params0;
  r.params_ssgd = params0;
  if (opt.check_determinism && !dataset.empty()) {
    const auto a = baseline_forward_backward(net, params0, dataset[0].image, dataset[0].label);
    const auto b = baseline_forward_backward(net, params0, dataset[0].image, dataset[0].label);
    if (a.loss != b.loss || !(a.grads == b.grads) || !(a.split_map == b.split_map))
      throw NondeterminismError("baseline reruns differ on identical inputs");
  }
  const std::size_t n = dataset.size();
  for (int step = 0; step < opt.steps; ++step) {
    std::vector<ParamGrads<T>> gs, gt;
    double ls = 0, lt = 0;
    for (int b = 0; b < opt.batch_size; ++b) {
      const auto& sample = dataset[(static_cast<std::size_t>(step) * opt.batch_size + b) % n];
      auto base = baseline_forward_backward(net, r.params_sgd, sample.image, sample.label);
      auto strm = streaming_forward_backward(net, r.params_ssgd, sample.image, sample.label, plan,
                                             opt.threads);
      ls += base.loss;
      lt += strm.outputs.loss;
      gs.push_back(std::move(base.grads));
      gt.push_back(std::move(strm.outputs.grads));
    }
    const auto mean_s = accumulate_minibatch(gs);
    const auto mean_t = accumulate_minibatch(gt);
    StepMetrics m;
    m.step = step;
    m.loss_sgd = ls / opt.batch_size;
    m.loss_ssgd = lt / opt.batch_size;
    m.abs_diff = std::abs(m.loss_sgd - m.loss_ssgd);
    m.max_grad_rel_diff = max_grad_rel_diff(mean_s, mean_t);
    if (!std::isfinite(m.loss_sgd) || !std::isfinite(m.loss_ssgd))
      throw NonFiniteError("lockstep: non-finite loss at step " + std::to_string(step));
    r.steps.push_back(m);
    sgd_step(r.params_sgd, mean_s, static_cast<T>(opt.learning_rate));
    sgd_step(r.params_ssgd, mean_t, static_cast<T>(opt.learning_rate));
  }
  r.final_param_max_abs_diff = max_param_abs_diff(r.params_sgd, r.params_ssgd);
  return r;
}

inline void write_paired_csv(std::ostream& os, const std::vector<StepMetrics>& steps) {
  os << "step,loss_sgd,loss_ssgd,abs_diff,max_grad_rel_diff\n";
  os.precision(17);
  for (const auto& m : steps)
    os << m.step << ',' << m.loss_sgd << ',' << m.loss_ssgd << ',' << m.abs_diff << ','
       << m.max_grad_rel_diff << '\n';
}

enum class Executor { whole_image, streaming };

struct FiniteDifferenceResult {
  double max_rel_error = 0;
  double max_abs_error = 0;
  int coords_checked = 0;
  int coords_skipped = 0;  // perturbation crossed a ReLU/maxpool switch
};

/// ReLU on/off states and maxpool choices of a whole-image forward pass.
/// Within one pattern the network is a smooth function of its parameters.
template <class T>
std::vector<std::int64_t> activation_pattern(const NetworkSpec& net, const Params<T>& params,
                                             const Tensor4<T>& image, T* logit = nullptr) {
  const auto cache = forward_range(net, params, 0, net.size(), image, nullptr, false);
  std::vector<std::int64_t> pattern;
  for (std::size_t i = 0; i < net.size(); ++i) {
    if (net.layers[i].kind == LayerKind::relu)
      for (T v : cache.acts[i].values()) pattern.push_back(v > T(0));
    else if (cache.argmax[i])
      pattern.insert(pattern.end(), cache.argmax[i]->index.begin(), cache.argmax[i]->index.end());
  }
  if (logit) *logit = cache.output()[0];
  return pattern;
}

/// Gradients below this magnitude are judged by absolute error, since the
/// central difference itself carries roundoff of about eps_machine / eps.
constexpr double kFdScaleFloor = 1e-6;

/// Central differences (L(p + eps) - L(p - eps)) / 2eps on a seeded random
/// subsample of every parameter tensor, compared against the executor's
/// analytic gradient. At least `min_coords` coordinates are checked in total
/// (all of them when the network has fewer).
///
/// The central difference is only a valid oracle where the loss is smooth on
/// [p - eps, p + eps]. A coordinate whose perturbation changes the activation
/// pattern is skipped and the next sampled coordinate of the same tensor
/// takes its place; the decision never looks at the analytic gradient.
inline FiniteDifferenceResult finite_difference_check(const NetworkSpec& net,
                                                      const Params<double>& params,
                                                      const Tensor4<double>& image, int label,
                                                      double eps, Executor executor,
                                                      const TilePlan* plan = nullptr,
                                                      int min_coords = 200,
                                                      std::uint64_t seed = 7) {
  if (executor == Executor::streaming && plan == nullptr)
    throw Error("finite_difference_check: streaming executor needs a plan");
  // loss at p plus whether p shares the activation pattern of the base point
  const auto base_pattern = activation_pattern(net, params, image);
  auto probe = [&](const Params<double>& p) {
    double logit = 0;
    const bool same = activation_pattern(net, p, image, &logit) == base_pattern;
    if (executor == Executor::streaming) logit = streaming_logit(net, p, image, *plan);
    const double l = bce_loss_fb(logit, label).loss;
    if (!std::isfinite(l)) throw NonFiniteError("finite_difference_check: non-finite loss");
    return std::pair{l, same};
  };
  const ParamGrads<double> analytic =
      executor == Executor::whole_image
          ? baseline_forward_backward(net, params, image, label).grads
          : streaming_forward_backward(net, params, image, label, *plan).outputs.grads;

  std::vector<std::pair<std::size_t, bool>> tensors;  // (layer, is_bias)
  for (std::size_t l = 0; l < params.size(); ++l)
    if (!params[l].empty()) {
      tensors.emplace_back(l, false);
      tensors.emplace_back(l, true);
    }
  std::vector<std::size_t> sizes;
  for (const auto& [l, is_bias] : tensors)
    sizes.push_back(is_bias ? params[l].bias.size() : params[l].weights.size());
  // per tensor, a lazily extended Fisher-Yates shuffle: idx[0..pos) is the
  // sample drawn so far
  std::vector<std::vector<std::size_t>> idx(tensors.size());
  std::vector<std::size_t> pos(tensors.size(), 0);
  for (std::size_t t = 0; t < tensors.size(); ++t) {
    idx[t].resize(sizes[t]);
    for (std::size_t i = 0; i < sizes[t]; ++i) idx[t][i] = i;
  }

  Rng rng(seed);
  FiniteDifferenceResult res;
  Params<double> work = params;
  auto check_next = [&](std::size_t t) {  // true if the coordinate was usable
    const auto [l, is_bias] = tensors[t];
    const std::size_t s = pos[t]++;
    const std::size_t j = s + static_cast<std::size_t>(rng.uniform() * static_cast<double>(sizes[t] - s));
    std::swap(idx[t][s], idx[t][j]);
    const std::size_t i = idx[t][s];
    double& slot = is_bias ? work[l].bias[i] : work[l].weights[i];
    const double orig = slot;
    slot = orig + eps;
    const auto [lp, same_p] = probe(work);
    slot = orig - eps;
    const auto [lm, same_m] = probe(work);
    slot = orig;
    if (!same_p || !same_m) {
      ++res.coords_skipped;
      return false;
    }
    const double fd = (lp - lm) / (2 * eps);
    const double an = is_bias ? analytic.layers[l].bias[i] : analytic.layers[l].weights[i];
    const double err = std::abs(fd - an);
    res.max_abs_error = std::max(res.max_abs_error, err);
    res.max_rel_error =
        std::max(res.max_rel_error, err / std::max({std::abs(fd), std::abs(an), kFdScaleFloor}));
    ++res.coords_checked;
    return true;
  };

  // Rounds: spread what is left of the budget evenly over tensors that still
  // have undrawn coordinates; a tensor that runs dry (small, or many skips)
  // leaves its share to the next round.
  const std::size_t budget = static_cast<std::size_t>(std::max(min_coords, 0));
  for (;;) {
    const std::size_t want = budget - std::min(budget, static_cast<std::size_t>(res.coords_checked));
    std::size_t open = 0;
    for (std::size_t t = 0; t < tensors.size(); ++t) open += pos[t] < sizes[t];
    if (want == 0 || open == 0) break;
    const std::size_t share = (want + open - 1) / open;
    std::size_t left = want;
    for (std::size_t t = 0; t < tensors.size() && left > 0; ++t) {
      std::size_t got = 0;
      while (got < std::min(share, left) && pos[t] < sizes[t]) got += check_next(t);
      left -= got;
    }
  }
  return res;
}

}  // namespace ssgd
