#pragma once

// Streaming execution: the streaming section runs tile by tile, its output is
// pasted into the split map, the head runs once on the whole split map, and
// the backward pass recomputes each tile before backpropagating through it.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <future>
#include <vector>

#include "ssgd/executor.hpp"
#include "ssgd/memory_tracker.hpp"
#include "ssgd/network.hpp"
#include "ssgd/planner.hpp"
#include "ssgd/tensor.hpp"

namespace ssgd {

/// Counters collected during one streaming forward/backward.
struct StreamingRunRecord {
  double loss = 0;
  double logit = 0;
  std::uint64_t peak_tile_activation_bytes = 0;  // largest tile-local resident set
  std::uint64_t reconstructed_map_bytes = 0;
  std::uint64_t peak_resident_bytes = 0;  // tracker peak over the whole run
  int tiles_forward = 0;
  int tiles_backward = 0;
};

/// State retained between streaming_forward and streaming_backward: the split
/// map and the head activations. Nothing tile-local survives.
template <class T>
struct StreamingForward {
  Tensor4<T> split_map;
  RangeCache<T> head;
  T logit{};
  Reservation split_held;
  std::uint64_t peak_tile_bytes = 0;
  int tiles = 0;
};

namespace detail {

inline void check_plan_matches(const NetworkSpec& net, const TilePlan& plan,
                               const Shape4& image) {
  if (image.n != 1) throw ShapeError("streaming executes one image at a time");
  if (image.h != plan.image_size || image.w != plan.image_size)
    throw PlanError("image " + to_string(image) + " does not match plan image size " +
                    std::to_string(plan.image_size));
  if (image.c != net.input_channels) throw ShapeError("image channel mismatch");
  if (plan.split_index != net.split_index || plan.layers.size() != net.split_index)
    throw PlanError("plan was built for a different network");
}

/// Runs `fn(i)` for i in [0, n) on up to `threads` workers. Results are
/// consumed by the caller in index order, so merging stays sequential.
template <class Fn>
auto parallel_map(int n, int threads, Fn fn) {
  using R = decltype(fn(0));
  std::vector<R> out;
  out.reserve(static_cast<std::size_t>(n));
  if (threads <= 1) {
    for (int i = 0; i < n; ++i) out.push_back(fn(i));
    return out;
  }
  for (int base = 0; base < n; base += threads) {
    std::vector<std::future<R>> batch;
    for (int i = base; i < std::min(n, base + threads); ++i)
      batch.push_back(std::async(std::launch::async, fn, i));
    for (auto& f : batch) out.push_back(f.get());
  }
  return out;
}

}  // namespace detail

/// Tile forward passes rebuilding the split map, then the head forward.
template <class T>
StreamingForward<T> streaming_forward(const NetworkSpec& net, const Params<T>& params,
                                      const Tensor4<T>& image, const TilePlan& plan,
                                      MemoryTracker* tracker = nullptr, int threads = 1) {
  detail::check_plan_matches(net, plan, image.shape());
  const std::size_t m = net.split_index;
  const int zm = plan.split_map_size;
  const int cm = plan.layers.back().channels_out;

  StreamingForward<T> state;
  Window<T> split{Tensor4<T>(Shape4{1, cm, zm, zm}), Region::square(zm), zm, zm};
  state.split_held = Reservation(tracker, split.data.bytes());
  const Window<T> img = Window<T>::whole(image);

  auto run_tile = [&](int ti) {
    const TileSpec& t = plan.tiles[static_cast<std::size_t>(ti)];
    std::uint64_t resident = 0, peak = 0;
    Window<T> cur = crop(img, t.input_region_forward);
    Reservation cur_held(tracker, cur.data.bytes());
    resident = cur.data.bytes();
    for (std::size_t j = 0; j < m; ++j) {
      auto r = layer_forward(net.layers[j], params[j], cur, t.layers[j].forward);
      Reservation out_held(tracker, r.out.data.bytes());
      peak = std::max(peak, resident + r.out.data.bytes());
      check_finite(r.out.data, "tile output of layer " + std::to_string(j));
      cur = std::move(r.out);
      cur_held = std::move(out_held);
      resident = cur.data.bytes();
    }
    return std::pair{std::move(cur), peak};
  };

  auto outs = detail::parallel_map(static_cast<int>(plan.tiles.size()), threads, run_tile);
  for (std::size_t ti = 0; ti < outs.size(); ++ti) {
    paste(outs[ti].first, plan.tiles[ti].owned_split_region, split);
    state.peak_tile_bytes = std::max(state.peak_tile_bytes, outs[ti].second);
    ++state.tiles;
  }
  outs.clear();

  state.split_map = std::move(split.data);
  state.head = head_forward(net, params, state.split_map, plan.image_size, tracker);
  state.logit = state.head.output()[0];
  return state;
}

/// Head backward, then per tile: recompute from the backward input region,
/// backpropagate, and accumulate weight gradients of owned positions only.
template <class T>
ParamGrads<T> streaming_backward(const NetworkSpec& net, const Params<T>& params,
                                 const Tensor4<T>& image, const TilePlan& plan,
                                 StreamingForward<T>& state, T dloss_dlogit,
                                 MemoryTracker* tracker = nullptr, int threads = 1,
                                 std::uint64_t* peak_tile_bytes = nullptr) {
  detail::check_plan_matches(net, plan, image.shape());
  if (state.split_map.empty() || state.head.acts.empty())
    throw Error("streaming_backward: missing forward state");
  const std::size_t m = net.split_index;

  ParamGrads<T> grads = ParamGrads<T>::zeros_like(params);
  grads.images = 1;
  Tensor4<T> g_split = head_backward(net, params, state.head, dloss_dlogit, grads);
  Reservation g_held(tracker, g_split.bytes());
  state.head.release();
  check_finite(g_split, "split map gradient");
  const Window<T> gsplit = Window<T>::whole(std::move(g_split));
  const Window<T> img = Window<T>::whole(image);

  auto run_tile = [&](int ti) {
    const TileSpec& t = plan.tiles[static_cast<std::size_t>(ti)];
    ParamGrads<T> tg = ParamGrads<T>::zeros_like(params);
    std::vector<Window<T>> acts;
    std::vector<std::optional<ArgmaxMap>> argmax;
    std::vector<Reservation> held;
    acts.reserve(m + 1);
    acts.push_back(crop(img, t.input_region_backward));
    held.emplace_back(tracker, acts.back().data.bytes());
    std::uint64_t resident = acts.back().data.bytes();
    for (std::size_t j = 0; j < m; ++j) {
      auto r = layer_forward(net.layers[j], params[j], acts[j], t.layers[j].backward_compute);
      held.emplace_back(tracker, r.out.data.bytes());
      resident += r.out.data.bytes();
      acts.push_back(std::move(r.out));
      argmax.push_back(std::move(r.argmax));
    }
    Window<T> g = crop(gsplit, t.layers[m - 1].backward_grad);
    for (std::size_t j = m; j-- > 0;) {
      const Region gi_region = j > 0 ? t.layers[j - 1].backward_grad : Region{};
      g = layer_backward(net.layers[j], params[j], acts[j], argmax[j], g, gi_region,
                         t.layers[j].owned, tg.layers[j]);
    }
    return std::pair{std::move(tg), resident};
  };

  // Tile partials are merged in row-major order regardless of thread count.
  const int n = static_cast<int>(plan.tiles.size());
  std::uint64_t peak_tile = 0;
  if (threads <= 1) {
    for (int ti = 0; ti < n; ++ti) {
      auto [tg, resident] = run_tile(ti);
      peak_tile = std::max(peak_tile, resident);
      for (std::size_t j = 0; j < m; ++j) {
        auto& dst = grads.layers[j];
        const auto& src = tg.layers[j];
        for (std::size_t i = 0; i < dst.weights.size(); ++i) dst.weights[i] += src.weights[i];
        for (std::size_t i = 0; i < dst.bias.size(); ++i) dst.bias[i] += src.bias[i];
      }
    }
  } else {
    auto parts = detail::parallel_map(n, threads, run_tile);
    for (auto& [tg, resident] : parts) {
      peak_tile = std::max(peak_tile, resident);
      for (std::size_t j = 0; j < m; ++j) {
        auto& dst = grads.layers[j];
        const auto& src = tg.layers[j];
        for (std::size_t i = 0; i < dst.weights.size(); ++i) dst.weights[i] += src.weights[i];
        for (std::size_t i = 0; i < dst.bias.size(); ++i) dst.bias[i] += src.bias[i];
      }
    }
  }
  if (peak_tile_bytes) *peak_tile_bytes = peak_tile;
  for (const auto& l : grads.layers) {
    check_finite(l.weights, "parameter gradient");
    check_finite(std::span<const GradScalar>(l.bias), "bias gradient");
  }
  return grads;
}

/// Loss, logit, split map and parameter gradients of one executor run.
template <class T>
struct RunOutputs {
  T loss{};
  T logit{};
  Tensor4<T> split_map;
  ParamGrads<T> grads;
};

template <class T>
struct StreamingResult {
  RunOutputs<T> outputs;
  StreamingRunRecord record;
};

template <class T>
StreamingResult<T> streaming_forward_backward(const NetworkSpec& net, const Params<T>& params,
                                              const Tensor4<T>& image, int label,
                                              const TilePlan& plan, int threads = 1) {
  MemoryTracker tracker;
  StreamingResult<T> r;
  auto state = streaming_forward(net, params, image, plan, &tracker, threads);
  const auto lf = bce_loss_fb(state.logit, label);
  std::uint64_t peak_tile_bw = 0;
  r.outputs.grads =
      streaming_backward(net, params, image, plan, state, lf.grad, &tracker, threads, &peak_tile_bw);
  r.outputs.loss = lf.loss;
  r.outputs.logit = state.logit;
  r.record.loss = static_cast<double>(lf.loss);
  r.record.logit = static_cast<double>(state.logit);
  r.record.reconstructed_map_bytes = state.split_map.bytes();
  r.record.peak_tile_activation_bytes = std::max(state.peak_tile_bytes, peak_tile_bw);
  r.record.tiles_forward = state.tiles;
  r.record.tiles_backward = static_cast<int>(plan.tiles.size());
  r.outputs.split_map = std::move(state.split_map);
  state.split_held.reset();
  r.record.peak_resident_bytes = tracker.peak();
  return r;
}

/// Conventional whole-image pass through every layer, same kernels and
/// accumulation orders as the streaming executor.
template <class T>
RunOutputs<T> baseline_forward_backward(const NetworkSpec& net, const Params<T>& params,
                                        const Tensor4<T>& image, int label,
                                        MemoryTracker* tracker = nullptr) {
  if (image.shape().n != 1) throw ShapeError("baseline executes one image at a time");
  if (image.shape().c != net.input_channels) throw ShapeError("image channel mismatch");
  auto cache = forward_range(net, params, 0, net.size(), image, tracker, true);
  RunOutputs<T> r;
  r.logit = cache.output()[0];
  const auto lf = bce_loss_fb(r.logit, label);
  r.loss = lf.loss;
  r.split_map = cache.acts[net.split_index];
  r.grads = ParamGrads<T>::zeros_like(params);
  r.grads.images = 1;
  backward_range(net, params, cache, logit_gradient(lf.grad), r.grads, false);
  return r;
}

/// Forward-only whole-image logit (used for evaluation and finite differences).
template <class T>
T baseline_logit(const NetworkSpec& net, const Params<T>& params, const Tensor4<T>& image) {
  return forward_range(net, params, 0, net.size(), image, nullptr, false).output()[0];
}

template <class T>
T streaming_logit(const NetworkSpec& net, const Params<T>& params, const Tensor4<T>& image,
                  const TilePlan& plan) {
  return streaming_forward(net, params, image, plan).logit;
}

/// Sums per-image gradients in list order, then divides by the batch size.
template <class T>
ParamGrads<T> accumulate_minibatch(const std::vector<ParamGrads<T>>& per_image) {
  if (per_image.empty()) throw Error("accumulate_minibatch: empty batch");
  ParamGrads<T> sum = per_image.front();
  for (std::size_t b = 1; b < per_image.size(); ++b) {
    const auto& g = per_image[b];
    if (g.layers.size() != sum.layers.size())
      throw ShapeError("accumulate_minibatch: layer count mismatch");
    for (std::size_t l = 0; l < g.layers.size(); ++l) {
      auto& d = sum.layers[l];
      const auto& s = g.layers[l];
      if (d.weights.shape() != s.weights.shape() || d.bias.size() != s.bias.size())
        throw ShapeError("accumulate_minibatch: shape mismatch in layer " + std::to_string(l));
      for (std::size_t i = 0; i < d.weights.size(); ++i) d.weights[i] += s.weights[i];
      for (std::size_t i = 0; i < d.bias.size(); ++i) d.bias[i] += s.bias[i];
    }
    sum.images += g.images;
  }
  const GradScalar n = static_cast<GradScalar>(per_image.size());
  for (auto& l : sum.layers) {
    for (auto& v : l.weights.values()) v /= n;
    for (auto& v : l.bias) v /= n;
  }
  sum.images = static_cast<int>(per_image.size());
  return sum;
}

/// p <- p - lr * g for every parameter, in place.
template <class T>
void sgd_step(Params<T>& params, const ParamGrads<T>& grads, T lr) {
  if (!(lr >= T(0))) throw Error("sgd_step: learning rate must be >= 0");
  if (grads.layers.size() != params.size()) throw ShapeError("sgd_step: layer count mismatch");
  for (std::size_t l = 0; l < params.size(); ++l) {
    auto& p = params[l];
    const auto& g = grads.layers[l];
    if (p.weights.shape() != g.weights.shape() || p.bias.size() != g.bias.size())
      throw ShapeError("sgd_step: shape mismatch in layer " + std::to_string(l));
    const GradScalar step = lr;
    for (std::size_t i = 0; i < p.weights.size(); ++i)
      p.weights[i] = static_cast<T>(p.weights[i] - step * g.weights[i]);
    for (std::size_t i = 0; i < p.bias.size(); ++i)
      p.bias[i] = static_cast<T>(p.bias[i] - step * g.bias[i]);
  }
}

}  // namespace ssgd
