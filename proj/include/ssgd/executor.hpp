#pragma once

// Whole-map layer execution shared by the baseline and the streaming head,
// plus the per-layer dispatch used by tile passes.

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "ssgd/memory_tracker.hpp"
#include "ssgd/network.hpp"
#include "ssgd/ops.hpp"
#include "ssgd/tensor.hpp"

namespace ssgd {

/// Parameter gradients for a whole network plus the number of images summed.
/// `T` is the working precision of the parameters; values are GradScalar.
template <class T>
struct ParamGrads {
  Params<GradScalar> layers;
  int images = 0;

  static ParamGrads zeros_like(const Params<T>& params) {
    ParamGrads g;
    g.layers.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (params[i].empty()) continue;
      g.layers[i].weights = Tensor4<GradScalar>(params[i].weights.shape());
      g.layers[i].bias.assign(params[i].bias.size(), GradScalar(0));
    }
    return g;
  }
  friend bool operator==(const ParamGrads&, const ParamGrads&) = default;
};

template <class T>
struct LayerOutput {
  Window<T> out;
  std::optional<ArgmaxMap> argmax;
};

/// One spatial layer over windows.
template <class T>
LayerOutput<T> layer_forward(const LayerSpec& layer, const LayerParams<T>& params,
                             const Window<T>& in, const Region& out_region) {
  switch (layer.kind) {
    case LayerKind::conv:
      return {conv2d_forward_window(in, layer.geometry, params, out_region), std::nullopt};
    case LayerKind::maxpool: {
      auto r = maxpool2d_forward_window(in, layer.geometry.k, layer.geometry.s, out_region);
      return {std::move(r.output), std::move(r.argmax)};
    }
    case LayerKind::relu:
      return {relu_forward_window(in, out_region), std::nullopt};
    default:
      throw ShapeError("layer_forward: layer is not spatial");
  }
}

template <class T>
Window<T> layer_backward(const LayerSpec& layer, const LayerParams<T>& params,
                         const Window<T>& in, const std::optional<ArgmaxMap>& argmax,
                         const Window<T>& grad_out, const Region& grad_in_region,
                         const Region& weight_mask, LayerParams<GradScalar>& grads) {
  switch (layer.kind) {
    case LayerKind::conv:
      return conv2d_backward_window(in, layer.geometry, params, grad_out, grad_in_region,
                                    weight_mask, grads);
    case LayerKind::maxpool:
      if (!argmax) throw Error("maxpool backward without forward state");
      return maxpool2d_backward_window(*argmax, grad_out, grad_in_region);
    case LayerKind::relu:
      return relu_backward_window(in, grad_out, grad_in_region);
    default:
      throw ShapeError("layer_backward: layer is not spatial");
  }
}

/// Retained activations of a contiguous layer range run on whole maps.
template <class T>
struct RangeCache {
  std::size_t first = 0, last = 0;
  std::vector<Tensor4<T>> acts;  // acts[0] = input, acts[i + 1] = output of layer first + i
  std::vector<std::optional<ArgmaxMap>> argmax;
  std::vector<Reservation> held;

  const Tensor4<T>& output() const { return acts.back(); }
  void release() { held.clear(); }
};

/// Runs layers [first, last) on whole maps, retaining every output. When
/// `track_input` is set the input counts as resident too.
template <class T>
RangeCache<T> forward_range(const NetworkSpec& net, const Params<T>& params, std::size_t first,
                            std::size_t last, Tensor4<T> input, MemoryTracker* tracker,
                            bool track_input) {
  RangeCache<T> cache;
  cache.first = first;
  cache.last = last;
  if (track_input) cache.held.emplace_back(tracker, input.bytes());
  cache.acts.push_back(std::move(input));
  for (std::size_t i = first; i < last; ++i) {
    const auto& layer = net.layers[i];
    const Tensor4<T>& x = cache.acts.back();
    Tensor4<T> y;
    std::optional<ArgmaxMap> am;
    if (layer.spatial()) {
      const auto s = x.shape();
      const auto g = layer.window();
      const int ho = window_output_size(s.h, g.k, g.s, g.p);
      const int wo = window_output_size(s.w, g.k, g.s, g.p);
      auto r = layer_forward(layer, params[i], Window<T>::whole(x), Region{0, 0, ho, wo});
      y = std::move(r.out.data);
      am = std::move(r.argmax);
    } else if (layer.kind == LayerKind::flatten) {
      y = flatten_forward(x);
    } else {
      y = dense_forward(x, params[i]);
    }
    check_finite(y, "output of layer " + std::to_string(i));
    cache.held.emplace_back(tracker, y.bytes());
    cache.acts.push_back(std::move(y));
    cache.argmax.push_back(std::move(am));
  }
  return cache;
}

/// Backpropagates `grad_out` (gradient w.r.t. cache.output()) through the
/// range, adding parameter gradients into `grads`. Returns the gradient
/// w.r.t. the range input, or an empty tensor when `need_input_grad` is off.
template <class T>
Tensor4<T> backward_range(const NetworkSpec& net, const Params<T>& params,
                          const RangeCache<T>& cache, Tensor4<T> grad_out,
                          ParamGrads<T>& grads, bool need_input_grad) {
  for (std::size_t i = cache.last; i-- > cache.first;) {
    const std::size_t li = i - cache.first;
    const auto& layer = net.layers[i];
    const Tensor4<T>& x = cache.acts[li];
    const bool want_in = need_input_grad || i > cache.first;
    if (layer.spatial()) {
      const auto s = x.shape();
      const auto go_shape = grad_out.shape();
      Window<T> go{std::move(grad_out), Region{0, 0, go_shape.h, go_shape.w}, go_shape.h,
                   go_shape.w};
      const Region in_region = want_in ? Region{0, 0, s.h, s.w} : Region{};
      auto gi = layer_backward(layer, params[i], Window<T>::whole(x), cache.argmax[li], go,
                               in_region, go.region, grads.layers[i]);
      grad_out = std::move(gi.data);
    } else if (layer.kind == LayerKind::flatten) {
      grad_out = flatten_backward(x.shape(), grad_out);
    } else {
      grad_out = dense_backward(x, params[i], grad_out, grads.layers[i]);
    }
    if (!want_in) return {};
  }
  return grad_out;
}

template <class T>
Tensor4<T> logit_gradient(T dloss_dlogit) {
  return Tensor4<T>(Shape4{1, 1, 1, 1}, dloss_dlogit);
}

/// Head forward on the reconstructed split map: layers [split, end) ending in
/// a single logit. Head activations are retained for head_backward.
template <class T>
RangeCache<T> head_forward(const NetworkSpec& net, const Params<T>& params,
                           const Tensor4<T>& features, int image_size,
                           MemoryTracker* tracker = nullptr) {
  const auto shapes = validate_network(net, image_size);
  const auto& want = shapes[net.split_index];
  const auto s = features.shape();
  if (s.n != 1 || s.c != want.c || s.h != want.h || s.w != want.w)
    throw ShapeError("head: features " + to_string(s) + " do not match split map " +
                     std::to_string(want.c) + "x" + std::to_string(want.h) + "x" +
                     std::to_string(want.w));
  return forward_range(net, params, net.split_index, net.size(), features, tracker, false);
}

/// Gradient w.r.t. the split map; head parameter gradients go into `grads`.
template <class T>
Tensor4<T> head_backward(const NetworkSpec& net, const Params<T>& params,
                         const RangeCache<T>& head, T dloss_dlogit, ParamGrads<T>& grads) {
  if (head.first != net.split_index || head.last != net.size())
    throw ShapeError("head backward: cache does not cover the head");
  return backward_range(net, params, head, logit_gradient(dloss_dlogit), grads, true);
}

}  // namespace ssgd
