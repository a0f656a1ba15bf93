#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "ssgd/tensor.hpp"

namespace ssgd {

/// Square kernel geometry. Maxpool reuses it with p = 0 and no channels.
struct ConvSpec {
  int k = 1;
  int s = 1;
  int p = 0;
  int c_in = 0;
  int c_out = 0;

  friend bool operator==(const ConvSpec&, const ConvSpec&) = default;
};

/// Output extent of a sliding window: floor((z + 2p - k) / s) + 1.
inline int window_output_size(int z, int k, int s, int p) {
  if (k < 1 || s < 1 || p < 0) throw ShapeError("invalid window geometry");
  if (z + 2 * p < k)
    throw ShapeError("kernel " + std::to_string(k) + " larger than padded input " +
                     std::to_string(z + 2 * p));
  return (z + 2 * p - k) / s + 1;
}

enum class LayerKind { conv, maxpool, relu, flatten, dense };

inline std::string_view kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::conv: return "conv";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::relu: return "relu";
    case LayerKind::flatten: return "flatten";
    case LayerKind::dense: return "dense";
  }
  return "?";
}

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  ConvSpec geometry{};  // conv and maxpool
  int width = 0;        // dense output units

  static LayerSpec conv(int c_in, int c_out, int k, int s = 1, int p = 0) {
    return {LayerKind::conv, ConvSpec{k, s, p, c_in, c_out}, 0};
  }
  static LayerSpec maxpool(int k, int s) {
    return {LayerKind::maxpool, ConvSpec{k, s, 0, 0, 0}, 0};
  }
  static LayerSpec relu() { return {LayerKind::relu, {}, 0}; }
  static LayerSpec flatten() { return {LayerKind::flatten, {}, 0}; }
  static LayerSpec dense(int width) { return {LayerKind::dense, {}, width}; }

  bool spatial() const {
    return kind == LayerKind::conv || kind == LayerKind::maxpool ||
           kind == LayerKind::relu;
  }
  bool has_params() const {
    return kind == LayerKind::conv || kind == LayerKind::dense;
  }
  /// Kernel/stride/padding as seen by region arithmetic (relu is 1/1/0).
  ConvSpec window() const {
    return spatial() && kind != LayerKind::relu ? geometry : ConvSpec{1, 1, 0, 0, 0};
  }
};

/// Ordered layer list. Layers [0, split_index) form the streaming section,
/// the rest form the head that runs once on the reconstructed map.
struct NetworkSpec {
  std::vector<LayerSpec> layers;
  std::size_t split_index = 0;
  int input_channels = 1;

  std::size_t size() const { return layers.size(); }
};

/// Per-layer (c, h, w) after each layer, index 0 being the input.
struct MapShape {
  int c = 0, h = 0, w = 0;
  std::size_t size() const { return static_cast<std::size_t>(c) * h * w; }
  friend bool operator==(const MapShape&, const MapShape&) = default;
};

/// Validates the network and returns the map shape before every layer plus
/// the final output (size layers + 1).
inline std::vector<MapShape> infer_shapes(const NetworkSpec& net, int image_size) {
  if (net.input_channels < 1) throw ShapeError("input_channels must be >= 1");
  if (image_size < 1) throw ShapeError("image size must be >= 1");
  if (net.split_index > net.layers.size())
    throw ShapeError("split_index beyond layer count");
  std::vector<MapShape> shapes{{net.input_channels, image_size, image_size}};
  bool flat = false;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const auto& l = net.layers[i];
    MapShape cur = shapes.back();
    const std::string where = "layer " + std::to_string(i) + " (" +
                              std::string(kind_name(l.kind)) + ")";
    if (i < net.split_index && !l.spatial())
      throw ShapeError(where + ": streaming section allows conv/maxpool/relu only");
    switch (l.kind) {
      case LayerKind::conv: {
        const auto& g = l.geometry;
        if (flat) throw ShapeError(where + ": conv after flatten");
        if (g.k < 1 || g.s < 1 || g.p < 0 || g.p >= g.k)
          throw ShapeError(where + ": need k>=1, s>=1, 0<=p<k");
        if (g.c_in != cur.c)
          throw ShapeError(where + ": expects " + std::to_string(g.c_in) +
                           " input channels, got " + std::to_string(cur.c));
        if (g.c_out < 1) throw ShapeError(where + ": c_out must be >= 1");
        cur = {g.c_out, window_output_size(cur.h, g.k, g.s, g.p),
               window_output_size(cur.w, g.k, g.s, g.p)};
        break;
      }
      case LayerKind::maxpool: {
        const auto& g = l.geometry;
        if (flat) throw ShapeError(where + ": maxpool after flatten");
        if (g.k < 1 || g.s < 1 || g.p != 0)
          throw ShapeError(where + ": maxpool needs k>=1, s>=1, p=0");
        cur = {cur.c, window_output_size(cur.h, g.k, g.s, 0),
               window_output_size(cur.w, g.k, g.s, 0)};
        break;
      }
      case LayerKind::relu:
        break;
      case LayerKind::flatten:
        if (flat) throw ShapeError(where + ": double flatten");
        flat = true;
        cur = {static_cast<int>(cur.size()), 1, 1};
        break;
      case LayerKind::dense:
        if (!flat) throw ShapeError(where + ": dense is only legal after flatten");
        if (l.width < 1) throw ShapeError(where + ": width must be >= 1");
        cur = {l.width, 1, 1};
        break;
    }
    shapes.push_back(cur);
  }
  return shapes;
}

/// Checks everything infer_shapes checks plus the head contract: the network
/// ends in a single logit and the split layer output is a spatial map.
inline std::vector<MapShape> validate_network(const NetworkSpec& net, int image_size) {
  auto shapes = infer_shapes(net, image_size);
  if (net.split_index == 0) throw ShapeError("streaming section is empty");
  if (net.layers.empty() || net.layers.back().kind != LayerKind::dense ||
      net.layers.back().width != 1)
    throw ShapeError("network must end in a dense layer of width 1");
  return shapes;
}

/// Weights and bias of one layer; both empty for parameter-free layers.
///
/// conv:  weights (c_out, c_in, k, k), bias c_out
/// dense: weights (1, 1, width, in_features), bias width
template <class T>
struct LayerParams {
  Tensor4<T> weights;
  std::vector<T> bias;

  bool empty() const { return weights.empty() && bias.empty(); }
  std::size_t count() const { return weights.size() + bias.size(); }
  friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

template <class T>
using ConvParams = LayerParams<T>;

template <class T>
using Params = std::vector<LayerParams<T>>;

/// Parameter gradients are reduced and stored in double for every working
/// precision, so their value does not depend on how positions are grouped
/// into tiles beyond double roundoff; they are rounded once, in the update.
using GradScalar = double;

/// Zero-initialized parameter set shaped for `net` at `image_size`.
template <class T>
Params<T> zero_params(const NetworkSpec& net, int image_size) {
  const auto shapes = infer_shapes(net, image_size);
  Params<T> params(net.layers.size());
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const auto& l = net.layers[i];
    if (l.kind == LayerKind::conv) {
      const auto& g = l.geometry;
      params[i].weights = Tensor4<T>(Shape4{g.c_out, g.c_in, g.k, g.k});
      params[i].bias.assign(g.c_out, T(0));
    } else if (l.kind == LayerKind::dense) {
      params[i].weights =
          Tensor4<T>(Shape4{1, 1, l.width, static_cast<int>(shapes[i].size())});
      params[i].bias.assign(l.width, T(0));
    }
  }
  return params;
}

template <class T>
std::size_t parameter_count(const Params<T>& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.count();
  return n;
}

template <class U, class T>
Params<U> cast_params(const Params<T>& params) {
  Params<U> out(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    out[i].weights = params[i].weights.template cast<U>();
    out[i].bias.assign(params[i].bias.begin(), params[i].bias.end());
  }
  return out;
}

/// Same count as parameter_count(zero_params(...)) without allocating.
inline std::size_t parameter_count(const NetworkSpec& net, int image_size) {
  const auto shapes = infer_shapes(net, image_size);
  std::size_t n = 0;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const auto& l = net.layers[i];
    if (l.kind == LayerKind::conv) {
      const auto& g = l.geometry;
      n += static_cast<std::size_t>(g.c_out) * g.c_in * g.k * g.k + g.c_out;
    } else if (l.kind == LayerKind::dense) {
      n += static_cast<std::size_t>(l.width) * shapes[i].size() + l.width;
    }
  }
  return n;
}

}  // namespace ssgd
