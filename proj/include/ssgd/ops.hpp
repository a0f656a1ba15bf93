#pragma once

// Layer kernels.
//
// Every spatial kernel works on Windows addressed in map coordinates, and the
// whole-map entry points are thin wrappers that pass the full map as the
// window. Accumulation orders are fixed:
//
//   conv forward   out[o,y,x] = (sum_ci sum_ky sum_kx w * in) + bias,
//                  padded taps skipped, ci outermost, kx innermost
//   conv grad_in   gi[ci,y,x] = sum_o sum_ky sum_kx w * g, o outermost
//   conv grad_w    gw[o,ci,ky,kx] = sum over masked output rows, then columns
//   conv grad_b    gb[o] = sum over masked output rows, then columns
//   maxpool        first maximum in row-major window scan wins; backward adds
//                  into grad_in in row-major output order
//
// Because padding is decided by map coordinates and the per-pixel order never
// depends on the window, a pixel computed from a crop that holds its full
// receptive field is bit-identical to the same pixel computed from the map.

#include <cmath>
#include <cstdint>
#include <vector>

#include "ssgd/network.hpp"
#include "ssgd/tensor.hpp"

namespace ssgd {

namespace detail {

inline int floor_div(int a, int b) { return a >= 0 ? a / b : -((-a + b - 1) / b); }
inline int ceil_div(int a, int b) { return -floor_div(-a, b); }

}  // namespace detail

/// Minimal input rectangle (map coordinates, clipped to the map) read by the
/// outputs in `out`.
inline Region input_footprint(const Region& out, const ConvSpec& g, int in_h, int in_w) {
  if (out.empty()) return {};
  Region r{out.y0 * g.s - g.p, out.x0 * g.s - g.p, (out.y1 - 1) * g.s - g.p + g.k,
           (out.x1 - 1) * g.s - g.p + g.k};
  return intersect(r, Region{0, 0, in_h, in_w});
}

// ---------------------------------------------------------------- convolution

template <class T>
Window<T> conv2d_forward_window(const Window<T>& in, const ConvSpec& g,
                                const ConvParams<T>& params, const Region& out_region) {
  if (in.channels() != g.c_in)
    throw ShapeError("conv: input has " + std::to_string(in.channels()) +
                     " channels, expected " + std::to_string(g.c_in));
  const int Ho = window_output_size(in.map_h, g.k, g.s, g.p);
  const int Wo = window_output_size(in.map_w, g.k, g.s, g.p);
  if (!Region{0, 0, Ho, Wo}.contains(out_region))
    throw ShapeError("conv: output region " + to_string(out_region) + " outside map");
  if (!in.region.contains(input_footprint(out_region, g, in.map_h, in.map_w)))
    throw ShapeError("conv: input window " + to_string(in.region) +
                     " does not cover the receptive field of " + to_string(out_region));
  if (params.weights.shape() != Shape4{g.c_out, g.c_in, g.k, g.k} ||
      params.bias.size() != static_cast<std::size_t>(g.c_out))
    throw ShapeError("conv: parameter shape mismatch");

  const int N = in.batch();
  Window<T> out{Tensor4<T>(Shape4{N, g.c_out, out_region.height(), out_region.width()}),
                out_region, Ho, Wo};
  const int ow = out_region.width();
  std::vector<T> acc(static_cast<std::size_t>(ow));
  for (int n = 0; n < N; ++n)
    for (int o = 0; o < g.c_out; ++o)
      for (int oy = out_region.y0; oy < out_region.y1; ++oy) {
        std::fill(acc.begin(), acc.end(), T(0));
        for (int ci = 0; ci < g.c_in; ++ci)
          for (int ky = 0; ky < g.k; ++ky) {
            const int iy = oy * g.s - g.p + ky;
            if (iy < 0 || iy >= in.map_h) continue;
            const T* row = in.data.row(n, ci, iy - in.region.y0);
            for (int kx = 0; kx < g.k; ++kx) {
              const T w = params.weights(o, ci, ky, kx);
              // ox range keeping ix = ox*s - p + kx inside the map
              const int lo = std::max(out_region.x0, detail::ceil_div(g.p - kx, g.s));
              const int hi = std::min(out_region.x1,
                                      detail::floor_div(in.map_w - 1 + g.p - kx, g.s) + 1);
              for (int ox = lo; ox < hi; ++ox)
                acc[ox - out_region.x0] += w * row[ox * g.s - g.p + kx - in.region.x0];
            }
          }
        T* dst = out.data.row(n, o, oy - out_region.y0);
        const T b = params.bias[o];
        for (int x = 0; x < ow; ++x) dst[x] = acc[x] + b;
      }
  return out;
}

/// Backward pass of a convolution over windows.
///
/// `grad_out` must cover every output that reads a pixel of `grad_in_region`
/// (map coordinates) and the whole of `weight_mask`. Parameter gradients are
/// computed from output positions inside `weight_mask` only and added to
/// `grads` (one partial sum per call), accumulated in the precision of
/// `grads`. An empty `grad_in_region` skips the input gradient.
template <class T, class G>
Window<T> conv2d_backward_window(const Window<T>& in, const ConvSpec& g,
                                 const ConvParams<T>& params, const Window<T>& grad_out,
                                 const Region& grad_in_region, const Region& weight_mask,
                                 ConvParams<G>& grads) {
  const int Ho = window_output_size(in.map_h, g.k, g.s, g.p);
  const int Wo = window_output_size(in.map_w, g.k, g.s, g.p);
  if (grad_out.map_h != Ho || grad_out.map_w != Wo || grad_out.channels() != g.c_out ||
      grad_out.batch() != in.batch())
    throw ShapeError("conv backward: grad_out dims do not match forward output");
  if (in.channels() != g.c_in) throw ShapeError("conv backward: channel mismatch");
  if (!grad_out.region.contains(weight_mask))
    throw ShapeError("conv backward: grad_out does not cover weight mask");
  if (!in.region.contains(input_footprint(weight_mask, g, in.map_h, in.map_w)))
    throw ShapeError("conv backward: input window misses weight-mask footprint");
  if (grads.weights.shape() != params.weights.shape() ||
      grads.bias.size() != params.bias.size())
    throw ShapeError("conv backward: gradient buffer shape mismatch");

  const int N = in.batch();
  const Region& gr = grad_in_region;
  Window<T> grad_in{Tensor4<T>(Shape4{N, g.c_in, gr.empty() ? 0 : gr.height(),
                                      gr.empty() ? 0 : gr.width()}),
                    gr, in.map_h, in.map_w};

  if (!gr.empty()) {
    if (!Region{0, 0, in.map_h, in.map_w}.contains(gr))
      throw ShapeError("conv backward: grad_in region outside map");
    const int gw = gr.width();
    std::vector<T> acc(static_cast<std::size_t>(gw));
    for (int n = 0; n < N; ++n)
      for (int ci = 0; ci < g.c_in; ++ci)
        for (int iy = gr.y0; iy < gr.y1; ++iy) {
          std::fill(acc.begin(), acc.end(), T(0));
          for (int o = 0; o < g.c_out; ++o)
            for (int ky = 0; ky < g.k; ++ky) {
              const int num = iy + g.p - ky;
              if (num < 0 || num % g.s != 0) continue;
              const int oy = num / g.s;
              if (oy >= Ho) continue;
              for (int kx = 0; kx < g.k; ++kx) {
                const int lo = std::max(0, detail::ceil_div(gr.x0 + g.p - kx, g.s));
                const int hi = std::min(Wo, detail::floor_div(gr.x1 - 1 + g.p - kx, g.s) + 1);
                if (lo >= hi) continue;
                if (!grad_out.region.contains(oy, lo) ||
                    !grad_out.region.contains(oy, hi - 1))
                  throw ShapeError("conv backward: grad_out window " +
                                   to_string(grad_out.region) +
                                   " misses outputs needed for grad_in " + to_string(gr));
                const T w = params.weights(o, ci, ky, kx);
                const T* grow = grad_out.data.row(n, o, oy - grad_out.region.y0);
                const int gx0 = grad_out.region.x0;
                for (int ox = lo; ox < hi; ++ox)
                  acc[ox * g.s - g.p + kx - gr.x0] += w * grow[ox - gx0];
              }
            }
          std::copy(acc.begin(), acc.end(), &grad_in.at(n, ci, iy, gr.x0));
        }
  }

  if (weight_mask.empty()) return grad_in;
  const Region& m = weight_mask;
  for (int o = 0; o < g.c_out; ++o) {
    G bacc = G(0);
    for (int n = 0; n < N; ++n)
      for (int oy = m.y0; oy < m.y1; ++oy) {
        const T* grow = &grad_out.at(n, o, oy, m.x0);
        for (int x = 0; x < m.width(); ++x) bacc += static_cast<G>(grow[x]);
      }
    grads.bias[o] += bacc;
    for (int ci = 0; ci < g.c_in; ++ci)
      for (int ky = 0; ky < g.k; ++ky)
        for (int kx = 0; kx < g.k; ++kx) {
          const int lo = std::max(m.x0, detail::ceil_div(g.p - kx, g.s));
          const int hi = std::min(m.x1, detail::floor_div(in.map_w - 1 + g.p - kx, g.s) + 1);
          G wacc = G(0);
          for (int n = 0; n < N; ++n)
            for (int oy = m.y0; oy < m.y1; ++oy) {
              const int iy = oy * g.s - g.p + ky;
              if (iy < 0 || iy >= in.map_h) continue;
              const T* grow = grad_out.data.row(n, o, oy - grad_out.region.y0);
              const T* irow = in.data.row(n, ci, iy - in.region.y0);
              const int gx0 = grad_out.region.x0;
              const int ix0 = in.region.x0 + g.p - kx;
              for (int ox = lo; ox < hi; ++ox)
                wacc += static_cast<G>(grow[ox - gx0]) * static_cast<G>(irow[ox * g.s - ix0]);
            }
          grads.weights(o, ci, ky, kx) += wacc;
        }
  }
  return grad_in;
}

template <class T>
Tensor4<T> conv2d_forward(const Tensor4<T>& input, const ConvSpec& spec,
                          const ConvParams<T>& params) {
  const auto s = input.shape();
  if (s.c != spec.c_in) throw ShapeError("conv: channel mismatch");
  const int Ho = window_output_size(s.h, spec.k, spec.s, spec.p);
  const int Wo = window_output_size(s.w, spec.k, spec.s, spec.p);
  Window<T> in{input, Region{0, 0, s.h, s.w}, s.h, s.w};
  return conv2d_forward_window(in, spec, params, Region{0, 0, Ho, Wo}).data;
}

template <class T>
struct ConvBackward {
  Tensor4<T> grad_in;
  ConvParams<GradScalar> grad_params;
};

template <class T>
ConvBackward<T> conv2d_backward(const Tensor4<T>& input, const ConvSpec& spec,
                                const ConvParams<T>& params, const Tensor4<T>& grad_out) {
  const auto s = input.shape();
  const int Ho = window_output_size(s.h, spec.k, spec.s, spec.p);
  const int Wo = window_output_size(s.w, spec.k, spec.s, spec.p);
  if (grad_out.shape() != Shape4{s.n, spec.c_out, Ho, Wo})
    throw ShapeError("conv backward: grad_out " + to_string(grad_out.shape()) +
                     " does not match forward output");
  ConvBackward<T> r;
  r.grad_params.weights = Tensor4<GradScalar>(params.weights.shape());
  r.grad_params.bias.assign(params.bias.size(), GradScalar(0));
  Window<T> in{input, Region{0, 0, s.h, s.w}, s.h, s.w};
  Window<T> go{grad_out, Region{0, 0, Ho, Wo}, Ho, Wo};
  r.grad_in = conv2d_backward_window(in, spec, params, go, in.region, go.region,
                                     r.grad_params)
                  .data;
  return r;
}

// -------------------------------------------------------------------- maxpool

/// Per-output flat index (n, c, y, x over the input map) of the selected max.
struct ArgmaxMap {
  Shape4 input;  // map-level input dims
  Region out_region;
  int out_h = 0, out_w = 0;
  std::vector<std::int64_t> index;  // (n, c, y, x) over out_region, row-major

  std::int64_t at(int n, int c, int oy, int ox) const {
    const std::size_t i =
        ((static_cast<std::size_t>(n) * input.c + c) * out_region.height() +
         (oy - out_region.y0)) *
            out_region.width() +
        (ox - out_region.x0);
    return index[i];
  }
};

template <class T>
struct PoolForward {
  Window<T> output;
  ArgmaxMap argmax;
};

template <class T>
PoolForward<T> maxpool2d_forward_window(const Window<T>& in, int k, int s,
                                        const Region& out_region) {
  const int Ho = window_output_size(in.map_h, k, s, 0);
  const int Wo = window_output_size(in.map_w, k, s, 0);
  if (!Region{0, 0, Ho, Wo}.contains(out_region))
    throw ShapeError("maxpool: output region outside map");
  const ConvSpec g{k, s, 0, 0, 0};
  if (!in.region.contains(input_footprint(out_region, g, in.map_h, in.map_w)))
    throw ShapeError("maxpool: input window does not cover receptive field");
  const int N = in.batch(), C = in.channels();
  PoolForward<T> r{
      Window<T>{Tensor4<T>(Shape4{N, C, out_region.height(), out_region.width()}),
                out_region, Ho, Wo},
      ArgmaxMap{Shape4{N, C, in.map_h, in.map_w}, out_region, Ho, Wo, {}}};
  r.argmax.index.resize(r.output.data.size());
  std::size_t i = 0;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int oy = out_region.y0; oy < out_region.y1; ++oy)
        for (int ox = out_region.x0; ox < out_region.x1; ++ox, ++i) {
          int by = oy * s, bx = ox * s;
          T best = in.at(n, c, by, bx);
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              const T v = in.at(n, c, oy * s + ky, ox * s + kx);
              if (v > best) {
                best = v;
                by = oy * s + ky;
                bx = ox * s + kx;
              }
            }
          r.output.data[i] = best;
          r.argmax.index[i] =
              ((static_cast<std::int64_t>(n) * C + c) * in.map_h + by) * in.map_w + bx;
        }
  return r;
}

/// Routes grad_out (over any sub-window of the argmax map) to the selected
/// inputs, keeping only those that fall inside grad_in_region.
template <class T>
Window<T> maxpool2d_backward_window(const ArgmaxMap& argmax, const Window<T>& grad_out,
                                    const Region& grad_in_region) {
  const auto& in = argmax.input;
  if (grad_out.map_h != argmax.out_h || grad_out.map_w != argmax.out_w ||
      grad_out.channels() != in.c || grad_out.batch() != in.n ||
      !argmax.out_region.contains(grad_out.region))
    throw ShapeError("maxpool backward: stale argmax dims");
  const Region& gr = grad_in_region;
  Window<T> grad_in{Tensor4<T>(Shape4{in.n, in.c, gr.empty() ? 0 : gr.height(),
                                      gr.empty() ? 0 : gr.width()}),
                    gr, in.h, in.w};
  if (gr.empty()) return grad_in;
  const Region& go = grad_out.region;
  for (int n = 0; n < in.n; ++n)
    for (int c = 0; c < in.c; ++c)
      for (int oy = go.y0; oy < go.y1; ++oy)
        for (int ox = go.x0; ox < go.x1; ++ox) {
          const std::int64_t flat = argmax.at(n, c, oy, ox);
          const int y = static_cast<int>((flat / in.w) % in.h);
          const int x = static_cast<int>(flat % in.w);
          if (gr.contains(y, x)) grad_in.at(n, c, y, x) += grad_out.at(n, c, oy, ox);
        }
  return grad_in;
}

template <class T>
struct MaxPoolResult {
  Tensor4<T> output;
  ArgmaxMap argmax;
};

template <class T>
MaxPoolResult<T> maxpool2d_forward(const Tensor4<T>& input, int k, int s) {
  const auto sh = input.shape();
  const int Ho = window_output_size(sh.h, k, s, 0);
  const int Wo = window_output_size(sh.w, k, s, 0);
  auto r = maxpool2d_forward_window(Window<T>{input, Region{0, 0, sh.h, sh.w}, sh.h, sh.w},
                                    k, s, Region{0, 0, Ho, Wo});
  return {std::move(r.output.data), std::move(r.argmax)};
}

template <class T>
Tensor4<T> maxpool2d_backward(const ArgmaxMap& argmax, const Tensor4<T>& grad_out) {
  const auto s = grad_out.shape();
  if (argmax.out_region != Region{0, 0, argmax.out_h, argmax.out_w} ||
      s != Shape4{argmax.input.n, argmax.input.c, argmax.out_h, argmax.out_w})
    throw ShapeError("maxpool backward: stale argmax dims");
  Window<T> go{grad_out, argmax.out_region, argmax.out_h, argmax.out_w};
  return maxpool2d_backward_window(argmax, go,
                                   Region{0, 0, argmax.input.h, argmax.input.w})
      .data;
}

// ----------------------------------------------------------------------- relu

template <class T>
Window<T> relu_forward_window(const Window<T>& in, const Region& out_region) {
  Window<T> out = crop(in, out_region);
  for (auto& v : out.data.values()) v = v > T(0) ? v : T(0);
  return out;
}

/// grad_in = grad_out where input > 0, else 0 (gradient at exactly 0 is 0).
template <class T>
Window<T> relu_backward_window(const Window<T>& in, const Window<T>& grad_out,
                               const Region& grad_in_region) {
  if (grad_in_region.empty())
    return Window<T>{Tensor4<T>(Shape4{in.batch(), in.channels(), 0, 0}), {}, in.map_h,
                     in.map_w};
  Window<T> g = crop(grad_out, grad_in_region);
  const Window<T> x = crop(in, grad_in_region);
  for (std::size_t i = 0; i < g.data.size(); ++i)
    if (!(x.data[i] > T(0))) g.data[i] = T(0);
  return g;
}

template <class T>
Tensor4<T> relu_forward(const Tensor4<T>& input) {
  Tensor4<T> out = input;
  for (auto& v : out.values()) v = v > T(0) ? v : T(0);
  return out;
}

template <class T>
Tensor4<T> relu_backward(const Tensor4<T>& input, const Tensor4<T>& grad_out) {
  if (input.shape() != grad_out.shape()) throw ShapeError("relu backward: dim mismatch");
  Tensor4<T> g = grad_out;
  for (std::size_t i = 0; i < g.size(); ++i)
    if (!(input[i] > T(0))) g[i] = T(0);
  return g;
}

// ------------------------------------------------------------- flatten, dense

template <class T>
Tensor4<T> flatten_forward(const Tensor4<T>& input) {
  const auto s = input.shape();
  return Tensor4<T>(Shape4{s.n, s.c * s.h * s.w, 1, 1}, input.storage());
}

template <class T>
Tensor4<T> flatten_backward(const Shape4& input_shape, const Tensor4<T>& grad_out) {
  if (grad_out.size() != input_shape.size()) throw ShapeError("flatten backward: dim mismatch");
  return Tensor4<T>(input_shape, grad_out.storage());
}

/// out[n,o] = (sum_i W[o,i] * x[n,i]) + b[o], i ascending.
template <class T>
Tensor4<T> dense_forward(const Tensor4<T>& input, const LayerParams<T>& params) {
  const auto s = input.shape();
  const auto ws = params.weights.shape();
  if (s.h != 1 || s.w != 1 || ws.w != s.c || params.bias.size() != static_cast<std::size_t>(ws.h))
    throw ShapeError("dense: input " + to_string(s) + " vs weights " + to_string(ws));
  Tensor4<T> out(Shape4{s.n, ws.h, 1, 1});
  for (int n = 0; n < s.n; ++n)
    for (int o = 0; o < ws.h; ++o) {
      T acc = T(0);
      const T* w = params.weights.row(0, 0, o);
      for (int i = 0; i < s.c; ++i) acc += w[i] * input(n, i, 0, 0);
      out(n, o, 0, 0) = acc + params.bias[o];
    }
  return out;
}

template <class T, class G>
Tensor4<T> dense_backward(const Tensor4<T>& input, const LayerParams<T>& params,
                          const Tensor4<T>& grad_out, LayerParams<G>& grads) {
  const auto s = input.shape();
  const auto ws = params.weights.shape();
  if (grad_out.shape() != Shape4{s.n, ws.h, 1, 1}) throw ShapeError("dense backward: dim mismatch");
  Tensor4<T> grad_in(s);
  for (int n = 0; n < s.n; ++n)
    for (int i = 0; i < s.c; ++i) {
      T acc = T(0);
      for (int o = 0; o < ws.h; ++o) acc += params.weights(0, 0, o, i) * grad_out(n, o, 0, 0);
      grad_in(n, i, 0, 0) = acc;
    }
  for (int o = 0; o < ws.h; ++o) {
    G bacc = G(0);
    for (int n = 0; n < s.n; ++n) bacc += static_cast<G>(grad_out(n, o, 0, 0));
    grads.bias[o] += bacc;
    for (int i = 0; i < s.c; ++i) {
      G wacc = G(0);
      for (int n = 0; n < s.n; ++n)
        wacc += static_cast<G>(grad_out(n, o, 0, 0)) * static_cast<G>(input(n, i, 0, 0));
      grads.weights(0, 0, o, i) += wacc;
    }
  }
  return grad_in;
}

// ----------------------------------------------------------------------- loss

template <class T>
struct LossResult {
  T loss;
  T grad;  // dloss / dlogit
};

/// Sigmoid + binary cross-entropy on one logit, stable for large |x|.
template <class T>
LossResult<T> bce_loss_fb(T logit, int label) {
  if (label != 0 && label != 1) throw Error("bce: label must be 0 or 1");
  if (!std::isfinite(logit)) throw NonFiniteError("bce: non-finite logit");
  const T y = static_cast<T>(label);
  const T loss = std::max(logit, T(0)) - logit * y + std::log1p(std::exp(-std::abs(logit)));
  const T sig = logit >= T(0) ? T(1) / (T(1) + std::exp(-logit))
                              : std::exp(logit) / (T(1) + std::exp(logit));
  return {loss, sig - y};
}

}  // namespace ssgd
