#pragma once

// Independent oracles and generators shared by the unit and acceptance tests.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "ssgd/data.hpp"
#include "ssgd/network.hpp"
#include "ssgd/planner.hpp"
#include "ssgd/tensor.hpp"

namespace ssgd::testing {

/// Textbook convolution with explicit zero padding, accumulated in double.
inline Tensor4<double> naive_conv(const Tensor4<double>& x, const ConvSpec& g,
                                  const LayerParams<double>& p) {
  const auto s = x.shape();
  const int ho = (s.h + 2 * g.p - g.k) / g.s + 1;
  const int wo = (s.w + 2 * g.p - g.k) / g.s + 1;
  Tensor4<double> padded(Shape4{s.n, s.c, s.h + 2 * g.p, s.w + 2 * g.p});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < s.h; ++y)
        for (int xx = 0; xx < s.w; ++xx) padded(n, c, y + g.p, xx + g.p) = x(n, c, y, xx);
  Tensor4<double> out(Shape4{s.n, g.c_out, ho, wo});
  for (int n = 0; n < s.n; ++n)
    for (int o = 0; o < g.c_out; ++o)
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          double acc = p.bias[o];
          for (int c = 0; c < s.c; ++c)
            for (int ky = 0; ky < g.k; ++ky)
              for (int kx = 0; kx < g.k; ++kx)
                acc += p.weights(o, c, ky, kx) * padded(n, c, oy * g.s + ky, ox * g.s + kx);
          out(n, o, oy, ox) = acc;
        }
  return out;
}

/// Central-difference gradient of f at x for every coordinate.
inline std::vector<double> numeric_gradient(std::vector<double> x,
                                            const std::function<double(const std::vector<double>&)>& f,
                                            double eps = 1e-5) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + eps;
    const double fp = f(x);
    x[i] = orig - eps;
    const double fm = f(x);
    x[i] = orig;
    g[i] = (fp - fm) / (2 * eps);
  }
  return g;
}

inline double max_rel_error(const std::vector<double>& a, const std::vector<double>& b,
                            double floor = 1e-8) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a[i] - b[i]) / std::max({std::abs(a[i]), std::abs(b[i]), floor}));
  return m;
}

inline std::vector<double> to_vector(const Tensor4<double>& t) {
  return {t.values().begin(), t.values().end()};
}

inline Tensor4<double> from_vector(Shape4 s, const std::vector<double>& v) {
  Tensor4<double> t(s);
  std::copy(v.begin(), v.end(), t.values().begin());
  return t;
}

/// A random streaming configuration: layers drawn from conv k in {1,2,3,5},
/// s in {1,2}; maxpool 2/2; relu. Image 16..64, grids 1x1, 2x2, 2x4, 4x4.
struct RandomCase {
  NetworkSpec net;
  int image_size = 0;
  int rows = 1, cols = 1;
  TilePlan plan;
};

inline std::optional<RandomCase> try_random_case(Rng& rng) {
  static const int kConvK[] = {1, 2, 3, 5};
  static const int kGrids[][2] = {{1, 1}, {2, 2}, {2, 4}, {4, 4}};
  RandomCase rc;
  rc.image_size = 16 + rng.below(49);
  const auto& grid = kGrids[rng.below(4)];
  rc.rows = grid[0];
  rc.cols = grid[1];
  const int channels = 1 + rng.below(2);
  rc.net.input_channels = channels;
  int c = channels;
  const int n_layers = 2 + rng.below(5);
  for (int i = 0; i < n_layers; ++i) {
    const int pick = rng.below(3);
    if (pick == 0) {
      const int k = kConvK[rng.below(4)];
      const int s = 1 + rng.below(2);
      const int p = rng.below(k);  // p < k
      const int c_out = 1 + rng.below(3);
      rc.net.layers.push_back(LayerSpec::conv(c, c_out, k, s, p));
      c = c_out;
    } else if (pick == 1) {
      rc.net.layers.push_back(LayerSpec::maxpool(2, 2));
    } else {
      rc.net.layers.push_back(LayerSpec::relu());
    }
  }
  rc.net.split_index = rc.net.layers.size();
  rc.net.layers.push_back(LayerSpec::flatten());
  rc.net.layers.push_back(LayerSpec::dense(3));
  rc.net.layers.push_back(LayerSpec::relu());
  rc.net.layers.push_back(LayerSpec::dense(1));
  try {
    validate_network(rc.net, rc.image_size);
    rc.plan = build_tile_plan(rc.net, rc.image_size, rc.rows, rc.cols);
  } catch (const Error&) {
    return std::nullopt;
  }
  if (!validate_tile_plan(rc.plan, rc.net).ok) return std::nullopt;
  return rc;
}

/// Draws until a feasible case comes up; the draw sequence is fixed by `rng`.
inline RandomCase random_case(Rng& rng) {
  for (;;)
    if (auto rc = try_random_case(rng)) return *rc;
}

// ------------------------------------------------------------ overlap oracle
//
// One spatial axis, p = 0, random signal and kernel. A tile is a crop
// [a, e) convolved in its own local coordinates, the way a naive tiler would
// run it. Its outputs are matched against the whole-signal convolution.

struct Conv1d {
  int k, s;
  std::vector<double> w;
};

inline std::vector<double> conv1d(const Conv1d& c, const std::vector<double>& x, int a, int e) {
  std::vector<double> y;
  for (int j = a; j + c.k <= e; j += c.s) {
    double acc = 0;
    for (int t = 0; t < c.k; ++t) acc += c.w[t] * x[j + t];
    y.push_back(acc);
  }
  return y;
}

/// Whole outputs a tile [a, e) reproduces exactly, by global output index;
/// nullopt if any of its outputs lands off the whole-signal lattice or
/// disagrees with the whole-signal value.
inline std::optional<std::vector<int>> tile_outputs(const Conv1d& c, const std::vector<double>& x,
                                                    int a, int e) {
  const auto whole = conv1d(c, x, 0, static_cast<int>(x.size()));
  const auto local = conv1d(c, x, a, e);
  std::vector<int> got;
  for (std::size_t j = 0; j < local.size(); ++j) {
    const int start = a + static_cast<int>(j) * c.s;
    if (start % c.s != 0) return std::nullopt;
    const int o = start / c.s;
    if (local[j] != whole[o]) return std::nullopt;
    got.push_back(o);
  }
  return got;
}

/// Input gradient over [a, e) from the upstream gradient of the outputs the
/// tile computes; pixels with a touching output outside the tile are wrong,
/// and the caller decides which pixels it trusts by value.
inline std::vector<double> tile_grad(const Conv1d& c, const std::vector<double>& g_out, int a, int e) {
  std::vector<double> gi(static_cast<std::size_t>(e - a), 0.0);
  for (int j = a; j + c.k <= e; j += c.s)
    for (int t = 0; t < c.k; ++t) gi[j - a + t] += c.w[t] * g_out[j / c.s];
  return gi;
}

struct OverlapOracle {
  std::optional<int> forward;   // minimal overlap of two lattice-aligned tiles
  std::optional<int> backward;  // same for input gradients
  int trailing = 0;             // trailing pixels no window reads
  bool offlattice_rejected = true;
};

/// Brute force over every two-tile split [0, e) | [r, z) with e >= r.
/// Overlap needed for a split is the smallest e - r that reproduces every
/// whole output (forward) or every input-gradient pixel (backward); the
/// oracle reports the worst case over split points r.
inline OverlapOracle overlap_oracle(int k, int s, int z, std::uint64_t seed = 1) {
  Rng rng(seed);
  Conv1d c{k, s, {}};
  for (int t = 0; t < k; ++t) c.w.push_back(rng.uniform(0.5, 1.5));
  std::vector<double> x(static_cast<std::size_t>(z));
  for (auto& v : x) v = rng.uniform(-1, 1);
  const auto whole = conv1d(c, x, 0, z);
  const int n_out = static_cast<int>(whole.size());
  std::vector<double> g_out(static_cast<std::size_t>(n_out));
  for (auto& v : g_out) v = rng.uniform(0.5, 1.5);
  const auto g_whole = tile_grad(c, g_out, 0, z);

  OverlapOracle res;
  // trailing: drop pixels from the end while the outputs stay identical
  for (int d = 1; d <= z - k; ++d) {
    if (conv1d(c, x, 0, z - d) != whole) break;
    res.trailing = d;
  }
  // a right tile off the lattice never reproduces whole outputs
  for (int a = 1; a + k <= z; ++a)
    if (a % s != 0 && tile_outputs(c, x, a, z)) res.offlattice_rejected = false;

  auto grads_ok = [&](int r, int e) {
    const auto gl = tile_grad(c, g_out, 0, e);
    const auto gr = tile_grad(c, g_out, r, z);
    for (int p = 0; p < z; ++p) {
      const double want = g_whole[p];
      const bool left = p < e && std::abs(gl[p] - want) <= 1e-12 * std::max(1.0, std::abs(want));
      const bool right = p >= r && std::abs(gr[p - r] - want) <= 1e-12 * std::max(1.0, std::abs(want));
      if (!left && !right) return false;
    }
    return true;
  };
  for (int r = s; r + k <= z; r += s) {
    std::optional<int> f, b;
    for (int e = r; e <= z && !(f && b); ++e) {
      if (!f) {
        const auto lo = tile_outputs(c, x, 0, e), hi = tile_outputs(c, x, r, z);
        if (lo && hi) {
          std::vector<bool> seen(static_cast<std::size_t>(n_out), false);
          for (int o : *lo) seen[o] = true;
          for (int o : *hi) seen[o] = true;
          if (std::all_of(seen.begin(), seen.end(), [](bool v) { return v; })) f = e - r;
        }
      }
      if (!b && grads_ok(r, e)) b = e - r;
    }
    // e == z means the map edge capped the search: that split says nothing
    // about the interior overlap
    if (f && r + *f < z) res.forward = std::max(res.forward.value_or(0), *f);
    if (b && r + *b < z) res.backward = std::max(res.backward.value_or(0), *b);
  }
  return res;
}

}  // namespace ssgd::testing
