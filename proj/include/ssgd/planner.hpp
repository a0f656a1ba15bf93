#pragma once

// Tile planning for the streaming section.
//
// Map M_0 is the image, layer j maps M_j to M_{j+1}, and M_m (m = split
// index) is the split map. For each tile the planner derives, per map:
//
//   owned     R_j  partition of M_j across tiles (j >= 1)
//   forward   F_j  F_m = R_m, F_j = backproject(F_{j+1})
//   grad      N_j  N_1 = R_1, N_{j+1} = hull(R_{j+1}, forward_project(N_j))
//   compute   D_j  D_m = N_m, D_j = hull(backproject(D_{j+1}), N_j), D_0 = backproject(D_1)
//
// F_0 is the tile's forward input region and D_0 its backward (recompute)
// input region. Tiles on the last row/column are extended to the map edge,
// which covers the right/bottom remainder pixels.

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "ssgd/network.hpp"
#include "ssgd/ops.hpp"
#include "ssgd/tensor.hpp"

namespace ssgd {

/// Halo pixels one tile edge needs in the forward pass:
/// max(k - s, 0) + b * ((z - k) mod s). `b` selects the right/bottom edge,
/// where (z - k) mod s trailing pixels fall outside every window.
inline int layer_overlap_forward(int k, int s, int z, int b) {
  if (k < 1 || s < 1) throw PlanError("overlap: need k >= 1 and s >= 1");
  if (z < k) throw PlanError("overlap: image size " + std::to_string(z) +
                             " smaller than kernel " + std::to_string(k));
  if (b != 0 && b != 1) throw PlanError("overlap: b must be 0 or 1");
  return std::max(k - s, 0) + b * ((z - k) % s);
}

/// Backward-pass counterpart: max(2(k - s), 0) + b * ((z - k) mod s).
inline int layer_overlap_backward(int k, int s, int z, int b) {
  if (k < 1 || s < 1) throw PlanError("overlap: need k >= 1 and s >= 1");
  if (z < k) throw PlanError("overlap: image size " + std::to_string(z) +
                             " smaller than kernel " + std::to_string(k));
  if (b != 0 && b != 1) throw PlanError("overlap: b must be 0 or 1");
  return std::max(2 * (k - s), 0) + b * ((z - k) % s);
}

struct BackProjection {
  Region region;
  // pixels of the unclipped footprint that fell outside the map; these are
  // exactly the sides where zero padding is applied
  int clip_top = 0, clip_left = 0, clip_bottom = 0, clip_right = 0;
};

/// Minimal input region whose processing yields `out_region` of `layer`:
/// start = out_start * s - p, size = (out_size - 1) * s + k, clipped to the map.
inline BackProjection backproject_region(const LayerSpec& layer, const Region& out_region,
                                         int in_map_size) {
  if (!layer.spatial()) throw PlanError("backproject: layer has no spatial geometry");
  const ConvSpec g = layer.window();
  const int out_size = window_output_size(in_map_size, g.k, g.s, g.p);
  if (out_region.empty() || !Region::square(out_size).contains(out_region))
    throw PlanError("backproject: output region " + to_string(out_region) +
                    " not inside the " + std::to_string(out_size) + "^2 output map");
  const Region raw{out_region.y0 * g.s - g.p, out_region.x0 * g.s - g.p,
                   (out_region.y1 - 1) * g.s - g.p + g.k,
                   (out_region.x1 - 1) * g.s - g.p + g.k};
  BackProjection bp;
  bp.region = intersect(raw, Region::square(in_map_size));
  if (bp.region.empty()) throw PlanError("backproject: region empty after clipping");
  bp.clip_top = bp.region.y0 - raw.y0;
  bp.clip_left = bp.region.x0 - raw.x0;
  bp.clip_bottom = raw.y1 - bp.region.y1;
  bp.clip_right = raw.x1 - bp.region.x1;
  return bp;
}

/// Output positions of `layer` whose window touches `in_region`.
inline Region forward_project(const LayerSpec& layer, const Region& in_region, int in_map_size) {
  const ConvSpec g = layer.window();
  const int out_size = window_output_size(in_map_size, g.k, g.s, g.p);
  if (in_region.empty()) return {};
  auto lo = [&](int a) { return std::max(0, detail::ceil_div(a + g.p - g.k + 1, g.s)); };
  auto hi = [&](int b) { return std::min(out_size, detail::floor_div(b - 1 + g.p, g.s) + 1); };
  Region r{lo(in_region.y0), lo(in_region.x0), hi(in_region.y1), hi(in_region.x1)};
  return r.empty() ? Region{} : r;
}

/// Regions of one tile on the output map of one streaming layer.
struct LayerRegions {
  Region owned;             // R
  Region forward;           // F
  Region backward_grad;     // N
  Region backward_compute;  // D
  // backward_compute minus owned per side: top, left, bottom, right
  std::array<int, 4> trim{};

  friend bool operator==(const LayerRegions&, const LayerRegions&) = default;
};

struct TileSpec {
  int row = 0, col = 0;
  Region input_region_forward;
  Region input_region_backward;
  Region owned_split_region;
  bool b_bottom = false;
  bool b_right = false;
  std::vector<LayerRegions> layers;  // one per streaming layer

  friend bool operator==(const TileSpec&, const TileSpec&) = default;
};

/// Static per-layer geometry recorded in a plan.
struct LayerGeometry {
  LayerKind kind = LayerKind::relu;
  int k = 1, s = 1, p = 0;
  int in_size = 0, out_size = 0;
  int channels_out = 0;
  std::int64_t stride_product = 1;  // cumulative, including this layer
  std::array<int, 2> overlap_forward{};   // b = 0, b = 1
  std::array<int, 2> overlap_backward{};  // b = 0, b = 1

  friend bool operator==(const LayerGeometry&, const LayerGeometry&) = default;
};

struct TilePlan {
  int rows = 1, cols = 1;
  int image_size = 0;
  int input_channels = 1;
  std::size_t split_index = 0;
  int split_map_size = 0;
  std::vector<LayerGeometry> layers;
  std::vector<TileSpec> tiles;  // row-major

  std::size_t tile_count() const { return tiles.size(); }
  const TileSpec& tile(int r, int c) const { return tiles.at(static_cast<std::size_t>(r) * cols + c); }
  friend bool operator==(const TilePlan&, const TilePlan&) = default;
};

namespace detail {

/// Floor-equal partition of [0, size) into `parts`, remainder to the last part.
inline std::vector<int> equal_bounds(int size, int parts) {
  std::vector<int> b(static_cast<std::size_t>(parts) + 1);
  const int q = size / parts;
  for (int i = 0; i < parts; ++i) b[static_cast<std::size_t>(i)] = i * q;
  b.back() = size;
  return b;
}

inline std::array<int, 4> margins(const Region& outer, const Region& inner) {
  return {inner.y0 - outer.y0, inner.x0 - outer.x0, outer.y1 - inner.y1, outer.x1 - inner.x1};
}

inline Region extend_to_edge(Region r, int map_size, bool bottom, bool right) {
  if (bottom) r.y1 = map_size;
  if (right) r.x1 = map_size;
  return r;
}

}  // namespace detail

inline TilePlan build_tile_plan(const NetworkSpec& net, int image_size, int rows, int cols) {
  const auto shapes = infer_shapes(net, image_size);
  const std::size_t m = net.split_index;
  if (m == 0) throw PlanError("streaming section is empty");
  if (rows < 1 || cols < 1) throw PlanError("grid must be at least 1x1");

  TilePlan plan;
  plan.rows = rows;
  plan.cols = cols;
  plan.image_size = image_size;
  plan.input_channels = net.input_channels;
  plan.split_index = m;
  plan.split_map_size = shapes[m].h;

  std::int64_t stride = 1;
  for (std::size_t j = 0; j < m; ++j) {
    const auto g = net.layers[j].window();
    stride *= g.s;
    LayerGeometry lg;
    lg.kind = net.layers[j].kind;
    lg.k = g.k;
    lg.s = g.s;
    lg.p = g.p;
    lg.in_size = shapes[j].h;
    lg.out_size = shapes[j + 1].h;
    lg.channels_out = shapes[j + 1].c;
    lg.stride_product = stride;
    const int z = lg.in_size + 2 * g.p;
    for (int b = 0; b < 2; ++b) {
      lg.overlap_forward[b] = layer_overlap_forward(g.k, g.s, z, b);
      lg.overlap_backward[b] = layer_overlap_backward(g.k, g.s, z, b);
    }
    plan.layers.push_back(lg);
  }

  const int zm = plan.split_map_size;
  if (rows > zm || cols > zm)
    throw PlanError("grid " + std::to_string(rows) + "x" + std::to_string(cols) +
                    " finer than the " + std::to_string(zm) + "^2 split map");

  // Partition boundaries on every map M_1..M_m, derived from the split map by
  // mapping each boundary to the centre of its receptive field one layer down.
  std::vector<std::vector<int>> by(m + 1), bx(m + 1);
  by[m] = detail::equal_bounds(zm, rows);
  bx[m] = detail::equal_bounds(zm, cols);
  for (std::size_t j = m - 1; j >= 1; --j) {
    const auto g = net.layers[j].window();
    const int z = shapes[j].h;
    auto down = [&](const std::vector<int>& up) {
      std::vector<int> b(up.size());
      b.front() = 0;
      b.back() = z;
      for (std::size_t i = 1; i + 1 < up.size(); ++i)
        b[i] = std::clamp(up[i] * g.s - g.p + (g.k - 1) / 2, 0, z);
      for (std::size_t i = 1; i < b.size(); ++i)
        if (b[i] <= b[i - 1])
          throw PlanError("grid too fine: empty owned region on the output of layer " +
                          std::to_string(j - 1));
      return b;
    };
    by[j] = down(by[j + 1]);
    bx[j] = down(bx[j + 1]);
  }

  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      TileSpec t;
      t.row = r;
      t.col = c;
      t.b_bottom = r == rows - 1;
      t.b_right = c == cols - 1;
      t.layers.resize(m);
      auto owned = [&](std::size_t j) {  // on M_j, j >= 1
        return Region{by[j][static_cast<std::size_t>(r)], bx[j][static_cast<std::size_t>(c)],
                      by[j][static_cast<std::size_t>(r) + 1],
                      bx[j][static_cast<std::size_t>(c) + 1]};
      };
      for (std::size_t j = 1; j <= m; ++j) t.layers[j - 1].owned = owned(j);
      t.owned_split_region = owned(m);

      // forward
      Region f = t.owned_split_region;
      t.layers[m - 1].forward = f;
      for (std::size_t j = m; j-- > 0;) {
        f = backproject_region(net.layers[j], f, shapes[j].h).region;
        f = detail::extend_to_edge(f, shapes[j].h, t.b_bottom, t.b_right);
        if (j > 0) t.layers[j - 1].forward = f;
      }
      t.input_region_forward = f;

      // gradient-needed regions
      Region nreg = owned(1);
      t.layers[0].backward_grad = nreg;
      for (std::size_t j = 1; j < m; ++j) {
        nreg = hull(owned(j + 1), forward_project(net.layers[j], nreg, shapes[j].h));
        t.layers[j].backward_grad = nreg;
      }

      // recompute regions
      Region d = t.layers[m - 1].backward_grad;
      t.layers[m - 1].backward_compute = d;
      for (std::size_t j = m; j-- > 0;) {
        d = backproject_region(net.layers[j], d, shapes[j].h).region;
        if (j > 0) {
          d = hull(d, t.layers[j - 1].backward_grad);
          t.layers[j - 1].backward_compute = d;
        }
      }
      t.input_region_backward = detail::extend_to_edge(d, image_size, t.b_bottom, t.b_right);

      for (auto& lr : t.layers) lr.trim = detail::margins(lr.backward_compute, lr.owned);
      plan.tiles.push_back(std::move(t));
    }
  return plan;
}

inline TilePlan build_tile_plan(const NetworkSpec& net, int image_size, std::array<int, 2> grid) {
  return build_tile_plan(net, image_size, grid[0], grid[1]);
}

struct ValidationReport {
  bool ok = true;
  std::string predicate;  // first violated predicate, empty on pass
  std::string detail;

  explicit operator bool() const { return ok; }
};

inline ValidationReport validate_tile_plan(const TilePlan& plan, const NetworkSpec& net) {
  auto fail = [](std::string predicate, std::string detail) {
    return ValidationReport{false, std::move(predicate), std::move(detail)};
  };
  std::vector<MapShape> shapes;
  try {
    shapes = infer_shapes(net, plan.image_size);
  } catch (const Error& e) {
    return fail("geometry", e.what());
  }
  const std::size_t m = net.split_index;
  if (plan.split_index != m || plan.layers.size() != m || m == 0)
    return fail("geometry", "split index / layer count differ from network");
  if (plan.split_map_size != shapes[m].h) return fail("geometry", "split map size differs");
  if (plan.rows < 1 || plan.cols < 1 ||
      plan.tiles.size() != static_cast<std::size_t>(plan.rows) * plan.cols)
    return fail("geometry", "tile count does not match grid");
  for (const auto& t : plan.tiles)
    if (t.layers.size() != m) return fail("geometry", "tile layer count differs");

  // Partition: owned regions cover every map exactly once.
  for (std::size_t j = 1; j <= m; ++j) {
    const int z = shapes[j].h;
    std::vector<int> count(static_cast<std::size_t>(z) * z, 0);
    for (const auto& t : plan.tiles) {
      const Region& r = t.layers[j - 1].owned;
      if (r.empty() || !Region::square(z).contains(r))
        return fail("partition", "tile (" + std::to_string(t.row) + "," + std::to_string(t.col) +
                                     ") owned region " + to_string(r) + " invalid on map " +
                                     std::to_string(j));
      for (int y = r.y0; y < r.y1; ++y)
        for (int x = r.x0; x < r.x1; ++x) ++count[static_cast<std::size_t>(y) * z + x];
    }
    for (std::size_t i = 0; i < count.size(); ++i)
      if (count[i] != 1)
        return fail("partition", "pixel " + std::to_string(i) + " of map " + std::to_string(j) +
                                     " owned " + std::to_string(count[i]) + " times");
  }
  for (const auto& t : plan.tiles)
    if (t.owned_split_region != t.layers[m - 1].owned)
      return fail("partition", "owned_split_region disagrees with per-layer owned region");

  for (const auto& t : plan.tiles)
    if (t.b_bottom != (t.row == plan.rows - 1) || t.b_right != (t.col == plan.cols - 1))
      return fail("b_flags", "remainder flag set on a tile not at the bottom/right image edge");

  // Alignment: forward input regions start on each layer's sampling lattice.
  for (const auto& t : plan.tiles)
    for (std::size_t j = 0; j < m; ++j) {
      const auto g = net.layers[j].window();
      const Region& in = j == 0 ? t.input_region_forward : t.layers[j - 1].forward;
      auto on_lattice = [&](int a) { return a == 0 || (a + g.p) % g.s == 0; };
      if (!on_lattice(in.y0) || !on_lattice(in.x0))
        return fail("alignment", "tile (" + std::to_string(t.row) + "," + std::to_string(t.col) +
                                     ") input region " + to_string(in) + " of layer " +
                                     std::to_string(j) + " is off the stride-" +
                                     std::to_string(g.s) + " lattice");
    }

  // Forward sufficiency: F_m = R_m and every F_j feeds F_{j+1}.
  for (const auto& t : plan.tiles) {
    const std::string who = "tile (" + std::to_string(t.row) + "," + std::to_string(t.col) + ")";
    if (t.layers[m - 1].forward != t.owned_split_region)
      return fail("forward_sufficiency", who + ": forward output does not trim to owned shape");
    for (std::size_t j = 0; j < m; ++j) {
      const Region& in = j == 0 ? t.input_region_forward : t.layers[j - 1].forward;
      const Region& out = t.layers[j].forward;
      if (!Region::square(shapes[j].h).contains(in) || in.empty())
        return fail("bounds", who + ": forward region outside map " + std::to_string(j));
      if (!in.contains(backproject_region(net.layers[j], out, shapes[j].h).region))
        return fail("forward_sufficiency",
                    who + ": layer " + std::to_string(j) + " input " + to_string(in) +
                        " misses footprint of " + to_string(out));
    }
  }

  // Backward sufficiency.
  for (const auto& t : plan.tiles) {
    const std::string who = "tile (" + std::to_string(t.row) + "," + std::to_string(t.col) + ")";
    if (!t.input_region_backward.contains(t.input_region_forward))
      return fail("backward_superset", who + ": backward input region does not contain forward");
    if (!Region::square(plan.image_size).contains(t.input_region_backward))
      return fail("bounds", who + ": backward input region outside image");
    for (std::size_t j = 0; j < m; ++j) {
      const auto& lr = t.layers[j];
      if (!lr.backward_grad.contains(lr.owned))
        return fail("backward_sufficiency", who + ": grad region misses owned region");
      if (!lr.backward_compute.contains(lr.backward_grad))
        return fail("backward_sufficiency", who + ": compute region misses grad region");
      if (j + 1 < m &&
          !t.layers[j + 1].backward_grad.contains(
              forward_project(net.layers[j + 1], lr.backward_grad, shapes[j + 1].h)))
        return fail("backward_sufficiency",
                    who + ": grad region of layer " + std::to_string(j + 1) + " too small");
      const Region& in = j == 0 ? t.input_region_backward : t.layers[j - 1].backward_compute;
      if (!in.contains(backproject_region(net.layers[j], lr.backward_compute, shapes[j].h).region))
        return fail("backward_sufficiency",
                    who + ": recompute input of layer " + std::to_string(j) + " too small");
    }
  }
  return {};
}

// ------------------------------------------------------------------------ JSON

inline nlohmann::json region_json(const Region& r) { return {r.y0, r.x0, r.y1, r.x1}; }

inline Region region_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 4) throw PlanError("region must be [y0,x0,y1,x1]");
  return {j[0].get<int>(), j[1].get<int>(), j[2].get<int>(), j[3].get<int>()};
}

inline LayerKind layer_kind_from_string(const std::string& s) {
  if (s == "conv") return LayerKind::conv;
  if (s == "maxpool") return LayerKind::maxpool;
  if (s == "relu") return LayerKind::relu;
  if (s == "flatten") return LayerKind::flatten;
  if (s == "dense") return LayerKind::dense;
  throw ConfigError("unknown layer kind '" + s + "'");
}

/// Plan document, schema "ssgd.tileplan/1".
inline nlohmann::json to_json(const TilePlan& plan) {
  using nlohmann::json;
  json layers = json::array();
  json strides = json::array();
  for (const auto& l : plan.layers) {
    layers.push_back({{"kind", kind_name(l.kind)},
                      {"k", l.k},
                      {"s", l.s},
                      {"p", l.p},
                      {"in_size", l.in_size},
                      {"out_size", l.out_size},
                      {"channels_out", l.channels_out},
                      {"stride_product", l.stride_product},
                      {"overlap_forward", l.overlap_forward},
                      {"overlap_backward", l.overlap_backward}});
    strides.push_back(l.stride_product);
  }
  json tiles = json::array();
  for (const auto& t : plan.tiles) {
    json per_layer = json::array();
    for (const auto& lr : t.layers)
      per_layer.push_back({{"owned", region_json(lr.owned)},
                           {"forward", region_json(lr.forward)},
                           {"backward_grad", region_json(lr.backward_grad)},
                           {"backward_compute", region_json(lr.backward_compute)},
                           {"trim", lr.trim}});
    tiles.push_back({{"row", t.row},
                     {"col", t.col},
                     {"input_region_forward", region_json(t.input_region_forward)},
                     {"input_region_backward", region_json(t.input_region_backward)},
                     {"owned_split_region", region_json(t.owned_split_region)},
                     {"b_flags", {{"bottom", t.b_bottom}, {"right", t.b_right}}},
                     {"layers", per_layer}});
  }
  return {{"schema", "ssgd.tileplan/1"},
          {"grid", {plan.rows, plan.cols}},
          {"image_size", plan.image_size},
          {"input_channels", plan.input_channels},
          {"split_index", plan.split_index},
          {"split_map_size", plan.split_map_size},
          {"stride_products", strides},
          {"layers", layers},
          {"tiles", tiles}};
}

inline TilePlan tile_plan_from_json(const nlohmann::json& j) {
  try {
    if (j.at("schema").get<std::string>() != "ssgd.tileplan/1")
      throw PlanError("unsupported plan schema");
    TilePlan plan;
    plan.rows = j.at("grid").at(0).get<int>();
    plan.cols = j.at("grid").at(1).get<int>();
    plan.image_size = j.at("image_size").get<int>();
    plan.input_channels = j.at("input_channels").get<int>();
    plan.split_index = j.at("split_index").get<std::size_t>();
    plan.split_map_size = j.at("split_map_size").get<int>();
    for (const auto& l : j.at("layers")) {
      LayerGeometry g;
      g.kind = layer_kind_from_string(l.at("kind").get<std::string>());
      g.k = l.at("k").get<int>();
      g.s = l.at("s").get<int>();
      g.p = l.at("p").get<int>();
      g.in_size = l.at("in_size").get<int>();
      g.out_size = l.at("out_size").get<int>();
      g.channels_out = l.at("channels_out").get<int>();
      g.stride_product = l.at("stride_product").get<std::int64_t>();
      g.overlap_forward = l.at("overlap_forward").get<std::array<int, 2>>();
      g.overlap_backward = l.at("overlap_backward").get<std::array<int, 2>>();
      plan.layers.push_back(g);
    }
    for (const auto& t : j.at("tiles")) {
      TileSpec ts;
      ts.row = t.at("row").get<int>();
      ts.col = t.at("col").get<int>();
      ts.input_region_forward = region_from_json(t.at("input_region_forward"));
      ts.input_region_backward = region_from_json(t.at("input_region_backward"));
      ts.owned_split_region = region_from_json(t.at("owned_split_region"));
      ts.b_bottom = t.at("b_flags").at("bottom").get<bool>();
      ts.b_right = t.at("b_flags").at("right").get<bool>();
      for (const auto& lr : t.at("layers")) {
        LayerRegions r;
        r.owned = region_from_json(lr.at("owned"));
        r.forward = region_from_json(lr.at("forward"));
        r.backward_grad = region_from_json(lr.at("backward_grad"));
        r.backward_compute = region_from_json(lr.at("backward_compute"));
        r.trim = lr.at("trim").get<std::array<int, 4>>();
        ts.layers.push_back(r);
      }
      plan.tiles.push_back(std::move(ts));
    }
    return plan;
  } catch (const nlohmann::json::exception& e) {
    throw PlanError(std::string("malformed plan document: ") + e.what());
  }
}

}  // namespace ssgd
