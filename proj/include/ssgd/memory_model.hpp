#pragma once

// Analytical activation-memory accounting.
//
// Retention policy (both modes): every layer output is kept until its
// backward step, the split-map gradient is kept for the whole tile loop, and
// workspace (per-layer gradient buffers, argmax maps) is not counted. The
// streaming peak replays the executor's allocation schedule:
//
//   tile forward   split + crop_j + out_{j+1}           (one layer at a time)
//   head forward   split + head outputs
//   head backward  split + head outputs + split grad
//   tile backward  split + split grad + all recompute regions of one tile
//
// Streaming handles a mini-batch one image at a time, so its activation
// peak does not depend on the batch size.

#include <algorithm>
#include <cstdint>
#include <iomanip>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ssgd/network.hpp"
#include "ssgd/planner.hpp"

namespace ssgd {

enum class MemoryMode { whole_image, streaming };

struct MemoryPart {
  std::string name;
  std::uint64_t bytes = 0;
};

struct MemoryEstimate {
  MemoryMode mode = MemoryMode::whole_image;
  int batch = 1;
  DType dtype = DType::f32;
  std::vector<MemoryPart> activations;  // per retained tensor group
  std::uint64_t activation_bytes = 0;   // sum of activations
  std::uint64_t peak_activation_bytes = 0;
  std::uint64_t parameter_bytes = 0;
  std::uint64_t gradient_bytes = 0;
  std::uint64_t total_bytes = 0;  // activation + parameter + gradient
  std::uint64_t peak_bytes = 0;   // peak activation + parameter + gradient
};

namespace detail {

inline std::uint64_t map_bytes(std::int64_t scalars, DType d) {
  return static_cast<std::uint64_t>(scalars) * dtype_bytes(d);
}

inline void finish(MemoryEstimate& e, std::int64_t param_count) {
  e.activation_bytes = 0;
  for (const auto& p : e.activations) e.activation_bytes += p.bytes;
  e.parameter_bytes = map_bytes(param_count, e.dtype);
  // gradients are always held as GradScalar
  e.gradient_bytes = static_cast<std::uint64_t>(param_count) * sizeof(GradScalar);
  e.total_bytes = e.activation_bytes + e.parameter_bytes + e.gradient_bytes;
  e.peak_bytes = e.peak_activation_bytes + e.parameter_bytes + e.gradient_bytes;
}

}  // namespace detail

inline MemoryEstimate estimate_whole_image(const NetworkSpec& net, int image_size, int batch,
                                           DType dtype) {
  if (batch < 1) throw Error("memory: batch must be >= 1");
  const auto shapes = infer_shapes(net, image_size);
  MemoryEstimate e;
  e.mode = MemoryMode::whole_image;
  e.batch = batch;
  e.dtype = dtype;
  e.activations.push_back(
      {"input", detail::map_bytes(static_cast<std::int64_t>(shapes[0].size()) * batch, dtype)});
  for (std::size_t i = 0; i < net.layers.size(); ++i)
    e.activations.push_back(
        {"layer " + std::to_string(i) + " " + std::string(kind_name(net.layers[i].kind)),
         detail::map_bytes(static_cast<std::int64_t>(shapes[i + 1].size()) * batch, dtype)});
  detail::finish(e, static_cast<std::int64_t>(parameter_count(net, image_size)));
  e.peak_activation_bytes = e.activation_bytes;
  e.peak_bytes = e.total_bytes;
  return e;
}

inline MemoryEstimate estimate_streaming(const NetworkSpec& net, const TilePlan& plan, int batch,
                                         DType dtype) {
  if (batch < 1) throw Error("memory: batch must be >= 1");
  const auto shapes = infer_shapes(net, plan.image_size);
  const std::size_t m = net.split_index;
  if (plan.split_index != m) throw PlanError("memory: plan built for another network");
  auto bytes = [&](const Region& r, std::size_t map) {
    return detail::map_bytes(r.area() * shapes[map].c, dtype);
  };

  const std::uint64_t split = detail::map_bytes(static_cast<std::int64_t>(shapes[m].size()), dtype);
  std::uint64_t head = 0;
  for (std::size_t i = m; i < net.layers.size(); ++i)
    head += detail::map_bytes(static_cast<std::int64_t>(shapes[i + 1].size()), dtype);

  std::uint64_t tile_fw = 0, tile_bw = 0;
  std::vector<std::uint64_t> per_map(m + 1, 0);  // max over tiles of recompute bytes on M_j
  for (const auto& t : plan.tiles) {
    for (std::size_t j = 0; j < m; ++j) {
      const Region& in = j == 0 ? t.input_region_forward : t.layers[j - 1].forward;
      tile_fw = std::max(tile_fw, bytes(in, j) + bytes(t.layers[j].forward, j + 1));
    }
    std::uint64_t bw = bytes(t.input_region_backward, 0);
    per_map[0] = std::max(per_map[0], bw);
    for (std::size_t j = 0; j < m; ++j) {
      const auto b = bytes(t.layers[j].backward_compute, j + 1);
      per_map[j + 1] = std::max(per_map[j + 1], b);
      bw += b;
    }
    tile_bw = std::max(tile_bw, bw);
  }

  MemoryEstimate e;
  e.mode = MemoryMode::streaming;
  e.batch = batch;
  e.dtype = dtype;
  e.activations.push_back({"tile input", per_map[0]});
  for (std::size_t j = 0; j < m; ++j)
    e.activations.push_back({"tile layer " + std::to_string(j) + " " +
                                 std::string(kind_name(net.layers[j].kind)),
                             per_map[j + 1]});
  e.activations.push_back({"split map", split});
  e.activations.push_back({"split map gradient", split});
  for (std::size_t i = m; i < net.layers.size(); ++i)
    e.activations.push_back(
        {"layer " + std::to_string(i) + " " + std::string(kind_name(net.layers[i].kind)),
         detail::map_bytes(static_cast<std::int64_t>(shapes[i + 1].size()), dtype)});
  detail::finish(e, static_cast<std::int64_t>(parameter_count(net, plan.image_size)));
  e.peak_activation_bytes =
      std::max({split + tile_fw, split + head + split, split + split + tile_bw});
  e.peak_bytes = e.peak_activation_bytes + e.parameter_bytes + e.gradient_bytes;
  return e;
}

/// 100 * (1 - streaming peak / whole-image peak).
inline double reduction_report(const MemoryEstimate& whole, const MemoryEstimate& stream) {
  if (whole.peak_bytes == 0) throw Error("reduction_report: zero whole-image peak");
  return 100.0 * (1.0 - static_cast<double>(stream.peak_bytes) / static_cast<double>(whole.peak_bytes));
}

inline nlohmann::json to_json(const MemoryEstimate& e) {
  nlohmann::json parts = nlohmann::json::array();
  for (const auto& p : e.activations) parts.push_back({{"name", p.name}, {"bytes", p.bytes}});
  return {{"mode", e.mode == MemoryMode::whole_image ? "whole_image" : "streaming"},
          {"batch", e.batch},
          {"dtype", dtype_name(e.dtype)},
          {"activations", parts},
          {"activation_bytes", e.activation_bytes},
          {"peak_activation_bytes", e.peak_activation_bytes},
          {"parameter_bytes", e.parameter_bytes},
          {"gradient_bytes", e.gradient_bytes},
          {"total_bytes", e.total_bytes},
          {"peak_bytes", e.peak_bytes}};
}

inline void print_memory_table(std::ostream& os, const MemoryEstimate& e) {
  const auto flags = os.flags();
  os << (e.mode == MemoryMode::whole_image ? "whole-image" : "streaming") << " (batch " << e.batch
     << ", " << dtype_name(e.dtype) << ")\n";
  for (const auto& p : e.activations)
    os << "  " << std::left << std::setw(28) << p.name << std::right << std::setw(16) << p.bytes
       << " B\n";
  auto gb = [](std::uint64_t b) { return static_cast<double>(b) / 1e9; };
  os << std::fixed << std::setprecision(3) << "  activations " << gb(e.activation_bytes)
     << " GB, peak activations " << gb(e.peak_activation_bytes) << " GB, parameters "
     << gb(e.parameter_bytes) << " GB, gradients " << gb(e.gradient_bytes) << " GB\n"
     << "  peak " << gb(e.peak_bytes) << " GB\n";
  os.flags(flags);
}

}  // namespace ssgd
