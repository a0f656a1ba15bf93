#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

#include "ssgd/network.hpp"
#include "ssgd/tensor.hpp"

namespace ssgd {

/// Portable seeded generator: std::mt19937_64 (its output sequence is fixed
/// by the standard) with hand-rolled conversions, since the standard
/// distributions are implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  int below(int n) { return static_cast<int>(uniform() * n); }

  /// Standard normal via Box-Muller; consumes two uniforms per call.
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  std::mt19937_64 engine_;
};

/// Uniform(-a, a) weights with a = sqrt(6 / fan_in), zero biases. Values are
/// drawn in double and rounded, so single and double runs share one init.
template <class T>
Params<T> init_params(const NetworkSpec& net, int image_size, std::uint64_t seed) {
  Params<T> params = zero_params<T>(net, image_size);
  Rng rng(seed);
  for (auto& p : params) {
    if (p.empty()) continue;
    const auto s = p.weights.shape();
    const int fan_in = s.n == 1 && s.c == 1 ? s.w : s.c * s.h * s.w;
    const double a = std::sqrt(6.0 / fan_in);
    for (auto& v : p.weights.values()) v = static_cast<T>(rng.uniform(-a, a));
  }
  return params;
}

template <class T>
struct SyntheticSample {
  Tensor4<T> image;
  int label = 0;
};

/// Two-blob global-structure task.
///
/// Each image holds two Gaussian blobs (sigma = size / 16) plus N(0, 0.05)
/// pixel noise. Label 1 means both blobs sit in the same left/right half,
/// label 0 means one blob per half, so no single tile decides the label.
/// Labels alternate 1, 0, 1, ... for an exact 50/50 split.
template <class T>
std::vector<SyntheticSample<T>> synth_dataset(std::uint64_t seed, int image_size, int n,
                                              int channels = 1) {
  if (n < 2 || n % 2 != 0) throw Error("synth_dataset: n must be even and >= 2");
  if (image_size < 16) throw Error("synth_dataset: image size must be >= 16");
  if (channels < 1) throw Error("synth_dataset: channels must be >= 1");
  Rng rng(seed);
  const double z = image_size;
  const double sigma = z / 16.0;
  const double margin = 2.0 * sigma;
  std::vector<SyntheticSample<T>> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const int label = i % 2 == 0 ? 1 : 0;
    const int half_a = rng.below(2);
    const int half_b = label == 1 ? half_a : 1 - half_a;
    double by[2], bx[2];
    const int halves[2] = {half_a, half_b};
    for (int b = 0; b < 2; ++b) {
      by[b] = rng.uniform(margin, z - margin);
      bx[b] = halves[b] * z / 2 + rng.uniform(margin, z / 2 - margin);
    }
    Tensor4<T> img(Shape4{1, channels, image_size, image_size});
    for (int y = 0; y < image_size; ++y)
      for (int x = 0; x < image_size; ++x) {
        double v = 0;
        for (int b = 0; b < 2; ++b) {
          const double dy = y - by[b], dx = x - bx[b];
          v += std::exp(-(dy * dy + dx * dx) / (2 * sigma * sigma));
        }
        for (int c = 0; c < channels; ++c)
          img(0, c, y, x) = static_cast<T>(v + 0.05 * rng.normal());
      }
    out.push_back({std::move(img), label});
  }
  return out;
}

/// Uniform(-1, 1) tensor, for tests and fixtures.
template <class T>
Tensor4<T> random_tensor(Shape4 shape, Rng& rng) {
  Tensor4<T> t(shape);
  for (auto& v : t.values()) v = static_cast<T>(rng.uniform(-1.0, 1.0));
  return t;
}

}  // namespace ssgd
