#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

namespace ssgd {

// Error hierarchy. Everything the engine throws derives from ssgd::Error.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct NonFiniteError : Error {
  using Error::Error;
};
struct PlanError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <class T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                "only float and double tensors are supported");
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

constexpr std::size_t dtype_bytes(DType d) { return d == DType::f32 ? 4 : 8; }

inline std::string_view dtype_name(DType d) {
  return d == DType::f32 ? "single" : "double";
}

struct Shape4 {
  int n = 0, c = 0, h = 0, w = 0;

  std::size_t size() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  friend bool operator==(const Shape4&, const Shape4&) = default;
};

inline std::string to_string(const Shape4& s) {
  std::ostringstream os;
  os << s.n << 'x' << s.c << 'x' << s.h << 'x' << s.w;
  return os.str();
}

/// Half-open pixel rectangle [y0,y1) x [x0,x1).
///
/// A default-constructed region is empty. Regions are plain values; the map
/// they index is tracked by whoever holds them.
struct Region {
  int y0 = 0, x0 = 0, y1 = 0, x1 = 0;

  int height() const { return y1 - y0; }
  int width() const { return x1 - x0; }
  bool empty() const { return y1 <= y0 || x1 <= x0; }
  std::int64_t area() const {
    return empty() ? 0 : static_cast<std::int64_t>(height()) * width();
  }
  bool contains(int y, int x) const {
    return y >= y0 && y < y1 && x >= x0 && x < x1;
  }
  bool contains(const Region& o) const {
    return o.empty() ||
           (o.y0 >= y0 && o.y1 <= y1 && o.x0 >= x0 && o.x1 <= x1);
  }
  friend bool operator==(const Region&, const Region&) = default;

  static Region square(int size) { return {0, 0, size, size}; }
};

inline Region intersect(const Region& a, const Region& b) {
  Region r{std::max(a.y0, b.y0), std::max(a.x0, b.x0), std::min(a.y1, b.y1),
           std::min(a.x1, b.x1)};
  return r.empty() ? Region{} : r;
}

/// Bounding box of two regions; an empty operand is ignored.
inline Region hull(const Region& a, const Region& b) {
  if (a.empty()) return b;
  if (b.empty()) return a;
  return {std::min(a.y0, b.y0), std::min(a.x0, b.x0), std::max(a.y1, b.y1),
          std::max(a.x1, b.x1)};
}

inline std::string to_string(const Region& r) {
  std::ostringstream os;
  os << '[' << r.y0 << ',' << r.x0 << ',' << r.y1 << ',' << r.x1 << ')';
  return os.str();
}

/// Dense rank-4 array in row-major (n, c, h, w) order.
template <class T>
class Tensor4 {
 public:
  using value_type = T;

  Tensor4() = default;
  explicit Tensor4(Shape4 shape, T fill = T(0))
      : shape_(shape), data_(shape.size(), fill) {
    if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0)
      throw ShapeError("negative tensor dimension " + to_string(shape));
  }
  Tensor4(Shape4 shape, std::vector<T> data)
      : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.size())
      throw ShapeError("data length " + std::to_string(data_.size()) +
                       " does not match shape " + to_string(shape_));
  }

  const Shape4& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  std::size_t bytes() const { return data_.size() * sizeof(T); }
  bool empty() const { return data_.empty(); }

  std::size_t offset(int n, int c, int y, int x) const {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + y) *
               shape_.w +
           x;
  }
  T& operator()(int n, int c, int y, int x) { return data_[offset(n, c, y, x)]; }
  const T& operator()(int n, int c, int y, int x) const {
    return data_[offset(n, c, y, x)];
  }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T* row(int n, int c, int y) { return data_.data() + offset(n, c, y, 0); }
  const T* row(int n, int c, int y) const {
    return data_.data() + offset(n, c, y, 0);
  }

  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  const std::vector<T>& storage() const { return data_; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <class U>
  Tensor4<U> cast() const {
    Tensor4<U> out(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

  friend bool operator==(const Tensor4&, const Tensor4&) = default;

 private:
  Shape4 shape_{};
  std::vector<T> data_;
};

/// Throws NonFiniteError naming `what` if any scalar is NaN or infinite.
template <class T>
void check_finite(std::span<const T> values, std::string_view what) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      std::ostringstream os;
      os << "non-finite value " << values[i] << " in " << what << " at flat index "
         << i;
      throw NonFiniteError(os.str());
    }
  }
}

template <class T>
void check_finite(const Tensor4<T>& t, std::string_view what) {
  check_finite(t.values(), what);
}

/// A tensor holding a rectangular window of a larger (map_h x map_w) map.
///
/// Kernels address windows in map coordinates, so a tile and the whole map
/// run the exact same arithmetic for every pixel they both cover.
template <class T>
struct Window {
  Tensor4<T> data;
  Region region;
  int map_h = 0;
  int map_w = 0;

  static Window whole(Tensor4<T> t) {
    const auto s = t.shape();
    return Window{std::move(t), Region{0, 0, s.h, s.w}, s.h, s.w};
  }

  Region map() const { return Region{0, 0, map_h, map_w}; }
  int channels() const { return data.shape().c; }
  int batch() const { return data.shape().n; }

  const T& at(int n, int c, int gy, int gx) const {
    return data(n, c, gy - region.y0, gx - region.x0);
  }
  T& at(int n, int c, int gy, int gx) {
    return data(n, c, gy - region.y0, gx - region.x0);
  }
};

/// Copies `region` (map coordinates) out of a window that covers it.
template <class T>
Window<T> crop(const Window<T>& src, const Region& region) {
  if (!src.region.contains(region))
    throw ShapeError("crop " + to_string(region) + " outside window " +
                     to_string(src.region));
  const auto s = src.data.shape();
  Window<T> out{Tensor4<T>(Shape4{s.n, s.c, region.height(), region.width()}),
                region, src.map_h, src.map_w};
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = region.y0; y < region.y1; ++y) {
        const T* from = &src.at(n, c, y, region.x0);
        std::copy(from, from + region.width(), &out.at(n, c, y, region.x0));
      }
  return out;
}

/// Writes the part of `src` inside `region` into `dst` (both map-addressed).
template <class T>
void paste(const Window<T>& src, const Region& region, Window<T>& dst) {
  if (!src.region.contains(region) || !dst.region.contains(region))
    throw ShapeError("paste region " + to_string(region) + " not covered");
  if (src.data.shape().c != dst.data.shape().c ||
      src.data.shape().n != dst.data.shape().n)
    throw ShapeError("paste channel/batch mismatch");
  const auto s = src.data.shape();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = region.y0; y < region.y1; ++y) {
        const T* from = &src.at(n, c, y, region.x0);
        std::copy(from, from + region.width(), &dst.at(n, c, y, region.x0));
      }
}

}  // namespace ssgd
