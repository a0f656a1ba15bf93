#pragma once

// Raw tensor fixture format:
//   "ST4\0" | u8 dtype (0 = single, 1 = double) | u32 n, c, h, w (LE) | data (LE, n-c-h-w order)

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "ssgd/tensor.hpp"

namespace ssgd {

namespace detail {

template <class U>
void put_le(std::vector<std::uint8_t>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <class U>
U get_le(const std::uint8_t* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
  return v;
}

template <class T>
using bits_t = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;

}  // namespace detail

constexpr std::array<std::uint8_t, 4> kSt4Magic{'S', 'T', '4', '\0'};
constexpr std::size_t kSt4HeaderBytes = 4 + 1 + 16;

template <class T>
std::vector<std::uint8_t> encode_st4(const Tensor4<T>& t) {
  std::vector<std::uint8_t> out(kSt4Magic.begin(), kSt4Magic.end());
  out.reserve(kSt4HeaderBytes + t.bytes());
  out.push_back(static_cast<std::uint8_t>(dtype_of<T>()));
  const auto s = t.shape();
  for (int d : {s.n, s.c, s.h, s.w}) detail::put_le(out, static_cast<std::uint32_t>(d));
  for (T v : t.values()) detail::put_le(out, std::bit_cast<detail::bits_t<T>>(v));
  return out;
}

inline DType st4_dtype(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < kSt4HeaderBytes || !std::equal(kSt4Magic.begin(), kSt4Magic.end(), bytes.begin()))
    throw Error("st4: bad magic or truncated header");
  if (bytes[4] > 1) throw Error("st4: unknown dtype code " + std::to_string(bytes[4]));
  return static_cast<DType>(bytes[4]);
}

template <class T>
Tensor4<T> decode_st4(const std::vector<std::uint8_t>& bytes) {
  if (st4_dtype(bytes) != dtype_of<T>()) throw Error("st4: dtype mismatch");
  const std::uint8_t* p = bytes.data() + 5;
  Shape4 s{static_cast<int>(detail::get_le<std::uint32_t>(p)),
           static_cast<int>(detail::get_le<std::uint32_t>(p + 4)),
           static_cast<int>(detail::get_le<std::uint32_t>(p + 8)),
           static_cast<int>(detail::get_le<std::uint32_t>(p + 12))};
  if (bytes.size() != kSt4HeaderBytes + s.size() * sizeof(T))
    throw Error("st4: payload length does not match dims " + to_string(s));
  Tensor4<T> t(s);
  p = bytes.data() + kSt4HeaderBytes;
  for (std::size_t i = 0; i < t.size(); ++i, p += sizeof(T))
    t[i] = std::bit_cast<T>(detail::get_le<detail::bits_t<T>>(p));
  return t;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

template <class T>
void write_st4(const std::filesystem::path& path, const Tensor4<T>& t) {
  const auto bytes = encode_st4(t);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

template <class T>
Tensor4<T> read_st4(const std::filesystem::path& path) {
  return decode_st4<T>(read_file_bytes(path));
}

}  // namespace ssgd
