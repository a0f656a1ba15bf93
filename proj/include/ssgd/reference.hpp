#pragma once

// Reference architectures used by the configs, tests and acceptance suite.
//
// vgg13        13-layer VGG-like streaming section (10 conv + 3 maxpool, ReLU
//              not counted as layers), split after the 13th, small dense head.
//              Works at 130x130 (desk scale) and 514x514.
// vgg-64mp     VGG16-like network for 8130x8130 RGB inputs, split after the
//              second pool block; used for memory accounting only.
// synthetic    small net for the two-blob global-structure task at 256x256.

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ssgd/network.hpp"
#include "ssgd/tensor.hpp"

namespace ssgd {

namespace detail {

struct NetBuilder {
  NetworkSpec net;
  int channels;

  explicit NetBuilder(int input_channels) : channels(input_channels) {
    net.input_channels = input_channels;
  }
  NetBuilder& conv(int c_out, int k = 3, int s = 1, int p = 1) {
    net.layers.push_back(LayerSpec::conv(channels, c_out, k, s, p));
    net.layers.push_back(LayerSpec::relu());
    channels = c_out;
    return *this;
  }
  NetBuilder& pool(int k = 2, int s = 2) {
    net.layers.push_back(LayerSpec::maxpool(k, s));
    return *this;
  }
  NetBuilder& split() {
    net.split_index = net.layers.size();
    return *this;
  }
  NetBuilder& dense(int width, bool relu) {
    net.layers.push_back(LayerSpec::dense(width));
    if (relu) net.layers.push_back(LayerSpec::relu());
    return *this;
  }
  NetBuilder& flatten() {
    net.layers.push_back(LayerSpec::flatten());
    return *this;
  }
};

}  // namespace detail

/// conv x2, pool, conv x2, pool, conv x3, pool, conv x3 | pool, dense 16, dense 1.
inline NetworkSpec reference_vgg13(int input_channels = 1) {
  detail::NetBuilder b(input_channels);
  b.conv(4).conv(4).pool();
  b.conv(8).conv(8).pool();
  b.conv(16).conv(16).conv(16).pool();
  b.conv(16).conv(16).conv(16).split();
  b.pool().flatten().dense(16, true).dense(1, false);
  return b.net;
}

/// conv16 x2, pool, conv32 x2, pool, then the split map (32 x 2032 x 2032 at
/// 8130 input); the head carries on VGG16-style with 64-channel convs and
/// pools down to 3 x 3 before a dense 16 / dense 1 classifier.
inline NetworkSpec reference_vgg_64mp(int input_channels = 3) {
  detail::NetBuilder b(input_channels);
  b.conv(16).conv(16).pool();
  b.conv(32).conv(32).pool().split();
  b.conv(64).conv(64).pool();
  b.conv(64).conv(64).pool();
  b.conv(64).pool();
  for (int i = 0; i < 6; ++i) b.pool();
  b.flatten().dense(16, true).dense(1, false);
  return b.net;
}

/// 256 -> pool 128 -> conv 4 -> pool 64 -> conv 8 -> pool 32 -> pool 16 |
/// pool 8 (one cell per quadrant), dense 16, dense 1.
inline NetworkSpec reference_synthetic(int input_channels = 1) {
  detail::NetBuilder b(input_channels);
  b.pool();
  b.conv(4).pool();
  b.conv(8).pool();
  b.pool().split();
  b.pool(8, 8).flatten().dense(16, true).dense(1, false);
  return b.net;
}

inline const std::map<std::string, std::function<NetworkSpec(int)>>& reference_networks() {
  static const std::map<std::string, std::function<NetworkSpec(int)>> nets{
      {"vgg13", reference_vgg13},
      {"vgg-64mp", reference_vgg_64mp},
      {"synthetic", reference_synthetic},
  };
  return nets;
}

inline NetworkSpec reference_network(const std::string& name, int input_channels) {
  const auto& nets = reference_networks();
  const auto it = nets.find(name);
  if (it == nets.end()) {
    std::string known;
    for (const auto& [k, v] : nets) known += (known.empty() ? "" : ", ") + k;
    throw ConfigError("unknown network '" + name + "' (known: " + known + ")");
  }
  return it->second(input_channels);
}

}  // namespace ssgd
