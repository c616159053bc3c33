// Network building blocks: CBR units, UNet levels, location guidance and
// siamese adjustment.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

#include "lgsa/ops.hpp"
#include "lgsa/params.hpp"
#include "lgsa/rng.hpp"

namespace lgsa {

enum class HeadMode { Central, Multi };
enum class LgGate { Softmax, Sigmoid };

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <typename T>
struct ConvParams {
  Tensor<T> weight;
  Tensor<T> bias;
  std::size_t k = 3;
};

template <typename T>
struct CbrParams {
  ConvParams<T> conv;
  Tensor<T> gamma, beta, running_mean, running_var;
};

template <typename T>
struct DoubleCbrParams {
  CbrParams<T> first, second;
};

template <typename T>
struct DecoderParams {
  ConvParams<T> up;  // 3x3 after bilinear upsampling, halves the channel count
  DoubleCbrParams<T> conv;
};

template <typename T>
struct LgParams {
  ConvParams<T> reduce_loc;  // 1x1, loc channels -> 1
  ConvParams<T> fuse;        // 1x1, 3 -> 1
};

template <typename T>
struct SaParams {
  CbrParams<T> edge, central, fuse;  // each 2C -> C
  HeadMode head_mode = HeadMode::Central;
  std::size_t channels = 0;
};

/// Registers a conv with He-normal weights (std = sqrt(2 / fan_in)) and zero
/// bias. Each weight draws from a stream keyed by (seed, name).
template <typename T>
ConvParams<T> make_conv(ParamStore<T>& store, const std::string& name, std::size_t cin,
                        std::size_t cout, std::size_t k, std::uint64_t seed) {
  ConvParams<T> p;
  p.k = k;
  p.weight = store.add(name + ".weight", {cout, cin, k, k});
  p.bias = store.add(name + ".bias", {cout});
  CounterRng rng(derive_stream(seed, fnv1a(name)));
  const double std = std::sqrt(2.0 / static_cast<double>(cin * k * k));
  for (auto& w : p.weight.values()) w = static_cast<T>(std * rng.normal());
  return p;
}

template <typename T>
CbrParams<T> make_cbr(ParamStore<T>& store, const std::string& name, std::size_t cin,
                      std::size_t cout, std::uint64_t seed) {
  CbrParams<T> p;
  p.conv = make_conv(store, name + ".conv", cin, cout, 3, seed);
  p.gamma = store.add(name + ".bn.gamma", {cout}, true, T(1));
  p.beta = store.add(name + ".bn.beta", {cout});
  p.running_mean = store.add(name + ".bn.running_mean", {cout}, false);
  p.running_var = store.add(name + ".bn.running_var", {cout}, false, T(1));
  return p;
}

template <typename T>
DoubleCbrParams<T> make_double_cbr(ParamStore<T>& store, const std::string& name,
                                   std::size_t cin, std::size_t cout, std::uint64_t seed) {
  return {make_cbr(store, name + ".cbr1", cin, cout, seed),
          make_cbr(store, name + ".cbr2", cout, cout, seed)};
}

/// Decoder level that receives `cin` channels from below and a skip of
/// `cout` channels.
template <typename T>
DecoderParams<T> make_decoder(ParamStore<T>& store, const std::string& name, std::size_t cin,
                              std::size_t cout, std::uint64_t seed) {
  return {make_conv(store, name + ".up", cin, cout, 3, seed),
          make_double_cbr(store, name, 2 * cout, cout, seed)};
}

template <typename T>
LgParams<T> make_lg(ParamStore<T>& store, const std::string& name, std::size_t loc_channels,
                    std::uint64_t seed) {
  return {make_conv(store, name + ".reduce", loc_channels, 1, 1, seed),
          make_conv(store, name + ".fuse", 3, 1, 1, seed)};
}

template <typename T>
SaParams<T> make_sa(ParamStore<T>& store, const std::string& name, std::size_t channels,
                    HeadMode mode, std::uint64_t seed) {
  SaParams<T> p;
  p.edge = make_cbr(store, name + ".edge", 2 * channels, channels, seed);
  p.central = make_cbr(store, name + ".central", 2 * channels, channels, seed);
  p.fuse = make_cbr(store, name + ".fuse", 2 * channels, channels, seed);
  p.head_mode = mode;
  p.channels = channels;
  return p;
}

template <typename T>
Tensor<T> conv(const Tensor<T>& x, const ConvParams<T>& p) {
  return conv2d(x, p.weight, p.bias, p.k, p.k == 3 ? 1 : 0);
}

/// relu(batchnorm(conv3x3(x))).
template <typename T>
Tensor<T> cbr(const Tensor<T>& x, CbrParams<T>& p, Mode mode) {
  auto y = conv(x, p.conv);
  y = batchnorm2d(y, p.gamma, p.beta, p.running_mean, p.running_var, mode);
  return relu(y);
}

template <typename T>
Tensor<T> double_cbr(const Tensor<T>& x, DoubleCbrParams<T>& p, Mode mode) {
  return cbr(cbr(x, p.first, mode), p.second, mode);
}

template <typename T>
struct EncoderOutput {
  Tensor<T> skip;  // pre-pool feature
  Tensor<T> down;  // max-pooled feature
};

template <typename T>
EncoderOutput<T> encoder_level(const Tensor<T>& x, DoubleCbrParams<T>& p, Mode mode) {
  auto skip = double_cbr(x, p, mode);
  auto down = pool2(skip, PoolKind::Max);
  return {skip, down};
}

/// Bilinear x2, 3x3 conv, concat with skip, double CBR.
template <typename T>
Tensor<T> decoder_level(const Tensor<T>& x, const Tensor<T>& skip, DecoderParams<T>& p,
                        Mode mode) {
  auto up = conv(upsample_bilinear2(x), p.up);
  if (up.dim(2) != skip.dim(2) || up.dim(3) != skip.dim(3)) {
    throw ShapeError("decoder_level: upsampled " + shape_str(up.shape()) +
                     " does not align with skip " + shape_str(skip.shape()));
  }
  return double_cbr(concat_channels<T>({up, skip}), p.conv, mode);
}

/// The spatial attention map: 1x1 fusion of the channel max, channel mean
/// and a 1x1 reduction of the localization feature.
template <typename T>
Tensor<T> lg_attention_map(const Tensor<T>& feature, const Tensor<T>& loc, const LgParams<T>& p) {
  if (feature.dim(0) != loc.dim(0) || feature.dim(2) != loc.dim(2) ||
      feature.dim(3) != loc.dim(3)) {
    throw ShapeError("lg_block: localization map " + shape_str(loc.shape()) +
                     " is not spatially aligned with encoder feature " +
                     shape_str(feature.shape()));
  }
  auto descriptors = concat_channels<T>({channel_reduce(feature, PoolKind::Max),
                                         channel_reduce(feature, PoolKind::Avg),
                                         conv(loc, p.reduce_loc)});
  return conv(descriptors, p.fuse);
}

/// feature * gate(attention) + feature, the one-channel gate broadcast over
/// channels. The default gate is a softmax over all spatial positions.
template <typename T>
Tensor<T> lg_block(const Tensor<T>& feature, const Tensor<T>& loc, const LgParams<T>& p,
                   LgGate gate = LgGate::Softmax) {
  auto map = lg_attention_map(feature, loc, p);
  auto g = gate == LgGate::Softmax ? spatial_softmax(map) : sigmoid(map);
  return add(mul_channel_broadcast(feature, g), feature);
}

template <typename T>
struct SaResult {
  std::array<Tensor<T>, 3> adjusted;
  Tensor<T> edge_input;     // concat(prev - cur, cur - next)
  Tensor<T> central_input;  // concat(prev * cur, cur * next)
};

namespace detail {

template <typename T>
SaResult<T> sa_core(const Tensor<T>& prev, const Tensor<T>& cur, const Tensor<T>& next,
                    SaParams<T>& p, Mode mode) {
  SaResult<T> r;
  r.edge_input = concat_channels<T>({sub(prev, cur), sub(cur, next)});
  r.central_input = concat_channels<T>({mul(prev, cur), mul(cur, next)});
  auto edge = cbr(r.edge_input, p.edge, mode);
  auto central = cbr(r.central_input, p.central, mode);
  r.adjusted[1] = cbr(concat_channels<T>({central, edge}), p.fuse, mode);
  return r;
}

}  // namespace detail

/// Cross-slice adjustment. Central head adjusts only the middle slice and
/// passes the neighbours through unchanged. Multi head adjusts every slice
/// from its own (prev, cur, next) pattern, a border slice standing in for
/// its missing neighbour.
template <typename T>
SaResult<T> sa_block(const Tensor<T>& f1, const Tensor<T>& f2, const Tensor<T>& f3,
                     SaParams<T>& p, Mode mode) {
  detail::require_same(f1.shape(), f2.shape(), "sa_block");
  detail::require_same(f2.shape(), f3.shape(), "sa_block");
  if (f1.dim(1) != p.channels) {
    throw ShapeError("sa_block: feature channels " + std::to_string(f1.dim(1)) +
                     " do not match block width " + std::to_string(p.channels));
  }
  if (p.head_mode == HeadMode::Central) {
    auto r = detail::sa_core(f1, f2, f3, p, mode);
    r.adjusted[0] = f1;
    r.adjusted[2] = f3;
    return r;
  }
  const std::size_t B = f1.dim(0);
  auto r = detail::sa_core(concat_batch<T>({f1, f1, f2}), concat_batch<T>({f1, f2, f3}),
                           concat_batch<T>({f2, f3, f3}), p, mode);
  auto stacked = r.adjusted[1];
  for (std::size_t i = 0; i < 3; ++i) r.adjusted[i] = slice_batch(stacked, i * B, B);
  return r;
}

}  // namespace lgsa
