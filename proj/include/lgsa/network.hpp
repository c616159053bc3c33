// The siamese two-stage segmentation network and its structural baselines.
//
// All three slices of a triplet run through one set of stage parameters: the
// slices are stacked along the batch axis ([S1; S2; S3], each of batch B) and
// split again wherever the siamese adjustment needs per-slice features.
#pragma once

#include <array>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "lgsa/blocks.hpp"
#include "lgsa/config.hpp"

namespace lgsa {

enum class Stage { Coarse, Fine };

inline std::string to_string(Stage s) { return s == Stage::Coarse ? "coarse" : "fine"; }

template <typename T>
struct UNetParams {
  std::vector<DoubleCbrParams<T>> enc;  // enc[h-1] for levels h = 1..N
  std::vector<DecoderParams<T>> dec;    // dec[h-1] produces level h, h = 1..N-1
  ConvParams<T> head;
  std::size_t levels = 0;
};

/// Registers a UNet under `enc.<stage>.<h>`, `dec.<stage>.<h>`, `head.<stage>`.
template <typename T>
UNetParams<T> make_unet(ParamStore<T>& store, const std::string& stage, std::size_t in_channels,
                        const NetConfig& cfg, std::uint64_t seed) {
  UNetParams<T> u;
  u.levels = cfg.levels;
  for (std::size_t h = 1; h <= cfg.levels; ++h) {
    const std::size_t cin = h == 1 ? in_channels : cfg.width(h - 1);
    u.enc.push_back(make_double_cbr(store, "enc." + stage + "." + std::to_string(h), cin, cfg.width(h), seed));
  }
  for (std::size_t h = 1; h < cfg.levels; ++h) {
    u.dec.push_back(make_decoder(store, "dec." + stage + "." + std::to_string(h), cfg.width(h + 1),
                                 cfg.width(h), seed));
  }
  u.head = make_conv(store, "head." + stage, cfg.width(1), cfg.num_classes, 1, seed);
  return u;
}

/// Optional per-level rewrites applied inside unet_forward.
template <typename T>
struct UNetHooks {
  // Replaces the encoder feature of level h before it is used as skip and
  // pooled for level h+1.
  std::function<Tensor<T>(std::size_t, const Tensor<T>&)> after_encoder;
  // Replaces the decoder output at level h (h = N for the bottleneck).
  std::function<Tensor<T>(std::size_t, const Tensor<T>&)> after_decoder;
};

template <typename T>
Tensor<T> unet_forward(UNetParams<T>& u, const Tensor<T>& x, Mode mode,
                       const UNetHooks<T>& hooks = {}) {
  std::vector<Tensor<T>> skips(u.levels + 1);
  Tensor<T> feat = x;
  for (std::size_t h = 1; h <= u.levels; ++h) {
    if (h > 1) feat = pool2(feat, PoolKind::Max);
    feat = double_cbr(feat, u.enc[h - 1], mode);
    if (hooks.after_encoder) feat = hooks.after_encoder(h, feat);
    skips[h] = feat;
  }
  if (hooks.after_decoder) feat = hooks.after_decoder(u.levels, feat);
  for (std::size_t h = u.levels - 1; h >= 1; --h) {
    feat = decoder_level(feat, skips[h], u.dec[h - 1], mode);
    if (hooks.after_decoder) feat = hooks.after_decoder(h, feat);
  }
  return conv(feat, u.head);
}

template <typename T>
struct StageOutputs {
  std::array<Tensor<T>, 3> coarse_logits;  // undefined for single-stage baselines
  std::array<Tensor<T>, 3> fine_logits;    // baselines fill only fine_logits[1]
  std::vector<Tensor<T>> loc_stacked;      // loc_stacked[h], batch 3B, h = 1..N
  std::size_t batch = 0;

  /// L_i^h for slice i in {0,1,2} and level h in 1..N.
  Tensor<T> loc_map(std::size_t slice, std::size_t level) const {
    return slice_batch(loc_stacked.at(level), slice * batch, batch);
  }
};

struct ArchDescriptor {
  std::string arch;
  std::size_t stages = 0;
  std::size_t downsamplings_per_stage = 0;
  std::vector<std::size_t> level_widths;
  std::vector<std::string> sa_positions;  // "<stage>.<level>"
  std::vector<std::size_t> lg_levels;
  std::size_t trainable_parameters = 0;

  std::string to_text(const NetConfig& cfg) const {
    KeyValues kv = to_kv(cfg);
    kv["stages"] = std::to_string(stages);
    kv["downsamplings_per_stage"] = std::to_string(downsamplings_per_stage);
    kv["trainable_parameters"] = std::to_string(trainable_parameters);
    std::string w, s, l;
    for (auto v : level_widths) w += (w.empty() ? "" : ",") + std::to_string(v);
    for (const auto& v : sa_positions) s += (s.empty() ? "" : ",") + v;
    for (auto v : lg_levels) l += (l.empty() ? "" : ",") + std::to_string(v);
    kv["level_widths"] = w;
    kv["sa_positions"] = s.empty() ? "none" : s;
    kv["lg_levels"] = l.empty() ? "none" : l;
    return format_kv(kv);
  }
};

/// SA positions in enabling order: deepest decoder level first, fine stage
/// before coarse at each level.
inline std::vector<std::pair<Stage, std::size_t>> sa_placement(const NetConfig& cfg) {
  std::vector<std::pair<Stage, std::size_t>> order;
  for (std::size_t h = cfg.levels - 1; h >= 1; --h) {
    order.emplace_back(Stage::Fine, h);
    order.emplace_back(Stage::Coarse, h);
  }
  order.resize(cfg.resolved_sa_count());
  return order;
}

class InputRangeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

template <typename T>
class LgsaNet {
 public:
  LgsaNet(NetConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)), seed_(seed) {
    cfg_.validate();
    build();
  }

  const NetConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }
  const ArchDescriptor& descriptor() const { return desc_; }
  std::string descriptor_text() const {
    auto kv = parse_kv(desc_.to_text(cfg_));
    kv["seed"] = std::to_string(seed_);
    return format_kv(kv);
  }
  std::uint64_t seed() const { return seed_; }

  UNetParams<T>& stage_unet(Stage s) { return s == Stage::Coarse ? coarse_ : fine_; }
  std::optional<LgParams<T>>& lg(std::size_t level) { return lg_.at(level); }
  SaParams<T>* sa(Stage s, std::size_t level) {
    auto& m = s == Stage::Coarse ? coarse_sa_ : fine_sa_;
    auto it = m.find(level);
    return it == m.end() ? nullptr : &it->second;
  }
  bool has_coarse_stage() const { return cfg_.arch == Arch::Lgsa || cfg_.arch == Arch::Concat2Stage; }

  /// Runs the network on three [B,1,H,W] slices. In checked mode inputs
  /// outside [0,1] (beyond 1e-6) are rejected.
  StageOutputs<T> forward(const std::array<Tensor<T>, 3>& slices, Mode mode, bool checked = false) {
    for (const auto& s : slices) {
      if (s.rank() != 4 || s.dim(1) != 1 || s.dim(2) != cfg_.input_size || s.dim(3) != cfg_.input_size) {
        throw ShapeError("forward: expected slices of shape [B,1," + std::to_string(cfg_.input_size) + "," +
                         std::to_string(cfg_.input_size) + "], got " + shape_str(s.shape()));
      }
      detail::require_same(s.shape(), slices[0].shape(), "forward");
      if (checked) {
        for (T v : s.data())
          if (!(v >= T(-1e-6) && v <= T(1) + T(1e-6))) {
            throw InputRangeError("forward: input value " + std::to_string(static_cast<double>(v)) +
                                  " outside [0,1]; normalize the volume first");
          }
      }
    }
    switch (cfg_.arch) {
      case Arch::Lgsa:
      case Arch::Concat2Stage: return forward_two_stage(slices, mode);
      case Arch::Stacked3: return forward_stacked(slices, mode);
      case Arch::MultiEncoder: return forward_multi_encoder(slices, mode);
    }
    throw std::logic_error("unknown arch");
  }

 private:
  void build() {
    const std::size_t N = cfg_.levels;
    lg_.assign(N + 1, std::nullopt);
    desc_.arch = to_string(cfg_.arch);
    desc_.downsamplings_per_stage = N - 1;
    for (std::size_t h = 1; h <= N; ++h) desc_.level_widths.push_back(cfg_.width(h));

    switch (cfg_.arch) {
      case Arch::Lgsa:
      case Arch::Concat2Stage: {
        desc_.stages = 2;
        coarse_ = make_unet(params_, "coarse", 1, cfg_, seed_);
        const std::size_t fine_in = cfg_.arch == Arch::Concat2Stage ? 1 + cfg_.num_classes : 1;
        fine_ = make_unet(params_, "fine", fine_in, cfg_, seed_);
        if (cfg_.arch == Arch::Lgsa) {
          for (std::size_t h = 1; h <= N; ++h) {
            if (!cfg_.lg_on(h)) continue;
            const std::size_t loc_ch = cfg_.loc_source == LocSource::Features ? cfg_.width(h) : cfg_.num_classes;
            lg_[h] = make_lg(params_, "lg.fine." + std::to_string(h), loc_ch, seed_);
            desc_.lg_levels.push_back(h);
          }
          for (auto [stage, h] : sa_placement(cfg_)) {
            auto& m = stage == Stage::Coarse ? coarse_sa_ : fine_sa_;
            m.emplace(h, make_sa(params_, "sa." + to_string(stage) + "." + std::to_string(h), cfg_.width(h),
                                 cfg_.head_mode, seed_));
            desc_.sa_positions.push_back(to_string(stage) + "." + std::to_string(h));
          }
        }
        break;
      }
      case Arch::Stacked3:
        desc_.stages = 1;
        fine_ = make_unet(params_, "fine", 3, cfg_, seed_);
        break;
      case Arch::MultiEncoder: {
        desc_.stages = 1;
        // Decoder and head only; encoders are per branch below.
        fine_.levels = N;
        for (std::size_t b = 0; b < 3; ++b) {
          for (std::size_t h = 1; h <= N; ++h) {
            const std::size_t cin = h == 1 ? 1 : cfg_.width(h - 1);
            branch_enc_[b].push_back(make_double_cbr(
                params_, "enc.branch" + std::to_string(b + 1) + "." + std::to_string(h), cin, cfg_.width(h), seed_));
          }
        }
        for (std::size_t h = 1; h <= N; ++h) {
          branch_fuse_.push_back(
              make_conv(params_, "fuse." + std::to_string(h), 3 * cfg_.width(h), cfg_.width(h), 1, seed_));
        }
        for (std::size_t h = 1; h < N; ++h) {
          fine_.dec.push_back(make_decoder(params_, "dec.fine." + std::to_string(h), cfg_.width(h + 1),
                                           cfg_.width(h), seed_));
        }
        fine_.head = make_conv(params_, "head.fine", cfg_.width(1), cfg_.num_classes, 1, seed_);
        break;
      }
    }
    desc_.trainable_parameters = params_.trainable_count();
  }

  Tensor<T> apply_sa(SaParams<T>& p, const Tensor<T>& stacked, std::size_t B, Mode mode) {
    auto r = sa_block(slice_batch(stacked, 0, B), slice_batch(stacked, B, B), slice_batch(stacked, 2 * B, B), p, mode);
    return concat_batch<T>({r.adjusted[0], r.adjusted[1], r.adjusted[2]});
  }

  StageOutputs<T> forward_two_stage(const std::array<Tensor<T>, 3>& slices, Mode mode) {
    const std::size_t B = slices[0].dim(0), N = cfg_.levels;
    StageOutputs<T> out;
    out.batch = B;
    out.loc_stacked.assign(N + 1, Tensor<T>{});
    auto x = concat_batch<T>({slices[0], slices[1], slices[2]});

    UNetHooks<T> coarse_hooks;
    coarse_hooks.after_decoder = [&](std::size_t h, const Tensor<T>& f) {
      Tensor<T> g = f;
      if (h < N) {
        if (auto* p = sa(Stage::Coarse, h)) g = apply_sa(*p, f, B, mode);
      }
      out.loc_stacked[h] = g;
      return g;
    };
    auto coarse_logits = unet_forward(coarse_, x, mode, coarse_hooks);

    if (cfg_.loc_source == LocSource::ProbMap) {
      auto prob = sigmoid(coarse_logits);
      out.loc_stacked[1] = prob;
      for (std::size_t h = 2; h <= N; ++h) out.loc_stacked[h] = pool2(out.loc_stacked[h - 1], PoolKind::Avg);
    }

    UNetHooks<T> fine_hooks;
    fine_hooks.after_encoder = [&](std::size_t h, const Tensor<T>& f) {
      if (!lg_[h]) return f;
      return lg_block(f, out.loc_stacked[h], *lg_[h], cfg_.lg_gate);
    };
    fine_hooks.after_decoder = [&](std::size_t h, const Tensor<T>& f) {
      if (h < N) {
        if (auto* p = sa(Stage::Fine, h)) return apply_sa(*p, f, B, mode);
      }
      return f;
    };
    Tensor<T> fine_in = x;
    if (cfg_.arch == Arch::Concat2Stage) fine_in = concat_channels<T>({x, sigmoid(coarse_logits)});
    auto fine_logits = unet_forward(fine_, fine_in, mode, fine_hooks);

    for (std::size_t i = 0; i < 3; ++i) {
      out.coarse_logits[i] = slice_batch(coarse_logits, i * B, B);
      out.fine_logits[i] = slice_batch(fine_logits, i * B, B);
    }
    return out;
  }

  StageOutputs<T> forward_stacked(const std::array<Tensor<T>, 3>& slices, Mode mode) {
    StageOutputs<T> out;
    out.batch = slices[0].dim(0);
    out.fine_logits[1] = unet_forward(fine_, concat_channels<T>({slices[0], slices[1], slices[2]}), mode);
    return out;
  }

  StageOutputs<T> forward_multi_encoder(const std::array<Tensor<T>, 3>& slices, Mode mode) {
    const std::size_t N = cfg_.levels;
    StageOutputs<T> out;
    out.batch = slices[0].dim(0);
    std::array<Tensor<T>, 3> feat = slices;
    std::vector<Tensor<T>> fused(N + 1);
    for (std::size_t h = 1; h <= N; ++h) {
      for (std::size_t b = 0; b < 3; ++b) {
        if (h > 1) feat[b] = pool2(feat[b], PoolKind::Max);
        feat[b] = double_cbr(feat[b], branch_enc_[b][h - 1], mode);
      }
      fused[h] = conv(concat_channels<T>({feat[0], feat[1], feat[2]}), branch_fuse_[h - 1]);
    }
    Tensor<T> d = fused[N];
    for (std::size_t h = N - 1; h >= 1; --h) d = decoder_level(d, fused[h], fine_.dec[h - 1], mode);
    out.fine_logits[1] = conv(d, fine_.head);
    return out;
  }

  NetConfig cfg_;
  std::uint64_t seed_;
  ParamStore<T> params_;
  ArchDescriptor desc_;
  UNetParams<T> coarse_, fine_;
  std::vector<std::optional<LgParams<T>>> lg_;
  std::map<std::size_t, SaParams<T>> coarse_sa_, fine_sa_;
  std::array<std::vector<DoubleCbrParams<T>>, 3> branch_enc_;
  std::vector<ConvParams<T>> branch_fuse_;
};

/// The prediction M2: sigmoid of the fine-stage center-slice logits.
template <typename T>
Tensor<T> select_output(const StageOutputs<T>& out) {
  return sigmoid(out.fine_logits[1]);
}

}  // namespace lgsa
