// Adam with coupled (L2) weight decay.
#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "lgsa/params.hpp"

namespace lgsa {

struct AdamOptions {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

template <typename T>
struct AdamState {
  AdamOptions opt;
  std::uint64_t step = 0;
  std::vector<std::vector<T>> m, v;  // one slot per store entry, empty for buffers
};

class MissingGradient : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
AdamState<T> make_adam(const ParamStore<T>& params, AdamOptions opt = {}) {
  AdamState<T> s;
  s.opt = opt;
  for (const auto& e : params.entries()) {
    s.m.emplace_back(e.trainable ? e.tensor.numel() : 0, T(0));
    s.v.emplace_back(e.trainable ? e.tensor.numel() : 0, T(0));
  }
  return s;
}

/// One bias-corrected Adam update over every trainable entry; the L2 term
/// weight_decay * p is folded into the gradient before the moment update.
/// Gradients are cleared afterwards. A trainable entry without a gradient is
/// an error unless `allow_missing` is set, in which case it is left untouched
/// (parameters the loss cannot reach, e.g. the fine stage when it has weight 0).
template <typename T>
void adam_step(ParamStore<T>& params, AdamState<T>& state, bool allow_missing = false) {
  auto& entries = params.entries();
  if (state.m.size() != entries.size()) throw std::logic_error("Adam state does not match store");
  if (!allow_missing) {
    for (const auto& e : entries)
      if (e.trainable && !e.tensor.has_grad()) {
        throw MissingGradient("no gradient for parameter " + e.name);
      }
  }
  ++state.step;
  const auto& o = state.opt;
  const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < entries.size(); ++k) {
    auto& e = entries[k];
    if (!e.trainable || !e.tensor.has_grad()) continue;
    auto p = e.tensor.data();
    auto g = e.tensor.grad();
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = static_cast<double>(g[i]) + o.weight_decay * p[i];
      m[i] = static_cast<T>(o.beta1 * m[i] + (1 - o.beta1) * gi);
      v[i] = static_cast<T>(o.beta2 * v[i] + (1 - o.beta2) * gi * gi);
      const double mhat = m[i] / c1, vhat = v[i] / c2;
      p[i] = static_cast<T>(p[i] - o.lr * mhat / (std::sqrt(vhat) + o.eps));
    }
  }
  params.zero_grad();
}

}  // namespace lgsa
