// Independent reference computations shared by the unit tests and the
// acceptance binary. Nothing here calls the library routine it checks.
#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "support.hpp"

namespace lgsa::test {

struct Counts {
  double tp = 0, fp = 0, fn = 0;
};

inline Counts enumerate(const Mask& p, const Mask& g) {
  Counts c;
  for (std::size_t y = 0; y < p.height; ++y)
    for (std::size_t x = 0; x < p.width; ++x) {
      if (p(y, x) && g(y, x)) c.tp += 1;
      if (p(y, x) && !g(y, x)) c.fp += 1;
      if (!p(y, x) && g(y, x)) c.fn += 1;
    }
  return c;
}

inline std::vector<std::pair<double, double>> edge_points(const Mask& m, Spacing sp) {
  std::vector<std::pair<double, double>> pts;
  const long H = static_cast<long>(m.height), W = static_cast<long>(m.width);
  auto fg = [&](long y, long x) { return y >= 0 && x >= 0 && y < H && x < W && m(y, x); };
  for (long y = 0; y < H; ++y)
    for (long x = 0; x < W; ++x)
      if (fg(y, x) && (!fg(y - 1, x) || !fg(y + 1, x) || !fg(y, x - 1) || !fg(y, x + 1)))
        pts.emplace_back(y * sp.y, x * sp.x);
  return pts;
}

inline double q95(std::vector<double> d) {
  std::sort(d.begin(), d.end());
  const double pos = 0.95 * (d.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  const auto hi = std::min(lo + 1, d.size() - 1);
  return d[lo] + (pos - lo) * (d[hi] - d[lo]);
}

// Full distance matrix between the two boundary point sets.
inline double hd95_brute(const Mask& a, const Mask& b, Spacing sp = {}) {
  const auto pa = edge_points(a, sp), pb = edge_points(b, sp);
  std::vector<double> ab(pa.size(), 1e300), ba(pb.size(), 1e300);
  for (std::size_t i = 0; i < pa.size(); ++i)
    for (std::size_t j = 0; j < pb.size(); ++j) {
      const double d = std::hypot(pa[i].first - pb[j].first, pa[i].second - pb[j].second);
      ab[i] = std::min(ab[i], d);
      ba[j] = std::min(ba[j], d);
    }
  return std::max(q95(ab), q95(ba));
}

inline double bce_oracle(const std::vector<double>& x, const std::vector<double>& y) {
  double s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double p = 1 / (1 + std::exp(-x[i]));
    s += -(y[i] * std::log(p) + (1 - y[i]) * std::log(1 - p));
  }
  return s / static_cast<double>(x.size());
}

inline double dice_oracle(const std::vector<double>& p, const std::vector<double>& y, std::size_t maps, double eps) {
  const std::size_t n = p.size() / maps;
  double loss = 0;
  for (std::size_t m = 0; m < maps; ++m) {
    double inter = 0, sp = 0, sy = 0;
    for (std::size_t k = 0; k < n; ++k) {
      inter += p[m * n + k] * y[m * n + k];
      sp += p[m * n + k];
      sy += y[m * n + k];
    }
    loss += 1 - (2 * inter + eps) / (sp + sy + eps);
  }
  return loss / static_cast<double>(maps);
}

// 0.5 * BCE + Dice of one logit map against its mask.
inline double slice_loss_oracle(const Tensor<double>& logits, const Tensor<double>& gt) {
  std::vector<double> p;
  for (double v : logits.data()) p.push_back(1 / (1 + std::exp(-v)));
  return 0.5 * bce_oracle(logits.values(), gt.values()) + dice_oracle(p, gt.values(), logits.dim(0) * logits.dim(1), 1.0);
}

inline Tensor<double> binary_tensor(std::mt19937_64& gen, Shape s, double p = 0.4) {
  std::bernoulli_distribution d(p);
  std::vector<double> v(shape_numel(s));
  for (auto& x : v) x = d(gen);
  return Tensor<double>::from(std::move(s), std::move(v));
}

inline std::array<Tensor<double>, 3> random_slices(std::mt19937_64& gen, std::size_t B, std::size_t S) {
  std::array<Tensor<double>, 3> x;
  for (auto& t : x) t = random_tensor(gen, {B, 1, S, S}, 0, 1);
  return x;
}

inline std::array<Tensor<double>, 3> random_masks(std::mt19937_64& gen, std::size_t B, std::size_t C, std::size_t S) {
  std::array<Tensor<double>, 3> y;
  for (auto& t : y) t = binary_tensor(gen, {B, C, S, S}, 0.3);
  return y;
}

/// Trainable gradients by name; clears them afterwards.
inline std::map<std::string, std::vector<double>> grads(LgsaNet<double>& net) {
  std::map<std::string, std::vector<double>> g;
  for (auto& e : net.params().entries()) {
    if (!e.trainable) continue;
    std::vector<double> v(e.tensor.numel(), 0.0);
    if (e.tensor.has_grad()) std::copy(e.tensor.grad().begin(), e.tensor.grad().end(), v.begin());
    g[e.name] = std::move(v);
  }
  net.params().zero_grad();
  return g;
}

/// Largest absolute difference between the gradient of the full loss and the
/// sum of the gradients of the three per-branch losses, each built by hand.
inline double siamese_gap(LgsaNet<double>& net, const std::array<Tensor<double>, 3>& x,
                          const std::array<Tensor<double>, 3>& y, const LossWeights& w) {
  net.params().zero_grad();
  total_loss(net.forward(x, Mode::Train), y, w).total.backward();
  const auto full = grads(net);
  const double a = w.alpha, b = w.beta;
  const std::array<double, 3> sw{a, 1 - 2 * a, a};
  std::map<std::string, std::vector<double>> summed;
  for (std::size_t i = 0; i < 3; ++i) {
    const auto out = net.forward(x, Mode::Train);
    weighted_sum<double>({slice_loss(out.coarse_logits[i], y[i], w), slice_loss(out.fine_logits[i], y[i], w)},
                         {b * sw[i], (1 - b) * sw[i]})
        .backward();
    for (auto& [name, g] : grads(net)) {
      auto& s = summed[name];
      s.resize(g.size(), 0.0);
      for (std::size_t k = 0; k < g.size(); ++k) s[k] += g[k];
    }
  }
  double worst = 0;
  for (const auto& [name, g] : full)
    for (std::size_t k = 0; k < g.size(); ++k) worst = std::max(worst, std::abs(g[k] - summed[name][k]));
  return worst;
}

}  // namespace lgsa::test
