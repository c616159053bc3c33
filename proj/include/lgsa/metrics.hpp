// Overlap and boundary-distance metrics on binary masks.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace lgsa {

/// Row-major binary mask.
struct Mask {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> bits;

  Mask() = default;
  Mask(std::size_t h, std::size_t w) : height(h), width(w), bits(h * w, 0) {}

  std::uint8_t& operator()(std::size_t y, std::size_t x) { return bits[y * width + x]; }
  std::uint8_t operator()(std::size_t y, std::size_t x) const { return bits[y * width + x]; }
  std::size_t count() const { return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), 1)); }
  bool empty() const { return count() == 0; }
};

/// Thresholds probabilities at 0.5 (p >= 0.5 is foreground).
template <typename T>
Mask threshold(std::span<const T> prob, std::size_t h, std::size_t w, T level = T(0.5)) {
  Mask m(h, w);
  for (std::size_t i = 0; i < h * w; ++i) m.bits[i] = prob[i] >= level ? 1 : 0;
  return m;
}

struct Overlap {
  std::size_t tp = 0, fp = 0, fn = 0;
};

inline Overlap overlap(const Mask& pred, const Mask& gt) {
  if (pred.height != gt.height || pred.width != gt.width) {
    throw std::invalid_argument("mask shapes differ");
  }
  Overlap o;
  for (std::size_t i = 0; i < pred.bits.size(); ++i) {
    const bool p = pred.bits[i], g = gt.bits[i];
    o.tp += p && g;
    o.fp += p && !g;
    o.fn += !p && g;
  }
  return o;
}

/// 2|X n Y| / (|X| + |Y|); 1 when both masks are empty.
inline double dsc_metric(const Mask& pred, const Mask& gt) {
  const auto o = overlap(pred, gt);
  const std::size_t denom = 2 * o.tp + o.fp + o.fn;
  if (denom == 0) return 1.0;
  return 2.0 * static_cast<double>(o.tp) / static_cast<double>(denom);
}

struct Prf1 {
  double precision = 0, recall = 0, f1 = 0;
};

/// Precision, recall and their harmonic mean. Both masks empty scores 1
/// everywhere; an empty denominator otherwise scores 0.
inline Prf1 prf1(const Mask& pred, const Mask& gt) {
  const auto o = overlap(pred, gt);
  if (o.tp + o.fp + o.fn == 0) return {1, 1, 1};
  Prf1 r;
  r.precision = o.tp + o.fp ? static_cast<double>(o.tp) / static_cast<double>(o.tp + o.fp) : 0.0;
  r.recall = o.tp + o.fn ? static_cast<double>(o.tp) / static_cast<double>(o.tp + o.fn) : 0.0;
  r.f1 = r.precision + r.recall > 0 ? 2 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
  return r;
}

struct Spacing {
  double y = 1.0, x = 1.0;
};

/// Foreground pixels with at least one 4-neighbour in the background; the
/// outside of the image counts as background.
inline Mask boundary(const Mask& m) {
  Mask b(m.height, m.width);
  const auto H = static_cast<long>(m.height), W = static_cast<long>(m.width);
  auto bg = [&](long y, long x) { return y < 0 || x < 0 || y >= H || x >= W || !m(y, x); };
  for (long y = 0; y < H; ++y)
    for (long x = 0; x < W; ++x)
      if (m(y, x) && (bg(y - 1, x) || bg(y + 1, x) || bg(y, x - 1) || bg(y, x + 1))) b(y, x) = 1;
  return b;
}

namespace detail {

// Exact 1-D squared distance transform (lower envelope of parabolas) with
// sample spacing `s`: out[q] = min_p (s*(q-p))^2 + f[p].
inline void edt_1d(const std::vector<double>& f, double s, std::vector<double>& out) {
  const std::size_t n = f.size();
  constexpr double inf = std::numeric_limits<double>::infinity();
  out.assign(n, inf);
  std::vector<std::size_t> v;
  std::vector<double> z;
  auto pos = [s](std::size_t q) { return s * static_cast<double>(q); };
  for (std::size_t q = 0; q < n; ++q) {
    if (f[q] == inf) continue;
    if (v.empty()) {
      v.push_back(q);
      z = {-inf, inf};
      continue;
    }
    double cross;
    while (true) {
      const std::size_t p = v.back();
      const double pq = pos(q), pp = pos(p);
      cross = ((f[q] + pq * pq) - (f[p] + pp * pp)) / (2 * pq - 2 * pp);
      if (cross <= z[v.size() - 1]) {
        v.pop_back();
        z.pop_back();
        continue;
      }
      break;
    }
    z.back() = cross;
    v.push_back(q);
    z.push_back(inf);
  }
  if (v.empty()) return;
  std::size_t k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    while (z[k + 1] < pos(q)) ++k;
    const double d = pos(q) - pos(v[k]);
    out[q] = d * d + f[v[k]];
  }
}

// Squared physical distance from every pixel to the nearest set pixel.
inline std::vector<double> squared_distance_to(const Mask& targets, Spacing sp) {
  const std::size_t H = targets.height, W = targets.width;
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> grid(H * W);
  for (std::size_t i = 0; i < H * W; ++i) grid[i] = targets.bits[i] ? 0.0 : inf;
  std::vector<double> f, out;
  f.resize(H);
  for (std::size_t x = 0; x < W; ++x) {
    for (std::size_t y = 0; y < H; ++y) f[y] = grid[y * W + x];
    edt_1d(f, sp.y, out);
    for (std::size_t y = 0; y < H; ++y) grid[y * W + x] = out[y];
  }
  f.resize(W);
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) f[x] = grid[y * W + x];
    edt_1d(f, sp.x, out);
    for (std::size_t x = 0; x < W; ++x) grid[y * W + x] = out[x];
  }
  return grid;
}

}  // namespace detail

/// Linear-interpolation percentile of an unsorted sample, q in [0, 100].
inline double percentile(std::vector<double> v, double q) {
  if (v.empty()) throw std::invalid_argument("percentile of empty sample");
  std::sort(v.begin(), v.end());
  const double pos = q / 100.0 * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

struct Hd95Result {
  double distance = 0;
  bool sentinel = false;  // exactly one mask was empty
};

/// Symmetric 95th-percentile Hausdorff distance between mask boundaries.
/// Both empty gives 0; exactly one empty gives the image diagonal (flagged).
inline Hd95Result hd95(const Mask& pred, const Mask& gt, Spacing sp = {}) {
  if (pred.height != gt.height || pred.width != gt.width) {
    throw std::invalid_argument("mask shapes differ");
  }
  const bool pe = pred.empty(), ge = gt.empty();
  if (pe && ge) return {0.0, false};
  if (pe || ge) {
    const double dy = sp.y * static_cast<double>(pred.height), dx = sp.x * static_cast<double>(pred.width);
    return {std::sqrt(dy * dy + dx * dx), true};
  }
  const Mask bp = boundary(pred), bg = boundary(gt);
  auto directed = [&](const Mask& from, const Mask& to) {
    const auto dist2 = detail::squared_distance_to(to, sp);
    std::vector<double> d;
    for (std::size_t i = 0; i < from.bits.size(); ++i)
      if (from.bits[i]) d.push_back(std::sqrt(dist2[i]));
    return percentile(std::move(d), 95.0);
  };
  return {std::max(directed(bp, bg), directed(bg, bp)), false};
}

struct MetricsRecord {
  std::string volume;
  std::string output = "fine.2";  // <stage>.<slice position 1..3>
  long slice = 0;
  std::size_t cls = 0;
  std::uint64_t seed = 0;
  double dsc = 0, hd95 = 0, f1 = 0, precision = 0, recall = 0;
  std::size_t tp = 0, fp = 0, fn = 0;
  bool empty_flag = false;  // both empty, or HD95 sentinel
};

inline MetricsRecord measure(const Mask& pred, const Mask& gt, Spacing sp = {}) {
  MetricsRecord r;
  const auto o = overlap(pred, gt);
  r.tp = o.tp;
  r.fp = o.fp;
  r.fn = o.fn;
  r.dsc = dsc_metric(pred, gt);
  const auto p = prf1(pred, gt);
  r.precision = p.precision;
  r.recall = p.recall;
  r.f1 = p.f1;
  const auto h = hd95(pred, gt, sp);
  r.hd95 = h.distance;
  r.empty_flag = h.sentinel || (pred.empty() && gt.empty());
  return r;
}

inline const char* kMetricsCsvHeader = "volume,output,slice,class,seed,dsc,hd95,f1,precision,recall,tp,fp,fn,empty_flag";

}  // namespace lgsa
