// Central finite-difference checks of every differentiable op and of the
// whole network, in 64-bit arithmetic.
#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "lgsa/blocks.hpp"
#include "lgsa/losses.hpp"
#include "lgsa/network.hpp"
#include "lgsa/rng.hpp"

namespace lgsa {

/// One op under test: `f` maps the inputs to any tensor, which the checker
/// projects onto a fixed random direction to obtain a scalar.
struct OpCase {
  std::string name;
  std::vector<Tensor<double>> inputs;
  std::function<Tensor<double>(const std::vector<Tensor<double>>&)> f;
};

struct GradcheckEntry {
  std::string name;
  double max_rel_error = 0;  // worst normwise relative error over the checked tensors
  double threshold = 0;
  std::size_t coordinates = 0;
  bool passed() const { return max_rel_error < threshold; }
};

struct GradcheckReport {
  std::vector<GradcheckEntry> ops;
  std::vector<GradcheckEntry> groups;  // end-to-end, one per parameter group
  double seconds = 0;

  bool passed() const {
    for (const auto& e : ops)
      if (!e.passed()) return false;
    for (const auto& e : groups)
      if (!e.passed()) return false;
    return true;
  }
  std::vector<std::string> failures() const {
    std::vector<std::string> out;
    for (const auto& e : ops)
      if (!e.passed()) out.push_back(e.name);
    for (const auto& e : groups)
      if (!e.passed()) out.push_back("end-to-end " + e.name);
    return out;
  }
  double end_to_end_max() const {
    double m = 0;
    for (const auto& e : groups) m = std::max(m, e.max_rel_error);
    return m;
  }

  std::string text() const {
    std::ostringstream os;
    os << std::scientific;
    os.precision(3);
    auto line = [&](const GradcheckEntry& e) {
      os << (e.passed() ? "PASS  " : "FAIL  ") << e.name << "  max_rel_err=" << e.max_rel_error
         << "  threshold=" << e.threshold << "  coords=" << e.coordinates << '\n';
    };
    os << "# per-op\n";
    for (const auto& e : ops) line(e);
    os << "# end-to-end\n";
    for (const auto& e : groups) line(e);
    os << (passed() ? "all checks passed" : "gradient check FAILED") << " in " << std::fixed << seconds << " s\n";
    return os.str();
  }
};

/// ||a - n|| / max(||a||, ||n||, floor). The floor keeps tensors whose true
/// gradient vanishes (e.g. a bias ahead of a softmax) from dividing noise by noise.
inline double relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric,
                             double floor = 1e-12) {
  double d = 0, a = 0, n = 0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    d += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    a += analytic[i] * analytic[i];
    n += numeric[i] * numeric[i];
  }
  return std::sqrt(d) / std::max({std::sqrt(a), std::sqrt(n), floor});
}

inline double norm2(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

/// Checks d(sum(f(x) * R))/dx for every input tensor of `c`. Each tensor's
/// error is floored at 1e-3 of the largest gradient norm in the case.
inline GradcheckEntry check_op(const OpCase& c, double h = 1e-5, double threshold = 1e-5, std::uint64_t seed = 11) {
  auto inputs = c.inputs;
  for (auto& t : inputs) t = Tensor<double>::from(t.shape(), t.values(), true);
  Tensor<double> proj;
  auto scalar = [&](const std::vector<Tensor<double>>& in) {
    auto out = c.f(in);
    if (!proj.defined()) {
      CounterRng rng(seed);
      std::vector<double> r(out.numel());
      for (auto& v : r) v = rng.uniform(-1.0, 1.0);
      proj = Tensor<double>::from(out.shape(), std::move(r));
    }
    return sum(mul(out, proj));
  };
  auto loss = scalar(inputs);
  loss.backward();

  GradcheckEntry e{c.name, 0.0, threshold, 0};
  std::vector<std::pair<std::vector<double>, std::vector<double>>> grads;
  NoGradGuard ng;
  for (auto& t : inputs) {
    auto& v = t.values();
    std::vector<double> analytic(v.size(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
    std::vector<double> numeric(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double orig = v[i];
      v[i] = orig + h;
      const double fp = scalar(inputs).item();
      v[i] = orig - h;
      const double fm = scalar(inputs).item();
      v[i] = orig;
      numeric[i] = (fp - fm) / (2 * h);
    }
    e.coordinates += v.size();
    grads.emplace_back(std::move(analytic), std::move(numeric));
  }
  double scale = 0;
  for (const auto& [a, n] : grads) scale = std::max({scale, norm2(a), norm2(n)});
  for (const auto& [a, n] : grads)
    e.max_rel_error = std::max(e.max_rel_error, relative_error(a, n, std::max(1e-3 * scale, 1e-12)));
  return e;
}

namespace detail {

inline Tensor<double> random_tensor(CounterRng& rng, Shape shape, double lo = -1, double hi = 1) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor<double>::from(std::move(shape), std::move(v));
}

// Distinct values at least 0.02 apart, so max selections are stable under
// perturbations of size h.
inline Tensor<double> distinct_tensor(CounterRng& rng, Shape shape) {
  std::vector<std::size_t> perm(shape_numel(shape));
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  shuffle(perm, rng);
  std::vector<double> v(perm.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.05 * static_cast<double>(perm[i]) - 1 + 0.01 * rng.uniform();
  return Tensor<double>::from(std::move(shape), std::move(v));
}

// Values bounded away from zero by 0.05.
inline Tensor<double> off_zero_tensor(CounterRng& rng, Shape shape) {
  auto t = random_tensor(rng, std::move(shape));
  for (auto& x : t.values()) x = x >= 0 ? x + 0.05 : x - 0.05;
  return t;
}

inline Tensor<double> binary_tensor(CounterRng& rng, Shape shape) {
  auto t = random_tensor(rng, std::move(shape), 0, 1);
  for (auto& x : t.values()) x = x > 0.6 ? 1.0 : 0.0;
  return t;
}

}  // namespace detail

/// The standard per-op cases, including the LG and SA blocks with their
/// parameters as checked inputs.
inline std::vector<OpCase> default_op_cases(std::uint64_t seed = 7) {
  using TD = Tensor<double>;
  using detail::random_tensor;
  CounterRng rng(seed);
  std::vector<OpCase> cs;
  cs.push_back({"conv2d.k3",
                {random_tensor(rng, {2, 3, 5, 5}), random_tensor(rng, {4, 3, 3, 3}), random_tensor(rng, {4})},
                [](const std::vector<TD>& in) { return conv2d(in[0], in[1], in[2], 3, 1); }});
  cs.push_back({"conv2d.k1",
                {random_tensor(rng, {2, 3, 4, 4}), random_tensor(rng, {2, 3, 1, 1}), random_tensor(rng, {2})},
                [](const std::vector<TD>& in) { return conv2d(in[0], in[1], in[2], 1, 0); }});
  cs.push_back({"pool2.max", {detail::distinct_tensor(rng, {2, 2, 4, 4})},
                [](const std::vector<TD>& in) { return pool2(in[0], PoolKind::Max); }});
  cs.push_back({"pool2.avg", {random_tensor(rng, {2, 2, 4, 6})},
                [](const std::vector<TD>& in) { return pool2(in[0], PoolKind::Avg); }});
  cs.push_back({"upsample_bilinear2", {random_tensor(rng, {2, 2, 3, 4})},
                [](const std::vector<TD>& in) { return upsample_bilinear2(in[0]); }});
  cs.push_back({"batchnorm2d.train",
                {random_tensor(rng, {3, 2, 3, 3}), random_tensor(rng, {2}, 0.5, 1.5), random_tensor(rng, {2})},
                [](const std::vector<TD>& in) {
                  auto rm = TD::zeros({2}), rv = TD::full({2}, 1.0);
                  return batchnorm2d(in[0], in[1], in[2], rm, rv, Mode::Train);
                }});
  cs.push_back({"batchnorm2d.eval",
                {random_tensor(rng, {3, 2, 3, 3}), random_tensor(rng, {2}, 0.5, 1.5), random_tensor(rng, {2})},
                [](const std::vector<TD>& in) {
                  auto rm = TD::from({2}, {0.1, -0.2}), rv = TD::from({2}, {0.8, 1.3});
                  return batchnorm2d(in[0], in[1], in[2], rm, rv, Mode::Eval);
                }});
  cs.push_back({"relu", {detail::off_zero_tensor(rng, {2, 3, 3, 3})},
                [](const std::vector<TD>& in) { return relu(in[0]); }});
  cs.push_back({"sigmoid", {random_tensor(rng, {2, 3, 3, 3}, -4, 4)},
                [](const std::vector<TD>& in) { return sigmoid(in[0]); }});
  cs.push_back({"spatial_softmax", {random_tensor(rng, {2, 1, 3, 4}, -2, 2)},
                [](const std::vector<TD>& in) { return spatial_softmax(in[0]); }});
  cs.push_back({"channel_reduce.max", {detail::distinct_tensor(rng, {2, 4, 3, 3})},
                [](const std::vector<TD>& in) { return channel_reduce(in[0], PoolKind::Max); }});
  cs.push_back({"channel_reduce.avg", {random_tensor(rng, {2, 4, 3, 3})},
                [](const std::vector<TD>& in) { return channel_reduce(in[0], PoolKind::Avg); }});
  cs.push_back({"add", {random_tensor(rng, {2, 2, 3, 3}), random_tensor(rng, {2, 2, 3, 3})},
                [](const std::vector<TD>& in) { return add(in[0], in[1]); }});
  cs.push_back({"sub", {random_tensor(rng, {2, 2, 3, 3}), random_tensor(rng, {2, 2, 3, 3})},
                [](const std::vector<TD>& in) { return sub(in[0], in[1]); }});
  cs.push_back({"mul", {random_tensor(rng, {2, 2, 3, 3}), random_tensor(rng, {2, 2, 3, 3})},
                [](const std::vector<TD>& in) { return mul(in[0], in[1]); }});
  cs.push_back({"mul_channel_broadcast", {random_tensor(rng, {2, 3, 3, 3}), random_tensor(rng, {2, 1, 3, 3})},
                [](const std::vector<TD>& in) { return mul_channel_broadcast(in[0], in[1]); }});
  cs.push_back({"concat_channels", {random_tensor(rng, {2, 1, 3, 3}), random_tensor(rng, {2, 3, 3, 3})},
                [](const std::vector<TD>& in) { return concat_channels<double>({in[0], in[1], in[0]}); }});
  cs.push_back({"concat_batch", {random_tensor(rng, {1, 2, 3, 3}), random_tensor(rng, {2, 2, 3, 3})},
                [](const std::vector<TD>& in) { return concat_batch<double>({in[0], in[1]}); }});
  cs.push_back({"slice_batch", {random_tensor(rng, {4, 2, 3, 3})},
                [](const std::vector<TD>& in) { return slice_batch(in[0], 1, 2); }});
  cs.push_back({"sum", {random_tensor(rng, {2, 2, 3, 3})}, [](const std::vector<TD>& in) { return sum(in[0]); }});
  cs.push_back({"scale", {random_tensor(rng, {2, 2, 3, 3})},
                [](const std::vector<TD>& in) { return scale(in[0], -1.7); }});
  cs.push_back({"weighted_sum", {random_tensor(rng, {1}), random_tensor(rng, {1}), random_tensor(rng, {1})},
                [](const std::vector<TD>& in) { return weighted_sum<double>({in[0], in[1], in[2]}, {0.2, -1.5, 3.0}); }});
  {
    auto target = detail::binary_tensor(rng, {2, 2, 4, 4});
    cs.push_back({"bce_with_logits", {random_tensor(rng, {2, 2, 4, 4}, -5, 5)},
                  [target](const std::vector<TD>& in) { return bce_with_logits(in[0], target); }});
  }
  {
    auto target = detail::binary_tensor(rng, {2, 2, 4, 4});
    cs.push_back({"soft_dice_loss", {random_tensor(rng, {2, 2, 4, 4}, 0.01, 0.99)},
                  [target](const std::vector<TD>& in) { return soft_dice_loss(in[0], target, 1.0); }});
  }
  for (auto gate : {LgGate::Softmax, LgGate::Sigmoid}) {
    ParamStore<double> store;
    auto p = make_lg(store, "lg", 3, 5);
    cs.push_back({"lg_block." + to_string(gate),
                  {random_tensor(rng, {2, 4, 4, 4}), random_tensor(rng, {2, 3, 4, 4}), p.reduce_loc.weight,
                   p.reduce_loc.bias, p.fuse.weight, p.fuse.bias},
                  [gate](const std::vector<TD>& in) {
                    LgParams<double> q{{in[2], in[3], 1}, {in[4], in[5], 1}};
                    return lg_block(in[0], in[1], q, gate);
                  }});
  }
  for (auto head : {HeadMode::Central, HeadMode::Multi}) {
    ParamStore<double> store;
    const auto p = make_sa(store, "sa", 2, head, 5);
    cs.push_back({"sa_block." + to_string(head),
                  {random_tensor(rng, {2, 2, 4, 4}), random_tensor(rng, {2, 2, 4, 4}), random_tensor(rng, {2, 2, 4, 4}),
                   p.edge.conv.weight, p.central.conv.weight, p.fuse.conv.weight, p.fuse.gamma},
                  [p](const std::vector<TD>& in) {
                    auto q = p;
                    q.edge.conv.weight = in[3];
                    q.central.conv.weight = in[4];
                    q.fuse.conv.weight = in[5];
                    q.fuse.gamma = in[6];
                    auto r = sa_block(in[0], in[1], in[2], q, Mode::Train);
                    return concat_batch<double>({r.adjusted[0], r.adjusted[1], r.adjusted[2]});
                  }});
  }
  return cs;
}

/// Parameter group of a store entry: its first two name components.
inline std::string param_group(const std::string& name) {
  const auto a = name.find('.');
  if (a == std::string::npos) return name;
  const auto b = name.find('.', a + 1);
  return name.substr(0, b);
}

struct EndToEndOptions {
  NetConfig net;
  std::size_t batch = 2;
  std::size_t coords_per_tensor = 0;  // 0: every coordinate
  double h = 1e-4;
  double threshold = 1e-3;
  std::uint64_t seed = 3;
};

inline EndToEndOptions tiny_end_to_end() {
  EndToEndOptions o;
  o.net.levels = 3;
  o.net.base_channels = 4;
  o.net.input_size = 16;
  return o;
}

/// Finite differences of the full six-output loss with respect to every
/// trainable parameter (optionally a deterministic subset) and the inputs.
inline std::vector<GradcheckEntry> check_end_to_end(const EndToEndOptions& o) {
  LgsaNet<double> net(o.net, o.seed);
  CounterRng rng(derive_stream(o.seed, 99));
  const std::size_t S = o.net.input_size, B = o.batch, C = o.net.num_classes;
  std::array<Tensor<double>, 3> xs, ys;
  for (std::size_t i = 0; i < 3; ++i) {
    xs[i] = detail::random_tensor(rng, {B, 1, S, S}, 0, 1);
    xs[i] = Tensor<double>::from(xs[i].shape(), xs[i].values(), true);
    ys[i] = detail::binary_tensor(rng, {B, C, S, S});
  }
  const LossWeights w{};
  auto eval = [&] { return total_loss(net.forward(xs, Mode::Train), ys, w).total; };
  eval().backward();

  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> groups;
  std::map<std::string, std::size_t> counts;
  NoGradGuard ng;
  auto probe = [&](const std::string& group, Tensor<double>& t) {
    auto& v = t.values();
    std::vector<double> grad(v.size(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), grad.begin());
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (o.coords_per_tensor && idx.size() > o.coords_per_tensor) {
      CounterRng pick(derive_stream(o.seed, fnv1a(group) ^ v.size()));
      shuffle(idx, pick);
      idx.resize(o.coords_per_tensor);
    }
    auto& [a, n] = groups[group];
    for (auto i : idx) {
      const double orig = v[i];
      v[i] = orig + o.h;
      const double fp = eval().item();
      v[i] = orig - o.h;
      const double fm = eval().item();
      v[i] = orig;
      a.push_back(grad[i]);
      n.push_back((fp - fm) / (2 * o.h));
    }
    counts[group] += idx.size();
  };
  for (auto& e : net.params().entries())
    if (e.trainable) probe(param_group(e.name), e.tensor);
  for (auto& x : xs) probe("input", x);

  std::vector<GradcheckEntry> out;
  for (auto& [name, an] : groups)
    out.push_back({name, relative_error(an.first, an.second), o.threshold, counts[name]});
  return out;
}

struct GradcheckOptions {
  std::string scale = "tiny";  // tiny: sampled coordinates; full: every coordinate
  double e2e_h = 1e-4;         // finite-difference step of the end-to-end check
  // Edits the op list before it runs (tests use it to inject faulty ops).
  std::function<void(std::vector<OpCase>&)> customize;
};

inline GradcheckReport gradcheck_suite(const GradcheckOptions& opt = {}) {
  if (opt.scale != "tiny" && opt.scale != "full") {
    throw std::invalid_argument("gradcheck scale must be tiny or full, got '" + opt.scale + "'");
  }
  const auto t0 = std::chrono::steady_clock::now();
  GradcheckReport rep;
  auto cases = default_op_cases();
  if (opt.customize) opt.customize(cases);
  for (const auto& c : cases) rep.ops.push_back(check_op(c));
  auto e2e = tiny_end_to_end();
  e2e.coords_per_tensor = opt.scale == "tiny" ? 6 : 0;
  e2e.h = opt.e2e_h;
  rep.groups = check_end_to_end(e2e);
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

}  // namespace lgsa
