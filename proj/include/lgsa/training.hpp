// Training loop, early stopping, evaluation and the run directory layout.
#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "lgsa/config.hpp"
#include "lgsa/data.hpp"
#include "lgsa/losses.hpp"
#include "lgsa/metrics.hpp"
#include "lgsa/network.hpp"
#include "lgsa/optim.hpp"

namespace lgsa {

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch = 8;
  std::size_t patience = 5;
  AdamOptions adam;
  LossWeights loss;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::size_t max_steps = 0;  // 0: no limit
  std::size_t eval_batch = 16;

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be positive");
    if (patience >= epochs) throw ConfigError("patience must be smaller than epochs");
    if (batch < 2) throw ConfigError("batch must be at least 2");
    if (eval_batch < 1) throw ConfigError("eval_batch must be positive");
    if (!(adam.lr > 0)) throw ConfigError("lr must be positive");
    if (seeds.empty()) throw ConfigError("seed list is empty");
    loss.validate();
  }
};

inline std::string format_number(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

inline std::string format_seeds(const std::vector<std::uint64_t>& seeds) {
  std::string s;
  for (std::size_t i = 0; i < seeds.size(); ++i) s += (i ? "," : "") + std::to_string(seeds[i]);
  return s;
}

inline std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> out;
  for (const auto& f : split(text, ',')) {
    KeyValues one{{"seeds", f}};
    const auto v = kv_int(one, "seeds");
    if (v < 0) throw ConfigError("seeds must be non-negative");
    out.push_back(static_cast<std::uint64_t>(v));
  }
  if (out.empty()) throw ConfigError("seeds: empty list");
  return out;
}

inline KeyValues to_kv(const TrainConfig& c) {
  return {{"epochs", std::to_string(c.epochs)},
          {"batch", std::to_string(c.batch)},
          {"patience", std::to_string(c.patience)},
          {"lr", format_number(c.adam.lr)},
          {"beta1", format_number(c.adam.beta1)},
          {"beta2", format_number(c.adam.beta2)},
          {"adam_eps", format_number(c.adam.eps)},
          {"weight_decay", format_number(c.adam.weight_decay)},
          {"alpha", format_number(c.loss.alpha)},
          {"beta", format_number(c.loss.beta)},
          {"bce_weight", format_number(c.loss.bce_weight)},
          {"seeds", format_seeds(c.seeds)},
          {"max_steps", std::to_string(c.max_steps)},
          {"eval_batch", std::to_string(c.eval_batch)}};
}

inline TrainConfig train_config_from_kv(const KeyValues& kv, TrainConfig base = {}) {
  auto size = [&](const char* k, std::size_t& dst) {
    if (!kv.count(k)) return;
    const auto v = kv_int(kv, k);
    if (v < 0) throw ConfigError(std::string(k) + " must be non-negative");
    dst = static_cast<std::size_t>(v);
  };
  auto real = [&](const char* k, double& dst) {
    if (kv.count(k)) dst = kv_double(kv, k);
  };
  size("epochs", base.epochs);
  size("batch", base.batch);
  size("patience", base.patience);
  size("max_steps", base.max_steps);
  size("eval_batch", base.eval_batch);
  real("lr", base.adam.lr);
  real("beta1", base.adam.beta1);
  real("beta2", base.adam.beta2);
  real("adam_eps", base.adam.eps);
  real("weight_decay", base.adam.weight_decay);
  real("alpha", base.loss.alpha);
  real("beta", base.loss.beta);
  real("bce_weight", base.loss.bce_weight);
  if (kv.count("seeds")) base.seeds = parse_seeds(kv.at("seeds"));
  base.validate();
  return base;
}

/// Volumes resampled to the network input size, with their triplets.
struct Dataset {
  std::vector<Volume> volumes;
  std::vector<SliceTriplet> triplets;

  bool empty() const { return triplets.empty(); }
};

inline Dataset make_dataset(const std::vector<Volume>& volumes, std::size_t input_size) {
  Dataset d;
  for (const auto& v : volumes) {
    d.volumes.push_back(resize_volume(v, input_size));
    auto t = make_triplets(d.volumes.back());
    std::move(t.begin(), t.end(), std::back_inserter(d.triplets));
  }
  return d;
}

struct Benchmark {
  Dataset train, val, test;
};

inline Benchmark make_benchmark(const std::vector<Volume>& corpus, std::size_t input_size, SplitRatios ratios = {},
                                std::uint64_t split_seed = 0) {
  const auto s = split_dataset(corpus.size(), ratios, split_seed);
  auto pick = [&](const std::vector<std::size_t>& idx) {
    std::vector<Volume> v;
    for (auto i : idx) v.push_back(corpus[i]);
    return make_dataset(v, input_size);
  };
  return {pick(s.train), pick(s.val), pick(s.test)};
}

template <typename T>
struct Batch {
  std::array<Tensor<T>, 3> x, y;
  std::size_t size = 0;
};

template <typename T>
Batch<T> make_batch(const std::vector<SliceTriplet>& data, std::span<const std::size_t> idx) {
  if (idx.empty()) throw std::invalid_argument("make_batch: empty index list");
  const auto& first = data.at(idx[0]);
  const std::size_t H = first.height, W = first.width, C = first.num_classes, HW = H * W, B = idx.size();
  Batch<T> b;
  b.size = B;
  for (std::size_t s = 0; s < 3; ++s) {
    std::vector<T> x(B * HW), y(B * C * HW);
    for (std::size_t i = 0; i < B; ++i) {
      const auto& t = data.at(idx[i]);
      if (t.height != H || t.width != W || t.num_classes != C) {
        throw ShapeError("make_batch: triplets differ in size or class count");
      }
      std::copy_n(t.x.begin() + s * HW, HW, x.begin() + i * HW);
      std::copy_n(t.y.begin() + s * C * HW, C * HW, y.begin() + i * C * HW);
    }
    b.x[s] = Tensor<T>::from({B, 1, H, W}, std::move(x));
    b.y[s] = Tensor<T>::from({B, C, H, W}, std::move(y));
  }
  return b;
}

/// Stops after `patience` consecutive epochs without a strict improvement.
class EarlyStopper {
 public:
  explicit EarlyStopper(std::size_t patience) : patience_(patience) {}

  /// Records one epoch's score; returns true when training should stop.
  bool update(double score) {
    ++epoch_;
    if (epoch_ == 1 || score > best_) {
      best_ = score;
      best_epoch_ = epoch_;
      bad_ = 0;
      improved_ = true;
    } else {
      ++bad_;
      improved_ = false;
    }
    return bad_ >= patience_;
  }

  bool improved() const { return improved_; }
  double best() const { return best_; }
  std::size_t best_epoch() const { return best_epoch_; }
  std::size_t bad_epochs() const { return bad_; }

 private:
  std::size_t patience_;
  std::size_t epoch_ = 0, best_epoch_ = 0, bad_ = 0;
  double best_ = -std::numeric_limits<double>::infinity();
  bool improved_ = false;
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EpochStats {
  std::size_t epoch = 0;
  double train_loss = 0, val_loss = 0, val_dsc = 0;
};

/// Mean and spread of per-slice metrics for one output.
struct Summary {
  std::size_t n = 0, sentinels = 0;
  double dsc = 0, hd95 = 0, f1 = 0, precision = 0, recall = 0;
};

struct RunRecord {
  std::string hash;
  std::uint64_t seed = 0;
  std::vector<EpochStats> curve;
  std::size_t best_epoch = 0;
  double best_val_dsc = 0;
  std::size_t steps = 0;
  bool stopped_early = false;
  double wall_seconds = 0;
  std::map<std::string, Summary> test;  // by output name, filled after evaluation
};

template <typename T>
struct TrainHooks {
  // Replaces the measured validation score (used to script early stopping).
  std::function<double(std::size_t epoch, double measured)> val_score;
  std::function<void(const EpochStats&)> on_epoch;
  std::function<void(std::size_t step, double loss)> on_step;
};

namespace detail {

template <typename T>
double batch_dsc_sum(const Tensor<T>& prob, const Tensor<T>& gt) {
  const std::size_t B = prob.dim(0), C = prob.dim(1), H = prob.dim(2), W = prob.dim(3), HW = H * W;
  double s = 0;
  for (std::size_t b = 0; b < B; ++b) {
    double per = 0;
    for (std::size_t c = 0; c < C; ++c) {
      const auto off = (b * C + c) * HW;
      const auto pm = threshold<T>(std::span<const T>(prob.data()).subspan(off, HW), H, W);
      Mask gm(H, W);
      for (std::size_t i = 0; i < HW; ++i) gm.bits[i] = gt.data()[off + i] > T(0.5);
      per += dsc_metric(pm, gm);
    }
    s += per / static_cast<double>(C);
  }
  return s;
}

}  // namespace detail

/// Validation loss and mean fine-center DSC over a dataset, in eval mode.
template <typename T>
std::pair<double, double> validation_scores(LgsaNet<T>& net, const Dataset& data, const LossWeights& w, std::size_t batch) {
  NoGradGuard ng;
  double loss = 0, dsc = 0;
  std::size_t batches = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.triplets.size(); start += batch) {
    idx.clear();
    for (std::size_t i = start; i < std::min(start + batch, data.triplets.size()); ++i) idx.push_back(i);
    const auto b = make_batch<T>(data.triplets, idx);
    const auto out = net.forward(b.x, Mode::Eval);
    loss += static_cast<double>(total_loss(out, b.y, w).total.item());
    dsc += detail::batch_dsc_sum(select_output(out), b.y[1]);
    ++batches;
  }
  if (batches == 0) return {0.0, 0.0};
  return {loss / static_cast<double>(batches), dsc / static_cast<double>(data.triplets.size())};
}

/// Trains `net` from its current parameters. Mini-batches are reshuffled
/// every epoch from a stream derived from `seed`. The validation score is the
/// mean fine-center DSC, or minus the training loss when `val` is empty. On
/// return the network holds the best-scoring parameters.
template <typename T>
RunRecord train(LgsaNet<T>& net, const Dataset& train_set, const Dataset& val, const TrainConfig& cfg,
                std::uint64_t seed, const TrainHooks<T>& hooks = {}) {
  cfg.validate();
  if (train_set.empty()) throw std::invalid_argument("train: empty training set");
  const auto t0 = std::chrono::steady_clock::now();
  RunRecord rec;
  rec.seed = seed;
  auto adam = make_adam(net.params(), cfg.adam);
  EarlyStopper stopper(cfg.patience);
  auto best = net.params().clone();
  std::vector<std::size_t> order(train_set.triplets.size());

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    CounterRng rng(derive_stream(derive_stream(seed, fnv1a("shuffle")), epoch));
    shuffle(order, rng);

    double loss_sum = 0;
    std::size_t batches = 0;
    bool out_of_steps = false;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      if (cfg.max_steps && rec.steps >= cfg.max_steps) {
        out_of_steps = true;
        break;
      }
      const std::size_t n = std::min(cfg.batch, order.size() - start);
      const auto b = make_batch<T>(train_set.triplets, std::span<const std::size_t>(order).subspan(start, n));
      auto out = net.forward(b.x, Mode::Train);
      auto loss = total_loss(out, b.y, cfg.loss);
      const double v = static_cast<double>(loss.total.item());
      ++rec.steps;
      if (!std::isfinite(v)) {
        throw DivergenceError("non-finite loss at step " + std::to_string(rec.steps) + " (epoch " +
                              std::to_string(epoch) + ")");
      }
      loss.total.backward();
      adam_step(net.params(), adam, true);
      loss_sum += v;
      ++batches;
      if (hooks.on_step) hooks.on_step(rec.steps, v);
    }
    if (batches == 0) break;

    EpochStats st;
    st.epoch = epoch;
    st.train_loss = loss_sum / static_cast<double>(batches);
    if (val.empty()) {
      st.val_dsc = -st.train_loss;
    } else {
      std::tie(st.val_loss, st.val_dsc) = validation_scores(net, val, cfg.loss, cfg.eval_batch);
    }
    const double score = hooks.val_score ? hooks.val_score(epoch, st.val_dsc) : st.val_dsc;
    st.val_dsc = score;
    rec.curve.push_back(st);
    if (hooks.on_epoch) hooks.on_epoch(st);

    const bool stop = stopper.update(score);
    if (stopper.improved()) best = net.params().clone();
    if (stop) {
      rec.stopped_early = true;
      break;
    }
    if (out_of_steps) break;
  }
  net.params().assign_from(best);
  rec.best_epoch = stopper.best_epoch();
  rec.best_val_dsc = stopper.best();
  rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

inline const std::array<std::string, 6> kOutputNames{"coarse.1", "coarse.2", "coarse.3",
                                                     "fine.1",   "fine.2",   "fine.3"};

struct EvalReport {
  std::vector<MetricsRecord> records;
  std::map<std::string, Summary> by_output;

  const Summary& headline() const { return by_output.at("fine.2"); }
};

inline Summary summarize(const std::vector<MetricsRecord>& recs, const std::string& output) {
  Summary s;
  for (const auto& r : recs) {
    if (r.output != output) continue;
    ++s.n;
    s.dsc += r.dsc;
    s.hd95 += r.hd95;
    s.f1 += r.f1;
    s.precision += r.precision;
    s.recall += r.recall;
    s.sentinels += r.empty_flag && r.hd95 > 0;
  }
  if (s.n) {
    const auto n = static_cast<double>(s.n);
    s.dsc /= n;
    s.hd95 /= n;
    s.f1 /= n;
    s.precision /= n;
    s.recall /= n;
  }
  return s;
}

/// Per-slice metrics for every output the model produces. Triplet centers
/// cover the interior slices only, so the head and tail slices never enter
/// the fine.2 headline. Volumes must already match the network input size.
/// `on_center_mask(z, class, prediction, ground truth)` sees every fine.2 mask.
template <typename T>
EvalReport evaluate(LgsaNet<T>& net, const std::vector<Volume>& volumes, std::uint64_t seed = 0,
                    std::size_t batch = 16,
                    const std::function<void(std::size_t, std::size_t, const Mask&, const Mask&)>& on_center_mask = {}) {
  NoGradGuard ng;
  EvalReport rep;
  for (const auto& v : volumes) {
    const auto trip = make_triplets(v);
    const Spacing sp{v.spacing[1], v.spacing[2]};
    const std::size_t H = v.height, W = v.width, C = v.num_classes, HW = H * W;
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < trip.size(); start += batch) {
      idx.clear();
      for (std::size_t i = start; i < std::min(start + batch, trip.size()); ++i) idx.push_back(i);
      const auto b = make_batch<T>(trip, idx);
      const auto out = net.forward(b.x, Mode::Eval);
      for (std::size_t o = 0; o < 6; ++o) {
        const auto& logits = o < 3 ? out.coarse_logits[o] : out.fine_logits[o - 3];
        if (!logits.defined()) continue;
        const auto prob = sigmoid(logits);
        const auto& gt = b.y[o % 3];
        for (std::size_t k = 0; k < idx.size(); ++k) {
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t off = (k * C + c) * HW;
            const auto pm = threshold<T>(std::span<const T>(prob.data()).subspan(off, HW), H, W);
            Mask gm(H, W);
            for (std::size_t i = 0; i < HW; ++i) gm.bits[i] = gt.data()[off + i] > T(0.5);
            if (o == 4 && on_center_mask) on_center_mask(trip[idx[k]].center, c + 1, pm, gm);
            auto r = measure(pm, gm, sp);
            r.volume = v.id;
            r.output = kOutputNames[o];
            r.slice = static_cast<long>(trip[idx[k]].center + o % 3) - 1;
            r.cls = c + 1;
            r.seed = seed;
            rep.records.push_back(std::move(r));
          }
        }
      }
    }
  }
  for (const auto& name : kOutputNames) {
    auto s = summarize(rep.records, name);
    if (s.n) rep.by_output[name] = s;
  }
  return rep;
}

inline std::string fnv1a_hex(const std::string& text) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << fnv1a(text);
  return os.str();
}

/// Everything that determines a run: architecture, loss and optimizer
/// settings, data spec and seed. The seed list itself is left out.
inline KeyValues run_kv(const NetConfig& net, const TrainConfig& tc, const SynthSpec& data, std::uint64_t seed) {
  KeyValues kv = to_kv(net);
  for (auto& [k, v] : to_kv(tc)) kv[k] = v;
  kv.erase("seeds");
  for (auto& [k, v] : to_kv(data)) kv[k] = v;
  kv["seed"] = std::to_string(seed);
  return kv;
}

inline std::string config_hash(const KeyValues& kv) { return fnv1a_hex(format_kv(kv)); }

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

inline std::string curve_csv(const RunRecord& r) {
  std::ostringstream os;
  os << std::setprecision(10) << "epoch,train_loss,val_loss,val_dsc\n";
  for (const auto& e : r.curve) os << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ',' << e.val_dsc << '\n';
  return os.str();
}

inline std::string metrics_csv(const std::vector<MetricsRecord>& recs) {
  std::ostringstream os;
  os << std::setprecision(12) << kMetricsCsvHeader << '\n';
  for (const auto& r : recs) {
    os << r.volume << ',' << r.output << ',' << r.slice << ',' << r.cls << ',' << r.seed << ',' << r.dsc << ','
       << r.hd95 << ',' << r.f1 << ',' << r.precision << ',' << r.recall << ',' << r.tp << ',' << r.fp << ','
       << r.fn << ',' << (r.empty_flag ? 1 : 0) << '\n';
  }
  return os.str();
}

/// Writes runs/<hash>/{config.txt, curve.csv, best.ckpt, metrics.csv}.
template <typename T>
std::filesystem::path write_run(const std::filesystem::path& root, const KeyValues& kv, const RunRecord& rec,
                                const LgsaNet<T>& net, const EvalReport* eval) {
  const auto dir = root / "runs" / rec.hash;
  std::filesystem::create_directories(dir);
  KeyValues full = kv;
  full["best_epoch"] = std::to_string(rec.best_epoch);
  full["best_val_dsc"] = format_number(rec.best_val_dsc);
  full["steps"] = std::to_string(rec.steps);
  full["wall_seconds"] = format_number(rec.wall_seconds);
  write_text(dir / "config.txt", format_kv(full));
  write_text(dir / "curve.csv", curve_csv(rec));
  save_checkpoint((dir / "best.ckpt").string(), net.params(), net.descriptor_text());
  if (eval) write_text(dir / "metrics.csv", metrics_csv(eval->records));
  return dir;
}

/// Rebuilds a network from a checkpoint written by save_checkpoint.
template <typename T>
LgsaNet<T> load_network(const std::string& path) {
  const auto ck = read_checkpoint(path);
  if (ck.descriptor.empty()) throw FormatError(path + ": checkpoint carries no architecture descriptor");
  const auto kv = parse_kv(ck.descriptor);
  const auto seed = kv.count("seed") ? static_cast<std::uint64_t>(kv_int(kv, "seed")) : 0;
  LgsaNet<T> net(net_config_from_kv(kv), seed);
  load_into(ck, net.params());
  return net;
}

}  // namespace lgsa
