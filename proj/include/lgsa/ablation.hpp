// Multi-seed ablation grids and their CSV reports.
#pragma once

#include <array>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "lgsa/training.hpp"

namespace lgsa {

struct AblationRow {
  std::string name;
  NetConfig net;
  LossWeights loss;
  double paper_dsc = 0;  // reference value from the original ACDC experiments
};

inline const std::vector<std::string>& grid_names() {
  static const std::vector<std::string> names{"table4", "table5", "table6", "table7", "baselines"};
  return names;
}

/// Rows of a named grid built on top of `base` (the full model settings).
inline std::vector<AblationRow> ablation_grid(const std::string& grid, const NetConfig& base, const LossWeights& lw) {
  auto full = base;
  full.arch = Arch::Lgsa;
  full.lg_enabled.clear();
  full.sa_count = -1;
  auto variant = [&](std::string name, bool lg, bool sa, double ref) {
    auto c = full;
    if (!lg) c.lg_enabled.assign(c.levels, false);
    if (!sa) c.sa_count = 0;
    return AblationRow{std::move(name), c, lw, ref};
  };
  std::vector<AblationRow> rows;
  if (grid == "table4") {
    rows = {variant("UNet", false, false, 90.00), variant("UNet+LG", true, false, 91.16),
            variant("UNet+SA", false, true, 91.70), variant("UNet+LG+SA", true, true, 92.22)};
  } else if (grid == "table5") {
    auto multi = full, central = full;
    multi.head_mode = HeadMode::Multi;
    central.head_mode = HeadMode::Central;
    rows = {{"Multi-head", multi, lw, 91.90}, {"Central-head", central, lw, 92.22}};
  } else if (grid == "table6") {
    const std::array<std::pair<int, double>, 3> counts{{{1, 91.27}, {3, 91.92}, {5, 92.22}}};
    for (auto [n, ref] : counts) {
      auto c = full;
      c.sa_count = n;
      rows.push_back({"SA x" + std::to_string(n), c, lw, ref});
    }
  } else if (grid == "table7") {
    auto weights = [&](double a, double b) {
      auto w = lw;
      w.alpha = a;
      w.beta = b;
      return w;
    };
    rows = {{"OS", full, weights(0.0, 0.0), 90.57},
            {"SeS", full, weights(0.0, 0.5), 90.89},
            {"SiS", full, weights(0.33, 0.0), 91.84},
            {"SeS+SiS", full, weights(0.33, 0.5), 92.22}};
  } else if (grid == "baselines") {
    auto arch = [&](Arch a) {
      auto c = full;
      c.arch = a;
      return c;
    };
    rows = {{"3-slice UNet", arch(Arch::Stacked3), lw, 90.35},
            {"Multi-encoder", arch(Arch::MultiEncoder), lw, 91.53},
            {"Concat two-stage", arch(Arch::Concat2Stage), lw, 91.99},
            {"LGSA", full, lw, 93.21}};
  } else {
    std::string known;
    for (const auto& g : grid_names()) known += (known.empty() ? "" : "|") + g;
    throw ConfigError("unknown grid '" + grid + "', expected " + known);
  }
  return rows;
}

struct SeedResult {
  std::uint64_t seed = 0;
  std::optional<RunRecord> run;
  std::string error;  // non-empty when the run failed
};

struct CellResult {
  AblationRow row;
  std::vector<SeedResult> seeds;

  std::vector<double> values(const std::function<double(const RunRecord&)>& f) const {
    std::vector<double> v;
    for (const auto& s : seeds)
      if (s.run) v.push_back(f(*s.run));
    return v;
  }
  std::vector<double> dsc() const { return values([](const RunRecord& r) { return r.test.at("fine.2").dsc; }); }
  std::size_t failures() const {
    std::size_t n = 0;
    for (const auto& s : seeds) n += !s.run;
    return n;
  }
};

/// Mean and sample standard deviation; the deviation is absent below two values.
struct MeanStd {
  double mean = std::nan("");
  std::optional<double> std;
};

inline MeanStd mean_std(const std::vector<double>& v) {
  MeanStd r;
  if (v.empty()) return r;
  double s = 0;
  for (double x : v) s += x;
  r.mean = s / static_cast<double>(v.size());
  if (v.size() >= 2) {
    double ss = 0;
    for (double x : v) ss += (x - r.mean) * (x - r.mean);
    r.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return r;
}

struct AblationOptions {
  std::filesystem::path out_dir;  // empty: no run directories are written
  std::size_t threads = 0;        // 0: LGSA_THREADS, else hardware concurrency
  std::function<void(const std::string&)> log;
};

inline std::size_t worker_count(std::size_t requested, std::size_t jobs) {
  std::size_t n = requested;
  if (n == 0) {
    if (const char* env = std::getenv("LGSA_THREADS")) n = static_cast<std::size_t>(std::strtoul(env, nullptr, 10));
  }
  if (n == 0) n = std::max(1u, std::thread::hardware_concurrency());
  return std::max<std::size_t>(1, std::min(n, jobs));
}

/// Trains and evaluates one (row, seed) cell in 32-bit arithmetic.
inline RunRecord run_cell(const AblationRow& row, const TrainConfig& tc, const Benchmark& data,
                          const SynthSpec& spec, std::uint64_t seed, const std::filesystem::path& out_dir) {
  LgsaNet<float> net(row.net, seed);
  TrainConfig cfg = tc;
  cfg.loss = row.loss;
  auto rec = train(net, data.train, data.val, cfg, seed);
  const auto kv = run_kv(row.net, cfg, spec, seed);
  rec.hash = config_hash(kv);
  const auto rep = evaluate(net, data.test.volumes, seed, cfg.eval_batch);
  rec.test = rep.by_output;
  if (!out_dir.empty()) write_run(out_dir, kv, rec, net, &rep);
  return rec;
}

/// Runs every (row, seed) pair. Runs are independent, so the worker count
/// does not change any result; failures are recorded and the grid continues.
inline std::vector<CellResult> run_ablation(const std::vector<AblationRow>& rows, const TrainConfig& tc,
                                            const Benchmark& data, const SynthSpec& spec,
                                            const AblationOptions& opt = {}) {
  tc.validate();
  std::vector<CellResult> cells;
  for (const auto& r : rows) {
    CellResult c{r, {}};
    for (auto s : tc.seeds) c.seeds.push_back({s, std::nullopt, {}});
    cells.push_back(std::move(c));
  }
  std::vector<std::pair<std::size_t, std::size_t>> jobs;
  for (std::size_t i = 0; i < cells.size(); ++i)
    for (std::size_t j = 0; j < tc.seeds.size(); ++j) jobs.emplace_back(i, j);

  std::atomic<std::size_t> next{0};
  std::mutex log_mu;
  auto worker = [&] {
    for (std::size_t k = next++; k < jobs.size(); k = next++) {
      auto [i, j] = jobs[k];
      auto& slot = cells[i].seeds[j];
      std::string line;
      try {
        slot.run = run_cell(cells[i].row, tc, data, spec, slot.seed, opt.out_dir);
        std::ostringstream os;
        os << cells[i].row.name << " seed " << slot.seed << ": test DSC " << slot.run->test.at("fine.2").dsc
           << ", best epoch " << slot.run->best_epoch << ", " << slot.run->wall_seconds << " s";
        line = os.str();
      } catch (const std::exception& e) {
        slot.error = e.what();
        line = cells[i].row.name + " seed " + std::to_string(slot.seed) + " failed: " + e.what();
      }
      if (opt.log) {
        std::lock_guard lock(log_mu);
        opt.log(line);
      }
    }
  };
  const auto n = worker_count(opt.threads, jobs.size());
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  return cells;
}

inline std::string fmt_opt(const std::optional<double>& v) { return v ? format_number(*v) : "NA"; }

inline std::string ablation_csv(const std::string& grid, const std::vector<CellResult>& cells) {
  std::ostringstream os;
  os << "grid,row,arch,head_mode,sa_count,lg_enabled,alpha,beta,runs,failures,dsc_mean,dsc_std,hd95_mean,"
        "hd95_std,f1_mean,f1_std,coarse_center_dsc_mean,fine_adjacent_dsc_mean,paper_dsc,seed_dsc\n";
  for (const auto& c : cells) {
    auto metric = [&](auto f) { return mean_std(c.values(f)); };
    const auto dsc = metric([](const RunRecord& r) { return r.test.at("fine.2").dsc; });
    const auto hd = metric([](const RunRecord& r) { return r.test.at("fine.2").hd95; });
    const auto f1 = metric([](const RunRecord& r) { return r.test.at("fine.2").f1; });
    const auto coarse = metric([](const RunRecord& r) {
      auto it = r.test.find("coarse.2");
      return it == r.test.end() ? std::nan("") : it->second.dsc;
    });
    const auto adj = metric([](const RunRecord& r) {
      auto a = r.test.find("fine.1"), b = r.test.find("fine.3");
      return a == r.test.end() || b == r.test.end() ? std::nan("") : 0.5 * (a->second.dsc + b->second.dsc);
    });
    std::string per_seed;
    for (const auto& s : c.seeds)
      per_seed += (per_seed.empty() ? "" : ";") + (s.run ? format_number(s.run->test.at("fine.2").dsc) : "NA");
    const auto& n = c.row.net;
    os << grid << ',' << c.row.name << ',' << to_string(n.arch) << ',' << to_string(n.head_mode) << ','
       << n.resolved_sa_count() << ",\"" << format_lg_enabled(n) << "\"," << format_number(c.row.loss.alpha) << ','
       << format_number(c.row.loss.beta) << ',' << c.seeds.size() - c.failures() << ',' << c.failures() << ','
       << (std::isnan(dsc.mean) ? "NA" : format_number(dsc.mean)) << ',' << fmt_opt(dsc.std) << ','
       << (std::isnan(hd.mean) ? "NA" : format_number(hd.mean)) << ',' << fmt_opt(hd.std) << ','
       << (std::isnan(f1.mean) ? "NA" : format_number(f1.mean)) << ',' << fmt_opt(f1.std) << ','
       << (std::isnan(coarse.mean) ? "NA" : format_number(coarse.mean)) << ','
       << (std::isnan(adj.mean) ? "NA" : format_number(adj.mean)) << ',' << format_number(c.row.paper_dsc) << ','
       << per_seed << '\n';
  }
  return os.str();
}

/// Per-seed test DSC, one line per run, for box plots.
inline std::string boxdata_csv(const std::string& grid, const std::vector<CellResult>& cells) {
  std::ostringstream os;
  os << "grid,row,seed,dsc,hd95,f1,status\n";
  for (const auto& c : cells)
    for (const auto& s : c.seeds) {
      os << grid << ',' << c.row.name << ',' << s.seed << ',';
      if (s.run) {
        const auto& t = s.run->test.at("fine.2");
        os << format_number(t.dsc) << ',' << format_number(t.hd95) << ',' << format_number(t.f1) << ",ok\n";
      } else {
        os << "NA,NA,NA,failed\n";
      }
    }
  return os.str();
}

struct OutputTable {
  std::string label;
  std::uint64_t seed = 0;
  std::map<std::string, Summary> by_output;
};

/// DSC of the six outputs per seed, the two comparisons (fine vs coarse on
/// the center slice, center vs mean of the adjacent fine outputs) and a final
/// line of seed means for each label.
inline std::string table3_csv(const std::vector<OutputTable>& rows) {
  std::ostringstream os;
  os << "label,seed";
  for (const auto& n : kOutputNames) os << ',' << n;
  os << ",fine_minus_coarse_center,center_minus_adjacent\n";
  auto dsc = [](const std::map<std::string, Summary>& m, const std::string& k) {
    auto it = m.find(k);
    return it == m.end() ? std::nan("") : it->second.dsc;
  };
  auto cell = [](double v) { return std::isnan(v) ? std::string("NA") : format_number(v); };
  std::map<std::string, std::vector<const OutputTable*>> by_label;
  std::vector<std::string> order;
  for (const auto& r : rows) {
    if (!by_label.count(r.label)) order.push_back(r.label);
    by_label[r.label].push_back(&r);
  }
  for (const auto& label : order) {
    std::array<std::vector<double>, 8> cols;
    for (const auto* r : by_label[label]) {
      os << label << ',' << r->seed;
      for (std::size_t i = 0; i < 6; ++i) {
        const double v = dsc(r->by_output, kOutputNames[i]);
        cols[i].push_back(v);
        os << ',' << cell(v);
      }
      const double fc = dsc(r->by_output, "fine.2") - dsc(r->by_output, "coarse.2");
      const double ca = dsc(r->by_output, "fine.2") - 0.5 * (dsc(r->by_output, "fine.1") + dsc(r->by_output, "fine.3"));
      cols[6].push_back(fc);
      cols[7].push_back(ca);
      os << ',' << cell(fc) << ',' << cell(ca) << '\n';
    }
    os << label << ",mean";
    for (const auto& c : cols) os << ',' << cell(mean_std(c).mean);
    os << '\n';
  }
  return os.str();
}

/// One line per label stating whether the seed means follow the expected
/// direction (fine center best).
inline std::string table3_verdict(const std::vector<OutputTable>& rows) {
  std::map<std::string, std::array<std::vector<double>, 4>> acc;
  std::vector<std::string> order;
  for (const auto& r : rows) {
    if (!acc.count(r.label)) order.push_back(r.label);
    auto get = [&](const char* k) {
      auto it = r.by_output.find(k);
      return it == r.by_output.end() ? std::nan("") : it->second.dsc;
    };
    auto& a = acc[r.label];
    a[0].push_back(get("fine.2"));
    a[1].push_back(get("coarse.2"));
    a[2].push_back(0.5 * (get("fine.1") + get("fine.3")));
  }
  std::ostringstream os;
  os << std::setprecision(4) << std::fixed;
  for (const auto& label : order) {
    const auto& a = acc[label];
    const double fine = mean_std(a[0]).mean, coarse = mean_std(a[1]).mean, adj = mean_std(a[2]).mean;
    os << label << ": fine center " << fine << ", coarse center " << coarse << ", fine adjacent " << adj << "; ";
    if (std::isnan(coarse) || std::isnan(adj)) {
      os << "single-output model, comparison not applicable\n";
      continue;
    }
    os << "fine>=coarse " << (fine >= coarse ? "yes" : "no") << ", center>=adjacent " << (fine >= adj ? "yes" : "no")
       << '\n';
  }
  return os.str();
}

}  // namespace lgsa
