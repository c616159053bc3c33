// Command-line front end: gen-data, train, eval, ablate, gradcheck, export-masks.
#pragma once

#include <filesystem>
#include <iomanip>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "lgsa/ablation.hpp"
#include "lgsa/gradcheck.hpp"

namespace lgsa::cli {

class UsageError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

inline const char* kUsage =
    "usage: lgsa <command> [--config FILE] [--key value ...] [--dry-run]\n"
    "\n"
    "commands:\n"
    "  gen-data      write a synthetic corpus of .lgsv volumes to --out\n"
    "  train         train one model, evaluate it on the test split\n"
    "  eval          evaluate checkpoints (comma list) on a data split\n"
    "  ablate        run an ablation grid over a seed list\n"
    "  gradcheck     finite-difference gradient checks\n"
    "  export-masks  write input, ground-truth and predicted masks of one volume as PGM\n"
    "\n"
    "Settings come from --config (key = value lines) and are overridden by\n"
    "flags; '-' and '_' are interchangeable in flag names. Run a command with\n"
    "--dry-run to print every setting it accepts with its resolved value.\n";

inline KeyValues synth_defaults() {
  auto kv = to_kv(SynthSpec{});
  return kv;
}

inline KeyValues net_defaults() {
  auto kv = to_kv(NetConfig{});
  kv.erase("num_classes");  // taken from the data
  kv["sa_count"] = "-1";
  return kv;
}

inline KeyValues train_defaults() {
  auto kv = to_kv(TrainConfig{});
  kv.erase("seeds");
  return kv;
}

inline KeyValues data_defaults() {
  return {{"data", ""}, {"split_seed", "0"}, {"train_ratio", "7"}, {"val_ratio", "1"}, {"test_ratio", "2"}};
}

inline void merge(KeyValues& into, const KeyValues& from) {
  for (const auto& [k, v] : from) into[k] = v;
}

/// Every key a command accepts, with its default value.
inline KeyValues command_defaults(const std::string& cmd) {
  KeyValues kv;
  if (cmd == "gen-data") {
    kv = synth_defaults();
    kv.erase("data_seed");
    kv["seed"] = std::to_string(SynthSpec{}.seed);
    kv["out"] = "data";
  } else if (cmd == "train" || cmd == "ablate") {
    merge(kv, net_defaults());
    merge(kv, train_defaults());
    merge(kv, synth_defaults());
    merge(kv, data_defaults());
    kv["out"] = "out";
    if (cmd == "train") {
      kv["seed"] = "0";
    } else {
      kv["seeds"] = format_seeds(TrainConfig{}.seeds);
      kv["grid"] = "table4";
      kv["threads"] = "0";
    }
  } else if (cmd == "eval") {
    merge(kv, synth_defaults());
    merge(kv, data_defaults());
    kv["checkpoint"] = "";
    kv["split"] = "test";
    kv["eval_batch"] = "16";
    kv["out"] = "out";
  } else if (cmd == "gradcheck") {
    kv["scale"] = "tiny";
    kv["e2e_h"] = "1e-4";
  } else if (cmd == "export-masks") {
    kv["checkpoint"] = "";
    kv["volume"] = "";
    kv["out"] = "masks";
  } else {
    throw UsageError("unknown command '" + cmd + "'");
  }
  return kv;
}

struct Invocation {
  std::string command;
  KeyValues settings;
  bool dry_run = false;
};

inline std::string normalize_key(std::string k) {
  for (auto& c : k)
    if (c == '-') c = '_';
  return k;
}

/// Parses argv into a command and its fully resolved settings.
inline Invocation parse(const std::vector<std::string>& args) {
  if (args.empty()) throw UsageError("missing command");
  Invocation inv;
  inv.command = args[0];
  inv.settings = command_defaults(inv.command);
  KeyValues flags;
  std::string config_path;
  for (std::size_t i = 1; i < args.size(); ++i) {
    const auto& a = args[i];
    if (a.rfind("--", 0) != 0 || a.size() < 3) throw UsageError("unexpected argument '" + a + "'");
    const auto key = normalize_key(a.substr(2));
    if (key == "dry_run") {
      inv.dry_run = true;
      continue;
    }
    if (i + 1 >= args.size()) throw UsageError("flag --" + a.substr(2) + " needs a value");
    const auto& value = args[++i];
    if (key == "config") {
      config_path = value;
      continue;
    }
    if (!inv.settings.count(key)) throw UsageError("unknown flag --" + a.substr(2) + " for " + inv.command);
    flags[key] = value;
  }
  if (!config_path.empty()) {
    for (const auto& [k, v] : read_kv_file(config_path)) {
      if (!inv.settings.count(k)) throw UsageError("unknown key '" + k + "' in " + config_path + " for " + inv.command);
      inv.settings[k] = v;
    }
  }
  merge(inv.settings, flags);
  return inv;
}

inline NetConfig net_from(const KeyValues& kv, std::size_t classes) {
  NetConfig base;
  base.num_classes = classes;
  KeyValues net;
  for (const auto& [k, v] : net_defaults())
    if (kv.count(k)) net[k] = kv.at(k);
  return net_config_from_kv(net, base);
}

inline SplitRatios ratios_from(const KeyValues& kv) {
  SplitRatios r{kv_double(kv, "train_ratio"), kv_double(kv, "val_ratio"), kv_double(kv, "test_ratio")};
  if (r.train < 0 || r.val < 0 || r.test < 0) throw ConfigError("split ratios must be non-negative");
  return r;
}

/// The corpus: volumes read from `data` when set, else generated in memory.
inline std::vector<Volume> load_corpus(const KeyValues& kv, SynthSpec& spec) {
  spec = synth_spec_from_kv(kv);
  const auto& dir = kv.at("data");
  if (dir.empty()) return generate_corpus(spec);
  std::vector<Volume> out;
  for (const auto& f : list_volumes(dir)) out.push_back(read_volume(f));
  if (out.empty()) throw std::runtime_error("no .lgsv volumes in " + dir);
  for (const auto& v : out)
    if (v.num_classes != out[0].num_classes) throw ConfigError("volumes in " + dir + " disagree on class count");
  return out;
}

inline int cmd_gen_data(const KeyValues& kv, std::ostream& out) {
  auto spec_kv = kv;
  spec_kv["data_seed"] = kv.at("seed");
  const auto spec = synth_spec_from_kv(spec_kv);
  const std::filesystem::path dir = kv.at("out");
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < spec.volumes; ++i) {
    const auto v = generate_volume(spec, i);
    std::ostringstream name;
    name << "vol" << std::setw(4) << std::setfill('0') << i << ".lgsv";
    write_volume((dir / name.str()).string(), v);
  }
  write_text(dir / "spec.txt", format_kv(to_kv(spec)));
  out << "wrote " << spec.volumes << " volumes to " << dir.string() << '\n';
  return 0;
}

inline int cmd_train(const KeyValues& kv, std::ostream& out) {
  SynthSpec spec;
  const auto corpus = load_corpus(kv, spec);
  const auto net_cfg = net_from(kv, corpus.at(0).num_classes);
  auto tc = train_config_from_kv(kv);
  const auto seed = static_cast<std::uint64_t>(kv_int(kv, "seed"));
  tc.seeds = {seed};
  const auto data = make_benchmark(corpus, net_cfg.input_size, ratios_from(kv),
                                   static_cast<std::uint64_t>(kv_int(kv, "split_seed")));
  LgsaNet<float> net(net_cfg, seed);
  TrainHooks<float> hooks;
  hooks.on_epoch = [&](const EpochStats& e) {
    out << "epoch " << e.epoch << "  train_loss " << e.train_loss << "  val_loss " << e.val_loss << "  val_dsc "
        << e.val_dsc << std::endl;
  };
  auto rec = train(net, data.train, data.val, tc, seed, hooks);
  auto run = run_kv(net_cfg, tc, spec, seed);
  if (!kv.at("data").empty()) run["data"] = kv.at("data");
  rec.hash = config_hash(run);
  const auto rep = evaluate(net, data.test.volumes, seed, tc.eval_batch);
  rec.test = rep.by_output;
  const auto dir = write_run(kv.at("out"), run, rec, net, &rep);
  out << "best epoch " << rec.best_epoch << "  val_dsc " << rec.best_val_dsc << '\n';
  if (!rep.by_output.empty()) {
    const auto& h = rep.headline();
    out << "test fine center: dsc " << h.dsc << "  hd95 " << h.hd95 << "  f1 " << h.f1 << '\n';
  }
  out << "run directory " << dir.string() << '\n';
  return 0;
}

inline int cmd_eval(const KeyValues& kv, std::ostream& out) {
  if (kv.at("checkpoint").empty()) throw ConfigError("eval needs --checkpoint");
  SynthSpec spec;
  const auto corpus = load_corpus(kv, spec);
  const auto parts = split_dataset(corpus.size(), ratios_from(kv), static_cast<std::uint64_t>(kv_int(kv, "split_seed")));
  const auto& which = kv.at("split");
  std::vector<std::size_t> idx;
  if (which == "train") idx = parts.train;
  else if (which == "val") idx = parts.val;
  else if (which == "test") idx = parts.test;
  else if (which == "all") for (std::size_t i = 0; i < corpus.size(); ++i) idx.push_back(i);
  else throw ConfigError("split: expected train|val|test|all, got '" + which + "'");
  const auto batch = static_cast<std::size_t>(kv_int(kv, "eval_batch"));

  std::vector<MetricsRecord> all;
  std::vector<OutputTable> tables;
  for (const auto& path : split(kv.at("checkpoint"), ',')) {
    auto net = load_network<float>(path);
    std::vector<Volume> vols;
    for (auto i : idx) vols.push_back(resize_volume(corpus[i], net.config().input_size));
    const auto rep = evaluate(net, vols, net.seed(), batch);
    all.insert(all.end(), rep.records.begin(), rep.records.end());
    tables.push_back({path, net.seed(), rep.by_output});
    for (const auto& [name, s] : rep.by_output) {
      out << path << "  " << name << "  dsc " << s.dsc << "  hd95 " << s.hd95 << "  f1 " << s.f1 << "  n " << s.n
          << '\n';
    }
  }
  std::vector<OutputTable> pooled = tables;
  for (auto& t : pooled) t.label = "eval";
  const std::filesystem::path dir = kv.at("out");
  std::filesystem::create_directories(dir);
  write_text(dir / "metrics.csv", metrics_csv(all));
  write_text(dir / "table3.csv", table3_csv(pooled));
  out << table3_verdict(pooled);
  return 0;
}

inline int cmd_ablate(const KeyValues& kv, std::ostream& out) {
  SynthSpec spec;
  const auto corpus = load_corpus(kv, spec);
  const auto base = net_from(kv, corpus.at(0).num_classes);
  auto tc = train_config_from_kv(kv);
  const auto grid = kv.at("grid");
  const auto rows = ablation_grid(grid, base, tc.loss);
  const auto data = make_benchmark(corpus, base.input_size, ratios_from(kv),
                                   static_cast<std::uint64_t>(kv_int(kv, "split_seed")));
  AblationOptions opt;
  opt.out_dir = kv.at("out");
  opt.threads = static_cast<std::size_t>(kv_int(kv, "threads"));
  opt.log = [&](const std::string& line) { out << line << std::endl; };
  const auto cells = run_ablation(rows, tc, data, spec, opt);
  std::filesystem::create_directories(opt.out_dir);
  write_text(opt.out_dir / "ablation.csv", ablation_csv(grid, cells));
  write_text(opt.out_dir / "boxdata.csv", boxdata_csv(grid, cells));
  std::vector<OutputTable> t3;
  for (const auto& c : cells)
    for (const auto& s : c.seeds)
      if (s.run) t3.push_back({c.row.name, s.seed, s.run->test});
  write_text(opt.out_dir / "table3.csv", table3_csv(t3));
  out << ablation_csv(grid, cells);
  std::size_t failed = 0;
  for (const auto& c : cells) failed += c.failures();
  if (failed) out << failed << " run(s) failed; see the log above\n";
  return failed ? 2 : 0;
}

inline int cmd_gradcheck(const KeyValues& kv, std::ostream& out) {
  GradcheckOptions opt;
  opt.scale = kv.at("scale");
  if (opt.scale != "tiny" && opt.scale != "full") throw ConfigError("scale: expected tiny|full, got '" + opt.scale + "'");
  opt.e2e_h = kv_double(kv, "e2e_h");
  if (!(opt.e2e_h > 0)) throw ConfigError("e2e_h must be positive");
  const auto rep = gradcheck_suite(opt);
  out << rep.text();
  return rep.passed() ? 0 : 2;
}

inline int cmd_export_masks(const KeyValues& kv, std::ostream& out) {
  if (kv.at("checkpoint").empty()) throw ConfigError("export-masks needs --checkpoint");
  if (kv.at("volume").empty()) throw ConfigError("export-masks needs --volume");
  auto net = load_network<float>(kv.at("checkpoint"));
  const auto vol = resize_volume(read_volume(kv.at("volume")), net.config().input_size);
  const std::filesystem::path dir = kv.at("out");
  std::filesystem::create_directories(dir);
  const std::size_t H = vol.height, W = vol.width, HW = H * W, C = vol.num_classes;
  const auto norm = minmax_normalize<float>(vol.voxels);
  std::size_t written = 0;
  auto on_mask = [&](std::size_t z, std::size_t cls, const Mask& pred, const Mask& gt) {
    std::ostringstream stem;
    stem << "z" << std::setw(3) << std::setfill('0') << z;
    if (cls == 1) {
      std::vector<std::uint8_t> img(HW);
      for (std::size_t i = 0; i < HW; ++i)
        img[i] = static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(norm[z * HW + i], 0.f, 1.f)));
      write_pgm((dir / ("input_" + stem.str() + ".pgm")).string(), H, W, img);
    }
    const std::string suffix = C > 1 ? "_c" + std::to_string(cls) : "";
    export_mask((dir / ("gt_" + stem.str() + suffix + ".pgm")).string(), H, W, gt.bits);
    export_mask((dir / ("pred_" + stem.str() + suffix + ".pgm")).string(), H, W, pred.bits);
    ++written;
  };
  const auto rep = evaluate(net, {vol}, net.seed(), 16, on_mask);
  std::ostringstream csv;
  csv << std::setprecision(12) << "volume,slice,class,dsc\n";
  for (const auto& r : rep.records)
    if (r.output == "fine.2") csv << r.volume << ',' << r.slice << ',' << r.cls << ',' << r.dsc << '\n';
  write_text(dir / "dsc.csv", csv.str());
  out << "wrote " << written << " prediction masks to " << dir.string() << '\n';
  return 0;
}

/// Runs one command. Exit codes: 0 success, 1 invalid usage or settings,
/// 2 failure while running.
inline int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Invocation inv;
  try {
    if (!args.empty() && (args[0] == "--help" || args[0] == "-h" || args[0] == "help")) {
      out << kUsage;
      return 0;
    }
    inv = parse(args);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n\n" << kUsage;
    return 1;
  }
  if (inv.dry_run) {
    out << "# " << inv.command << " (dry run)\n" << format_kv(inv.settings);
    return 0;
  }
  try {
    const auto& kv = inv.settings;
    if (inv.command == "gen-data") return cmd_gen_data(kv, out);
    if (inv.command == "train") return cmd_train(kv, out);
    if (inv.command == "eval") return cmd_eval(kv, out);
    if (inv.command == "ablate") return cmd_ablate(kv, out);
    if (inv.command == "gradcheck") return cmd_gradcheck(kv, out);
    return cmd_export_masks(kv, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
}

inline int dispatch(int argc, char** argv, std::ostream& out, std::ostream& err) {
  return dispatch(std::vector<std::string>(argv + 1, argv + argc), out, err);
}

}  // namespace lgsa::cli
