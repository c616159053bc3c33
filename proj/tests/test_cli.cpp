#include <gtest/gtest.h>

#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "support.hpp"

using namespace lgsa;
using lgsa::test::slurp;
using lgsa::test::TempDir;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::dispatch(args, out, err);
  return {code, out.str(), err.str()};
}

std::vector<std::string> tiny_model_flags() {
  return {"--volumes", "10", "--depth", "5", "--height", "16", "--width", "16", "--input-size", "16", "--levels", "3",
          "--base-channels", "4", "--epochs", "2", "--patience", "1", "--batch", "4"};
}

std::vector<std::string> concat(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

std::vector<std::vector<std::string>> read_csv(const std::string& path) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(slurp(path));
  for (std::string line; std::getline(in, line);) rows.push_back(split(line, ','));
  return rows;
}

std::size_t count_prefix(const std::filesystem::path& dir, const std::string& prefix) {
  std::size_t n = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir)) n += e.path().filename().string().rfind(prefix, 0) == 0;
  return n;
}

}  // namespace

TEST(Cli, UsageErrorsExitOne) {
  for (const auto& args : std::vector<std::vector<std::string>>{
           {}, {"bogus"}, {"train", "--nope", "1"}, {"gen-data", "--volumes"}, {"gen-data", "volumes"}}) {
    const auto r = run(args);
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("usage: lgsa"), std::string::npos);
    EXPECT_TRUE(r.out.empty());
  }
  EXPECT_NE(run({"train", "--nope", "1"}).err.find("--nope"), std::string::npos);
}

TEST(Cli, HelpExitsZero) {
  const auto r = run({"--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("export-masks"), std::string::npos);
}

TEST(Cli, DryRunResolvesConfigThenFlagsAndTouchesNothing) {
  TempDir dir;
  const auto cfg = dir.str("run.cfg");
  std::ofstream(cfg) << "# settings\nepochs = 9\nlr = 0.01\nbase_channels = 8\n";
  const auto out = dir.str("never");
  const auto r = run({"train", "--config", cfg, "--base_channels", "4", "--split-seed", "3", "--out", out, "--dry-run"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto kv = parse_kv(r.out);
  EXPECT_EQ(kv.at("epochs"), "9");
  EXPECT_EQ(kv.at("lr"), "0.01");
  EXPECT_EQ(kv.at("base_channels"), "4");
  EXPECT_EQ(kv.at("split_seed"), "3");
  EXPECT_EQ(kv.at("patience"), "5");
  EXPECT_FALSE(std::filesystem::exists(out));
  for (const char* cmd : {"gen-data", "train", "eval", "ablate", "gradcheck", "export-masks"}) {
    const auto d = run({cmd, "--dry-run"});
    EXPECT_EQ(d.code, 0) << cmd;
    EXPECT_FALSE(parse_kv(d.out).empty()) << cmd;
  }
}

TEST(Cli, ConfigFileWithUnknownKeyIsRejected) {
  TempDir dir;
  const auto cfg = dir.str("bad.cfg");
  std::ofstream(cfg) << "epochs = 3\nwarp = 9\n";
  const auto r = run({"train", "--config", cfg, "--dry-run"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("warp"), std::string::npos);
}

TEST(Cli, InvalidValuesExitOne) {
  TempDir dir;
  EXPECT_EQ(run({"gen-data", "--depth", "2", "--out", dir.str("d")}).code, 1);
  EXPECT_EQ(run({"gen-data", "--volumes", "abc", "--out", dir.str("d")}).code, 1);
  EXPECT_EQ(run({"gradcheck", "--scale", "huge"}).code, 1);
  EXPECT_EQ(run({"gradcheck", "--e2e-h", "0"}).code, 1);
  EXPECT_EQ(run({"ablate", "--grid", "table9", "--volumes", "3", "--depth", "3"}).code, 1);
}

TEST(Cli, RuntimeFailuresExitTwo) {
  TempDir dir;
  const auto r = run({"export-masks", "--checkpoint", dir.str("missing.ckpt"), "--volume", dir.str("v.lgsv"),
                      "--out", dir.str("m")});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("missing.ckpt"), std::string::npos);
}

TEST(Cli, GenDataIsDeterministic) {
  TempDir dir;
  for (const char* d : {"a", "b"}) ASSERT_EQ(run({"gen-data", "--volumes", "10", "--seed", "7", "--out", dir.str(d)}).code, 0);
  ASSERT_EQ(run({"gen-data", "--volumes", "10", "--seed", "8", "--out", dir.str("c")}).code, 0);
  const auto files = list_volumes(dir.str("a"));
  ASSERT_EQ(files.size(), 10u);
  for (const auto& f : files) {
    const auto name = std::filesystem::path(f).filename().string();
    EXPECT_EQ(slurp(f), slurp((dir.path() / "b" / name).string()));
    EXPECT_NE(slurp(f), slurp((dir.path() / "c" / name).string()));
  }
  EXPECT_EQ(parse_kv(slurp(dir.str("a/spec.txt"))).at("data_seed"), "7");
}

TEST(Cli, TrainEvalExportRoundTrip) {
  TempDir dir;
  ASSERT_EQ(run({"gen-data", "--volumes", "10", "--depth", "5", "--height", "16", "--width", "16", "--out", dir.str("data")}).code, 0);
  const auto t = run(concat({"train", "--data", dir.str("data"), "--out", dir.str("out"), "--seed", "3"}, tiny_model_flags()));
  ASSERT_EQ(t.code, 0) << t.err;
  EXPECT_NE(t.out.find("epoch 1"), std::string::npos);
  std::filesystem::path run_dir;
  for (const auto& e : std::filesystem::directory_iterator(dir.path() / "out" / "runs")) run_dir = e.path();
  for (const char* f : {"config.txt", "curve.csv", "best.ckpt", "metrics.csv"}) EXPECT_TRUE(std::filesystem::exists(run_dir / f));
  EXPECT_EQ(read_kv_file((run_dir / "config.txt").string()).at("data"), dir.str("data"));
  const auto ckpt = (run_dir / "best.ckpt").string();

  const auto ev = run({"eval", "--data", dir.str("data"), "--checkpoint", ckpt, "--split", "all", "--out", dir.str("eval")});
  ASSERT_EQ(ev.code, 0) << ev.err;
  EXPECT_NE(ev.out.find("fine>=coarse"), std::string::npos);
  const auto metrics = read_csv(dir.str("eval/metrics.csv"));
  std::set<std::string> outputs;
  std::map<std::pair<std::string, std::string>, double> eval_dsc;
  for (std::size_t i = 1; i < metrics.size(); ++i) {
    outputs.insert(metrics[i][1]);
    if (metrics[i][1] == "fine.2") eval_dsc[{metrics[i][0], metrics[i][2]}] = std::stod(metrics[i][5]);
  }
  EXPECT_EQ(outputs.size(), 6u);
  EXPECT_EQ(eval_dsc.size(), 30u);
  EXPECT_TRUE(std::filesystem::exists(dir.str("eval/table3.csv")));

  const auto ex = run({"export-masks", "--checkpoint", ckpt, "--volume", dir.str("data/vol0004.lgsv"), "--out", dir.str("masks")});
  ASSERT_EQ(ex.code, 0) << ex.err;
  const auto masks = dir.path() / "masks";
  EXPECT_EQ(count_prefix(masks, "pred_"), 3u);
  EXPECT_EQ(count_prefix(masks, "gt_"), 3u);
  EXPECT_EQ(count_prefix(masks, "input_"), 3u);
  EXPECT_EQ(slurp((masks / "pred_z001.pgm").string()).substr(0, 13), "P5\n16 16\n255\n");
  EXPECT_EQ(slurp((masks / "pred_z001.pgm").string()).size(), 13u + 256);
  const auto csv = read_csv((masks / "dsc.csv").string());
  ASSERT_EQ(csv.size(), 4u);
  for (std::size_t i = 1; i < csv.size(); ++i) {
    const auto it = eval_dsc.find({csv[i][0], csv[i][1]});
    ASSERT_NE(it, eval_dsc.end());
    EXPECT_NEAR(std::stod(csv[i][3]), it->second, 1e-9);
  }
}

TEST(Cli, AblateWritesReports) {
  TempDir dir;
  const auto r = run(concat({"ablate", "--grid", "table4", "--seeds", "0,1", "--max-steps", "1", "--threads", "1",
                             "--out", dir.str("abl")},
                            tiny_model_flags()));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto csv = read_csv(dir.str("abl/ablation.csv"));
  EXPECT_EQ(csv.size(), 5u);
  EXPECT_EQ(read_csv(dir.str("abl/boxdata.csv")).size(), 9u);
  EXPECT_TRUE(std::filesystem::exists(dir.str("abl/table3.csv")));
  std::size_t runs = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir.path() / "abl" / "runs")) runs += e.is_directory();
  EXPECT_EQ(runs, 8u);
}
