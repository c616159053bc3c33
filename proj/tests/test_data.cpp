#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <random>
#include <set>

#include "support.hpp"

using namespace lgsa;
using lgsa::test::small_spec;
using lgsa::test::TempDir;

namespace {

double label_dsc(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b, std::uint8_t cls) {
  double inter = 0, sa = 0, sb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += a[i] == cls && b[i] == cls;
    sa += a[i] == cls;
    sb += b[i] == cls;
  }
  return sa + sb == 0 ? 1.0 : 2 * inter / (sa + sb);
}

}  // namespace

TEST(Synth, DeterministicPerSeedAndIndex) {
  const auto s = small_spec(3, 6, 24);
  EXPECT_EQ(generate_volume(s, 1), generate_volume(s, 1));
  EXPECT_NE(generate_volume(s, 1).voxels, generate_volume(s, 2).voxels);
  auto other = s;
  other.seed = 99;
  EXPECT_NE(generate_volume(s, 1).voxels, generate_volume(other, 1).voxels);
  const auto c = generate_corpus(s);
  ASSERT_EQ(c.size(), 3u);
  EXPECT_EQ(c[2], generate_volume(s, 2));
}

TEST(Synth, ZeroDriftZeroNoiseGivesIdenticalSlices) {
  auto s = small_spec(2, 5, 32);
  s.drift = 0;
  s.noise = 0;
  for (const auto& v : generate_corpus(s)) {
    for (std::size_t z = 1; z < v.depth; ++z) {
      EXPECT_TRUE(std::equal(v.slice(z).begin(), v.slice(z).end(), v.slice(0).begin()));
      EXPECT_TRUE(std::equal(v.label_slice(z).begin(), v.label_slice(z).end(), v.label_slice(0).begin()));
    }
  }
}

TEST(Synth, LabelsNonEmptyOnEverySlice) {
  auto s = small_spec(10, 8, 32);
  s.classes = 2;
  for (const auto& v : generate_corpus(s)) {
    v.validate();
    for (std::size_t z = 0; z < v.depth; ++z) {
      const auto l = v.label_slice(z);
      EXPECT_GT(std::count(l.begin(), l.end(), 1), 0);
      EXPECT_GT(std::count(l.begin(), l.end(), 2), 0);
    }
  }
}

TEST(Synth, AdjacentSlicesOverlapAtDefaultDrift) {
  SynthSpec s;
  s.volumes = 100;
  double worst = 1;
  for (std::size_t i = 0; i < s.volumes; ++i) {
    const auto v = generate_volume(s, i);
    for (std::size_t z = 0; z + 1 < v.depth; ++z) worst = std::min(worst, label_dsc(v.label_slice(z), v.label_slice(z + 1), 1));
  }
  EXPECT_GE(worst, 0.8);
}

TEST(Synth, SpecValidation) {
  auto s = small_spec();
  s.depth = 2;
  EXPECT_THROW(s.validate(), ConfigError);
  s = small_spec();
  s.noise = -1;
  EXPECT_THROW(s.validate(), ConfigError);
}

TEST(Synth, SpecKeyValueRoundTrip) {
  auto s = small_spec(7, 9, 40);
  s.noise = 0.125;
  s.seed = 77;
  const auto back = synth_spec_from_kv(to_kv(s));
  EXPECT_EQ(to_kv(back), to_kv(s));
  EXPECT_EQ(back.seed, 77u);
}

TEST(Normalize, Properties) {
  const std::vector<double> unit{0.0, 0.25, 1.0, 0.5};
  const auto u = minmax_normalize<double>(unit);
  for (std::size_t i = 0; i < unit.size(); ++i) EXPECT_NEAR(u[i], unit[i], 1e-12);
  const std::vector<double> flat(6, 3.3);
  for (double v : minmax_normalize<double>(flat)) EXPECT_EQ(v, 0.0);
  std::mt19937_64 gen(1);
  std::uniform_real_distribution<double> d(-5, 5), a(0.1, 10);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> x(20), y(20);
    const double sa = a(gen), sb = d(gen);
    for (std::size_t i = 0; i < x.size(); ++i) {
      x[i] = d(gen);
      y[i] = sa * x[i] + sb;
    }
    const auto nx = minmax_normalize<double>(x), ny = minmax_normalize<double>(y);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(nx[i], ny[i], 1e-12);
  }
}

TEST(Triplets, CountsAndCenters) {
  auto s = small_spec(1, 3, 16);
  EXPECT_EQ(make_triplets(generate_volume(s, 0)).size(), 1u);
  s.depth = 10;
  const auto v = generate_volume(s, 0);
  const auto t = make_triplets(v);
  ASSERT_EQ(t.size(), 8u);
  for (std::size_t i = 0; i < t.size(); ++i) EXPECT_EQ(t[i].center, i + 1);
}

TEST(Triplets, ContentIsNormalizedConsecutiveSlices) {
  auto s = small_spec(1, 6, 16);
  s.classes = 2;
  const auto v = generate_volume(s, 0);
  const auto norm = minmax_normalize<float>(v.voxels);
  const auto t = make_triplets(v);
  const std::size_t HW = 256;
  for (const auto& tr : t) {
    ASSERT_EQ(tr.x.size(), 3 * HW);
    ASSERT_EQ(tr.y.size(), 3 * 2 * HW);
    for (std::size_t s3 = 0; s3 < 3; ++s3)
      for (std::size_t i = 0; i < HW; ++i) {
        EXPECT_EQ(tr.x[s3 * HW + i], norm[(tr.center - 1 + s3) * HW + i]);
        const auto lab = v.label_slice(tr.center - 1 + s3)[i];
        EXPECT_EQ(tr.y[(s3 * 2 + 0) * HW + i], lab == 1 ? 1.f : 0.f);
        EXPECT_EQ(tr.y[(s3 * 2 + 1) * HW + i], lab == 2 ? 1.f : 0.f);
      }
  }
}

TEST(Split, SevenOneTwoWithoutLeakage) {
  const auto s = split_dataset(10);
  EXPECT_EQ(s.train.size(), 7u);
  EXPECT_EQ(s.val.size(), 1u);
  EXPECT_EQ(s.test.size(), 2u);
  std::set<std::size_t> all(s.train.begin(), s.train.end());
  all.insert(s.val.begin(), s.val.end());
  all.insert(s.test.begin(), s.test.end());
  EXPECT_EQ(all.size(), 10u);
  const auto again = split_dataset(10);
  EXPECT_EQ(again.test, s.test);
  bool moved = false;
  for (std::uint64_t seed = 1; seed < 6; ++seed) moved = moved || split_dataset(10, {}, seed).test != s.test;
  EXPECT_TRUE(moved);
}

TEST(Split, FortyVolumes) {
  const auto s = split_dataset(40);
  EXPECT_EQ(s.train.size(), 28u);
  EXPECT_EQ(s.val.size(), 4u);
  EXPECT_EQ(s.test.size(), 8u);
}

TEST(Resize, VolumeToInputSize) {
  const auto v = generate_volume(small_spec(1, 4, 64), 0);
  const auto r = resize_volume(v, 32);
  EXPECT_EQ(r.height, 32u);
  EXPECT_EQ(r.voxels.size(), 4u * 32 * 32);
  EXPECT_FLOAT_EQ(r.spacing[1], 2.0f);
  EXPECT_EQ(resize_volume(v, 64), v);
  const std::vector<float> flat(16, 0.5f);
  for (float x : resize_bilinear(flat, 4, 4, 8, 8)) EXPECT_FLOAT_EQ(x, 0.5f);
}

TEST(Lgsv, RoundTripIsBitwise) {
  TempDir dir;
  auto s = small_spec(1, 5, 20);
  s.classes = 3;
  auto v = generate_volume(s, 0);
  v.spacing = {2.5f, 0.75f, 1.25f};
  v.id = "vol";
  const auto path = dir.str("vol.lgsv");
  write_volume(path, v);
  const auto back = read_volume(path);
  EXPECT_EQ(back, v);
  EXPECT_EQ(std::memcmp(back.voxels.data(), v.voxels.data(), v.voxels.size() * 4), 0);
  const auto bytes = lgsa::test::slurp(path);
  EXPECT_EQ(bytes.size(), 4 + 16 + 12 + 4 + 5u * 20 * 20 * 5);
  EXPECT_EQ(bytes.substr(0, 4), "LGSV");
}

TEST(Lgsv, RejectsCorruptFiles) {
  TempDir dir;
  const auto v = generate_volume(small_spec(1, 3, 8), 0);
  const auto path = dir.str("v.lgsv");
  write_volume(path, v);
  auto bytes = lgsa::test::slurp(path);
  {
    std::ofstream(path, std::ios::binary) << bytes.substr(0, bytes.size() - 1);
  }
  EXPECT_THROW(read_volume(path), FormatError);
  bytes[0] = 'X';
  {
    std::ofstream(path, std::ios::binary) << bytes;
  }
  EXPECT_THROW(read_volume(path), FormatError);
}

TEST(Pgm, HeaderIsBitExact) {
  TempDir dir;
  const std::vector<std::uint8_t> px{0, 1, 2, 3, 4, 5};
  write_pgm(dir.str("a.pgm"), 2, 3, px);
  EXPECT_EQ(lgsa::test::slurp(dir.str("a.pgm")), std::string("P5\n3 2\n255\n") + std::string("\0\1\2\3\4\5", 6));
  export_mask(dir.str("m.pgm"), 1, 3, std::vector<std::uint8_t>{0, 1, 1});
  EXPECT_EQ(lgsa::test::slurp(dir.str("m.pgm")), std::string("P5\n3 1\n255\n") + std::string("\0\xff\xff", 3));
  EXPECT_THROW(write_pgm(dir.str("b.pgm"), 2, 2, px), std::invalid_argument);
}

TEST(Checkpoint, RoundTripRebuildsNetwork) {
  TempDir dir;
  auto cfg = lgsa::test::tiny_net(3, 4, 16);
  cfg.sa_count = 2;
  cfg.lg_enabled = {true, false, true};
  LgsaNet<float> net(cfg, 5);
  net.params().entries()[0].tensor.values()[0] = 0.123f;
  const auto path = dir.str("m.ckpt");
  save_checkpoint(path, net.params(), net.descriptor_text());
  auto back = load_network<float>(path);
  EXPECT_EQ(back.seed(), 5u);
  EXPECT_EQ(to_kv(back.config()), to_kv(cfg));
  ASSERT_EQ(back.params().entries().size(), net.params().entries().size());
  for (std::size_t i = 0; i < net.params().entries().size(); ++i)
    EXPECT_EQ(back.params().entries()[i].tensor.values(), net.params().entries()[i].tensor.values());

  LgsaNet<float> other(lgsa::test::tiny_net(3, 8, 16), 0);
  EXPECT_THROW(load_into(read_checkpoint(path), other.params()), FormatError);
}
