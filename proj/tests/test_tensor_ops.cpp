#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "support.hpp"

using namespace lgsa;
using lgsa::test::random_tensor;

namespace {

// Direct loop convolution, zero padding, stride 1.
std::vector<double> conv_oracle(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b,
                                std::size_t pad) {
  const auto B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), O = w.dim(0), k = w.dim(2);
  const auto Ho = H + 2 * pad - k + 1, Wo = W + 2 * pad - k + 1;
  std::vector<double> out(B * O * Ho * Wo);
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t y = 0; y < Ho; ++y)
        for (std::size_t xx = 0; xx < Wo; ++xx) {
          double s = b.data()[o];
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) {
                const long iy = static_cast<long>(y + ky) - static_cast<long>(pad);
                const long ix = static_cast<long>(xx + kx) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W)) continue;
                s += w.data()[((o * C + c) * k + ky) * k + kx] * x.data()[((n * C + c) * H + iy) * W + ix];
              }
          out[((n * O + o) * Ho + y) * Wo + xx] = s;
        }
  return out;
}

double bilinear_oracle(const std::vector<double>& img, std::size_t H, std::size_t W, std::size_t oy, std::size_t ox) {
  auto src = [](std::size_t o, std::size_t n) {
    return std::clamp((o + 0.5) / 2.0 - 0.5, 0.0, static_cast<double>(n - 1));
  };
  const double sy = src(oy, H), sx = src(ox, W);
  const auto y0 = static_cast<std::size_t>(std::floor(sy)), x0 = static_cast<std::size_t>(std::floor(sx));
  const auto y1 = std::min(y0 + 1, H - 1), x1 = std::min(x0 + 1, W - 1);
  const double fy = sy - y0, fx = sx - x0;
  return (1 - fy) * ((1 - fx) * img[y0 * W + x0] + fx * img[y0 * W + x1]) +
         fy * ((1 - fx) * img[y1 * W + x0] + fx * img[y1 * W + x1]);
}

}  // namespace

TEST(Conv2d, MatchesLoopOracle3x3) {
  std::mt19937_64 gen(1);
  auto x = random_tensor(gen, {2, 3, 5, 7});
  auto w = random_tensor(gen, {4, 3, 3, 3});
  auto b = random_tensor(gen, {4});
  auto y = conv2d(x, w, b, 3, 1);
  ASSERT_EQ(y.shape(), (Shape{2, 4, 5, 7}));
  const auto ref = conv_oracle(x, w, b, 1);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.data()[i], ref[i], 1e-12);
}

TEST(Conv2d, MatchesLoopOracle1x1) {
  std::mt19937_64 gen(2);
  auto x = random_tensor(gen, {3, 5, 4, 4});
  auto w = random_tensor(gen, {2, 5, 1, 1});
  auto b = random_tensor(gen, {2});
  auto y = conv2d(x, w, b, 1, 0);
  const auto ref = conv_oracle(x, w, b, 0);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.data()[i], ref[i], 1e-12);
}

TEST(Conv2d, RejectsChannelMismatch) {
  auto x = Tensor<double>::zeros({1, 2, 4, 4});
  auto w = Tensor<double>::zeros({3, 5, 3, 3});
  auto b = Tensor<double>::zeros({3});
  EXPECT_THROW(conv2d(x, w, b, 3, 1), ShapeError);
}

TEST(Pool2, MaxAndAverage) {
  std::mt19937_64 gen(3);
  auto x = random_tensor(gen, {2, 2, 4, 6});
  auto mx = pool2(x, PoolKind::Max), av = pool2(x, PoolKind::Avg);
  ASSERT_EQ(mx.shape(), (Shape{2, 2, 2, 3}));
  for (std::size_t p = 0; p < 4; ++p)
    for (std::size_t y = 0; y < 2; ++y)
      for (std::size_t xx = 0; xx < 3; ++xx) {
        double m = -1e300, s = 0;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const double v = x.data()[p * 24 + (2 * y + dy) * 6 + 2 * xx + dx];
            m = std::max(m, v);
            s += v;
          }
        EXPECT_EQ(mx.data()[p * 6 + y * 3 + xx], m);
        EXPECT_NEAR(av.data()[p * 6 + y * 3 + xx], s / 4, 1e-15);
      }
}

TEST(Pool2, RejectsOddSize) {
  EXPECT_THROW(pool2(Tensor<double>::zeros({1, 1, 5, 4}), PoolKind::Max), ShapeError);
}

TEST(Upsample, MatchesHalfPixelBilinear) {
  std::mt19937_64 gen(4);
  auto x = random_tensor(gen, {1, 1, 3, 5});
  auto y = upsample_bilinear2(x);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 6, 10}));
  for (std::size_t oy = 0; oy < 6; ++oy)
    for (std::size_t ox = 0; ox < 10; ++ox)
      EXPECT_NEAR(y.data()[oy * 10 + ox], bilinear_oracle(x.values(), 3, 5, oy, ox), 1e-14);
}

TEST(Upsample, ConstantStaysConstant) {
  auto y = upsample_bilinear2(Tensor<double>::full({2, 3, 4, 4}, 0.7));
  for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 0.7);
}

TEST(BatchNorm, TrainModeNormalizesAndUpdatesRunningStats) {
  std::mt19937_64 gen(5);
  auto x = random_tensor(gen, {3, 2, 4, 4}, -2, 5);
  auto gamma = Tensor<double>::from({2}, {1.5, 0.5});
  auto beta = Tensor<double>::from({2}, {0.25, -1});
  auto rm = Tensor<double>::zeros({2});
  auto rv = Tensor<double>::full({2}, 1.0);
  auto y = batchnorm2d(x, gamma, beta, rm, rv, Mode::Train);
  for (std::size_t c = 0; c < 2; ++c) {
    double s = 0, ss = 0, xs = 0, xss = 0;
    for (std::size_t b = 0; b < 3; ++b)
      for (std::size_t i = 0; i < 16; ++i) {
        const double z = (y.data()[(b * 2 + c) * 16 + i] - beta.data()[c]) / gamma.data()[c];
        s += z;
        ss += z * z;
        const double v = x.data()[(b * 2 + c) * 16 + i];
        xs += v;
        xss += v * v;
      }
    EXPECT_NEAR(s / 48, 0, 1e-12);
    EXPECT_NEAR(ss / 48, 1, 1e-4);  // eps = 1e-5 shrinks the variance slightly
    const double mean = xs / 48, unbiased = (xss - 48 * mean * mean) / 47;
    EXPECT_NEAR(rm.data()[c], 0.1 * mean, 1e-12);
    EXPECT_NEAR(rv.data()[c], 0.9 + 0.1 * unbiased, 1e-12);
  }
}

TEST(BatchNorm, EvalModeUsesRunningStats) {
  auto x = Tensor<double>::from({1, 1, 1, 2}, {1.0, 3.0});
  auto gamma = Tensor<double>::from({1}, {2.0});
  auto beta = Tensor<double>::from({1}, {1.0});
  auto rm = Tensor<double>::from({1}, {1.0});
  auto rv = Tensor<double>::from({1}, {4.0 - 1e-5});
  auto y = batchnorm2d(x, gamma, beta, rm, rv, Mode::Eval);
  EXPECT_NEAR(y.data()[0], 1.0, 1e-12);
  EXPECT_NEAR(y.data()[1], 3.0, 1e-12);
  EXPECT_EQ(rm.data()[0], 1.0);
}

TEST(BatchNorm, TrainModeNeedsTwoValues) {
  auto gamma = Tensor<double>::full({1}, 1.0), beta = Tensor<double>::zeros({1});
  auto rm = Tensor<double>::zeros({1}), rv = Tensor<double>::full({1}, 1.0);
  EXPECT_THROW(batchnorm2d(Tensor<double>::zeros({1, 1, 1, 1}), gamma, beta, rm, rv, Mode::Train), ShapeError);
}

TEST(Activations, ReluSigmoidValues) {
  auto x = Tensor<double>::from({1, 1, 1, 4}, {-2.0, 0.0, 0.5, 800.0});
  auto r = relu(x);
  EXPECT_EQ(r.values(), (std::vector<double>{0, 0, 0.5, 800}));
  EXPECT_TRUE(std::isnan(relu(Tensor<double>::from({1, 1, 1, 1}, {std::nan("")})).data()[0]));
  auto s = sigmoid(Tensor<double>::from({1, 1, 1, 3}, {0.0, -800.0, 800.0}));
  EXPECT_DOUBLE_EQ(s.data()[0], 0.5);
  EXPECT_TRUE(std::isfinite(s.data()[1]));
  EXPECT_NEAR(s.data()[1], 0.0, 1e-300);
  EXPECT_DOUBLE_EQ(s.data()[2], 1.0);
}

TEST(SpatialSoftmax, SumsToOnePerMap) {
  std::mt19937_64 gen(6);
  auto x = random_tensor(gen, {6, 1, 4, 5}, -30, 30);
  auto y = spatial_softmax(x);
  for (std::size_t m = 0; m < 6; ++m) {
    double s = 0;
    for (std::size_t i = 0; i < 20; ++i) s += y.data()[m * 20 + i];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  auto u = spatial_softmax(Tensor<double>::full({1, 1, 4, 4}, 3.0));
  for (double v : u.data()) EXPECT_DOUBLE_EQ(v, 1.0 / 16);
  EXPECT_THROW(spatial_softmax(random_tensor(gen, {1, 3, 4, 4})), ShapeError);
}

TEST(ChannelReduce, MaxAndMean) {
  auto x = Tensor<double>::from({1, 3, 1, 2}, {1, -1, 4, 2, -3, 9});
  auto mx = channel_reduce(x, PoolKind::Max), av = channel_reduce(x, PoolKind::Avg);
  ASSERT_EQ(mx.shape(), (Shape{1, 1, 1, 2}));
  EXPECT_EQ(mx.values(), (std::vector<double>{4, 9}));
  EXPECT_NEAR(av.data()[0], 2.0 / 3, 1e-15);
  EXPECT_NEAR(av.data()[1], 10.0 / 3, 1e-15);
}

TEST(Structure, ConcatAndSliceRoundTrip) {
  std::mt19937_64 gen(7);
  auto a = random_tensor(gen, {2, 1, 3, 3}), b = random_tensor(gen, {2, 2, 3, 3});
  auto c = concat_channels<double>({a, b});
  ASSERT_EQ(c.shape(), (Shape{2, 3, 3, 3}));
  EXPECT_EQ(c.at(1, 0, 2, 1), a.at(1, 0, 2, 1));
  EXPECT_EQ(c.at(1, 2, 0, 0), b.at(1, 1, 0, 0));
  auto s = concat_batch<double>({a, a, a});
  EXPECT_EQ(slice_batch(s, 2, 2).values(), a.values());
  EXPECT_THROW(slice_batch(s, 5, 2), ShapeError);
  EXPECT_THROW(concat_channels<double>({a, Tensor<double>::zeros({1, 1, 3, 3})}), ShapeError);
}

TEST(Autodiff, QuadraticGradient) {
  auto x = Tensor<double>::from({1, 1, 1, 3}, {1, -2, 3}, true);
  auto y = sum(mul(x, x));
  y.backward();
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{2, -4, 6}));
}

TEST(Autodiff, ReusedNodeAccumulates) {
  auto x = Tensor<double>::from({1, 1, 1, 2}, {0.5, 2}, true);
  auto y = add(scale(x, 3.0), x);  // dy/dx = 4
  sum(y).backward();
  EXPECT_EQ(x.grad()[0], 4.0);
  EXPECT_EQ(x.grad()[1], 4.0);
}

TEST(Autodiff, WeightedSumOfScalars) {
  auto a = Tensor<double>::scalar(2, true), b = Tensor<double>::scalar(5, true);
  auto s = weighted_sum<double>({a, b}, {0.25, -3});
  EXPECT_DOUBLE_EQ(s.item(), 0.5 - 15);
  s.backward();
  EXPECT_EQ(a.grad()[0], 0.25);
  EXPECT_EQ(b.grad()[0], -3.0);
}

TEST(Autodiff, NoGradGuardRecordsNothing) {
  auto x = Tensor<double>::from({1, 1, 1, 2}, {1, 2}, true);
  NoGradGuard ng;
  auto y = sum(mul(x, x));
  EXPECT_TRUE(y.is_leaf());
  EXPECT_FALSE(y.requires_grad());
}

TEST(Autodiff, BackwardNeedsScalar) {
  auto x = Tensor<double>::from({1, 1, 1, 2}, {1, 2}, true);
  auto y = mul(x, x);
  EXPECT_THROW(y.backward(), GraphError);
}

TEST(Autodiff, SharedUseAccumulatesAndSecondBackwardIsRejected) {
  auto w = Tensor<double>::from({1, 1, 1, 3}, {0.5, -1, 2}, true);
  auto x = Tensor<double>::from({1, 1, 1, 3}, {1, 2, 3});
  auto unused = Tensor<double>::from({1, 1, 1, 3}, {1, 1, 1}, true);
  auto loss = sum(add(mul(w, x), mul(w, x)));
  loss.backward();
  EXPECT_EQ(std::vector<double>(w.grad().begin(), w.grad().end()), (std::vector<double>{2, 4, 6}));
  EXPECT_FALSE(unused.has_grad());
  EXPECT_THROW(loss.backward(), GraphError);
}

TEST(Elementwise, RejectsShapeMismatch) {
  EXPECT_THROW(add(Tensor<double>::zeros({1, 1, 2, 2}), Tensor<double>::zeros({1, 1, 2, 3})), ShapeError);
}

TEST(Elementwise, ChannelBroadcast) {
  auto x = Tensor<double>::from({1, 2, 1, 2}, {1, 2, 3, 4});
  auto g = Tensor<double>::from({1, 1, 1, 2}, {10, 100});
  EXPECT_EQ(mul_channel_broadcast(x, g).values(), (std::vector<double>{10, 200, 30, 400}));
}
