#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"

using namespace lgsa;

namespace {

void set_grad(Tensor<double>& t, std::vector<double> g) {
  auto dst = t.mutable_grad();
  std::copy(g.begin(), g.end(), dst.begin());
}

}  // namespace

TEST(Adam, FirstStepByHand) {
  ParamStore<double> ps;
  auto p = ps.add("w", {2});
  p.values() = {1.0, -2.0};
  AdamOptions o;
  o.lr = 0.1;
  o.weight_decay = 0.01;
  auto st = make_adam(ps, o);
  set_grad(p, {0.5, 0.1});
  adam_step(ps, st);
  // g' = g + wd*p; m = 0.1 g'; v = 0.001 g'^2; mhat = g'; vhat = g'^2.
  for (int i = 0; i < 2; ++i) {
    const double p0 = i == 0 ? 1.0 : -2.0, g = (i == 0 ? 0.5 : 0.1) + 0.01 * p0;
    const double m = 0.1 * g, v = 0.001 * g * g;
    const double expected = p0 - 0.1 * (m / 0.1) / (std::sqrt(v / 0.001) + 1e-8);
    EXPECT_NEAR(p.data()[i], expected, 1e-15);
  }
  EXPECT_FALSE(p.has_grad());
}

TEST(Adam, SecondStepUsesBiasCorrection) {
  ParamStore<double> ps;
  auto p = ps.add("w", {1});
  p.values() = {0.3};
  AdamOptions o;
  o.lr = 0.01;
  o.weight_decay = 0;
  auto st = make_adam(ps, o);
  set_grad(p, {2.0});
  adam_step(ps, st);
  const double after1 = 0.3 - 0.01 * 2.0 / (2.0 + 1e-8);
  EXPECT_NEAR(p.data()[0], after1, 1e-15);
  set_grad(p, {-1.0});
  adam_step(ps, st);
  const double m = 0.9 * 0.2 + 0.1 * -1.0, v = 0.999 * 0.004 + 0.001 * 1.0;
  const double mhat = m / (1 - 0.81), vhat = v / (1 - 0.999 * 0.999);
  EXPECT_NEAR(p.data()[0], after1 - 0.01 * mhat / (std::sqrt(vhat) + 1e-8), 1e-15);
  EXPECT_EQ(st.step, 2u);
}

TEST(Adam, BuffersAreNotUpdated) {
  ParamStore<double> ps;
  auto b = ps.add("running", {1}, false, 5.0);
  auto w = ps.add("w", {1});
  auto st = make_adam(ps);
  set_grad(w, {1.0});
  adam_step(ps, st);
  EXPECT_EQ(b.data()[0], 5.0);
  EXPECT_NE(w.data()[0], 0.0);
}

TEST(Adam, MissingGradient) {
  ParamStore<double> ps;
  ps.add("a", {1});
  auto b = ps.add("b", {1});
  auto st = make_adam(ps);
  set_grad(b, {1.0});
  EXPECT_THROW(adam_step(ps, st), MissingGradient);
  set_grad(b, {1.0});
  EXPECT_NO_THROW(adam_step(ps, st, true));
  EXPECT_EQ(ps.get("a").data()[0], 0.0);
}

TEST(Adam, MinimizesAQuadratic) {
  ParamStore<double> ps;
  auto x = ps.add("x", {1, 1, 1, 2});
  x.values() = {3.0, -4.0};
  AdamOptions o;
  o.lr = 0.05;
  o.weight_decay = 0;
  auto st = make_adam(ps, o);
  for (int i = 0; i < 2000; ++i) {
    sum(mul(x, x)).backward();
    adam_step(ps, st);
  }
  EXPECT_NEAR(x.data()[0], 0.0, 1e-2);
  EXPECT_NEAR(x.data()[1], 0.0, 1e-2);
}

TEST(ParamStore, DuplicateNamesAndClone) {
  ParamStore<double> ps;
  ps.add("a", {2}, true, 1.0);
  EXPECT_THROW(ps.add("a", {2}), std::invalid_argument);
  auto copy = ps.clone();
  ps.get("a").values()[0] = 9;
  EXPECT_EQ(copy.get("a").data()[0], 1.0);
  ps.assign_from(copy);
  EXPECT_EQ(ps.get("a").data()[0], 1.0);
  EXPECT_EQ(ps.trainable_count(), 2u);
}
