// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "dmf/ops.hpp"
#include "oracles.hpp"

using dmf::Tensor;
using TD = Tensor<double>;

namespace {

TD from(const oracle::Vec& v, dmf::Shape s, bool grad = false) { return TD::from(std::move(s), v, grad); }
oracle::Vec vec(const TD& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST(TensorCore, ShapeAndIndexing) {
  auto t = TD::zeros({2, 3, 4});
  EXPECT_EQ(t.numel(), 24u);
  EXPECT_EQ(t.dim(-1), 4u);
  EXPECT_EQ(t.dim(0), 2u);
  EXPECT_THROW((void)t.dim(3), dmf::ConfigError);
  EXPECT_THROW(TD::from({2, 2}, {1.0, 2.0}), dmf::ConfigError);
  EXPECT_THROW((void)t.item(), dmf::ConfigError);
}

TEST(TensorCore, ConvMatchesNestedLoopOracle) {
  std::mt19937_64 rng(1);
  struct Case {
    std::size_t B, Cin, H, W, Cout, k, stride, pad, groups;
  };
  for (const Case& c : {Case{2, 3, 7, 6, 4, 3, 1, 1, 1}, Case{1, 4, 8, 8, 6, 3, 2, 1, 2}, Case{2, 6, 5, 7, 6, 3, 1, 1, 6},
                        Case{3, 8, 4, 4, 8, 1, 1, 0, 4}, Case{1, 3, 9, 9, 5, 5, 2, 2, 1}, Case{2, 4, 6, 6, 4, 3, 2, 1, 4}}) {
    const auto x = oracle::randn(c.B * c.Cin * c.H * c.W, rng);
    const auto w = oracle::randn(c.Cout * (c.Cin / c.groups) * c.k * c.k, rng);
    std::size_t Ho, Wo;
    const auto ref = oracle::conv2d(x, w, c.B, c.Cin, c.H, c.W, c.Cout, c.k, c.stride, c.pad, c.groups, Ho, Wo);
    auto y = dmf::conv2d(from(x, {c.B, c.Cin, c.H, c.W}), from(w, {c.Cout, c.Cin / c.groups, c.k, c.k}), TD{},
                         c.stride, c.pad, c.groups);
    ASSERT_EQ(y.shape(), (dmf::Shape{c.B, c.Cout, Ho, Wo}));
    EXPECT_LT(oracle::max_rel_diff(vec(y), ref), 1e-12);
  }
}

TEST(TensorCore, ConvRejectsBadGroups) {
  EXPECT_THROW(dmf::conv2d(TD::zeros({1, 3, 4, 4}), TD::zeros({4, 1, 3, 3}), TD{}, 1, 1, 2), dmf::ConfigError);
  EXPECT_THROW(dmf::conv2d(TD::zeros({1, 4, 4, 4}), TD::zeros({4, 3, 3, 3}), TD{}, 1, 1, 1), dmf::ConfigError);
}

TEST(TensorCore, MatmulMatchesOracle) {
  std::mt19937_64 rng(2);
  const auto a = oracle::randn(2 * 3 * 4, rng), b = oracle::randn(2 * 4 * 5, rng);
  auto y = dmf::matmul(from(a, {2, 3, 4}), from(b, {2, 4, 5}));
  for (std::size_t batch = 0; batch < 2; ++batch) {
    const auto ref = oracle::matmul(oracle::Vec(a.begin() + batch * 12, a.begin() + (batch + 1) * 12),
                                    oracle::Vec(b.begin() + batch * 20, b.begin() + (batch + 1) * 20), 3, 4, 5);
    for (std::size_t i = 0; i < 15; ++i) EXPECT_NEAR(y[batch * 15 + i], ref[i], 1e-12);
  }
  // trans_b reads b as [n,k]
  auto bt = dmf::permute(from(b, {2, 4, 5}), {0, 2, 1});
  auto y2 = dmf::matmul(from(a, {2, 3, 4}), TD::from(bt.shape(), bt.vec()), true);
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y2[i], y[i], 1e-12);
}

TEST(TensorCore, ActivationsMatchFormulas) {
  std::vector<double> xs;
  for (double x = -6.0; x <= 6.0; x += 0.05) xs.push_back(x);
  const auto n = xs.size();
  auto x = from(xs, {n});
  auto g = dmf::activation(x, dmf::Activation::gelu);
  auto r = dmf::activation(x, dmf::Activation::relu);
  auto s = dmf::activation(x, dmf::Activation::sigmoid);
  auto h = dmf::activation(x, dmf::Activation::hard_swish);
  for (std::size_t i = 0; i < n; ++i) {
    EXPECT_NEAR(g[i], oracle::gelu_tanh(xs[i]), 1e-9);
    EXPECT_NEAR(g[i], oracle::gelu_erf(xs[i]), 1e-3);  // tanh form approximates the erf form
    EXPECT_EQ(r[i], std::max(0.0, xs[i]));
    EXPECT_NEAR(s[i], oracle::sigmoid(xs[i]), 1e-15);
    EXPECT_NEAR(h[i], oracle::hard_swish(xs[i]), 1e-15);
  }
  EXPECT_THROW(dmf::parse_activation("swish"), dmf::ConfigError);
  EXPECT_EQ(dmf::parse_activation("gelu"), dmf::Activation::gelu);
}

TEST(TensorCore, SoftmaxMatchesDefinition) {
  std::mt19937_64 rng(3);
  const auto v = oracle::randn(4 * 7, rng, 3.0);
  auto y = dmf::softmax(from(v, {4, 7}), -1);
  for (std::size_t r = 0; r < 4; ++r) {
    const auto ref = oracle::softmax(oracle::Vec(v.begin() + r * 7, v.begin() + (r + 1) * 7));
    for (std::size_t j = 0; j < 7; ++j) EXPECT_NEAR(y[r * 7 + j], ref[j], 1e-14);
  }
  // large logits stay finite thanks to the max shift
  auto big = dmf::softmax(TD::from({1, 3}, {1000.0, 1000.0, 0.0}), -1);
  EXPECT_NEAR(big[0], 0.5, 1e-12);
  EXPECT_NEAR(big[2], 0.0, 1e-12);
}

TEST(TensorCore, BatchNormRunningAverages) {
  std::mt19937_64 rng(4);
  dmf::BatchNormState<double> st(2);
  double rm[2] = {0.0, 0.0}, rv[2] = {1.0, 1.0};
  for (int it = 0; it < 5; ++it) {
    const auto v = oracle::randn(3 * 2 * 4, rng, 1.0 + it);
    dmf::batch_norm(from(v, {3, 2, 4}), st, true);
    for (std::size_t c = 0; c < 2; ++c) {
      double m = 0.0, ss = 0.0;
      for (std::size_t b = 0; b < 3; ++b)
        for (std::size_t p = 0; p < 4; ++p) m += v[(b * 2 + c) * 4 + p];
      m /= 12.0;
      for (std::size_t b = 0; b < 3; ++b)
        for (std::size_t p = 0; p < 4; ++p) ss += std::pow(v[(b * 2 + c) * 4 + p] - m, 2);
      rm[c] = 0.9 * rm[c] + 0.1 * m;
      rv[c] = 0.9 * rv[c] + 0.1 * ss / 11.0;  // unbiased
    }
  }
  for (std::size_t c = 0; c < 2; ++c) {
    EXPECT_NEAR(st.running_mean[c], rm[c], 1e-12);
    EXPECT_NEAR(st.running_var[c], rv[c], 1e-12);
  }
  // eval mode uses the running statistics
  const auto x = oracle::randn(2 * 2 * 3, rng);
  auto y = dmf::batch_norm(from(x, {2, 2, 3}), st, false);
  const auto ref = oracle::bn_eval(x, 2, 2, 3, vec(st.gamma), vec(st.beta), vec(st.running_mean), vec(st.running_var));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
}

TEST(TensorCore, BatchNormPassThroughIsExactIdentity) {
  dmf::BatchNormState<float> st(3);
  st.make_pass_through();
  std::mt19937_64 rng(5);
  std::normal_distribution<float> nd;
  std::vector<float> v(2 * 3 * 5);
  for (auto& x : v) x = nd(rng);
  auto y = dmf::batch_norm(Tensor<float>::from({2, 3, 5}, v), st, false);
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_EQ(y[i], v[i]);
}

TEST(TensorCore, LayerNormMatchesOracle) {
  std::mt19937_64 rng(6);
  const auto x = oracle::randn(3 * 8, rng), g = oracle::randn(8, rng), b = oracle::randn(8, rng);
  auto y = dmf::layer_norm(from(x, {3, 8}), from(g, {8}), from(b, {8}));
  const auto ref = oracle::layer_norm(x, 8, g, b);
  EXPECT_LT(oracle::max_rel_diff(vec(y), ref), 1e-12);
}

TEST(TensorCore, CrossEntropyValues) {
  auto l = dmf::cross_entropy(TD::from({1, 2}, {0.0, 0.0}), {0});
  EXPECT_NEAR(l.item(), std::log(2.0), 1e-15);
  auto l2 = dmf::cross_entropy(TD::from({2, 3}, {1.0, 2.0, 3.0, 0.5, 0.5, 0.5}), {2, 1});
  const double lse = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0));
  EXPECT_NEAR(l2.item(), 0.5 * ((lse - 3.0) + std::log(3.0)), 1e-14);
  // smoothing s: target (1-s) one-hot + s/K
  auto l3 = dmf::cross_entropy(TD::from({1, 2}, {0.0, 0.0}), {0}, 0.1);
  EXPECT_NEAR(l3.item(), std::log(2.0), 1e-15);
  EXPECT_THROW(dmf::cross_entropy(TD::from({1, 2}, {0.0, 0.0}), {2}), dmf::ConfigError);
}

TEST(TensorCore, GradientAccumulatesOverReuse) {
  auto x = TD::from({3}, {1.0, -2.0, 0.5}, true);
  auto loss = dmf::sum(dmf::add(dmf::mul(x, x), x));  // d/dx = 2x + 1
  dmf::backward(loss);
  EXPECT_DOUBLE_EQ(x.grad()[0], 3.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], -3.0);
  EXPECT_DOUBLE_EQ(x.grad()[2], 2.0);
}

TEST(TensorCore, BackwardErrors) {
  auto x = TD::from({2}, {1.0, 2.0}, true);
  EXPECT_THROW(dmf::backward(dmf::scale(x, 2.0)), dmf::GraphError);  // non-scalar
  auto loss = dmf::sum(dmf::mul(x, x));
  dmf::backward(loss);
  EXPECT_THROW(dmf::backward(loss), dmf::GraphError);  // consumed
  auto c = TD::from({2}, {1.0, 2.0});
  EXPECT_THROW(dmf::backward(dmf::sum(c)), dmf::GraphError);  // nothing requires grad
  auto y = dmf::sum(dmf::mul(x, x));
  EXPECT_THROW(dmf::backward(dmf::sum(y.detach())), dmf::GraphError);
}

TEST(TensorCore, NoGradGuardRecordsNothing) {
  auto x = TD::from({2}, {1.0, 2.0}, true);
  {
    dmf::NoGradGuard g;
    auto y = dmf::mul(x, x);
    EXPECT_FALSE(y.requires_grad());
  }
  EXPECT_TRUE(dmf::mul(x, x).requires_grad());
}

TEST(TensorCore, NonFiniteForwardRaisesNumericError) {
  auto x = TD::from({2}, {INFINITY, 1.0});
  EXPECT_THROW(dmf::scale(x, 1.0), dmf::NumericError);
}

TEST(TensorCore, ShapeOpsRoundTrip) {
  std::mt19937_64 rng(7);
  const auto v = oracle::randn(24, rng);
  auto a = from(v, {2, 3, 4});
  auto p = dmf::permute(dmf::permute(a, {2, 0, 1}), {1, 2, 0});
  EXPECT_EQ(p.vec(), a.vec());
  auto s = dmf::concat<double>({dmf::slice(a, 1, 0, 1), dmf::slice(a, 1, 1, 2)}, 1);
  EXPECT_EQ(s.vec(), a.vec());
  auto e = dmf::expand_leading(from(v, {24}), 3);
  EXPECT_EQ(e.shape(), (dmf::Shape{3, 24}));
  EXPECT_EQ(e[48 + 5], v[5]);
  EXPECT_THROW(dmf::reshape(a, {5, 5}), dmf::ConfigError);
}

TEST(TensorCore, MacCounterCountsGemmWork) {
  dmf::MacCounter mc;
  dmf::matmul(TD::zeros({2, 3, 4}), TD::zeros({2, 4, 5}));
  EXPECT_EQ(mc.count(), 2u * 3 * 4 * 5);
}

TEST(TensorCore, DropoutIdentityInEvalAndScaledInTraining) {
  std::mt19937_64 rng(8);
  auto x = TD::full({1000}, 1.0);
  EXPECT_EQ(dmf::dropout(x, 0.5, false, rng).vec(), x.vec());
  auto y = dmf::dropout(x, 0.5, true, rng);
  std::size_t zeros = 0;
  for (double v : y.data()) {
    EXPECT_TRUE(v == 0.0 || v == 2.0);
    zeros += v == 0.0;
  }
  EXPECT_GT(zeros, 400u);
  EXPECT_LT(zeros, 600u);
}
