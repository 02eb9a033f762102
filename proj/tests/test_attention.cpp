// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "oracles.hpp"
#include "property_checks.hpp"

using dmf::Tensor;
using TD = Tensor<double>;

namespace {

oracle::Vec vec(const TD& t) { return {t.data().begin(), t.data().end()}; }

void perturb(TD& t, dmf::Rng& rng) {
  std::normal_distribution<double> nd(0.0, 0.3);
  for (auto& v : t.mutable_data()) v += nd(rng);
}

}  // namespace

TEST(CrossAttention, MatchesPerHeadLoopOracle) {
  dmf::Rng rng(1);
  const std::size_t B = 2, M = 3, d = 8, C = 12, H = 3, W = 4, heads = 4;
  dmf::CrossAttention<double> ca(C, d, heads, rng);
  perturb(ca.ln_gamma, rng);
  perturb(ca.ln_beta, rng);
  perturb(ca.b_o, rng);
  auto Z = checks::random_tensor<double>({B, M, d}, rng);
  auto X = checks::random_tensor<double>({B, C, H, W}, rng);
  auto y = ca.forward(Z, X);
  ASSERT_EQ(y.shape(), Z.shape());
  for (std::size_t b = 0; b < B; ++b) {
    const oracle::Vec zb(Z.data().begin() + b * M * d, Z.data().begin() + (b + 1) * M * d);
    const oracle::Vec xb(X.data().begin() + b * C * H * W, X.data().begin() + (b + 1) * C * H * W);
    const auto ref = oracle::cross_attention(zb, xb, M, d, C, H * W, heads, vec(ca.ln_gamma), vec(ca.ln_beta),
                                             vec(ca.w_q), vec(ca.w_o), vec(ca.b_o));
    const oracle::Vec got(y.data().begin() + b * M * d, y.data().begin() + (b + 1) * M * d);
    EXPECT_LT(oracle::max_rel_diff(got, ref), 1e-12);
  }
}

TEST(Former, MatchesTransformerLoopOracle) {
  dmf::Rng rng(2);
  const std::size_t B = 2, M = 5, d = 12, heads = 3;
  dmf::Former<double> f(d, heads, rng);
  for (auto* t : {&f.ln1_gamma, &f.ln1_beta, &f.ln2_gamma, &f.ln2_beta, &f.b_q, &f.b_k, &f.b_v, &f.b_o, &f.b_ff1,
                  &f.b_ff2})
    perturb(*t, rng);
  auto Z = checks::random_tensor<double>({B, M, d}, rng);
  auto y = f.forward(Z);
  oracle::FormerWeights p{vec(f.ln1_gamma), vec(f.ln1_beta), vec(f.ln2_gamma), vec(f.ln2_beta), vec(f.w_q),
                          vec(f.b_q),       vec(f.w_k),      vec(f.b_k),       vec(f.w_v),      vec(f.b_v),
                          vec(f.w_o),       vec(f.b_o),      vec(f.w_ff1),     vec(f.b_ff1),    vec(f.w_ff2),
                          vec(f.b_ff2)};
  for (std::size_t b = 0; b < B; ++b) {
    const oracle::Vec zb(Z.data().begin() + b * M * d, Z.data().begin() + (b + 1) * M * d);
    const auto ref = oracle::transformer_block(zb, M, d, heads, p);
    const oracle::Vec got(y.data().begin() + b * M * d, y.data().begin() + (b + 1) * M * d);
    EXPECT_LT(oracle::max_rel_diff(got, ref), 1e-12);
  }
}

TEST(CrossAttention, TokensAreMixedPerSampleOnly) {
  // changing sample 1's feature map must not move sample 0's tokens
  dmf::Rng rng(3);
  dmf::CrossAttention<double> ca(8, 8, 2, rng);
  auto Z = checks::random_tensor<double>({2, 2, 8}, rng);
  auto X = checks::random_tensor<double>({2, 8, 3, 3}, rng);
  auto X2 = X.clone_leaf(false);
  for (std::size_t i = 72; i < 144; ++i) X2.mutable_data()[i] += 1.0;
  auto a = ca.forward(Z, X), b = ca.forward(Z, X2);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(a[i], b[i]);
  EXPECT_NE(a[16], b[16]);
}

TEST(CrossAttention, AccountingMatchesCounterAndClosedForm) {
  for (std::size_t heads : {1, 2, 4}) {
    dmf::Rng rng(4);
    const std::uint64_t M = 4, d = 8, C = 16, side = 5;
    dmf::CrossAttention<float> ca(C, d, heads, rng);
    dmf::Former<float> f(d, heads, rng);
    auto Z = checks::random_tensor<float>({1, M, d}, rng);
    auto X = checks::random_tensor<float>({1, C, side, side}, rng);
    dmf::NoGradGuard ng;
    dmf::MacCounter mc;
    f.forward(ca.forward(Z, X));
    dmf::FlopsReport r;
    ca.account(r, "ca", {C, side, side}, M);
    f.account(r, "f", M);
    EXPECT_EQ(r.total_macs(), mc.count());
    EXPECT_EQ(mc.count(), dmf::count_former_flops(M, d, side * side, C, heads));
  }
}

TEST(CrossAttention, FlopsScaling) {
  const auto v = checks::flops_scaling();
  EXPECT_TRUE(v.ok) << v.detail;
}

TEST(CrossAttention, RejectsIndivisibleHeads) {
  dmf::Rng rng(5);
  EXPECT_THROW(dmf::CrossAttention<float>(10, 8, 4, rng), dmf::ConfigError);
  EXPECT_THROW(dmf::Former<float>(10, 4, rng), dmf::ConfigError);
  dmf::CrossAttention<float> ok(8, 8, 4, rng);
  EXPECT_THROW(ok.forward(checks::random_tensor<float>({1, 2, 8}, rng), checks::random_tensor<float>({1, 4, 2, 2}, rng)),
               dmf::ConfigError);
}
