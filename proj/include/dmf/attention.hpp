// SPDX-License-Identifier: Apache-2.0
//
// Global-token path: cross-attention from the local feature map into the
// tokens, followed by a pre-norm transformer block over the tokens.
//
// Cross-attention has no key/value projections. Head i attends with
// q_i = LN(Z) Wq_i against the raw channel slice X_i of the feature map, so
// Wq_i maps d -> C/heads and the output projection maps C -> d.
#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include "dmf/flops.hpp"
#include "dmf/init.hpp"
#include "dmf/ops.hpp"

namespace dmf {

/// Exact MAC count of one cross-attention + Former pair for M tokens of width
/// d against a feature map with N positions and C channels. Head count does
/// not change the count.
inline std::uint64_t count_former_flops(std::uint64_t M, std::uint64_t d, std::uint64_t N, std::uint64_t C,
                                        std::uint64_t heads) {
  (void)heads;
  const std::uint64_t cross = M * d * C    // queries
                              + M * N * C  // scores
                              + M * N * C  // weighted values
                              + M * C * d;  // output projection
  const std::uint64_t former = 3 * M * d * d  // q, k, v
                               + M * M * d    // scores
                               + M * M * d    // weighted values
                               + M * d * d    // output projection
                               + 4 * M * d * d;  // FFN d -> 2d -> d
  return cross + former;
}

namespace detail {
/// [B,L,heads*dh] -> [B,heads,L,dh]
template <class T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t heads) {
  const std::size_t B = x.dim(0), L = x.dim(1), D = x.dim(2);
  return permute(reshape(x, {B, L, heads, D / heads}), {0, 2, 1, 3});
}
/// [B,heads,L,dh] -> [B,L,heads*dh]
template <class T>
Tensor<T> merge_heads(const Tensor<T>& x) {
  const std::size_t B = x.dim(0), H = x.dim(1), L = x.dim(2), dh = x.dim(3);
  return reshape(permute(x, {0, 2, 1, 3}), {B, L, H * dh});
}
}  // namespace detail

template <class T>
struct CrossAttention {
  Tensor<T> ln_gamma, ln_beta;  // [d]
  Tensor<T> w_q;                // [d, C], head i owns columns [i*C/h, (i+1)*C/h)
  Tensor<T> w_o, b_o;           // [C, d], [d]
  std::size_t heads = 1, channels = 0, token_dim = 0;

  CrossAttention() = default;
  CrossAttention(std::size_t channels_, std::size_t token_dim_, std::size_t heads_, Rng& rng)
      : heads(heads_), channels(channels_), token_dim(token_dim_) {
    if (heads == 0 || channels % heads != 0 || token_dim % heads != 0)
      throw ConfigError("cross attention: channels " + std::to_string(channels) + " and token dim " +
                        std::to_string(token_dim) + " must both be divisible by heads " + std::to_string(heads));
    ln_gamma = Tensor<T>::full({token_dim}, T(1), true);
    ln_beta = Tensor<T>::zeros({token_dim}, true);
    w_q = linear_weight<T>(token_dim, channels, rng);
    w_o = linear_weight<T>(channels, token_dim, rng);
    b_o = Tensor<T>::zeros({token_dim}, true);
  }

  /// Z[B,M,d], X[B,C,H,W] -> Z + CrossAttn(Z, X)
  Tensor<T> forward(const Tensor<T>& Z, const Tensor<T>& X) const {
    detail::require(Z.rank() == 3 && Z.dim(2) == token_dim, "cross attention: tokens " + shape_str(Z.shape()));
    detail::require(X.rank() == 4 && X.dim(1) == channels && X.dim(0) == Z.dim(0),
                    "cross attention: feature map " + shape_str(X.shape()) + " vs tokens " + shape_str(Z.shape()));
    const std::size_t B = X.dim(0), N = X.dim(2) * X.dim(3), dh = channels / heads;
    auto q = detail::split_heads(linear(layer_norm(Z, ln_gamma, ln_beta), w_q), heads);  // [B,h,M,dh]
    auto kv = reshape(X, {B, heads, dh, N});  // channel slices are contiguous
    auto scores = scale(matmul(q, kv), static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
    auto attn = softmax(scores, -1);                                            // [B,h,M,N]
    auto heads_out = detail::merge_heads(matmul(attn, kv, /*trans_b=*/true));  // [B,M,C]
    return add(Z, linear(heads_out, w_o, b_o));
  }

  void collect(const std::string& prefix, NamedTensors<T>& params) const {
    params.emplace_back(join_name(prefix, "ln.gamma"), ln_gamma);
    params.emplace_back(join_name(prefix, "ln.beta"), ln_beta);
    params.emplace_back(join_name(prefix, "w_q"), w_q);
    params.emplace_back(join_name(prefix, "w_o"), w_o);
    params.emplace_back(join_name(prefix, "b_o"), b_o);
  }

  void account(FlopsReport& r, const std::string& name, FeatureGeom x, std::uint64_t M) const {
    const std::uint64_t C = channels, d = token_dim, N = x.positions();
    const std::uint64_t macs = M * d * C + 2 * M * N * C + M * C * d;
    // layer norm, scale + softmax over scores, residual add
    const std::uint64_t aux = 4 * M * d + 4 * heads * M * N + M * d;
    r.add(name, "attention", macs, aux, 2 * d + d * C + C * d + d);
  }
};

template <class T>
struct Former {
  Tensor<T> ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
  Tensor<T> w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;  // [d,d], [d]
  Tensor<T> w_ff1, b_ff1, w_ff2, b_ff2;              // [d,2d], [2d], [2d,d], [d]
  std::size_t heads = 1, token_dim = 0;
  static constexpr std::size_t kFfnRatio = 2;

  Former() = default;
  Former(std::size_t token_dim_, std::size_t heads_, Rng& rng) : heads(heads_), token_dim(token_dim_) {
    if (heads == 0 || token_dim % heads != 0)
      throw ConfigError("former: token dim " + std::to_string(token_dim) + " not divisible by heads " +
                        std::to_string(heads));
    const std::size_t d = token_dim, hid = kFfnRatio * d;
    ln1_gamma = Tensor<T>::full({d}, T(1), true);
    ln1_beta = Tensor<T>::zeros({d}, true);
    ln2_gamma = Tensor<T>::full({d}, T(1), true);
    ln2_beta = Tensor<T>::zeros({d}, true);
    w_q = linear_weight<T>(d, d, rng);
    w_k = linear_weight<T>(d, d, rng);
    w_v = linear_weight<T>(d, d, rng);
    w_o = linear_weight<T>(d, d, rng);
    b_q = Tensor<T>::zeros({d}, true);
    b_k = Tensor<T>::zeros({d}, true);
    b_v = Tensor<T>::zeros({d}, true);
    b_o = Tensor<T>::zeros({d}, true);
    w_ff1 = linear_weight<T>(d, hid, rng);
    b_ff1 = Tensor<T>::zeros({hid}, true);
    w_ff2 = linear_weight<T>(hid, d, rng);
    b_ff2 = Tensor<T>::zeros({d}, true);
  }

  Tensor<T> forward(const Tensor<T>& Z) const {
    detail::require(Z.rank() == 3 && Z.dim(2) == token_dim, "former: tokens " + shape_str(Z.shape()));
    const std::size_t dh = token_dim / heads;
    auto h = layer_norm(Z, ln1_gamma, ln1_beta);
    auto q = detail::split_heads(linear(h, w_q, b_q), heads);
    auto k = detail::split_heads(linear(h, w_k, b_k), heads);
    auto v = detail::split_heads(linear(h, w_v, b_v), heads);
    auto scores = scale(matmul(q, k, /*trans_b=*/true), static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
    auto attn_out = linear(detail::merge_heads(matmul(softmax(scores, -1), v)), w_o, b_o);
    auto z1 = add(Z, attn_out);
    auto f = linear(activation(linear(layer_norm(z1, ln2_gamma, ln2_beta), w_ff1, b_ff1), Activation::gelu), w_ff2,
                    b_ff2);
    return add(z1, f);
  }

  void collect(const std::string& prefix, NamedTensors<T>& params) const {
    const std::pair<const char*, const Tensor<T>*> items[] = {
        {"ln1.gamma", &ln1_gamma}, {"ln1.beta", &ln1_beta}, {"w_q", &w_q},     {"b_q", &b_q},
        {"w_k", &w_k},             {"b_k", &b_k},           {"w_v", &w_v},     {"b_v", &b_v},
        {"w_o", &w_o},             {"b_o", &b_o},           {"ln2.gamma", &ln2_gamma}, {"ln2.beta", &ln2_beta},
        {"ffn.w1", &w_ff1},        {"ffn.b1", &b_ff1},      {"ffn.w2", &w_ff2}, {"ffn.b2", &b_ff2}};
    for (const auto& [n, t] : items) params.emplace_back(join_name(prefix, n), *t);
  }

  void account(FlopsReport& r, const std::string& name, std::uint64_t M) const {
    const std::uint64_t d = token_dim;
    const std::uint64_t macs = 3 * M * d * d + 2 * M * M * d + M * d * d + 4 * M * d * d;
    const std::uint64_t aux = 8 * M * d + 4 * heads * M * M + 2 * M * d + 2 * M * d;
    const std::uint64_t params = 4 * d + 4 * (d * d + d) + (d * 2 * d + 2 * d) + (2 * d * d + d);
    r.add(name, "former", macs, aux, params);
  }
};

}  // namespace dmf
