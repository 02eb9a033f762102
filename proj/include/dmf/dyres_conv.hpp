// SPDX-License-Identifier: Apache-2.0
//
// Dynamic residual convolution.
//
//   scores  = act((W2 relu(W1 [GAP(x) ; z1] + b1) + b2) / tau)        [B,K]
//   W_b     = sum_k scores[b,k] * W_static[k]  (+ W_input_agnostic)    per sample
//   y_b     = conv(x_b, W_b)
//
// W_static starts at exactly zero, so a fresh layer is the static conv with
// W_input_agnostic. Per-sample kernels are applied as one grouped conv over
// the batch folded into channels.
#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "dmf/flops.hpp"
#include "dmf/init.hpp"
#include "dmf/ops.hpp"

namespace dmf {

enum class ScoreMode {
  sigmoid,
  softmax,
  unit,  // every score fixed to 1; used for the static-kernel degeneracy check
};

inline ScoreMode parse_score_mode(std::string_view s) {
  if (s == "sigmoid") return ScoreMode::sigmoid;
  if (s == "softmax") return ScoreMode::softmax;
  if (s == "unit") return ScoreMode::unit;
  throw ConfigError("unknown score mode '" + std::string(s) + "'");
}

inline const char* score_mode_name(ScoreMode m) {
  switch (m) {
    case ScoreMode::sigmoid: return "sigmoid";
    case ScoreMode::softmax: return "softmax";
    case ScoreMode::unit: return "unit";
  }
  return "?";
}

/// Switches shared by every dynamic residual conv in a model. Each field maps
/// onto one ablation axis.
struct DyResOptions {
  std::size_t kernels = 8;
  ScoreMode score_mode = ScoreMode::sigmoid;
  bool residual = true;          // add W_input_agnostic
  bool token_input = true;       // feed the first global token to kernel attention
  bool zero_static_init = true;  // W_static starts at zero
  std::size_t reduction = 4;     // kernel-attention squeeze ratio
  bool dynamic = true;           // false: plain conv with W_input_agnostic only
};

/// Linear decay from tau_start at step 0 to 1 at anneal_steps.
struct TemperatureSchedule {
  double tau_start = 30.0;
  std::size_t anneal_steps = 0;

  double at(std::size_t step) const {
    if (step >= anneal_steps) return 1.0;
    const double frac = static_cast<double>(step) / static_cast<double>(anneal_steps);
    return tau_start + (1.0 - tau_start) * frac;
  }
};

inline double temperature_at(const TemperatureSchedule& s, std::size_t step) { return s.at(step); }

template <class T>
struct KernelSet {
  Tensor<T> w_static;          // [K, Cout, Cin/g, kh, kw]
  Tensor<T> w_input_agnostic;  // [Cout, Cin/g, kh, kw]; undefined when the residual is off
  Tensor<T> bias;              // optional [Cout], static
  std::size_t groups = 1;

  std::size_t kernels() const { return w_static.defined() ? w_static.dim(0) : 0; }
  Shape kernel_shape() const {
    if (!w_static.defined()) return w_input_agnostic.shape();
    return {w_static.dim(1), w_static.dim(2), w_static.dim(3), w_static.dim(4)};
  }
  std::size_t kernel_numel() const { return numel_of(kernel_shape()); }
  bool has_residual() const { return w_input_agnostic.defined(); }

  static KernelSet create(std::size_t cin, std::size_t cout, std::size_t k, std::size_t groups,
                          const DyResOptions& opt, bool with_bias, Rng& rng) {
    if (groups == 0 || cin % groups != 0 || cout % groups != 0)
      throw ConfigError("dyres conv: channels " + std::to_string(cin) + "->" + std::to_string(cout) +
                        " not divisible by groups " + std::to_string(groups));
    if (opt.kernels == 0) throw ConfigError("dyres conv: kernel count must be positive");
    if (opt.dynamic && !opt.residual && opt.zero_static_init)
      throw ConfigError("dyres conv: zero-initialized static kernels without the residual kernel never train");
    KernelSet ks;
    ks.groups = groups;
    const std::size_t cpg = cin / groups;
    if (opt.residual || !opt.dynamic) ks.w_input_agnostic = conv_weight<T>(cout, cpg, k, k, rng);
    if (!opt.dynamic) {
      // plain convolution: no static kernel bank
    } else if (opt.zero_static_init) {
      ks.w_static = Tensor<T>::zeros({opt.kernels, cout, cpg, k, k}, true);
    } else {
      const double bound = std::sqrt(6.0 / static_cast<double>(cpg * k * k));
      ks.w_static = uniform_param<T>({opt.kernels, cout, cpg, k, k}, bound, rng);
    }
    if (with_bias) ks.bias = Tensor<T>::zeros({cout}, true);
    return ks;
  }
};

template <class T>
struct KernelAttention {
  Tensor<T> w_reduce, b_reduce;  // [Din, hidden], [hidden]
  Tensor<T> w_expand, b_expand;  // [hidden, K], [K]
  ScoreMode mode = ScoreMode::sigmoid;
  std::size_t in_channels = 0, token_dim = 0;
  bool token_input = true;

  std::size_t input_dim() const { return in_channels + (token_input ? token_dim : 0); }
  std::size_t hidden() const { return w_reduce.dim(1); }
  std::size_t kernels() const { return w_expand.dim(1); }

  static KernelAttention create(std::size_t in_channels, std::size_t token_dim, const DyResOptions& opt, Rng& rng) {
    KernelAttention a;
    a.mode = opt.score_mode;
    a.in_channels = in_channels;
    a.token_dim = token_dim;
    a.token_input = opt.token_input;
    const std::size_t din = a.input_dim();
    const std::size_t hidden = std::max<std::size_t>(1, din / std::max<std::size_t>(1, opt.reduction));
    a.w_reduce = conv_like_linear(din, hidden, rng);
    a.b_reduce = Tensor<T>::zeros({hidden}, true);
    a.w_expand = conv_like_linear(hidden, opt.kernels, rng);
    a.b_expand = Tensor<T>::zeros({opt.kernels}, true);
    return a;
  }

 private:
  static Tensor<T> conv_like_linear(std::size_t din, std::size_t dout, Rng& rng) {
    return uniform_param<T>({din, dout}, std::sqrt(6.0 / static_cast<double>(din)), rng);
  }
};

/// Per-sample kernel scores [B,K] from pooled features and (optionally) the
/// first global token.
template <class T>
Tensor<T> kernel_attention_scores(const Tensor<T>& pooled, const Tensor<T>& first_token,
                                  const KernelAttention<T>& attn, double tau) {
  if (tau < 1.0) throw ConfigError("kernel attention: temperature must be >= 1, got " + std::to_string(tau));
  detail::require(pooled.rank() == 2 && pooled.dim(1) == attn.in_channels,
                  "kernel attention: pooled features " + shape_str(pooled.shape()) + " expected " +
                      std::to_string(attn.in_channels) + " channels");
  const std::size_t B = pooled.dim(0);
  if (attn.mode == ScoreMode::unit) return Tensor<T>::full({B, attn.kernels()}, T(1));
  Tensor<T> feat = pooled;
  if (attn.token_input) {
    detail::require(first_token.defined() && first_token.rank() == 2 && first_token.dim(0) == B &&
                        first_token.dim(1) == attn.token_dim,
                    "kernel attention: first token must be [" + std::to_string(B) + "," +
                        std::to_string(attn.token_dim) + "]");
    feat = concat<T>({pooled, first_token}, 1);
  }
  auto h = activation(linear(feat, attn.w_reduce, attn.b_reduce), Activation::relu);
  auto logits = linear(h, attn.w_expand, attn.b_expand);
  if (tau != 1.0) logits = scale(logits, static_cast<T>(1.0 / tau));
  return attn.mode == ScoreMode::softmax ? softmax(logits, 1) : activation(logits, Activation::sigmoid);
}

/// out[b] = sum_k scores[b,k] * W_static[k] (+ W_input_agnostic) -> [B, Cout, Cin/g, kh, kw]
template <class T>
Tensor<T> aggregate_kernel(const Tensor<T>& scores, const KernelSet<T>& ks) {
  const std::size_t K = ks.kernels();
  detail::require(scores.rank() == 2 && scores.dim(1) == K,
                  "aggregate_kernel: scores " + shape_str(scores.shape()) + " vs " + std::to_string(K) + " kernels");
  const std::size_t B = scores.dim(0), E = ks.kernel_numel();
  const Tensor<T> ws = ks.w_static, wia = ks.w_input_agnostic;
  std::vector<T> out(B * E, T(0));
  for (std::size_t b = 0; b < B; ++b) {
    T* o = out.data() + b * E;
    for (std::size_t k = 0; k < K; ++k) {
      const T s = scores[b * K + k];
      const T* w = ws.data().data() + k * E;
      for (std::size_t e = 0; e < E; ++e) o[e] += s * w[e];
      count_macs(E);
    }
    if (wia.defined())
      for (std::size_t e = 0; e < E; ++e) o[e] += wia[e];
  }
  Shape shape{B};
  for (auto d : ks.kernel_shape()) shape.push_back(d);
  return make_op<T>("aggregate_kernel", shape, std::move(out), {scores, ws, wia},
                    [scores, ws, wia, B, K, E](const std::vector<T>& g) {
                      if (scores.requires_grad()) {
                        std::vector<T> gs(B * K, T(0));
                        for (std::size_t b = 0; b < B; ++b)
                          for (std::size_t k = 0; k < K; ++k) {
                            T acc = T(0);
                            for (std::size_t e = 0; e < E; ++e) acc += g[b * E + e] * ws[k * E + e];
                            gs[b * K + k] = acc;
                          }
                        accumulate<T>(scores, gs);
                      }
                      if (ws.requires_grad()) {
                        std::vector<T> gw(K * E, T(0));
                        for (std::size_t b = 0; b < B; ++b)
                          for (std::size_t k = 0; k < K; ++k) {
                            const T s = scores[b * K + k];
                            for (std::size_t e = 0; e < E; ++e) gw[k * E + e] += s * g[b * E + e];
                          }
                        accumulate<T>(ws, gw);
                      }
                      if (wia.defined() && wia.requires_grad()) {
                        std::vector<T> gi(E, T(0));
                        for (std::size_t b = 0; b < B; ++b)
                          for (std::size_t e = 0; e < E; ++e) gi[e] += g[b * E + e];
                        accumulate<T>(wia, gi);
                      }
                    });
}

/// Convolves every sample with its own kernel w[B, Cout, Cin/g, kh, kw] by
/// folding the batch into the channel axis and running one grouped conv.
template <class T>
Tensor<T> per_sample_conv2d(const Tensor<T>& x, const Tensor<T>& w, std::size_t stride, std::size_t padding,
                            std::size_t groups) {
  detail::require(x.rank() == 4 && w.rank() == 5 && x.dim(0) == w.dim(0),
                  "per_sample_conv2d: input " + shape_str(x.shape()) + " vs kernels " + shape_str(w.shape()));
  const std::size_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3), Cout = w.dim(1);
  auto xf = reshape(x, {1, B * Cin, H, W});
  auto wf = reshape(w, {B * Cout, w.dim(2), w.dim(3), w.dim(4)});
  auto y = conv2d(xf, wf, Tensor<T>{}, stride, padding, B * groups);
  return reshape(y, {B, Cout, y.dim(2), y.dim(3)});
}

/// One dynamic residual convolution layer (kernel set + kernel attention).
template <class T>
struct DyResConv {
  KernelSet<T> kernels;
  KernelAttention<T> attention;
  std::size_t in_channels = 0, out_channels = 0, kernel_size = 1, stride = 1, padding = 0;
  bool dynamic = true;

  DyResConv() = default;
  DyResConv(std::size_t cin, std::size_t cout, std::size_t k, std::size_t stride_, std::size_t groups,
            std::size_t token_dim, const DyResOptions& opt, Rng& rng, bool with_bias = false)
      : in_channels(cin), out_channels(cout), kernel_size(k), stride(stride_), padding(k / 2), dynamic(opt.dynamic) {
    kernels = KernelSet<T>::create(cin, cout, k, groups, opt, with_bias, rng);
    if (dynamic) attention = KernelAttention<T>::create(cin, token_dim, opt, rng);
  }

  std::size_t groups() const { return kernels.groups; }

  Tensor<T> forward(const Tensor<T>& x, const Tensor<T>& first_token, double tau) const {
    detail::require(x.rank() == 4 && x.dim(1) == in_channels,
                    "dyres conv: input " + shape_str(x.shape()) + " expected " + std::to_string(in_channels) + " channels");
    if (!dynamic) {
      auto y = conv2d(x, kernels.w_input_agnostic, Tensor<T>{}, stride, padding, kernels.groups);
      return kernels.bias.defined() ? add_channel_bias(y, kernels.bias) : y;
    }
    if (attention.token_input && first_token.defined() && first_token.dim(0) != x.dim(0))
      throw ConfigError("dyres conv: batch mismatch between input (" + std::to_string(x.dim(0)) +
                        ") and first token (" + std::to_string(first_token.dim(0)) + ")");
    auto scores = kernel_attention_scores(global_avg_pool(x), first_token, attention, tau);
    auto w = aggregate_kernel(scores, kernels);
    auto y = per_sample_conv2d(x, w, stride, padding, kernels.groups);
    return kernels.bias.defined() ? add_channel_bias(y, kernels.bias) : y;
  }

  void collect(const std::string& prefix, NamedTensors<T>& params) const {
    if (kernels.w_static.defined()) params.emplace_back(join_name(prefix, "w_static"), kernels.w_static);
    if (kernels.w_input_agnostic.defined())
      params.emplace_back(join_name(prefix, "w_input_agnostic"), kernels.w_input_agnostic);
    if (kernels.bias.defined()) params.emplace_back(join_name(prefix, "bias"), kernels.bias);
    if (dynamic) {
      params.emplace_back(join_name(prefix, "attn.w_reduce"), attention.w_reduce);
      params.emplace_back(join_name(prefix, "attn.b_reduce"), attention.b_reduce);
      params.emplace_back(join_name(prefix, "attn.w_expand"), attention.w_expand);
      params.emplace_back(join_name(prefix, "attn.b_expand"), attention.b_expand);
    }
  }

  /// Analytic cost for a batch-1 input; returns the output geometry.
  FeatureGeom account(FlopsReport& r, const std::string& name, const std::string& kind, FeatureGeom in) const {
    const std::uint64_t k = kernel_size;
    FeatureGeom out{out_channels, conv_out(in.height, k, stride, padding), conv_out(in.width, k, stride, padding)};
    const std::uint64_t kernel_numel = kernels.kernel_numel();
    const std::uint64_t K = kernels.kernels();
    r.add(name + ".conv", kind, conv_macs(in_channels, out_channels, k, kernels.groups, out.height, out.width),
          kernels.bias.defined() ? out.elements() : 0,
          (kernels.has_residual() ? kernel_numel : 0) + (kernels.bias.defined() ? out_channels : 0));
    if (!dynamic) return out;
    {
      const std::uint64_t din = attention.input_dim(), hid = attention.hidden();
      const bool live = attention.mode != ScoreMode::unit;  // unit scores skip the attention path
      // pooling adds, relu, temperature scale, score activation
      r.add(name + ".kernel_attention", "kernel-attention", live ? din * hid + hid * K : 0,
            live ? in.elements() + hid + 2 * K : 0, din * hid + hid + hid * K + K);
    }
    r.add(name + ".aggregate", "kernel-attention", K * kernel_numel, 0, K * kernel_numel);
    if (kernels.has_residual()) r.add(name + ".aggregate_residual", "kernel-attention", 0, kernel_numel, 0);
    return out;
  }
};

}  // namespace dmf
