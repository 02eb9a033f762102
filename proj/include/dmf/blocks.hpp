// SPDX-License-Identifier: Apache-2.0
//
// Composite blocks of the network: DY-Mobile, IRFFN (with GRN), the full DMF
// block, the stem + lite bottleneck, downsampling and the classifier head.
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>

#include "dmf/attention.hpp"
#include "dmf/dyres_conv.hpp"
#include "dmf/flops.hpp"
#include "dmf/init.hpp"
#include "dmf/ops.hpp"

namespace dmf {

/// Per-forward switches: mode, current temperature and the generator used by
/// stochastic regularizers.
struct ForwardContext {
  bool training = false;
  double tau = 1.0;
  Rng* rng = nullptr;
};

template <class T>
struct ParamSet {
  NamedTensors<T> params;
  NamedTensors<T> buffers;
};

template <class T>
void collect_bn(const std::string& prefix, const BatchNormState<T>& bn, ParamSet<T>& out) {
  out.params.emplace_back(join_name(prefix, "gamma"), bn.gamma);
  out.params.emplace_back(join_name(prefix, "beta"), bn.beta);
  out.buffers.emplace_back(join_name(prefix, "running_mean"), bn.running_mean);
  out.buffers.emplace_back(join_name(prefix, "running_var"), bn.running_var);
}

// ---------------------------------------------------------------------------
// GRN
// ---------------------------------------------------------------------------

/// Global response normalization over x[B,C,H,W]:
///   G_c = ||x_c||_2 over spatial positions, N_c = G_c / (mean_c G + eps)
///   out = gamma * (x * N) + beta + x
template <class T>
Tensor<T> grn(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-6)) {
  detail::require(x.rank() == 4 && gamma.numel() == x.dim(1) && beta.numel() == x.dim(1),
                  "grn: input " + shape_str(x.shape()) + " vs affine size " + std::to_string(gamma.numel()));
  const std::size_t B = x.dim(0), C = x.dim(1), S = x.dim(2) * x.dim(3);
  std::vector<T> G(B * C), Nrm(B * C), denom(B);
  std::vector<T> out(x.numel());
  for (std::size_t b = 0; b < B; ++b) {
    T m = T(0);
    for (std::size_t c = 0; c < C; ++c) {
      T s = T(0);
      for (std::size_t p = 0; p < S; ++p) {
        const T v = x[(b * C + c) * S + p];
        s += v * v;
      }
      G[b * C + c] = std::sqrt(s);
      m += G[b * C + c];
    }
    denom[b] = m / static_cast<T>(C) + eps;
    for (std::size_t c = 0; c < C; ++c) {
      Nrm[b * C + c] = G[b * C + c] / denom[b];
      for (std::size_t p = 0; p < S; ++p) {
        const std::size_t i = (b * C + c) * S + p;
        out[i] = gamma[c] * (x[i] * Nrm[b * C + c]) + beta[c] + x[i];
      }
    }
  }
  return make_op<T>(
      "grn", x.shape(), std::move(out), {x, gamma, beta},
      [x, gamma, beta, G = std::move(G), Nrm = std::move(Nrm), denom = std::move(denom), B, C,
       S](const std::vector<T>& g) {
        std::vector<T> gg(C, T(0)), gb(C, T(0));
        std::vector<T> gx(x.requires_grad() ? x.numel() : 0, T(0));
        std::vector<T> a(C);
        for (std::size_t b = 0; b < B; ++b) {
          // a_c = dL/dN_c
          for (std::size_t c = 0; c < C; ++c) {
            T ac = T(0);
            for (std::size_t p = 0; p < S; ++p) {
              const std::size_t i = (b * C + c) * S + p;
              ac += g[i] * gamma[c] * x[i];
              gg[c] += g[i] * x[i] * Nrm[b * C + c];
              gb[c] += g[i];
            }
            a[c] = ac;
          }
          if (!x.requires_grad()) continue;
          const T D = denom[b];
          T cross = T(0);
          for (std::size_t c = 0; c < C; ++c) cross += a[c] * G[b * C + c];
          cross /= static_cast<T>(C) * D * D;
          for (std::size_t c = 0; c < C; ++c) {
            const T dG = a[c] / D - cross;
            const T Gc = G[b * C + c];
            for (std::size_t p = 0; p < S; ++p) {
              const std::size_t i = (b * C + c) * S + p;
              T v = g[i] * (gamma[c] * Nrm[b * C + c] + T(1));
              if (Gc > T(0)) v += dG * x[i] / Gc;
              gx[i] = v;
            }
          }
        }
        accumulate<T>(gamma, gg);
        accumulate<T>(beta, gb);
        if (x.requires_grad()) accumulate<T>(x, gx);
      });
}

// ---------------------------------------------------------------------------
// Stochastic depth
// ---------------------------------------------------------------------------

/// Per-sample branch dropping: in training each sample's branch is kept with
/// probability 1-rate and rescaled by 1/(1-rate). Identity in eval.
template <class T>
Tensor<T> drop_path(const Tensor<T>& x, double rate, bool training, Rng* rng) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("drop_path: rate must be in [0,1)");
  if (!training || rate == 0.0) return x;
  if (rng == nullptr) throw ConfigError("drop_path: training mode needs a random generator");
  const std::size_t B = x.dim(0), per = x.numel() / B;
  std::bernoulli_distribution keep(1.0 - rate);
  const T s = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> mask(B);
  for (auto& m : mask) m = keep(*rng) ? s : T(0);
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * mask[i / per];
  return make_op<T>("drop_path", x.shape(), std::move(out), {x}, [x, mask, per](const std::vector<T>& g) {
    std::vector<T> gx(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * mask[i / per];
    accumulate<T>(x, gx);
  });
}

// ---------------------------------------------------------------------------
// Static conv layer
// ---------------------------------------------------------------------------

template <class T>
struct Conv {
  Tensor<T> weight, bias;
  std::size_t in_channels = 0, out_channels = 0, kernel_size = 1, stride = 1, padding = 0, groups = 1;

  Conv() = default;
  Conv(std::size_t cin, std::size_t cout, std::size_t k, std::size_t stride_, std::size_t groups_, bool with_bias,
       Rng& rng)
      : in_channels(cin), out_channels(cout), kernel_size(k), stride(stride_), padding(k / 2), groups(groups_) {
    if (groups == 0 || cin % groups != 0 || cout % groups != 0)
      throw ConfigError("conv: channels " + std::to_string(cin) + "->" + std::to_string(cout) +
                        " not divisible by groups " + std::to_string(groups));
    weight = conv_weight<T>(cout, cin / groups, k, k, rng);
    if (with_bias) bias = Tensor<T>::zeros({cout}, true);
  }

  Tensor<T> forward(const Tensor<T>& x) const { return conv2d(x, weight, bias, stride, padding, groups); }

  void collect(const std::string& prefix, NamedTensors<T>& params) const {
    params.emplace_back(join_name(prefix, "weight"), weight);
    if (bias.defined()) params.emplace_back(join_name(prefix, "bias"), bias);
  }

  FeatureGeom account(FlopsReport& r, const std::string& name, const std::string& kind, FeatureGeom in) const {
    FeatureGeom out{out_channels, conv_out(in.height, kernel_size, stride, padding),
                    conv_out(in.width, kernel_size, stride, padding)};
    r.add(name, kind, conv_macs(in_channels, out_channels, kernel_size, groups, out.height, out.width),
          bias.defined() ? out.elements() : 0, weight.numel() + (bias.defined() ? out_channels : 0));
    return out;
  }
};

namespace detail {
inline void account_bn(FlopsReport& r, const std::string& name, const std::string& kind, FeatureGeom g) {
  r.add(name, kind, 0, 2 * g.elements(), 2 * g.channels);
}
inline void account_elementwise(FlopsReport& r, const std::string& name, const std::string& kind, std::uint64_t n) {
  r.add(name, kind, 0, n, 0);
}
}  // namespace detail

// ---------------------------------------------------------------------------
// DY-Mobile
// ---------------------------------------------------------------------------

/// Inverted bottleneck built from dynamic residual convs:
/// 1x1 group expand -> BN -> GELU -> 3x3 depthwise -> BN -> GELU -> 1x1 group project -> BN,
/// identity shortcut when stride 1 and Cin == Cout.
template <class T>
struct DyMobile {
  DyResConv<T> expand, depthwise, project;
  BatchNormState<T> bn1, bn2, bn3;
  std::size_t in_channels = 0, out_channels = 0, stride = 1;
  double drop_path_rate = 0.0;

  DyMobile() = default;
  DyMobile(std::size_t cin, std::size_t cout, std::size_t expansion, std::size_t groups, std::size_t stride_,
           std::size_t token_dim, const DyResOptions& opt, Rng& rng, double drop_path_rate_ = 0.0)
      : in_channels(cin), out_channels(cout), stride(stride_), drop_path_rate(drop_path_rate_) {
    if (stride != 1 && stride != 2) throw ConfigError("dy_mobile: stride must be 1 or 2");
    if (expansion == 0) throw ConfigError("dy_mobile: expansion ratio must be positive");
    const std::size_t hid = cin * expansion;
    expand = DyResConv<T>(cin, hid, 1, 1, groups, token_dim, opt, rng);
    depthwise = DyResConv<T>(hid, hid, 3, stride, hid, token_dim, opt, rng);
    project = DyResConv<T>(hid, cout, 1, 1, groups, token_dim, opt, rng);
    bn1 = BatchNormState<T>(hid);
    bn2 = BatchNormState<T>(hid);
    bn3 = BatchNormState<T>(cout);
  }

  bool has_shortcut() const { return stride == 1 && in_channels == out_channels; }

  Tensor<T> forward(const Tensor<T>& x, const Tensor<T>& first_token, const ForwardContext& ctx) {
    auto h = activation(batch_norm(expand.forward(x, first_token, ctx.tau), bn1, ctx.training), Activation::gelu);
    h = activation(batch_norm(depthwise.forward(h, first_token, ctx.tau), bn2, ctx.training), Activation::gelu);
    h = batch_norm(project.forward(h, first_token, ctx.tau), bn3, ctx.training);
    if (!has_shortcut()) return h;
    return add(x, drop_path(h, drop_path_rate, ctx.training, ctx.rng));
  }

  void collect(const std::string& prefix, ParamSet<T>& out) const {
    expand.collect(join_name(prefix, "expand"), out.params);
    collect_bn(join_name(prefix, "bn1"), bn1, out);
    depthwise.collect(join_name(prefix, "depthwise"), out.params);
    collect_bn(join_name(prefix, "bn2"), bn2, out);
    project.collect(join_name(prefix, "project"), out.params);
    collect_bn(join_name(prefix, "bn3"), bn3, out);
  }

  FeatureGeom account(FlopsReport& r, const std::string& name, FeatureGeom in) const {
    const std::string kind = "dy-mobile";
    auto h = expand.account(r, name + ".expand", kind, in);
    detail::account_bn(r, name + ".bn1", kind, h);
    detail::account_elementwise(r, name + ".gelu1", kind, h.elements());
    h = depthwise.account(r, name + ".depthwise", kind, h);
    detail::account_bn(r, name + ".bn2", kind, h);
    detail::account_elementwise(r, name + ".gelu2", kind, h.elements());
    h = project.account(r, name + ".project", kind, h);
    detail::account_bn(r, name + ".bn3", kind, h);
    if (has_shortcut()) detail::account_elementwise(r, name + ".residual", kind, h.elements());
    return h;
  }
};

// ---------------------------------------------------------------------------
// IRFFN
// ---------------------------------------------------------------------------

/// x + [1x1 expand -> BN -> GELU -> (h + GELU(dw3x3(h))) -> GRN -> 1x1 project -> BN]
template <class T>
struct Irffn {
  Conv<T> expand, depthwise, project;
  BatchNormState<T> bn1, bn2;
  Tensor<T> grn_gamma, grn_beta;
  std::size_t channels = 0, expansion = 1;
  double drop_path_rate = 0.0;

  Irffn() = default;
  Irffn(std::size_t c, std::size_t e, Rng& rng, double drop_path_rate_ = 0.0)
      : channels(c), expansion(e), drop_path_rate(drop_path_rate_) {
    if (e == 0) throw ConfigError("irffn: expansion ratio must be positive");
    const std::size_t hid = c * e;
    expand = Conv<T>(c, hid, 1, 1, 1, false, rng);
    depthwise = Conv<T>(hid, hid, 3, 1, hid, true, rng);
    project = Conv<T>(hid, c, 1, 1, 1, false, rng);
    bn1 = BatchNormState<T>(hid);
    bn2 = BatchNormState<T>(c);
    grn_gamma = Tensor<T>::zeros({hid}, true);
    grn_beta = Tensor<T>::zeros({hid}, true);
  }

  /// The residual branch without the outer shortcut.
  Tensor<T> branch(const Tensor<T>& x, const ForwardContext& ctx) {
    auto h = activation(batch_norm(expand.forward(x), bn1, ctx.training), Activation::gelu);
    h = add(h, activation(depthwise.forward(h), Activation::gelu));
    h = grn(h, grn_gamma, grn_beta);
    return batch_norm(project.forward(h), bn2, ctx.training);
  }

  Tensor<T> forward(const Tensor<T>& x, const ForwardContext& ctx) {
    return add(x, drop_path(branch(x, ctx), drop_path_rate, ctx.training, ctx.rng));
  }

  void collect(const std::string& prefix, ParamSet<T>& out) const {
    expand.collect(join_name(prefix, "expand"), out.params);
    collect_bn(join_name(prefix, "bn1"), bn1, out);
    depthwise.collect(join_name(prefix, "depthwise"), out.params);
    out.params.emplace_back(join_name(prefix, "grn.gamma"), grn_gamma);
    out.params.emplace_back(join_name(prefix, "grn.beta"), grn_beta);
    project.collect(join_name(prefix, "project"), out.params);
    collect_bn(join_name(prefix, "bn2"), bn2, out);
  }

  FeatureGeom account(FlopsReport& r, const std::string& name, FeatureGeom in) const {
    const std::string kind = "irffn";
    auto h = expand.account(r, name + ".expand", kind, in);
    detail::account_bn(r, name + ".bn1", kind, h);
    detail::account_elementwise(r, name + ".gelu1", kind, h.elements());
    depthwise.account(r, name + ".depthwise", kind, h);
    detail::account_elementwise(r, name + ".shortcut", kind, 2 * h.elements());  // gelu + add
    r.add(name + ".grn", kind, 0, 4 * h.elements(), 2 * h.channels);
    auto o = project.account(r, name + ".project", kind, h);
    detail::account_bn(r, name + ".bn2", kind, o);
    detail::account_elementwise(r, name + ".residual", kind, o.elements());
    return o;
  }
};

// ---------------------------------------------------------------------------
// DMF block
// ---------------------------------------------------------------------------

/// Z' = Former(CrossAttn(Z, x)); x' = IRFFN(DY-Mobile(x, Z'[:,0,:]))
template <class T>
struct DmfBlock {
  CrossAttention<T> cross;
  Former<T> former;
  DyMobile<T> mobile;
  Irffn<T> ffn;

  DmfBlock() = default;
  DmfBlock(std::size_t cin, std::size_t cout, std::size_t expansion, std::size_t irffn_expansion, std::size_t groups,
           std::size_t stride, std::size_t token_dim, std::size_t heads, const DyResOptions& opt, double drop_path_rate,
           Rng& rng)
      : cross(cin, token_dim, heads, rng),
        former(token_dim, heads, rng),
        mobile(cin, cout, expansion, groups, stride, token_dim, opt, rng, drop_path_rate),
        ffn(cout, irffn_expansion, rng, drop_path_rate) {}

  std::pair<Tensor<T>, Tensor<T>> forward(const Tensor<T>& x, const Tensor<T>& Z, const ForwardContext& ctx) {
    auto z = former.forward(cross.forward(Z, x));
    auto first = reshape(slice(z, 1, 0, 1), {z.dim(0), z.dim(2)});
    auto y = ffn.forward(mobile.forward(x, first, ctx), ctx);
    return {y, z};
  }

  void collect(const std::string& prefix, ParamSet<T>& out) const {
    cross.collect(join_name(prefix, "cross"), out.params);
    former.collect(join_name(prefix, "former"), out.params);
    mobile.collect(join_name(prefix, "mobile"), out);
    ffn.collect(join_name(prefix, "irffn"), out);
  }

  FeatureGeom account(FlopsReport& r, const std::string& name, FeatureGeom in, std::uint64_t tokens) const {
    cross.account(r, name + ".cross", in, tokens);
    former.account(r, name + ".former", tokens);
    auto h = mobile.account(r, name + ".mobile", in);
    return ffn.account(r, name + ".irffn", h);
  }
};

// ---------------------------------------------------------------------------
// Stem, lite bottleneck, downsampling, head
// ---------------------------------------------------------------------------

/// 3x3/2 conv -> BN -> hard-swish, then the lite bottleneck:
/// 3x3/2 depthwise with channel multiplier -> BN -> hard-swish -> 1x1 squeeze -> BN.
template <class T>
struct StemLite {
  Conv<T> stem, lite_dw, lite_pw;
  BatchNormState<T> bn_stem, bn_dw, bn_pw;

  StemLite() = default;
  StemLite(std::size_t in_channels, std::size_t stem_channels, std::size_t multiplier, std::size_t out_channels,
           Rng& rng)
      : stem(in_channels, stem_channels, 3, 2, 1, false, rng),
        lite_dw(stem_channels, stem_channels * multiplier, 3, 2, stem_channels, false, rng),
        lite_pw(stem_channels * multiplier, out_channels, 1, 1, 1, false, rng),
        bn_stem(stem_channels),
        bn_dw(stem_channels * multiplier),
        bn_pw(out_channels) {}

  Tensor<T> forward(const Tensor<T>& image, const ForwardContext& ctx) {
    detail::require(image.rank() == 4 && image.dim(1) == stem.in_channels,
                    "stem: image must be [B," + std::to_string(stem.in_channels) + ",H,W], got " +
                        shape_str(image.shape()));
    detail::require(image.dim(2) % 4 == 0 && image.dim(3) % 4 == 0,
                    "stem: image extents " + std::to_string(image.dim(2)) + "x" + std::to_string(image.dim(3)) +
                        " must be divisible by 4");
    auto h = activation(batch_norm(stem.forward(image), bn_stem, ctx.training), Activation::hard_swish);
    h = activation(batch_norm(lite_dw.forward(h), bn_dw, ctx.training), Activation::hard_swish);
    return batch_norm(lite_pw.forward(h), bn_pw, ctx.training);
  }

  void collect(const std::string& prefix, ParamSet<T>& out) const {
    stem.collect(join_name(prefix, "stem"), out.params);
    collect_bn(join_name(prefix, "stem_bn"), bn_stem, out);
    lite_dw.collect(join_name(prefix, "lite_dw"), out.params);
    collect_bn(join_name(prefix, "lite_dw_bn"), bn_dw, out);
    lite_pw.collect(join_name(prefix, "lite_pw"), out.params);
    collect_bn(join_name(prefix, "lite_pw_bn"), bn_pw, out);
  }

  FeatureGeom account(FlopsReport& r, const std::string& name, FeatureGeom in) const {
    auto h = stem.account(r, name + ".stem", "stem", in);
    detail::account_bn(r, name + ".stem_bn", "stem", h);
    detail::account_elementwise(r, name + ".stem_act", "stem", h.elements());
    h = lite_dw.account(r, name + ".lite_dw", "stem", h);
    detail::account_bn(r, name + ".lite_dw_bn", "stem", h);
    detail::account_elementwise(r, name + ".lite_dw_act", "stem", h.elements());
    h = lite_pw.account(r, name + ".lite_pw", "stem", h);
    detail::account_bn(r, name + ".lite_pw_bn", "stem", h);
    return h;
  }
};

/// 3x3/2 depthwise -> BN, followed by 1x1 -> BN when the width changes.
template <class T>
struct Downsample {
  Conv<T> depthwise, pointwise;
  BatchNormState<T> bn_dw, bn_pw;
  bool change_width = false;

  Downsample() = default;
  Downsample(std::size_t cin, std::size_t cout, Rng& rng)
      : depthwise(cin, cin, 3, 2, cin, false, rng), bn_dw(cin), change_width(cin != cout) {
    if (change_width) {
      pointwise = Conv<T>(cin, cout, 1, 1, 1, false, rng);
      bn_pw = BatchNormState<T>(cout);
    }
  }

  Tensor<T> forward(const Tensor<T>& x, const ForwardContext& ctx) {
    auto h = batch_norm(depthwise.forward(x), bn_dw, ctx.training);
    if (!change_width) return h;
    return batch_norm(pointwise.forward(h), bn_pw, ctx.training);
  }

  void collect(const std::string& prefix, ParamSet<T>& out) const {
    depthwise.collect(join_name(prefix, "depthwise"), out.params);
    collect_bn(join_name(prefix, "bn_dw"), bn_dw, out);
    if (change_width) {
      pointwise.collect(join_name(prefix, "pointwise"), out.params);
      collect_bn(join_name(prefix, "bn_pw"), bn_pw, out);
    }
  }

  FeatureGeom account(FlopsReport& r, const std::string& name, FeatureGeom in) const {
    auto h = depthwise.account(r, name + ".depthwise", "downsample", in);
    detail::account_bn(r, name + ".bn_dw", "downsample", h);
    if (!change_width) return h;
    h = pointwise.account(r, name + ".pointwise", "downsample", h);
    detail::account_bn(r, name + ".bn_pw", "downsample", h);
    return h;
  }
};

/// concat(GAP(x), Z[:,0,:]) -> FC -> hard-swish -> dropout -> FC
template <class T>
struct ClassifierHead {
  Tensor<T> w1, b1, w2, b2;
  std::size_t channels = 0, token_dim = 0;
  double dropout_rate = 0.0;

  ClassifierHead() = default;
  ClassifierHead(std::size_t channels_, std::size_t token_dim_, std::size_t hidden, std::size_t classes,
                 double dropout_rate_, Rng& rng)
      : channels(channels_), token_dim(token_dim_), dropout_rate(dropout_rate_) {
    w1 = linear_weight<T>(channels + token_dim, hidden, rng);
    b1 = Tensor<T>::zeros({hidden}, true);
    w2 = linear_weight<T>(hidden, classes, rng);
    b2 = Tensor<T>::zeros({classes}, true);
  }

  Tensor<T> forward(const Tensor<T>& x, const Tensor<T>& Z, const ForwardContext& ctx) const {
    const std::size_t B = x.dim(0);
    auto first = reshape(slice(Z, 1, 0, 1), {B, Z.dim(2)});
    auto feat = concat<T>({global_avg_pool(x), first}, 1);
    auto h = activation(linear(feat, w1, b1), Activation::hard_swish);
    if (ctx.training && dropout_rate > 0.0) {
      if (ctx.rng == nullptr) throw ConfigError("head: dropout in training mode needs a random generator");
      h = dropout(h, dropout_rate, true, *ctx.rng);
    }
    return linear(h, w2, b2);
  }

  void collect(const std::string& prefix, NamedTensors<T>& params) const {
    params.emplace_back(join_name(prefix, "fc1.weight"), w1);
    params.emplace_back(join_name(prefix, "fc1.bias"), b1);
    params.emplace_back(join_name(prefix, "fc2.weight"), w2);
    params.emplace_back(join_name(prefix, "fc2.bias"), b2);
  }

  void account(FlopsReport& r, const std::string& name, FeatureGeom x) const {
    const std::uint64_t din = channels + token_dim, hid = w1.dim(1), cls = w2.dim(1);
    r.add(name + ".pool", "head", 0, x.elements(), 0);
    r.add(name + ".fc1", "head", din * hid, 2 * hid, din * hid + hid);
    r.add(name + ".fc2", "head", hid * cls, cls, hid * cls + cls);
  }
};

}  // namespace dmf
