// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference gradient checks in double precision.
//
// For a function f producing an output tensor y, the scalar loss is
// L = sum(y * R) with a fixed random projection R. For every checked tensor
// the error is
//   max_i |analytic_i - numeric_i| / max(max_i |numeric_i|, max_i |analytic_i|, floor)
// with numeric_i = (L(p_i + h) - L(p_i - h)) / 2h and
// floor = max(1e-8, 1e-3 * largest analytic entry over all checked tensors).
// The floor matters only for tensors whose gradient vanishes identically
// (a bias in front of a normalization, a key bias under softmax), where the
// numeric estimate is pure rounding noise.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "dmf/blocks.hpp"
#include "dmf/config.hpp"
#include "dmf/model.hpp"

namespace dmf {

struct GradCheckOptions {
  double step = 1e-4;
  double tolerance = 1e-4;
  std::size_t max_entries = 0;  // per tensor; 0 checks every entry
  std::uint64_t seed = 7;
};

struct TensorGradError {
  std::string name;
  double rel_error = 0.0;
  std::size_t entries = 0;
};

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t entries = 0;
  bool passed = false;
  std::vector<TensorGradError> tensors;
  std::string failure;  // exception text if the check itself crashed
};

using GradFn = std::function<Tensor<double>()>;

inline GradCheckResult check_gradients(const std::string& name, const GradFn& f, NamedTensors<double> inputs,
                                       const GradCheckOptions& opt = {}) {
  GradCheckResult res;
  res.name = name;
  try {
    Rng rng(opt.seed);
    Tensor<double> proj;
    auto loss_of = [&](const Tensor<double>& y) {
      if (!proj.defined()) {
        std::normal_distribution<double> nd(0.0, 1.0);
        std::vector<double> r(y.numel());
        for (auto& v : r) v = nd(rng);
        proj = Tensor<double>::from(y.shape(), std::move(r));
      }
      return sum(mul(y, proj));
    };

    for (auto& [n, t] : inputs) t.zero_grad();
    auto loss = loss_of(f());
    backward(loss);

    double scale = 0.0;
    for (auto& [n, t] : inputs)
      for (double g : t.grad()) scale = std::max(scale, std::abs(g));
    const double floor = std::max(1e-8, 1e-3 * scale);

    NoGradGuard ng;
    for (auto& [tname, t] : inputs) {
      std::vector<std::size_t> idx(t.numel());
      std::iota(idx.begin(), idx.end(), 0);
      if (opt.max_entries > 0 && idx.size() > opt.max_entries) {
        std::shuffle(idx.begin(), idx.end(), rng);
        idx.resize(opt.max_entries);
        std::sort(idx.begin(), idx.end());
      }
      const std::vector<double> analytic = t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                                                         : std::vector<double>(t.numel(), 0.0);
      double max_diff = 0.0, max_num = 0.0, max_ana = 0.0;
      for (std::size_t i : idx) {
        auto d = t.mutable_data();
        const double orig = d[i];
        d[i] = orig + opt.step;
        const double lp = loss_of(f()).item();
        d[i] = orig - opt.step;
        const double lm = loss_of(f()).item();
        d[i] = orig;
        const double num = (lp - lm) / (2.0 * opt.step);
        max_diff = std::max(max_diff, std::abs(analytic[i] - num));
        max_num = std::max(max_num, std::abs(num));
        max_ana = std::max(max_ana, std::abs(analytic[i]));
      }
      const double err = max_diff / std::max({max_num, max_ana, floor});
      res.tensors.push_back({tname, err, idx.size()});
      res.max_rel_error = std::max(res.max_rel_error, err);
      res.entries += idx.size();
    }
    res.passed = res.max_rel_error < opt.tolerance;
  } catch (const std::exception& e) {
    res.failure = e.what();
    res.passed = false;
  }
  return res;
}

namespace gradcheck_detail {

inline Tensor<double> randn(Shape s, Rng& rng, double scale = 1.0, bool grad = true) {
  std::normal_distribution<double> nd(0.0, scale);
  std::vector<double> v(numel_of(s));
  for (auto& x : v) x = nd(rng);
  return Tensor<double>::from(std::move(s), std::move(v), grad);
}

/// Zero-initialized parameters (static kernels, GRN affine, biases) make
/// whole gradient paths vanish; give every parameter generic values first.
inline void perturb(NamedTensors<double>& params, Rng& rng, double scale = 0.3) {
  std::uniform_real_distribution<double> u(-scale, scale);
  for (auto& [n, t] : params)
    for (auto& v : t.mutable_data()) v += u(rng);
}

}  // namespace gradcheck_detail

enum class GradScope { primitive, block, model };

inline GradScope parse_grad_scope(const std::string& s) {
  if (s == "primitive") return GradScope::primitive;
  if (s == "block") return GradScope::block;
  if (s == "model") return GradScope::model;
  throw ConfigError("gradcheck: unknown scope '" + s + "' (expected primitive, block or model)");
}

/// Every differentiable op of the tensor core.
inline std::vector<GradCheckResult> gradcheck_primitives(const GradCheckOptions& opt = {}) {
  using gradcheck_detail::randn;
  std::vector<GradCheckResult> out;
  Rng rng(opt.seed);
  auto run = [&](const std::string& name, const GradFn& f, NamedTensors<double> in) {
    out.push_back(check_gradients(name, f, std::move(in), opt));
  };

  auto a = randn({2, 3, 4}, rng), b = randn({2, 3, 4}, rng);
  run("add", [=] { return add(a, b); }, {{"a", a}, {"b", b}});
  run("sub", [=] { return sub(a, b); }, {{"a", a}, {"b", b}});
  run("mul", [=] { return mul(a, b); }, {{"a", a}, {"b", b}});
  run("scale", [=] { return scale(a, 1.7); }, {{"a", a}});
  run("sum", [=] { return sum(a); }, {{"a", a}});
  run("mean", [=] { return mean(a); }, {{"a", a}});
  run("reshape", [=] { return reshape(a, {4, 6}); }, {{"a", a}});
  run("permute", [=] { return permute(a, {2, 0, 1}); }, {{"a", a}});
  run("slice", [=] { return slice(a, 2, 1, 2); }, {{"a", a}});
  run("concat", [=] { return concat<double>({a, b}, 1); }, {{"a", a}, {"b", b}});
  {
    auto z = randn({3, 5}, rng);
    run("expand_leading", [=] { return expand_leading(z, 3); }, {{"z", z}});
  }
  {
    auto x = randn({2, 3, 4, 4}, rng), bias = randn({3}, rng);
    run("add_channel_bias", [=] { return add_channel_bias(x, bias); }, {{"x", x}, {"bias", bias}});
    run("global_avg_pool", [=] { return global_avg_pool(x); }, {{"x", x}});
  }
  {
    auto p = randn({2, 3, 4, 5}, rng), q = randn({2, 3, 5, 6}, rng), qt = randn({2, 3, 6, 5}, rng);
    run("matmul", [=] { return matmul(p, q); }, {{"a", p}, {"b", q}});
    run("matmul_trans_b", [=] { return matmul(p, qt, true); }, {{"a", p}, {"b", qt}});
  }
  {
    auto x = randn({2, 3, 5}, rng), w = randn({5, 4}, rng), bias = randn({4}, rng);
    run("linear", [=] { return linear(x, w, bias); }, {{"x", x}, {"w", w}, {"bias", bias}});
  }
  struct ConvCase {
    const char* name;
    std::size_t cin, cout, k, stride, pad, groups;
  };
  for (const ConvCase& c : {ConvCase{"conv2d_dense", 3, 4, 3, 1, 1, 1}, ConvCase{"conv2d_strided", 3, 4, 3, 2, 1, 1},
                            ConvCase{"conv2d_grouped", 4, 6, 3, 1, 1, 2}, ConvCase{"conv2d_depthwise", 4, 4, 3, 2, 1, 4},
                            ConvCase{"conv2d_pointwise", 4, 5, 1, 1, 0, 1}}) {
    auto x = randn({2, c.cin, 6, 5}, rng), w = randn({c.cout, c.cin / c.groups, c.k, c.k}, rng),
         bias = randn({c.cout}, rng);
    run(c.name, [=] { return conv2d(x, w, bias, c.stride, c.pad, c.groups); }, {{"x", x}, {"w", w}, {"bias", bias}});
  }
  {
    auto x = randn({2, 4, 5, 5}, rng), w = randn({2, 6, 2, 3, 3}, rng);
    run("per_sample_conv2d", [=] { return per_sample_conv2d(x, w, 1, 1, 2); }, {{"x", x}, {"w", w}});
  }
  for (auto act : {Activation::gelu, Activation::relu, Activation::sigmoid, Activation::hard_swish}) {
    auto x = randn({3, 7}, rng, 2.0);
    run(std::string("activation_") + activation_name(act), [=] { return activation(x, act); }, {{"x", x}});
  }
  {
    auto x = randn({2, 3, 6}, rng, 2.0);
    run("softmax_last", [=] { return softmax(x, -1); }, {{"x", x}});
    run("softmax_mid", [=] { return softmax(x, 1); }, {{"x", x}});
  }
  for (bool training : {true, false}) {
    auto x = randn({3, 4, 3, 3}, rng);
    BatchNormState<double> st(4);
    st.gamma = randn({4}, rng);
    st.beta = randn({4}, rng);
    for (auto& v : st.running_mean.mutable_data()) v = 0.3;
    for (auto& v : st.running_var.mutable_data()) v = 1.7;
    run(training ? "batch_norm_train" : "batch_norm_eval",
        [=]() mutable { return batch_norm(x, st, training); }, {{"x", x}, {"gamma", st.gamma}, {"beta", st.beta}});
  }
  {
    auto x = randn({2, 3, 6}, rng), g = randn({6}, rng), bb = randn({6}, rng);
    run("layer_norm", [=] { return layer_norm(x, g, bb); }, {{"x", x}, {"gamma", g}, {"beta", bb}});
  }
  for (double smoothing : {0.0, 0.1}) {
    auto logits = randn({4, 5}, rng);
    const std::vector<int> labels = {0, 3, 4, 1};
    run(smoothing > 0 ? "cross_entropy_smoothed" : "cross_entropy",
        [=] { return cross_entropy(logits, labels, smoothing); }, {{"logits", logits}});
  }
  {
    auto x = randn({4, 6}, rng);
    const std::uint64_t s = opt.seed;
    run("dropout", [=] {
      Rng r(s);  // same mask on every evaluation
      return dropout(x, 0.3, true, r);
    }, {{"x", x}});
    auto y = randn({4, 2, 3, 3}, rng);
    run("drop_path", [=] {
      Rng r(s + 1);
      return drop_path(y, 0.4, true, &r);
    }, {{"x", y}});
  }
  {
    auto x = randn({2, 5, 3, 4}, rng), g = randn({5}, rng), bb = randn({5}, rng);
    run("grn", [=] { return grn(x, g, bb); }, {{"x", x}, {"gamma", g}, {"beta", bb}});
  }
  for (auto mode : {ScoreMode::sigmoid, ScoreMode::softmax}) {
    DyResOptions o;
    o.kernels = 3;
    o.score_mode = mode;
    auto att = KernelAttention<double>::create(6, 4, o, rng);
    NamedTensors<double> p = {{"w_reduce", att.w_reduce}, {"b_reduce", att.b_reduce},
                              {"w_expand", att.w_expand}, {"b_expand", att.b_expand}};
    gradcheck_detail::perturb(p, rng);
    auto pooled = randn({2, 6}, rng), tok = randn({2, 4}, rng);
    p.emplace_back("pooled", pooled);
    p.emplace_back("first_token", tok);
    run(std::string("kernel_attention_") + score_mode_name(mode),
        [=] { return kernel_attention_scores(pooled, tok, att, 2.5); }, p);
  }
  {
    DyResOptions o;
    o.kernels = 3;
    auto ks = KernelSet<double>::create(4, 6, 3, 2, o, false, rng);
    NamedTensors<double> p = {{"w_static", ks.w_static}, {"w_input_agnostic", ks.w_input_agnostic}};
    gradcheck_detail::perturb(p, rng);
    auto scores = randn({2, 3}, rng);
    p.emplace_back("scores", scores);
    run("aggregate_kernel", [=] { return aggregate_kernel(scores, ks); }, p);
  }
  return out;
}

/// Composite blocks, each with every parameter and the block inputs checked.
inline std::vector<GradCheckResult> gradcheck_blocks(const GradCheckOptions& opt = {}) {
  using gradcheck_detail::perturb;
  using gradcheck_detail::randn;
  std::vector<GradCheckResult> out;
  Rng rng(opt.seed + 100);
  auto run = [&](const std::string& name, const GradFn& f, NamedTensors<double> in) {
    out.push_back(check_gradients(name, f, std::move(in), opt));
  };
  ForwardContext train_ctx{true, 2.0, nullptr};
  const std::size_t d = 4;

  struct DyCase {
    const char* name;
    std::size_t cin, cout, k, stride, groups;
    ScoreMode mode;
    bool residual;
  };
  for (const DyCase& c : {DyCase{"dyres_conv_pointwise_grouped", 4, 6, 1, 1, 2, ScoreMode::sigmoid, true},
                          DyCase{"dyres_conv_depthwise_strided", 4, 4, 3, 2, 4, ScoreMode::sigmoid, true},
                          DyCase{"dyres_conv_softmax", 3, 4, 3, 1, 1, ScoreMode::softmax, true},
                          DyCase{"dyres_conv_no_residual", 4, 4, 3, 1, 2, ScoreMode::sigmoid, false}}) {
    DyResOptions o;
    o.kernels = 3;
    o.score_mode = c.mode;
    o.residual = c.residual;
    o.zero_static_init = c.residual;
    DyResConv<double> conv(c.cin, c.cout, c.k, c.stride, c.groups, d, o, rng, true);
    NamedTensors<double> p;
    conv.collect("", p);
    perturb(p, rng);
    auto x = randn({2, c.cin, 5, 5}, rng), tok = randn({2, d}, rng);
    p.emplace_back("x", x);
    p.emplace_back("first_token", tok);
    run(c.name, [=] { return conv.forward(x, tok, 3.0); }, p);
  }
  {
    CrossAttention<double> ca(6, 4, 2, rng);
    NamedTensors<double> p;
    ca.collect("", p);
    perturb(p, rng);
    auto Z = randn({2, 3, 4}, rng), X = randn({2, 6, 3, 3}, rng);
    p.emplace_back("Z", Z);
    p.emplace_back("X", X);
    run("cross_attention", [=] { return ca.forward(Z, X); }, p);
  }
  {
    Former<double> fm(4, 2, rng);
    NamedTensors<double> p;
    fm.collect("", p);
    perturb(p, rng);
    auto Z = randn({2, 3, 4}, rng);
    p.emplace_back("Z", Z);
    run("former", [=] { return fm.forward(Z); }, p);
  }
  {
    DyResOptions o;
    o.kernels = 2;
    DyMobile<double> dm(4, 4, 3, 2, 1, d, o, rng);
    ParamSet<double> ps;
    dm.collect("", ps);
    perturb(ps.params, rng);
    auto x = randn({2, 4, 4, 4}, rng), tok = randn({2, d}, rng);
    ps.params.emplace_back("x", x);
    ps.params.emplace_back("first_token", tok);
    run("dy_mobile", [=]() mutable { return dm.forward(x, tok, train_ctx); }, ps.params);
  }
  {
    Irffn<double> ff(4, 2, rng);
    ParamSet<double> ps;
    ff.collect("", ps);
    perturb(ps.params, rng);
    auto x = randn({2, 4, 4, 4}, rng);
    ps.params.emplace_back("x", x);
    run("irffn", [=]() mutable { return ff.forward(x, train_ctx); }, ps.params);
  }
  {
    auto x = randn({2, 5, 4, 3}, rng), g = randn({5}, rng), bb = randn({5}, rng);
    run("grn_block", [=] { return grn(x, g, bb); }, {{"x", x}, {"gamma", g}, {"beta", bb}});
  }
  {
    DyResOptions o;
    o.kernels = 2;
    DmfBlock<double> blk(4, 4, 3, 2, 2, 1, d, 2, o, 0.0, rng);
    ParamSet<double> ps;
    blk.collect("", ps);
    perturb(ps.params, rng);
    auto x = randn({2, 4, 4, 4}, rng), Z = randn({2, 2, d}, rng);
    ps.params.emplace_back("x", x);
    ps.params.emplace_back("Z", Z);
    run("dmf_block", [=]() mutable {
      auto [y, z] = blk.forward(x, Z, train_ctx);
      return concat<double>({reshape(y, {2, y.numel() / 2}), reshape(z, {2, z.numel() / 2})}, 1);
    }, ps.params);
  }
  {
    StemLite<double> st(3, 4, 2, 6, rng);
    ParamSet<double> ps;
    st.collect("", ps);
    perturb(ps.params, rng);
    auto x = randn({2, 3, 8, 8}, rng);
    ps.params.emplace_back("image", x);
    run("stem_lite", [=]() mutable { return st.forward(x, train_ctx); }, ps.params);
  }
  {
    Downsample<double> ds(4, 6, rng);
    ParamSet<double> ps;
    ds.collect("", ps);
    perturb(ps.params, rng);
    auto x = randn({2, 4, 4, 4}, rng);
    ps.params.emplace_back("x", x);
    run("downsample", [=]() mutable { return ds.forward(x, train_ctx); }, ps.params);
  }
  {
    ClassifierHead<double> hd(6, d, 8, 5, 0.0, rng);
    NamedTensors<double> p;
    hd.collect("", p);
    perturb(p, rng);
    auto x = randn({2, 6, 2, 2}, rng), Z = randn({2, 2, d}, rng);
    p.emplace_back("x", x);
    p.emplace_back("Z", Z);
    run("classifier_head", [=] { return hd.forward(x, Z, train_ctx); }, p);
  }
  return out;
}

/// The micro model end to end (training-mode BN, tau > 1), checked on a
/// sample of entries of every parameter tensor and the input image.
inline std::vector<GradCheckResult> gradcheck_model(const GradCheckOptions& opt = {}) {
  Rng rng(opt.seed + 200);
  auto model = std::make_shared<Model<double>>(micro_config());
  auto params = model->parameters();
  gradcheck_detail::perturb(params, rng, 0.1);
  auto x = gradcheck_detail::randn({2, 3, 32, 32}, rng);
  params.emplace_back("image", x);
  GradCheckOptions o = opt;
  if (o.max_entries == 0) o.max_entries = 6;
  const ForwardContext ctx{true, 2.0, nullptr};
  return {check_gradients("micro_model", [model, x, ctx] { return model->forward(x, ctx); }, params, o)};
}

inline std::vector<GradCheckResult> run_gradcheck(GradScope scope, const GradCheckOptions& opt = {}) {
  switch (scope) {
    case GradScope::primitive: return gradcheck_primitives(opt);
    case GradScope::block: return gradcheck_blocks(opt);
    case GradScope::model: return gradcheck_model(opt);
  }
  return {};
}

}  // namespace dmf
