// SPDX-License-Identifier: Apache-2.0
//
// Property checks shared by the unit tests (small sizes) and the acceptance
// runner (full sizes). Each returns a verdict with a one-line detail.
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dmf/dmf.hpp"

namespace checks {

using dmf::Tensor;

struct Verdict {
  bool ok = true;
  std::string detail;

  void fail(const std::string& why) {
    if (ok) detail = why;
    ok = false;
  }
};

template <class T>
bool bit_equal(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(T)) == 0;
}

template <class T>
Tensor<T> random_tensor(dmf::Shape s, dmf::Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  std::vector<T> v(dmf::numel_of(s));
  for (auto& x : v) x = static_cast<T>(nd(rng));
  return Tensor<T>::from(std::move(s), std::move(v));
}

template <class T>
double max_rel_error(const Tensor<T>& a, const Tensor<T>& b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    num = std::max(num, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    den = std::max(den, std::abs(static_cast<double>(b[i])));
  }
  return num / std::max(den, 1e-30);
}

inline std::size_t pick(dmf::Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

// ---------------------------------------------------------------------------
// Dynamic residual conv
// ---------------------------------------------------------------------------

/// A fresh dynamic residual conv (zero static kernels) must reproduce the
/// static conv with the input-agnostic kernel exactly, for any scores.
template <class T>
Verdict residual_identity(std::size_t configs, std::uint64_t seed) {
  Verdict v;
  dmf::Rng rng(seed);
  for (std::size_t i = 0; i < configs && v.ok; ++i) {
    const std::size_t cin_base = pick(rng, 1, 4), cout_base = pick(rng, 1, 4);
    const std::size_t gchoice = pick(rng, 0, 2);
    std::size_t groups = 1, cin = cin_base * 2, cout = cout_base * 2;
    if (gchoice == 1) groups = 2;
    if (gchoice == 2) {  // depthwise
      groups = cin;
      cout = cin;
    }
    const std::size_t k = std::vector<std::size_t>{1, 3, 5}[pick(rng, 0, 2)];
    const std::size_t stride = pick(rng, 1, 2);
    const std::size_t B = pick(rng, 1, 3), H = pick(rng, k, 9), W = pick(rng, k, 9);
    dmf::DyResOptions opt;
    opt.kernels = pick(rng, 1, 8);
    opt.score_mode = pick(rng, 0, 1) ? dmf::ScoreMode::softmax : dmf::ScoreMode::sigmoid;
    opt.token_input = pick(rng, 0, 1) == 1;
    opt.reduction = pick(rng, 1, 4);
    const std::size_t token_dim = pick(rng, 2, 8);
    const double tau = std::uniform_real_distribution<double>(1.0, 30.0)(rng);
    dmf::DyResConv<T> layer(cin, cout, k, stride, groups, token_dim, opt, rng);
    auto x = random_tensor<T>({B, cin, H, W}, rng);
    auto z = random_tensor<T>({B, token_dim}, rng);
    auto y = layer.forward(x, z, tau);
    auto ref = dmf::conv2d(x, layer.kernels.w_input_agnostic, Tensor<T>{}, stride, k / 2, groups);
    if (!bit_equal(y, ref)) {
      std::ostringstream os;
      os << "config " << i << " (cin " << cin << " cout " << cout << " k " << k << " g " << groups << " K "
         << opt.kernels << ") differs, max rel " << max_rel_error(y, ref);
      v.fail(os.str());
    }
  }
  if (v.ok) v.detail = std::to_string(configs) + " configs bit-exact";
  return v;
}

/// Convolving with the aggregated kernel equals the score-weighted sum of the
/// per-kernel convolutions plus the residual-kernel convolution.
template <class T>
Verdict aggregation_linearity(const std::vector<std::size_t>& kernel_counts, std::size_t channels, double tolerance,
                              std::uint64_t seed, double* worst_out = nullptr) {
  Verdict v;
  dmf::Rng rng(seed);
  double worst = 0.0;
  const std::size_t B = 2, H = 7, W = 6, k = 3, token_dim = 4;
  for (std::size_t K : kernel_counts)
    for (std::size_t groups : {std::size_t{1}, std::size_t{2}, channels}) {
      for (auto mode : {dmf::ScoreMode::sigmoid, dmf::ScoreMode::softmax}) {
        dmf::DyResOptions opt;
        opt.kernels = K;
        opt.score_mode = mode;
        opt.zero_static_init = false;
        dmf::DyResConv<T> layer(channels, channels, k, 1, groups, token_dim, opt, rng);
        auto x = random_tensor<T>({B, channels, H, W}, rng);
        auto z = random_tensor<T>({B, token_dim}, rng);
        const double tau = 3.0;
        auto y = layer.forward(x, z, tau);
        auto scores = dmf::kernel_attention_scores(dmf::global_avg_pool(x), z, layer.attention, tau);
        const auto& ks = layer.kernels;
        const dmf::Shape kshape = ks.kernel_shape();
        const std::size_t E = ks.kernel_numel();
        std::vector<T> ref;
        for (std::size_t b = 0; b < B; ++b) {
          auto xb = dmf::slice(x, 0, b, 1);
          auto acc = dmf::conv2d(xb, ks.w_input_agnostic, Tensor<T>{}, 1, 1, groups);
          for (std::size_t j = 0; j < K; ++j) {
            std::vector<T> wk(ks.w_static.data().begin() + j * E, ks.w_static.data().begin() + (j + 1) * E);
            auto yk = dmf::conv2d(xb, Tensor<T>::from(kshape, wk), Tensor<T>{}, 1, 1, groups);
            acc = dmf::add(acc, dmf::scale(yk, scores[b * K + j]));
          }
          ref.insert(ref.end(), acc.data().begin(), acc.data().end());
        }
        const double err = max_rel_error(y, Tensor<T>::from(y.shape(), ref));
        worst = std::max(worst, err);
        if (!(err < tolerance))
          v.fail("K " + std::to_string(K) + " groups " + std::to_string(groups) + " rel error " + std::to_string(err));
      }
    }
  if (worst_out) *worst_out = worst;
  if (v.ok) {
    std::ostringstream os;
    os << "worst relative error " << worst;
    v.detail = os.str();
  }
  return v;
}

/// Sigmoid scores stay in [0,1], softmax rows sum to 1, and the temperature
/// schedule starts at tau_start, ends at 1 and never increases.
inline Verdict score_contract(std::size_t draws, std::uint64_t seed) {
  Verdict v;
  dmf::Rng rng(seed);
  double worst_sum = 0.0;
  for (std::size_t i = 0; i < draws && v.ok; ++i) {
    dmf::DyResOptions opt;
    opt.kernels = pick(rng, 1, 8);
    opt.score_mode = (i % 2) ? dmf::ScoreMode::softmax : dmf::ScoreMode::sigmoid;
    opt.token_input = pick(rng, 0, 1) == 1;
    opt.reduction = pick(rng, 1, 4);
    const std::size_t C = pick(rng, 1, 12), D = pick(rng, 1, 6), B = pick(rng, 1, 3);
    auto attn = dmf::KernelAttention<float>::create(C, D, opt, rng);
    // input magnitudes spanning 1e-3 .. 1e3 exercise saturation
    const double mag = std::pow(10.0, std::uniform_real_distribution<double>(-3.0, 3.0)(rng));
    auto pooled = random_tensor<float>({B, C}, rng, mag);
    auto token = random_tensor<float>({B, D}, rng, mag);
    const double tau = std::uniform_real_distribution<double>(1.0, 60.0)(rng);
    Tensor<float> s;
    try {
      s = dmf::kernel_attention_scores(pooled, token, attn, tau);
    } catch (const std::exception& e) {
      v.fail(std::string("draw ") + std::to_string(i) + " threw: " + e.what());
      break;
    }
    const std::size_t K = opt.kernels;
    for (std::size_t b = 0; b < B; ++b) {
      double sum = 0.0;
      for (std::size_t k = 0; k < K; ++k) {
        const double p = s[b * K + k];
        if (!(p >= 0.0 && p <= 1.0)) v.fail("score " + std::to_string(p) + " outside [0,1] at draw " + std::to_string(i));
        sum += p;
      }
      if (opt.score_mode == dmf::ScoreMode::softmax) {
        worst_sum = std::max(worst_sum, std::abs(sum - 1.0));
        if (std::abs(sum - 1.0) > 1e-6) v.fail("softmax row sums to " + std::to_string(sum));
      }
    }
  }
  for (std::size_t i = 0; i < draws && v.ok; ++i) {
    const double start = std::uniform_real_distribution<double>(1.0, 100.0)(rng);
    const std::size_t T = pick(rng, 1, 100000);
    const dmf::TemperatureSchedule ts{start, T};
    if (ts.at(0) != start) v.fail("tau(0) != tau_start");
    if (ts.at(T) != 1.0 || ts.at(T + pick(rng, 0, 1000)) != 1.0) v.fail("tau(t >= T) != 1");
    std::size_t a = pick(rng, 0, T + 10), b = pick(rng, 0, T + 10);
    if (a > b) std::swap(a, b);
    if (ts.at(a) < ts.at(b)) v.fail("tau increased between steps " + std::to_string(a) + " and " + std::to_string(b));
    if (ts.at(a) < 1.0 || ts.at(a) > start) v.fail("tau left [1, tau_start]");
  }
  if (v.ok) {
    std::ostringstream os;
    os << draws << " score draws + " << draws << " schedule draws, worst softmax |sum-1| " << worst_sum;
    v.detail = os.str();
  }
  return v;
}

// ---------------------------------------------------------------------------
// Model geometry and cost
// ---------------------------------------------------------------------------

inline Verdict pyramid_shapes(const dmf::ModelConfig& cfg, std::size_t size) {
  Verdict v;
  dmf::Model<float> model(cfg);
  dmf::Rng rng(3);
  auto x = random_tensor<float>({1, cfg.image_channels, size, size}, rng);
  dmf::NoGradGuard ng;
  const auto feats = model.pyramid(x, dmf::ForwardContext{});
  std::ostringstream os;
  if (feats.size() != 4) v.fail("expected 4 feature maps, got " + std::to_string(feats.size()));
  const std::size_t strides[4] = {4, 8, 16, 32};
  for (std::size_t i = 0; i < feats.size() && i < 4; ++i) {
    const auto& f = feats[i];
    os << (i ? "/" : "") << f.dim(2);
    if (f.dim(1) != cfg.stages[i].channels || f.dim(2) != size / strides[i] || f.dim(3) != size / strides[i])
      v.fail("stage " + std::to_string(i) + " emits " + dmf::shape_str(f.shape()));
  }
  if (v.ok) v.detail = std::to_string(size) + " -> " + os.str();
  return v;
}

/// Analyzer MACs against the MACs counted inside the kernels during a batch-1
/// forward pass.
template <class T>
Verdict flops_match_counter(const dmf::ModelConfig& cfg, std::size_t size, std::uint64_t* macs_out = nullptr) {
  Verdict v;
  dmf::Model<T> model(cfg);
  dmf::Rng rng(5);
  auto x = random_tensor<T>({1, cfg.image_channels, size, size}, rng);
  dmf::NoGradGuard ng;
  dmf::MacCounter counter;
  model.forward(x, dmf::ForwardContext{false, 1.0, nullptr});
  const auto measured = counter.count();
  const auto analytic = model.count_flops(size, size).total_macs();
  if (macs_out) *macs_out = analytic;
  if (measured != analytic)
    v.fail(cfg.name + ": analyzer " + std::to_string(analytic) + " vs counter " + std::to_string(measured));
  else
    v.detail = cfg.name + " " + std::to_string(analytic) + " MACs";
  return v;
}

/// Exact scaling laws of the cost model, both analytic and instrumented.
inline Verdict flops_scaling() {
  Verdict v;
  dmf::Rng rng(9);
  auto measured_conv = [&](std::size_t cin, std::size_t cout, std::size_t k, std::size_t groups, std::size_t hw) {
    dmf::Conv<float> c(cin, cout, k, 1, groups, false, rng);
    auto x = random_tensor<float>({1, cin, hw, hw}, rng);
    dmf::NoGradGuard ng;
    dmf::MacCounter mc;
    c.forward(x);
    dmf::FlopsReport r;
    c.account(r, "c", "test", {cin, hw, hw});
    if (r.total_macs() != mc.count()) v.fail("conv analyzer disagrees with counter");
    return mc.count();
  };
  // channels x2 -> pointwise MACs x4
  for (std::size_t c : {8, 12, 24}) {
    const auto a = measured_conv(c, c, 1, 1, 8), b = measured_conv(2 * c, 2 * c, 1, 1, 8);
    if (b != 4 * a) v.fail("pointwise channel scaling " + std::to_string(a) + " -> " + std::to_string(b));
  }
  // resolution x2 -> conv MACs x4 (stride 1, same padding)
  for (std::size_t k : {1, 3, 5}) {
    const auto a = measured_conv(4, 6, k, 2, 8), b = measured_conv(4, 6, k, 2, 16);
    if (b != 4 * a) v.fail("resolution scaling k=" + std::to_string(k));
  }
  // cross-attention: the N-dependent part is exactly 2*M*C*N
  const std::uint64_t M = 6, d = 16, C = 8, heads = 2;
  dmf::CrossAttention<float> ca(C, d, heads, rng);
  std::vector<std::uint64_t> measured;
  for (std::uint64_t side : {2, 4, 6, 8}) {
    auto z = random_tensor<float>({1, M, d}, rng);
    auto x = random_tensor<float>({1, C, side, side}, rng);
    dmf::NoGradGuard ng;
    dmf::MacCounter mc;
    ca.forward(z, x);
    measured.push_back(mc.count());
    dmf::FlopsReport r;
    ca.account(r, "ca", {C, side, side}, M);
    if (r.total_macs() != mc.count()) v.fail("cross-attention analyzer disagrees with counter");
    const std::uint64_t N = side * side;
    if (mc.count() != M * d * C + M * C * d + 2 * M * N * C) v.fail("cross-attention MACs not 2MNC + const");
  }
  const std::uint64_t Ns[4] = {4, 16, 36, 64};
  for (std::size_t i = 1; i < 4; ++i)
    if (measured[i] - measured[i - 1] != 2 * M * C * (Ns[i] - Ns[i - 1])) v.fail("cross-attention not linear in N");
  if (dmf::count_former_flops(M, d, 64, C, 1) != dmf::count_former_flops(M, d, 64, C, 4))
    v.fail("former MACs depend on head count");
  if (v.ok) v.detail = "pointwise x4, resolution x4, cross-attention linear in N";
  return v;
}

/// MAC totals of the three variant configs at 224x224 against the published
/// 198M..499M range, with a 5% allowance for counting conventions.
inline Verdict variant_band(const std::string& config_dir, std::string* table = nullptr) {
  Verdict v;
  std::ostringstream os;
  struct Target {
    const char* file;
    double lo, hi;
  };
  // The smallest and largest variants are pinned to the endpoints; the middle
  // one must lie inside the range.
  const Target targets[] = {{"dmf_s.json", 499e6 * 0.95, 499e6 * 1.05},
                            {"dmf_xs.json", 198e6 * 0.95, 499e6 * 1.05},
                            {"dmf_xxs.json", 198e6 * 0.95, 198e6 * 1.05}};
  for (const auto& t : targets) {
    if (&t != targets) os << "; ";
    const auto cfg = dmf::ModelConfig::load((std::filesystem::path(config_dir) / t.file).string());
    dmf::Model<float> m(cfg);
    const auto r = m.count_flops(224, 224);
    const double macs = static_cast<double>(r.total_macs());
    os << cfg.name << " " << std::fixed;
    os.precision(2);
    os << macs / 1e6 << "M MACs, " << static_cast<double>(r.total_params()) / 1e6 << "M params";
    if (macs < t.lo || macs > t.hi) v.fail(cfg.name + " outside its band");
  }
  if (table) *table = os.str();
  if (v.ok) v.detail = os.str();
  return v;
}

// ---------------------------------------------------------------------------
// Training properties
// ---------------------------------------------------------------------------

template <class T>
bool params_equal(const dmf::Model<T>& a, const dmf::Model<T>& b, bool include_buffers, std::string* first_diff) {
  const auto pa = a.named_tensors(), pb = b.named_tensors();
  auto cmp = [&](const dmf::NamedTensors<T>& x, const dmf::NamedTensors<T>& y) {
    if (x.size() != y.size()) return false;
    for (std::size_t i = 0; i < x.size(); ++i)
      if (x[i].first != y[i].first || !bit_equal(x[i].second, y[i].second)) {
        if (first_diff) *first_diff = x[i].first;
        return false;
      }
    return true;
  };
  return cmp(pa.params, pb.params) && (!include_buffers || cmp(pa.buffers, pb.buffers));
}

/// Two runs with identical seeds give identical metrics (wall time aside) and
/// identical weights.
template <class T>
Verdict training_determinism(const dmf::TrainConfig& tc, const dmf::ModelConfig& mc) {
  Verdict v;
  auto a = dmf::train<T>(tc, mc);
  auto b = dmf::train<T>(tc, mc);
  if (a.rows.size() != b.rows.size()) v.fail("row count differs");
  for (std::size_t i = 0; i < a.rows.size() && v.ok; ++i) {
    const auto &x = a.rows[i], &y = b.rows[i];
    if (x.step != y.step || x.loss != y.loss || x.lr != y.lr || x.tau != y.tau || x.train_acc != y.train_acc ||
        x.ema_gap != y.ema_gap)
      v.fail("metrics row " + std::to_string(x.step) + " differs");
  }
  std::string diff;
  if (!params_equal(a.model, b.model, true, &diff)) v.fail("weights differ at " + diff);
  if (!params_equal(a.ema.shadow(), b.ema.shadow(), true, &diff)) v.fail("EMA differs at " + diff);
  if (v.ok) v.detail = std::to_string(tc.steps) + "-step runs identical";
  return v;
}

/// With a zero learning rate every parameter (and the EMA average of the
/// parameters) stays bit-identical to its initial value. BatchNorm running
/// statistics are buffers and still track the data.
template <class T>
Verdict zero_lr_noop(dmf::TrainConfig tc, const dmf::ModelConfig& mc) {
  Verdict v;
  tc.lr = 0.0;
  tc.lr_floor = 0.0;
  dmf::Model<T> fresh(mc);
  auto res = dmf::train<T>(tc, mc);
  std::string diff;
  if (!params_equal(res.model, fresh, false, &diff)) v.fail("parameter changed: " + diff);
  if (!params_equal(res.ema.shadow(), fresh, false, &diff)) v.fail("EMA parameter changed: " + diff);
  if (v.ok) v.detail = std::to_string(tc.steps) + " zero-LR steps, all parameters bit-identical";
  return v;
}

/// K = 1, no residual kernel and scores fixed to 1 reduce the network to a
/// plain static-conv network. Both are compared bit for bit on forward passes
/// and through a few optimizer steps.
template <class T>
Verdict degeneracy(const dmf::ModelConfig& base, std::size_t steps, std::size_t batch) {
  Verdict v;
  dmf::ModelConfig dyn = base;
  dyn.dyres.kernels = 1;
  dyn.dyres.residual = false;
  dyn.dyres.zero_static_init = false;
  dyn.dyres.score_mode = dmf::ScoreMode::unit;
  dmf::ModelConfig stat = base;
  stat.dyres.dynamic = false;

  dmf::Model<T> md(dyn), ms(stat);
  // Copy every shared tensor; the static conv weight takes the single static kernel.
  const auto td = md.named_tensors();
  auto ts = ms.named_tensors();
  auto find = [&](const std::string& name) -> const Tensor<T>* {
    for (const auto* table : {&td.params, &td.buffers})
      for (const auto& [n, t] : *table)
        if (n == name) return &t;
    return nullptr;
  };
  const std::string wia = "w_input_agnostic";
  for (auto* table : {&ts.params, &ts.buffers})
    for (auto& [n, t] : *table) {
      std::string src = n;
      if (n.size() >= wia.size() && n.compare(n.size() - wia.size(), wia.size(), wia) == 0)
        src = n.substr(0, n.size() - wia.size()) + "w_static";
      const Tensor<T>* s = find(src);
      if (!s || s->numel() != t.numel()) {
        v.fail("no counterpart for " + n);
        return v;
      }
      std::copy(s->data().begin(), s->data().end(), t.mutable_data().begin());
    }

  dmf::SynthDataset data({32, base.image_channels, base.num_classes, 64, 0.25, 11});
  dmf::AdamW<T> od(md.parameters(), {}), os(ms.parameters(), {});
  dmf::Rng r1(1), r2(1);
  for (std::size_t step = 0; step <= steps && v.ok; ++step) {
    std::vector<std::size_t> idx(batch);
    for (std::size_t i = 0; i < batch; ++i) idx[i] = (step * batch + i) % data.size();
    auto [x, y] = data.template batch<T>(idx);
    {
      dmf::NoGradGuard ng;
      const dmf::ForwardContext ev{false, 1.0, nullptr};
      if (!bit_equal(md.forward(x, ev), ms.forward(x, ev))) v.fail("eval logits differ at step " + std::to_string(step));
    }
    if (step == steps) break;
    const dmf::ForwardContext trn_d{true, 5.0, &r1}, trn_s{true, 5.0, &r2};
    md.zero_grad();
    ms.zero_grad();
    auto ld = dmf::cross_entropy(md.forward(x, trn_d), y);
    auto ls = dmf::cross_entropy(ms.forward(x, trn_s), y);
    if (ld.item() != ls.item()) v.fail("training loss differs at step " + std::to_string(step));
    dmf::backward(ld);
    dmf::backward(ls);
    od.step(1e-3);
    os.step(1e-3);
  }
  if (v.ok) v.detail = "forward + " + std::to_string(steps) + " optimizer steps bit-exact";
  return v;
}

/// save -> load -> forward reproduces the logits of both the live weights and
/// the EMA shadow bit for bit.
template <class T>
Verdict checkpoint_round_trip(const dmf::TrainConfig& tc, const dmf::ModelConfig& mc, const std::string& path) {
  Verdict v;
  auto res = dmf::train<T>(tc, mc);
  dmf::save_checkpoint(res.model, path, tc.steps, &res.ema.shadow());
  auto loaded = dmf::load_checkpoint<T>(path);
  if (loaded.step != tc.steps) v.fail("step not restored");
  if (!loaded.ema) {
    v.fail("EMA table missing");
    return v;
  }
  std::string diff;
  if (!params_equal(loaded.model, res.model, true, &diff)) v.fail("tensor differs: " + diff);
  if (!params_equal(*loaded.ema, res.ema.shadow(), true, &diff)) v.fail("EMA tensor differs: " + diff);
  dmf::SynthDataset data(tc.train_data(mc.num_classes, mc.image_channels));
  auto [x, y] = data.template batch<T>({0, 1, 2, 3, 4, 5, 6, 7});
  dmf::NoGradGuard ng;
  const dmf::ForwardContext ev{false, 1.0, nullptr};
  if (!bit_equal(loaded.model.forward(x, ev), res.model.forward(x, ev))) v.fail("logits differ");
  if (!bit_equal(loaded.ema->forward(x, ev), res.ema.shadow().forward(x, ev))) v.fail("EMA logits differ");
  if (v.ok) v.detail = "weights, buffers, EMA table and logits bit-identical";
  return v;
}

}  // namespace checks
