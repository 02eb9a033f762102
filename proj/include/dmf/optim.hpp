// SPDX-License-Identifier: Apache-2.0
//
// AdamW with decoupled weight decay, warmup + cosine learning-rate schedule,
// and an exponential moving average of model weights.
#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "dmf/error.hpp"
#include "dmf/model.hpp"

namespace dmf {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

/// One AdamW update of a flat parameter buffer. `step` is the 1-based update
/// index used for bias correction. Decay is applied first (p -= lr*wd*p).
template <class T>
void adamw_update(std::span<T> p, std::span<const T> g, std::span<T> m, std::span<T> v, std::size_t step, double lr,
                  const AdamWConfig& cfg, bool decay = true) {
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  const double wd = decay ? cfg.weight_decay : 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double gi = static_cast<double>(g[i]);
    const double mi = cfg.beta1 * static_cast<double>(m[i]) + (1.0 - cfg.beta1) * gi;
    const double vi = cfg.beta2 * static_cast<double>(v[i]) + (1.0 - cfg.beta2) * gi * gi;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    double pi = static_cast<double>(p[i]);
    pi -= lr * wd * pi;
    pi -= lr * (mi / c1) / (std::sqrt(vi / c2) + cfg.eps);
    p[i] = static_cast<T>(pi);
  }
}

/// Weight decay applies to matrices and kernels only; biases, norm affines and
/// the global token table are exempt.
inline bool decays(const std::string& name, std::size_t rank) { return rank >= 2 && name != "tokens"; }

template <class T>
class AdamW {
 public:
  AdamW(NamedTensors<T> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& [name, t] : params_) {
      m_.emplace_back(t.numel(), T(0));
      v_.emplace_back(t.numel(), T(0));
    }
  }

  /// Applies one update with learning rate `lr`. Parameters that received no
  /// gradient are left untouched. A non-finite gradient aborts before any
  /// parameter is modified.
  void step(double lr) {
    for (const auto& [name, t] : params_) {
      if (!t.has_grad()) continue;
      const auto g = t.grad();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (!std::isfinite(static_cast<double>(g[i])))
          throw NumericError("adamw: non-finite gradient in parameter '" + name + "' at index " + std::to_string(i));
    }
    ++steps_;
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& [name, t] = params_[k];
      if (!t.has_grad()) continue;
      adamw_update<T>(t.mutable_data(), t.grad(), m_[k], v_[k], steps_, lr, cfg_, decays(name, t.rank()));
    }
  }

  std::size_t steps() const { return steps_; }
  const AdamWConfig& config() const { return cfg_; }

 private:
  NamedTensors<T> params_;
  AdamWConfig cfg_;
  std::vector<std::vector<T>> m_, v_;
  std::size_t steps_ = 0;
};

/// Linear warmup from 0 to `base` over `warmup` steps, then cosine decay to
/// `floor` at `total`. Step 0 gives 0; the training loop uses lr_at(k) for its
/// k-th update (k = 1..total).
struct LrSchedule {
  double base = 1e-3;
  double floor = 1e-5;
  std::size_t warmup = 0;
  std::size_t total = 1;
};

inline double lr_at(std::size_t step, const LrSchedule& s) {
  if (s.warmup > 0 && step < s.warmup) return s.base * static_cast<double>(step) / static_cast<double>(s.warmup);
  if (s.total <= s.warmup) return s.base;
  const double span = static_cast<double>(s.total - s.warmup);
  const double t = std::min(1.0, static_cast<double>(step - s.warmup) / span);
  return s.floor + (s.base - s.floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

/// shadow <- momentum * shadow + (1 - momentum) * params
template <class T>
void ema_update(std::span<T> shadow, std::span<const T> params, double momentum) {
  for (std::size_t i = 0; i < shadow.size(); ++i)
    shadow[i] = static_cast<T>(momentum * static_cast<double>(shadow[i]) +
                               (1.0 - momentum) * static_cast<double>(params[i]));
}

/// Shadow copy of a model. Parameters are averaged; buffers (BN running
/// statistics) are copied from the live model on every update.
template <class T>
class Ema {
 public:
  Ema(const Model<T>& model, double momentum) : shadow_(model.clone()), momentum_(momentum) {
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("ema: momentum must be in [0,1)");
  }

  void update(const Model<T>& model) {
    auto dst = shadow_.named_tensors();
    const auto src = model.named_tensors();
    for (std::size_t i = 0; i < dst.params.size(); ++i)
      ema_update<T>(dst.params[i].second.mutable_data(), src.params[i].second.data(), momentum_);
    for (std::size_t i = 0; i < dst.buffers.size(); ++i) {
      auto d = dst.buffers[i].second.mutable_data();
      auto s = src.buffers[i].second.data();
      std::copy(s.begin(), s.end(), d.begin());
    }
  }

  /// Root-mean-square difference between shadow and live parameters.
  double gap(const Model<T>& model) const {
    const auto a = shadow_.parameters();
    const auto b = model.parameters();
    double ss = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      const auto x = a[i].second.data();
      const auto y = b[i].second.data();
      for (std::size_t j = 0; j < x.size(); ++j) {
        const double d = static_cast<double>(x[j]) - static_cast<double>(y[j]);
        ss += d * d;
      }
      n += x.size();
    }
    return n ? std::sqrt(ss / static_cast<double>(n)) : 0.0;
  }

  Model<T>& shadow() { return shadow_; }
  const Model<T>& shadow() const { return shadow_; }
  double momentum() const { return momentum_; }

 private:
  Model<T> shadow_;
  double momentum_;
};

}  // namespace dmf
