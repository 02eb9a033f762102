// SPDX-License-Identifier: Apache-2.0
//
// Full network: stem + lite bottleneck (stride 4), stages of DMF blocks with
// depthwise downsampling between them (strides 8, 16, 32), classifier head.
// A learnable [M,d] token table is broadcast over the batch at the input.
#pragma once

#include <memory>
#include <string>
#include <vector>

#include "dmf/blocks.hpp"
#include "dmf/config.hpp"
#include "dmf/flops.hpp"

namespace dmf {

template <class T>
class Model {
 public:
  explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(cfg_.seed);
    const auto& st = cfg_.stages;
    stem_ = StemLite<T>(cfg_.image_channels, cfg_.stem_channels, cfg_.lite_multiplier, st[0].channels, rng);
    tokens_ = normal_param<T>({cfg_.tokens, cfg_.token_dim}, 0.1, rng);
    downs_.resize(st.size());
    blocks_.resize(st.size());
    for (std::size_t s = 0; s < st.size(); ++s) {
      if (s > 0) downs_[s] = Downsample<T>(st[s - 1].channels, st[s].channels, rng);
      for (std::size_t b = 0; b < st[s].blocks; ++b)
        blocks_[s].emplace_back(st[s].channels, st[s].channels, st[s].expansion, st[s].irffn_expansion, st[s].groups,
                                1, cfg_.token_dim, cfg_.heads, cfg_.dyres, cfg_.drop_path, rng);
    }
    head_ = ClassifierHead<T>(st.back().channels, cfg_.token_dim, cfg_.head_hidden, cfg_.num_classes, cfg_.dropout,
                              rng);
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  const ModelConfig& config() const { return cfg_; }

  /// Logits [B, num_classes].
  Tensor<T> forward(const Tensor<T>& images, const ForwardContext& ctx) { return run(images, ctx, nullptr); }

  /// Stage outputs at strides 4, 8, 16, 32. Needs four stages and input extents
  /// divisible by 32.
  std::vector<Tensor<T>> pyramid(const Tensor<T>& images, const ForwardContext& ctx) {
    if (cfg_.stages.size() != 4)
      throw ConfigError("pyramid mode needs exactly four stages, config has " + std::to_string(cfg_.stages.size()));
    if (images.rank() != 4 || images.dim(2) % 32 != 0 || images.dim(3) % 32 != 0)
      throw ConfigError("pyramid mode needs input extents divisible by 32, got " + shape_str(images.shape()));
    std::vector<Tensor<T>> feats;
    run(images, ctx, &feats);
    return feats;
  }

  /// All learnable tensors and all buffers, with stable hierarchical names.
  ParamSet<T> named_tensors() const {
    ParamSet<T> out;
    stem_.collect("stem", out);
    out.params.emplace_back("tokens", tokens_);
    for (std::size_t s = 0; s < blocks_.size(); ++s) {
      const std::string sp = "stages." + std::to_string(s);
      if (s > 0) downs_[s].collect(sp + ".downsample", out);
      for (std::size_t b = 0; b < blocks_[s].size(); ++b)
        blocks_[s][b].collect(sp + ".blocks." + std::to_string(b), out);
    }
    head_.collect("head", out.params);
    return out;
  }

  NamedTensors<T> parameters() const { return named_tensors().params; }

  void zero_grad() {
    for (auto& [name, t] : named_tensors().params) t.zero_grad();
  }

  /// Deep copy (independent storage, no graph).
  Model clone() const {
    Model m(cfg_);
    m.copy_from(*this);
    return m;
  }

  /// Copies every parameter and buffer value from `other` (same config).
  void copy_from(const Model& other) {
    auto dst = named_tensors(), src = other.named_tensors();
    copy_table(dst.params, src.params);
    copy_table(dst.buffers, src.buffers);
  }

  /// Analytic cost of one image of size height x width.
  FlopsReport count_flops(std::size_t height, std::size_t width) const {
    FlopsReport r;
    FeatureGeom g{cfg_.image_channels, height, width};
    g = stem_.account(r, "stem", g);
    r.add("tokens", "former", 0, 0, cfg_.tokens * cfg_.token_dim);
    for (std::size_t s = 0; s < blocks_.size(); ++s) {
      const std::string sp = "stages." + std::to_string(s);
      if (s > 0) g = downs_[s].account(r, sp + ".downsample", g);
      for (std::size_t b = 0; b < blocks_[s].size(); ++b)
        g = blocks_[s][b].account(r, sp + ".blocks." + std::to_string(b), g, cfg_.tokens);
    }
    head_.account(r, "head", g);
    return r;
  }

  StemLite<T>& stem() { return stem_; }
  std::vector<Downsample<T>>& downsamples() { return downs_; }
  std::vector<std::vector<DmfBlock<T>>>& blocks() { return blocks_; }
  ClassifierHead<T>& head() { return head_; }
  const Tensor<T>& tokens() const { return tokens_; }

 private:
  Tensor<T> run(const Tensor<T>& images, const ForwardContext& ctx, std::vector<Tensor<T>>* feats) {
    auto x = stem_.forward(images, ctx);
    auto Z = expand_leading(tokens_, images.dim(0));
    for (std::size_t s = 0; s < blocks_.size(); ++s) {
      if (s > 0) x = downs_[s].forward(x, ctx);
      for (auto& blk : blocks_[s]) {
        auto [xn, zn] = blk.forward(x, Z, ctx);
        x = xn;
        Z = zn;
      }
      if (feats) feats->push_back(x);
    }
    if (feats) return {};
    return head_.forward(x, Z, ctx);
  }

  static void copy_table(NamedTensors<T>& dst, const NamedTensors<T>& src) {
    if (dst.size() != src.size()) throw ConfigError("model copy: tensor tables differ in size");
    for (std::size_t i = 0; i < dst.size(); ++i) {
      if (dst[i].first != src[i].first || dst[i].second.shape() != src[i].second.shape())
        throw ConfigError("model copy: tensor '" + dst[i].first + "' does not match '" + src[i].first + "'");
      auto d = dst[i].second.mutable_data();
      auto s = src[i].second.data();
      std::copy(s.begin(), s.end(), d.begin());
    }
  }

  ModelConfig cfg_;
  StemLite<T> stem_;
  Tensor<T> tokens_;
  std::vector<Downsample<T>> downs_;
  std::vector<std::vector<DmfBlock<T>>> blocks_;
  ClassifierHead<T> head_;
};

}  // namespace dmf
