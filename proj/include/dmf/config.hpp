// SPDX-License-Identifier: Apache-2.0
//
// Declarative model description, read from / written to JSON. The schema is
// documented in docs/config.md. Unknown keys are rejected.
#pragma once

#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dmf/dyres_conv.hpp"
#include "dmf/error.hpp"

namespace dmf {

struct StageConfig {
  std::size_t blocks = 1;
  std::size_t channels = 0;
  std::size_t stride = 2;           // 1 for the first stage (already at stride 4), 2 afterwards
  std::size_t expansion = 4;        // DY-Mobile expansion t
  std::size_t irffn_expansion = 2;  // IRFFN expansion e
  std::size_t groups = 1;           // groups of the DY-Mobile pointwise convs
};

struct ModelConfig {
  std::string name = "model";
  std::string note;
  std::size_t image_channels = 3;
  std::size_t stem_channels = 16;
  std::size_t lite_multiplier = 2;
  std::vector<StageConfig> stages;
  std::size_t tokens = 6;
  std::size_t token_dim = 192;
  std::size_t heads = 4;
  DyResOptions dyres;
  std::size_t head_hidden = 1280;
  std::size_t num_classes = 1000;
  double drop_path = 0.0;
  double dropout = 0.0;
  std::uint64_t seed = 0;

  std::size_t total_blocks() const {
    std::size_t n = 0;
    for (const auto& s : stages) n += s.blocks;
    return n;
  }

  void validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
      throw ConfigError("model config: " + field + ": " + why);
    };
    if (stages.empty()) fail("stages", "at least one stage is required");
    if (stages.size() > 4) fail("stages", "at most four stages (strides 4, 8, 16, 32)");
    if (image_channels == 0) fail("image_channels", "must be positive");
    if (stem_channels == 0) fail("stem_channels", "must be positive");
    if (lite_multiplier == 0) fail("lite_multiplier", "must be positive");
    if (tokens == 0) fail("tokens", "must be positive");
    if (token_dim == 0) fail("token_dim", "must be positive");
    if (heads == 0 || token_dim % heads != 0) fail("heads", "token_dim must be divisible by heads");
    if (dyres.kernels == 0) fail("kernels", "must be positive");
    if (dyres.reduction == 0) fail("attention_reduction", "must be positive");
    if (dyres.dynamic && !dyres.residual && dyres.zero_static_init)
      fail("static_init", "zero-initialized static kernels require kernel_residual");
    if (head_hidden == 0) fail("head_hidden", "must be positive");
    if (num_classes == 0) fail("num_classes", "must be positive");
    if (drop_path < 0.0 || drop_path >= 1.0) fail("drop_path", "must be in [0,1)");
    if (dropout < 0.0 || dropout >= 1.0) fail("dropout", "must be in [0,1)");
    for (std::size_t i = 0; i < stages.size(); ++i) {
      const auto& s = stages[i];
      const std::string f = "stages[" + std::to_string(i) + "]";
      if (s.blocks == 0) fail(f + ".blocks", "must be positive");
      if (s.channels == 0) fail(f + ".channels", "must be positive");
      if (s.stride != (i == 0 ? 1u : 2u))
        fail(f + ".stride", i == 0 ? "first stage must have stride 1 (stride 4 overall)" : "must be 2");
      if (s.expansion < 3 || s.expansion > 6) fail(f + ".expansion", "DY-Mobile expansion must be in [3,6]");
      if (s.irffn_expansion == 0) fail(f + ".irffn_expansion", "must be positive");
      if (s.groups == 0 || s.channels % s.groups != 0)
        fail(f + ".groups", "channels " + std::to_string(s.channels) + " not divisible by groups " +
                                std::to_string(s.groups));
      if (s.channels % heads != 0)
        fail(f + ".channels", "must be divisible by heads " + std::to_string(heads) + " for cross-attention");
    }
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["name"] = name;
    if (!note.empty()) j["note"] = note;
    j["image_channels"] = image_channels;
    j["stem_channels"] = stem_channels;
    j["lite_multiplier"] = lite_multiplier;
    j["stages"] = nlohmann::json::array();
    for (const auto& s : stages)
      j["stages"].push_back({{"blocks", s.blocks},
                             {"channels", s.channels},
                             {"stride", s.stride},
                             {"expansion", s.expansion},
                             {"irffn_expansion", s.irffn_expansion},
                             {"groups", s.groups}});
    j["tokens"] = tokens;
    j["token_dim"] = token_dim;
    j["heads"] = heads;
    j["kernels"] = dyres.kernels;
    j["score_mode"] = score_mode_name(dyres.score_mode);
    j["kernel_residual"] = dyres.residual;
    j["token_to_kernel_attention"] = dyres.token_input;
    j["static_init"] = dyres.zero_static_init ? "zero" : "random";
    j["attention_reduction"] = dyres.reduction;
    j["dynamic"] = dyres.dynamic;
    j["head_hidden"] = head_hidden;
    j["num_classes"] = num_classes;
    j["drop_path"] = drop_path;
    j["dropout"] = dropout;
    j["seed"] = seed;
    return j;
  }

  /// Canonical text form (used for checkpoint echo and hashing).
  std::string dump() const { return to_json().dump(2); }

  static ModelConfig from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("model config: top level must be an object");
    static const std::set<std::string> known = {
        "name", "note", "image_channels", "stem_channels", "lite_multiplier", "stages", "tokens", "token_dim",
        "heads", "kernels", "score_mode", "kernel_residual", "token_to_kernel_attention", "static_init",
        "attention_reduction", "dynamic", "head_hidden", "num_classes", "drop_path", "dropout", "seed"};
    static const std::set<std::string> required = {"stages", "stem_channels", "tokens", "token_dim",
                                                    "head_hidden", "num_classes"};
    for (auto it = j.begin(); it != j.end(); ++it)
      if (!known.count(it.key())) throw ConfigError("model config: unknown key '" + it.key() + "'");
    for (const auto& k : required)
      if (!j.contains(k)) throw ConfigError("model config: missing required key '" + k + "'");

    ModelConfig c;
    try {
      c.name = j.value("name", c.name);
      c.note = j.value("note", c.note);
      c.image_channels = j.value("image_channels", c.image_channels);
      c.stem_channels = j.at("stem_channels").get<std::size_t>();
      c.lite_multiplier = j.value("lite_multiplier", c.lite_multiplier);
      c.tokens = j.at("tokens").get<std::size_t>();
      c.token_dim = j.at("token_dim").get<std::size_t>();
      c.heads = j.value("heads", c.heads);
      c.dyres.kernels = j.value("kernels", c.dyres.kernels);
      c.dyres.score_mode = parse_score_mode(j.value("score_mode", std::string("sigmoid")));
      c.dyres.residual = j.value("kernel_residual", true);
      c.dyres.token_input = j.value("token_to_kernel_attention", true);
      const std::string init = j.value("static_init", std::string(c.dyres.residual ? "zero" : "random"));
      if (init != "zero" && init != "random")
        throw ConfigError("model config: static_init must be 'zero' or 'random', got '" + init + "'");
      c.dyres.zero_static_init = init == "zero";
      c.dyres.reduction = j.value("attention_reduction", c.dyres.reduction);
      c.dyres.dynamic = j.value("dynamic", true);
      c.head_hidden = j.at("head_hidden").get<std::size_t>();
      c.num_classes = j.at("num_classes").get<std::size_t>();
      c.drop_path = j.value("drop_path", 0.0);
      c.dropout = j.value("dropout", 0.0);
      c.seed = j.value("seed", std::uint64_t{0});

      const auto& st = j.at("stages");
      if (!st.is_array()) throw ConfigError("model config: stages must be an array");
      static const std::set<std::string> stage_keys = {"blocks", "channels", "stride", "expansion",
                                                       "irffn_expansion", "groups", "channels_per_group"};
      for (std::size_t i = 0; i < st.size(); ++i) {
        const auto& s = st[i];
        const std::string f = "stages[" + std::to_string(i) + "]";
        for (auto it = s.begin(); it != s.end(); ++it)
          if (!stage_keys.count(it.key())) throw ConfigError("model config: " + f + ": unknown key '" + it.key() + "'");
        if (!s.contains("channels")) throw ConfigError("model config: " + f + ": missing required key 'channels'");
        StageConfig sc;
        sc.channels = s.at("channels").get<std::size_t>();
        sc.blocks = s.value("blocks", sc.blocks);
        sc.stride = s.value("stride", i == 0 ? std::size_t{1} : std::size_t{2});
        sc.expansion = s.value("expansion", sc.expansion);
        sc.irffn_expansion = s.value("irffn_expansion", sc.irffn_expansion);
        if (s.contains("groups") && s.contains("channels_per_group"))
          throw ConfigError("model config: " + f + ": give either groups or channels_per_group, not both");
        if (s.contains("channels_per_group")) {
          const auto cpg = s.at("channels_per_group").get<std::size_t>();
          if (cpg == 0 || sc.channels % cpg != 0)
            throw ConfigError("model config: " + f + ".channels_per_group: must divide channels");
          sc.groups = sc.channels / cpg;
        } else {
          sc.groups = s.value("groups", sc.groups);
        }
        c.stages.push_back(sc);
      }
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("model config: ") + e.what());
    }
    c.validate();
    return c;
  }

  static ModelConfig parse(const std::string& text) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError(std::string("model config: ") + e.what());
    }
    return from_json(j);
  }

  static ModelConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("model config: cannot open '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
  }
};

/// The smallest useful configuration: two stages of one block each.
inline ModelConfig micro_config() {
  ModelConfig c;
  c.name = "micro";
  c.stem_channels = 8;
  c.lite_multiplier = 2;
  c.stages = {StageConfig{1, 8, 1, 4, 2, 2}, StageConfig{1, 16, 2, 4, 2, 2}};
  c.tokens = 2;
  c.token_dim = 8;
  c.heads = 2;
  c.dyres.kernels = 2;
  c.head_hidden = 32;
  c.num_classes = 10;
  c.seed = 1;
  return c;
}

/// 64-bit FNV-1a, used to fingerprint configs in run summaries.
inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace dmf
