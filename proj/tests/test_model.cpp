// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "property_checks.hpp"

namespace fs = std::filesystem;
using dmf::Tensor;

namespace {

const std::string kConfigs = DMF_CONFIG_DIR;

fs::path temp_file(const std::string& name) {
  auto dir = fs::temp_directory_path() / "dmf_tests";
  fs::create_directories(dir);
  return dir / name;
}

dmf::ModelConfig micro_four_stage() {
  auto c = dmf::micro_config();
  c.stages = {{1, 8, 1, 4, 2, 2}, {1, 8, 2, 4, 2, 2}, {1, 16, 2, 4, 2, 2}, {1, 16, 2, 4, 2, 2}};
  return c;
}

}  // namespace

TEST(Model, ConstructionIsDeterministicPerSeed) {
  auto cfg = dmf::micro_config();
  dmf::Model<float> a(cfg), b(cfg);
  EXPECT_TRUE(checks::params_equal(a, b, true, nullptr));
  cfg.seed = 2;
  dmf::Model<float> c(cfg);
  EXPECT_FALSE(checks::params_equal(a, c, false, nullptr));
}

TEST(Model, TensorNamesAreUniqueAndStable) {
  dmf::Model<float> m(dmf::micro_config());
  const auto ps = m.named_tensors();
  std::set<std::string> names;
  for (const auto* t : {&ps.params, &ps.buffers})
    for (const auto& [n, _] : *t) EXPECT_TRUE(names.insert(n).second) << n;
  EXPECT_TRUE(names.count("tokens"));
  EXPECT_TRUE(names.count("stages.0.blocks.0.mobile.expand.w_static"));
  EXPECT_TRUE(names.count("stages.1.downsample.bn_dw.running_var"));
  EXPECT_TRUE(names.count("head.fc2.weight"));
}

TEST(Model, LogitsShape) {
  dmf::Model<float> m(dmf::micro_config());
  dmf::Rng rng(1);
  auto y = m.forward(checks::random_tensor<float>({3, 3, 32, 32}, rng), {});
  EXPECT_EQ(y.shape(), (dmf::Shape{3, 10}));
}

TEST(Model, PyramidStrides) {
  const auto xxs = dmf::ModelConfig::load(kConfigs + "/dmf_xxs.json");
  auto v = checks::pyramid_shapes(xxs, 64);
  EXPECT_TRUE(v.ok) << v.detail;
  v = checks::pyramid_shapes(micro_four_stage(), 64);
  EXPECT_TRUE(v.ok) << v.detail;
  v = checks::pyramid_shapes(micro_four_stage(), 96);
  EXPECT_TRUE(v.ok) << v.detail;
}

TEST(Model, PyramidRejectsBadInputs) {
  dmf::Model<float> two_stage(dmf::micro_config());
  dmf::Rng rng(2);
  EXPECT_THROW(two_stage.pyramid(checks::random_tensor<float>({1, 3, 64, 64}, rng), {}), dmf::ConfigError);
  dmf::Model<float> four(micro_four_stage());
  EXPECT_THROW(four.pyramid(checks::random_tensor<float>({1, 3, 48, 48}, rng), {}), dmf::ConfigError);
}

TEST(Flops, PointwiseClosedForms) {
  dmf::Rng rng(3);
  dmf::FlopsReport r;
  dmf::Conv<float>(16, 16, 1, 1, 1, false, rng).account(r, "a", "t", {16, 2, 2});
  EXPECT_EQ(r.total_macs(), 1024u);
  dmf::FlopsReport r4;
  dmf::Conv<float>(16, 16, 1, 1, 4, false, rng).account(r4, "a", "t", {16, 2, 2});
  EXPECT_EQ(r4.total_macs(), 256u);
  EXPECT_EQ(r4.total_params(), 64u);
  EXPECT_EQ(r4.total_flops(), 512u);
}

TEST(Flops, MicroModelMatchesCounter) {
  std::uint64_t macs = 0;
  auto v = checks::flops_match_counter<float>(dmf::micro_config(), 32, &macs);
  EXPECT_TRUE(v.ok) << v.detail;
  EXPECT_EQ(macs, 198036u);  // frozen
  dmf::Model<float> m(dmf::micro_config());
  EXPECT_EQ(m.count_flops(32, 32).total_params(), 16252u);  // frozen
  std::size_t n = 0;
  for (const auto& [name, t] : m.named_tensors().params) n += t.numel();
  EXPECT_EQ(n, 16252u);
}

TEST(Flops, AblatedMicroModelsMatchCounter) {
  for (const auto& cell : dmf::default_ablation_matrix()) {
    auto cfg = dmf::micro_config();
    cell.edit(cfg);
    auto v = checks::flops_match_counter<float>(cfg, 32);
    EXPECT_TRUE(v.ok) << cell.name << ": " << v.detail;
  }
  auto cfg = dmf::micro_config();
  cfg.dyres.dynamic = false;
  EXPECT_TRUE(checks::flops_match_counter<float>(cfg, 64).ok);
}

TEST(Flops, ResidualKernelCostsNoHeadlineMacs) {
  auto on = dmf::micro_config(), off = on;
  off.dyres.residual = false;
  off.dyres.zero_static_init = false;
  const auto ron = dmf::Model<float>(on).count_flops(32, 32), roff = dmf::Model<float>(off).count_flops(32, 32);
  EXPECT_EQ(ron.total_macs(), roff.total_macs());
  EXPECT_EQ(ron.total_aux() - roff.total_aux(), ron.sum_matching(".aggregate_residual").aux_ops);
  EXPECT_GT(ron.total_params(), roff.total_params());
}

TEST(Flops, VariantBand) {
  std::string table;
  auto v = checks::variant_band(kConfigs, &table);
  EXPECT_TRUE(v.ok) << v.detail;
  std::cout << table << '\n';
}

TEST(Flops, PerLayerRecordsSumToTotal) {
  dmf::Model<float> m(dmf::ModelConfig::load(kConfigs + "/dmf_s.json"));
  const auto r = m.count_flops(224, 224);
  std::uint64_t by_kind = 0;
  for (const auto& [k, v] : r.macs_by_kind()) by_kind += v;
  EXPECT_EQ(by_kind, r.total_macs());
  std::size_t n = 0;
  for (const auto& [name, t] : m.named_tensors().params) n += t.numel();
  EXPECT_EQ(n, r.total_params());
}

TEST(Config, RoundTripsThroughJson) {
  for (const char* f : {"dmf_s.json", "dmf_xs.json", "dmf_xxs.json", "micro.json"}) {
    const auto c = dmf::ModelConfig::load(kConfigs + "/" + f);
    const auto back = dmf::ModelConfig::parse(c.dump());
    EXPECT_EQ(back.dump(), c.dump()) << f;
  }
  EXPECT_EQ(dmf::ModelConfig::load(kConfigs + "/micro.json").dump(), dmf::micro_config().dump());
}

TEST(Config, RejectsMalformedInput) {
  const auto good = dmf::micro_config().to_json();
  auto with = [&](auto edit) {
    auto j = good;
    edit(j);
    return j;
  };
  using J = nlohmann::json;
  EXPECT_THROW(dmf::ModelConfig::parse("{not json"), dmf::ConfigError);
  EXPECT_THROW(dmf::ModelConfig::from_json(with([](J& j) { j["colour"] = 1; })), dmf::ConfigError);
  EXPECT_THROW(dmf::ModelConfig::from_json(with([](J& j) { j.erase("stages"); })), dmf::ConfigError);
  EXPECT_THROW(dmf::ModelConfig::from_json(with([](J& j) { j["heads"] = 3; })), dmf::ConfigError);
  EXPECT_THROW(dmf::ModelConfig::from_json(with([](J& j) { j["stages"][0]["groups"] = 3; })), dmf::ConfigError);
  EXPECT_THROW(dmf::ModelConfig::from_json(with([](J& j) { j["stages"][1]["stride"] = 1; })), dmf::ConfigError);
  EXPECT_THROW(dmf::ModelConfig::from_json(with([](J& j) { j["stages"][0]["expansion"] = 8; })), dmf::ConfigError);
  EXPECT_THROW(dmf::ModelConfig::from_json(with([](J& j) { j["score_mode"] = "tanh"; })), dmf::ConfigError);
  EXPECT_THROW(dmf::ModelConfig::from_json(with([](J& j) { j["tokens"] = "six"; })), dmf::ConfigError);
  EXPECT_THROW(dmf::ModelConfig::from_json(with([](J& j) {
                 j["kernel_residual"] = false;
                 j["static_init"] = "zero";
               })),
               dmf::ConfigError);
  // residual off defaults to random static init
  const auto c = dmf::ModelConfig::from_json(with([](J& j) {
    j["kernel_residual"] = false;
    j.erase("static_init");
  }));
  EXPECT_FALSE(c.dyres.zero_static_init);
  EXPECT_THROW(dmf::ModelConfig::load("/nonexistent/x.json"), dmf::ConfigError);
}

TEST(Checkpoint, RoundTripWithEma) {
  dmf::TrainConfig tc;
  tc.steps = 4;
  tc.warmup_steps = 1;
  tc.anneal_steps = 2;
  tc.batch_size = 4;
  tc.train_samples = 40;
  tc.val_samples = 0;
  tc.log_every = 2;
  auto v = checks::checkpoint_round_trip<float>(tc, dmf::micro_config(), temp_file("rt_f32.dmf").string());
  EXPECT_TRUE(v.ok) << v.detail;
  tc.steps = 2;
  auto vd = checks::checkpoint_round_trip<double>(tc, dmf::micro_config(), temp_file("rt_f64.dmf").string());
  EXPECT_TRUE(vd.ok) << vd.detail;
}

TEST(Checkpoint, LoadIntoAcceptsDifferentSeedOnly) {
  const auto path = temp_file("seed.dmf").string();
  auto cfg = dmf::micro_config();
  dmf::Model<float> src(cfg);
  dmf::save_checkpoint(src, path, 17);
  cfg.seed = 99;
  dmf::Model<float> dst(cfg);
  EXPECT_EQ(dmf::load_into(dst, path), 17u);
  EXPECT_TRUE(checks::params_equal(src, dst, true, nullptr));
  dmf::Model<float> ema(cfg);
  EXPECT_THROW(dmf::load_into(dst, path, &ema), dmf::ConfigMismatchError);
  cfg.dyres.kernels = 3;
  dmf::Model<float> other(cfg);
  EXPECT_THROW(dmf::load_into(other, path), dmf::ConfigMismatchError);
}

TEST(Checkpoint, ReportsCorruption) {
  const auto path = temp_file("good.dmf").string();
  dmf::Model<float> m(dmf::micro_config());
  dmf::save_checkpoint(m, path);
  std::ifstream in(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), {});
  auto write = [](const fs::path& p, const std::string& b) {
    std::ofstream(p, std::ios::binary).write(b.data(), static_cast<std::streamsize>(b.size()));
    return p.string();
  };
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(dmf::load_checkpoint<float>(write(temp_file("magic.dmf"), bad)), dmf::BadMagicError);
  bad = bytes;
  bad[4] = 9;
  EXPECT_THROW(dmf::load_checkpoint<float>(write(temp_file("ver.dmf"), bad)), dmf::VersionError);
  EXPECT_THROW(dmf::load_checkpoint<float>(write(temp_file("trunc.dmf"), bytes.substr(0, bytes.size() / 2))),
               dmf::TruncatedError);
  EXPECT_THROW(dmf::load_checkpoint<float>(write(temp_file("tail.dmf"), bytes + "x")), dmf::FormatError);
  EXPECT_THROW(dmf::load_checkpoint<float>(temp_file("missing.dmf").string() + ".none"), dmf::FormatError);
}

TEST(Checkpoint, ShapeMismatchIsNamed) {
  // rewrite the embedded config so the stored tables no longer fit it
  const auto path = temp_file("shape.dmf").string();
  auto cfg = dmf::micro_config();
  dmf::Model<float> m(cfg);
  dmf::save_checkpoint(m, path);
  std::ifstream in(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), {});
  const std::string old_cfg = cfg.dump();
  auto wide = cfg;
  wide.head_hidden = 33;
  const std::string new_cfg = wide.dump();
  ASSERT_EQ(old_cfg.size(), new_cfg.size());
  bytes.replace(bytes.find(old_cfg), old_cfg.size(), new_cfg);
  std::ofstream(path, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  try {
    dmf::load_checkpoint<float>(path);
    FAIL() << "expected a shape mismatch";
  } catch (const dmf::ShapeMismatchError& e) {
    EXPECT_NE(std::string(e.what()).find("head.fc1"), std::string::npos) << e.what();
  }
}
