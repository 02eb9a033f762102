// SPDX-License-Identifier: Apache-2.0
//
// dmf: command-line front end for training, evaluation, FLOPs reporting,
// gradient checking, the ablation matrix and synthetic data export.
#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "dmf/dmf.hpp"

namespace {

using dmf::ModelConfig;
using dmf::TrainConfig;

/// Flags shared by train and ablate; each maps onto one TrainConfig field.
struct TrainFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::size_t> steps, batch_size, warmup_steps, anneal_steps, log_every, checkpoint_every;
  std::optional<std::size_t> train_samples, val_samples, image_size;
  std::optional<double> lr, lr_floor, weight_decay, ema_momentum, drop_path, tau_start, label_smoothing, noise;
  std::optional<std::uint64_t> data_seed;
  bool f64 = false;

  void add_to(CLI::App* app) {
    app->add_option("--config", config, "Train config JSON, or a model config JSON (then train defaults apply)");
    app->add_option("--seed", seed, "Seed for initialization, batch order and regularizer masks");
    app->add_option("--out", out, "Output directory (metrics.csv, summary.json, checkpoints)");
    app->add_option("--steps", steps, "Number of optimizer steps");
    app->add_option("--batch-size", batch_size);
    app->add_option("--lr", lr, "Peak learning rate");
    app->add_option("--lr-floor", lr_floor, "Learning rate at the final step");
    app->add_option("--warmup-steps", warmup_steps);
    app->add_option("--weight-decay", weight_decay);
    app->add_option("--ema-momentum", ema_momentum);
    app->add_option("--drop-path", drop_path);
    app->add_option("--tau-start", tau_start, "Initial kernel-attention temperature");
    app->add_option("--anneal-steps", anneal_steps, "Steps over which the temperature decays to 1");
    app->add_option("--label-smoothing", label_smoothing);
    app->add_option("--data-seed", data_seed);
    app->add_option("--train-samples", train_samples);
    app->add_option("--val-samples", val_samples);
    app->add_option("--image-size", image_size);
    app->add_option("--noise", noise);
    app->add_option("--log-every", log_every);
    app->add_option("--checkpoint-every", checkpoint_every);
    app->add_flag("--f64", f64, "Run in 64-bit floating point");
  }

  TrainConfig resolve() const {
    TrainConfig tc;
    if (!config.empty()) {
      std::ifstream in(config);
      if (!in) throw dmf::ConfigError("cannot open '" + config + "'");
      nlohmann::json j;
      try {
        in >> j;
      } catch (const nlohmann::json::parse_error& e) {
        throw dmf::ConfigError("'" + config + "': " + e.what());
      }
      if (j.is_object() && j.contains("stages")) {
        dmf::ModelConfig::from_json(j);  // validate early
        tc.model_config = config;
      } else {
        tc = TrainConfig::load(config);
      }
    }
    if (seed) tc.seed = *seed;
    if (out) tc.out_dir = *out;
    if (steps) {
      tc.steps = *steps;
      // keep schedules inside a shortened run
      if (!warmup_steps) tc.warmup_steps = std::min(tc.warmup_steps, tc.steps);
      if (!anneal_steps) tc.anneal_steps = std::min(tc.anneal_steps, tc.steps);
    }
    if (batch_size) tc.batch_size = *batch_size;
    if (lr) tc.lr = *lr;
    if (lr_floor) tc.lr_floor = *lr_floor;
    if (!lr_floor && tc.lr_floor > tc.lr) tc.lr_floor = tc.lr;
    if (warmup_steps) tc.warmup_steps = *warmup_steps;
    if (weight_decay) tc.weight_decay = *weight_decay;
    if (ema_momentum) tc.ema_momentum = *ema_momentum;
    if (drop_path) tc.drop_path = *drop_path;
    if (tau_start) tc.tau_start = *tau_start;
    if (anneal_steps) tc.anneal_steps = *anneal_steps;
    if (label_smoothing) tc.label_smoothing = *label_smoothing;
    if (data_seed) tc.data_seed = *data_seed;
    if (train_samples) tc.train_samples = *train_samples;
    if (val_samples) tc.val_samples = *val_samples;
    if (image_size) tc.image_size = *image_size;
    if (noise) tc.noise = *noise;
    if (log_every) tc.log_every = *log_every;
    if (checkpoint_every) tc.checkpoint_every = *checkpoint_every;
    tc.validate();
    return tc;
  }
};

template <class T>
int run_train(const TrainFlags& f) {
  const TrainConfig tc = f.resolve();
  const ModelConfig mc = dmf::resolve_model_config(tc);
  auto res = dmf::train<T>(tc, mc, &std::cout);
  std::cout << res.summary.dump(2) << '\n';
  return 0;
}

template <class T>
int run_eval(const std::string& checkpoint, const TrainFlags& f, bool use_ema, const std::string& split) {
  auto ck = dmf::load_checkpoint<T>(checkpoint);
  TrainConfig tc = f.resolve();
  if (use_ema && !ck.ema) throw dmf::ConfigMismatchError("checkpoint '" + checkpoint + "' has no EMA table");
  dmf::Model<T>& m = use_ema ? *ck.ema : ck.model;
  const auto& mc = m.config();
  const auto spec = split == "val" ? tc.val_data(mc.num_classes, mc.image_channels)
                                   : tc.train_data(mc.num_classes, mc.image_channels);
  const dmf::SynthDataset data(spec);
  const auto r = dmf::evaluate(m, data);
  nlohmann::json j = {{"checkpoint", checkpoint}, {"step", ck.step},     {"weights", use_ema ? "ema" : "raw"},
                      {"split", split},           {"samples", r.samples}, {"accuracy", r.accuracy},
                      {"loss", r.loss}};
  std::cout << j.dump(2) << '\n';
  return 0;
}

int run_flops(const std::string& config, std::size_t size, bool per_layer, bool as_json) {
  const ModelConfig mc = config.empty() ? dmf::micro_config() : ModelConfig::load(config);
  const dmf::Model<float> m(mc);
  const auto r = m.count_flops(size, size);
  if (as_json) {
    nlohmann::json j;
    j["model"] = mc.name;
    j["input"] = {mc.image_channels, size, size};
    j["macs"] = r.total_macs();
    j["flops"] = r.total_flops();
    j["aux_ops"] = r.total_aux();
    j["params"] = r.total_params();
    j["macs_by_kind"] = r.macs_by_kind();
    if (per_layer) {
      j["layers"] = nlohmann::json::array();
      for (const auto& rec : r.records)
        j["layers"].push_back(
            {{"name", rec.name}, {"kind", rec.kind}, {"macs", rec.macs}, {"aux_ops", rec.aux_ops}, {"params", rec.params}});
    }
    std::cout << j.dump(2) << '\n';
    return 0;
  }
  std::cout << "model " << mc.name << " at " << size << "x" << size << '\n';
  if (per_layer) {
    std::cout << std::left << std::setw(56) << "layer" << std::setw(18) << "kind" << std::right << std::setw(14)
              << "MACs" << std::setw(12) << "aux" << std::setw(12) << "params" << '\n';
    for (const auto& rec : r.records)
      std::cout << std::left << std::setw(56) << rec.name << std::setw(18) << rec.kind << std::right << std::setw(14)
                << rec.macs << std::setw(12) << rec.aux_ops << std::setw(12) << rec.params << '\n';
  }
  std::cout << "by kind (MACs):\n";
  for (const auto& [k, v] : r.macs_by_kind()) std::cout << "  " << std::left << std::setw(18) << k << v << '\n';
  std::cout << std::fixed << std::setprecision(2) << "total MACs   " << r.total_macs() << " (" << r.total_macs() / 1e6
            << "M)\n"
            << "total FLOPs  " << r.total_flops() << " (" << r.total_flops() / 1e6 << "M, 1 MAC = 2 FLOPs)\n"
            << "aux ops      " << r.total_aux() << " (norms, activations, adds; not in the totals above)\n"
            << "params       " << r.total_params() << " (" << r.total_params() / 1e6 << "M)\n";
  return 0;
}

int run_gradcheck(const std::string& scope, double tolerance, std::uint64_t seed) {
  dmf::GradCheckOptions opt;
  opt.tolerance = tolerance;
  opt.seed = seed;
  std::vector<dmf::GradScope> scopes;
  if (scope == "all")
    scopes = {dmf::GradScope::primitive, dmf::GradScope::block, dmf::GradScope::model};
  else
    scopes = {dmf::parse_grad_scope(scope)};
  std::size_t failed = 0, total = 0;
  for (auto s : scopes)
    for (const auto& r : dmf::run_gradcheck(s, opt)) {
      ++total;
      const bool ok = r.passed;
      failed += !ok;
      std::cout << (ok ? "PASS " : "FAIL ") << std::left << std::setw(34) << r.name << " max rel err "
                << std::scientific << std::setprecision(3) << r.max_rel_error << std::defaultfloat << "  ("
                << r.entries << " entries)";
      if (!r.failure.empty()) std::cout << "  error: " << r.failure;
      std::cout << '\n';
      if (!ok)
        for (const auto& t : r.tensors)
          if (t.rel_error >= tolerance) std::cout << "       " << t.name << ": " << t.rel_error << '\n';
    }
  std::cout << (total - failed) << "/" << total << " checks passed (tolerance " << tolerance << ", 64-bit)\n";
  return failed ? 1 : 0;
}

template <class T>
int run_ablate(const TrainFlags& f, const std::vector<std::string>& only) {
  const TrainConfig tc = f.resolve();
  const ModelConfig base = dmf::resolve_model_config(tc);
  auto cells = dmf::default_ablation_matrix();
  if (!only.empty()) {
    std::vector<dmf::AblationCell> keep;
    for (const auto& c : cells)
      if (std::find(only.begin(), only.end(), c.name) != only.end()) keep.push_back(c);
    if (keep.empty()) throw dmf::ConfigError("ablate: none of the requested cells exist");
    cells = keep;
  }
  const auto rows = dmf::ablate<T>(tc, base, cells, &std::cerr);
  const auto table = dmf::ablation_table(rows);
  std::cout << table;
  if (!tc.out_dir.empty()) {
    std::filesystem::create_directories(tc.out_dir);
    std::ofstream(std::filesystem::path(tc.out_dir) / "ablation.md") << table;
    std::ofstream(std::filesystem::path(tc.out_dir) / "ablation.csv") << dmf::ablation_csv(rows);
  }
  return 0;
}

int run_dataset_gen(const dmf::DatasetSpec& spec, const std::string& out, std::size_t previews) {
  const dmf::SynthDataset ds(spec);
  std::filesystem::create_directories(out);
  ds.save((std::filesystem::path(out) / "dataset.bin").string());
  {
    std::ofstream labels(std::filesystem::path(out) / "labels.csv");
    labels << "index,label\n";
    for (std::size_t i = 0; i < ds.size(); ++i) labels << i << ',' << ds.label(i) << '\n';
  }
  for (std::size_t i = 0; i < std::min(previews, ds.size()); ++i)
    ds.save_ppm(i, (std::filesystem::path(out) / ("sample_" + std::to_string(i) + "_class" +
                                                  std::to_string(ds.label(i)) + ".ppm"))
                       .string());
  std::cout << "wrote " << ds.size() << " samples (" << spec.classes << " classes, " << spec.image_size << "x"
            << spec.image_size << ") to " << out << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DMF model toolkit: training, evaluation, analysis"};
  app.require_subcommand(1);

  TrainFlags train_flags;
  auto* train = app.add_subcommand("train", "Train on the synthetic task");
  train_flags.add_to(train);

  TrainFlags eval_flags;
  std::string checkpoint, split = "train";
  bool use_ema = false;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the synthetic task");
  eval->add_option("checkpoint", checkpoint, "Checkpoint file")->required();
  eval_flags.add_to(eval);
  eval->add_flag("--ema", use_ema, "Evaluate the EMA weights");
  eval->add_option("--split", split, "train or val")->check(CLI::IsMember({"train", "val"}));

  std::string flops_config;
  std::size_t flops_size = 224;
  bool per_layer = false, flops_json = false;
  auto* flops = app.add_subcommand("flops", "Analytic MAC / parameter report");
  flops->add_option("--config", flops_config, "Model config JSON (default: built-in micro config)");
  flops->add_option("--size", flops_size, "Square input extent");
  flops->add_flag("--per-layer", per_layer, "List every record");
  flops->add_flag("--json", flops_json, "Emit JSON");

  std::string scope = "all";
  double tolerance = 1e-4;
  std::uint64_t gc_seed = 7;
  bool gc_f64 = true;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  gradcheck->add_option("--scope", scope, "primitive, block, model or all")
      ->check(CLI::IsMember({"primitive", "block", "model", "all"}));
  gradcheck->add_option("--tolerance", tolerance, "Maximum relative error");
  gradcheck->add_option("--seed", gc_seed);
  gradcheck->add_flag("--f64", gc_f64, "64-bit mode (always on; checks run in double precision)");

  TrainFlags ablate_flags;
  std::vector<std::string> cells;
  auto* ablate = app.add_subcommand("ablate", "Run the ablation matrix and print a comparison table");
  ablate_flags.add_to(ablate);
  ablate->add_option("--cells", cells, "Subset of cells to run (default: all)");

  dmf::DatasetSpec ds_spec;
  std::string ds_out = "synth_data";
  std::size_t previews = 10;
  auto* dsgen = app.add_subcommand("dataset-gen", "Export the synthetic dataset");
  dsgen->add_option("--out", ds_out, "Output directory");
  dsgen->add_option("--samples", ds_spec.samples);
  dsgen->add_option("--classes", ds_spec.classes);
  dsgen->add_option("--size", ds_spec.image_size, "Square image extent");
  dsgen->add_option("--channels", ds_spec.channels);
  dsgen->add_option("--noise", ds_spec.noise);
  dsgen->add_option("--seed", ds_spec.seed);
  dsgen->add_option("--previews", previews, "Number of PPM previews to write");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) return train_flags.f64 ? run_train<double>(train_flags) : run_train<float>(train_flags);
    if (*eval)
      return eval_flags.f64 ? run_eval<double>(checkpoint, eval_flags, use_ema, split)
                            : run_eval<float>(checkpoint, eval_flags, use_ema, split);
    if (*flops) return run_flops(flops_config, flops_size, per_layer, flops_json);
    if (*gradcheck) return run_gradcheck(scope, tolerance, gc_seed);
    if (*ablate) return ablate_flags.f64 ? run_ablate<double>(ablate_flags, cells) : run_ablate<float>(ablate_flags, cells);
    if (*dsgen) return run_dataset_gen(ds_spec, ds_out, previews);
  } catch (const dmf::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const dmf::FormatError& e) {
    std::cerr << "format error: " << e.what() << '\n';
    return 3;
  } catch (const dmf::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
