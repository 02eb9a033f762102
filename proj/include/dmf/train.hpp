// SPDX-License-Identifier: Apache-2.0
//
// Desk-scale training loop, evaluation and the ablation runner.
#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numeric>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dmf/checkpoint.hpp"
#include "dmf/config.hpp"
#include "dmf/data.hpp"
#include "dmf/model.hpp"
#include "dmf/optim.hpp"

namespace dmf {

struct TrainConfig {
  std::string model_config;  // path; empty selects the built-in micro config
  std::size_t steps = 3000;
  std::size_t batch_size = 32;
  double lr = 2e-3;
  double lr_floor = 1e-5;
  std::size_t warmup_steps = 150;
  double weight_decay = 0.05;
  double ema_momentum = 0.99;
  std::optional<double> drop_path;  // overrides the model config when set
  double tau_start = 30.0;
  std::size_t anneal_steps = 300;
  double label_smoothing = 0.0;
  std::uint64_t seed = 0;
  std::uint64_t data_seed = 0;
  std::size_t image_size = 32;
  std::size_t train_samples = 2000;
  std::size_t val_samples = 500;
  double noise = 0.25;
  std::size_t log_every = 10;
  std::size_t checkpoint_every = 0;  // 0: only the final checkpoint
  std::string out_dir;               // empty: no files written

  void validate() const {
    auto fail = [](const std::string& f, const std::string& why) { throw ConfigError("train config: " + f + ": " + why); };
    if (steps == 0) fail("steps", "must be positive");
    if (batch_size == 0) fail("batch_size", "must be positive");
    if (!(lr >= 0.0) || !std::isfinite(lr)) fail("lr", "must be finite and non-negative");
    if (!(lr_floor >= 0.0) || lr_floor > lr) fail("lr_floor", "must be in [0, lr]");
    if (warmup_steps > steps) fail("warmup_steps", "exceeds total steps");
    if (!(weight_decay >= 0.0)) fail("weight_decay", "must be non-negative");
    if (!(ema_momentum >= 0.0 && ema_momentum < 1.0)) fail("ema_momentum", "must be in [0,1)");
    if (drop_path && !(*drop_path >= 0.0 && *drop_path < 1.0)) fail("drop_path", "must be in [0,1)");
    if (tau_start < 1.0) fail("tau_start", "must be >= 1");
    if (anneal_steps > steps) fail("anneal_steps", "exceeds total steps");
    if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) fail("label_smoothing", "must be in [0,1)");
    if (train_samples == 0) fail("train_samples", "must be positive");
    if (log_every == 0) fail("log_every", "must be positive");
  }

  LrSchedule lr_schedule() const { return {lr, lr_floor, warmup_steps, steps}; }
  TemperatureSchedule temperature() const { return {tau_start, anneal_steps}; }

  nlohmann::json to_json() const {
    nlohmann::json j = {{"model_config", model_config}, {"steps", steps},
                        {"batch_size", batch_size},     {"lr", lr},
                        {"lr_floor", lr_floor},         {"warmup_steps", warmup_steps},
                        {"weight_decay", weight_decay}, {"ema_momentum", ema_momentum},
                        {"tau_start", tau_start},       {"anneal_steps", anneal_steps},
                        {"label_smoothing", label_smoothing}, {"seed", seed},
                        {"data_seed", data_seed},       {"image_size", image_size},
                        {"train_samples", train_samples}, {"val_samples", val_samples},
                        {"noise", noise},               {"log_every", log_every},
                        {"checkpoint_every", checkpoint_every}, {"out_dir", out_dir}};
    if (drop_path) j["drop_path"] = *drop_path;
    return j;
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("train config: top level must be an object");
    static const std::set<std::string> known = {
        "model_config", "steps",     "batch_size", "lr",           "lr_floor",      "warmup_steps", "weight_decay",
        "ema_momentum", "drop_path", "tau_start",  "anneal_steps", "label_smoothing", "seed",        "data_seed",
        "image_size",   "train_samples", "val_samples", "noise",   "log_every",     "checkpoint_every", "out_dir",
        "note"};
    for (auto it = j.begin(); it != j.end(); ++it)
      if (!known.count(it.key())) throw ConfigError("train config: unknown key '" + it.key() + "'");
    TrainConfig c;
    try {
      c.model_config = j.value("model_config", c.model_config);
      c.steps = j.value("steps", c.steps);
      c.batch_size = j.value("batch_size", c.batch_size);
      c.lr = j.value("lr", c.lr);
      c.lr_floor = j.value("lr_floor", c.lr_floor);
      c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
      c.weight_decay = j.value("weight_decay", c.weight_decay);
      c.ema_momentum = j.value("ema_momentum", c.ema_momentum);
      if (j.contains("drop_path")) c.drop_path = j.at("drop_path").get<double>();
      c.tau_start = j.value("tau_start", c.tau_start);
      c.anneal_steps = j.value("anneal_steps", c.anneal_steps);
      c.label_smoothing = j.value("label_smoothing", c.label_smoothing);
      c.seed = j.value("seed", c.seed);
      c.data_seed = j.value("data_seed", c.data_seed);
      c.image_size = j.value("image_size", c.image_size);
      c.train_samples = j.value("train_samples", c.train_samples);
      c.val_samples = j.value("val_samples", c.val_samples);
      c.noise = j.value("noise", c.noise);
      c.log_every = j.value("log_every", c.log_every);
      c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
      c.out_dir = j.value("out_dir", c.out_dir);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("train config: ") + e.what());
    }
    c.validate();
    return c;
  }

  static TrainConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("train config: cannot open '" + path + "'");
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError(std::string("train config: ") + e.what());
    }
    auto c = from_json(j);
    // A relative model path is taken relative to the train config's directory.
    if (!c.model_config.empty() && std::filesystem::path(c.model_config).is_relative())
      c.model_config = (std::filesystem::path(path).parent_path() / c.model_config).lexically_normal().string();
    return c;
  }

  DatasetSpec train_data(std::size_t classes, std::size_t channels) const {
    return {image_size, channels, classes, train_samples, noise, data_seed};
  }
  DatasetSpec val_data(std::size_t classes, std::size_t channels) const {
    return {image_size, channels, classes, val_samples, noise, data_seed + 0x9e3779b97f4a7c15ull};
  }
};

/// Model config used by a training run: the file named in the train config
/// (or the micro config), with the run seed and drop-path override applied.
inline ModelConfig resolve_model_config(const TrainConfig& tc) {
  ModelConfig mc = tc.model_config.empty() ? micro_config() : ModelConfig::load(tc.model_config);
  mc.seed = tc.seed;
  if (tc.drop_path) mc.drop_path = *tc.drop_path;
  mc.validate();
  return mc;
}

struct MetricsRow {
  std::size_t step = 0;
  double loss = 0.0, lr = 0.0, tau = 1.0, train_acc = 0.0, ema_gap = 0.0;
  double wall_ms = 0.0;  // excluded from determinism comparisons
};

inline const char* kMetricsHeader = "step,loss,lr,tau,train_acc,ema_gap,wall_ms";

inline std::string metrics_csv_line(const MetricsRow& r) {
  std::ostringstream os;
  os << std::setprecision(9) << r.step << ',' << r.loss << ',' << r.lr << ',' << r.tau << ',' << r.train_acc << ','
     << r.ema_gap << ',' << std::setprecision(6) << r.wall_ms;
  return os.str();
}

struct EvalResult {
  double accuracy = 0.0;
  double loss = 0.0;
  std::size_t samples = 0;
};

/// Eval-mode accuracy and mean loss over a dataset.
template <class T>
EvalResult evaluate(Model<T>& model, const SynthDataset& data, std::size_t batch = 100) {
  NoGradGuard ng;
  const ForwardContext ctx{false, 1.0, nullptr};
  EvalResult r;
  double loss_sum = 0.0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < data.size(); start += batch) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(data.size(), start + batch); ++i) idx.push_back(i);
    auto [x, y] = data.template batch<T>(idx);
    auto logits = model.forward(x, ctx);
    loss_sum += static_cast<double>(cross_entropy(logits, y).item()) * static_cast<double>(idx.size());
    const std::size_t K = logits.dim(1);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < K; ++k)
        if (logits[b * K + k] > logits[b * K + best]) best = k;
      correct += static_cast<int>(best) == y[b];
    }
  }
  r.samples = data.size();
  r.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  r.loss = loss_sum / static_cast<double>(data.size());
  return r;
}

template <class T>
struct TrainResult {
  Model<T> model;
  Ema<T> ema;
  std::vector<MetricsRow> rows;
  nlohmann::json summary;
  EvalResult train_eval, val_eval;  // raw weights, eval mode; val is empty without a val split
};

/// Order-preserving batch stream: a fresh seeded permutation per epoch.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t batch, std::uint64_t seed) : n_(n), batch_(batch), rng_(seed) {}

  std::vector<std::size_t> next() {
    std::vector<std::size_t> idx;
    while (idx.size() < batch_) {
      if (pos_ == order_.size()) {
        order_.resize(n_);
        std::iota(order_.begin(), order_.end(), 0);
        std::shuffle(order_.begin(), order_.end(), rng_);
        pos_ = 0;
      }
      idx.push_back(order_[pos_++]);
    }
    return idx;
  }

 private:
  std::size_t n_, batch_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

/// Trains `mc` on the synthetic task. Deterministic under (seed, configs)
/// except for the wall_ms column. `log` receives one progress line per
/// metrics row when set.
template <class T = float>
TrainResult<T> train(const TrainConfig& tc, const ModelConfig& mc, std::ostream* log = nullptr) {
  tc.validate();
  const SynthDataset train_set(tc.train_data(mc.num_classes, mc.image_channels));
  std::optional<SynthDataset> val_set;
  if (tc.val_samples > 0) val_set.emplace(tc.val_data(mc.num_classes, mc.image_channels));

  Model<T> model(mc);
  Ema<T> ema(model, tc.ema_momentum);
  AdamWConfig acfg;
  acfg.weight_decay = tc.weight_decay;
  AdamW<T> opt(model.parameters(), acfg);
  const auto sched = tc.lr_schedule();
  const auto temp = tc.temperature();
  BatchSampler sampler(train_set.size(), tc.batch_size, tc.seed ^ 0x5bd1e995ull);
  Rng noise_rng(tc.seed ^ 0xc2b2ae35ull);  // drop-path / dropout masks

  std::optional<std::ofstream> csv;
  if (!tc.out_dir.empty()) {
    std::filesystem::create_directories(tc.out_dir);
    csv.emplace(std::filesystem::path(tc.out_dir) / "metrics.csv");
    if (!*csv) throw FormatError("train: cannot write metrics to '" + tc.out_dir + "'");
    *csv << kMetricsHeader << '\n';
  }

  std::vector<MetricsRow> rows;
  const auto t0 = std::chrono::steady_clock::now();
  double acc_window = 0.0, loss_window = 0.0;
  std::size_t window = 0;
  for (std::size_t step = 1; step <= tc.steps; ++step) {
    const double tau = temp.at(step - 1);
    const double lr = lr_at(step, sched);
    auto [x, y] = train_set.template batch<T>(sampler.next());
    const ForwardContext ctx{true, tau, &noise_rng};
    model.zero_grad();
    auto logits = model.forward(x, ctx);
    auto loss = cross_entropy(logits, y, static_cast<T>(tc.label_smoothing));
    const double lv = static_cast<double>(loss.item());
    if (!std::isfinite(lv)) throw NumericError("train: loss diverged (non-finite) at step " + std::to_string(step));
    backward(loss);
    opt.step(lr);
    ema.update(model);

    const std::size_t K = logits.dim(1);
    std::size_t correct = 0;
    for (std::size_t b = 0; b < y.size(); ++b) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < K; ++k)
        if (logits[b * K + k] > logits[b * K + best]) best = k;
      correct += static_cast<int>(best) == y[b];
    }
    acc_window += static_cast<double>(correct) / static_cast<double>(y.size());
    loss_window += lv;
    ++window;

    if (step % tc.log_every == 0 || step == tc.steps) {
      MetricsRow r;
      r.step = step;
      r.loss = loss_window / static_cast<double>(window);
      r.train_acc = acc_window / static_cast<double>(window);
      r.lr = lr;
      r.tau = tau;
      r.ema_gap = ema.gap(model);
      r.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      acc_window = loss_window = 0.0;
      window = 0;
      rows.push_back(r);
      if (csv) *csv << metrics_csv_line(r) << '\n';
      if (log) *log << "step " << r.step << " loss " << r.loss << " acc " << r.train_acc << " lr " << r.lr << " tau "
                    << r.tau << '\n';
    }
    if (!tc.out_dir.empty() && tc.checkpoint_every > 0 && step % tc.checkpoint_every == 0 && step != tc.steps)
      save_checkpoint(model, (std::filesystem::path(tc.out_dir) / ("checkpoint_step" + std::to_string(step) + ".dmf")).string(),
                      step, &ema.shadow());
  }

  nlohmann::json summary;
  const auto& last = rows.back();
  summary["step"] = last.step;
  summary["loss"] = last.loss;
  summary["lr"] = last.lr;
  summary["tau"] = last.tau;
  summary["train_acc"] = last.train_acc;
  summary["ema_gap"] = last.ema_gap;
  summary["wall_ms"] = last.wall_ms;
  summary["config_hash"] = fnv1a(mc.dump() + tc.to_json().dump());
  summary["model"] = mc.name;
  summary["params"] = model.count_flops(tc.image_size, tc.image_size).total_params();
  summary["macs_per_image"] = model.count_flops(tc.image_size, tc.image_size).total_macs();
  const auto tr = evaluate(model, train_set);
  EvalResult va;
  summary["eval_train_acc"] = tr.accuracy;
  summary["eval_train_loss"] = tr.loss;
  summary["ema_eval_train_acc"] = evaluate(ema.shadow(), train_set).accuracy;
  if (val_set) {
    va = evaluate(model, *val_set);
    summary["val_acc"] = va.accuracy;
    summary["ema_val_acc"] = evaluate(ema.shadow(), *val_set).accuracy;
  }
  if (!tc.out_dir.empty()) {
    std::ofstream js(std::filesystem::path(tc.out_dir) / "summary.json");
    js << summary.dump(2) << '\n';
    save_checkpoint(model, (std::filesystem::path(tc.out_dir) / "final.dmf").string(), tc.steps, &ema.shadow());
  }
  return {std::move(model), std::move(ema), std::move(rows), std::move(summary), tr, va};
}

// ---------------------------------------------------------------------------
// Ablation matrix
// ---------------------------------------------------------------------------

struct AblationCell {
  std::string name;
  std::function<void(ModelConfig&)> edit;
};

/// Baseline, the token-input x kernel-residual 2x2, softmax scores, random
/// static init, and the kernel-count sweep.
inline std::vector<AblationCell> default_ablation_matrix() {
  std::vector<AblationCell> cells = {
      {"baseline", [](ModelConfig&) {}},
      {"no_token_input", [](ModelConfig& c) { c.dyres.token_input = false; }},
      {"no_residual", [](ModelConfig& c) {
         c.dyres.residual = false;
         c.dyres.zero_static_init = false;
       }},
      {"no_token_no_residual", [](ModelConfig& c) {
         c.dyres.token_input = false;
         c.dyres.residual = false;
         c.dyres.zero_static_init = false;
       }},
      {"softmax_scores", [](ModelConfig& c) { c.dyres.score_mode = ScoreMode::softmax; }},
      {"random_static_init", [](ModelConfig& c) { c.dyres.zero_static_init = false; }},
  };
  for (std::size_t k : {1, 2, 4, 8})
    cells.push_back({"kernels_" + std::to_string(k), [k](ModelConfig& c) { c.dyres.kernels = k; }});
  return cells;
}

struct AblationRow {
  std::string name;
  bool ok = false;
  std::string error;
  double train_acc = 0.0, val_acc = 0.0, final_loss = 0.0, wall_ms = 0.0;
  std::uint64_t macs = 0, aux_ops = 0, params = 0;
  std::int64_t d_macs = 0, d_aux = 0, d_params = 0;  // relative to the first successful cell
};

inline constexpr const char* kAblationBanner =
    "NOTE: synthetic-task numbers at desk scale. They are not comparable to large-scale benchmark accuracies and do "
    "not reproduce published ablation deltas.";

/// Runs every cell with the same seeds; a failing cell is recorded and skipped.
template <class T = float>
std::vector<AblationRow> ablate(const TrainConfig& tc, const ModelConfig& base, const std::vector<AblationCell>& cells,
                                std::ostream* log = nullptr) {
  std::vector<AblationRow> rows;
  const AblationRow* ref = nullptr;
  for (const auto& cell : cells) {
    AblationRow r;
    r.name = cell.name;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      ModelConfig mc = base;
      cell.edit(mc);
      mc.name = base.name + "/" + cell.name;
      mc.validate();
      TrainConfig cfg = tc;
      cfg.out_dir.clear();
      auto res = train<T>(cfg, mc);
      const auto rep = res.model.count_flops(tc.image_size, tc.image_size);
      r.macs = rep.total_macs();
      r.aux_ops = rep.total_aux();
      r.params = rep.total_params();
      r.train_acc = res.train_eval.accuracy;
      r.val_acc = res.val_eval.accuracy;
      r.final_loss = res.rows.back().loss;
      r.ok = true;
    } catch (const std::exception& e) {
      r.error = e.what();
    }
    r.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    rows.push_back(r);
    if (log) *log << "cell " << r.name << (r.ok ? " done" : " FAILED: " + r.error) << '\n';
  }
  for (const auto& r : rows)
    if (r.ok) {
      ref = &r;
      break;
    }
  if (ref)
    for (auto& r : rows)
      if (r.ok) {
        r.d_macs = static_cast<std::int64_t>(r.macs) - static_cast<std::int64_t>(ref->macs);
        r.d_aux = static_cast<std::int64_t>(r.aux_ops) - static_cast<std::int64_t>(ref->aux_ops);
        r.d_params = static_cast<std::int64_t>(r.params) - static_cast<std::int64_t>(ref->params);
      }
  return rows;
}

/// Markdown comparison table preceded by the non-comparability banner.
inline std::string ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << kAblationBanner << "\n\n";
  os << "| config | train acc | val acc | final loss | MACs | dMACs | aux ops | daux | params | dparams | wall s | status |\n";
  os << "|---|---|---|---|---|---|---|---|---|---|---|---|\n";
  os << std::fixed;
  for (const auto& r : rows) {
    os << "| " << r.name << " | ";
    if (r.ok) {
      os << std::setprecision(3) << r.train_acc << " | " << r.val_acc << " | " << std::setprecision(4) << r.final_loss
         << " | " << r.macs << " | " << std::showpos << r.d_macs << std::noshowpos << " | " << r.aux_ops << " | "
         << std::showpos << r.d_aux << std::noshowpos << " | " << r.params << " | " << std::showpos << r.d_params
         << std::noshowpos << " | " << std::setprecision(1) << r.wall_ms / 1000.0 << " | ok |\n";
    } else {
      os << "- | - | - | - | - | - | - | - | - | " << std::setprecision(1) << r.wall_ms / 1000.0 << " | error: " << r.error
         << " |\n";
    }
  }
  return os.str();
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "config,ok,train_acc,val_acc,final_loss,macs,d_macs,aux_ops,d_aux,params,d_params,wall_ms,error\n";
  for (const auto& r : rows)
    os << r.name << ',' << (r.ok ? 1 : 0) << ',' << r.train_acc << ',' << r.val_acc << ',' << r.final_loss << ','
       << r.macs << ',' << r.d_macs << ',' << r.aux_ops << ',' << r.d_aux << ',' << r.params << ',' << r.d_params << ','
       << r.wall_ms << ",\"" << r.error << "\"\n";
  return os.str();
}

}  // namespace dmf
