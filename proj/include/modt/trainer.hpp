#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "modt/backbone.hpp"
#include "modt/diffcore/parameters.hpp"
#include "modt/envdata.hpp"
#include "modt/rollout.hpp"
#include "modt/trajmodel.hpp"

namespace modt::train {

struct TrainConfig {
  int batch_size = 256;
  double learning_rate = 1e-4;
  double weight_decay = 1e-3;
  double grad_clip = 0.25;
  int warmup_steps = 10000;
  int total_updates = 100000;
  int eval_every = 1000;
  int eval_episodes = 10;
  std::uint64_t seed = 0;
  traj::LossWeights loss_weights = traj::LossWeights::uniform(Variant::modt);
  int precision = 32;
  /// Step-N checkpoints kept under checkpoints/; older ones are removed. 0 keeps all.
  int keep_checkpoints = 3;

  void validate(Variant v) const;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});
nlohmann::json to_json(const traj::LossWeights& w);
traj::LossWeights loss_weights_from_json(const nlohmann::json& j, traj::LossWeights base = {});

struct Preset {
  backbone::ModelConfig model;
  TrainConfig train;
};

/// "paper": the published hyperparameter table. "desk": same architecture
/// depth with embed 128, batch 64, 2e4 updates, 1e3 warmup steps, lr 1e-3.
Preset make_preset(std::string_view name, Variant variant);

struct LambConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-6;
  double weight_decay = 0.0;
  bool trust_ratio = true;  // false gives a plain bias-corrected adaptive-moment step
};

struct Moments {
  std::vector<double> m;
  std::vector<double> v;
};

struct OptimizerState {
  std::map<std::string, Moments> moments;
  std::int64_t step = 0;
};

/// Weight decay is skipped for parameters named *.bias or *.gain.
bool decays(const std::string& name);

/// One LAMB update with per-tensor trust ratio |w| / |u| (1 when either is 0).
/// A missing gradient counts as zero. NaN/Inf gradients throw NumericalError
/// naming the parameter, before anything is modified.
template <class T>
void lamb_step(diff::ParameterStore<T>& params, OptimizerState& state, const LambConfig& config, double lr);

/// base * min(1, step / warmup); step is 1-based.
double lr_schedule(std::int64_t step, const TrainConfig& config);

/// Scales all gradients by max_norm / norm when the global L2 norm exceeds
/// max_norm. Returns the norm before clipping.
template <class T>
double clip_grad_norm(diff::ParameterStore<T>& params, double max_norm);

struct MetricsRow {
  std::int64_t step = 0;
  traj::LossValues losses;
  double total = 0.0;
  double lr = 0.0;
  std::optional<double> eval_mean;
  std::optional<double> eval_std;

  bool operator==(const MetricsRow&) const = default;
};

std::string metrics_csv_header();
std::string metrics_csv_line(const MetricsRow& row);
std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path);

struct Checkpoint {
  backbone::ModelConfig model;
  TrainConfig train;
  env::DatasetHeader dataset;
  std::string dataset_digest;
  diff::ParameterStore<float> params;
  OptimizerState optimizer;
  std::int64_t step = 0;
  std::vector<MetricsRow> metrics_tail;
};

inline constexpr int kCheckpointFormatVersion = 1;

/// Writes manifest.json and params.bin (little-endian float32) into `dir`.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

template <class T>
traj::DecisionModel<T> model_from_checkpoint(const Checkpoint& ckpt);

struct TrainOptions {
  std::optional<std::filesystem::path> out_dir;  // metrics.csv, checkpoints/, checkpoint/
  rollout::EvalSettings eval;
  /// Called after every update with the logged row; return false to stop early.
  std::function<bool(const MetricsRow&)> on_step;
};

struct TrainResult {
  std::vector<MetricsRow> metrics;
  Checkpoint final_checkpoint;
  std::optional<std::filesystem::path> final_checkpoint_dir;
};

/// Samples batches, scalarizes the losses, clips, and applies LAMB. Losses
/// logged for step t are computed before the step-t update. Evaluation and a
/// checkpoint happen every `eval_every` updates and at the end. A
/// non-finite loss throws NumericalError; checkpoints already written stay.
TrainResult train(const env::Dataset& data, const backbone::ModelConfig& model, const TrainConfig& config,
                  const TrainOptions& options = {});

}  // namespace modt::train
