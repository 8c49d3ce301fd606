#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"
#include "modt/backbone.hpp"
#include "modt/rollout.hpp"
#include "modt/trainer.hpp"

namespace modt::cli {

enum ExitCode : int { kOk = 0, kUsage = 2, kData = 3, kNumerical = 4, kInternal = 1 };

/// Run configuration file: {"model": {...}, "train": {...}, "loss_weights": {...}, "eval": {...}}.
/// Every section is optional; unknown keys anywhere are rejected.
struct RunConfig {
  backbone::ModelConfig model;
  train::TrainConfig train;
  rollout::EvalSettings eval;
};

nlohmann::json to_json(const RunConfig& c);
/// Applies the sections of `j` on top of `base`. `explicit_model_keys`
/// receives the model keys present in the file.
RunConfig run_config_from_json(const nlohmann::json& j, RunConfig base,
                               std::vector<std::string>* explicit_model_keys = nullptr);

/// Linear-interpolation quantile of unsorted values (q in [0, 1]).
double quantile(std::vector<double> values, double q);

/// Parses `args` (without the program name) and runs one subcommand.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace modt::cli
