#include "modt/cli.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <ostream>

#include "CLI11.hpp"
#include "modt/envdata.hpp"
#include "modt/errors.hpp"
#include "modt/json_util.hpp"

namespace modt::cli {

using nlohmann::json;
namespace fs = std::filesystem;

json to_json(const RunConfig& c) {
  return json{{"model", backbone::to_json(c.model)},
              {"train", train::to_json(c.train)},
              {"loss_weights", train::to_json(c.train.loss_weights)},
              {"eval", rollout::to_json(c.eval)}};
}

RunConfig run_config_from_json(const json& j, RunConfig base, std::vector<std::string>* explicit_model_keys) {
  reject_unknown_keys(j, {"model", "train", "loss_weights", "eval"}, "config");
  if (auto it = j.find("model"); it != j.end()) {
    base.model = backbone::model_config_from_json(*it, base.model);
    if (explicit_model_keys) {
      for (const auto& [key, _] : it->items()) explicit_model_keys->push_back(key);
    }
  }
  if (auto it = j.find("train"); it != j.end()) base.train = train::train_config_from_json(*it, base.train);
  if (auto it = j.find("loss_weights"); it != j.end()) {
    base.train.loss_weights = train::loss_weights_from_json(*it, base.train.loss_weights);
  }
  if (auto it = j.find("eval"); it != j.end()) base.eval = rollout::eval_settings_from_json(*it, base.eval);
  return base;
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw ContractViolation("quantile of an empty sample");
  if (!(q >= 0.0 && q <= 1.0)) throw ContractViolation("quantile level must lie in [0, 1]");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

namespace {

std::string fmt(double v, int prec = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", prec, v);
  return buf;
}

std::string fmt_opt(const std::optional<double>& v) { return v ? fmt(*v) : std::string("n/a"); }

json read_json_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f || !(f << text) || !f.flush()) throw IoError("cannot write " + path.string());
}

/// Accepts either a checkpoint directory or a training output directory.
fs::path resolve_checkpoint(const fs::path& p) {
  if (!fs::exists(p / "manifest.json") && fs::exists(p / "checkpoint" / "manifest.json")) return p / "checkpoint";
  return p;
}

// ---- gen-data ----

struct GenDataArgs {
  std::string env = env::PointMassEnv::kName;
  std::string mix = "random:0.3,pd_weak:0.4,expert:0.3";
  std::size_t episodes = 300;
  std::uint64_t seed = 0;
  std::string out;
};

int gen_data(const GenDataArgs& a, std::ostream& out) {
  if (a.env != env::PointMassEnv::kName) throw ConfigError("unknown env '" + a.env + "'");
  if (a.episodes == 0) throw ConfigError("--episodes must be >= 1");
  const auto mix = env::parse_mix(a.mix);
  const auto data = env::generate_dataset(mix, a.episodes, a.seed);
  if (const fs::path parent = fs::path(a.out).parent_path(); !parent.empty()) {
    std::error_code ec;
    fs::create_directories(parent, ec);
  }
  env::write_dataset(data, a.out);

  std::vector<double> returns;
  for (const auto& t : data.trajectories) returns.push_back(t.episode_return());
  double mean = 0.0;
  for (double r : returns) mean += r;
  mean /= static_cast<double>(returns.size());
  out << "wrote " << a.out << "\n"
      << "episodes     " << data.trajectories.size() << "\n"
      << "return mean  " << fmt(mean) << "\n"
      << "return min   " << fmt(*std::min_element(returns.begin(), returns.end())) << "\n"
      << "return max   " << fmt(*std::max_element(returns.begin(), returns.end())) << "\n"
      << "random_ref   " << fmt_opt(data.header.random_ref) << "\n"
      << "expert_ref   " << fmt_opt(data.header.expert_ref) << "\n";
  return kOk;
}

// ---- train ----

struct TrainArgs {
  std::string data;
  std::string config;
  std::string preset = "paper";
  std::string variant;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<int> updates;
};

int train_cmd(const TrainArgs& a, std::ostream& out) {
  const auto data = env::read_dataset(a.data);

  std::optional<json> file;
  Variant variant = Variant::modt;
  if (!a.config.empty()) {
    file = read_json_file(a.config);
    if (file->is_object() && file->contains("model") && (*file)["model"].is_object() &&
        (*file)["model"].contains("variant")) {
      variant = parse_variant((*file)["model"]["variant"].get<std::string>());
    }
  }
  if (!a.variant.empty()) {
    const Variant flag = parse_variant(a.variant);
    if (file && file->contains("model") && (*file)["model"].contains("variant") && flag != variant) {
      throw ConfigError("--variant " + a.variant + " conflicts with model.variant in " + a.config);
    }
    variant = flag;
  }

  const auto preset = train::make_preset(a.preset, variant);
  RunConfig cfg{preset.model, preset.train, {}};
  std::vector<std::string> explicit_keys;
  if (file) cfg = run_config_from_json(*file, cfg, &explicit_keys);
  cfg.model.variant = variant;
  if (a.seed) cfg.train.seed = *a.seed;
  if (a.updates) {
    cfg.train.total_updates = *a.updates;
    cfg.train.warmup_steps = std::min(cfg.train.warmup_steps, *a.updates);
  }

  auto has_key = [&](const char* k) { return std::find(explicit_keys.begin(), explicit_keys.end(), k) != explicit_keys.end(); };
  if (has_key("state_dim") && cfg.model.state_dim != data.header.state_dim) {
    throw ConfigError("config model.state_dim = " + std::to_string(cfg.model.state_dim) + " but dataset " + a.data +
                      " has state_dim = " + std::to_string(data.header.state_dim));
  }
  if (has_key("action_dim") && cfg.model.action_dim != data.header.action_dim) {
    throw ConfigError("config model.action_dim = " + std::to_string(cfg.model.action_dim) + " but dataset " +
                      a.data + " has action_dim = " + std::to_string(data.header.action_dim));
  }
  cfg.model.state_dim = data.header.state_dim;
  cfg.model.action_dim = data.header.action_dim;
  cfg.model.validate();
  cfg.train.validate(cfg.model.variant);

  const fs::path out_dir = a.out;
  json effective = to_json(cfg);
  effective["data"] = a.data;
  effective["preset"] = a.preset;
  write_text(out_dir / "config.json", effective.dump(2) + "\n");

  train::TrainOptions opts;
  opts.out_dir = out_dir;
  opts.eval = cfg.eval;
  opts.on_step = [&out](const train::MetricsRow& r) {
    if (r.eval_mean) {
      out << "step " << r.step << "  loss " << fmt(r.total) << "  lr " << fmt(r.lr) << "  eval "
          << fmt(*r.eval_mean) << " +- " << fmt(r.eval_std.value_or(0.0)) << std::endl;
    }
    return true;
  };
  auto result = train::train(data, cfg.model, cfg.train, opts);
  out << "final checkpoint " << result.final_checkpoint_dir->string() << "\n";
  return kOk;
}

// ---- eval ----

struct EvalArgs {
  std::string ckpt;
  int episodes = 10;
  std::optional<double> target_return;
  std::uint64_t seed = 0;
  bool json_out = false;
  std::string out;
  std::string return_mode = "predicted";
  int context_len = 0;
};

template <class T>
rollout::EvalReport evaluate_checkpoint(const train::Checkpoint& ck, int episodes, const rollout::EvalSettings& s) {
  auto model = train::model_from_checkpoint<T>(ck);
  return rollout::evaluate(model, ck.dataset, episodes, s);
}

int eval_cmd(const EvalArgs& a, std::ostream& out) {
  if (a.episodes < 1) throw ConfigError("--episodes must be >= 1");
  if (a.context_len < 0) throw ConfigError("--context-len must be >= 0");
  const auto ck = train::load_checkpoint(resolve_checkpoint(a.ckpt));
  rollout::EvalSettings s;
  s.target_return = a.target_return;
  s.return_mode = rollout::parse_return_mode(a.return_mode);
  s.context_len = a.context_len;
  s.seed = a.seed;
  const auto rep = ck.train.precision == 64 ? evaluate_checkpoint<double>(ck, a.episodes, s)
                                            : evaluate_checkpoint<float>(ck, a.episodes, s);
  const json j = rollout::to_json(rep);
  if (!a.out.empty()) write_text(a.out, j.dump(2) + "\n");
  if (a.json_out) {
    out << j.dump(2) << "\n";
    return kOk;
  }
  out << "checkpoint     " << a.ckpt << " (step " << ck.step << ", " << to_string(ck.model.variant) << ")\n"
      << "target return  " << fmt(rep.target_return) << " (" << to_string(rep.return_mode) << ")\n"
      << "episodes       " << rep.returns.size() << " from seed " << rep.seed << "\n";
  for (std::size_t i = 0; i < rep.returns.size(); ++i) {
    out << "  " << i << "  return " << fmt(rep.returns[i]) << "  length " << rep.lengths[i] << "\n";
  }
  out << "mean           " << fmt(rep.mean) << " +- " << fmt(rep.std) << "\n"
      << "normalized     " << fmt_opt(rep.normalized) << "\n";
  if (!rep.warning.empty()) out << "warning: " << rep.warning << "\n";
  return kOk;
}

// ---- attn ----

struct AttnArgs {
  std::string ckpt;
  std::string data;
  int contexts = 16;
  std::uint64_t seed = 0;
  std::string out;
};

fs::path stats_path(const fs::path& doc) {
  fs::path p = doc;
  p.replace_filename(doc.stem().string() + "_stats.csv");
  return p;
}

int attn_cmd(const AttnArgs& a, std::ostream& out) {
  if (a.contexts < 1) throw ConfigError("--contexts must be >= 1");
  const auto ck = train::load_checkpoint(resolve_checkpoint(a.ckpt));
  const auto data = env::read_dataset(a.data);
  if (data.header.state_dim != ck.model.state_dim || data.header.action_dim != ck.model.action_dim) {
    throw ConfigError("dataset dims (" + std::to_string(data.header.state_dim) + ", " +
                      std::to_string(data.header.action_dim) + ") do not match checkpoint dims (" +
                      std::to_string(ck.model.state_dim) + ", " + std::to_string(ck.model.action_dim) + ")");
  }
  auto model = train::model_from_checkpoint<double>(ck);
  json doc = rollout::capture_eval_attention(model, data, a.contexts, a.seed);
  const auto stats = rollout::attention_stats(doc);
  write_text(a.out, doc.dump() + "\n");
  const fs::path csv = stats_path(a.out);
  write_text(csv, rollout::attention_stats_csv(stats));
  out << "wrote " << a.out << " and " << csv.string() << "\n";
  out << "block head entropy divergence\n";
  for (const auto& s : stats) {
    out << s.block << " " << s.head << " " << fmt(s.entropy) << " " << fmt_opt(s.inter_block_divergence) << "\n";
  }
  return kOk;
}

// ---- inspect ----

int inspect_cmd(const std::string& path, bool as_json, std::ostream& out) {
  const auto data = env::read_dataset(path);
  std::map<std::string, std::size_t> tags;
  std::vector<double> returns;
  for (const auto& t : data.trajectories) {
    ++tags[t.policy_tag];
    returns.push_back(t.episode_return());
  }
  static constexpr double levels[] = {0.0, 0.05, 0.25, 0.5, 0.75, 0.95, 1.0};
  json q = json::object();
  if (!returns.empty()) {
    for (double l : levels) q[fmt(l, 3)] = quantile(returns, l);
  }
  json j{{"header", env::to_json(data.header)}, {"episodes", data.trajectories.size()},
         {"steps", data.total_steps()}, {"policy_counts", tags}, {"return_quantiles", q}};
  if (as_json) {
    out << j.dump(2) << "\n";
    return kOk;
  }
  out << "header\n";
  for (const auto& [k, v] : j["header"].items()) out << "  " << k << ": " << v.dump() << "\n";
  out << "episodes " << data.trajectories.size() << " (" << data.total_steps() << " steps)\n";
  out << "per policy\n";
  for (const auto& [tag, n] : tags) out << "  " << tag << ": " << n << "\n";
  out << "return quantiles\n";
  if (returns.empty()) out << "  (no episodes)\n";
  for (const auto& [k, v] : q.items()) out << "  q" << k << ": " << fmt(v.get<double>(), 8) << "\n";
  return kOk;
}

int exit_for(const std::exception& e, std::ostream& err) {
  err << "error: " << e.what() << "\n";
  if (dynamic_cast<const NumericalError*>(&e)) return kNumerical;
  if (dynamic_cast<const IoError*>(&e) || dynamic_cast<const ParseError*>(&e)) return kData;
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ContractViolation*>(&e) ||
      dynamic_cast<const DimensionError*>(&e) || dynamic_cast<const LayoutError*>(&e)) {
    return kUsage;
  }
  return kInternal;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-objective decision transformers on a point-mass task", "modt"};
  app.require_subcommand(1);

  GenDataArgs gd;
  auto* gen = app.add_subcommand("gen-data", "Generate a behaviour dataset (JSONL)");
  gen->add_option("--env", gd.env, "Environment name")->capture_default_str();
  gen->add_option("--mix", gd.mix, "Behaviour policy mixture, e.g. random:0.3,pd_weak:0.4,expert:0.3")
      ->capture_default_str();
  gen->add_option("--episodes", gd.episodes, "Number of episodes")->capture_default_str();
  gen->add_option("--seed", gd.seed, "Base seed; episode i uses seed + i")->capture_default_str();
  gen->add_option("--out", gd.out, "Output dataset path")->required();

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "Train a model on a dataset");
  tr->add_option("--data", ta.data, "Dataset path")->required();
  tr->add_option("--config", ta.config, "Run config JSON (model/train/loss_weights/eval sections)");
  tr->add_option("--preset", ta.preset, "Hyperparameter preset")
      ->check(CLI::IsMember({"paper", "desk"}))
      ->capture_default_str();
  tr->add_option("--variant", ta.variant, "modt or motrdt (default: config file, else modt)")
      ->check(CLI::IsMember({"modt", "motrdt"}));
  tr->add_option("--out", ta.out, "Output directory")->required();
  tr->add_option("--seed", ta.seed, "Override train.seed");
  tr->add_option("--updates", ta.updates, "Override train.total_updates (warmup is capped to it)");

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint with deterministic rollouts");
  ev->add_option("--ckpt", ea.ckpt, "Checkpoint directory (or a training output directory)")->required();
  ev->add_option("--episodes", ea.episodes, "Number of episodes")->capture_default_str();
  ev->add_option("--target-return", ea.target_return, "Initial return prompt (default: 2 x expert_ref)");
  ev->add_option("--seed", ea.seed, "Base seed; episode i uses seed + i")->capture_default_str();
  ev->add_flag("--json", ea.json_out, "Print the report as JSON");
  ev->add_option("--out", ea.out, "Also write the JSON report to this file");
  ev->add_option("--return-mode", ea.return_mode, "predicted or subtract_reward")
      ->check(CLI::IsMember({"predicted", "subtract_reward"}))
      ->capture_default_str();
  ev->add_option("--context-len", ea.context_len, "Context steps at inference (0: model K)")->capture_default_str();

  AttnArgs aa;
  auto* at = app.add_subcommand("attn", "Export averaged eval-mode attention and per-head statistics");
  at->add_option("--ckpt", aa.ckpt, "Checkpoint directory (or a training output directory)")->required();
  at->add_option("--data", aa.data, "Dataset to draw contexts from")->required();
  at->add_option("--contexts", aa.contexts, "Number of contexts to average")->capture_default_str();
  at->add_option("--seed", aa.seed, "Context sampling seed")->capture_default_str();
  at->add_option("--out", aa.out, "Attention JSON path; statistics go to <stem>_stats.csv beside it")->required();

  std::string inspect_path;
  bool inspect_json = false;
  auto* in = app.add_subcommand("inspect", "Summarize a dataset file");
  in->add_option("--data", inspect_path, "Dataset path")->required();
  in->add_flag("--json", inspect_json, "Print the summary as JSON");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*gen) return gen_data(gd, out);
    if (*tr) return train_cmd(ta, out);
    if (*ev) return eval_cmd(ea, out);
    if (*at) return attn_cmd(aa, out);
    if (*in) return inspect_cmd(inspect_path, inspect_json, out);
  } catch (const std::exception& e) {
    return exit_for(e, err);
  }
  return kInternal;
}

}  // namespace modt::cli
