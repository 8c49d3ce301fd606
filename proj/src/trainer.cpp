#include "modt/trainer.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "modt/errors.hpp"
#include "modt/json_util.hpp"

namespace modt::train {

using nlohmann::json;
namespace fs = std::filesystem;

// ---- configuration ----

void TrainConfig::validate(Variant v) const {
  auto fail = [](const std::string& what) { throw ConfigError("train config: " + what); };
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (!(learning_rate > 0.0)) fail("learning_rate must be positive");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be >= 0");
  if (!(grad_clip > 0.0)) fail("grad_clip must be positive");
  if (total_updates < 1) fail("total_updates must be >= 1");
  if (warmup_steps < 0 || warmup_steps > total_updates) fail("warmup_steps must lie in [0, total_updates]");
  if (eval_every < 1) fail("eval_every must be >= 1");
  if (eval_episodes < 1) fail("eval_episodes must be >= 1");
  if (precision != 32 && precision != 64) fail("precision must be 32 or 64");
  if (keep_checkpoints < 0) fail("keep_checkpoints must be >= 0");
  loss_weights.validate(v);
}

json to_json(const TrainConfig& c) {
  return json{{"batch_size", c.batch_size},       {"learning_rate", c.learning_rate},
              {"weight_decay", c.weight_decay},   {"grad_clip", c.grad_clip},
              {"warmup_steps", c.warmup_steps},   {"total_updates", c.total_updates},
              {"eval_every", c.eval_every},       {"eval_episodes", c.eval_episodes},
              {"seed", c.seed},                   {"precision", c.precision},
              {"keep_checkpoints", c.keep_checkpoints}};
}

TrainConfig train_config_from_json(const json& j, TrainConfig base) {
  reject_unknown_keys(j,
                      {"batch_size", "learning_rate", "weight_decay", "grad_clip", "warmup_steps", "total_updates",
                       "eval_every", "eval_episodes", "seed", "precision", "keep_checkpoints"},
                      "train");
  read_optional(j, "batch_size", base.batch_size, "train");
  read_optional(j, "learning_rate", base.learning_rate, "train");
  read_optional(j, "weight_decay", base.weight_decay, "train");
  read_optional(j, "grad_clip", base.grad_clip, "train");
  read_optional(j, "warmup_steps", base.warmup_steps, "train");
  read_optional(j, "total_updates", base.total_updates, "train");
  read_optional(j, "eval_every", base.eval_every, "train");
  read_optional(j, "eval_episodes", base.eval_episodes, "train");
  read_optional(j, "seed", base.seed, "train");
  read_optional(j, "precision", base.precision, "train");
  read_optional(j, "keep_checkpoints", base.keep_checkpoints, "train");
  return base;
}

json to_json(const traj::LossWeights& w) {
  return json{{"lambda0", w.lambda[0]}, {"lambda1", w.lambda[1]}, {"lambda2", w.lambda[2]}, {"lambda3", w.lambda[3]}};
}

traj::LossWeights loss_weights_from_json(const json& j, traj::LossWeights base) {
  reject_unknown_keys(j, {"lambda0", "lambda1", "lambda2", "lambda3"}, "loss_weights");
  read_optional(j, "lambda0", base.lambda[0], "loss_weights");
  read_optional(j, "lambda1", base.lambda[1], "loss_weights");
  read_optional(j, "lambda2", base.lambda[2], "loss_weights");
  read_optional(j, "lambda3", base.lambda[3], "loss_weights");
  return base;
}

Preset make_preset(std::string_view name, Variant variant) {
  Preset p;
  p.model.variant = variant;
  p.train.loss_weights = traj::LossWeights::uniform(variant);
  if (name == "paper") return p;
  if (name == "desk") {
    p.model.embed_dim = 128;
    p.train.batch_size = 64;
    p.train.total_updates = 20000;
    p.train.warmup_steps = 1000;
    p.train.learning_rate = 1e-3;
    return p;
  }
  throw ConfigError("unknown preset '" + std::string(name) + "' (paper, desk)");
}

// ---- optimizer ----

bool decays(const std::string& name) { return !(name.ends_with(".bias") || name.ends_with(".gain")); }

template <class T>
void lamb_step(diff::ParameterStore<T>& params, OptimizerState& state, const LambConfig& config, double lr) {
  for (const auto& [name, p] : params) {
    for (T g : p.grad) {
      if (!std::isfinite(static_cast<double>(g))) throw NumericalError("non-finite gradient in parameter '" + name + "'");
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(config.beta1, t);
  const double bc2 = 1.0 - std::pow(config.beta2, t);
  std::vector<double> u;
  for (auto& [name, p] : params) {
    const std::size_t n = p.numel();
    Moments& mom = state.moments[name];
    if (mom.m.size() != n) {
      mom.m.assign(n, 0.0);
      mom.v.assign(n, 0.0);
    }
    const double wd = decays(name) ? config.weight_decay : 0.0;
    const bool has_grad = p.has_grad();
    u.resize(n);
    double w_sq = 0.0, u_sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double g = has_grad ? static_cast<double>(p.grad[i]) : 0.0;
      const double w = static_cast<double>(p.values[i]);
      mom.m[i] = config.beta1 * mom.m[i] + (1.0 - config.beta1) * g;
      mom.v[i] = config.beta2 * mom.v[i] + (1.0 - config.beta2) * g * g;
      const double m_hat = mom.m[i] / bc1;
      const double v_hat = mom.v[i] / bc2;
      u[i] = m_hat / (std::sqrt(v_hat) + config.eps) + wd * w;
      w_sq += w * w;
      u_sq += u[i] * u[i];
    }
    const double w_norm = std::sqrt(w_sq), u_norm = std::sqrt(u_sq);
    const double ratio = (config.trust_ratio && w_norm > 0.0 && u_norm > 0.0) ? w_norm / u_norm : 1.0;
    const double scale = lr * ratio;
    for (std::size_t i = 0; i < n; ++i) {
      p.values[i] = static_cast<T>(static_cast<double>(p.values[i]) - scale * u[i]);
    }
  }
}

double lr_schedule(std::int64_t step, const TrainConfig& config) {
  if (config.warmup_steps <= 0) return config.learning_rate;
  const double frac = static_cast<double>(step) / static_cast<double>(config.warmup_steps);
  return config.learning_rate * std::min(1.0, frac);
}

template <class T>
double clip_grad_norm(diff::ParameterStore<T>& params, double max_norm) {
  if (!(max_norm > 0.0)) throw ContractViolation("clip_grad_norm: max_norm must be positive");
  double sq = 0.0;
  for (const auto& [_, p] : params) {
    for (T g : p.grad) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& [_, p] : params) {
      for (T& g : p.grad) g = static_cast<T>(static_cast<double>(g) * s);
    }
  }
  return norm;
}

// ---- metrics ----

std::string metrics_csv_header() { return "step,j_dt,j1,j2,j3,total,lr,eval_return_mean,eval_return_std\n"; }

namespace {

void append_field(std::string& out, const std::optional<double>& v) {
  out += ',';
  if (v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", *v);
    out += buf;
  }
}

std::optional<double> parse_field(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return std::stod(s);
}

json metrics_to_json(const MetricsRow& r) {
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  return json{{"step", r.step},
              {"j_dt", opt(r.losses.j_dt)},
              {"j1", opt(r.losses.j_state)},
              {"j2", opt(r.losses.j_return)},
              {"j3", opt(r.losses.j_region)},
              {"total", r.total},
              {"lr", r.lr},
              {"eval_return_mean", opt(r.eval_mean)},
              {"eval_return_std", opt(r.eval_std)}};
}

MetricsRow metrics_from_json(const json& j) {
  auto opt = [&](const char* k) -> std::optional<double> {
    const auto& v = j.at(k);
    if (v.is_null()) return std::nullopt;
    return v.get<double>();
  };
  MetricsRow r;
  r.step = j.at("step").get<std::int64_t>();
  r.losses = {opt("j_dt"), opt("j1"), opt("j2"), opt("j3")};
  r.total = j.at("total").get<double>();
  r.lr = j.at("lr").get<double>();
  r.eval_mean = opt("eval_return_mean");
  r.eval_std = opt("eval_return_std");
  return r;
}

}  // namespace

std::string metrics_csv_line(const MetricsRow& r) {
  std::string out = std::to_string(r.step);
  append_field(out, r.losses.j_dt);
  append_field(out, r.losses.j_state);
  append_field(out, r.losses.j_return);
  append_field(out, r.losses.j_region);
  append_field(out, r.total);
  append_field(out, r.lr);
  append_field(out, r.eval_mean);
  append_field(out, r.eval_std);
  out += '\n';
  return out;
}

std::vector<MetricsRow> read_metrics_csv(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path.string());
  std::string line;
  std::getline(f, line);
  if (line + "\n" != metrics_csv_header()) throw ParseError("unexpected metrics header", 1);
  std::vector<MetricsRow> rows;
  std::size_t lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) fields.push_back(cell);
    if (!line.empty() && line.back() == ',') fields.emplace_back();
    if (fields.size() != 9) throw ParseError("expected 9 fields", lineno);
    try {
      MetricsRow r;
      r.step = std::stoll(fields[0]);
      r.losses = {parse_field(fields[1]), parse_field(fields[2]), parse_field(fields[3]), parse_field(fields[4])};
      r.total = std::stod(fields[5]);
      r.lr = std::stod(fields[6]);
      r.eval_mean = parse_field(fields[7]);
      r.eval_std = parse_field(fields[8]);
      rows.push_back(r);
    } catch (const std::exception& e) {
      throw ParseError(std::string("bad number: ") + e.what(), lineno);
    }
  }
  return rows;
}

// ---- checkpoints ----

namespace {

void put_f32(std::string& blob, double v) {
  const float f = static_cast<float>(v);
  std::uint32_t bits = std::bit_cast<std::uint32_t>(f);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
  char bytes[4];
  std::memcpy(bytes, &bits, 4);
  blob.append(bytes, 4);
}

float get_f32(const std::string& blob, std::size_t offset) {
  std::uint32_t bits;
  std::memcpy(&bits, blob.data() + offset, 4);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
  return std::bit_cast<float>(bits);
}

std::string read_file(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot open " + p.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& data) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + p.string() + " for writing");
  f.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!f) throw IoError("failed writing " + p.string());
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const fs::path& dir) {
  std::string blob;
  json params = json::array();
  for (const auto& [name, t] : ckpt.params) {
    params.push_back({{"name", name}, {"shape", t.shape}, {"offset", blob.size()}, {"count", t.numel()}});
    for (float v : t.values) put_f32(blob, v);
  }
  json moments = json::array();
  for (const auto& [name, m] : ckpt.optimizer.moments) {
    json entry{{"name", name}, {"count", m.m.size()}, {"m_offset", blob.size()}};
    for (double v : m.m) put_f32(blob, v);
    entry["v_offset"] = blob.size();
    for (double v : m.v) put_f32(blob, v);
    moments.push_back(std::move(entry));
  }
  json tail = json::array();
  for (const auto& r : ckpt.metrics_tail) tail.push_back(metrics_to_json(r));
  json model = backbone::to_json(ckpt.model);
  model["digest"] = backbone::config_digest(ckpt.model);
  json manifest{{"format_version", kCheckpointFormatVersion},
                {"step", ckpt.step},
                {"model", std::move(model)},
                {"train", to_json(ckpt.train)},
                {"loss_weights", to_json(ckpt.train.loss_weights)},
                {"dataset", env::to_json(ckpt.dataset)},
                {"dataset_digest", ckpt.dataset_digest},
                {"blob", "params.bin"},
                {"blob_bytes", blob.size()},
                {"params", std::move(params)},
                {"optimizer", {{"step", ckpt.optimizer.step}, {"moments", std::move(moments)}}},
                {"metrics_tail", std::move(tail)}};

  // Write beside the target and swap in, so an interrupted save never
  // replaces a good checkpoint with a partial one.
  fs::path tmp = dir;
  tmp += ".tmp";
  std::error_code ec;
  fs::remove_all(tmp, ec);
  fs::create_directories(tmp, ec);
  if (ec) throw IoError("cannot create " + tmp.string() + ": " + ec.message());
  write_file(tmp / "params.bin", blob);
  write_file(tmp / "manifest.json", manifest.dump(2) + "\n");
  fs::remove_all(dir, ec);
  fs::rename(tmp, dir, ec);
  if (ec) throw IoError("cannot move checkpoint into " + dir.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const fs::path& dir) {
  const fs::path manifest_path = dir / "manifest.json";
  json m = json::parse(read_file(manifest_path), nullptr, false);
  if (m.is_discarded() || !m.is_object()) throw ParseError(manifest_path.string() + " is not valid JSON", 0);
  if (m.value("format_version", -1) != kCheckpointFormatVersion) {
    throw VersionMismatchError(manifest_path.string() + ": unsupported checkpoint format_version", 0);
  }
  Checkpoint ck;
  try {
    json model = m.at("model");
    model.erase("digest");
    ck.model = backbone::model_config_from_json(model);
    ck.train = train_config_from_json(m.at("train"));
    ck.train.loss_weights = loss_weights_from_json(m.at("loss_weights"));
    ck.dataset = env::header_from_json(m.at("dataset"), 0);
    ck.dataset_digest = m.at("dataset_digest").get<std::string>();
    ck.step = m.at("step").get<std::int64_t>();
    const std::string blob = read_file(dir / m.at("blob").get<std::string>());
    if (blob.size() != m.at("blob_bytes").get<std::size_t>()) {
      throw TruncatedFileError("params blob has " + std::to_string(blob.size()) + " bytes, manifest says " +
                                   std::to_string(m.at("blob_bytes").get<std::size_t>()),
                               0);
    }
    auto check_range = [&](std::size_t offset, std::size_t count, const std::string& name) {
      if (offset + 4 * count > blob.size()) throw TruncatedFileError("blob too short for '" + name + "'", 0);
    };
    for (const auto& p : m.at("params")) {
      const auto name = p.at("name").get<std::string>();
      const auto shape = p.at("shape").get<diff::Shape>();
      const auto offset = p.at("offset").get<std::size_t>();
      const auto count = p.at("count").get<std::size_t>();
      if (diff::shape_numel(shape) != count) throw ParseError("shape/count mismatch for '" + name + "'", 0);
      check_range(offset, count, name);
      std::vector<float> values(count);
      for (std::size_t i = 0; i < count; ++i) values[i] = get_f32(blob, offset + 4 * i);
      ck.params.add(name, shape, std::move(values));
    }
    const json& opt = m.at("optimizer");
    ck.optimizer.step = opt.at("step").get<std::int64_t>();
    for (const auto& e : opt.at("moments")) {
      const auto name = e.at("name").get<std::string>();
      const auto count = e.at("count").get<std::size_t>();
      const auto mo = e.at("m_offset").get<std::size_t>();
      const auto vo = e.at("v_offset").get<std::size_t>();
      check_range(mo, count, name);
      check_range(vo, count, name);
      Moments mom;
      mom.m.resize(count);
      mom.v.resize(count);
      for (std::size_t i = 0; i < count; ++i) {
        mom.m[i] = get_f32(blob, mo + 4 * i);
        mom.v[i] = get_f32(blob, vo + 4 * i);
      }
      ck.optimizer.moments.emplace(name, std::move(mom));
    }
    for (const auto& r : m.at("metrics_tail")) ck.metrics_tail.push_back(metrics_from_json(r));
  } catch (const json::exception& e) {
    throw ParseError(manifest_path.string() + ": " + e.what(), 0);
  } catch (const ConfigError& e) {
    throw ParseError(manifest_path.string() + ": " + e.what(), 0);
  }
  return ck;
}

template <class T>
traj::DecisionModel<T> model_from_checkpoint(const Checkpoint& ckpt) {
  return traj::DecisionModel<T>(ckpt.model, ckpt.params.template cast<T>());
}

// ---- training loop ----

namespace {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t x = seed ^ (salt * 0x9E3779B97F4A7C15ull);
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

void check_dims(const env::DatasetHeader& h, const backbone::ModelConfig& m) {
  if (h.state_dim != m.state_dim || h.action_dim != m.action_dim) {
    throw ConfigError("dataset dims (state " + std::to_string(h.state_dim) + ", action " +
                      std::to_string(h.action_dim) + ") differ from model config (state " +
                      std::to_string(m.state_dim) + ", action " + std::to_string(m.action_dim) + ")");
  }
}

bool finite(const std::optional<double>& v) { return !v || std::isfinite(*v); }

template <class T>
Checkpoint snapshot(traj::DecisionModel<T>& model, const TrainConfig& cfg, const env::Dataset& data,
                    const OptimizerState& opt, std::int64_t step, const std::vector<MetricsRow>& metrics) {
  Checkpoint ck;
  ck.model = model.config();
  ck.train = cfg;
  ck.dataset = data.header;
  ck.dataset_digest = env::header_digest(data.header);
  ck.params = model.parameters().template cast<float>();
  ck.optimizer = opt;
  ck.step = step;
  const std::size_t tail = std::min<std::size_t>(metrics.size(), 20);
  ck.metrics_tail.assign(metrics.end() - static_cast<std::ptrdiff_t>(tail), metrics.end());
  return ck;
}

template <class T>
TrainResult run(const env::Dataset& data, const backbone::ModelConfig& mc, const TrainConfig& cfg,
                const TrainOptions& options) {
  traj::DecisionModel<T> model(mc, cfg.seed);
  OptimizerState opt;
  const LambConfig lamb{0.9, 0.999, 1e-6, cfg.weight_decay, true};
  std::mt19937_64 batch_rng(mix_seed(cfg.seed, 1));

  std::ofstream csv;
  fs::path ckpt_root;
  std::vector<fs::path> kept;
  std::optional<fs::path> last_good;
  if (options.out_dir) {
    std::error_code ec;
    fs::create_directories(*options.out_dir, ec);
    if (ec) throw IoError("cannot create " + options.out_dir->string() + ": " + ec.message());
    csv.open(*options.out_dir / "metrics.csv", std::ios::binary | std::ios::trunc);
    if (!csv) throw IoError("cannot write " + (*options.out_dir / "metrics.csv").string());
    csv << metrics_csv_header();
    ckpt_root = *options.out_dir / "checkpoints";
  }

  TrainResult result;
  auto save_periodic = [&](std::int64_t step) {
    if (!options.out_dir) return;
    const fs::path dir = ckpt_root / ("step_" + std::to_string(step));
    save_checkpoint(snapshot(model, cfg, data, opt, step, result.metrics), dir);
    kept.push_back(dir);
    last_good = dir;
    if (cfg.keep_checkpoints > 0 && kept.size() > static_cast<std::size_t>(cfg.keep_checkpoints)) {
      std::error_code ec;
      fs::remove_all(kept.front(), ec);
      kept.erase(kept.begin());
    }
  };

  std::vector<ContextWindow> batch(static_cast<std::size_t>(cfg.batch_size));
  for (std::int64_t step = 1; step <= cfg.total_updates; ++step) {
    for (auto& w : batch) w = env::sample_context(data, mc.context_len, batch_rng, mc.variant, mc.region_bins).window;

    diff::Tape<T> tape;
    auto out = model.encode(tape, batch, backbone::Mode::train, mix_seed(cfg.seed, 1000 + static_cast<std::uint64_t>(step)));
    auto terms = traj::compute_losses(tape, model, out, batch);
    auto& loss = traj::scalarize(tape, terms, cfg.loss_weights, mc.variant);

    MetricsRow row;
    row.step = step;
    row.losses = terms.values();
    row.total = static_cast<double>(loss.item());
    row.lr = lr_schedule(step, cfg);
    if (!std::isfinite(row.total) || !finite(row.losses.j_dt) || !finite(row.losses.j_state) ||
        !finite(row.losses.j_return) || !finite(row.losses.j_region)) {
      if (csv.is_open()) csv.flush();
      throw NumericalError("non-finite loss at step " + std::to_string(step) + "; last good checkpoint: " +
                           (last_good ? last_good->string() : std::string("none")));
    }

    model.parameters().zero_grad();
    tape.backward(loss);
    clip_grad_norm(model.parameters(), cfg.grad_clip);
    const bool eval_point = step % cfg.eval_every == 0 || step == cfg.total_updates;
    try {
      lamb_step(model.parameters(), opt, lamb, row.lr);
      if (eval_point) {
        auto rep = rollout::evaluate(model, data.header, cfg.eval_episodes, options.eval);
        row.eval_mean = rep.mean;
        row.eval_std = rep.std;
      }
    } catch (const NumericalError& e) {
      if (csv.is_open()) csv.flush();
      throw NumericalError(std::string(e.what()) + " at step " + std::to_string(step) + "; last good checkpoint: " +
                           (last_good ? last_good->string() : std::string("none")));
    }
    result.metrics.push_back(row);
    if (csv.is_open()) {
      csv << metrics_csv_line(row);
      if (eval_point) csv.flush();
    }
    bool keep_going = !options.on_step || options.on_step(row);
    if (eval_point && step != cfg.total_updates && keep_going) save_periodic(step);
    if (!keep_going) break;
  }

  const std::int64_t final_step = result.metrics.empty() ? 0 : result.metrics.back().step;
  result.final_checkpoint = snapshot(model, cfg, data, opt, final_step, result.metrics);
  if (options.out_dir) {
    save_periodic(final_step);
    result.final_checkpoint_dir = *options.out_dir / "checkpoint";
    save_checkpoint(result.final_checkpoint, *result.final_checkpoint_dir);
  }
  return result;
}

}  // namespace

TrainResult train(const env::Dataset& data, const backbone::ModelConfig& model, const TrainConfig& config,
                  const TrainOptions& options) {
  model.validate();
  config.validate(model.variant);
  check_dims(data.header, model);
  if (data.trajectories.empty()) throw ConfigError("dataset has no trajectories");
  return config.precision == 64 ? run<double>(data, model, config, options) : run<float>(data, model, config, options);
}

#define MODT_INSTANTIATE_TRAINER(T)                                                                  \
  template void lamb_step(diff::ParameterStore<T>&, OptimizerState&, const LambConfig&, double); \
  template double clip_grad_norm(diff::ParameterStore<T>&, double);                               \
  template traj::DecisionModel<T> model_from_checkpoint(const Checkpoint&);

MODT_INSTANTIATE_TRAINER(float)
MODT_INSTANTIATE_TRAINER(double)

}  // namespace modt::train
