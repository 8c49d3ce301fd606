#include "modt/rollout.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "modt/errors.hpp"
#include "modt/json_util.hpp"

namespace modt::rollout {

using nlohmann::json;

std::string_view to_string(ReturnMode m) { return m == ReturnMode::predicted ? "predicted" : "subtract_reward"; }

ReturnMode parse_return_mode(std::string_view s) {
  if (s == "predicted") return ReturnMode::predicted;
  if (s == "subtract_reward") return ReturnMode::subtract_reward;
  throw ConfigError("unknown return mode '" + std::string(s) + "' (predicted, subtract_reward)");
}

json to_json(const EvalSettings& s) {
  return json{{"target_return", s.target_return ? json(*s.target_return) : json(nullptr)},
              {"return_mode", std::string(to_string(s.return_mode))},
              {"context_len", s.context_len},
              {"seed", s.seed}};
}

EvalSettings eval_settings_from_json(const json& j, EvalSettings base) {
  reject_unknown_keys(j, {"target_return", "return_mode", "context_len", "seed"}, "eval");
  if (auto it = j.find("target_return"); it != j.end()) {
    if (it->is_null()) {
      base.target_return.reset();
    } else if (it->is_number()) {
      base.target_return = it->get<double>();
    } else {
      throw ConfigError("eval.target_return: expected a number or null");
    }
  }
  std::string mode(to_string(base.return_mode));
  read_optional(j, "return_mode", mode, "eval");
  base.return_mode = parse_return_mode(mode);
  read_optional(j, "context_len", base.context_len, "eval");
  read_optional(j, "seed", base.seed, "eval");
  if (base.context_len < 0) throw ConfigError("eval.context_len must be >= 0");
  return base;
}

double default_target_return(const env::DatasetHeader& header) {
  if (!header.expert_ref) throw ConfigError("dataset header has no expert_ref; pass a target return explicitly");
  return 2.0 * *header.expert_ref;
}

// ---- buffer ----

RolloutBuffer::RolloutBuffer(Variant variant, std::size_t state_dim, std::size_t action_dim, std::size_t code_length,
                             std::size_t capacity)
    : variant_(variant),
      capacity_(capacity),
      states_(0, state_dim),
      actions_(0, action_dim),
      regions_(0, code_length) {
  if (capacity == 0) throw ContractViolation("rollout buffer needs capacity >= 1");
}

void RolloutBuffer::begin_step(double return_token, std::span<const double> state, int timestep) {
  if (returns_.size() == capacity_) {
    returns_.erase(returns_.begin());
    timesteps_.erase(timesteps_.begin());
    states_ = states_.slice(1, states_.rows - 1);
    actions_ = actions_.slice(1, actions_.rows - 1);
    regions_ = regions_.slice(1, regions_.rows - 1);
  }
  returns_.push_back(return_token);
  timesteps_.push_back(timestep);
  states_.push_row(state);
  actions_.push_row(std::vector<double>(actions_.cols, 0.0));
  regions_.push_row(std::vector<double>(regions_.cols, 0.0));
  ++total_;
}

void RolloutBuffer::set_action(std::span<const double> action, std::span<const double> region_code) {
  if (returns_.empty()) throw ContractViolation("set_action before begin_step");
  std::copy(action.begin(), action.end(), actions_.row(actions_.rows - 1).begin());
  if (variant_ == Variant::motrdt) {
    std::copy(region_code.begin(), region_code.end(), regions_.row(regions_.rows - 1).begin());
  }
}

ContextWindow RolloutBuffer::window() const {
  TrajectorySegment seg;
  seg.returns = returns_;
  seg.states = states_;
  seg.actions = actions_;
  if (variant_ == Variant::motrdt) seg.regions = regions_;
  seg.timesteps = timesteps_;
  return layout_tokens(std::move(seg), variant_);
}

// ---- episodes ----

namespace {

template <class T>
void require_finite(const diff::Tensor<T>& t, const char* what, int step) {
  for (T v : t.values) {
    if (!std::isfinite(static_cast<double>(v))) {
      throw NumericalError(std::string("non-finite ") + what + " at episode step " + std::to_string(step));
    }
  }
}

}  // namespace

template <class T>
EpisodeResult rollout_episode(traj::DecisionModel<T>& model, const env::DatasetHeader& header, double target_return,
                              std::uint64_t episode_seed, ReturnMode mode, int context_len) {
  const auto& cfg = model.config();
  if (header.state_dim != cfg.state_dim || header.action_dim != cfg.action_dim) {
    throw ConfigError("model dims (" + std::to_string(cfg.state_dim) + ", " + std::to_string(cfg.action_dim) +
                      ") differ from environment dims (" + std::to_string(header.state_dim) + ", " +
                      std::to_string(header.action_dim) + ")");
  }
  if (context_len <= 0) context_len = cfg.context_len;
  if (context_len > cfg.context_len) throw ConfigError("eval context length exceeds the model's K");
  const std::size_t sd = static_cast<std::size_t>(cfg.state_dim);
  const std::size_t ad = static_cast<std::size_t>(cfg.action_dim);
  const bool trust_region = cfg.variant == Variant::motrdt;
  regions::RegionSpec spec{cfg.region_bins, header.action_low, header.action_high};

  RolloutBuffer buffer(cfg.variant, sd, ad, trust_region ? spec.code_length() : 0,
                       static_cast<std::size_t>(context_len));
  std::mt19937_64 rng(episode_seed);
  env::PointMassEnv world;
  env::PointMassState s = world.reset(rng);

  auto normalize = [&](const env::PointMassState& st) {
    const auto obs = st.observation();
    std::vector<double> z(sd);
    for (std::size_t c = 0; c < sd; ++c) z[c] = (obs[c] - header.state_mean[c]) / header.state_std[c];
    return z;
  };

  EpisodeResult result;
  result.seed = episode_seed;
  double g = target_return / header.return_scale;
  for (int t = 0;; ++t) {
    buffer.begin_step(g, normalize(s), t);
    std::vector<ContextWindow> windows{buffer.window()};
    const std::size_t last = buffer.size() - 1;

    std::vector<double> action(ad);
    {
      diff::Tape<T> tape(false);
      auto out = model.encode(tape, windows, backbone::Mode::eval);
      const std::size_t row = windows[0].position(TokenRole::state, last);
      auto head = model.action_head(tape, *out.hidden, std::span<const std::size_t>(&row, 1));
      require_finite(*head.mean, "action mean", t);
      for (std::size_t i = 0; i < ad; ++i) {
        action[i] = std::clamp(static_cast<double>(head.mean->values[i]), header.action_low[i], header.action_high[i]);
      }
    }
    std::vector<double> code;
    if (trust_region) code = regions::encode_action(action, spec);
    buffer.set_action(action, code);

    double predicted = 0.0;
    if (mode == ReturnMode::predicted) {
      windows[0] = buffer.window();
      diff::Tape<T> tape(false);
      auto out = model.encode(tape, windows, backbone::Mode::eval);
      const std::size_t row = windows[0].position(TokenRole::action, last);
      auto head = model.return_head(tape, *out.hidden, std::span<const std::size_t>(&row, 1));
      require_finite(*head.mean, "return prediction", t);
      predicted = static_cast<double>(head.mean->values[0]);
    }

    StepTrace step;
    step.observation = s.observation();
    step.action = {action[0], ad > 1 ? action[1] : 0.0};
    step.return_token = g;
    const env::StepResult r = world.step(action);
    step.reward = r.reward;
    result.trace.push_back(step);
    result.episode_return += r.reward;
    ++result.length;
    if (r.done) break;
    s = r.state;
    g = mode == ReturnMode::predicted ? predicted : g - r.reward / header.return_scale;
  }
  return result;
}

std::optional<double> normalized_score(double mean, const env::DatasetHeader& header, std::string* warning) {
  auto warn = [&](const char* msg) -> std::optional<double> {
    if (warning) *warning = msg;
    return std::nullopt;
  };
  if (!header.random_ref || !header.expert_ref) return warn("dataset header lacks reference returns");
  const double span = *header.expert_ref - *header.random_ref;
  if (std::abs(span) < 1e-12) return warn("expert_ref equals random_ref; normalization disabled");
  return 100.0 * (mean - *header.random_ref) / span;
}

template <class T>
EvalReport evaluate(traj::DecisionModel<T>& model, const env::DatasetHeader& header, int episodes,
                    const EvalSettings& settings) {
  if (episodes < 1) throw ConfigError("evaluation needs at least one episode");
  EvalReport rep;
  rep.target_return = settings.target_return ? *settings.target_return : default_target_return(header);
  rep.return_mode = settings.return_mode;
  rep.context_len = settings.context_len > 0 ? settings.context_len : model.config().context_len;
  rep.seed = settings.seed;
  rep.config_digest = backbone::config_digest(model.config());
  for (int i = 0; i < episodes; ++i) {
    auto ep = rollout_episode(model, header, rep.target_return, settings.seed + static_cast<std::uint64_t>(i),
                              settings.return_mode, rep.context_len);
    rep.returns.push_back(ep.episode_return);
    rep.lengths.push_back(ep.length);
  }
  double sum = 0.0;
  for (double r : rep.returns) sum += r;
  rep.mean = sum / static_cast<double>(episodes);
  double sq = 0.0;
  for (double r : rep.returns) sq += (r - rep.mean) * (r - rep.mean);
  rep.std = std::sqrt(sq / static_cast<double>(episodes));
  rep.normalized = normalized_score(rep.mean, header, &rep.warning);
  return rep;
}

json to_json(const EvalReport& r) {
  return json{{"episodes", r.returns.size()},
              {"returns", r.returns},
              {"lengths", r.lengths},
              {"mean", r.mean},
              {"std", r.std},
              {"normalized", r.normalized ? json(*r.normalized) : json(nullptr)},
              {"warning", r.warning.empty() ? json(nullptr) : json(r.warning)},
              {"config_digest", r.config_digest},
              {"target_return", r.target_return},
              {"return_mode", std::string(to_string(r.return_mode))},
              {"context_len", r.context_len},
              {"seed", r.seed}};
}

// ---- attention ----

template <class T>
json capture_eval_attention(traj::DecisionModel<T>& model, const env::Dataset& data, int n_contexts,
                            std::uint64_t seed) {
  if (n_contexts < 1) throw ContractViolation("need at least one context");
  const auto& cfg = model.config();
  const std::size_t k = static_cast<std::size_t>(cfg.context_len);
  std::vector<std::size_t> slots;
  std::size_t total = 0;
  for (const auto& t : data.trajectories) {
    const std::size_t n = t.length() >= k ? t.length() - k + 1 : 0;
    slots.push_back(n);
    total += n;
  }
  if (total == 0) throw ContractViolation("no trajectory is at least K steps long");

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, total - 1);
  std::vector<ContextWindow> windows;
  for (int c = 0; c < n_contexts; ++c) {
    std::size_t u = pick(rng);
    std::size_t ti = 0;
    while (u >= slots[ti]) u -= slots[ti++];
    windows.push_back(env::window_ending_at(data, ti, u + k, cfg.context_len, cfg.variant, cfg.region_bins));
  }

  diff::Tape<T> tape(false);
  auto out = model.encode(tape, windows, backbone::Mode::eval, 0, true);
  const std::size_t len = windows[0].num_tokens();
  const std::size_t heads = static_cast<std::size_t>(cfg.num_heads);
  std::vector<backbone::AttentionRecord> avg(static_cast<std::size_t>(cfg.num_layers) * heads);
  for (std::size_t i = 0; i < avg.size(); ++i) {
    avg[i].block = i / heads;
    avg[i].head = i % heads;
    avg[i].length = len;
    avg[i].weights.assign(len * len, 0.0);
  }
  for (const auto& rec : out.attention) {
    auto& dst = avg[rec.block * heads + rec.head].weights;
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += rec.weights[i];
  }
  const double inv = 1.0 / static_cast<double>(n_contexts);
  if (n_contexts > 1) {
    for (auto& a : avg) {
      for (double& w : a.weights) w *= inv;
    }
  }
  json doc = backbone::export_attention(avg, cfg, role_labels(cfg.variant, k));
  doc["contexts"] = n_contexts;
  return doc;
}

namespace {

double row_entropy(const std::vector<double>& p) {
  double h = 0.0;
  for (double v : p) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

double js_divergence(const std::vector<double>& p, const std::vector<double>& q) {
  double d = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    if (p[i] > 0.0) d += 0.5 * p[i] * std::log(p[i] / m);
    if (q[i] > 0.0) d += 0.5 * q[i] * std::log(q[i] / m);
  }
  return d;
}

using Matrix = std::vector<std::vector<double>>;

}  // namespace

std::vector<AttentionStats> attention_stats(const json& document) {
  std::vector<std::vector<Matrix>> blocks;
  try {
    blocks = document.at("blocks").get<std::vector<std::vector<Matrix>>>();
  } catch (const json::exception& e) {
    throw ParseError(std::string("attention document: ") + e.what(), 0);
  }
  std::vector<AttentionStats> out;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    for (std::size_t h = 0; h < blocks[b].size(); ++h) {
      const Matrix& a = blocks[b][h];
      AttentionStats st;
      st.block = b;
      st.head = h;
      for (const auto& row : a) st.entropy += row_entropy(row);
      if (!a.empty()) st.entropy /= static_cast<double>(a.size());
      if (blocks.size() > 1) {
        double div = 0.0;
        for (std::size_t o = 0; o < blocks.size(); ++o) {
          if (o == b) continue;
          const Matrix& c = blocks[o].at(h);
          double rows = 0.0;
          for (std::size_t i = 0; i < a.size(); ++i) rows += js_divergence(a[i], c.at(i));
          div += a.empty() ? 0.0 : rows / static_cast<double>(a.size());
        }
        st.inter_block_divergence = div / static_cast<double>(blocks.size() - 1);
      }
      out.push_back(st);
    }
  }
  return out;
}

std::string attention_stats_csv(const std::vector<AttentionStats>& stats) {
  std::string csv = "block,head,entropy,inter_block_divergence\n";
  char buf[128];
  for (const auto& s : stats) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,%.10g,", s.block, s.head, s.entropy);
    csv += buf;
    if (s.inter_block_divergence) {
      std::snprintf(buf, sizeof buf, "%.10g", *s.inter_block_divergence);
      csv += buf;
    }
    csv += '\n';
  }
  return csv;
}

#define MODT_INSTANTIATE_ROLLOUT(T)                                                                                   \
  template EpisodeResult rollout_episode(traj::DecisionModel<T>&, const env::DatasetHeader&, double, std::uint64_t, \
                                         ReturnMode, int);                                                            \
  template EvalReport evaluate(traj::DecisionModel<T>&, const env::DatasetHeader&, int, const EvalSettings&);        \
  template json capture_eval_attention(traj::DecisionModel<T>&, const env::Dataset&, int, std::uint64_t);

MODT_INSTANTIATE_ROLLOUT(float)
MODT_INSTANTIATE_ROLLOUT(double)

}  // namespace modt::rollout
