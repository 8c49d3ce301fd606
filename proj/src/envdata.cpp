#include "modt/envdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "modt/digest.hpp"
#include "modt/errors.hpp"

namespace modt::env {

using nlohmann::json;

namespace {

struct PdGains {
  double kp;
  double kd;
  double noise;
};

PdGains gains_for(Policy p) {
  switch (p) {
    case Policy::pd_weak:
      return {0.5, 0.5, 0.5};
    case Policy::pd_strong:
      return {3.0, 3.0, 0.3};
    case Policy::expert:
      return {3.0, 3.0, 0.05};
    case Policy::random:
      break;
  }
  return {0.0, 0.0, 0.0};
}

// Reference rollouts use their own seed range so that refs do not depend on
// the dataset seed.
constexpr std::uint64_t kReferenceSeedBase = 0x7265666572656e63ull;

double clamp_action(double a) {
  if (std::isnan(a)) throw InvalidActionError("action component is NaN");
  return std::clamp(a, PointMassEnv::kActionLow, PointMassEnv::kActionHigh);
}

}  // namespace

std::pair<PointMassState, double> PointMassEnv::transition(const PointMassState& s,
                                                           std::span<const double> action) {
  if (action.size() != static_cast<std::size_t>(kActionDim)) {
    throw DimensionError("action has " + std::to_string(action.size()) + " components, expected 2");
  }
  PointMassState next;
  for (int i = 0; i < 2; ++i) {
    const double a = clamp_action(action[i]);
    next.pos[i] = s.pos[i] + kDt * s.vel[i];
    next.vel[i] = s.vel[i] + kDt * a - kFriction * s.vel[i];
  }
  const double dx = next.pos[0] - kGoal[0];
  const double dy = next.pos[1] - kGoal[1];
  return {next, -std::sqrt(dx * dx + dy * dy)};
}

PointMassState PointMassEnv::reset(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> start(-1.0, 0.0);
  state_ = PointMassState{};
  state_.pos[0] = start(rng);
  state_.pos[1] = start(rng);
  steps_ = 0;
  return state_;
}

StepResult PointMassEnv::step(std::span<const double> action) {
  if (steps_ >= kHorizon) throw ContractViolation("step() called after the episode finished");
  auto [next, reward] = transition(state_, action);
  state_ = next;
  ++steps_;
  return {state_, reward, steps_ >= kHorizon};
}

regions::RegionSpec PointMassEnv::region_spec(int bins) {
  regions::RegionSpec spec{bins, {kActionLow, kActionLow}, {kActionHigh, kActionHigh}};
  spec.validate();
  return spec;
}

std::string_view to_string(Policy p) {
  switch (p) {
    case Policy::random:
      return "random";
    case Policy::pd_weak:
      return "pd_weak";
    case Policy::pd_strong:
      return "pd_strong";
    case Policy::expert:
      return "expert";
  }
  return "?";
}

Policy parse_policy(std::string_view s) {
  for (Policy p : {Policy::random, Policy::pd_weak, Policy::pd_strong, Policy::expert}) {
    if (to_string(p) == s) return p;
  }
  throw ConfigError("unknown policy '" + std::string(s) + "' (random, pd_weak, pd_strong, expert)");
}

std::array<double, 2> policy_action(Policy p, const PointMassState& s, std::mt19937_64& rng) {
  std::array<double, 2> a{};
  if (p == Policy::random) {
    std::uniform_real_distribution<double> u(PointMassEnv::kActionLow, PointMassEnv::kActionHigh);
    for (auto& v : a) v = u(rng);
    return a;
  }
  const PdGains g = gains_for(p);
  std::normal_distribution<double> noise(0.0, g.noise);
  for (int i = 0; i < 2; ++i) {
    const double raw = g.kp * (PointMassEnv::kGoal[i] - s.pos[i]) - g.kd * s.vel[i] + noise(rng);
    a[i] = std::clamp(raw, PointMassEnv::kActionLow, PointMassEnv::kActionHigh);
  }
  return a;
}

std::vector<double> returns_to_go(std::span<const double> rewards) {
  std::vector<double> g(rewards.size());
  double acc = 0.0;
  for (std::size_t i = rewards.size(); i-- > 0;) {
    acc += rewards[i];
    g[i] = acc;
  }
  return g;
}

std::vector<MixEntry> parse_mix(std::string_view text) {
  std::vector<MixEntry> mix;
  std::size_t pos = 0;
  while (pos <= text.size() && !text.empty()) {
    std::size_t comma = text.find(',', pos);
    if (comma == std::string_view::npos) comma = text.size();
    std::string_view item = text.substr(pos, comma - pos);
    const std::size_t colon = item.find(':');
    if (colon == std::string_view::npos) {
      throw ConfigError("mix entry '" + std::string(item) + "' must look like policy:fraction");
    }
    const Policy p = parse_policy(item.substr(0, colon));
    const std::string frac_text(item.substr(colon + 1));
    double frac = 0.0;
    try {
      std::size_t used = 0;
      frac = std::stod(frac_text, &used);
      if (used != frac_text.size()) throw std::invalid_argument(frac_text);
    } catch (const std::exception&) {
      throw ConfigError("mix entry '" + std::string(item) + "' has a bad fraction");
    }
    if (!(frac >= 0.0 && frac <= 1.0)) throw ConfigError("mix fraction out of [0, 1]: " + frac_text);
    for (const auto& e : mix) {
      if (e.policy == p) throw ConfigError("policy listed twice in mix: " + std::string(to_string(p)));
    }
    mix.push_back({p, frac});
    pos = comma + 1;
  }
  if (mix.empty()) throw ConfigError("empty policy mix");
  double sum = 0.0;
  for (const auto& e : mix) sum += e.fraction;
  if (std::abs(sum - 1.0) > 1e-6) {
    std::ostringstream os;
    os << "mix fractions sum to " << sum << ", expected 1";
    throw ConfigError(os.str());
  }
  return mix;
}

std::vector<std::size_t> allocate_episodes(std::span<const MixEntry> mix, std::size_t episodes) {
  if (mix.empty()) throw ConfigError("empty policy mix");
  if (episodes == 0) throw ConfigError("episodes must be >= 1");
  std::vector<std::size_t> counts(mix.size());
  std::vector<double> rem(mix.size());
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < mix.size(); ++i) {
    const double exact = mix[i].fraction * static_cast<double>(episodes);
    counts[i] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    rem[i] = exact - static_cast<double>(counts[i]);
    assigned += counts[i];
  }
  std::vector<std::size_t> order(mix.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rem[a] > rem[b]; });
  for (std::size_t k = 0; assigned < episodes; k = (k + 1) % order.size()) {
    ++counts[order[k]];
    ++assigned;
  }
  while (assigned > episodes) {
    auto it = std::max_element(counts.begin(), counts.end());
    --*it;
    --assigned;
  }
  return counts;
}

TrajectoryRecord run_episode(Policy policy, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  PointMassEnv env;
  PointMassState s = env.reset(rng);
  TrajectoryRecord rec;
  rec.states = Rows(0, PointMassEnv::kStateDim);
  rec.actions = Rows(0, PointMassEnv::kActionDim);
  rec.policy_tag = std::string(to_string(policy));
  rec.seed = seed;
  bool done = false;
  while (!done) {
    const auto obs = s.observation();
    const auto a = policy_action(policy, s, rng);
    rec.states.push_row(obs);
    rec.actions.push_row(a);
    StepResult r = env.step(a);
    rec.rewards.push_back(r.reward);
    s = r.state;
    done = r.done;
  }
  rec.returns_to_go = returns_to_go(rec.rewards);
  return rec;
}

double reference_return(Policy policy, std::size_t episodes) {
  if (episodes == 0) throw ContractViolation("reference_return needs at least one episode");
  double sum = 0.0;
  for (std::size_t i = 0; i < episodes; ++i) sum += run_episode(policy, kReferenceSeedBase + i).episode_return();
  return sum / static_cast<double>(episodes);
}

void compute_state_stats(const std::vector<TrajectoryRecord>& trajectories, DatasetHeader& header) {
  const std::size_t dim = static_cast<std::size_t>(header.state_dim);
  std::vector<double> sum(dim, 0.0);
  std::size_t n = 0;
  for (const auto& t : trajectories) {
    for (std::size_t r = 0; r < t.states.rows; ++r) {
      for (std::size_t c = 0; c < dim; ++c) sum[c] += t.states.at(r, c);
    }
    n += t.states.rows;
  }
  header.state_mean.assign(dim, 0.0);
  header.state_std.assign(dim, 1.0);
  if (n == 0) return;
  for (std::size_t c = 0; c < dim; ++c) header.state_mean[c] = sum[c] / static_cast<double>(n);
  std::vector<double> sq(dim, 0.0);
  for (const auto& t : trajectories) {
    for (std::size_t r = 0; r < t.states.rows; ++r) {
      for (std::size_t c = 0; c < dim; ++c) {
        const double d = t.states.at(r, c) - header.state_mean[c];
        sq[c] += d * d;
      }
    }
  }
  for (std::size_t c = 0; c < dim; ++c) {
    header.state_std[c] = std::max(1e-6, std::sqrt(sq[c] / static_cast<double>(n)));
  }
}

Dataset generate_dataset(std::span<const MixEntry> mix, std::size_t episodes, std::uint64_t seed) {
  const auto counts = allocate_episodes(mix, episodes);
  Dataset d;
  d.trajectories.reserve(episodes);
  std::uint64_t index = 0;
  for (std::size_t m = 0; m < mix.size(); ++m) {
    for (std::size_t k = 0; k < counts[m]; ++k) d.trajectories.push_back(run_episode(mix[m].policy, seed + index++));
  }
  compute_state_stats(d.trajectories, d.header);
  d.header.random_ref = reference_return(Policy::random);
  d.header.expert_ref = reference_return(Policy::expert);
  d.header.return_scale = std::max(1.0, std::abs(*d.header.expert_ref));
  d.header.episodes = d.trajectories.size();
  return d;
}

std::size_t Dataset::total_steps() const {
  std::size_t n = 0;
  for (const auto& t : trajectories) n += t.length();
  return n;
}

// ---- serialization ----

json to_json(const DatasetHeader& h) {
  json j;
  j["format_version"] = h.format_version;
  j["env"] = h.env;
  j["state_dim"] = h.state_dim;
  j["action_dim"] = h.action_dim;
  j["action_low"] = h.action_low;
  j["action_high"] = h.action_high;
  j["horizon"] = h.horizon;
  j["state_mean"] = h.state_mean;
  j["state_std"] = h.state_std;
  j["return_scale"] = h.return_scale;
  j["random_ref"] = h.random_ref ? json(*h.random_ref) : json(nullptr);
  j["expert_ref"] = h.expert_ref ? json(*h.expert_ref) : json(nullptr);
  j["episodes"] = h.episodes;
  return j;
}

DatasetHeader header_from_json(const json& j, std::size_t line) {
  if (!j.is_object()) throw ParseError("header is not a JSON object", line);
  auto version = j.find("format_version");
  if (version == j.end() || !version->is_number_integer()) throw ParseError("header lacks format_version", line);
  if (version->get<int>() != kDatasetFormatVersion) {
    throw VersionMismatchError("format_version " + std::to_string(version->get<int>()) + " is not supported (expected " +
                                   std::to_string(kDatasetFormatVersion) + ")",
                               line);
  }
  static constexpr std::string_view keys[] = {"format_version", "env",        "state_dim",  "action_dim", "action_low",
                                              "action_high",    "horizon",    "state_mean", "state_std",  "return_scale",
                                              "random_ref",     "expert_ref", "episodes"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(std::begin(keys), std::end(keys), key) == std::end(keys)) {
      throw ParseError("unknown header key '" + key + "'", line);
    }
  }
  DatasetHeader h;
  try {
    h.env = j.at("env").get<std::string>();
    h.state_dim = j.at("state_dim").get<int>();
    h.action_dim = j.at("action_dim").get<int>();
    h.action_low = j.at("action_low").get<std::vector<double>>();
    h.action_high = j.at("action_high").get<std::vector<double>>();
    h.horizon = j.at("horizon").get<int>();
    h.state_mean = j.at("state_mean").get<std::vector<double>>();
    h.state_std = j.at("state_std").get<std::vector<double>>();
    h.return_scale = j.at("return_scale").get<double>();
    if (j.contains("random_ref") && !j["random_ref"].is_null()) h.random_ref = j["random_ref"].get<double>();
    if (j.contains("expert_ref") && !j["expert_ref"].is_null()) h.expert_ref = j["expert_ref"].get<double>();
    h.episodes = j.at("episodes").get<std::size_t>();
  } catch (const json::exception& e) {
    throw ParseError(std::string("bad header: ") + e.what(), line);
  }
  if (h.state_dim <= 0 || h.action_dim <= 0 || h.horizon <= 0) throw ParseError("header dims must be positive", line);
  const auto sd = static_cast<std::size_t>(h.state_dim);
  const auto ad = static_cast<std::size_t>(h.action_dim);
  if (h.state_mean.size() != sd || h.state_std.size() != sd) {
    throw ParseError("state_mean/state_std length differs from state_dim", line);
  }
  if (h.action_low.size() != ad || h.action_high.size() != ad) {
    throw ParseError("action bounds length differs from action_dim", line);
  }
  for (std::size_t i = 0; i < ad; ++i) {
    if (!(h.action_low[i] < h.action_high[i])) throw ParseError("action_low must be below action_high", line);
  }
  for (double s : h.state_std) {
    if (!(s > 0.0)) throw ParseError("state_std entries must be positive", line);
  }
  if (!(h.return_scale > 0.0)) throw ParseError("return_scale must be positive", line);
  return h;
}

std::string header_digest(const DatasetHeader& h) { return fnv1a_hex(to_json(h).dump()); }

namespace {

json rows_to_json(const Rows& r) {
  json out = json::array();
  for (std::size_t i = 0; i < r.rows; ++i) {
    auto row = r.row(i);
    out.push_back(std::vector<double>(row.begin(), row.end()));
  }
  return out;
}

json record_to_json(const TrajectoryRecord& t) {
  json j;
  j["policy"] = t.policy_tag;
  j["seed"] = t.seed;
  j["states"] = rows_to_json(t.states);
  j["actions"] = rows_to_json(t.actions);
  j["rewards"] = t.rewards;
  j["returns_to_go"] = t.returns_to_go;
  return j;
}

Rows rows_from_json(const json& j, std::size_t cols, const char* field) {
  if (!j.is_array()) throw std::invalid_argument(std::string(field) + " is not an array");
  Rows r(0, cols);
  for (const auto& row : j) {
    auto v = row.get<std::vector<double>>();
    if (v.size() != cols) {
      throw std::invalid_argument(std::string(field) + " row has " + std::to_string(v.size()) + " entries, expected " +
                                  std::to_string(cols));
    }
    r.push_row(v);
  }
  return r;
}

TrajectoryRecord record_from_json(const json& j, const DatasetHeader& h) {
  if (!j.is_object()) throw std::invalid_argument("record is not a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (key != "policy" && key != "seed" && key != "states" && key != "actions" && key != "rewards" &&
        key != "returns_to_go") {
      throw std::invalid_argument("unknown key '" + key + "'");
    }
  }
  TrajectoryRecord t;
  t.policy_tag = j.at("policy").get<std::string>();
  t.seed = j.at("seed").get<std::uint64_t>();
  t.states = rows_from_json(j.at("states"), static_cast<std::size_t>(h.state_dim), "states");
  t.actions = rows_from_json(j.at("actions"), static_cast<std::size_t>(h.action_dim), "actions");
  t.rewards = j.at("rewards").get<std::vector<double>>();
  t.returns_to_go = j.at("returns_to_go").get<std::vector<double>>();
  const std::size_t n = t.rewards.size();
  if (n == 0) throw std::invalid_argument("empty trajectory");
  if (n > static_cast<std::size_t>(h.horizon)) throw std::invalid_argument("trajectory longer than the horizon");
  if (t.states.rows != n || t.actions.rows != n || t.returns_to_go.size() != n) {
    throw std::invalid_argument("states/actions/rewards/returns_to_go lengths differ");
  }
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < t.actions.cols; ++c) {
      const double a = t.actions.at(r, c);
      if (!(a >= h.action_low[c] && a <= h.action_high[c])) {
        throw std::invalid_argument("action at step " + std::to_string(r + 1) + " outside the declared bounds");
      }
    }
  }
  const auto expect = returns_to_go(t.rewards);
  for (std::size_t i = 0; i < n; ++i) {
    if (std::abs(expect[i] - t.returns_to_go[i]) > 1e-9 * std::max(1.0, std::abs(expect[i]))) {
      throw std::invalid_argument("returns_to_go disagrees with rewards at step " + std::to_string(i + 1));
    }
  }
  return t;
}

}  // namespace

std::string serialize_dataset(const Dataset& d) {
  DatasetHeader h = d.header;
  h.episodes = d.trajectories.size();
  std::string out = to_json(h).dump();
  out += '\n';
  for (const auto& t : d.trajectories) {
    out += record_to_json(t).dump();
    out += '\n';
  }
  return out;
}

void write_dataset(const Dataset& d, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  const std::string text = serialize_dataset(d);
  f.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!f) throw IoError("failed writing " + path.string());
}

Dataset parse_dataset(const std::string& text) {
  std::vector<std::string_view> lines;
  std::string_view rest(text);
  while (!rest.empty()) {
    const std::size_t nl = rest.find('\n');
    if (nl == std::string_view::npos) {
      lines.push_back(rest);
      break;
    }
    lines.push_back(rest.substr(0, nl));
    rest.remove_prefix(nl + 1);
  }
  const bool ends_with_newline = !text.empty() && text.back() == '\n';
  if (lines.empty()) throw TruncatedFileError("empty file, header missing", 1);

  auto parse_line = [&](std::size_t idx) -> std::optional<json> {
    json j = json::parse(lines[idx], nullptr, false);
    if (j.is_discarded()) return std::nullopt;
    return j;
  };
  auto cut_off = [&](std::size_t idx) { return idx + 1 == lines.size() && !ends_with_newline; };

  Dataset d;
  auto header_json = parse_line(0);
  if (!header_json) {
    if (cut_off(0)) throw TruncatedFileError("header line is incomplete", 1);
    throw ParseError("header is not valid JSON", 1);
  }
  d.header = header_from_json(*header_json, 1);

  std::size_t record = 0;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const std::size_t line = i + 1;
    if (lines[i].empty()) continue;
    ++record;
    if (record > d.header.episodes) {
      throw MalformedRecordError("header declares only " + std::to_string(d.header.episodes) + " episodes", line,
                                 record);
    }
    auto j = parse_line(i);
    if (!j) {
      if (cut_off(i)) throw TruncatedFileError("record " + std::to_string(record) + " is incomplete", line);
      throw MalformedRecordError("not valid JSON", line, record);
    }
    try {
      d.trajectories.push_back(record_from_json(*j, d.header));
    } catch (const json::exception& e) {
      throw MalformedRecordError(e.what(), line, record);
    } catch (const std::invalid_argument& e) {
      throw MalformedRecordError(e.what(), line, record);
    }
  }
  if (d.trajectories.size() < d.header.episodes) {
    throw TruncatedFileError("expected " + std::to_string(d.header.episodes) + " records, found " +
                                 std::to_string(d.trajectories.size()),
                             lines.size() + (ends_with_newline ? 1 : 0));
  }
  return d;
}

Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  if (f.bad()) throw IoError("failed reading " + path.string());
  return parse_dataset(ss.str());
}

// ---- windows ----

ContextWindow make_window(const TrajectoryRecord& traj, const DatasetHeader& header, std::size_t first,
                          std::size_t count, Variant variant, int region_bins) {
  if (count == 0 || first + count > traj.length()) {
    throw ContractViolation("window [" + std::to_string(first) + ", " + std::to_string(first + count) +
                            ") outside trajectory of length " + std::to_string(traj.length()));
  }
  const std::size_t sd = traj.states.cols;
  if (sd != header.state_mean.size()) throw LayoutError("trajectory state width differs from the header");
  TrajectorySegment seg;
  seg.states = Rows(count, sd);
  seg.actions = traj.actions.slice(first, count);
  seg.returns.resize(count);
  seg.timesteps.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t t = first + i;
    seg.returns[i] = traj.returns_to_go[t] / header.return_scale;
    seg.timesteps[i] = static_cast<int>(t);
    for (std::size_t c = 0; c < sd; ++c) {
      seg.states.at(i, c) = (traj.states.at(t, c) - header.state_mean[c]) / header.state_std[c];
    }
  }
  if (variant == Variant::motrdt) {
    regions::RegionSpec spec{region_bins, header.action_low, header.action_high};
    spec.validate();
    Rows codes(0, spec.code_length());
    for (std::size_t i = 0; i < count; ++i) codes.push_row(regions::encode_action(seg.actions.row(i), spec));
    seg.regions = std::move(codes);
  }
  return layout_tokens(std::move(seg), variant);
}

ContextWindow window_ending_at(const Dataset& d, std::size_t trajectory, std::size_t end_step, int context_len,
                               Variant variant, int region_bins) {
  if (trajectory >= d.trajectories.size()) throw ContractViolation("trajectory index out of range");
  const auto& traj = d.trajectories[trajectory];
  if (end_step < 1 || end_step > traj.length()) throw ContractViolation("end step out of range");
  if (context_len < 1) throw ContractViolation("context length must be >= 1");
  const std::size_t k = std::min(end_step, static_cast<std::size_t>(context_len));
  return make_window(traj, d.header, end_step - k, k, variant, region_bins);
}

SampledWindow sample_context(const Dataset& d, int context_len, std::mt19937_64& rng, Variant variant,
                             int region_bins) {
  const std::size_t total = d.total_steps();
  if (total == 0) throw ContractViolation("cannot sample from an empty dataset");
  // One uniform draw over all steps picks a trajectory in proportion to its
  // length and an end step uniformly within it.
  std::uniform_int_distribution<std::size_t> pick(0, total - 1);
  std::size_t u = pick(rng);
  std::size_t ti = 0;
  while (u >= d.trajectories[ti].length()) {
    u -= d.trajectories[ti].length();
    ++ti;
  }
  SampledWindow s;
  s.trajectory = ti;
  s.end_step = u + 1;
  s.window = window_ending_at(d, ti, s.end_step, context_len, variant, region_bins);
  return s;
}

}  // namespace modt::env
