#include "modt/backbone.hpp"

#include <cmath>

#include "modt/digest.hpp"
#include "modt/json_util.hpp"

namespace modt::backbone {

using diff::Tensor;
using json = nlohmann::json;

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("model config: " + what); };
  if (num_layers < 1) fail("num_layers must be >= 1");
  if (num_heads < 1) fail("num_heads must be >= 1");
  if (embed_dim < 1 || embed_dim % num_heads != 0) {
    fail("embed_dim " + std::to_string(embed_dim) + " is not divisible by num_heads " + std::to_string(num_heads));
  }
  if (context_len < 1) fail("context_len must be >= 1");
  if (dropout < 0.0 || dropout >= 1.0) fail("dropout must lie in [0, 1)");
  if (state_dim < 1 || action_dim < 1) fail("state_dim and action_dim must be >= 1");
  if (variant == Variant::motrdt && region_bins < 2) fail("region_bins must be >= 2 for motrdt");
  if (use_timestep_embedding && max_timestep < 1) fail("max_timestep must be >= 1");
  if (!(init_std > 0.0)) fail("init_std must be positive");
}

json to_json(const ModelConfig& c) {
  return json{{"num_layers", c.num_layers},
              {"num_heads", c.num_heads},
              {"embed_dim", c.embed_dim},
              {"context_len", c.context_len},
              {"dropout", c.dropout},
              {"variant", std::string(to_string(c.variant))},
              {"state_dim", c.state_dim},
              {"action_dim", c.action_dim},
              {"region_bins", c.region_bins},
              {"use_timestep_embedding", c.use_timestep_embedding},
              {"max_timestep", c.max_timestep},
              {"gaussian_heads", c.gaussian_heads},
              {"init_std", c.init_std}};
}

ModelConfig model_config_from_json(const json& j, ModelConfig c) {
  constexpr std::string_view where = "model";
  reject_unknown_keys(j,
                      {"num_layers", "num_heads", "embed_dim", "context_len", "dropout", "variant", "state_dim",
                       "action_dim", "region_bins", "use_timestep_embedding", "max_timestep", "gaussian_heads",
                       "init_std"},
                      where);
  read_optional(j, "num_layers", c.num_layers, where);
  read_optional(j, "num_heads", c.num_heads, where);
  read_optional(j, "embed_dim", c.embed_dim, where);
  read_optional(j, "context_len", c.context_len, where);
  read_optional(j, "dropout", c.dropout, where);
  std::string variant(to_string(c.variant));
  read_optional(j, "variant", variant, where);
  c.variant = parse_variant(variant);
  read_optional(j, "state_dim", c.state_dim, where);
  read_optional(j, "action_dim", c.action_dim, where);
  read_optional(j, "region_bins", c.region_bins, where);
  read_optional(j, "use_timestep_embedding", c.use_timestep_embedding, where);
  read_optional(j, "max_timestep", c.max_timestep, where);
  read_optional(j, "gaussian_heads", c.gaussian_heads, where);
  read_optional(j, "init_std", c.init_std, where);
  return c;
}

std::string config_digest(const ModelConfig& c) { return fnv1a_hex(to_json(c).dump()); }

namespace {

template <class T>
std::vector<T> normal_values(std::size_t n, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return v;
}

template <class T>
void add_linear(diff::ParameterStore<T>& store, const std::string& prefix, std::size_t in, std::size_t out,
                double stddev, std::mt19937_64& rng) {
  store.add(prefix + ".weight", {in, out}, normal_values<T>(in * out, stddev, rng));
  store.add(prefix + ".bias", {out}, std::vector<T>(out, T(0)));
}

template <class T>
void add_norm(diff::ParameterStore<T>& store, const std::string& prefix, std::size_t dim) {
  store.add(prefix + ".gain", {dim}, std::vector<T>(dim, T(1)));
  store.add(prefix + ".bias", {dim}, std::vector<T>(dim, T(0)));
}

template <class T>
Tensor<T>& linear(diff::Tape<T>& tape, diff::ParameterStore<T>& store, const std::string& prefix, Tensor<T>& x) {
  return diff::affine(tape, x, store.get(prefix + ".weight"), &store.get(prefix + ".bias"));
}

template <class T>
Tensor<T>& norm(diff::Tape<T>& tape, diff::ParameterStore<T>& store, const std::string& prefix, Tensor<T>& x) {
  return diff::layer_norm(tape, x, store.get(prefix + ".gain"), store.get(prefix + ".bias"));
}

std::uint64_t site_seed(std::uint64_t seed, std::uint64_t site) { return seed * 0x100000001b3ull + site * 0x9E3779B97F4A7C15ull; }

std::string block_prefix(int b) { return "blocks." + std::to_string(b); }

}  // namespace

template <class T>
void init_parameters(const ModelConfig& config, diff::ParameterStore<T>& store, std::mt19937_64& rng) {
  config.validate();
  const auto d = static_cast<std::size_t>(config.embed_dim);
  const double sd = config.init_std;
  add_linear(store, "embed.return", 1, d, sd, rng);
  add_linear(store, "embed.state", static_cast<std::size_t>(config.state_dim), d, sd, rng);
  add_linear(store, "embed.action", static_cast<std::size_t>(config.action_dim), d, sd, rng);
  if (config.variant == Variant::motrdt) add_linear(store, "embed.region", config.region_code_length(), d, sd, rng);
  if (config.use_timestep_embedding) {
    const auto n = static_cast<std::size_t>(config.max_timestep);
    store.add("embed.timestep.table", {n, d}, normal_values<T>(n * d, sd, rng));
  }
  add_norm(store, "embed_ln", d);
  for (int b = 0; b < config.num_layers; ++b) {
    const std::string p = block_prefix(b);
    add_norm(store, p + ".ln1", d);
    add_linear(store, p + ".attn.qkv", d, 3 * d, sd, rng);
    add_linear(store, p + ".attn.proj", d, d, sd, rng);
    add_norm(store, p + ".ln2", d);
    add_linear(store, p + ".mlp.fc", d, 4 * d, sd, rng);
    add_linear(store, p + ".mlp.proj", 4 * d, d, sd, rng);
  }
  add_norm(store, "ln_f", d);
}

template <class T>
Tensor<T>& embed_tokens(diff::Tape<T>& tape, const ModelConfig& config, diff::ParameterStore<T>& store,
                        std::span<const ContextWindow> windows) {
  const std::size_t tps = tokens_per_step(config.variant);
  const auto sdim = static_cast<std::size_t>(config.state_dim), adim = static_cast<std::size_t>(config.action_dim);
  const std::size_t rdim = config.region_code_length();
  const bool regions = config.variant == Variant::motrdt;

  std::size_t total_steps = 0;
  for (const auto& w : windows) {
    if (w.variant != config.variant) throw LayoutError("embed_tokens: window variant does not match model variant");
    w.validate();
    if (w.states.cols != sdim) {
      throw LayoutError("embed_tokens: state width " + std::to_string(w.states.cols) + " != state_dim " + std::to_string(sdim));
    }
    if (w.actions.cols != adim) {
      throw LayoutError("embed_tokens: action width " + std::to_string(w.actions.cols) + " != action_dim " + std::to_string(adim));
    }
    if (regions && w.regions->cols != rdim) {
      throw LayoutError("embed_tokens: region code width " + std::to_string(w.regions->cols) + " != " + std::to_string(rdim));
    }
    total_steps += w.steps();
  }

  diff::Buffer<T> ret_in, state_in, act_in, reg_in;
  ret_in.reserve(total_steps);
  state_in.reserve(total_steps * sdim);
  act_in.reserve(total_steps * adim);
  for (const auto& w : windows) {
    ret_in.insert(ret_in.end(), w.returns.begin(), w.returns.end());
    state_in.insert(state_in.end(), w.states.data.begin(), w.states.data.end());
    act_in.insert(act_in.end(), w.actions.data.begin(), w.actions.data.end());
    if (regions) reg_in.insert(reg_in.end(), w.regions->data.begin(), w.regions->data.end());
  }

  auto& e_ret = linear(tape, store, "embed.return", tape.constant({total_steps, 1}, std::move(ret_in)));
  auto& e_state = linear(tape, store, "embed.state", tape.constant({total_steps, sdim}, std::move(state_in)));
  auto& e_act = linear(tape, store, "embed.action", tape.constant({total_steps, adim}, std::move(act_in)));
  std::vector<Tensor<T>*> parts{&e_ret, &e_state};
  if (regions) parts.push_back(&linear(tape, store, "embed.region", tape.constant({total_steps, rdim}, std::move(reg_in))));
  parts.push_back(&e_act);
  auto& stacked = diff::concat_rows<T>(tape, parts);

  // Stacked rows are grouped by role (in layout order), then by global step.
  std::vector<std::size_t> perm(total_steps * tps);
  std::vector<std::size_t> timestep_rows;
  if (config.use_timestep_embedding) timestep_rows.resize(perm.size());
  std::size_t pos = 0, step = 0;
  for (const auto& w : windows) {
    for (std::size_t t = 0; t < w.steps(); ++t, ++step) {
      for (std::size_t r = 0; r < tps; ++r, ++pos) {
        perm[pos] = r * total_steps + step;
        if (config.use_timestep_embedding) {
          const int ts = w.timesteps[t];
          if (ts < 0 || ts >= config.max_timestep) {
            throw LayoutError("embed_tokens: timestep " + std::to_string(ts) + " outside [0, max_timestep)");
          }
          timestep_rows[pos] = static_cast<std::size_t>(ts);
        }
      }
    }
  }
  auto* tokens = &diff::gather_rows(tape, stacked, perm);
  if (config.use_timestep_embedding) {
    auto& te = diff::gather_rows(tape, store.get("embed.timestep.table"), timestep_rows);
    tokens = &diff::add(tape, *tokens, te);
  }
  return *tokens;
}

template <class T>
ForwardOutput<T> forward(diff::Tape<T>& tape, const ModelConfig& config, diff::ParameterStore<T>& store,
                         std::span<const ContextWindow> windows, Mode mode, std::uint64_t dropout_seed,
                         bool capture_attention) {
  if (windows.empty()) throw ContractViolation("forward: empty batch");
  ForwardOutput<T> out;
  std::vector<diff::Segment> segments;
  std::size_t offset = 0;
  for (const auto& w : windows) {
    if (w.steps() == 0) throw ContractViolation("forward: empty context window");
    if (w.steps() > static_cast<std::size_t>(config.context_len)) {
      throw ContractViolation("forward: window of " + std::to_string(w.steps()) + " steps exceeds context length " +
                              std::to_string(config.context_len));
    }
    out.offsets.push_back(offset);
    segments.push_back({offset, w.num_tokens()});
    offset += w.num_tokens();
  }

  const double rate = mode == Mode::train ? config.dropout : 0.0;
  std::uint64_t site = 0;
  auto drop = [&](Tensor<T>& x) -> Tensor<T>& { return diff::dropout(tape, x, rate, site_seed(dropout_seed, site++)); };

  Tensor<T>* x = &embed_tokens(tape, config, store, windows);
  out.tokens = x;
  x = &drop(norm(tape, store, "embed_ln", *x));

  std::vector<diff::AttentionWeights> captured;
  for (int b = 0; b < config.num_layers; ++b) {
    const std::string p = block_prefix(b);
    auto& qkv = linear(tape, store, p + ".attn.qkv", norm(tape, store, p + ".ln1", *x));
    captured.clear();
    auto& att = diff::causal_attention(tape, qkv, segments, static_cast<std::size_t>(config.num_heads),
                                       capture_attention ? &captured : nullptr);
    x = &diff::add(tape, *x, drop(linear(tape, store, p + ".attn.proj", att)));
    auto& hidden = diff::relu(tape, linear(tape, store, p + ".mlp.fc", norm(tape, store, p + ".ln2", *x)));
    x = &diff::add(tape, *x, drop(linear(tape, store, p + ".mlp.proj", hidden)));
    for (auto& a : captured) {
      out.attention.push_back(AttentionRecord{a.segment, static_cast<std::size_t>(b), a.head, a.length, std::move(a.weights)});
    }
  }
  out.hidden = &norm(tape, store, "ln_f", *x);
  return out;
}

json export_attention(std::span<const AttentionRecord> records, const ModelConfig& config,
                      const std::vector<std::string>& token_roles) {
  json cfg = to_json(config);
  cfg["digest"] = config_digest(config);
  json blocks = json::array();
  for (int b = 0; b < config.num_layers; ++b) {
    json heads = json::array();
    for (int h = 0; h < config.num_heads; ++h) heads.push_back(json::array());
    blocks.push_back(std::move(heads));
  }
  for (const auto& r : records) {
    if (r.length != token_roles.size()) {
      throw DimensionError("export_attention: record of length " + std::to_string(r.length) + " but " +
                           std::to_string(token_roles.size()) + " token roles");
    }
    if (r.block >= blocks.size() || r.head >= blocks[r.block].size()) {
      throw DimensionError("export_attention: record (block " + std::to_string(r.block) + ", head " +
                           std::to_string(r.head) + ") outside the configured architecture");
    }
    json m = json::array();
    for (std::size_t i = 0; i < r.length; ++i) {
      m.push_back(std::vector<double>(r.weights.begin() + static_cast<std::ptrdiff_t>(i * r.length),
                                      r.weights.begin() + static_cast<std::ptrdiff_t>((i + 1) * r.length)));
    }
    blocks[r.block][r.head] = std::move(m);
  }
  return json{{"config", std::move(cfg)}, {"token_roles", token_roles}, {"blocks", std::move(blocks)}};
}

#define MODT_INSTANTIATE_BACKBONE(T)                                                                        \
  template void init_parameters(const ModelConfig&, diff::ParameterStore<T>&, std::mt19937_64&);          \
  template Tensor<T>& embed_tokens(diff::Tape<T>&, const ModelConfig&, diff::ParameterStore<T>&,           \
                                   std::span<const ContextWindow>);                                        \
  template ForwardOutput<T> forward(diff::Tape<T>&, const ModelConfig&, diff::ParameterStore<T>&,          \
                                    std::span<const ContextWindow>, Mode, std::uint64_t, bool);

MODT_INSTANTIATE_BACKBONE(float)
MODT_INSTANTIATE_BACKBONE(double)

}  // namespace modt::backbone
