#include "modt/trajmodel.hpp"

#include <cmath>
#include <numbers>

namespace modt::traj {

using diff::Tensor;

namespace {
constexpr double kHalfLog2Pi = 0.91893853320467274178;  // 0.5 * ln(2 pi)
}

double gaussian_nll(std::span<const double> x, const GaussianParams& p) {
  if (x.size() != p.mean.size() || x.size() != p.log_std.size()) {
    throw DimensionError("gaussian_nll: target has " + std::to_string(x.size()) + " dims, params have " +
                         std::to_string(p.mean.size()));
  }
  double total = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double ls = std::clamp(p.log_std[i], kLogStdMin, kLogStdMax);
    const double z = (x[i] - p.mean[i]) / std::exp(ls);
    total += 0.5 * z * z + ls + kHalfLog2Pi;
  }
  return total;
}

double bernoulli_nll(std::span<const int> bits, const BernoulliParams& p) {
  if (bits.size() != p.probs.size()) {
    throw DimensionError("bernoulli_nll: " + std::to_string(bits.size()) + " bits but " +
                         std::to_string(p.probs.size()) + " probabilities");
  }
  double total = 0.0;
  for (std::size_t j = 0; j < bits.size(); ++j) {
    total -= bits[j] ? std::log(p.probs[j]) : std::log1p(-p.probs[j]);
  }
  return total;
}

LossWeights LossWeights::uniform(Variant v) {
  LossWeights w;
  if (v == Variant::modt) {
    w.lambda = {1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0};
  } else {
    w.lambda = {0.25, 0.25, 0.25, 0.25};
  }
  return w;
}

void LossWeights::validate(Variant v) const {
  double total = 0.0;
  for (std::size_t i = 0; i < lambda.size(); ++i) {
    if (!(lambda[i] >= 0.0 && lambda[i] <= 1.0)) {
      throw ConfigError("loss weight lambda" + std::to_string(i) + " = " + std::to_string(lambda[i]) + " outside [0, 1]");
    }
    total += lambda[i];
  }
  if (v == Variant::modt && lambda[3] != 0.0) throw ConfigError("loss weight lambda3 must be 0 for modt");
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("loss weights sum to " + std::to_string(total) + ", expected 1");
}

double scalarize(const LossValues& l, const LossWeights& w, Variant v) {
  w.validate(v);
  double total = 0.0;
  const std::optional<double>* terms[] = {&l.j_dt, &l.j_state, &l.j_return, &l.j_region};
  for (std::size_t i = 0; i < 4; ++i)
    if (*terms[i]) total += w.lambda[i] * **terms[i];
  return total;
}

std::string head_prefix(Head h) {
  switch (h) {
    case Head::action: return "head.action";
    case Head::state: return "head.state";
    case Head::return_to_go: return "head.return";
    case Head::region: return "head.region";
  }
  return "head.?";
}

namespace {

template <class T>
void init_heads(const backbone::ModelConfig& c, diff::ParameterStore<T>& store, std::mt19937_64& rng) {
  const auto d = static_cast<std::size_t>(c.embed_dim);
  std::normal_distribution<double> dist(0.0, c.init_std);
  auto linear = [&](const std::string& name, std::size_t out) {
    std::vector<T> w(d * out);
    for (auto& x : w) x = static_cast<T>(dist(rng));
    store.add(name + ".weight", {d, out}, std::move(w));
    store.add(name + ".bias", {out}, std::vector<T>(out, T(0)));
  };
  const auto sdim = static_cast<std::size_t>(c.state_dim), adim = static_cast<std::size_t>(c.action_dim);
  for (auto [h, width] : {std::pair{Head::action, adim}, {Head::state, sdim}, {Head::return_to_go, std::size_t{1}}}) {
    linear(head_prefix(h) + ".mean", width);
    if (c.gaussian_heads) linear(head_prefix(h) + ".log_std", width);
  }
  if (c.variant == Variant::motrdt) linear(head_prefix(Head::region), c.region_code_length());
}

template <class T>
void check_layout(const backbone::ModelConfig& c, const diff::ParameterStore<T>& params) {
  diff::ParameterStore<T> reference;
  std::mt19937_64 rng(0);
  backbone::init_parameters(c, reference, rng);
  init_heads(c, reference, rng);
  for (const auto& [name, t] : reference) {
    const bool is_head = name.starts_with("head.");
    if (!params.contains(name)) {
      if (is_head) continue;
      throw ConfigError("parameters are missing '" + name + "' required by the model config");
    }
    if (params.get(name).shape != t.shape) {
      throw ConfigError("parameter '" + name + "' has shape " + diff::shape_string(params.get(name).shape) +
                        ", model config implies " + diff::shape_string(t.shape));
    }
  }
  for (const auto& [name, _] : params) {
    if (!reference.contains(name)) throw ConfigError("unexpected parameter '" + name + "' for this model config");
  }
}

}  // namespace

template <class T>
DecisionModel<T>::DecisionModel(backbone::ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  std::mt19937_64 rng(seed);
  backbone::init_parameters(config_, params_, rng);
  init_heads(config_, params_, rng);
}

template <class T>
DecisionModel<T>::DecisionModel(backbone::ModelConfig config, diff::ParameterStore<T> params)
    : config_(std::move(config)), params_(std::move(params)) {
  config_.validate();
  check_layout(config_, params_);
}

template <class T>
backbone::ForwardOutput<T> DecisionModel<T>::encode(diff::Tape<T>& tape, std::span<const ContextWindow> windows,
                                                    backbone::Mode mode, std::uint64_t dropout_seed,
                                                    bool capture_attention) {
  return backbone::forward(tape, config_, params_, windows, mode, dropout_seed, capture_attention);
}

template <class T>
bool DecisionModel<T>::has_head(Head h) const {
  return params_.contains(head_prefix(h) + (h == Head::region ? ".weight" : ".mean.weight"));
}

template <class T>
std::size_t DecisionModel<T>::drop_head(Head h) {
  return params_.erase_prefix(head_prefix(h) + ".");
}

template <class T>
typename DecisionModel<T>::GaussianOutput DecisionModel<T>::gaussian(diff::Tape<T>& tape, const char* prefix,
                                                                     Tensor<T>& hidden,
                                                                     std::span<const std::size_t> rows) {
  const std::string p(prefix);
  if (!params_.contains(p + ".mean.weight")) throw ContractViolation("model has no '" + p + "' head");
  auto& h = diff::gather_rows(tape, hidden, rows);
  GaussianOutput out;
  out.mean = &diff::affine(tape, h, params_.get(p + ".mean.weight"), &params_.get(p + ".mean.bias"));
  if (config_.gaussian_heads) {
    auto& raw = diff::affine(tape, h, params_.get(p + ".log_std.weight"), &params_.get(p + ".log_std.bias"));
    out.log_std = &diff::clamp(tape, raw, T(kLogStdMin), T(kLogStdMax));
  } else {
    out.log_std = &tape.constant(out.mean->shape, std::vector<T>(out.mean->numel(), T(0)));
  }
  return out;
}

template <class T>
typename DecisionModel<T>::GaussianOutput DecisionModel<T>::action_head(diff::Tape<T>& tape, Tensor<T>& hidden,
                                                                        std::span<const std::size_t> rows) {
  return gaussian(tape, "head.action", hidden, rows);
}

template <class T>
typename DecisionModel<T>::GaussianOutput DecisionModel<T>::state_head(diff::Tape<T>& tape, Tensor<T>& hidden,
                                                                       std::span<const std::size_t> rows) {
  return gaussian(tape, "head.state", hidden, rows);
}

template <class T>
typename DecisionModel<T>::GaussianOutput DecisionModel<T>::return_head(diff::Tape<T>& tape, Tensor<T>& hidden,
                                                                        std::span<const std::size_t> rows) {
  return gaussian(tape, "head.return", hidden, rows);
}

template <class T>
Tensor<T>& DecisionModel<T>::region_logits(diff::Tape<T>& tape, Tensor<T>& hidden, std::span<const std::size_t> rows) {
  if (!has_head(Head::region)) throw ContractViolation("model has no region head");
  ++region_queries_;
  auto& h = diff::gather_rows(tape, hidden, rows);
  return diff::affine(tape, h, params_.get("head.region.weight"), &params_.get("head.region.bias"));
}

template <class T>
LossValues LossTerms<T>::values() const {
  auto v = [](const Tensor<T>* t) -> std::optional<double> {
    return t ? std::optional<double>(static_cast<double>(t->item())) : std::nullopt;
  };
  return {v(j_dt), v(j_state), v(j_return), v(j_region)};
}

template <class T>
Tensor<T>& gaussian_nll_rows(diff::Tape<T>& tape, Tensor<T>& target, Tensor<T>& mean, Tensor<T>& log_std,
                             std::span<const T> row_weights) {
  if (target.shape != mean.shape || target.shape != log_std.shape) {
    throw DimensionError("gaussian_nll_rows: target " + diff::shape_string(target.shape) + ", mean " +
                         diff::shape_string(mean.shape) + ", log_std " + diff::shape_string(log_std.shape));
  }
  const std::size_t rows = target.rows(), cols = target.cols();
  if (row_weights.size() != rows) throw DimensionError("gaussian_nll_rows: one weight per row required");
  T total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    T row = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t i = r * cols + c;
      const T z = (target.values[i] - mean.values[i]) * std::exp(-log_std.values[i]);
      row += T(0.5) * z * z + log_std.values[i] + T(kHalfLog2Pi);
    }
    total += row_weights[r] * row;
  }
  auto& y = tape.emit({}, diff::Buffer<T>{total}, mean.requires_grad || log_std.requires_grad);
  std::vector<T> w(row_weights.begin(), row_weights.end());
  tape.record("gaussian_nll_rows", {&target, &mean, &log_std}, y, [&target, &mean, &log_std, &y, w = std::move(w), cols] {
    const T g = y.grad[0];
    if (mean.requires_grad) mean.ensure_grad();
    if (log_std.requires_grad) log_std.ensure_grad();
    for (std::size_t i = 0; i < target.numel(); ++i) {
      const T inv = std::exp(-log_std.values[i]);
      const T z = (target.values[i] - mean.values[i]) * inv;
      const T wi = g * w[i / cols];
      if (mean.requires_grad) mean.grad[i] -= wi * z * inv;
      if (log_std.requires_grad) log_std.grad[i] += wi * (T(1) - z * z);
    }
  });
  return y;
}

template <class T>
Tensor<T>& bernoulli_nll_rows(diff::Tape<T>& tape, Tensor<T>& bits, Tensor<T>& logits, std::span<const T> row_weights) {
  if (bits.shape != logits.shape) {
    throw DimensionError("bernoulli_nll_rows: bits " + diff::shape_string(bits.shape) + " vs logits " +
                         diff::shape_string(logits.shape));
  }
  const std::size_t rows = bits.rows(), cols = bits.cols();
  if (row_weights.size() != rows) throw DimensionError("bernoulli_nll_rows: one weight per row required");
  T total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    T row = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      const T z = logits.values[r * cols + c];
      const T softplus = std::max(z, T(0)) + std::log1p(std::exp(-std::abs(z)));
      row += softplus - bits.values[r * cols + c] * z;
    }
    total += row_weights[r] * row;
  }
  auto& y = tape.emit({}, diff::Buffer<T>{total}, logits.requires_grad);
  std::vector<T> w(row_weights.begin(), row_weights.end());
  tape.record("bernoulli_nll_rows", {&bits, &logits}, y, [&bits, &logits, &y, w = std::move(w), cols] {
    logits.ensure_grad();
    const T g = y.grad[0];
    for (std::size_t i = 0; i < logits.numel(); ++i) {
      const T z = logits.values[i];
      const T p = z >= T(0) ? T(1) / (T(1) + std::exp(-z)) : std::exp(z) / (T(1) + std::exp(z));
      logits.grad[i] += g * w[i / cols] * (p - bits.values[i]);
    }
  });
  return y;
}

namespace {

/// Rows of hidden states to read, the matching targets and per-row weights.
template <class T>
struct HeadBatch {
  std::vector<std::size_t> rows;
  std::vector<T> targets;
  std::vector<T> weights;
  std::size_t windows_with_targets = 0;

  void finish_window(std::size_t first_row) {
    const std::size_t n = rows.size() - first_row;
    if (n == 0) return;
    ++windows_with_targets;
    for (std::size_t i = first_row; i < rows.size(); ++i) weights[i] = T(1) / T(n);
  }
  void normalize() {
    for (auto& w : weights) w /= T(windows_with_targets);
  }
};

}  // namespace

template <class T>
LossTerms<T> compute_losses(diff::Tape<T>& tape, DecisionModel<T>& model, const backbone::ForwardOutput<T>& out,
                            std::span<const ContextWindow> windows) {
  if (out.offsets.size() != windows.size()) throw ContractViolation("compute_losses: forward output is for another batch");
  const auto& cfg = model.config();
  const std::size_t tps = tokens_per_step(cfg.variant);
  const bool regions = cfg.variant == Variant::motrdt && model.has_head(Head::region);
  HeadBatch<T> act, st, ret, reg;

  for (std::size_t w = 0; w < windows.size(); ++w) {
    const auto& win = windows[w];
    const std::size_t off = out.offsets[w], k = win.steps();
    const std::size_t a0 = act.rows.size(), s0 = st.rows.size(), r0 = ret.rows.size(), g0 = reg.rows.size();
    for (std::size_t t = 0; t < k; ++t) {
      const std::size_t state_pos = off + win.position(TokenRole::state, t);
      act.rows.push_back(state_pos);
      for (double v : win.actions.row(t)) act.targets.push_back(static_cast<T>(v));
      act.weights.push_back(0);
      if (regions) {
        reg.rows.push_back(state_pos);
        for (double v : win.regions->row(t)) reg.targets.push_back(static_cast<T>(v));
        reg.weights.push_back(0);
      }
      if (t == 0) continue;
      st.rows.push_back(off + win.position(TokenRole::return_to_go, t));
      for (double v : win.states.row(t)) st.targets.push_back(static_cast<T>(v));
      st.weights.push_back(0);
      ret.rows.push_back(off + (t - 1) * tps + (tps - 1));
      ret.targets.push_back(static_cast<T>(win.returns[t]));
      ret.weights.push_back(0);
    }
    act.finish_window(a0);
    st.finish_window(s0);
    ret.finish_window(r0);
    reg.finish_window(g0);
  }

  auto& hidden = *out.hidden;
  LossTerms<T> terms;
  auto gaussian_term = [&](HeadBatch<T>& hb, Head head, std::size_t width) -> Tensor<T>* {
    if (hb.rows.empty() || !model.has_head(head)) return nullptr;
    hb.normalize();
    typename DecisionModel<T>::GaussianOutput p;
    switch (head) {
      case Head::action: p = model.action_head(tape, hidden, hb.rows); break;
      case Head::state: p = model.state_head(tape, hidden, hb.rows); break;
      default: p = model.return_head(tape, hidden, hb.rows); break;
    }
    auto& target = tape.constant({hb.rows.size(), width}, std::move(hb.targets));
    return &gaussian_nll_rows(tape, target, *p.mean, *p.log_std, std::span<const T>(hb.weights));
  };
  terms.j_dt = gaussian_term(act, Head::action, static_cast<std::size_t>(cfg.action_dim));
  terms.j_state = gaussian_term(st, Head::state, static_cast<std::size_t>(cfg.state_dim));
  terms.j_return = gaussian_term(ret, Head::return_to_go, 1);
  if (regions && !reg.rows.empty()) {
    reg.normalize();
    auto& logits = model.region_logits(tape, hidden, reg.rows);
    auto& bits = tape.constant({reg.rows.size(), cfg.region_code_length()}, std::move(reg.targets));
    terms.j_region = &bernoulli_nll_rows(tape, bits, logits, std::span<const T>(reg.weights));
  }
  return terms;
}

template <class T>
Tensor<T>& scalarize(diff::Tape<T>& tape, const LossTerms<T>& losses, const LossWeights& w, Variant v) {
  w.validate(v);
  std::vector<Tensor<T>*> present;
  std::vector<T> weights;
  Tensor<T>* terms[] = {losses.j_dt, losses.j_state, losses.j_return, losses.j_region};
  for (std::size_t i = 0; i < 4; ++i) {
    if (!terms[i]) continue;
    present.push_back(terms[i]);
    weights.push_back(static_cast<T>(w.lambda[i]));
  }
  return diff::weighted_sum<T>(tape, present, weights);
}

#define MODT_INSTANTIATE_TRAJ(T)                                                                                  \
  template class DecisionModel<T>;                                                                                \
  template struct LossTerms<T>;                                                                                   \
  template Tensor<T>& gaussian_nll_rows(diff::Tape<T>&, Tensor<T>&, Tensor<T>&, Tensor<T>&, std::span<const T>);  \
  template Tensor<T>& bernoulli_nll_rows(diff::Tape<T>&, Tensor<T>&, Tensor<T>&, std::span<const T>);             \
  template LossTerms<T> compute_losses(diff::Tape<T>&, DecisionModel<T>&, const backbone::ForwardOutput<T>&,      \
                                       std::span<const ContextWindow>);                                           \
  template Tensor<T>& scalarize(diff::Tape<T>&, const LossTerms<T>&, const LossWeights&, Variant);

MODT_INSTANTIATE_TRAJ(float)
MODT_INSTANTIATE_TRAJ(double)

}  // namespace modt::traj
