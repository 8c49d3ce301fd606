#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "modt/backbone.hpp"
#include "modt/diffcore/ops.hpp"
#include "modt/diffcore/parameters.hpp"
#include "modt/window.hpp"

namespace modt::traj {

inline constexpr double kLogStdMin = -5.0;
inline constexpr double kLogStdMax = 2.0;

/// Diagonal Gaussian; log_std is clamped to [kLogStdMin, kLogStdMax] on use.
struct GaussianParams {
  std::vector<double> mean;
  std::vector<double> log_std;
};

/// Independent Bernoulli per ordinal bit, probabilities strictly in (0, 1).
struct BernoulliParams {
  std::vector<double> probs;
};

/// Sum over dimensions of 0.5((x - mu)/sigma)^2 + log sigma + 0.5 log(2 pi).
double gaussian_nll(std::span<const double> x, const GaussianParams& p);

/// Binary cross-entropy summed over bits.
double bernoulli_nll(std::span<const int> bits, const BernoulliParams& p);

/// Linear scalarization coefficients (lambda0 .. lambda3) for
/// (J_DT, J_state, J_return, J_region).
struct LossWeights {
  std::array<double, 4> lambda{1.0, 0.0, 0.0, 0.0};

  /// 1/3 each for modt, 1/4 each for motrdt.
  static LossWeights uniform(Variant v);
  /// In [0, 1], summing to 1 within 1e-9, lambda3 == 0 for modt.
  void validate(Variant v) const;
};

enum class Head { action, state, return_to_go, region };

/// Per-loss values; nullopt marks a loss with no targets (or no head).
struct LossValues {
  std::optional<double> j_dt, j_state, j_return, j_region;

  bool operator==(const LossValues&) const = default;
};

double scalarize(const LossValues& losses, const LossWeights& w, Variant v);

/// Backbone plus prediction heads over one named parameter set.
///
/// Read positions: the action and region heads read the state token of step
/// t, the state head reads the return token of step t, and the return head
/// reads the action token of step t-1. Under the causal mask the action head
/// therefore never sees the step-t region token.
template <class T>
class DecisionModel {
 public:
  struct GaussianOutput {
    diff::Tensor<T>* mean = nullptr;
    diff::Tensor<T>* log_std = nullptr;  // already clamped
  };

  DecisionModel(backbone::ModelConfig config, std::uint64_t seed);
  /// Adopts existing parameters (e.g. from a checkpoint); heads may be missing.
  DecisionModel(backbone::ModelConfig config, diff::ParameterStore<T> params);

  const backbone::ModelConfig& config() const noexcept { return config_; }
  diff::ParameterStore<T>& parameters() noexcept { return params_; }
  const diff::ParameterStore<T>& parameters() const noexcept { return params_; }

  backbone::ForwardOutput<T> encode(diff::Tape<T>& tape, std::span<const ContextWindow> windows,
                                    backbone::Mode mode, std::uint64_t dropout_seed = 0,
                                    bool capture_attention = false);

  bool has_head(Head h) const;
  /// Removes a head's parameters; returns how many tensors were dropped.
  std::size_t drop_head(Head h);

  GaussianOutput action_head(diff::Tape<T>& tape, diff::Tensor<T>& hidden, std::span<const std::size_t> rows);
  GaussianOutput state_head(diff::Tape<T>& tape, diff::Tensor<T>& hidden, std::span<const std::size_t> rows);
  GaussianOutput return_head(diff::Tape<T>& tape, diff::Tensor<T>& hidden, std::span<const std::size_t> rows);
  /// Region logits; each call is counted in `region_head_queries()`.
  diff::Tensor<T>& region_logits(diff::Tape<T>& tape, diff::Tensor<T>& hidden, std::span<const std::size_t> rows);

  std::size_t region_head_queries() const noexcept { return region_queries_; }

 private:
  GaussianOutput gaussian(diff::Tape<T>& tape, const char* prefix, diff::Tensor<T>& hidden,
                          std::span<const std::size_t> rows);

  backbone::ModelConfig config_;
  diff::ParameterStore<T> params_;
  std::size_t region_queries_ = 0;
};

std::string head_prefix(Head h);

/// Tape-recorded losses; null pointers are absent losses.
template <class T>
struct LossTerms {
  diff::Tensor<T>* j_dt = nullptr;
  diff::Tensor<T>* j_state = nullptr;
  diff::Tensor<T>* j_return = nullptr;
  diff::Tensor<T>* j_region = nullptr;

  LossValues values() const;
};

/// Row-weighted Gaussian NLL: sum_i w_i sum_j nll(target_ij | mean_ij, log_std_ij).
template <class T>
diff::Tensor<T>& gaussian_nll_rows(diff::Tape<T>& tape, diff::Tensor<T>& target, diff::Tensor<T>& mean,
                                   diff::Tensor<T>& log_std, std::span<const T> row_weights);

/// Row-weighted binary cross-entropy on logits.
template <class T>
diff::Tensor<T>& bernoulli_nll_rows(diff::Tape<T>& tape, diff::Tensor<T>& bits, diff::Tensor<T>& logits,
                                    std::span<const T> row_weights);

/// Each loss is the mean over windows of that window's mean per-target NLL.
/// State and return targets start at the second step of a window; a loss
/// whose head is missing or that has no targets in the batch is absent.
template <class T>
LossTerms<T> compute_losses(diff::Tape<T>& tape, DecisionModel<T>& model, const backbone::ForwardOutput<T>& out,
                            std::span<const ContextWindow> windows);

template <class T>
diff::Tensor<T>& scalarize(diff::Tape<T>& tape, const LossTerms<T>& losses, const LossWeights& w, Variant v);

}  // namespace modt::traj
