#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "modt/envdata.hpp"
#include "modt/trajmodel.hpp"

namespace modt::rollout {

/// How the next return token is formed: read from the return head, or the
/// previous token minus the observed (scaled) reward.
enum class ReturnMode { predicted, subtract_reward };

std::string_view to_string(ReturnMode m);
ReturnMode parse_return_mode(std::string_view s);

struct EvalSettings {
  std::optional<double> target_return;  // raw units; defaults to default_target_return()
  ReturnMode return_mode = ReturnMode::predicted;
  int context_len = 0;  // 0 means the model's K
  std::uint64_t seed = 0;
};

nlohmann::json to_json(const EvalSettings& s);
EvalSettings eval_settings_from_json(const nlohmann::json& j, EvalSettings base = {});

/// Twice the expert reference return of the dataset header.
double default_target_return(const env::DatasetHeader& header);

/// Most recent steps of an episode in model units. The newest step may be
/// incomplete: its action/region are zero placeholders until `set_action`.
class RolloutBuffer {
 public:
  RolloutBuffer(Variant variant, std::size_t state_dim, std::size_t action_dim, std::size_t code_length,
                std::size_t capacity);

  /// Opens step t with return token g_t and normalized state s_t.
  void begin_step(double return_token, std::span<const double> state, int timestep);
  void set_action(std::span<const double> action, std::span<const double> region_code);

  std::size_t size() const noexcept { return returns_.size(); }
  std::size_t capacity() const noexcept { return capacity_; }
  std::size_t total_steps() const noexcept { return total_; }
  int first_timestep() const { return timesteps_.empty() ? 0 : timesteps_.front(); }
  ContextWindow window() const;

 private:
  Variant variant_;
  std::size_t capacity_;
  std::size_t total_ = 0;
  std::vector<double> returns_;
  Rows states_, actions_, regions_;
  std::vector<int> timesteps_;
};

struct StepTrace {
  std::array<double, 4> observation{};
  std::array<double, 2> action{};
  double reward = 0.0;
  double return_token = 0.0;  // scaled g_t fed to the model
};

struct EpisodeResult {
  double episode_return = 0.0;
  int length = 0;
  std::uint64_t seed = 0;
  std::vector<StepTrace> trace;
};

/// Deterministic episode: mean actions clamped to the action bounds; for
/// motrdt the region token comes from the executed action. The region head
/// is never queried. Non-finite model output throws NumericalError.
template <class T>
EpisodeResult rollout_episode(traj::DecisionModel<T>& model, const env::DatasetHeader& header, double target_return,
                              std::uint64_t episode_seed, ReturnMode mode = ReturnMode::predicted,
                              int context_len = 0);

struct EvalReport {
  std::vector<double> returns;
  std::vector<int> lengths;
  double mean = 0.0;
  double std = 0.0;
  std::optional<double> normalized;
  std::string warning;  // set when normalization is unavailable
  std::string config_digest;
  double target_return = 0.0;
  ReturnMode return_mode = ReturnMode::predicted;
  int context_len = 0;
  std::uint64_t seed = 0;
};

nlohmann::json to_json(const EvalReport& r);

/// 100 (mean - random_ref) / (expert_ref - random_ref), or nullopt with a reason.
std::optional<double> normalized_score(double mean, const env::DatasetHeader& header, std::string* warning = nullptr);

/// Episode i is seeded with settings.seed + i.
template <class T>
EvalReport evaluate(traj::DecisionModel<T>& model, const env::DatasetHeader& header, int episodes,
                    const EvalSettings& settings);

/// Averages eval-mode attention over `n_contexts` full-length windows drawn
/// from the dataset and exports them as one document.
template <class T>
nlohmann::json capture_eval_attention(traj::DecisionModel<T>& model, const env::Dataset& data, int n_contexts,
                                      std::uint64_t seed);

/// Per (block, head): mean row entropy of the attention matrix, and mean
/// Jensen-Shannon divergence to the same head in every other block.
struct AttentionStats {
  std::size_t block = 0;
  std::size_t head = 0;
  double entropy = 0.0;
  std::optional<double> inter_block_divergence;
};

std::vector<AttentionStats> attention_stats(const nlohmann::json& document);
std::string attention_stats_csv(const std::vector<AttentionStats>& stats);

}  // namespace modt::rollout
