#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "modt/regions.hpp"
#include "modt/window.hpp"

namespace modt::env {

/// Deterministic 2-D point mass driven toward a fixed goal.
///   pos' = pos + dt * vel
///   vel' = vel + dt * action - friction * vel
///   reward = -|pos' - goal|
struct PointMassState {
  std::array<double, 2> pos{0.0, 0.0};
  std::array<double, 2> vel{0.0, 0.0};

  std::array<double, 4> observation() const { return {pos[0], pos[1], vel[0], vel[1]}; }
};

struct StepResult {
  PointMassState state;
  double reward = 0.0;
  bool done = false;
};

class PointMassEnv {
 public:
  static constexpr double kDt = 0.1;
  static constexpr double kFriction = 0.1;
  static constexpr int kHorizon = 64;
  static constexpr std::array<double, 2> kGoal{1.0, 1.0};
  static constexpr double kActionLow = -1.0;
  static constexpr double kActionHigh = 1.0;
  static constexpr int kStateDim = 4;
  static constexpr int kActionDim = 2;
  static constexpr const char* kName = "pointmass-v0";

  /// Start position uniform in [-1, 0]^2, zero velocity.
  PointMassState reset(std::mt19937_64& rng);
  /// Clamps the action, advances one step; done once `kHorizon` steps have run.
  StepResult step(std::span<const double> action);

  const PointMassState& state() const noexcept { return state_; }
  int steps_taken() const noexcept { return steps_; }

  /// Pure dynamics for one step, no step counting.
  static std::pair<PointMassState, double> transition(const PointMassState& s, std::span<const double> action);
  static regions::RegionSpec region_spec(int bins);

 private:
  PointMassState state_;
  int steps_ = 0;
};

enum class Policy { random, pd_weak, pd_strong, expert };

std::string_view to_string(Policy p);
Policy parse_policy(std::string_view s);

/// Behaviour-policy action: uniform noise for `random`, otherwise a clamped
/// proportional-derivative controller toward the goal plus Gaussian noise.
std::array<double, 2> policy_action(Policy p, const PointMassState& s, std::mt19937_64& rng);

struct TrajectoryRecord {
  Rows states;   // T x 4
  Rows actions;  // T x 2
  std::vector<double> rewards;
  std::vector<double> returns_to_go;
  std::string policy_tag;
  std::uint64_t seed = 0;

  std::size_t length() const noexcept { return rewards.size(); }
  double episode_return() const { return returns_to_go.empty() ? 0.0 : returns_to_go.front(); }
  bool operator==(const TrajectoryRecord&) const = default;
};

inline constexpr int kDatasetFormatVersion = 1;

struct DatasetHeader {
  std::string env = PointMassEnv::kName;
  int state_dim = PointMassEnv::kStateDim;
  int action_dim = PointMassEnv::kActionDim;
  std::vector<double> action_low{PointMassEnv::kActionLow, PointMassEnv::kActionLow};
  std::vector<double> action_high{PointMassEnv::kActionHigh, PointMassEnv::kActionHigh};
  int horizon = PointMassEnv::kHorizon;
  std::vector<double> state_mean{0.0, 0.0, 0.0, 0.0};
  std::vector<double> state_std{1.0, 1.0, 1.0, 1.0};
  double return_scale = 1.0;
  std::optional<double> random_ref;
  std::optional<double> expert_ref;
  std::size_t episodes = 0;
  int format_version = kDatasetFormatVersion;

  bool operator==(const DatasetHeader&) const = default;
};

nlohmann::json to_json(const DatasetHeader& h);
DatasetHeader header_from_json(const nlohmann::json& j, std::size_t line = 1);
std::string header_digest(const DatasetHeader& h);

struct Dataset {
  DatasetHeader header;
  std::vector<TrajectoryRecord> trajectories;

  std::size_t total_steps() const;
  bool operator==(const Dataset&) const = default;
};

/// g_t = sum_{t' >= t} r_t' (undiscounted reverse cumulative sum).
std::vector<double> returns_to_go(std::span<const double> rewards);

struct MixEntry {
  Policy policy;
  double fraction;
};

/// "random:0.3,pd_weak:0.4,expert:0.3"
std::vector<MixEntry> parse_mix(std::string_view text);

/// Episode counts per mix entry (largest remainder, ties to the earlier entry).
std::vector<std::size_t> allocate_episodes(std::span<const MixEntry> mix, std::size_t episodes);

/// Rolls out one episode of `policy` with its own RNG seeded by `seed`.
TrajectoryRecord run_episode(Policy policy, std::uint64_t seed);

/// Mean return of `episodes` reference rollouts of `policy` with fixed seeds.
double reference_return(Policy policy, std::size_t episodes = 100);

/// Episodes are assigned to policies in mix order; episode i uses seed + i.
Dataset generate_dataset(std::span<const MixEntry> mix, std::size_t episodes, std::uint64_t seed);

/// Fills state mean/std (std floored at 1e-6) from the trajectories.
void compute_state_stats(const std::vector<TrajectoryRecord>& trajectories, DatasetHeader& header);

/// JSON lines: header first, then one trajectory record per line.
void write_dataset(const Dataset& d, const std::filesystem::path& path);
std::string serialize_dataset(const Dataset& d);
Dataset read_dataset(const std::filesystem::path& path);
Dataset parse_dataset(const std::string& text);

/// Turns raw trajectory steps [first, first + count) into a model-unit
/// window: z-normalized states, returns divided by `return_scale`, ordinal
/// region codes for motrdt.
ContextWindow make_window(const TrajectoryRecord& traj, const DatasetHeader& header, std::size_t first,
                          std::size_t count, Variant variant, int region_bins);

/// Window of at most K steps ending at 1-based step `end_step`.
ContextWindow window_ending_at(const Dataset& d, std::size_t trajectory, std::size_t end_step, int context_len,
                               Variant variant, int region_bins);

/// Draws a trajectory with probability proportional to its length, then a
/// uniform 1-based end step, and returns the window ending there.
struct SampledWindow {
  std::size_t trajectory = 0;
  std::size_t end_step = 0;
  ContextWindow window;
};
SampledWindow sample_context(const Dataset& d, int context_len, std::mt19937_64& rng, Variant variant,
                             int region_bins);

}  // namespace modt::env
