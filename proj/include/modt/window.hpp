#pragma once

#include <optional>
#include <string>
#include <vector>

#include "modt/types.hpp"

namespace modt {

struct TokenSlot {
  TokenRole role;
  std::size_t step;
};

/// Contiguous run of steps from one episode, already in model units.
struct TrajectorySegment {
  std::vector<double> returns;
  Rows states;
  Rows actions;
  std::optional<Rows> regions;  // ordinal codes, required for motrdt
  std::vector<int> timesteps;   // absolute episode step of each entry; empty means 0..k-1
};

/// A window of up to K steps laid out as an interleaved token sequence.
struct ContextWindow {
  Variant variant = Variant::modt;
  std::vector<double> returns;
  Rows states;
  Rows actions;
  std::optional<Rows> regions;
  std::vector<int> timesteps;
  std::vector<TokenSlot> role_map;

  std::size_t steps() const noexcept { return returns.size(); }
  std::size_t num_tokens() const noexcept { return role_map.size(); }
  /// Token position of `role` at window step `step`.
  std::size_t position(TokenRole role, std::size_t step) const {
    return step * tokens_per_step(variant) + role_offset(role, variant);
  }
  /// Throws LayoutError when the components disagree with each other or the role map.
  void validate() const;
};

/// Interleaves a segment as (g, s, a) per step, or (g, s, region, a) for motrdt.
ContextWindow layout_tokens(TrajectorySegment segment, Variant variant);

std::vector<std::string> role_labels(const ContextWindow& window);
std::vector<std::string> role_labels(Variant variant, std::size_t steps);

}  // namespace modt
