#include "modt/window.hpp"

#include <string>

#include "modt/errors.hpp"

namespace modt {

void ContextWindow::validate() const {
  const std::size_t k = steps();
  auto fail = [](const std::string& what) { throw LayoutError("context window: " + what); };
  if (states.rows != k) fail("has " + std::to_string(states.rows) + " states for " + std::to_string(k) + " returns");
  if (actions.rows != k) fail("has " + std::to_string(actions.rows) + " actions for " + std::to_string(k) + " returns");
  if (timesteps.size() != k) fail("timestep count does not match step count");
  if (variant == Variant::motrdt) {
    if (!regions) fail("motrdt layout requires action regions");
    if (regions->rows != k) fail("region count does not match step count");
  } else if (regions) {
    fail("modt layout must not carry action regions");
  }
  const std::size_t tps = tokens_per_step(variant);
  if (role_map.size() != k * tps) fail("role map length does not match " + std::to_string(k) + " steps");
  for (std::size_t i = 0; i < role_map.size(); ++i) {
    const auto& slot = role_map[i];
    if (slot.step != i / tps || position(slot.role, slot.step) != i) fail("role map out of order at token " + std::to_string(i));
  }
}

ContextWindow layout_tokens(TrajectorySegment seg, Variant variant) {
  const std::size_t k = seg.returns.size();
  if (k == 0) throw LayoutError("layout_tokens: empty segment");
  if (variant == Variant::motrdt && !seg.regions) throw LayoutError("layout_tokens: motrdt segment is missing action regions");
  if (variant == Variant::modt) seg.regions.reset();
  ContextWindow w;
  w.variant = variant;
  w.returns = std::move(seg.returns);
  w.states = std::move(seg.states);
  w.actions = std::move(seg.actions);
  w.regions = std::move(seg.regions);
  if (seg.timesteps.empty()) {
    w.timesteps.resize(k);
    for (std::size_t i = 0; i < k; ++i) w.timesteps[i] = static_cast<int>(i);
  } else {
    w.timesteps = std::move(seg.timesteps);
  }
  const TokenRole modt_order[] = {TokenRole::return_to_go, TokenRole::state, TokenRole::action};
  const TokenRole motrdt_order[] = {TokenRole::return_to_go, TokenRole::state, TokenRole::region, TokenRole::action};
  const std::span<const TokenRole> order =
      variant == Variant::modt ? std::span<const TokenRole>(modt_order) : std::span<const TokenRole>(motrdt_order);
  w.role_map.reserve(k * order.size());
  for (std::size_t t = 0; t < k; ++t)
    for (TokenRole r : order) w.role_map.push_back({r, t});
  w.validate();
  return w;
}

std::vector<std::string> role_labels(const ContextWindow& window) {
  std::vector<std::string> out;
  out.reserve(window.role_map.size());
  for (const auto& slot : window.role_map) out.emplace_back(to_string(slot.role));
  return out;
}

std::vector<std::string> role_labels(Variant variant, std::size_t steps) {
  std::vector<std::string> out;
  for (std::size_t t = 0; t < steps; ++t) {
    out.emplace_back("return");
    out.emplace_back("state");
    if (variant == Variant::motrdt) out.emplace_back("region");
    out.emplace_back("action");
  }
  return out;
}

}  // namespace modt
