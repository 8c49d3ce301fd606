#include "modt/regions.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "modt/errors.hpp"

namespace modt::regions {

void RegionSpec::validate() const {
  if (bins < 2) throw ConfigError("region bins must be >= 2, got " + std::to_string(bins));
  if (low.size() != high.size() || low.empty()) throw ConfigError("region bounds must be non-empty and of equal length");
  for (std::size_t i = 0; i < low.size(); ++i) {
    if (!(low[i] < high[i])) throw ConfigError("region bounds need low < high in dimension " + std::to_string(i));
  }
}

RegionIndex discretize(std::span<const double> action, const RegionSpec& spec) {
  if (action.size() != spec.action_dim()) {
    throw DimensionError("discretize: action has " + std::to_string(action.size()) + " dims, spec has " +
                         std::to_string(spec.action_dim()));
  }
  RegionIndex idx(action.size());
  for (std::size_t i = 0; i < action.size(); ++i) {
    if (std::isnan(action[i])) throw InvalidActionError("discretize: NaN in action dimension " + std::to_string(i));
    const double a = std::clamp(action[i], spec.low[i], spec.high[i]);
    const double u = (a - spec.low[i]) / (spec.high[i] - spec.low[i]);
    idx[i] = std::min(static_cast<int>(std::floor(u * spec.bins)), spec.bins - 1);
  }
  return idx;
}

OrdinalCode ordinal_encode(const RegionIndex& idx, const RegionSpec& spec) {
  if (idx.size() != spec.action_dim()) throw ContractViolation("ordinal_encode: index has wrong dimensionality");
  const auto b = static_cast<std::size_t>(spec.bins);
  OrdinalCode code(spec.code_length(), 0);
  for (std::size_t d = 0; d < idx.size(); ++d) {
    if (idx[d] < 0 || idx[d] >= spec.bins) {
      throw ContractViolation("ordinal_encode: bin " + std::to_string(idx[d]) + " outside [0, " +
                              std::to_string(spec.bins) + ")");
    }
    std::fill_n(code.begin() + static_cast<std::ptrdiff_t>(d * b), idx[d] + 1, 1);
  }
  return code;
}

RegionIndex ordinal_decode(std::span<const double> probs, const RegionSpec& spec) {
  if (probs.size() != spec.code_length()) {
    throw DimensionError("ordinal_decode: expected " + std::to_string(spec.code_length()) + " probabilities, got " +
                         std::to_string(probs.size()));
  }
  const auto b = static_cast<std::size_t>(spec.bins);
  RegionIndex idx(spec.action_dim());
  for (std::size_t d = 0; d < idx.size(); ++d) {
    int ones = 0;
    for (std::size_t j = 0; j < b; ++j) ones += probs[d * b + j] > 0.5 ? 1 : 0;
    idx[d] = std::max(0, ones - 1);
  }
  return idx;
}

std::vector<double> encode_action(std::span<const double> action, const RegionSpec& spec) {
  const OrdinalCode code = ordinal_encode(discretize(action, spec), spec);
  return {code.begin(), code.end()};
}

}  // namespace modt::regions
