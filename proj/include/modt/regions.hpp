#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace modt::regions {

/// Uniform grid of `bins` cells per action dimension over [low, high].
struct RegionSpec {
  int bins = 3;
  std::vector<double> low;
  std::vector<double> high;

  std::size_t action_dim() const { return low.size(); }
  std::size_t code_length() const { return static_cast<std::size_t>(bins) * action_dim(); }
  void validate() const;
};

/// Bin index per action dimension, each in [0, bins).
using RegionIndex = std::vector<int>;

/// Thermometer code: per dimension, bin k is k+1 ones followed by zeros.
using OrdinalCode = std::vector<int>;

RegionIndex discretize(std::span<const double> action, const RegionSpec& spec);

OrdinalCode ordinal_encode(const RegionIndex& idx, const RegionSpec& spec);

/// Thresholds each probability at 0.5 and maps per-dimension popcount c to
/// bin max(0, c - 1). Bit order within a dimension is not enforced.
RegionIndex ordinal_decode(std::span<const double> probs, const RegionSpec& spec);

/// ordinal_encode(discretize(action)) as reals, the form fed to the model.
std::vector<double> encode_action(std::span<const double> action, const RegionSpec& spec);

}  // namespace modt::regions
