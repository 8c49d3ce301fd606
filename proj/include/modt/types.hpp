#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace modt {

/// MO-DT interleaves (return, state, action) per step; MO-TRDT inserts the
/// action-region token: (return, state, region, action).
enum class Variant { modt, motrdt };

enum class TokenRole { return_to_go, state, region, action };

std::string_view to_string(Variant v);
Variant parse_variant(std::string_view s);
std::string_view to_string(TokenRole r);

inline std::size_t tokens_per_step(Variant v) { return v == Variant::modt ? 3 : 4; }

/// Offset of `role` inside one step's token group.
std::size_t role_offset(TokenRole role, Variant v);

/// Dense row-major matrix of reals, used for trajectory data.
struct Rows {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Rows() = default;
  Rows(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}
  Rows(std::size_t r, std::size_t c, std::vector<double> d);

  std::span<const double> row(std::size_t i) const { return {data.data() + i * cols, cols}; }
  std::span<double> row(std::size_t i) { return {data.data() + i * cols, cols}; }
  double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  void push_row(std::span<const double> values);
  /// Rows [first, first + count).
  Rows slice(std::size_t first, std::size_t count) const;

  bool operator==(const Rows&) const = default;
};

}  // namespace modt
