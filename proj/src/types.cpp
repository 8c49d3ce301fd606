#include "modt/types.hpp"

#include "modt/errors.hpp"

namespace modt {

std::string_view to_string(Variant v) { return v == Variant::modt ? "modt" : "motrdt"; }

Variant parse_variant(std::string_view s) {
  if (s == "modt") return Variant::modt;
  if (s == "motrdt") return Variant::motrdt;
  throw ConfigError("unknown variant '" + std::string(s) + "' (expected modt or motrdt)");
}

std::string_view to_string(TokenRole r) {
  switch (r) {
    case TokenRole::return_to_go: return "return";
    case TokenRole::state: return "state";
    case TokenRole::region: return "region";
    case TokenRole::action: return "action";
  }
  return "?";
}

std::size_t role_offset(TokenRole role, Variant v) {
  switch (role) {
    case TokenRole::return_to_go: return 0;
    case TokenRole::state: return 1;
    case TokenRole::region:
      if (v != Variant::motrdt) throw LayoutError("region tokens exist only in the motrdt layout");
      return 2;
    case TokenRole::action: return v == Variant::modt ? 2 : 3;
  }
  return 0;
}

Rows::Rows(std::size_t r, std::size_t c, std::vector<double> d) : rows(r), cols(c), data(std::move(d)) {
  if (data.size() != r * c) throw DimensionError("Rows: data length does not match shape");
}

void Rows::push_row(std::span<const double> values) {
  if (rows == 0 && data.empty() && cols == 0) cols = values.size();
  if (values.size() != cols) throw DimensionError("Rows: row width mismatch");
  data.insert(data.end(), values.begin(), values.end());
  ++rows;
}

Rows Rows::slice(std::size_t first, std::size_t count) const {
  if (first + count > rows) throw ContractViolation("Rows::slice out of range");
  return Rows(count, cols,
              std::vector<double>(data.begin() + static_cast<std::ptrdiff_t>(first * cols),
                                  data.begin() + static_cast<std::ptrdiff_t>((first + count) * cols)));
}

}  // namespace modt
