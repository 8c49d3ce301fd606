#pragma once

#include <algorithm>
#include <initializer_list>
#include <string>
#include <string_view>

#include "json.hpp"
#include "modt/errors.hpp"

namespace modt {

inline void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<std::string_view> allowed,
                                std::string_view where) {
  if (!j.is_object()) throw ConfigError(std::string(where) + ": expected a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw ConfigError(std::string(where) + ": unknown key '" + key + "'");
    }
  }
}

/// Overwrites `out` with j[key] when present; type mismatches become ConfigError.
template <class V>
void read_optional(const nlohmann::json& j, const char* key, V& out, std::string_view where) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->template get<V>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string(where) + "." + key + ": " + e.what());
  }
}

}  // namespace modt
