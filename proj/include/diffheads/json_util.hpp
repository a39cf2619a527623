#pragma once

#include "diffheads/core.hpp"
#include "json.hpp"

#include <set>
#include <string>

namespace dh {

// Strict config parsing: any key outside `allowed` is reported by its dotted path.
inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& section) {
  require(j.is_object(), "config section '" + section + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) throw ValidationError("unknown config key '" + (section.empty() ? key : section + "." + key) + "'");
  }
}

template <typename T>
void read_opt(const nlohmann::json& j, const char* key, T& dst) {
  if (j.contains(key)) j.at(key).get_to(dst);
}

}  // namespace dh
