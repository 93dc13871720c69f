#pragma once

#include <nlohmann/json.hpp>

#include <initializer_list>
#include <set>
#include <stdexcept>
#include <string>

namespace fils {

// Config objects are strict: every required key must be present and no
// unknown key is accepted. `section` prefixes key names in the messages.
inline void check_keys(const nlohmann::json& j, const std::string& section,
                       std::initializer_list<const char*> required,
                       std::initializer_list<const char*> optional = {}) {
  const std::string prefix = section.empty() ? "" : section + ".";
  if (!j.is_object())
    throw std::invalid_argument("config section '" + (section.empty() ? "<root>" : section) + "' must be an object");
  std::set<std::string> known;
  for (const char* k : required) {
    known.insert(k);
    if (!j.contains(k)) throw std::invalid_argument("config is missing '" + prefix + k + "'");
  }
  for (const char* k : optional) known.insert(k);
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw std::invalid_argument("unknown config key '" + prefix + k + "'");
}

}  // namespace fils
