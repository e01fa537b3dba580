#pragma once

#include <json.hpp>

#include <string>
#include <string_view>

#include "promptmi/error.hpp"

namespace promptmi::detail {

using ojson = nlohmann::ordered_json;

inline ojson parse_object(std::string_view text) {
  ojson j;
  try {
    j = ojson::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw Error("expected a JSON object");
  return j;
}

inline const ojson& require_object(const ojson& j, const char* field) {
  const auto it = j.find(field);
  if (it == j.end()) throw Error(std::string("missing field '") + field + "'");
  if (!it->is_object()) throw Error(std::string("field '") + field + "' must be an object");
  return *it;
}

template <typename T>
T require(const ojson& j, const char* field) {
  const auto it = j.find(field);
  if (it == j.end()) throw Error(std::string("missing field '") + field + "'");
  try {
    return it->get<T>();
  } catch (const nlohmann::json::exception&) {
    throw Error(std::string("field '") + field + "' has the wrong type");
  }
}

}  // namespace promptmi::detail
