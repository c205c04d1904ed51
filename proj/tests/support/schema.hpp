#pragma once

// Checks a document against the draft-07 subset used by docs/*.schema.json:
// type, required, properties, additionalProperties=false, items, minimum.

#include <string>
#include <vector>

#include <json.hpp>

namespace testing {

inline void check_schema(const nlohmann::json& doc, const nlohmann::json& schema, const std::string& path,
                         std::vector<std::string>& errors) {
  if (schema.contains("type")) {
    const std::string t = schema["type"];
    const bool ok = (t == "object" && doc.is_object()) || (t == "array" && doc.is_array()) ||
                    (t == "boolean" && doc.is_boolean()) || (t == "string" && doc.is_string()) ||
                    (t == "integer" && doc.is_number_integer()) || (t == "number" && doc.is_number());
    if (!ok) {
      errors.push_back(path + ": expected " + t);
      return;
    }
  }
  if (schema.contains("minimum") && doc.is_number() && doc.get<double>() < schema["minimum"].get<double>())
    errors.push_back(path + ": below minimum");
  if (doc.is_object()) {
    for (const auto& key : schema.value("required", nlohmann::json::array()))
      if (!doc.contains(key.get<std::string>())) errors.push_back(path + ": missing " + key.get<std::string>());
    const auto props = schema.value("properties", nlohmann::json::object());
    for (const auto& [k, v] : doc.items()) {
      if (props.contains(k))
        check_schema(v, props[k], path + "." + k, errors);
      else if (schema.contains("additionalProperties") && !schema["additionalProperties"].get<bool>())
        errors.push_back(path + ": unexpected " + k);
    }
  }
  if (doc.is_array() && schema.contains("items"))
    for (std::size_t i = 0; i < doc.size(); ++i) check_schema(doc[i], schema["items"], path + "[" + std::to_string(i) + "]", errors);
}

inline std::vector<std::string> schema_errors(const nlohmann::json& doc, const nlohmann::json& schema) {
  std::vector<std::string> errors;
  check_schema(doc, schema, "$", errors);
  return errors;
}

}  // namespace testing
