#pragma once

// Enough JSON Schema to check the service payloads against docs/schema.json:
// $ref, type, enum, const, pattern, minimum/maximum, min/maxItems, required,
// properties, additionalProperties=false, items.

#include <regex>
#include <string>
#include <vector>

#include <json.hpp>

namespace omgseg::testing {

class SchemaCheck {
 public:
  explicit SchemaCheck(nlohmann::json root) : root_(std::move(root)) {}

  std::vector<std::string> errors(const nlohmann::json& value, const std::string& def) const {
    std::vector<std::string> out;
    check(value, root_.at("$defs").at(def), def, out);
    return out;
  }

 private:
  static bool has_type(const nlohmann::json& v, const std::string& t) {
    if (t == "object") return v.is_object();
    if (t == "array") return v.is_array();
    if (t == "string") return v.is_string();
    if (t == "boolean") return v.is_boolean();
    if (t == "integer") return v.is_number_integer();
    if (t == "number") return v.is_number();
    if (t == "null") return v.is_null();
    return false;
  }

  void check(const nlohmann::json& v, const nlohmann::json& s, const std::string& at, std::vector<std::string>& out) const {
    if (s.contains("$ref")) {
      const auto ref = s.at("$ref").get<std::string>();
      check(v, root_.at(nlohmann::json::json_pointer(ref.substr(1))), at, out);
      return;
    }
    if (s.contains("type") && !has_type(v, s.at("type").get<std::string>())) {
      out.push_back(at + ": expected " + s.at("type").get<std::string>());
      return;
    }
    if (s.contains("enum") && std::find(s.at("enum").begin(), s.at("enum").end(), v) == s.at("enum").end())
      out.push_back(at + ": not in enum");
    if (s.contains("const") && v != s.at("const")) out.push_back(at + ": const mismatch");
    if (s.contains("pattern") && v.is_string() &&
        !std::regex_match(v.get<std::string>(), std::regex(s.at("pattern").get<std::string>())))
      out.push_back(at + ": pattern mismatch");
    if (v.is_number()) {
      if (s.contains("minimum") && v.get<double>() < s.at("minimum").get<double>()) out.push_back(at + ": below minimum");
      if (s.contains("maximum") && v.get<double>() > s.at("maximum").get<double>()) out.push_back(at + ": above maximum");
    }
    if (v.is_array()) {
      if (s.contains("minItems") && v.size() < s.at("minItems").get<std::size_t>()) out.push_back(at + ": too few items");
      if (s.contains("maxItems") && v.size() > s.at("maxItems").get<std::size_t>()) out.push_back(at + ": too many items");
      if (s.contains("items"))
        for (std::size_t i = 0; i < v.size(); ++i) check(v[i], s.at("items"), at + "[" + std::to_string(i) + "]", out);
    }
    if (v.is_object()) {
      if (s.contains("required"))
        for (const auto& k : s.at("required"))
          if (!v.contains(k.get<std::string>())) out.push_back(at + ": missing " + k.get<std::string>());
      const bool closed = s.contains("additionalProperties") && s.at("additionalProperties") == false;
      for (const auto& [k, item] : v.items()) {
        if (s.contains("properties") && s.at("properties").contains(k))
          check(item, s.at("properties").at(k), at + "." + k, out);
        else if (closed)
          out.push_back(at + ": unexpected " + k);
      }
    }
  }

  nlohmann::json root_;
};

}  // namespace omgseg::testing
