#include "schema_check.hpp"

#include <cmath>
#include <regex>
#include <stdexcept>

#include "schema_embed.hpp"

namespace chforge::cli {

namespace {

using nlohmann::json;

bool is_integer(const json& v) {
  if (v.is_number_integer()) return true;
  if (!v.is_number_float()) return false;
  const double d = v.get<double>();
  return std::isfinite(d) && std::floor(d) == d;
}

bool has_type(const json& v, const std::string& t) {
  if (t == "object") return v.is_object();
  if (t == "array") return v.is_array();
  if (t == "string") return v.is_string();
  if (t == "boolean") return v.is_boolean();
  if (t == "number") return v.is_number();
  if (t == "integer") return is_integer(v);
  if (t == "null") return v.is_null();
  throw std::logic_error("schema uses unsupported type '" + t + "'");
}

// JSON equality where 1 and 1.0 agree.
bool same_value(const json& a, const json& b) {
  if (a.is_number() && b.is_number()) return a.get<double>() == b.get<double>();
  return a == b;
}

class Checker {
 public:
  explicit Checker(const json& root) : root_(root) {}

  void check(const json& s, const json& v, const std::string& at) {
    if (s.contains("$ref")) {
      const auto ref = s.at("$ref").get<std::string>();
      const std::string prefix = "#/$defs/";
      if (ref.rfind(prefix, 0) != 0) throw std::logic_error("unsupported $ref " + ref);
      check(root_.at("$defs").at(ref.substr(prefix.size())), v, at);
      return;
    }
    if (s.contains("type") && !has_type(v, s.at("type").get<std::string>())) {
      fail(at, "expected " + s.at("type").get<std::string>() + ", got " + v.type_name());
      return;
    }
    if (s.contains("const") && !same_value(s.at("const"), v)) fail(at, "must equal " + s.at("const").dump());
    if (s.contains("enum")) {
      bool hit = false;
      for (const auto& e : s.at("enum")) hit = hit || same_value(e, v);
      if (!hit) fail(at, v.dump() + " is not one of " + s.at("enum").dump());
    }
    if (v.is_number()) bounds(s, v.get<double>(), at);
    if (v.is_string() && s.contains("pattern")) {
      const std::regex re(s.at("pattern").get<std::string>(), std::regex::ECMAScript);
      if (!std::regex_search(v.get<std::string>(), re)) fail(at, "does not match " + s.at("pattern").get<std::string>());
    }
    if (v.is_array()) {
      if (s.contains("minItems") && v.size() < s.at("minItems").get<std::size_t>())
        fail(at, "needs at least " + s.at("minItems").dump() + " items");
      if (s.contains("items"))
        for (std::size_t i = 0; i < v.size(); ++i) check(s.at("items"), v[i], at + "/" + std::to_string(i));
    }
    if (v.is_object()) {
      if (s.contains("required"))
        for (const auto& r : s.at("required"))
          if (!v.contains(r.get<std::string>())) fail(at, "missing required property '" + r.get<std::string>() + "'");
      const json* props = s.contains("properties") ? &s.at("properties") : nullptr;
      const bool closed = s.contains("additionalProperties") && !s.at("additionalProperties").get<bool>();
      for (const auto& [key, val] : v.items()) {
        if (props && props->contains(key))
          check(props->at(key), val, at + "/" + key);
        else if (closed)
          fail(at, "unknown property '" + key + "'");
      }
    }
  }

  std::vector<std::string> errors;

 private:
  void bounds(const json& s, double x, const std::string& at) {
    if (s.contains("minimum") && x < s.at("minimum").get<double>()) fail(at, "must be >= " + s.at("minimum").dump());
    if (s.contains("maximum") && x > s.at("maximum").get<double>()) fail(at, "must be <= " + s.at("maximum").dump());
    if (s.contains("exclusiveMinimum") && x <= s.at("exclusiveMinimum").get<double>())
      fail(at, "must be > " + s.at("exclusiveMinimum").dump());
    if (s.contains("exclusiveMaximum") && x >= s.at("exclusiveMaximum").get<double>())
      fail(at, "must be < " + s.at("exclusiveMaximum").dump());
  }

  void fail(const std::string& at, const std::string& msg) { errors.push_back((at.empty() ? "/" : at) + ": " + msg); }

  const json& root_;
};

}  // namespace

std::vector<std::string> schema_errors(const nlohmann::json& schema, const nlohmann::json& doc) {
  Checker c(schema);
  c.check(schema, doc, "");
  return c.errors;
}

const nlohmann::json& experiment_schema() {
  static const nlohmann::json schema = nlohmann::json::parse(kExperimentSchema);
  return schema;
}

}  // namespace chforge::cli
