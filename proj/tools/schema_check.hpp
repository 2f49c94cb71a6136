#pragma once

#include <string>
#include <vector>

#include <json.hpp>

namespace chforge::cli {

// Validates against the subset of JSON Schema the shipped schema uses:
// $ref into #/$defs, type, const, enum, properties, required,
// additionalProperties (boolean), items, minItems, pattern and the numeric
// bounds. Returns one message per violation, prefixed with its JSON pointer.
std::vector<std::string> schema_errors(const nlohmann::json& schema, const nlohmann::json& doc);

const nlohmann::json& experiment_schema();

}  // namespace chforge::cli
