#pragma once

#include <string>
#include <vector>

#include <json.hpp>

namespace evai {

/// Validates `instance` against the draft-07 subset used by the published
/// schemas: type, enum, required, properties, additionalProperties (bool),
/// items (single schema), minItems, maxItems, minLength, minimum, maximum.
/// Returns one message per violation, each prefixed by a JSON pointer.
std::vector<std::string> schema_violations(const nlohmann::json& schema, const nlohmann::json& instance);

/// Schema of the evidence endpoint's response body.
const nlohmann::json& evidence_report_schema();

}  // namespace evai
