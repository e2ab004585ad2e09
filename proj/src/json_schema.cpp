#include "evai/json_schema.hpp"

#include <cmath>

#include "evai_schemas.hpp"

namespace evai {
namespace {

using nlohmann::json;

bool has_type(const json& value, const std::string& type) {
    if (type == "object") return value.is_object();
    if (type == "array") return value.is_array();
    if (type == "string") return value.is_string();
    if (type == "boolean") return value.is_boolean();
    if (type == "null") return value.is_null();
    if (type == "number") return value.is_number();
    if (type == "integer") {
        if (value.is_number_integer()) return true;
        return value.is_number_float() && std::floor(value.get<double>()) == value.get<double>();
    }
    return false;
}

void check(const json& schema, const json& value, const std::string& at, std::vector<std::string>& out) {
    if (schema.contains("type")) {
        const auto& t = schema["type"];
        bool ok = false;
        if (t.is_string()) {
            ok = has_type(value, t.get<std::string>());
        } else {
            for (const auto& option : t) ok = ok || has_type(value, option.get<std::string>());
        }
        if (!ok) {
            out.push_back(at + ": expected type " + t.dump());
            return;
        }
    }
    if (schema.contains("enum")) {
        bool found = false;
        for (const auto& option : schema["enum"]) found = found || option == value;
        if (!found) out.push_back(at + ": value " + value.dump() + " not in enum");
    }
    if (value.is_number()) {
        const double v = value.get<double>();
        if (schema.contains("minimum") && v < schema["minimum"].get<double>())
            out.push_back(at + ": below minimum");
        if (schema.contains("maximum") && v > schema["maximum"].get<double>())
            out.push_back(at + ": above maximum");
    }
    if (value.is_string() && schema.contains("minLength") &&
        value.get_ref<const std::string&>().size() < schema["minLength"].get<std::size_t>())
        out.push_back(at + ": string shorter than minLength");
    if (value.is_array()) {
        if (schema.contains("minItems") && value.size() < schema["minItems"].get<std::size_t>())
            out.push_back(at + ": fewer than minItems");
        if (schema.contains("maxItems") && value.size() > schema["maxItems"].get<std::size_t>())
            out.push_back(at + ": more than maxItems");
        if (schema.contains("items"))
            for (std::size_t i = 0; i < value.size(); ++i)
                check(schema["items"], value[i], at + "/" + std::to_string(i), out);
    }
    if (value.is_object()) {
        if (schema.contains("required"))
            for (const auto& key : schema["required"])
                if (!value.contains(key.get<std::string>()))
                    out.push_back(at + ": missing required property " + key.dump());
        const json empty = json::object();
        const auto& props = schema.contains("properties") ? schema["properties"] : empty;
        const bool closed = schema.contains("additionalProperties") && schema["additionalProperties"] == false;
        for (const auto& [key, member] : value.items()) {
            if (props.contains(key))
                check(props[key], member, at + "/" + key, out);
            else if (closed)
                out.push_back(at + ": unexpected property \"" + key + "\"");
        }
    }
}

}  // namespace

std::vector<std::string> schema_violations(const nlohmann::json& schema, const nlohmann::json& instance) {
    std::vector<std::string> out;
    check(schema, instance, "", out);
    for (auto& m : out)
        if (m.front() == ':') m.insert(0, "/");
    return out;
}

const nlohmann::json& evidence_report_schema() {
    static const nlohmann::json schema = nlohmann::json::parse(kEvidenceReportSchema);
    return schema;
}

}  // namespace evai
