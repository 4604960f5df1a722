#pragma once

#include <string>

#include "json.hpp"

#include "ntd/env.hpp"

namespace ntd {

using Json = nlohmann::json;

/// Schema: version, n_states, n_actions, gamma, r_bar, transition[s][a][s'],
/// reward[s][a], features[s][a][k].
Json to_json(const Environment& env);
Environment environment_from_json(const Json& doc);

Json read_json_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);

/// printf("%.17g"); round-trips every double.
std::string format_double(double value);

/// 64-bit FNV-1a, rendered as 16 hex digits.
std::string fnv1a_hex(const std::string& bytes);

}  // namespace ntd
