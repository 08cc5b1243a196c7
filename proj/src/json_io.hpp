// SPDX-License-Identifier: Apache-2.0
//
// Shared helpers for the JSON checkpoint formats. Matrices are stored as
// {"rows", "cols", "data"} with data in row-major order; the serializer emits
// the shortest decimal that reads back to the same double.

#pragma once

#include <filesystem>
#include <string>

#include "cgsd/numkit.hpp"
#include "json.hpp"

namespace cgsd::detail {

nlohmann::json matrix_to_json(const Matrix& m);
/// Throws ParseError naming `field` when the entry is missing or malformed.
Matrix matrix_from_json(const nlohmann::json& doc, const std::string& field);

void write_json_file(const std::filesystem::path& path, const nlohmann::json& doc);
nlohmann::json read_json_file(const std::filesystem::path& path);

/// Throws VersionError unless doc["format"] equals `expected`.
void require_format(const nlohmann::json& doc, const std::string& expected);

}  // namespace cgsd::detail
