// SPDX-License-Identifier: Apache-2.0

#include "json_io.hpp"

#include <fstream>
#include <sstream>

#include "cgsd/errors.hpp"

namespace cgsd::detail {

using nlohmann::json;

json matrix_to_json(const Matrix& m) {
  json data = json::array();
  for (double v : m.values()) data.push_back(v);
  return json{{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::move(data)}};
}

Matrix matrix_from_json(const json& doc, const std::string& field) {
  if (!doc.contains(field)) throw ParseError("checkpoint field missing: " + field);
  const json& node = doc.at(field);
  try {
    const auto rows = node.at("rows").get<std::size_t>();
    const auto cols = node.at("cols").get<std::size_t>();
    auto data = node.at("data").get<std::vector<double>>();
    if (data.size() != rows * cols) {
      throw ParseError("checkpoint field " + field + ": expected " + std::to_string(rows * cols) +
                       " values, found " + std::to_string(data.size()));
    }
    return Matrix(rows, cols, std::move(data));
  } catch (const json::exception& e) {
    throw ParseError("checkpoint field " + field + ": " + e.what());
  }
}

void write_json_file(const std::filesystem::path& path, const json& doc) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << doc.dump(1) << '\n';
  if (!out) throw DataError("write failed: " + path.string());
}

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("file not found: " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  try {
    return json::parse(buf.str());
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

void require_format(const json& doc, const std::string& expected) {
  const std::string found = doc.is_object() && doc.contains("format") && doc["format"].is_string()
                                ? doc["format"].get<std::string>()
                                : std::string("<none>");
  if (found != expected) {
    throw VersionError("checkpoint format mismatch: expected " + expected + ", found " + found);
  }
}

}  // namespace cgsd::detail
