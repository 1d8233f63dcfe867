#pragma once

// Model and data cards rendered as Markdown with a YAML-style front-matter
// block. Front-matter values are JSON-quoted strings, which YAML accepts.

#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "trustlens/core.hpp"

namespace trustlens::card {

using KeyValues = std::vector<std::pair<std::string, std::string>>;

struct ModelSection {
  std::string name;
  std::string architecture;
  std::string intended_use;
  std::vector<std::string> limitations;
  std::string training_data;
  KeyValues properties;
};

struct DataSection {
  std::string name;
  std::string collection;
  std::string annotation;
  std::vector<std::pair<std::string, double>> class_distribution;
  std::vector<std::string> known_biases;
  KeyValues properties;
};

struct CardManifest {
  std::string version;
  ModelSection model;
  DataSection data;
};

namespace detail {

inline std::string text(const nlohmann::json& j, const char* key, const std::string& ctx) {
  if (!j.contains(key)) throw Error(ErrorCode::schema, ctx + ": missing field '" + key + "'");
  const auto& v = j[key];
  if (!v.is_string()) throw Error(ErrorCode::schema, ctx + "." + key + ": expected a string");
  auto s = v.get<std::string>();
  if (s.empty()) throw Error(ErrorCode::schema, ctx + "." + key + ": must not be empty");
  return s;
}

// A string or a non-empty array of strings.
inline std::vector<std::string> text_list(const nlohmann::json& j, const char* key, const std::string& ctx) {
  if (!j.contains(key)) throw Error(ErrorCode::schema, ctx + ": missing field '" + key + "'");
  const auto& v = j[key];
  if (v.is_string()) return {text(j, key, ctx)};
  if (!v.is_array() || v.empty()) throw Error(ErrorCode::schema, ctx + "." + key + ": expected a string or a list of strings");
  std::vector<std::string> out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!v[i].is_string() || v[i].get<std::string>().empty())
      throw Error(ErrorCode::schema, ctx + "." + key + "[" + std::to_string(i) + "]: expected a non-empty string");
    out.push_back(v[i].get<std::string>());
  }
  return out;
}

inline KeyValues key_values(const nlohmann::json& j, const std::string& ctx) {
  KeyValues out;
  if (!j.contains("properties")) return out;
  const auto& p = j["properties"];
  if (!p.is_object()) throw Error(ErrorCode::schema, ctx + ".properties: expected an object");
  for (const auto& [k, v] : p.items()) out.emplace_back(k, v.is_string() ? v.get<std::string>() : v.dump());
  return out;
}

inline std::string quote(const std::string& s) { return nlohmann::json(s).dump(); }

inline std::string escape_cell(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '|') out += "\\|";
    else if (c == '\n') out += ' ';
    else out += c;
  }
  return out;
}

inline void table(std::string& md, const KeyValues& kv) {
  md += "| Key | Value |\n|---|---|\n";
  for (const auto& [k, v] : kv) md += "| " + escape_cell(k) + " | " + escape_cell(v) + " |\n";
}

inline void bullets(std::string& md, const std::vector<std::string>& items) {
  for (const auto& s : items) md += "- " + s + "\n";
}

}  // namespace detail

inline CardManifest manifest_from_json(const nlohmann::json& j) {
  const std::string ctx = "card";
  if (!j.is_object()) throw Error(ErrorCode::schema, ctx + ": expected an object");
  if (!j.contains("format") || j["format"] != "trustlens.card")
    throw Error(ErrorCode::schema, ctx + ": format must be 'trustlens.card'");
  CardManifest m;
  m.version = detail::text(j, "version", ctx);
  for (const char* sec : {"model", "data"})
    if (!j.contains(sec) || !j[sec].is_object()) throw Error(ErrorCode::schema, ctx + ": missing section '" + sec + "'");

  const auto& mj = j["model"];
  m.model.name = detail::text(mj, "name", "card.model");
  m.model.architecture = detail::text(mj, "architecture", "card.model");
  m.model.intended_use = detail::text(mj, "intended_use", "card.model");
  m.model.limitations = detail::text_list(mj, "limitations", "card.model");
  m.model.training_data = detail::text(mj, "training_data", "card.model");
  m.model.properties = detail::key_values(mj, "card.model");

  const auto& dj = j["data"];
  m.data.name = detail::text(dj, "name", "card.data");
  m.data.collection = detail::text(dj, "collection", "card.data");
  m.data.annotation = detail::text(dj, "annotation", "card.data");
  m.data.known_biases = detail::text_list(dj, "known_biases", "card.data");
  if (!dj.contains("class_distribution") || !dj["class_distribution"].is_object() || dj["class_distribution"].empty())
    throw Error(ErrorCode::schema, "card.data: 'class_distribution' must be a non-empty object of numbers");
  for (const auto& [k, v] : dj["class_distribution"].items()) {
    if (!v.is_number()) throw Error(ErrorCode::schema, "card.data.class_distribution." + k + ": expected a number");
    m.data.class_distribution.emplace_back(k, v.get<double>());
  }
  m.data.properties = detail::key_values(dj, "card.data");
  return m;
}

inline std::string render_model_card(const CardManifest& m) {
  using detail::quote;
  std::string md = "---\n";
  md += "card: model\n";
  md += "name: " + quote(m.model.name) + "\n";
  md += "version: " + quote(m.version) + "\n";
  md += "architecture: " + quote(m.model.architecture) + "\n";
  md += "training_data: " + quote(m.model.training_data) + "\n";
  for (const auto& [k, v] : m.model.properties) md += quote(k) + ": " + quote(v) + "\n";
  md += "---\n\n";
  md += "# Model Card: " + m.model.name + "\n\n";
  md += "Version " + m.version + "\n\n";
  md += "## Architecture\n\n" + m.model.architecture + "\n\n";
  md += "## Intended Use\n\n" + m.model.intended_use + "\n\n";
  md += "## Limitations\n\n";
  detail::bullets(md, m.model.limitations);
  md += "\n## Training Data\n\n" + m.model.training_data + "\n";
  if (!m.model.properties.empty()) {
    md += "\n## Properties\n\n";
    detail::table(md, m.model.properties);
  }
  return md;
}

inline std::string render_data_card(const CardManifest& m) {
  using detail::quote;
  std::string md = "---\n";
  md += "card: data\n";
  md += "name: " + quote(m.data.name) + "\n";
  md += "version: " + quote(m.version) + "\n";
  for (const auto& [k, v] : m.data.properties) md += quote(k) + ": " + quote(v) + "\n";
  md += "---\n\n";
  md += "# Data Card: " + m.data.name + "\n\n";
  md += "## Collection\n\n" + m.data.collection + "\n\n";
  md += "## Annotation\n\n" + m.data.annotation + "\n\n";
  md += "## Class Distribution\n\n| Class | Share |\n|---|---|\n";
  for (const auto& [k, v] : m.data.class_distribution)
    md += "| " + detail::escape_cell(k) + " | " + nlohmann::json(v).dump() + " |\n";
  md += "\n## Known Biases\n\n";
  detail::bullets(md, m.data.known_biases);
  if (!m.data.properties.empty()) {
    md += "\n## Properties\n\n";
    detail::table(md, m.data.properties);
  }
  return md;
}

}  // namespace trustlens::card
