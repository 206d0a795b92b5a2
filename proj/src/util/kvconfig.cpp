// Copyright 2026 The occdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "occdiff/util/kvconfig.hpp"

#include <algorithm>
#include <cstdlib>
#include <sstream>

#include "occdiff/util/error.hpp"
#include "occdiff/util/io.hpp"

namespace occdiff {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

KvConfig KvConfig::parse(const std::string& text, const std::string& origin) {
  KvConfig cfg;
  cfg.origin_ = origin;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    require(eq != std::string::npos, Errc::config,
            origin + ":" + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    require(!key.empty(), Errc::config,
            origin + ":" + std::to_string(lineno) + ": empty key");
    cfg.set(key, value);
  }
  return cfg;
}

KvConfig KvConfig::load(const std::filesystem::path& path) {
  return parse(read_text_file(path), path.string());
}

const std::string* KvConfig::find(const std::string& key) const {
  for (size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].first == key) {
      consumed_[i] = true;
      return &entries_[i].second;
    }
  }
  return nullptr;
}

bool KvConfig::has(const std::string& key) const { return find(key) != nullptr; }

void KvConfig::set(const std::string& key, const std::string& value) {
  for (size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].first == key) {
      entries_[i].second = value;
      return;
    }
  }
  entries_.emplace_back(key, value);
  consumed_.push_back(false);
}

std::string KvConfig::get_str(const std::string& key, std::optional<std::string> fallback) const {
  const std::string* v = find(key);
  if (v) return *v;
  require(fallback.has_value(), Errc::config, origin_ + ": missing required key '" + key + "'");
  return *fallback;
}

int64_t KvConfig::get_int(const std::string& key, std::optional<int64_t> fallback) const {
  const std::string* v = find(key);
  if (!v) {
    require(fallback.has_value(), Errc::config, origin_ + ": missing required key '" + key + "'");
    return *fallback;
  }
  char* end = nullptr;
  const long long r = std::strtoll(v->c_str(), &end, 10);
  require(end && *end == '\0' && !v->empty(), Errc::config,
          origin_ + ": key '" + key + "' is not an integer: '" + *v + "'");
  return r;
}

double KvConfig::get_num(const std::string& key, std::optional<double> fallback) const {
  const std::string* v = find(key);
  if (!v) {
    require(fallback.has_value(), Errc::config, origin_ + ": missing required key '" + key + "'");
    return *fallback;
  }
  char* end = nullptr;
  const double r = std::strtod(v->c_str(), &end);
  require(end && *end == '\0' && !v->empty(), Errc::config,
          origin_ + ": key '" + key + "' is not a number: '" + *v + "'");
  return r;
}

bool KvConfig::get_bool(const std::string& key, std::optional<bool> fallback) const {
  const std::string* v = find(key);
  if (!v) {
    require(fallback.has_value(), Errc::config, origin_ + ": missing required key '" + key + "'");
    return *fallback;
  }
  if (*v == "true" || *v == "1") return true;
  if (*v == "false" || *v == "0") return false;
  raise(Errc::config, origin_ + ": key '" + key + "' is not a bool: '" + *v + "'");
}

void KvConfig::finish() const {
  std::string stray;
  for (size_t i = 0; i < entries_.size(); ++i) {
    if (!consumed_[i]) {
      if (!stray.empty()) stray += ", ";
      stray += "'" + entries_[i].first + "'";
    }
  }
  require(stray.empty(), Errc::config, origin_ + ": unknown config keys: " + stray);
}

std::string KvConfig::serialize() const {
  std::string out;
  for (const auto& [k, v] : entries_) {
    out += k;
    out += " = ";
    out += v;
    out += "\n";
  }
  return out;
}

}  // namespace occdiff
