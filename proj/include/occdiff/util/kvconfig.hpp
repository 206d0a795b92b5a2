// Copyright 2026 The occdiff Authors
// SPDX-License-Identifier: Apache-2.0
//
// Minimal key=value config files. One `key = value` pair per line, `#` starts
// a comment, blank lines ignored. Readers mark keys as consumed; after a tool
// has read everything it understands, finish() rejects leftovers so typos in
// config files fail loudly instead of silently using defaults.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace occdiff {

class KvConfig {
 public:
  KvConfig() = default;
  static KvConfig parse(const std::string& text, const std::string& origin = "<string>");
  static KvConfig load(const std::filesystem::path& path);

  bool has(const std::string& key) const;
  void set(const std::string& key, const std::string& value);

  std::string get_str(const std::string& key, std::optional<std::string> fallback = {}) const;
  int64_t get_int(const std::string& key, std::optional<int64_t> fallback = {}) const;
  double get_num(const std::string& key, std::optional<double> fallback = {}) const;
  bool get_bool(const std::string& key, std::optional<bool> fallback = {}) const;

  // Raises Errc::config naming every key that was present but never read.
  void finish() const;

  // Round-trips keys in insertion order.
  std::string serialize() const;

  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

 private:
  const std::string* find(const std::string& key) const;
  std::vector<std::pair<std::string, std::string>> entries_;
  mutable std::vector<bool> consumed_;
  std::string origin_ = "<empty>";
};

}  // namespace occdiff
