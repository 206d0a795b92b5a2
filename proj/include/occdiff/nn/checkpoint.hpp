// Copyright 2026 The occdiff Authors
// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint container: magic "ODCK", version, JSON metadata block, then
// named float32 tensors. Everything little-endian.

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "occdiff/nn/params.hpp"
#include "occdiff/nn/tensor.hpp"

namespace occdiff::nn {

struct Checkpoint {
  static constexpr uint32_t kVersion = 1;

  nlohmann::json meta;
  std::vector<std::pair<std::string, Tensor>> tensors;

  void add(const std::string& name, Tensor t) { tensors.emplace_back(name, std::move(t)); }
  bool has(const std::string& name) const;
  const Tensor& tensor(const std::string& name) const;

  // Every store parameter by name, in registration order.
  void add_store(const ParamStore& store);
  // Loads values into matching params; raises on missing name or shape mismatch.
  void load_store(ParamStore& store) const;

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);
};

}  // namespace occdiff::nn
