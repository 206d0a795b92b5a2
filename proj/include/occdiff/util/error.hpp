// Copyright 2026 The occdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace occdiff {

enum class Errc {
  bad_magic,
  version_mismatch,
  truncated,
  invalid_label,
  shape_mismatch,
  invalid_argument,
  numeric,
  io,
  config,
  generation,
  ingest,
  missing_checkpoint,
};

const char* errc_name(Errc c);

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& msg)
      : std::runtime_error(std::string(errc_name(code)) + ": " + msg), code_(code) {}
  Errc code() const { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void raise(Errc code, const std::string& msg) { throw Error(code, msg); }

inline void require(bool ok, Errc code, const std::string& msg) {
  if (!ok) raise(code, msg);
}

}  // namespace occdiff
