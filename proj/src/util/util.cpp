// Copyright 2026 The occdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include <cstdio>
#include <string>

#include "occdiff/util/error.hpp"
#include "occdiff/util/hash.hpp"

namespace occdiff {

const char* errc_name(Errc c) {
  switch (c) {
    case Errc::bad_magic: return "bad_magic";
    case Errc::version_mismatch: return "version_mismatch";
    case Errc::truncated: return "truncated";
    case Errc::invalid_label: return "invalid_label";
    case Errc::shape_mismatch: return "shape_mismatch";
    case Errc::invalid_argument: return "invalid_argument";
    case Errc::numeric: return "numeric";
    case Errc::io: return "io";
    case Errc::config: return "config";
    case Errc::generation: return "generation";
    case Errc::ingest: return "ingest";
    case Errc::missing_checkpoint: return "missing_checkpoint";
  }
  return "unknown";
}

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return std::string(buf);
}

}  // namespace occdiff
