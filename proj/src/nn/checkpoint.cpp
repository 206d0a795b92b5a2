// Copyright 2026 The occdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "occdiff/nn/checkpoint.hpp"

#include "occdiff/util/error.hpp"
#include "occdiff/util/io.hpp"

namespace occdiff::nn {

namespace {
constexpr char kMagic[4] = {'O', 'D', 'C', 'K'};
}

bool Checkpoint::has(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return true;
  return false;
}

const Tensor& Checkpoint::tensor(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  raise(Errc::missing_checkpoint, "checkpoint has no tensor '" + name + "'");
}

void Checkpoint::add_store(const ParamStore& store) {
  for (const auto& [name, v] : store.all()) add(name, v.val().clone());
}

void Checkpoint::load_store(ParamStore& store) const {
  for (const auto& [name, v] : store.all()) {
    const Tensor& src = tensor(name);
    require(src.same_shape(v.val()), Errc::shape_mismatch,
            "checkpoint tensor '" + name + "' shape " + src.shape_str() + " != model " +
                v.val().shape_str());
    Var var = v;
    std::copy_n(src.data(), src.numel(), var.mutable_val().data());
  }
}

void Checkpoint::save(const std::filesystem::path& path) const {
  ByteWriter w;
  w.bytes(kMagic, 4);
  w.u32(kVersion);
  const std::string js = meta.dump();
  w.u32(static_cast<uint32_t>(js.size()));
  w.str(js);
  w.u32(static_cast<uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    w.u32(static_cast<uint32_t>(name.size()));
    w.str(name);
    w.u32(static_cast<uint32_t>(t.ndim()));
    for (int d : t.shape()) w.u32(static_cast<uint32_t>(d));
    for (int64_t i = 0; i < t.numel(); ++i) w.f32(t[i]);
  }
  write_binary_file(path, w.buffer().data(), w.buffer().size());
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  require(std::filesystem::exists(path), Errc::missing_checkpoint,
          "no checkpoint at " + path.string());
  const auto buf = read_binary_file(path);
  ByteReader r(buf);
  char magic[4];
  r.bytes(magic, 4);
  require(std::memcmp(magic, kMagic, 4) == 0, Errc::bad_magic,
          path.string() + " is not a checkpoint file");
  const uint32_t version = r.u32();
  require(version == kVersion, Errc::version_mismatch,
          "checkpoint version " + std::to_string(version) + " unsupported");
  Checkpoint ck;
  const uint32_t jlen = r.u32();
  ck.meta = nlohmann::json::parse(r.str(jlen));
  const uint32_t count = r.u32();
  for (uint32_t i = 0; i < count; ++i) {
    const uint32_t nlen = r.u32();
    std::string name = r.str(nlen);
    const uint32_t ndim = r.u32();
    std::vector<int> shape(ndim);
    for (uint32_t d = 0; d < ndim; ++d) shape[d] = static_cast<int>(r.u32());
    Tensor t(shape);
    require(r.remaining() >= static_cast<size_t>(t.numel()) * 4, Errc::truncated,
            "checkpoint tensor data truncated: " + name);
    for (int64_t j = 0; j < t.numel(); ++j) t[j] = r.f32();
    ck.add(std::move(name), std::move(t));
  }
  return ck;
}

}  // namespace occdiff::nn
