// SPDX-License-Identifier: Apache-2.0
//
// Binary checkpoint container, explicitly little-endian:
//
//   "MMKDCKPT"  8-byte magic
//   u32         format version (currently 1)
//   u8          scalar width in bytes (8 = f64, 4 = f32)
//   u8[3]       reserved, zero
//   u32+bytes   role ("teacher" | "student")
//   u64+bytes   config echo (verbatim INI text)
//   u64         tensor count
//   per tensor: u32+bytes name ("group/param"), u32 ndim, u64 dims...,
//               u64 element count, raw little-endian scalars
//   "MMKDEND!"  8-byte trailer
//
// Loading stages everything before returning, so a truncated or corrupt
// file yields an error and no partial state. A load -> save round trip is
// byte-identical.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "mmkd/error.hpp"
#include "mmkd/model.hpp"

namespace mmkd {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[8] = {'M', 'M', 'K', 'D', 'C', 'K', 'P', 'T'};
inline constexpr char kCheckpointTrailer[8] = {'M', 'M', 'K', 'D', 'E', 'N', 'D', '!'};

struct CheckpointTensor {
  std::string name;  // "group/param"
  Shape shape;
  std::vector<std::uint64_t> raw;  // bit patterns, one per element
};

struct CheckpointBlob {
  std::uint32_t version = kCheckpointVersion;
  std::uint8_t scalar_bytes = 8;
  std::string role;
  std::string config_echo;
  std::vector<CheckpointTensor> tensors;

  const CheckpointTensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

namespace detail {

inline void put_bytes(std::ostream& os, const void* p, std::size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  put_bytes(os, b, 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  put_bytes(os, b, 8);
}

inline void get_bytes(std::istream& is, void* p, std::size_t n, const char* what) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n)
    throw CheckpointError(std::string("checkpoint truncated while reading ") + what);
}

inline std::uint32_t get_u32(std::istream& is, const char* what) {
  unsigned char b[4];
  get_bytes(is, b, 4, what);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline std::uint64_t get_u64(std::istream& is, const char* what) {
  unsigned char b[8];
  get_bytes(is, b, 8, what);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline std::string get_string(std::istream& is, std::uint64_t len, const char* what) {
  if (len > (1ull << 30))
    throw CheckpointError(std::string("checkpoint field too large: ") + what);
  std::string s(static_cast<std::size_t>(len), '\0');
  if (len) get_bytes(is, s.data(), s.size(), what);
  return s;
}

template <class S>
std::uint64_t scalar_bits(S v) {
  if constexpr (sizeof(S) == 8)
    return std::bit_cast<std::uint64_t>(static_cast<double>(v));
  else
    return std::bit_cast<std::uint32_t>(static_cast<float>(v));
}

template <class S>
S bits_scalar(std::uint64_t bits) {
  if constexpr (sizeof(S) == 8)
    return static_cast<S>(std::bit_cast<double>(bits));
  else
    return static_cast<S>(std::bit_cast<float>(static_cast<std::uint32_t>(bits)));
}

}  // namespace detail

inline void save_checkpoint_blob(const std::filesystem::path& path,
                                 const CheckpointBlob& blob) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os)
    throw CheckpointError("cannot open checkpoint for writing: " + path.string());
  detail::put_bytes(os, kCheckpointMagic, 8);
  detail::put_u32(os, blob.version);
  const unsigned char meta[4] = {blob.scalar_bytes, 0, 0, 0};
  detail::put_bytes(os, meta, 4);
  detail::put_u32(os, static_cast<std::uint32_t>(blob.role.size()));
  detail::put_bytes(os, blob.role.data(), blob.role.size());
  detail::put_u64(os, blob.config_echo.size());
  detail::put_bytes(os, blob.config_echo.data(), blob.config_echo.size());
  detail::put_u64(os, blob.tensors.size());
  for (const auto& t : blob.tensors) {
    detail::put_u32(os, static_cast<std::uint32_t>(t.name.size()));
    detail::put_bytes(os, t.name.data(), t.name.size());
    detail::put_u32(os, static_cast<std::uint32_t>(t.shape.size()));
    for (std::size_t d : t.shape) detail::put_u64(os, d);
    detail::put_u64(os, t.raw.size());
    for (std::uint64_t bits : t.raw) {
      if (blob.scalar_bytes == 8) {
        detail::put_u64(os, bits);
      } else {
        detail::put_u32(os, static_cast<std::uint32_t>(bits));
      }
    }
  }
  detail::put_bytes(os, kCheckpointTrailer, 8);
  if (!os) throw CheckpointError("write failed for checkpoint: " + path.string());
}

inline CheckpointBlob load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint: " + path.string());
  char magic[8];
  detail::get_bytes(is, magic, 8, "magic");
  if (std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw CheckpointError("not a checkpoint file: " + path.string());
  CheckpointBlob blob;
  blob.version = detail::get_u32(is, "version");
  if (blob.version != kCheckpointVersion)
    throw CheckpointError("checkpoint format version " + std::to_string(blob.version) +
                          " found, expected " + std::to_string(kCheckpointVersion) +
                          ": " + path.string());
  unsigned char meta[4];
  detail::get_bytes(is, meta, 4, "header");
  blob.scalar_bytes = meta[0];
  if (blob.scalar_bytes != 4 && blob.scalar_bytes != 8)
    throw CheckpointError("checkpoint scalar width " + std::to_string(meta[0]) +
                          " unsupported");
  blob.role = detail::get_string(is, detail::get_u32(is, "role length"), "role");
  blob.config_echo =
      detail::get_string(is, detail::get_u64(is, "config length"), "config echo");
  const std::uint64_t count = detail::get_u64(is, "tensor count");
  if (count > (1ull << 24)) throw CheckpointError("implausible tensor count");
  blob.tensors.reserve(static_cast<std::size_t>(count));
  for (std::uint64_t i = 0; i < count; ++i) {
    CheckpointTensor t;
    t.name = detail::get_string(is, detail::get_u32(is, "tensor name length"),
                                "tensor name");
    const std::uint32_t ndim = detail::get_u32(is, "tensor rank");
    if (ndim > 8) throw CheckpointError("implausible tensor rank");
    for (std::uint32_t d = 0; d < ndim; ++d)
      t.shape.push_back(static_cast<std::size_t>(detail::get_u64(is, "tensor dim")));
    const std::uint64_t n = detail::get_u64(is, "tensor size");
    if (n != shape_numel(t.shape))
      throw CheckpointError("tensor '" + t.name + "' size disagrees with its shape");
    t.raw.resize(static_cast<std::size_t>(n));
    for (auto& bits : t.raw)
      bits = blob.scalar_bytes == 8
                 ? detail::get_u64(is, "tensor data")
                 : static_cast<std::uint64_t>(detail::get_u32(is, "tensor data"));
    blob.tensors.push_back(std::move(t));
  }
  char trailer[8];
  detail::get_bytes(is, trailer, 8, "trailer");
  if (std::memcmp(trailer, kCheckpointTrailer, 8) != 0)
    throw CheckpointError("checkpoint trailer mismatch (file corrupt): " +
                          path.string());
  return blob;
}

template <class S>
CheckpointBlob checkpoint_from_model(const MultimodalModelT<S>& model,
                                     const std::string& config_echo) {
  CheckpointBlob blob;
  blob.scalar_bytes = sizeof(S);
  blob.role = model.cfg.role;
  blob.config_echo = config_echo;
  for (const auto* g : model.groups()) {
    for (const auto& [name, tensor] : g->params) {
      CheckpointTensor t;
      t.name = g->name + "/" + name;
      t.shape = tensor.shape();
      t.raw.reserve(tensor.numel());
      for (S v : tensor.data()) t.raw.push_back(detail::scalar_bits<S>(v));
      blob.tensors.push_back(std::move(t));
    }
  }
  return blob;
}

template <class S>
void save_checkpoint(const std::filesystem::path& path, const MultimodalModelT<S>& model,
                     const std::string& config_echo) {
  save_checkpoint_blob(path, checkpoint_from_model(model, config_echo));
}

// Copies blob tensors into an already-built model of matching architecture.
template <class S>
void apply_checkpoint(MultimodalModelT<S>& model, const CheckpointBlob& blob) {
  if (blob.scalar_bytes != sizeof(S))
    throw CheckpointError("checkpoint holds " + std::to_string(blob.scalar_bytes * 8) +
                          "-bit scalars, model uses " + std::to_string(sizeof(S) * 8) +
                          "-bit");
  std::size_t expected = 0;
  for (auto* g : model.groups()) expected += g->params.size();
  if (expected != blob.tensors.size())
    throw CheckpointError("checkpoint holds " + std::to_string(blob.tensors.size()) +
                          " tensors, model expects " + std::to_string(expected));
  for (auto* g : model.groups()) {
    for (auto& [name, tensor] : g->params) {
      const std::string key = g->name + "/" + name;
      const CheckpointTensor* t = blob.find(key);
      if (!t) throw CheckpointError("checkpoint is missing tensor '" + key + "'");
      if (t->shape != tensor.shape())
        throw CheckpointError("checkpoint tensor '" + key + "' has shape " +
                              shape_str(t->shape) + ", model expects " +
                              shape_str(tensor.shape()));
      for (std::size_t i = 0; i < t->raw.size(); ++i)
        tensor.data()[i] = detail::bits_scalar<S>(t->raw[i]);
    }
  }
}

}  // namespace mmkd
