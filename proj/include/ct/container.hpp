#pragma once

// Binary tensor container shared by LM checkpoints, CLT checkpoints and
// activation shards.
//
//   "CTNS"              4-byte magic
//   0x01020304          u32 byte-order mark, written little-endian
//   header_len          u64 little-endian
//   header              JSON {format_version, kind, meta, tensors:[{name, shape, dtype, offset}]}
//   payload             little-endian float32, row-major, tensors back to back
//   checksum            u64 FNV-1a of the payload bytes

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace ct {

struct NamedTensor {
  std::string name;
  std::vector<std::int64_t> shape;
  std::vector<float> data;

  std::int64_t numel() const;
};

struct Container {
  static constexpr int kFormatVersion = 1;

  std::string kind;
  nlohmann::json meta;
  std::vector<NamedTensor> tensors;

  const NamedTensor& get(const std::string& name) const;
  std::string serialize() const;
  static Container deserialize(std::string_view bytes, const std::string& origin = "<memory>");
  void save(const std::string& path) const;
  static Container load(const std::string& path);
  // Checksum of the payload as written.
  std::uint64_t payload_digest() const;
};

}  // namespace ct
