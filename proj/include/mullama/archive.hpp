// SPDX-License-Identifier: Apache-2.0
//
// Versioned named-tensor container used for checkpoints.
//
// Layout (all integers little-endian):
//   magic      8 bytes  "MULLAMA\x01"
//   version    u32      kArchiveVersion
//   meta_len   u32      length of the metadata blob
//   meta       bytes    UTF-8 JSON object
//   count      u32      number of tensors
//   per tensor:
//     name_len u32, name bytes
//     ndim     u32, dims u64[ndim]
//     values   f64[prod(dims)]
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "mullama/tensor.hpp"

namespace mullama {

inline constexpr std::uint32_t kArchiveVersion = 1;

struct NamedTensor {
  std::vector<std::size_t> shape;
  std::vector<double> values;

  bool operator==(const NamedTensor&) const = default;
};

NamedTensor to_tensor(const Matrix& m);
NamedTensor to_tensor(const Vector& v);
// Throws LoadError when the shape does not match.
void from_tensor(const NamedTensor& t, Matrix& m, const std::string& name);
void from_tensor(const NamedTensor& t, Vector& v, const std::string& name);

struct Archive {
  std::string metadata = "{}";
  std::map<std::string, NamedTensor> tensors;

  // Tensors whose name starts with `prefix`, with the prefix removed.
  std::map<std::string, NamedTensor> section(const std::string& prefix) const;
  void put_section(const std::string& prefix, const std::map<std::string, NamedTensor>& part);
};

std::vector<std::uint8_t> serialize_archive(const Archive& a);
Archive deserialize_archive(const std::vector<std::uint8_t>& bytes);

void save_archive(const std::filesystem::path& path, const Archive& a);
Archive load_archive(const std::filesystem::path& path);

// Strict name check: throws LoadError listing unknown and missing names.
void require_exact_names(const std::map<std::string, NamedTensor>& got,
                         const std::vector<std::string>& expected, const std::string& what);

}  // namespace mullama
