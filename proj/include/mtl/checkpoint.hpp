#pragma once

#include "mtl/model.hpp"

#include <filesystem>
#include <string>

namespace mtl {

// Binary checkpoint layout (all integers and floats little-endian):
//
//   "MTLCKPT1"                         8-byte magic
//   u64  spec hash
//   u32  entry count
//   per entry:
//     u32 name length, name bytes
//     u8  segment
//     u32 rank, u64 dims[rank]
//     u64 offset (in doubles)
//   u64  value count
//   f64  values[value count]

std::string encode_checkpoint(const ModelSpec& spec, const ParameterVector& params);
/// Throws if the bytes are malformed or were written for a different spec.
ParameterVector decode_checkpoint(const std::string& bytes, const ModelSpec& spec);

void save_checkpoint(const std::filesystem::path& path, const ModelSpec& spec, const ParameterVector& params);
ParameterVector load_checkpoint(const std::filesystem::path& path, const ModelSpec& spec);

}  // namespace mtl
