#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "eevit/nn.hpp"

namespace eevit {

// Binary layout, all integers u64 little-endian, values f64 little-endian:
//   "EEVIT" | version:u8 | count:u64 |
//   count x ( name_len:u64 | name bytes | rank:u64 | extents:u64[rank] | values:f64[prod] )
inline constexpr std::uint8_t kCheckpointVersion = 1;

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

std::vector<std::uint8_t> encode_checkpoint(const std::vector<Parameter>& tensors);
std::vector<NamedArray> decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::filesystem::path& path, const std::vector<Parameter>& tensors);
std::vector<NamedArray> read_checkpoint(const std::filesystem::path& path);

// Copies values into `targets` by name. Every target must be present with an
// identical shape; extra entries in the file are an error too.
void load_into(const std::vector<NamedArray>& arrays, const std::vector<Parameter>& targets);
void load_checkpoint(const std::filesystem::path& path, const std::vector<Parameter>& targets);

}  // namespace eevit
