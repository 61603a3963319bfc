#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "statdistill/tensor.hpp"

// Flat binary parameter file:
//   "SDT1"
//   repeated until EOF:
//     u32 name_length, name bytes (UTF-8)
//     u32 rank, rank x u32 dims
//     prod(dims) x f32 values
// All integers and floats little-endian.

namespace sdt {

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

void write_checkpoint(const std::filesystem::path& path, std::span<const NamedTensor> entries);
std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path);

std::vector<unsigned char> encode_checkpoint(std::span<const NamedTensor> entries);
std::vector<NamedTensor> decode_checkpoint(std::span<const unsigned char> bytes);

template <typename T>
NamedTensor to_named(std::string name, const Tensor<T>& t) {
  NamedTensor out{std::move(name), t.shape(), {}};
  out.values.reserve(t.numel());
  for (auto v : t.values()) out.values.push_back(static_cast<float>(v));
  return out;
}

}  // namespace sdt
