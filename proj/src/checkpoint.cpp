#include "statdistill/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>

namespace sdt {
namespace {

constexpr char kMagic[4] = {'S', 'D', 'T', '1'};

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFFu));
}

class Reader {
 public:
  explicit Reader(std::span<const unsigned char> bytes) : bytes_(bytes) {}

  bool done() const { return pos_ == bytes_.size(); }
  std::size_t offset() const { return pos_; }

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw FormatError("checkpoint truncated at byte offset " + std::to_string(pos_) + " while reading " + what);
    }
  }

  std::span<const unsigned char> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<unsigned char> encode_checkpoint(std::span<const NamedTensor> entries) {
  std::vector<unsigned char> out(std::begin(kMagic), std::end(kMagic));
  for (const auto& e : entries) {
    if (shape_numel(e.shape) != e.values.size()) {
      throw DimensionError("checkpoint entry '" + e.name + "' has shape " + shape_str(e.shape) + " but " +
                           std::to_string(e.values.size()) + " values");
    }
    put_u32(out, static_cast<std::uint32_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    put_u32(out, static_cast<std::uint32_t>(e.shape.size()));
    for (auto d : e.shape) put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : e.values) put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

std::vector<NamedTensor> decode_checkpoint(std::span<const unsigned char> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw FormatError("checkpoint has unknown magic at byte offset 0 (expected \"SDT1\")");
  }
  Reader r(bytes.subspan(4));
  std::vector<NamedTensor> entries;
  while (!r.done()) {
    NamedTensor e;
    const std::size_t start = r.offset() + 4;
    const auto name_len = r.u32("name length");
    e.name = r.str(name_len, "name");
    const auto rank = r.u32("rank");
    if (rank > 4) {
      throw FormatError("checkpoint entry '" + e.name + "' at byte offset " + std::to_string(start) +
                        " has rank " + std::to_string(rank));
    }
    for (std::uint32_t i = 0; i < rank; ++i) e.shape.push_back(r.u32("dims"));
    const std::size_t n = shape_numel(e.shape);
    e.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) e.values[i] = std::bit_cast<float>(r.u32("values"));
    entries.push_back(std::move(e));
  }
  return entries;
}

void write_checkpoint(const std::filesystem::path& path, std::span<const NamedTensor> entries) {
  const auto bytes = encode_checkpoint(entries);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FileError("cannot open checkpoint for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FileError("failed writing checkpoint: " + path.string());
}

std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileError("cannot open checkpoint: " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace sdt
