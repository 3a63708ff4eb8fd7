#include "frm/tensor_io.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>

namespace frm {

namespace {

constexpr std::array<char, 4> kMagic{'F', 'R', 'M', 'T'};
constexpr std::uint32_t kMaxRank = 4;

void put_u32(std::ostream& out, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                         static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  out.write(bytes, 4);
}

std::uint32_t get_u32(std::istream& in, const std::string& source) {
  unsigned char bytes[4];
  if (!in.read(reinterpret_cast<char*>(bytes), 4)) throw FormatError(source + ": truncated FRMT record");
  return static_cast<std::uint32_t>(bytes[0]) | (static_cast<std::uint32_t>(bytes[1]) << 8) |
         (static_cast<std::uint32_t>(bytes[2]) << 16) | (static_cast<std::uint32_t>(bytes[3]) << 24);
}

}  // namespace

void write_frmt(std::ostream& out, const Tensor& tensor) {
  out.write(kMagic.data(), kMagic.size());
  put_u32(out, kFrmtVersion);
  put_u32(out, 4);
  for (std::size_t e : tensor.shape()) put_u32(out, static_cast<std::uint32_t>(e));
  for (float v : tensor.data()) put_u32(out, std::bit_cast<std::uint32_t>(v));
}

Tensor read_frmt(std::istream& in, const std::string& source) {
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kMagic) {
    throw FormatError(source + ": bad magic, expected FRMT");
  }
  const std::uint32_t version = get_u32(in, source);
  if (version != kFrmtVersion) throw FormatError(source + ": unsupported FRMT version " + std::to_string(version));
  const std::uint32_t rank = get_u32(in, source);
  if (rank == 0 || rank > kMaxRank) throw FormatError(source + ": unsupported rank " + std::to_string(rank));
  Shape shape{1, 1, 1, 1};
  for (std::uint32_t i = 0; i < rank; ++i) shape[kMaxRank - rank + i] = get_u32(in, source);
  const std::size_t count = numel(shape);
  if (count > (std::size_t{1} << 32)) throw FormatError(source + ": implausible shape " + to_string(shape));
  std::vector<float> values(count);
  for (float& v : values) v = std::bit_cast<float>(get_u32(in, source));
  return Tensor(shape, std::move(values));
}

void save_tensor(const std::filesystem::path& path, const Tensor& tensor) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  write_frmt(out, tensor);
  if (!out) throw IoError("write failed for " + path.string());
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return read_frmt(in, path.string());
}

void save_named_tensors(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  for (const auto& [name, tensor] : tensors) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_frmt(out, tensor);
  }
  if (!out) throw IoError("write failed for " + path.string());
}

std::vector<NamedTensor> load_named_tensors(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  const std::string source = path.string();
  std::vector<NamedTensor> out;
  while (in.peek() != std::char_traits<char>::eof()) {
    const std::uint32_t length = get_u32(in, source);
    if (length > 4096) throw FormatError(source + ": tensor name too long");
    std::string name(length, '\0');
    if (!in.read(name.data(), length)) throw FormatError(source + ": truncated tensor name");
    out.emplace_back(std::move(name), read_frmt(in, source + ":" + name));
  }
  return out;
}

}  // namespace frm
