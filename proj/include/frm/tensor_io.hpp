#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "frm/tensor.hpp"

// "FRMT" tensor records: magic, u32 version, u32 rank, u32 extents, then
// little-endian float32 values.

namespace frm {

inline constexpr std::uint32_t kFrmtVersion = 1;

void write_frmt(std::ostream& out, const Tensor& tensor);
// Records of rank < 4 are left-padded with unit extents. source names the
// stream in error messages.
Tensor read_frmt(std::istream& in, const std::string& source);

void save_tensor(const std::filesystem::path& path, const Tensor& tensor);
Tensor load_tensor(const std::filesystem::path& path);

using NamedTensor = std::pair<std::string, Tensor>;

// Sequence of (u32 byte length, UTF-8 name, FRMT record).
void save_named_tensors(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_named_tensors(const std::filesystem::path& path);

}  // namespace frm
