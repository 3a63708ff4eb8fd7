#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace frm {

struct CostRow {
  std::string path;
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
};

// Collects one row per leaf computation while a module tree is walked at a
// fixed input size.
class CostCounter {
 public:
  void add(std::string path, std::uint64_t params, std::uint64_t flops) {
    rows_.push_back({std::move(path), params, flops});
  }
  const std::vector<CostRow>& rows() const { return rows_; }

 private:
  std::vector<CostRow> rows_;
};

}  // namespace frm
