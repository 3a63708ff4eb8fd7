#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "frm/cost.hpp"
#include "frm/model.hpp"

namespace frm {

// Parameter and FLOP counts per named submodule for one forward pass at a
// fixed input size. FLOPs count a multiply-accumulate as 2.
struct CostReport {
  std::string context_head;
  std::size_t height = 0;
  std::size_t width = 0;
  Mode mode = Mode::kInference;
  std::vector<CostRow> rows;

  std::uint64_t total_params() const;
  std::uint64_t total_flops() const;
  // Sum of the rows whose path equals prefix or starts with "prefix.".
  CostRow subtotal(const std::string& prefix) const;
  const CostRow* find(const std::string& path) const;

  std::string table() const;
  std::string csv() const;
};

CostReport count_costs(const SegModel<float>& model, std::size_t height, std::size_t width, Mode mode);
// Builds an uninitialized model from config and counts it.
CostReport count_costs(const ModelConfig& config, std::size_t height, std::size_t width, Mode mode);

// The same model with each context head swapped in, all fed the same
// concatenated multi-stage input.
struct HeadComparison {
  std::vector<CostReport> reports;

  // One line per head with backbone, aggregation, context, decoder and total
  // columns (params and FLOPs).
  std::string table() const;
  std::string csv() const;
};

HeadComparison compare_heads(const ModelConfig& base, std::size_t height, std::size_t width,
                             const std::vector<std::string>& heads = {"frm", "ppm", "dappm"},
                             Mode mode = Mode::kInference);

}  // namespace frm
