#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "frm/frm.hpp"

namespace frm {

// Literal per-pair evaluation of a DNL block in double precision: pointwise
// projections by explicit loops, then for every query position i and key
// position j
//   w(i, j) = exp(s_ij) / sum_j' exp(s_ij') + exp(m_j) / sum_j' exp(m_j')
//   s_ij    = sum_c (q_ci - mean_i' q_ci') (k_cj - mean_j' k_cj')
//   y_i     = sum_j w(i, j) v_j
// followed by the output projection and residual. O(HW^2) and slow; meant
// for cross-checking the batched implementation on tiny inputs.
template <typename T>
std::vector<double> dnl_literal(DnlBlock<T>& block, const BasicTensor<T>& x);

struct OracleCase {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  double max_deviation = 0;
};

struct OracleSweep {
  std::vector<OracleCase> cases;
  double tolerance = 1e-5;
  // Worst |y - 2 v| over the 1x1 cases, where both softmaxes are exactly 1.
  double singleton_deviation = 0;

  double max_deviation() const;
  bool passed() const;
  std::string format() const;
};

// Random float blocks and inputs over spatial sizes 1..max_extent in each
// axis and each channel count, batch 2.
OracleSweep run_dnl_oracle_sweep(std::uint64_t seed, std::size_t max_extent = 4,
                                 const std::vector<std::size_t>& channels = {4, 8}, double tolerance = 1e-5);

}  // namespace frm
