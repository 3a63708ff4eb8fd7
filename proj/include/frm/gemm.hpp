#pragma once

#include <cstddef>

namespace frm {

// C (m x p) += A (m x k) * B (k x p), all row-major and contiguous. Each
// output element accumulates over k in increasing order.
template <typename T>
void gemm_nn(std::size_t m, std::size_t k, std::size_t p, const T* __restrict a, const T* __restrict b,
             T* __restrict c) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * p;
    const T* arow = a + i * k;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const T av = arow[kk];
      const T* brow = b + kk * p;
      for (std::size_t j = 0; j < p; ++j) crow[j] += av * brow[j];
    }
  }
}

// dst (cols x rows) = src (rows x cols)^T
template <typename T>
void transpose_matrix(std::size_t rows, std::size_t cols, const T* __restrict src, T* __restrict dst) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

}  // namespace frm
