#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "frm/tensor.hpp"

// Differentiable operations over BasicTensor. Every function records a graph
// node when grad recording is enabled and at least one input requires grad.
// Reductions accumulate in a fixed left-to-right order so repeated runs are
// bit-identical.

namespace frm {

// Elementwise with numpy-style broadcasting: an extent of 1 stretches to
// match the other operand.
template <typename T> BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T> BasicTensor<T> scale(const BasicTensor<T>& a, T factor);
template <typename T> BasicTensor<T> add_scalar(const BasicTensor<T>& a, T offset);
template <typename T> BasicTensor<T> relu(const BasicTensor<T>& a);

// Full reductions to a 1x1x1x1 scalar.
template <typename T> BasicTensor<T> sum(const BasicTensor<T>& a);
template <typename T> BasicTensor<T> mean(const BasicTensor<T>& a);
// Reductions along one axis, keeping it with extent 1.
template <typename T> BasicTensor<T> sum_axis(const BasicTensor<T>& a, int axis);
template <typename T> BasicTensor<T> mean_axis(const BasicTensor<T>& a, int axis);

template <typename T> BasicTensor<T> reshape(const BasicTensor<T>& a, const Shape& shape);
// Swaps the last two axes: N x C x H x W -> N x C x W x H.
template <typename T> BasicTensor<T> transpose(const BasicTensor<T>& a);
template <typename T> BasicTensor<T> concat_channels(const std::vector<BasicTensor<T>>& parts);

// Batched over axes 0 and 1: (N,C,M,K) x (N,C,K,P) -> (N,C,M,P).
template <typename T> BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T> BasicTensor<T> softmax(const BasicTensor<T>& a, int axis);

struct Conv2dParams {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;
};

std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                               std::size_t padding);

// Cross-correlation. weight is outC x (inC/groups) x kH x kW; bias, when
// given, is 1 x outC x 1 x 1.
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                      const BasicTensor<T>* bias, const Conv2dParams& params);

// Normalizes each channel with the batch statistics, then applies
// gamma/beta (both 1 x C x 1 x 1). Biased batch variance is written to
// batch_var, batch mean to batch_mean.
template <typename T>
BasicTensor<T> batch_norm_train(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                                const BasicTensor<T>& beta, T eps, std::vector<T>* batch_mean,
                                std::vector<T>* batch_var);

// Same affine map with fixed statistics.
template <typename T>
BasicTensor<T> batch_norm_eval(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                               const BasicTensor<T>& beta, const std::vector<T>& running_mean,
                               const std::vector<T>& running_var, T eps);

// Output cell (i, j) averages rows [floor(i*H/outH), ceil((i+1)*H/outH)) and
// the analogous columns.
template <typename T>
BasicTensor<T> adaptive_avg_pool(const BasicTensor<T>& x, std::size_t out_h, std::size_t out_w);

// align_corners = false, source coordinates clamped at the border.
template <typename T>
BasicTensor<T> bilinear_resize(const BasicTensor<T>& x, std::size_t out_h, std::size_t out_w);

// Divides every vector along the channel axis by its Euclidean norm.
template <typename T> BasicTensor<T> l2_normalize_channels(const BasicTensor<T>& x, T eps = T(1e-12));

struct PixelIndex {
  std::size_t n = 0;
  std::size_t h = 0;
  std::size_t w = 0;
};

// Collects the channel vectors at the given positions into a
// 1 x 1 x P x C matrix.
template <typename T>
BasicTensor<T> gather_pixels(const BasicTensor<T>& x, const std::vector<PixelIndex>& where);

// Mean over non-ignored pixels of -log softmax(logits)[label]. labels hold
// N*H*W entries in N,H,W order. valid_count receives the number of pixels
// that contributed.
template <typename T>
BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const std::int32_t> labels,
                                     std::int32_t ignore_index, std::size_t* valid_count = nullptr);

// Per-anchor index lists into the rows of a similarity matrix.
struct ContrastiveTerm {
  std::size_t anchor = 0;
  std::vector<std::size_t> positives;
  std::vector<std::size_t> negatives;
};

// sim is 1 x 1 x P x P holding already temperature-scaled similarities.
// Averages over terms of
//   (1/|P|) sum_p -log(exp(s_ap) / (exp(s_ap) + sum_n exp(s_an))).
template <typename T>
BasicTensor<T> contrastive_from_similarity(const BasicTensor<T>& sim,
                                           const std::vector<ContrastiveTerm>& terms);

}  // namespace frm
