#pragma once

#include <array>
#include <string>

#include "frm/context_head.hpp"
#include "frm/layers.hpp"

namespace frm {

// The four backbone stage outputs at strides 4, 8, 16 and 32.
template <typename T>
struct FeaturePyramid {
  BasicTensor<T> f1;
  BasicTensor<T> f2;
  BasicTensor<T> f3;
  BasicTensor<T> f4;

  std::array<const BasicTensor<T>*, 4> stages() const { return {&f1, &f2, &f3, &f4}; }
  std::size_t total_channels() const { return f1.dim(1) + f2.dim(1) + f3.dim(1) + f4.dim(1); }
  // Shared batch extent and non-increasing spatial extents, each stage at
  // most ceil(previous / 2).
  void validate() const;
};

// Average-pools f1..f3 to f4's spatial size and concatenates f1, f2, f3, f4
// along channels.
template <typename T>
BasicTensor<T> aggregate_stages(const FeaturePyramid<T>& pyramid);

struct DnlConfig {
  std::size_t channels = 0;
  // Adds the input back after the output projection.
  bool residual = true;
};

template <typename T>
struct DnlMaps {
  BasicTensor<T> query;  // N x C/4 x H x W
  BasicTensor<T> key;    // N x C/4 x H x W
  BasicTensor<T> unary;  // N x 1 x H x W
  BasicTensor<T> value;  // N x C x H x W
};

/// Disentangled non-local attention over all positions of one feature map.
///
/// For positions i, j of the same image:
///   w(i, j) = softmax_j((q_i - mu_q) . (k_j - mu_k)) + softmax_j(m_j)
///   y_i     = sum_j w(i, j) v_j
/// with q, k, m, v pointwise convolutions of the input and mu_q, mu_k the
/// per-image means over positions. The result goes through a pointwise
/// output projection and, by default, a residual connection.
template <typename T>
class DnlBlock {
 public:
  DnlBlock() = default;
  explicit DnlBlock(const DnlConfig& config);

  BasicTensor<T> forward(const BasicTensor<T>& x) const;
  DnlMaps<T> transforms(const BasicTensor<T>& x) const;

  std::size_t channels() const { return config_.channels; }
  std::size_t attention_channels() const { return config_.channels / 4; }
  bool residual() const { return config_.residual; }
  void set_residual(bool on) { config_.residual = on; }

  Conv2d<T>& query() { return query_; }
  Conv2d<T>& key() { return key_; }
  Conv2d<T>& unary() { return unary_; }
  Conv2d<T>& value() { return value_; }
  Conv2d<T>& projection() { return proj_; }

  void init_kaiming(Rng& rng);
  void collect(ParameterSet<T>& out, const std::string& prefix);
  Shape count_costs(CostCounter& costs, const std::string& path, const Shape& in) const;

 private:
  DnlConfig config_;
  Conv2d<T> query_;
  Conv2d<T> key_;
  Conv2d<T> unary_;
  Conv2d<T> value_;
  Conv2d<T> proj_;
};

// N x 1 x HW x HW attention weights; row i holds w(i, .) and sums to 2.
template <typename T>
BasicTensor<T> dnl_attention_weights(const BasicTensor<T>& query, const BasicTensor<T>& key,
                                     const BasicTensor<T>& unary);

// Weighted aggregation of value under dnl_attention_weights, N x C x H x W.
template <typename T>
BasicTensor<T> dnl_attend(const DnlMaps<T>& maps);

template <typename T>
BasicTensor<T> dnl_forward(const DnlBlock<T>& block, const BasicTensor<T>& x) {
  return block.forward(x);
}

// Pointwise expand -> depthwise 3x3 -> ReLU -> pointwise reduce, plus the
// input.
template <typename T>
class FfnBlock {
 public:
  FfnBlock() = default;
  FfnBlock(std::size_t channels, std::size_t ratio);

  BasicTensor<T> forward(const BasicTensor<T>& x) const;

  std::size_t channels() const { return expand_.spec().in_channels; }
  std::size_t ratio() const { return ratio_; }
  Conv2d<T>& expand() { return expand_; }
  Conv2d<T>& depthwise() { return depthwise_; }
  Conv2d<T>& reduce() { return reduce_; }

  void init_kaiming(Rng& rng);
  void collect(ParameterSet<T>& out, const std::string& prefix);
  Shape count_costs(CostCounter& costs, const std::string& path, const Shape& in) const;

 private:
  std::size_t ratio_ = 4;
  Conv2d<T> expand_;
  Conv2d<T> depthwise_;
  Conv2d<T> reduce_;
};

template <typename T>
BasicTensor<T> ffn_forward(const FfnBlock<T>& block, const BasicTensor<T>& x) {
  return block.forward(x);
}

struct FrmConfig {
  // Sum of the four stage channel counts.
  std::size_t in_channels = 0;
  std::size_t out_channels = 128;
  std::size_t ffn_ratio = 4;
};

// Feature refinement head: DNL attention, FFN, then a pointwise conv that
// cuts the channel count for the decoder.
template <typename T>
class FrmHead final : public ContextHead<T> {
 public:
  explicit FrmHead(const FrmConfig& config);

  // aggregate_stages followed by forward().
  BasicTensor<T> forward(const FeaturePyramid<T>& pyramid) const;
  BasicTensor<T> refine(const BasicTensor<T>& concat) const;

  BasicTensor<T> forward(const BasicTensor<T>& concat, Mode) override { return refine(concat); }
  std::size_t in_channels() const override { return config_.in_channels; }
  std::size_t out_channels() const override { return config_.out_channels; }
  const char* kind() const override { return "frm"; }

  DnlBlock<T>& dnl() { return dnl_; }
  FfnBlock<T>& ffn() { return ffn_; }
  Conv2d<T>& cut() { return cut_; }

  void init_kaiming(Rng& rng) override;
  void collect(ParameterSet<T>& out, const std::string& prefix) override;
  Shape count_costs(CostCounter& costs, const std::string& path, const Shape& in) const override;

 private:
  FrmConfig config_;
  DnlBlock<T> dnl_;
  FfnBlock<T> ffn_;
  Conv2d<T> cut_;
};

template <typename T>
BasicTensor<T> frm_forward(const FrmHead<T>& head, const FeaturePyramid<T>& pyramid) {
  return head.forward(pyramid);
}

}  // namespace frm
