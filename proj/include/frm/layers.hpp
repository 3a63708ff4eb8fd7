#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "frm/cost.hpp"
#include "frm/ops.hpp"
#include "frm/tensor.hpp"

namespace frm {

using Rng = std::mt19937_64;

enum class Mode { kTraining, kInference };

template <typename T>
struct ParamRef {
  std::string name;
  BasicTensor<T>* tensor = nullptr;
  // Weight decay applies (conv kernels only).
  bool decay = false;
};

// Non-trainable state saved with checkpoints (batch-norm running stats).
template <typename T>
struct BufferRef {
  std::string name;
  std::vector<T>* values = nullptr;
};

template <typename T>
struct ParameterSet {
  std::vector<ParamRef<T>> params;
  std::vector<BufferRef<T>> buffers;

  std::size_t parameter_count() const;
  void zero_grad();
};

// Copies values position by position between two structurally identical
// sets, converting precision.
template <typename Dst, typename Src>
void copy_parameters(ParameterSet<Dst>& dst, const ParameterSet<Src>& src);

std::string join_path(const std::string& prefix, const std::string& name);

struct ConvSpec {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;
  bool bias = true;
};

ConvSpec pointwise(std::size_t in, std::size_t out, bool bias = true);
ConvSpec conv3x3(std::size_t in, std::size_t out, std::size_t stride = 1, bool bias = false);
ConvSpec depthwise3x3(std::size_t channels, bool bias = true);

template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  // Weights and bias start at zero; see init_kaiming.
  explicit Conv2d(const ConvSpec& spec);

  BasicTensor<T> forward(const BasicTensor<T>& x) const;
  Shape output_shape(const Shape& in) const;

  // Normal(0, sqrt(2 / fan_in)) weights, zero bias.
  void init_kaiming(Rng& rng);
  void init_zeros();
  // Sets a pointwise conv to the identity map (in == out required).
  void init_identity();

  const ConvSpec& spec() const { return spec_; }
  BasicTensor<T>& weight() { return weight_; }
  const BasicTensor<T>& weight() const { return weight_; }
  BasicTensor<T>& bias() { return bias_; }
  const BasicTensor<T>& bias() const { return bias_; }
  bool has_bias() const { return spec_.bias; }

  std::size_t parameter_count() const;
  void collect(ParameterSet<T>& out, const std::string& prefix);
  Shape count_costs(CostCounter& costs, const std::string& path, const Shape& in) const;

 private:
  ConvSpec spec_;
  BasicTensor<T> weight_;
  BasicTensor<T> bias_;
};

template <typename T>
class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  explicit BatchNorm2d(std::size_t channels, T eps = T(1e-5), T momentum = T(0.1));

  // Training mode normalizes with batch statistics and folds them into the
  // running estimates; inference mode uses the running estimates.
  BasicTensor<T> forward(const BasicTensor<T>& x, Mode mode);

  std::size_t channels() const { return running_mean_.size(); }
  BasicTensor<T>& gamma() { return gamma_; }
  BasicTensor<T>& beta() { return beta_; }
  std::vector<T>& running_mean() { return running_mean_; }
  std::vector<T>& running_var() { return running_var_; }

  void collect(ParameterSet<T>& out, const std::string& prefix);
  void count_costs(CostCounter& costs, const std::string& path, const Shape& in) const;

 private:
  T eps_ = T(1e-5);
  T momentum_ = T(0.1);
  BasicTensor<T> gamma_;
  BasicTensor<T> beta_;
  std::vector<T> running_mean_;
  std::vector<T> running_var_;
};

// conv -> batch norm -> relu
template <typename T>
class ConvBnRelu {
 public:
  ConvBnRelu() = default;
  explicit ConvBnRelu(const ConvSpec& spec) : conv_(spec), bn_(spec.out_channels) {}

  BasicTensor<T> forward(const BasicTensor<T>& x, Mode mode);
  void init_kaiming(Rng& rng) { conv_.init_kaiming(rng); }
  Conv2d<T>& conv() { return conv_; }
  BatchNorm2d<T>& bn() { return bn_; }

  void collect(ParameterSet<T>& out, const std::string& prefix);
  Shape count_costs(CostCounter& costs, const std::string& path, const Shape& in) const;

 private:
  Conv2d<T> conv_;
  BatchNorm2d<T> bn_;
};

// Elementwise-op cost convention: one op per output element.
inline std::uint64_t elementwise_flops(const Shape& out) { return numel(out); }

}  // namespace frm

namespace frm {

template <typename T>
BasicTensor<T> relu_layer(const BasicTensor<T>& x) {
  return relu(x);
}

// Resize to an explicit size (align_corners = false). Exact on constants.
template <typename T>
BasicTensor<T> bilinear_upsample(const BasicTensor<T>& x, std::size_t out_h, std::size_t out_w) {
  return bilinear_resize(x, out_h, out_w);
}

}  // namespace frm
