#pragma once

#include <string>
#include <vector>

#include "frm/context_head.hpp"
#include "frm/layers.hpp"

// Pyramid-pooling context heads used as ablation baselines. Both take the
// same concatenated multi-stage feature as the FRM head and produce the same
// output width.

namespace frm {

struct PpmConfig {
  std::size_t in_channels = 0;
  std::size_t out_channels = 128;
  std::vector<std::size_t> bins{1, 2, 3, 6};
  // Width of each pooled branch; 0 means in_channels / bins.size().
  std::size_t branch_channels = 0;
  // Shrink bins that exceed the input extent instead of rejecting them.
  bool clamp_bins = false;
};

template <typename T>
class PpmHead final : public ContextHead<T> {
 public:
  explicit PpmHead(const PpmConfig& config);

  BasicTensor<T> forward(const BasicTensor<T>& x, Mode mode = Mode::kInference) override;
  // Pool to bin i, pointwise conv, ReLU, upsample back to x's size.
  BasicTensor<T> branch(const BasicTensor<T>& x, std::size_t i) const;

  std::size_t in_channels() const override { return config_.in_channels; }
  std::size_t out_channels() const override { return config_.out_channels; }
  std::size_t branch_channels() const { return branch_channels_; }
  const char* kind() const override { return "ppm"; }

  Conv2d<T>& branch_conv(std::size_t i) { return branches_.at(i); }
  Conv2d<T>& fusion() { return fusion_; }

  void init_kaiming(Rng& rng) override;
  void collect(ParameterSet<T>& out, const std::string& prefix) override;
  Shape count_costs(CostCounter& costs, const std::string& path, const Shape& in) const override;

 private:
  std::pair<std::size_t, std::size_t> bin_extent(std::size_t bin, std::size_t h, std::size_t w) const;

  PpmConfig config_;
  std::size_t branch_channels_ = 0;
  std::vector<Conv2d<T>> branches_;
  Conv2d<T> fusion_;
};

struct DappmConfig {
  std::size_t in_channels = 0;
  std::size_t out_channels = 128;
  // 0 means in_channels / 4.
  std::size_t branch_channels = 0;
  // Pooled branches at these strides, each pooled to ceil(extent / stride).
  std::vector<std::size_t> strides{2, 4, 8};
  // Adds a final globally pooled branch.
  bool global_branch = true;
};

/// Deep aggregation pyramid pooling: every pooled branch is upsampled,
/// added to the previous branch's output and refined by a 3x3 conv, so the
/// scales are fused hierarchically. All branch outputs are concatenated,
/// compressed by a pointwise conv and added to a pointwise shortcut.
template <typename T>
class DappmHead final : public ContextHead<T> {
 public:
  explicit DappmHead(const DappmConfig& config);

  BasicTensor<T> forward(const BasicTensor<T>& x, Mode mode = Mode::kInference) override;

  std::size_t in_channels() const override { return config_.in_channels; }
  std::size_t out_channels() const override { return config_.out_channels; }
  std::size_t branch_channels() const { return branch_channels_; }
  std::size_t pooled_branches() const { return pooled_.size(); }
  const char* kind() const override { return "dappm"; }

  Conv2d<T>& scale0() { return scale0_; }
  Conv2d<T>& pooled_conv(std::size_t i) { return pooled_.at(i); }
  Conv2d<T>& process(std::size_t i) { return process_.at(i); }
  Conv2d<T>& compression() { return compression_; }
  Conv2d<T>& shortcut() { return shortcut_; }

  void init_kaiming(Rng& rng) override;
  void collect(ParameterSet<T>& out, const std::string& prefix) override;
  Shape count_costs(CostCounter& costs, const std::string& path, const Shape& in) const override;

 private:
  std::pair<std::size_t, std::size_t> pooled_extent(std::size_t branch, std::size_t h, std::size_t w) const;

  DappmConfig config_;
  std::size_t branch_channels_ = 0;
  Conv2d<T> scale0_;
  std::vector<Conv2d<T>> pooled_;
  std::vector<Conv2d<T>> process_;
  Conv2d<T> compression_;
  Conv2d<T> shortcut_;
};

}  // namespace frm
