#include "frm/baselines.hpp"

#include <algorithm>

namespace frm {

template <typename T>
PpmHead<T>::PpmHead(const PpmConfig& config) : config_(config) {
  if (config.bins.empty()) throw ConfigError("PPM needs at least one bin");
  if (std::find(config.bins.begin(), config.bins.end(), std::size_t{0}) != config.bins.end()) {
    throw ConfigError("PPM bin sizes must be positive");
  }
  branch_channels_ = config.branch_channels ? config.branch_channels : config.in_channels / config.bins.size();
  if (branch_channels_ == 0) throw ConfigError("PPM branch width resolves to zero");
  for (std::size_t i = 0; i < config.bins.size(); ++i) {
    branches_.emplace_back(pointwise(config.in_channels, branch_channels_));
  }
  fusion_ = Conv2d<T>(pointwise(config.in_channels + branch_channels_ * config.bins.size(), config.out_channels));
}

template <typename T>
std::pair<std::size_t, std::size_t> PpmHead<T>::bin_extent(std::size_t bin, std::size_t h, std::size_t w) const {
  if (config_.clamp_bins) return {std::min(bin, h), std::min(bin, w)};
  if (bin > h || bin > w) {
    throw ContractError("PPM bin " + std::to_string(bin) + " exceeds input extent " + std::to_string(h) + "x" +
                        std::to_string(w));
  }
  return {bin, bin};
}

template <typename T>
BasicTensor<T> PpmHead<T>::branch(const BasicTensor<T>& x, std::size_t i) const {
  const std::size_t h = x.dim(2);
  const std::size_t w = x.dim(3);
  const auto [bh, bw] = bin_extent(config_.bins.at(i), h, w);
  auto pooled = relu(branches_.at(i).forward(adaptive_avg_pool(x, bh, bw)));
  return bilinear_upsample(pooled, h, w);
}

template <typename T>
BasicTensor<T> PpmHead<T>::forward(const BasicTensor<T>& x, Mode) {
  if (x.dim(1) != config_.in_channels) {
    throw DimensionError("PPM expects " + std::to_string(config_.in_channels) + " channels, got " +
                         to_string(x.shape()));
  }
  std::vector<BasicTensor<T>> parts{x};
  for (std::size_t i = 0; i < branches_.size(); ++i) parts.push_back(branch(x, i));
  return fusion_.forward(concat_channels(parts));
}

template <typename T>
void PpmHead<T>::init_kaiming(Rng& rng) {
  for (auto& b : branches_) b.init_kaiming(rng);
  fusion_.init_kaiming(rng);
}

template <typename T>
void PpmHead<T>::collect(ParameterSet<T>& out, const std::string& prefix) {
  for (std::size_t i = 0; i < branches_.size(); ++i) {
    branches_[i].collect(out, join_path(prefix, "branch" + std::to_string(i)));
  }
  fusion_.collect(out, join_path(prefix, "fusion"));
}

template <typename T>
Shape PpmHead<T>::count_costs(CostCounter& costs, const std::string& path, const Shape& in) const {
  const Shape up{in[0], branch_channels_, in[2], in[3]};
  for (std::size_t i = 0; i < branches_.size(); ++i) {
    const std::string name = join_path(path, "branch" + std::to_string(i));
    const auto [bh, bw] = bin_extent(config_.bins[i], in[2], in[3]);
    const Shape pooled{in[0], in[1], bh, bw};
    costs.add(join_path(name, "pool"), 0, elementwise_flops(pooled));
    const Shape s = branches_[i].count_costs(costs, join_path(name, "conv"), pooled);
    costs.add(join_path(name, "relu"), 0, elementwise_flops(s));
    costs.add(join_path(name, "upsample"), 0, elementwise_flops(up));
  }
  const Shape cat{in[0], in[1] + branch_channels_ * branches_.size(), in[2], in[3]};
  return fusion_.count_costs(costs, join_path(path, "fusion"), cat);
}

template <typename T>
DappmHead<T>::DappmHead(const DappmConfig& config) : config_(config) {
  if (std::find(config.strides.begin(), config.strides.end(), std::size_t{0}) != config.strides.end()) {
    throw ConfigError("DAPPM strides must be positive");
  }
  branch_channels_ = config.branch_channels ? config.branch_channels : config.in_channels / 4;
  if (branch_channels_ == 0) throw ConfigError("DAPPM branch width resolves to zero");
  const std::size_t c = config.in_channels;
  const std::size_t b = branch_channels_;
  scale0_ = Conv2d<T>(pointwise(c, b));
  const std::size_t count = config.strides.size() + (config.global_branch ? 1 : 0);
  for (std::size_t i = 0; i < count; ++i) {
    pooled_.emplace_back(pointwise(c, b));
    process_.emplace_back(conv3x3(b, b, 1, true));
  }
  compression_ = Conv2d<T>(pointwise(b * (count + 1), config.out_channels));
  shortcut_ = Conv2d<T>(pointwise(c, config.out_channels));
}

template <typename T>
std::pair<std::size_t, std::size_t> DappmHead<T>::pooled_extent(std::size_t branch, std::size_t h,
                                                                std::size_t w) const {
  if (branch >= config_.strides.size()) return {1, 1};
  const std::size_t s = config_.strides[branch];
  return {(h + s - 1) / s, (w + s - 1) / s};
}

template <typename T>
BasicTensor<T> DappmHead<T>::forward(const BasicTensor<T>& x, Mode) {
  if (x.dim(1) != config_.in_channels) {
    throw DimensionError("DAPPM expects " + std::to_string(config_.in_channels) + " channels, got " +
                         to_string(x.shape()));
  }
  const std::size_t h = x.dim(2);
  const std::size_t w = x.dim(3);
  std::vector<BasicTensor<T>> outputs{scale0_.forward(x)};
  for (std::size_t i = 0; i < pooled_.size(); ++i) {
    const auto [ph, pw] = pooled_extent(i, h, w);
    auto scaled = bilinear_upsample(pooled_[i].forward(adaptive_avg_pool(x, ph, pw)), h, w);
    outputs.push_back(relu(process_[i].forward(add(scaled, outputs.back()))));
  }
  return add(compression_.forward(concat_channels(outputs)), shortcut_.forward(x));
}

template <typename T>
void DappmHead<T>::init_kaiming(Rng& rng) {
  scale0_.init_kaiming(rng);
  for (std::size_t i = 0; i < pooled_.size(); ++i) {
    pooled_[i].init_kaiming(rng);
    process_[i].init_kaiming(rng);
  }
  compression_.init_kaiming(rng);
  shortcut_.init_kaiming(rng);
}

template <typename T>
void DappmHead<T>::collect(ParameterSet<T>& out, const std::string& prefix) {
  scale0_.collect(out, join_path(prefix, "scale0"));
  for (std::size_t i = 0; i < pooled_.size(); ++i) {
    pooled_[i].collect(out, join_path(prefix, "scale" + std::to_string(i + 1)));
    process_[i].collect(out, join_path(prefix, "process" + std::to_string(i + 1)));
  }
  compression_.collect(out, join_path(prefix, "compression"));
  shortcut_.collect(out, join_path(prefix, "shortcut"));
}

template <typename T>
Shape DappmHead<T>::count_costs(CostCounter& costs, const std::string& path, const Shape& in) const {
  const Shape branch = scale0_.count_costs(costs, join_path(path, "scale0"), in);
  for (std::size_t i = 0; i < pooled_.size(); ++i) {
    const std::string name = join_path(path, "scale" + std::to_string(i + 1));
    const auto [ph, pw] = pooled_extent(i, in[2], in[3]);
    const Shape pooled{in[0], in[1], ph, pw};
    costs.add(join_path(name, "pool"), 0, elementwise_flops(pooled));
    pooled_[i].count_costs(costs, join_path(name, "conv"), pooled);
    costs.add(join_path(name, "upsample"), 0, elementwise_flops(branch));
    const std::string proc = join_path(path, "process" + std::to_string(i + 1));
    costs.add(join_path(proc, "add"), 0, elementwise_flops(branch));
    process_[i].count_costs(costs, join_path(proc, "conv"), branch);
    costs.add(join_path(proc, "relu"), 0, elementwise_flops(branch));
  }
  const Shape cat{in[0], branch[1] * (pooled_.size() + 1), in[2], in[3]};
  const Shape out = compression_.count_costs(costs, join_path(path, "compression"), cat);
  shortcut_.count_costs(costs, join_path(path, "shortcut"), in);
  costs.add(join_path(path, "add"), 0, elementwise_flops(out));
  return out;
}

template class PpmHead<float>;
template class PpmHead<double>;
template class DappmHead<float>;
template class DappmHead<double>;

}  // namespace frm
