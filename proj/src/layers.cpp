#include "frm/layers.hpp"

#include <cmath>

namespace frm {

template <typename T>
std::size_t ParameterSet<T>::parameter_count() const {
  std::size_t total = 0;
  for (const auto& p : params) total += p.tensor->numel();
  return total;
}

template <typename T>
void ParameterSet<T>::zero_grad() {
  for (auto& p : params) p.tensor->zero_grad();
}

template <typename Dst, typename Src>
void copy_parameters(ParameterSet<Dst>& dst, const ParameterSet<Src>& src) {
  if (dst.params.size() != src.params.size() || dst.buffers.size() != src.buffers.size()) {
    throw DimensionError("copy_parameters: parameter sets differ in structure");
  }
  for (std::size_t i = 0; i < src.params.size(); ++i) {
    const auto& s = *src.params[i].tensor;
    auto& d = *dst.params[i].tensor;
    if (s.shape() != d.shape()) {
      throw DimensionError("copy_parameters: " + src.params[i].name + " " + to_string(s.shape()) + " vs " +
                           to_string(d.shape()));
    }
    auto out = d.mutable_data();
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = static_cast<Dst>(s.data()[k]);
  }
  for (std::size_t i = 0; i < src.buffers.size(); ++i) {
    const auto& s = *src.buffers[i].values;
    auto& d = *dst.buffers[i].values;
    if (s.size() != d.size()) throw DimensionError("copy_parameters: buffer " + src.buffers[i].name + " size differs");
    for (std::size_t k = 0; k < s.size(); ++k) d[k] = static_cast<Dst>(s[k]);
  }
}

std::string join_path(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

ConvSpec pointwise(std::size_t in, std::size_t out, bool bias) {
  return ConvSpec{in, out, 1, 1, 0, 1, bias};
}

ConvSpec conv3x3(std::size_t in, std::size_t out, std::size_t stride, bool bias) {
  return ConvSpec{in, out, 3, stride, 1, 1, bias};
}

ConvSpec depthwise3x3(std::size_t channels, bool bias) {
  return ConvSpec{channels, channels, 3, 1, 1, channels, bias};
}

template <typename T>
Conv2d<T>::Conv2d(const ConvSpec& spec) : spec_(spec) {
  if (spec.in_channels == 0 || spec.out_channels == 0 || spec.kernel == 0 || spec.stride == 0) {
    throw ConfigError("conv: channels, kernel and stride must be positive");
  }
  if (spec.groups == 0 || spec.in_channels % spec.groups != 0 || spec.out_channels % spec.groups != 0) {
    throw ConfigError("conv: groups " + std::to_string(spec.groups) + " must divide " +
                      std::to_string(spec.in_channels) + " and " + std::to_string(spec.out_channels));
  }
  weight_ = BasicTensor<T>(Shape{spec.out_channels, spec.in_channels / spec.groups, spec.kernel, spec.kernel});
  weight_.set_requires_grad();
  if (spec.bias) {
    bias_ = BasicTensor<T>(Shape{1, spec.out_channels, 1, 1});
    bias_.set_requires_grad();
  }
}

template <typename T>
BasicTensor<T> Conv2d<T>::forward(const BasicTensor<T>& x) const {
  if (x.dim(1) != spec_.in_channels) {
    throw DimensionError("conv: expected " + std::to_string(spec_.in_channels) + " input channels, got " +
                         to_string(x.shape()));
  }
  return conv2d(x, weight_, spec_.bias ? &bias_ : nullptr, Conv2dParams{spec_.stride, spec_.padding, spec_.groups});
}

template <typename T>
Shape Conv2d<T>::output_shape(const Shape& in) const {
  return Shape{in[0], spec_.out_channels, conv_output_extent(in[2], spec_.kernel, spec_.stride, spec_.padding),
               conv_output_extent(in[3], spec_.kernel, spec_.stride, spec_.padding)};
}

template <typename T>
void Conv2d<T>::init_kaiming(Rng& rng) {
  const double fan_in = static_cast<double>(spec_.in_channels / spec_.groups * spec_.kernel * spec_.kernel);
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  for (T& w : weight_.mutable_data()) w = static_cast<T>(dist(rng));
  if (spec_.bias) {
    for (T& b : bias_.mutable_data()) b = T{0};
  }
}

template <typename T>
void Conv2d<T>::init_zeros() {
  for (T& w : weight_.mutable_data()) w = T{0};
  if (spec_.bias) {
    for (T& b : bias_.mutable_data()) b = T{0};
  }
}

template <typename T>
void Conv2d<T>::init_identity() {
  if (spec_.kernel != 1 || spec_.groups != 1 || spec_.in_channels != spec_.out_channels) {
    throw ContractError("init_identity needs a square pointwise conv");
  }
  init_zeros();
  auto w = weight_.mutable_data();
  for (std::size_t c = 0; c < spec_.in_channels; ++c) w[c * spec_.in_channels + c] = T{1};
}

template <typename T>
std::size_t Conv2d<T>::parameter_count() const {
  return weight_.numel() + (spec_.bias ? bias_.numel() : 0);
}

template <typename T>
void Conv2d<T>::collect(ParameterSet<T>& out, const std::string& prefix) {
  out.params.push_back({join_path(prefix, "weight"), &weight_, true});
  if (spec_.bias) out.params.push_back({join_path(prefix, "bias"), &bias_, false});
}

template <typename T>
Shape Conv2d<T>::count_costs(CostCounter& costs, const std::string& path, const Shape& in) const {
  const Shape out = output_shape(in);
  const std::uint64_t pixels = out[0] * out[2] * out[3];
  std::uint64_t flops = 2 * pixels * spec_.out_channels * (spec_.in_channels / spec_.groups) * spec_.kernel *
                        spec_.kernel;
  if (spec_.bias) flops += pixels * spec_.out_channels;
  costs.add(path, parameter_count(), flops);
  return out;
}

template <typename T>
BatchNorm2d<T>::BatchNorm2d(std::size_t channels, T eps, T momentum)
    : eps_(eps),
      momentum_(momentum),
      gamma_(Shape{1, channels, 1, 1}, T{1}),
      beta_(Shape{1, channels, 1, 1}, T{0}),
      running_mean_(channels, T{0}),
      running_var_(channels, T{1}) {
  gamma_.set_requires_grad();
  beta_.set_requires_grad();
}

template <typename T>
BasicTensor<T> BatchNorm2d<T>::forward(const BasicTensor<T>& x, Mode mode) {
  if (mode == Mode::kInference) return batch_norm_eval(x, gamma_, beta_, running_mean_, running_var_, eps_);
  std::vector<T> batch_mean;
  std::vector<T> batch_var;
  auto y = batch_norm_train(x, gamma_, beta_, eps_, &batch_mean, &batch_var);
  const T count = static_cast<T>(x.dim(0) * x.dim(2) * x.dim(3));
  for (std::size_t c = 0; c < running_mean_.size(); ++c) {
    const T unbiased = batch_var[c] * count / (count - T{1});
    running_mean_[c] = (T{1} - momentum_) * running_mean_[c] + momentum_ * batch_mean[c];
    running_var_[c] = (T{1} - momentum_) * running_var_[c] + momentum_ * unbiased;
  }
  return y;
}

template <typename T>
void BatchNorm2d<T>::collect(ParameterSet<T>& out, const std::string& prefix) {
  out.params.push_back({join_path(prefix, "gamma"), &gamma_, false});
  out.params.push_back({join_path(prefix, "beta"), &beta_, false});
  out.buffers.push_back({join_path(prefix, "running_mean"), &running_mean_});
  out.buffers.push_back({join_path(prefix, "running_var"), &running_var_});
}

template <typename T>
void BatchNorm2d<T>::count_costs(CostCounter& costs, const std::string& path, const Shape& in) const {
  costs.add(path, gamma_.numel() + beta_.numel(), elementwise_flops(in));
}

template <typename T>
BasicTensor<T> ConvBnRelu<T>::forward(const BasicTensor<T>& x, Mode mode) {
  return relu(bn_.forward(conv_.forward(x), mode));
}

template <typename T>
void ConvBnRelu<T>::collect(ParameterSet<T>& out, const std::string& prefix) {
  conv_.collect(out, join_path(prefix, "conv"));
  bn_.collect(out, join_path(prefix, "bn"));
}

template <typename T>
Shape ConvBnRelu<T>::count_costs(CostCounter& costs, const std::string& path, const Shape& in) const {
  const Shape out = conv_.count_costs(costs, join_path(path, "conv"), in);
  bn_.count_costs(costs, join_path(path, "bn"), out);
  costs.add(join_path(path, "relu"), 0, elementwise_flops(out));
  return out;
}

template struct ParameterSet<float>;
template struct ParameterSet<double>;
template void copy_parameters(ParameterSet<float>&, const ParameterSet<float>&);
template void copy_parameters(ParameterSet<double>&, const ParameterSet<float>&);
template void copy_parameters(ParameterSet<float>&, const ParameterSet<double>&);
template void copy_parameters(ParameterSet<double>&, const ParameterSet<double>&);
template class Conv2d<float>;
template class Conv2d<double>;
template class BatchNorm2d<float>;
template class BatchNorm2d<double>;
template class ConvBnRelu<float>;
template class ConvBnRelu<double>;

}  // namespace frm
