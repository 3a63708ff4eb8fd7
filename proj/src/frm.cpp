#include "frm/frm.hpp"

namespace frm {

template <typename T>
void FeaturePyramid<T>::validate() const {
  const auto all = stages();
  for (const auto* s : all) {
    if (!s->defined()) throw ContractError("feature pyramid has an empty stage");
    if (s->dim(0) != f1.dim(0)) {
      throw DimensionError("feature pyramid batch mismatch: " + to_string(f1.shape()) + " vs " + to_string(s->shape()));
    }
  }
  for (std::size_t k = 1; k < all.size(); ++k) {
    for (int axis : {2, 3}) {
      const std::size_t prev = all[k - 1]->dim(axis);
      const std::size_t cur = all[k]->dim(axis);
      if (cur == 0 || (cur != prev / 2 && cur != (prev + 1) / 2)) {
        throw ContractError("feature pyramid stage " + std::to_string(k + 1) + " " + to_string(all[k]->shape()) +
                            " is not half of stage " + std::to_string(k) + " " + to_string(all[k - 1]->shape()));
      }
    }
  }
}

template <typename T>
BasicTensor<T> aggregate_stages(const FeaturePyramid<T>& pyramid) {
  pyramid.validate();
  const std::size_t h = pyramid.f4.dim(2);
  const std::size_t w = pyramid.f4.dim(3);
  return concat_channels<T>({adaptive_avg_pool(pyramid.f1, h, w), adaptive_avg_pool(pyramid.f2, h, w),
                             adaptive_avg_pool(pyramid.f3, h, w), pyramid.f4});
}

template <typename T>
DnlBlock<T>::DnlBlock(const DnlConfig& config) : config_(config) {
  if (config.channels / 4 < 1) {
    throw ConfigError("DNL block needs at least 4 channels, got " + std::to_string(config.channels));
  }
  const std::size_t c = config.channels;
  query_ = Conv2d<T>(pointwise(c, c / 4));
  key_ = Conv2d<T>(pointwise(c, c / 4));
  unary_ = Conv2d<T>(pointwise(c, 1));
  value_ = Conv2d<T>(pointwise(c, c));
  proj_ = Conv2d<T>(pointwise(c, c));
}

template <typename T>
DnlMaps<T> DnlBlock<T>::transforms(const BasicTensor<T>& x) const {
  if (x.dim(1) != config_.channels) {
    throw DimensionError("DNL block configured for " + std::to_string(config_.channels) + " channels, got " +
                         to_string(x.shape()));
  }
  return {query_.forward(x), key_.forward(x), unary_.forward(x), value_.forward(x)};
}

template <typename T>
BasicTensor<T> dnl_attention_weights(const BasicTensor<T>& query, const BasicTensor<T>& key,
                                     const BasicTensor<T>& unary) {
  const Shape& qs = query.shape();
  if (key.shape() != qs) throw DimensionError("DNL query " + to_string(qs) + " and key " + to_string(key.shape()));
  if (unary.dim(0) != qs[0] || unary.dim(1) != 1 || unary.dim(2) != qs[2] || unary.dim(3) != qs[3]) {
    throw DimensionError("DNL unary map " + to_string(unary.shape()) + " does not match " + to_string(qs));
  }
  const std::size_t n = qs[0];
  const std::size_t positions = qs[2] * qs[3];
  // Rows are channels, columns positions; whitening removes the per-image
  // mean over positions.
  auto q = reshape(query, Shape{n, 1, qs[1], positions});
  auto k = reshape(key, Shape{n, 1, qs[1], positions});
  q = sub(q, mean_axis(q, 3));
  k = sub(k, mean_axis(k, 3));
  auto pairwise = softmax(matmul(transpose(q), k), 3);
  auto saliency = softmax(reshape(unary, Shape{n, 1, 1, positions}), 3);
  return add(pairwise, saliency);
}

template <typename T>
BasicTensor<T> dnl_attend(const DnlMaps<T>& maps) {
  const Shape& vs = maps.value.shape();
  const std::size_t positions = vs[2] * vs[3];
  auto weights = dnl_attention_weights(maps.query, maps.key, maps.unary);
  auto v = reshape(maps.value, Shape{vs[0], 1, vs[1], positions});
  // y[c, i] = sum_j v[c, j] w[i, j]
  return reshape(matmul(v, transpose(weights)), vs);
}

template <typename T>
BasicTensor<T> DnlBlock<T>::forward(const BasicTensor<T>& x) const {
  auto y = proj_.forward(dnl_attend(transforms(x)));
  return config_.residual ? add(x, y) : y;
}

template <typename T>
void DnlBlock<T>::init_kaiming(Rng& rng) {
  for (Conv2d<T>* conv : {&query_, &key_, &unary_, &value_, &proj_}) conv->init_kaiming(rng);
}

template <typename T>
void DnlBlock<T>::collect(ParameterSet<T>& out, const std::string& prefix) {
  query_.collect(out, join_path(prefix, "query"));
  key_.collect(out, join_path(prefix, "key"));
  unary_.collect(out, join_path(prefix, "unary"));
  value_.collect(out, join_path(prefix, "value"));
  proj_.collect(out, join_path(prefix, "proj"));
}

template <typename T>
Shape DnlBlock<T>::count_costs(CostCounter& costs, const std::string& path, const Shape& in) const {
  const Shape qs = query_.count_costs(costs, join_path(path, "query"), in);
  key_.count_costs(costs, join_path(path, "key"), in);
  unary_.count_costs(costs, join_path(path, "unary"), in);
  const Shape vs = value_.count_costs(costs, join_path(path, "value"), in);
  const std::uint64_t n = in[0];
  const std::uint64_t hw = in[2] * in[3];
  const std::uint64_t ca = qs[1];
  const std::uint64_t c = vs[1];
  std::uint64_t flops = 0;
  flops += 2 * 2 * n * ca * hw;      // whitening of q and k: mean + subtract
  flops += 2 * n * hw * hw * ca;     // pairwise logits
  flops += n * hw * hw;              // pairwise softmax
  flops += n * hw;                   // unary softmax
  flops += n * hw * hw;              // pairwise + unary
  flops += 2 * n * c * hw * hw;      // weighted sum of values
  costs.add(join_path(path, "attention"), 0, flops);
  const Shape out = proj_.count_costs(costs, join_path(path, "proj"), vs);
  if (config_.residual) costs.add(join_path(path, "residual"), 0, elementwise_flops(out));
  return out;
}

template <typename T>
FfnBlock<T>::FfnBlock(std::size_t channels, std::size_t ratio)
    : ratio_(ratio),
      expand_(pointwise(channels, channels * ratio)),
      depthwise_(depthwise3x3(channels * ratio)),
      reduce_(pointwise(channels * ratio, channels)) {
  if (ratio == 0) throw ConfigError("FFN expansion ratio must be positive");
}

template <typename T>
BasicTensor<T> FfnBlock<T>::forward(const BasicTensor<T>& x) const {
  auto hidden = relu(depthwise_.forward(expand_.forward(x)));
  return add(x, reduce_.forward(hidden));
}

template <typename T>
void FfnBlock<T>::init_kaiming(Rng& rng) {
  expand_.init_kaiming(rng);
  depthwise_.init_kaiming(rng);
  reduce_.init_kaiming(rng);
}

template <typename T>
void FfnBlock<T>::collect(ParameterSet<T>& out, const std::string& prefix) {
  expand_.collect(out, join_path(prefix, "expand"));
  depthwise_.collect(out, join_path(prefix, "depthwise"));
  reduce_.collect(out, join_path(prefix, "reduce"));
}

template <typename T>
Shape FfnBlock<T>::count_costs(CostCounter& costs, const std::string& path, const Shape& in) const {
  Shape s = expand_.count_costs(costs, join_path(path, "expand"), in);
  s = depthwise_.count_costs(costs, join_path(path, "depthwise"), s);
  costs.add(join_path(path, "relu"), 0, elementwise_flops(s));
  s = reduce_.count_costs(costs, join_path(path, "reduce"), s);
  costs.add(join_path(path, "residual"), 0, elementwise_flops(s));
  return s;
}

template <typename T>
FrmHead<T>::FrmHead(const FrmConfig& config)
    : config_(config),
      dnl_(DnlConfig{config.in_channels, true}),
      ffn_(config.in_channels, config.ffn_ratio),
      cut_(pointwise(config.in_channels, config.out_channels)) {}

template <typename T>
BasicTensor<T> FrmHead<T>::forward(const FeaturePyramid<T>& pyramid) const {
  return refine(aggregate_stages(pyramid));
}

template <typename T>
BasicTensor<T> FrmHead<T>::refine(const BasicTensor<T>& concat) const {
  return cut_.forward(ffn_.forward(dnl_.forward(concat)));
}

template <typename T>
void FrmHead<T>::init_kaiming(Rng& rng) {
  dnl_.init_kaiming(rng);
  ffn_.init_kaiming(rng);
  cut_.init_kaiming(rng);
}

template <typename T>
void FrmHead<T>::collect(ParameterSet<T>& out, const std::string& prefix) {
  dnl_.collect(out, join_path(prefix, "dnl"));
  ffn_.collect(out, join_path(prefix, "ffn"));
  cut_.collect(out, join_path(prefix, "cut"));
}

template <typename T>
Shape FrmHead<T>::count_costs(CostCounter& costs, const std::string& path, const Shape& in) const {
  Shape s = dnl_.count_costs(costs, join_path(path, "dnl"), in);
  s = ffn_.count_costs(costs, join_path(path, "ffn"), s);
  return cut_.count_costs(costs, join_path(path, "cut"), s);
}

template struct FeaturePyramid<float>;
template struct FeaturePyramid<double>;
template BasicTensor<float> aggregate_stages(const FeaturePyramid<float>&);
template BasicTensor<double> aggregate_stages(const FeaturePyramid<double>&);
template BasicTensor<float> dnl_attention_weights(const BasicTensor<float>&, const BasicTensor<float>&,
                                                  const BasicTensor<float>&);
template BasicTensor<double> dnl_attention_weights(const BasicTensor<double>&, const BasicTensor<double>&,
                                                   const BasicTensor<double>&);
template BasicTensor<float> dnl_attend(const DnlMaps<float>&);
template BasicTensor<double> dnl_attend(const DnlMaps<double>&);
template class DnlBlock<float>;
template class DnlBlock<double>;
template class FfnBlock<float>;
template class FfnBlock<double>;
template class FrmHead<float>;
template class FrmHead<double>;

}  // namespace frm
