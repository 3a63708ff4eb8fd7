#include "frm/losses.hpp"

#include <algorithm>
#include <map>

namespace frm {

LabelMap resize_labels_nearest(const LabelMap& labels, std::size_t out_h, std::size_t out_w) {
  if (out_h == 0 || out_w == 0) throw ContractError("resize_labels_nearest: zero output extent");
  LabelMap out(labels.n, out_h, out_w);
  for (std::size_t b = 0; b < labels.n; ++b)
    for (std::size_t y = 0; y < out_h; ++y) {
      const std::size_t sy = y * labels.h / out_h;
      for (std::size_t x = 0; x < out_w; ++x) out.at(b, y, x) = labels.at(b, sy, x * labels.w / out_w);
    }
  return out;
}

void LossConfig::validate() const {
  if (!(tau > 0)) throw ConfigError("contrastive temperature tau must be positive, got " + std::to_string(tau));
  if (!(lambda >= 0)) throw ConfigError("loss weight lambda must be non-negative, got " + std::to_string(lambda));
}

template <typename T>
LossTerm<T> cross_entropy(const BasicTensor<T>& logits, const LabelMap& labels, std::int32_t ignore_index) {
  if (labels.n != logits.dim(0) || labels.h != logits.dim(2) || labels.w != logits.dim(3)) {
    throw DimensionError("cross_entropy: labels " + std::to_string(labels.n) + "x" + std::to_string(labels.h) + "x" +
                         std::to_string(labels.w) + " do not match logits " + to_string(logits.shape()));
  }
  std::size_t count = 0;
  auto value = softmax_cross_entropy(logits, std::span<const std::int32_t>(labels.values), ignore_index, &count);
  return {value, count == 0, count};
}

ContrastiveSample sample_contrastive(const LabelMap& labels, const LossConfig& config, Rng& rng) {
  std::map<std::int32_t, std::vector<PixelIndex>> by_class;
  for (std::size_t b = 0; b < labels.n; ++b)
    for (std::size_t y = 0; y < labels.h; ++y)
      for (std::size_t x = 0; x < labels.w; ++x) {
        const std::int32_t c = labels.at(b, y, x);
        if (c != config.ignore_index) by_class[c].push_back({b, y, x});
      }

  ContrastiveSample sample;
  for (auto& [cls, pixels] : by_class) {
    const std::size_t take = std::min(config.anchors_per_class, pixels.size());
    // Partial Fisher-Yates: the first `take` entries become a uniform draw.
    for (std::size_t i = 0; i < take; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, pixels.size() - 1);
      std::swap(pixels[i], pixels[pick(rng)]);
      sample.pixels.push_back(pixels[i]);
      sample.classes.push_back(cls);
    }
  }

  for (std::size_t a = 0; a < sample.pixels.size(); ++a) {
    ContrastiveTerm term;
    term.anchor = a;
    for (std::size_t j = 0; j < sample.pixels.size(); ++j) {
      if (j == a) continue;
      if (sample.classes[j] == sample.classes[a]) {
        if (term.positives.size() < config.max_positives) term.positives.push_back(j);
      } else if (term.negatives.size() < config.max_negatives) {
        term.negatives.push_back(j);
      }
    }
    if (!term.positives.empty()) sample.terms.push_back(std::move(term));
  }
  return sample;
}

template <typename T>
LossTerm<T> contrastive_loss(const BasicTensor<T>& embeddings, const ContrastiveSample& sample, double tau) {
  if (!(tau > 0)) throw ConfigError("contrastive temperature tau must be positive, got " + std::to_string(tau));
  if (sample.terms.empty()) {
    // Keep the graph connected so callers can always backpropagate.
    return {scale(sum(embeddings), T{0}), true, 0};
  }
  auto rows = l2_normalize_channels(reshape(gather_pixels(embeddings, sample.pixels),
                                            Shape{sample.pixels.size(), embeddings.dim(1), 1, 1}));
  auto matrix = reshape(rows, Shape{1, 1, sample.pixels.size(), embeddings.dim(1)});
  auto sim = scale(matmul(matrix, transpose(matrix)), static_cast<T>(1.0 / tau));
  return {contrastive_from_similarity(sim, sample.terms), false, sample.terms.size()};
}

template <typename T>
LossTerm<T> contrastive_loss(const BasicTensor<T>& embeddings, const LabelMap& labels, const LossConfig& config,
                             Rng& rng) {
  config.validate();
  const LabelMap small = (labels.h == embeddings.dim(2) && labels.w == embeddings.dim(3))
                             ? labels
                             : resize_labels_nearest(labels, embeddings.dim(2), embeddings.dim(3));
  if (small.n != embeddings.dim(0)) throw DimensionError("contrastive_loss: batch mismatch between labels and embeddings");
  return contrastive_loss(embeddings, sample_contrastive(small, config, rng), config.tau);
}

template <typename T>
LossReport<T> combine_losses(const LossTerm<T>& ce, const LossTerm<T>& cl, double lambda) {
  LossReport<T> report;
  report.ce = ce.value;
  report.cl = cl.value;
  report.total = add(ce.value, scale(cl.value, static_cast<T>(lambda)));
  report.ce_empty = ce.empty;
  report.cl_empty = cl.empty;
  report.anchors = cl.count;
  return report;
}

template <typename T>
LossReport<T> hybrid_loss(const BasicTensor<T>& logits, const BasicTensor<T>& embeddings, const LabelMap& labels,
                          const LossConfig& config, Rng& rng) {
  config.validate();
  auto ce = cross_entropy(logits, labels, config.ignore_index);
  auto cl = contrastive_loss(embeddings, labels, config, rng);
  return combine_losses(ce, cl, config.lambda);
}

#define FRM_INSTANTIATE_LOSSES(T)                                                                          \
  template LossTerm<T> cross_entropy(const BasicTensor<T>&, const LabelMap&, std::int32_t);                \
  template LossTerm<T> contrastive_loss(const BasicTensor<T>&, const ContrastiveSample&, double);          \
  template LossTerm<T> contrastive_loss(const BasicTensor<T>&, const LabelMap&, const LossConfig&, Rng&);  \
  template LossReport<T> combine_losses(const LossTerm<T>&, const LossTerm<T>&, double);                   \
  template LossReport<T> hybrid_loss(const BasicTensor<T>&, const BasicTensor<T>&, const LabelMap&,        \
                                     const LossConfig&, Rng&);

FRM_INSTANTIATE_LOSSES(float)
FRM_INSTANTIATE_LOSSES(double)

#undef FRM_INSTANTIATE_LOSSES

}  // namespace frm
