#pragma once

#include <cstdint>
#include <vector>

#include "frm/layers.hpp"
#include "frm/ops.hpp"

namespace frm {

inline constexpr std::int32_t kIgnoreIndex = 255;

// Integer class map in N, H, W order.
struct LabelMap {
  std::size_t n = 0;
  std::size_t h = 0;
  std::size_t w = 0;
  std::vector<std::int32_t> values;

  LabelMap() = default;
  LabelMap(std::size_t n_, std::size_t h_, std::size_t w_, std::int32_t fill = 0)
      : n(n_), h(h_), w(w_), values(n_ * h_ * w_, fill) {}

  std::int32_t& at(std::size_t b, std::size_t y, std::size_t x) { return values[(b * h + y) * w + x]; }
  std::int32_t at(std::size_t b, std::size_t y, std::size_t x) const { return values[(b * h + y) * w + x]; }
};

// Nearest-neighbour resampling: output (y, x) reads floor(y * h / out_h),
// floor(x * w / out_w).
LabelMap resize_labels_nearest(const LabelMap& labels, std::size_t out_h, std::size_t out_w);

struct LossConfig {
  double lambda = 1.0;
  double tau = 0.1;
  std::int32_t ignore_index = kIgnoreIndex;
  std::size_t anchors_per_class = 16;
  std::size_t max_positives = 16;
  std::size_t max_negatives = 64;

  void validate() const;
};

template <typename T>
struct LossTerm {
  BasicTensor<T> value;
  // No pixel (or anchor) contributed; value is 0.
  bool empty = false;
  std::size_t count = 0;
};

template <typename T>
LossTerm<T> cross_entropy(const BasicTensor<T>& logits, const LabelMap& labels,
                          std::int32_t ignore_index = kIgnoreIndex);

// Pixels drawn for the contrastive term plus, per anchor, the row indices of
// its positives and negatives within `pixels`.
struct ContrastiveSample {
  std::vector<PixelIndex> pixels;
  std::vector<std::int32_t> classes;
  std::vector<ContrastiveTerm> terms;
};

// Up to anchors_per_class random pixels of every present class (pooled over
// the batch). Each sampled pixel is an anchor; its positives are the other
// sampled pixels of its class, its negatives the sampled pixels of other
// classes, capped by max_positives / max_negatives. Anchors with no
// positive are dropped. labels must already be at embedding resolution.
ContrastiveSample sample_contrastive(const LabelMap& labels, const LossConfig& config, Rng& rng);

// Supervised pixel contrastive loss on L2-normalized embeddings over an
// explicit sample. Similarities are scaled by 1/tau.
template <typename T>
LossTerm<T> contrastive_loss(const BasicTensor<T>& embeddings, const ContrastiveSample& sample, double tau);

// Resizes labels to the embedding grid, samples, and evaluates.
template <typename T>
LossTerm<T> contrastive_loss(const BasicTensor<T>& embeddings, const LabelMap& labels, const LossConfig& config,
                             Rng& rng);

template <typename T>
struct LossReport {
  BasicTensor<T> total;
  BasicTensor<T> ce;
  BasicTensor<T> cl;
  bool ce_empty = false;
  bool cl_empty = false;
  std::size_t anchors = 0;

  double total_value() const { return static_cast<double>(total.item()); }
  double ce_value() const { return static_cast<double>(ce.item()); }
  double cl_value() const { return static_cast<double>(cl.item()); }
};

// total = ce + lambda * cl
template <typename T>
LossReport<T> combine_losses(const LossTerm<T>& ce, const LossTerm<T>& cl, double lambda);

template <typename T>
LossReport<T> hybrid_loss(const BasicTensor<T>& logits, const BasicTensor<T>& embeddings, const LabelMap& labels,
                          const LossConfig& config, Rng& rng);

}  // namespace frm
