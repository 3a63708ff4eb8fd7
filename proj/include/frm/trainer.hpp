#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "frm/config.hpp"
#include "frm/datagen.hpp"
#include "frm/layers.hpp"
#include "frm/losses.hpp"
#include "frm/model.hpp"

namespace frm {

struct SgdConfig {
  double lr0 = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
};

// SGD with momentum and L2 weight decay folded into the gradient:
//   v <- momentum * v + g + weight_decay * p
//   p <- p - lr * v
// Decay applies only to parameters flagged for it (conv kernels).
template <typename T>
class Sgd {
 public:
  explicit Sgd(const SgdConfig& config) : config_(config) {}

  void step(ParameterSet<T>& params, double lr);

  const SgdConfig& config() const { return config_; }
  // One buffer per parameter, allocated on the first step.
  std::vector<std::vector<T>>& buffers() { return buffers_; }

 private:
  SgdConfig config_;
  std::vector<std::vector<T>> buffers_;
};

// lr0 * (1 - iter / total)^power
double poly_lr(double lr0, std::size_t iteration, std::size_t total, double power);

struct TrainSchedule {
  std::size_t total = 1000;
  double power = 0.9;
  std::size_t iteration = 0;
  double lr0 = 0.01;

  double lr() const { return poly_lr(lr0, iteration, total, power); }
};

struct SegSample {
  Tensor image;  // 1 x 3 x H x W
  LabelMap labels;
};

std::vector<SegSample> split_batch(const SegBatch& batch);
SegBatch stack_samples(const std::vector<SegSample>& samples);

std::vector<SegSample> load_samples(const std::filesystem::path& dir, const std::vector<std::size_t>& indices);

// The last `holdout` images of a generated dataset are held out; the rest
// are for training.
struct DatasetSplit {
  DatasetManifest manifest;
  std::vector<SegSample> train;
  std::vector<SegSample> holdout;
};
DatasetSplit load_split(const std::filesystem::path& dir, std::size_t holdout);

struct AugmentConfig {
  std::size_t crop_h = 64;
  std::size_t crop_w = 64;
  double min_scale = 0.5;
  double max_scale = 2.0;
  double flip_probability = 0.5;
  std::int32_t ignore_index = kIgnoreIndex;
};

SegSample flip_horizontal(const SegSample& sample);
// Bilinear image, nearest labels; output extents round(H * factor).
SegSample rescale(const SegSample& sample, double factor);
// Window starting at (y0, x0); positions beyond the source become 0 in the
// image and ignore_index in the labels.
SegSample crop(const SegSample& sample, std::size_t y0, std::size_t x0, std::size_t crop_h, std::size_t crop_w,
               std::int32_t ignore_index);
// Random flip, random rescale, random crop (padding when short).
SegSample augment(const SegSample& sample, const AugmentConfig& config, Rng& rng);

class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t num_classes);

  // Pixels whose ground truth equals ignore_index are skipped.
  void add(const LabelMap& prediction, const LabelMap& truth, std::int32_t ignore_index = kIgnoreIndex);
  void add(std::int32_t prediction, std::int32_t truth);

  std::size_t num_classes() const { return classes_; }
  // Rows are ground truth, columns prediction.
  std::uint64_t at(std::size_t truth, std::size_t prediction) const { return counts_[truth * classes_ + prediction]; }
  std::uint64_t total() const;

 private:
  std::size_t classes_;
  std::vector<std::uint64_t> counts_;
};

struct MiouResult {
  // Undefined when nothing was accumulated.
  bool defined = false;
  double miou = 0.0;
  // Empty for classes absent from both prediction and ground truth.
  std::vector<std::optional<double>> per_class;
};

MiouResult miou(const ConfusionMatrix& cm);

LabelMap argmax_labels(const Tensor& logits);

struct TrainConfig {
  SgdConfig sgd;
  std::size_t iters = 1000;
  double poly_power = 0.9;
  std::size_t crop_h = 64;
  std::size_t crop_w = 64;
  std::size_t batch = 8;
  std::uint64_t seed = 1;
  LossConfig loss;
  std::size_t log_interval = 50;

  void write(KeyValueConfig& out) const;
  static TrainConfig read(const KeyValueConfig& in);
};

struct TrainLogRow {
  std::size_t iteration = 0;
  double lr = 0;
  // Means over the iterations since the previous row.
  double loss = 0;
  double ce = 0;
  double cl = 0;
};

class Trainer {
 public:
  Trainer(SegModel<float>& model, const TrainConfig& config, std::vector<SegSample> train);

  // One optimisation step; returns the hybrid loss of that step.
  LossReport<float> step();
  // Steps until the schedule ends, calling on_log every log_interval steps.
  void run(const std::function<void(const TrainLogRow&)>& on_log = {});

  std::size_t iteration() const { return schedule_.iteration; }
  const TrainSchedule& schedule() const { return schedule_; }
  double last_loss() const { return last_loss_; }

  // Optimizer and iteration state for checkpoints.
  std::vector<NamedTensor> export_state();
  void import_state(const std::vector<NamedTensor>& tensors, std::size_t iteration);

 private:
  // Batch k reads positions k*batch.. of a stream of per-epoch shuffles,
  // and step k draws augmentation and sampling from its own stream, so the
  // run depends only on (seed, iteration) and resumes exactly.
  std::vector<std::size_t> batch_indices(std::size_t iteration) const;
  Rng step_rng(std::size_t iteration) const;

  SegModel<float>& model_;
  TrainConfig config_;
  std::vector<SegSample> train_;
  ParameterSet<float> params_;
  Sgd<float> sgd_;
  TrainSchedule schedule_;
  std::uint64_t seed_;
  double last_loss_ = 0;
};

// Inference-mode confusion matrix over a sample list, batch images at a time.
ConfusionMatrix evaluate(SegModel<float>& model, const std::vector<SegSample>& samples, std::size_t batch,
                         std::int32_t ignore_index = kIgnoreIndex);

}  // namespace frm
