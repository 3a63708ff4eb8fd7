#include "frm/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

namespace frm {

template <typename T>
void Sgd<T>::step(ParameterSet<T>& params, double lr) {
  if (buffers_.empty()) {
    for (const auto& p : params.params) buffers_.emplace_back(p.tensor->numel(), T{0});
  }
  if (buffers_.size() != params.params.size()) throw ContractError("sgd: parameter set changed between steps");
  const T mu = static_cast<T>(config_.momentum);
  const T wd = static_cast<T>(config_.weight_decay);
  const T rate = static_cast<T>(lr);
  for (std::size_t i = 0; i < params.params.size(); ++i) {
    auto& p = params.params[i];
    if (!p.tensor->has_grad()) throw ContractError("sgd: parameter '" + p.name + "' has no gradient");
    auto& v = buffers_[i];
    if (v.size() != p.tensor->numel()) throw ContractError("sgd: momentum buffer shape mismatch for '" + p.name + "'");
    auto values = p.tensor->mutable_data();
    const auto grad = p.tensor->grad();
    for (std::size_t k = 0; k < values.size(); ++k) {
      T g = grad[k];
      if (p.decay) g += wd * values[k];
      v[k] = mu * v[k] + g;
      values[k] -= rate * v[k];
    }
  }
}

template class Sgd<float>;
template class Sgd<double>;

double poly_lr(double lr0, std::size_t iteration, std::size_t total, double power) {
  if (total == 0) throw ContractError("poly_lr: total iterations must be positive");
  if (iteration > total) throw ContractError("poly_lr: iteration beyond schedule");
  return lr0 * std::pow(1.0 - static_cast<double>(iteration) / static_cast<double>(total), power);
}

std::vector<SegSample> split_batch(const SegBatch& batch) {
  std::vector<SegSample> out;
  const std::size_t h = batch.images.dim(2);
  const std::size_t w = batch.images.dim(3);
  const std::size_t per = 3 * h * w;
  for (std::size_t n = 0; n < batch.images.dim(0); ++n) {
    SegSample s;
    s.image = Tensor(Shape{1, 3, h, w},
                     std::vector<float>(batch.images.data().begin() + static_cast<std::ptrdiff_t>(n * per),
                                        batch.images.data().begin() + static_cast<std::ptrdiff_t>((n + 1) * per)));
    s.labels = LabelMap(1, h, w);
    std::copy_n(batch.labels.values.begin() + static_cast<std::ptrdiff_t>(n * h * w), h * w, s.labels.values.begin());
    out.push_back(std::move(s));
  }
  return out;
}

SegBatch stack_samples(const std::vector<SegSample>& samples) {
  if (samples.empty()) throw ContractError("stack_samples: no samples");
  const std::size_t h = samples.front().image.dim(2);
  const std::size_t w = samples.front().image.dim(3);
  SegBatch batch;
  batch.labels = LabelMap(samples.size(), h, w);
  std::vector<float> pixels;
  pixels.reserve(samples.size() * 3 * h * w);
  for (std::size_t n = 0; n < samples.size(); ++n) {
    const auto& s = samples[n];
    if (s.image.dim(2) != h || s.image.dim(3) != w || s.labels.h != h || s.labels.w != w) {
      throw DimensionError("stack_samples: sample " + std::to_string(n) + " has a different extent");
    }
    pixels.insert(pixels.end(), s.image.data().begin(), s.image.data().end());
    std::copy(s.labels.values.begin(), s.labels.values.end(),
              batch.labels.values.begin() + static_cast<std::ptrdiff_t>(n * h * w));
  }
  batch.images = Tensor(Shape{samples.size(), 3, h, w}, std::move(pixels));
  return batch;
}

std::vector<SegSample> load_samples(const std::filesystem::path& dir, const std::vector<std::size_t>& indices) {
  if (indices.empty()) return {};
  return split_batch(load_batch(dir, indices));
}

DatasetSplit load_split(const std::filesystem::path& dir, std::size_t holdout) {
  DatasetSplit out;
  out.manifest = read_manifest(dir);
  if (holdout >= out.manifest.count) {
    throw ConfigError("holdout (" + std::to_string(holdout) + ") must be smaller than the dataset (" +
                      std::to_string(out.manifest.count) + ")");
  }
  const std::size_t cut = out.manifest.count - holdout;
  std::vector<std::size_t> train(cut);
  std::vector<std::size_t> held(holdout);
  for (std::size_t i = 0; i < cut; ++i) train[i] = i;
  for (std::size_t i = 0; i < holdout; ++i) held[i] = cut + i;
  out.train = load_samples(dir, train);
  out.holdout = load_samples(dir, held);
  return out;
}

SegSample flip_horizontal(const SegSample& sample) {
  const std::size_t h = sample.image.dim(2);
  const std::size_t w = sample.image.dim(3);
  SegSample out{Tensor(sample.image.shape()), LabelMap(1, h, w)};
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) out.image.at(0, c, y, w - 1 - x) = sample.image.at(0, c, y, x);
      out.labels.at(0, y, w - 1 - x) = sample.labels.at(0, y, x);
    }
  return out;
}

SegSample rescale(const SegSample& sample, double factor) {
  if (!(factor > 0)) throw ContractError("rescale: factor must be positive");
  const auto h = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(sample.image.dim(2)) * factor)));
  const auto w = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(sample.image.dim(3)) * factor)));
  NoGradGuard no_grad;
  return {bilinear_resize(sample.image, h, w).detach(), resize_labels_nearest(sample.labels, h, w)};
}

SegSample crop(const SegSample& sample, std::size_t y0, std::size_t x0, std::size_t crop_h, std::size_t crop_w,
               std::int32_t ignore_index) {
  const std::size_t h = sample.image.dim(2);
  const std::size_t w = sample.image.dim(3);
  SegSample out{Tensor(Shape{1, 3, crop_h, crop_w}), LabelMap(1, crop_h, crop_w, ignore_index)};
  for (std::size_t y = 0; y < crop_h; ++y)
    for (std::size_t x = 0; x < crop_w; ++x) {
      const std::size_t sy = y0 + y;
      const std::size_t sx = x0 + x;
      if (sy >= h || sx >= w) continue;
      for (std::size_t c = 0; c < 3; ++c) out.image.at(0, c, y, x) = sample.image.at(0, c, sy, sx);
      out.labels.at(0, y, x) = sample.labels.at(0, sy, sx);
    }
  return out;
}

SegSample augment(const SegSample& sample, const AugmentConfig& config, Rng& rng) {
  SegSample s = sample;
  if (std::bernoulli_distribution(config.flip_probability)(rng)) s = flip_horizontal(s);
  const double factor = config.min_scale == config.max_scale
                            ? config.min_scale
                            : std::uniform_real_distribution<double>(config.min_scale, config.max_scale)(rng);
  if (factor != 1.0) s = rescale(s, factor);
  const std::size_t h = s.image.dim(2);
  const std::size_t w = s.image.dim(3);
  const std::size_t y0 = h > config.crop_h ? std::uniform_int_distribution<std::size_t>(0, h - config.crop_h)(rng) : 0;
  const std::size_t x0 = w > config.crop_w ? std::uniform_int_distribution<std::size_t>(0, w - config.crop_w)(rng) : 0;
  if (y0 == 0 && x0 == 0 && h == config.crop_h && w == config.crop_w) return s;
  return crop(s, y0, x0, config.crop_h, config.crop_w, config.ignore_index);
}

ConfusionMatrix::ConfusionMatrix(std::size_t num_classes)
    : classes_(num_classes), counts_(num_classes * num_classes, 0) {
  if (num_classes == 0) throw ContractError("confusion matrix needs at least one class");
}

void ConfusionMatrix::add(std::int32_t prediction, std::int32_t truth) {
  const auto k = static_cast<std::int32_t>(classes_);
  if (truth < 0 || truth >= k || prediction < 0 || prediction >= k) {
    throw ContractError("confusion matrix: class id outside [0, " + std::to_string(classes_) + ")");
  }
  ++counts_[static_cast<std::size_t>(truth) * classes_ + static_cast<std::size_t>(prediction)];
}

void ConfusionMatrix::add(const LabelMap& prediction, const LabelMap& truth, std::int32_t ignore_index) {
  if (prediction.values.size() != truth.values.size()) throw DimensionError("confusion matrix: label maps differ in size");
  for (std::size_t i = 0; i < truth.values.size(); ++i) {
    if (truth.values[i] == ignore_index) continue;
    add(prediction.values[i], truth.values[i]);
  }
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t t = 0;
  for (auto c : counts_) t += c;
  return t;
}

MiouResult miou(const ConfusionMatrix& cm) {
  MiouResult result;
  const std::size_t k = cm.num_classes();
  result.per_class.assign(k, std::nullopt);
  if (cm.total() == 0) return result;
  double total = 0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < k; ++c) {
    const std::uint64_t tp = cm.at(c, c);
    std::uint64_t fp = 0;
    std::uint64_t fn = 0;
    for (std::size_t o = 0; o < k; ++o) {
      if (o == c) continue;
      fp += cm.at(o, c);
      fn += cm.at(c, o);
    }
    const std::uint64_t denom = tp + fp + fn;
    if (denom == 0) continue;
    const double iou = static_cast<double>(tp) / static_cast<double>(denom);
    result.per_class[c] = iou;
    total += iou;
    ++present;
  }
  result.defined = present > 0;
  result.miou = present ? total / static_cast<double>(present) : 0.0;
  return result;
}

LabelMap argmax_labels(const Tensor& logits) {
  const Shape& s = logits.shape();
  LabelMap out(s[0], s[2], s[3]);
  for (std::size_t n = 0; n < s[0]; ++n)
    for (std::size_t y = 0; y < s[2]; ++y)
      for (std::size_t x = 0; x < s[3]; ++x) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < s[1]; ++c) {
          if (logits.at(n, c, y, x) > logits.at(n, best, y, x)) best = c;
        }
        out.at(n, y, x) = static_cast<std::int32_t>(best);
      }
  return out;
}

void TrainConfig::write(KeyValueConfig& out) const {
  out.set("lr0", sgd.lr0);
  out.set("momentum", sgd.momentum);
  out.set("weight_decay", sgd.weight_decay);
  out.set("iters", static_cast<std::uint64_t>(iters));
  out.set("poly_power", poly_power);
  out.set("crop", std::to_string(crop_h) + "x" + std::to_string(crop_w));
  out.set("batch", static_cast<std::uint64_t>(batch));
  out.set("seed", seed);
  out.set("lambda", loss.lambda);
  out.set("tau", loss.tau);
  out.set("ignore_index", static_cast<std::int64_t>(loss.ignore_index));
  out.set("anchors_per_class", static_cast<std::uint64_t>(loss.anchors_per_class));
  out.set("max_positives", static_cast<std::uint64_t>(loss.max_positives));
  out.set("max_negatives", static_cast<std::uint64_t>(loss.max_negatives));
  out.set("log_interval", static_cast<std::uint64_t>(log_interval));
}

TrainConfig TrainConfig::read(const KeyValueConfig& in) {
  TrainConfig c;
  c.sgd.lr0 = in.get_double("lr0", c.sgd.lr0);
  c.sgd.momentum = in.get_double("momentum", c.sgd.momentum);
  c.sgd.weight_decay = in.get_double("weight_decay", c.sgd.weight_decay);
  c.iters = in.get_uint("iters", c.iters);
  c.poly_power = in.get_double("poly_power", c.poly_power);
  if (in.has("crop")) {
    const std::string crop = in.get("crop", "");
    if (crop.find_first_of("xX") == std::string::npos) {
      c.crop_h = c.crop_w = in.get_uint("crop", c.crop_h);
    } else {
      std::tie(c.crop_h, c.crop_w) = parse_size(crop);
    }
  }
  c.batch = in.get_uint("batch", c.batch);
  c.seed = in.get_uint("seed", c.seed);
  c.loss.lambda = in.get_double("lambda", c.loss.lambda);
  c.loss.tau = in.get_double("tau", c.loss.tau);
  c.loss.ignore_index = static_cast<std::int32_t>(in.get_int("ignore_index", c.loss.ignore_index));
  c.loss.anchors_per_class = in.get_uint("anchors_per_class", c.loss.anchors_per_class);
  c.loss.max_positives = in.get_uint("max_positives", c.loss.max_positives);
  c.loss.max_negatives = in.get_uint("max_negatives", c.loss.max_negatives);
  c.log_interval = in.get_uint("log_interval", c.log_interval);
  if (c.iters == 0 || c.batch == 0) throw ConfigError("iters and batch must be positive");
  if (c.log_interval == 0) throw ConfigError("log_interval must be positive");
  c.loss.validate();
  return c;
}

Trainer::Trainer(SegModel<float>& model, const TrainConfig& config, std::vector<SegSample> train)
    : model_(model),
      config_(config),
      train_(std::move(train)),
      params_(model.parameters()),
      sgd_(config.sgd),
      schedule_{config.iters, config.poly_power, 0, config.sgd.lr0},
      seed_(splitmix64(config.seed ^ 0x5eed5eed5eedULL)) {
  config_.loss.validate();
  if (train_.size() < config.batch) {
    throw ContractError("training set (" + std::to_string(train_.size()) + ") smaller than batch (" +
                        std::to_string(config.batch) + ")");
  }
}

std::vector<std::size_t> Trainer::batch_indices(std::size_t iteration) const {
  // Whole batches per epoch; the remainder of each shuffle is skipped.
  const std::size_t per_epoch = train_.size() / config_.batch;
  const std::size_t epoch = iteration / per_epoch;
  const std::size_t offset = (iteration % per_epoch) * config_.batch;
  std::vector<std::size_t> order(train_.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng shuffle_rng(splitmix64(seed_ ^ splitmix64(2 * epoch)));
  std::shuffle(order.begin(), order.end(), shuffle_rng);
  return {order.begin() + static_cast<std::ptrdiff_t>(offset),
          order.begin() + static_cast<std::ptrdiff_t>(offset + config_.batch)};
}

Rng Trainer::step_rng(std::size_t iteration) const { return Rng(splitmix64(seed_ ^ splitmix64(2 * iteration + 1))); }

LossReport<float> Trainer::step() {
  if (schedule_.iteration >= schedule_.total) throw ContractError("training schedule already complete");
  AugmentConfig aug;
  aug.crop_h = config_.crop_h;
  aug.crop_w = config_.crop_w;
  aug.ignore_index = config_.loss.ignore_index;
  Rng rng = step_rng(schedule_.iteration);
  std::vector<SegSample> samples;
  for (std::size_t idx : batch_indices(schedule_.iteration)) samples.push_back(augment(train_[idx], aug, rng));
  const SegBatch batch = stack_samples(samples);

  auto out = model_.forward(batch.images, Mode::kTraining);
  auto report = hybrid_loss(out.logits, *out.embeddings, batch.labels, config_.loss, rng);
  params_.zero_grad();
  report.total.backward();
  const double lr = schedule_.lr();
  {
    NoGradGuard no_grad;
    sgd_.step(params_, lr);
  }
  ++schedule_.iteration;
  last_loss_ = report.total_value();
  return report;
}

void Trainer::run(const std::function<void(const TrainLogRow&)>& on_log) {
  TrainLogRow acc;
  std::size_t n = 0;
  while (schedule_.iteration < schedule_.total) {
    const double lr = schedule_.lr();
    auto report = step();
    acc.loss += report.total_value();
    acc.ce += report.ce_value();
    acc.cl += report.cl_value();
    acc.lr = lr;
    ++n;
    if (schedule_.iteration % config_.log_interval == 0 || schedule_.iteration == schedule_.total) {
      acc.iteration = schedule_.iteration;
      acc.loss /= static_cast<double>(n);
      acc.ce /= static_cast<double>(n);
      acc.cl /= static_cast<double>(n);
      if (on_log) on_log(acc);
      acc = TrainLogRow{};
      n = 0;
    }
  }
}

std::vector<NamedTensor> Trainer::export_state() {
  std::vector<NamedTensor> out;
  auto& buffers = sgd_.buffers();
  for (std::size_t i = 0; i < buffers.size(); ++i) {
    out.emplace_back("optim." + params_.params[i].name, Tensor(Shape{1, 1, 1, buffers[i].size()}, buffers[i]));
  }
  return out;
}

void Trainer::import_state(const std::vector<NamedTensor>& tensors, std::size_t iteration) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : tensors) by_name[name] = &t;
  auto& buffers = sgd_.buffers();
  buffers.clear();
  bool any = false;
  for (const auto& p : params_.params) {
    auto it = by_name.find("optim." + p.name);
    if (it == by_name.end()) {
      buffers.emplace_back(p.tensor->numel(), 0.0f);
      continue;
    }
    if (it->second->numel() != p.tensor->numel()) throw FormatError("optimizer state for '" + p.name + "' has wrong size");
    buffers.emplace_back(it->second->data().begin(), it->second->data().end());
    any = true;
  }
  if (!any) buffers.clear();
  if (iteration > schedule_.total) throw ConfigError("checkpoint iteration exceeds configured iters");
  schedule_.iteration = iteration;
}

ConfusionMatrix evaluate(SegModel<float>& model, const std::vector<SegSample>& samples, std::size_t batch,
                         std::int32_t ignore_index) {
  ConfusionMatrix cm(model.config().num_classes);
  NoGradGuard no_grad;
  for (std::size_t start = 0; start < samples.size(); start += batch) {
    const std::size_t end = std::min(samples.size(), start + batch);
    const SegBatch b = stack_samples({samples.begin() + static_cast<std::ptrdiff_t>(start),
                                      samples.begin() + static_cast<std::ptrdiff_t>(end)});
    const auto out = model.forward(b.images, Mode::kInference);
    cm.add(argmax_labels(out.logits), b.labels, ignore_index);
  }
  return cm;
}

}  // namespace frm
