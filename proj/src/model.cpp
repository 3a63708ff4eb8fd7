#include "frm/model.hpp"

#include <map>

namespace frm {

void ModelConfig::validate() const {
  for (std::size_t c : channels) {
    if (c == 0) throw ConfigError("channel plan entries must be positive");
  }
  if (decoder_width == 0) throw ConfigError("decoder_width must be positive");
  if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
  if (embed_dim == 0) throw ConfigError("embed_dim must be positive");
  if (context_head != "frm" && context_head != "ppm" && context_head != "dappm") {
    throw ConfigError("context_head must be one of frm, ppm, dappm; got '" + context_head + "'");
  }
  if (concat_channels() / 4 == 0) throw ConfigError("channel plan too small for attention");
}

void ModelConfig::write(KeyValueConfig& out) const {
  out.set_sizes("channels", {channels.begin(), channels.end()});
  out.set("decoder_width", static_cast<std::uint64_t>(decoder_width));
  out.set("num_classes", static_cast<std::uint64_t>(num_classes));
  out.set("embed_dim", static_cast<std::uint64_t>(embed_dim));
  out.set("context_head", context_head);
  out.set("ffn_ratio", static_cast<std::uint64_t>(ffn_ratio));
  out.set_sizes("ppm_bins", ppm_bins);
  out.set("ppm_branch_channels", static_cast<std::uint64_t>(ppm_branch_channels));
  out.set_sizes("dappm_strides", dappm_strides);
  out.set("dappm_branch_channels", static_cast<std::uint64_t>(dappm_branch_channels));
}

ModelConfig ModelConfig::read(const KeyValueConfig& in) {
  ModelConfig c;
  const auto plan = in.get_sizes("channels", {c.channels.begin(), c.channels.end()});
  if (plan.size() != 4) throw ConfigError("channels must list four stage widths");
  std::copy(plan.begin(), plan.end(), c.channels.begin());
  c.decoder_width = in.get_uint("decoder_width", c.decoder_width);
  c.num_classes = in.get_uint("num_classes", c.num_classes);
  c.embed_dim = in.get_uint("embed_dim", c.embed_dim);
  c.context_head = in.get("context_head", c.context_head);
  c.ffn_ratio = in.get_uint("ffn_ratio", c.ffn_ratio);
  c.ppm_bins = in.get_sizes("ppm_bins", c.ppm_bins);
  c.ppm_branch_channels = in.get_uint("ppm_branch_channels", c.ppm_branch_channels);
  c.dappm_strides = in.get_sizes("dappm_strides", c.dappm_strides);
  c.dappm_branch_channels = in.get_uint("dappm_branch_channels", c.dappm_branch_channels);
  c.validate();
  return c;
}

template <typename T>
Backbone<T>::Backbone(const std::array<std::size_t, 4>& channels) : channels_(channels) {
  stem_.emplace_back(conv3x3(3, channels[0], 2));
  stem_.emplace_back(conv3x3(channels[0], channels[0], 2));
  stem_.emplace_back(conv3x3(channels[0], channels[0], 1));
  for (std::size_t s = 0; s < 3; ++s) {
    stages_[s].emplace_back(conv3x3(channels[s], channels[s + 1], 2));
    stages_[s].emplace_back(conv3x3(channels[s + 1], channels[s + 1], 1));
  }
}

template <typename T>
FeaturePyramid<T> Backbone<T>::forward(const BasicTensor<T>& image, Mode mode) {
  if (image.dim(1) != 3) throw DimensionError("backbone expects 3-channel images, got " + to_string(image.shape()));
  if (image.dim(2) < 32 || image.dim(3) < 32) {
    throw ContractError("backbone needs images of at least 32x32, got " + to_string(image.shape()));
  }
  std::array<BasicTensor<T>, 4> out;
  BasicTensor<T> x = image;
  for (auto& block : stem_) x = block.forward(x, mode);
  out[0] = x;
  for (std::size_t s = 0; s < 3; ++s) {
    for (auto& block : stages_[s]) x = block.forward(x, mode);
    out[s + 1] = x;
  }
  return {out[0], out[1], out[2], out[3]};
}

template <typename T>
void Backbone<T>::init_kaiming(Rng& rng) {
  for (auto& b : stem_) b.init_kaiming(rng);
  for (auto& stage : stages_)
    for (auto& b : stage) b.init_kaiming(rng);
}

template <typename T>
void Backbone<T>::collect(ParameterSet<T>& out, const std::string& prefix) {
  for (std::size_t i = 0; i < stem_.size(); ++i) stem_[i].collect(out, join_path(prefix, "stem" + std::to_string(i)));
  for (std::size_t s = 0; s < 3; ++s)
    for (std::size_t i = 0; i < stages_[s].size(); ++i)
      stages_[s][i].collect(out, join_path(prefix, "stage" + std::to_string(s + 2) + "." + std::to_string(i)));
}

template <typename T>
std::array<Shape, 4> Backbone<T>::count_costs(CostCounter& costs, const std::string& path, const Shape& image) const {
  std::array<Shape, 4> out;
  Shape s = image;
  for (std::size_t i = 0; i < stem_.size(); ++i) s = stem_[i].count_costs(costs, join_path(path, "stem" + std::to_string(i)), s);
  out[0] = s;
  for (std::size_t k = 0; k < 3; ++k) {
    for (std::size_t i = 0; i < stages_[k].size(); ++i) {
      s = stages_[k][i].count_costs(costs, join_path(path, "stage" + std::to_string(k + 2) + "." + std::to_string(i)), s);
    }
    out[k + 1] = s;
  }
  return out;
}

template <typename T>
FpnDecoder<T>::FpnDecoder(const std::array<std::size_t, 4>& channels, std::size_t width, std::size_t num_classes)
    : lateral_{Conv2d<T>(pointwise(channels[0], width)), Conv2d<T>(pointwise(channels[1], width)),
               Conv2d<T>(pointwise(channels[2], width))},
      smooth_{ConvBnRelu<T>(conv3x3(width, width)), ConvBnRelu<T>(conv3x3(width, width)),
              ConvBnRelu<T>(conv3x3(width, width))},
      classifier_(pointwise(width, num_classes)) {}

template <typename T>
DecoderOutput<T> FpnDecoder<T>::forward(const FeaturePyramid<T>& pyramid, const BasicTensor<T>& context,
                                        std::size_t out_h, std::size_t out_w, Mode mode) {
  const auto stages = pyramid.stages();
  BasicTensor<T> p = context;
  for (int level = 2; level >= 0; --level) {
    const auto& f = *stages[static_cast<std::size_t>(level)];
    auto top_down = bilinear_upsample(p, f.dim(2), f.dim(3));
    p = smooth_[static_cast<std::size_t>(level)].forward(add(lateral_[static_cast<std::size_t>(level)].forward(f), top_down),
                                                        mode);
  }
  return {p, bilinear_upsample(classifier_.forward(p), out_h, out_w)};
}

template <typename T>
void FpnDecoder<T>::init_kaiming(Rng& rng) {
  for (auto& l : lateral_) l.init_kaiming(rng);
  for (auto& s : smooth_) s.init_kaiming(rng);
  classifier_.init_kaiming(rng);
}

template <typename T>
void FpnDecoder<T>::collect(ParameterSet<T>& out, const std::string& prefix) {
  for (std::size_t i = 0; i < 3; ++i) lateral_[i].collect(out, join_path(prefix, "lateral" + std::to_string(i + 1)));
  for (std::size_t i = 0; i < 3; ++i) smooth_[i].collect(out, join_path(prefix, "smooth" + std::to_string(i + 1)));
  classifier_.collect(out, join_path(prefix, "classifier"));
}

template <typename T>
Shape FpnDecoder<T>::count_costs(CostCounter& costs, const std::string& path, const std::array<Shape, 4>& stages,
                                 const Shape& context, const Shape& image) const {
  Shape p = context;
  for (int level = 2; level >= 0; --level) {
    const auto l = static_cast<std::size_t>(level);
    const std::string tag = std::to_string(l + 1);
    const Shape lat = lateral_[l].count_costs(costs, join_path(path, "lateral" + tag), stages[l]);
    costs.add(join_path(path, "upsample" + tag), 0, elementwise_flops(lat));
    costs.add(join_path(path, "add" + tag), 0, elementwise_flops(lat));
    p = smooth_[l].count_costs(costs, join_path(path, "smooth" + tag), lat);
  }
  const Shape cls = classifier_.count_costs(costs, join_path(path, "classifier"), p);
  costs.add(join_path(path, "upsample_logits"), 0, elementwise_flops(Shape{cls[0], cls[1], image[2], image[3]}));
  return p;
}

template <typename T>
std::unique_ptr<ContextHead<T>> make_context_head(const ModelConfig& config) {
  const std::size_t c = config.concat_channels();
  if (config.context_head == "frm") {
    return std::make_unique<FrmHead<T>>(FrmConfig{c, config.decoder_width, config.ffn_ratio});
  }
  if (config.context_head == "ppm") {
    PpmConfig p;
    p.in_channels = c;
    p.out_channels = config.decoder_width;
    p.bins = config.ppm_bins;
    p.branch_channels = config.ppm_branch_channels;
    // Stride-32 maps of small images are narrower than the largest bins.
    p.clamp_bins = true;
    return std::make_unique<PpmHead<T>>(p);
  }
  if (config.context_head == "dappm") {
    DappmConfig d;
    d.in_channels = c;
    d.out_channels = config.decoder_width;
    d.strides = config.dappm_strides;
    d.branch_channels = config.dappm_branch_channels;
    return std::make_unique<DappmHead<T>>(d);
  }
  throw ConfigError("unknown context head '" + config.context_head + "'");
}

namespace {
const ModelConfig& validated(const ModelConfig& c) {
  c.validate();
  return c;
}
}  // namespace

template <typename T>
SegModel<T>::SegModel(const ModelConfig& config)
    : config_(validated(config)),
      backbone_(config.channels),
      head_(make_context_head<T>(config)),
      decoder_(config.channels, config.decoder_width, config.num_classes),
      embedding_(pointwise(config.decoder_width, config.embed_dim)) {}

template <typename T>
void SegModel<T>::init(std::uint64_t seed) {
  Rng rng(seed);
  backbone_.init_kaiming(rng);
  head_->init_kaiming(rng);
  decoder_.init_kaiming(rng);
  embedding_.init_kaiming(rng);
}

template <typename T>
FeaturePyramid<T> SegModel<T>::backbone_forward(const BasicTensor<T>& image, Mode mode) {
  return backbone_.forward(image, mode);
}

template <typename T>
ModelOutput<T> SegModel<T>::forward(const BasicTensor<T>& image, Mode mode) {
  auto pyramid = backbone_.forward(image, mode);
  auto context = head_->forward(aggregate_stages(pyramid), mode);
  auto decoded = decoder_.forward(pyramid, context, image.dim(2), image.dim(3), mode);
  ModelOutput<T> out{decoded.logits, std::nullopt};
  if (mode == Mode::kTraining) out.embeddings = embedding_.forward(decoded.features);
  return out;
}

template <typename T>
ParameterSet<T> SegModel<T>::parameters() {
  ParameterSet<T> set;
  backbone_.collect(set, "backbone");
  head_->collect(set, "context");
  decoder_.collect(set, "decoder");
  embedding_.collect(set, "embed");
  return set;
}

template <typename T>
void SegModel<T>::count_costs(CostCounter& costs, const Shape& image, Mode mode) const {
  const auto stages = backbone_.count_costs(costs, "backbone", image);
  const std::size_t h = stages[3][2];
  const std::size_t w = stages[3][3];
  for (std::size_t k = 0; k < 3; ++k) {
    costs.add("aggregate.pool" + std::to_string(k + 1), 0, elementwise_flops(Shape{image[0], stages[k][1], h, w}));
  }
  const Shape concat{image[0], config_.concat_channels(), h, w};
  const Shape context = head_->count_costs(costs, "context", concat);
  const Shape features = decoder_.count_costs(costs, "decoder", stages, context, image);
  if (mode == Mode::kTraining) embedding_.count_costs(costs, "embed", features);
}

template class Backbone<float>;
template class Backbone<double>;
template class FpnDecoder<float>;
template class FpnDecoder<double>;
template class SegModel<float>;
template class SegModel<double>;
template std::unique_ptr<ContextHead<float>> make_context_head(const ModelConfig&);
template std::unique_ptr<ContextHead<double>> make_context_head(const ModelConfig&);

namespace {
constexpr const char* kWeightsFile = "weights.frmt";
constexpr const char* kConfigFile = "config.txt";
}  // namespace

std::vector<NamedTensor> export_weights(SegModel<float>& model) {
  auto set = model.parameters();
  std::vector<NamedTensor> out;
  for (const auto& p : set.params) out.emplace_back(p.name, p.tensor->detach());
  for (const auto& b : set.buffers) {
    out.emplace_back(b.name, Tensor(Shape{1, 1, 1, b.values->size()}, *b.values));
  }
  return out;
}

void save_checkpoint(const std::filesystem::path& dir, SegModel<float>& model, const KeyValueConfig& metadata,
                     const std::vector<NamedTensor>& extra) {
  std::filesystem::create_directories(dir);
  KeyValueConfig doc = metadata;
  model.config().write(doc);
  doc.save(dir / kConfigFile);
  auto tensors = export_weights(model);
  tensors.insert(tensors.end(), extra.begin(), extra.end());
  save_named_tensors(dir / kWeightsFile, tensors);
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir / kConfigFile) || !std::filesystem::exists(dir / kWeightsFile)) {
    throw FormatError(dir.string() + ": not a checkpoint directory (missing config.txt or weights.frmt)");
  }
  return {KeyValueConfig::load(dir / kConfigFile), load_named_tensors(dir / kWeightsFile)};
}

void load_weights(SegModel<float>& model, const Checkpoint& checkpoint) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : checkpoint.tensors) by_name[name] = &t;
  auto find = [&](const std::string& name) -> const Tensor& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("checkpoint is missing tensor '" + name + "'");
    return *it->second;
  };
  auto set = model.parameters();
  for (auto& p : set.params) {
    const Tensor& src = find(p.name);
    if (src.shape() != p.tensor->shape()) {
      throw FormatError("checkpoint tensor '" + p.name + "' has shape " + to_string(src.shape()) + ", model expects " +
                        to_string(p.tensor->shape()));
    }
    std::copy(src.data().begin(), src.data().end(), p.tensor->mutable_data().begin());
  }
  for (auto& b : set.buffers) {
    const Tensor& src = find(b.name);
    if (src.numel() != b.values->size()) throw FormatError("checkpoint buffer '" + b.name + "' has wrong length");
    std::copy(src.data().begin(), src.data().end(), b.values->begin());
  }
}

}  // namespace frm
