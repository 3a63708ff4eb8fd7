#pragma once

#include <array>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "frm/baselines.hpp"
#include "frm/config.hpp"
#include "frm/context_head.hpp"
#include "frm/frm.hpp"
#include "frm/layers.hpp"
#include "frm/tensor_io.hpp"

namespace frm {

struct ModelConfig {
  std::array<std::size_t, 4> channels{16, 32, 64, 128};
  std::size_t decoder_width = 128;
  std::size_t num_classes = 19;
  std::size_t embed_dim = 64;
  // frm, ppm or dappm
  std::string context_head = "frm";
  std::size_t ffn_ratio = 4;
  std::vector<std::size_t> ppm_bins{1, 2, 3, 6};
  std::size_t ppm_branch_channels = 0;
  std::vector<std::size_t> dappm_strides{2, 4, 8};
  std::size_t dappm_branch_channels = 0;

  std::size_t concat_channels() const { return channels[0] + channels[1] + channels[2] + channels[3]; }
  void validate() const;
  void write(KeyValueConfig& out) const;
  // Keys absent from the document keep their defaults.
  static ModelConfig read(const KeyValueConfig& in);
};

// Stride-4 stem followed by three stride-2 stages, each built from
// conv3x3 + batch norm + ReLU blocks.
template <typename T>
class Backbone {
 public:
  explicit Backbone(const std::array<std::size_t, 4>& channels);

  FeaturePyramid<T> forward(const BasicTensor<T>& image, Mode mode);

  void init_kaiming(Rng& rng);
  void collect(ParameterSet<T>& out, const std::string& prefix);
  std::array<Shape, 4> count_costs(CostCounter& costs, const std::string& path, const Shape& image) const;

 private:
  std::array<std::size_t, 4> channels_;
  // stem: two stride-2 blocks then one stride-1 block -> stage 1
  std::vector<ConvBnRelu<T>> stem_;
  // stages 2..4: one stride-2 block and one stride-1 block each
  std::array<std::vector<ConvBnRelu<T>>, 3> stages_;
};

template <typename T>
struct DecoderOutput {
  BasicTensor<T> features;  // stride 4, decoder width
  BasicTensor<T> logits;    // input resolution, num_classes
};

// Top-down pathway seeded by the context-head output. Each level adds a
// pointwise lateral projection of the stage feature to the upsampled coarser
// level and smooths the sum with conv3x3 + BN + ReLU.
template <typename T>
class FpnDecoder {
 public:
  FpnDecoder(const std::array<std::size_t, 4>& channels, std::size_t width, std::size_t num_classes);

  DecoderOutput<T> forward(const FeaturePyramid<T>& pyramid, const BasicTensor<T>& context, std::size_t out_h,
                           std::size_t out_w, Mode mode);

  void init_kaiming(Rng& rng);
  void collect(ParameterSet<T>& out, const std::string& prefix);
  // Returns the stride-4 feature shape.
  Shape count_costs(CostCounter& costs, const std::string& path, const std::array<Shape, 4>& stages,
                    const Shape& context, const Shape& image) const;

 private:
  std::array<Conv2d<T>, 3> lateral_;
  std::array<ConvBnRelu<T>, 3> smooth_;
  Conv2d<T> classifier_;
};

template <typename T>
struct ModelOutput {
  BasicTensor<T> logits;
  // Present only in training mode.
  std::optional<BasicTensor<T>> embeddings;
};

template <typename T>
std::unique_ptr<ContextHead<T>> make_context_head(const ModelConfig& config);

template <typename T>
class SegModel {
 public:
  explicit SegModel(const ModelConfig& config);

  // Kaiming-normal convolutions, zero biases, unit BN scale.
  void init(std::uint64_t seed);

  FeaturePyramid<T> backbone_forward(const BasicTensor<T>& image, Mode mode);
  ModelOutput<T> forward(const BasicTensor<T>& image, Mode mode);

  const ModelConfig& config() const { return config_; }
  Backbone<T>& backbone() { return backbone_; }
  ContextHead<T>& context_head() { return *head_; }
  FpnDecoder<T>& decoder() { return decoder_; }
  Conv2d<T>& embedding_head() { return embedding_; }

  ParameterSet<T> parameters();
  // Rows for one pass at the given image shape. The embedding head is only
  // counted in training mode.
  void count_costs(CostCounter& costs, const Shape& image, Mode mode) const;

 private:
  ModelConfig config_;
  Backbone<T> backbone_;
  std::unique_ptr<ContextHead<T>> head_;
  FpnDecoder<T> decoder_;
  Conv2d<T> embedding_;
};

// Checkpoint directory: config.txt (architecture plus caller metadata) and
// weights.frmt (named FRMT records for parameters, buffers and any extra
// tensors such as optimizer state).
struct Checkpoint {
  KeyValueConfig config;
  std::vector<NamedTensor> tensors;
};

void save_checkpoint(const std::filesystem::path& dir, SegModel<float>& model, const KeyValueConfig& metadata,
                     const std::vector<NamedTensor>& extra = {});
Checkpoint load_checkpoint(const std::filesystem::path& dir);
// Copies parameters and buffers by name, validating every shape.
void load_weights(SegModel<float>& model, const Checkpoint& checkpoint);
std::vector<NamedTensor> export_weights(SegModel<float>& model);

}  // namespace frm
