#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "frm/losses.hpp"
#include "frm/tensor.hpp"

namespace frm {

// Toy scene description: a background class plus num_classes - 1 shape
// classes (rectangles, disks and stripe patches, cycling by class id), each
// class with its own base colour, plus uniform noise.
struct SceneSpec {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t num_classes = 5;
  std::size_t min_shapes = 1;
  std::size_t max_shapes = 4;
  double noise = 0.1;
  std::uint64_t seed = 1;

  void validate() const;
};

enum class ShapeKind { kRectangle, kDisk, kStripes };

ShapeKind shape_kind_for_class(std::int32_t cls);

struct ShapeInstance {
  ShapeKind kind = ShapeKind::kRectangle;
  std::int32_t label = 1;
  // Bounding box, half-open; disks are inscribed in it.
  std::size_t y0 = 0, x0 = 0, y1 = 0, x1 = 0;
  std::size_t stripe_period = 2;
  bool vertical = false;

  bool covers(std::size_t y, std::size_t x) const;
};

struct Scene {
  Tensor image;     // 1 x 3 x H x W, values in [0, 1]
  LabelMap labels;  // 1 x H x W
  std::vector<ShapeInstance> shapes;
};

struct SegBatch {
  Tensor images;  // N x 3 x H x W
  LabelMap labels;
  std::int32_t ignore_index = kIgnoreIndex;
};

std::array<float, 3> class_color(std::int32_t cls, std::size_t num_classes);

// Seed mixing shared by everything that derives streams from a base seed.
std::uint64_t splitmix64(std::uint64_t x);

// Deterministic in (spec.seed, index); later shapes paint over earlier ones.
Scene render_scene(const SceneSpec& spec, std::size_t index);

struct DatasetManifest {
  std::size_t count = 0;
  std::size_t num_classes = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::uint64_t seed = 0;
  std::vector<std::uint64_t> histogram;
};

// Writes images/NNNN.frmt, labels/NNNN.pgm and manifest.txt under dir.
DatasetManifest generate(const SceneSpec& spec, std::size_t count, const std::filesystem::path& dir);
DatasetManifest read_manifest(const std::filesystem::path& dir);

SegBatch load_batch(const std::filesystem::path& dir, const std::vector<std::size_t>& indices);

std::filesystem::path image_path(const std::filesystem::path& dir, std::size_t index);
std::filesystem::path label_path(const std::filesystem::path& dir, std::size_t index);

// Binary P5, maxval 255.
void write_pgm(const std::filesystem::path& path, std::size_t height, std::size_t width,
               const std::vector<std::uint8_t>& pixels);
struct PgmImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;
};
PgmImage read_pgm(const std::filesystem::path& path);

}  // namespace frm
