#include "frm/datagen.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

#include "frm/config.hpp"
#include "frm/layers.hpp"
#include "frm/tensor_io.hpp"

namespace frm {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

namespace {

constexpr std::array<std::array<float, 3>, 8> kPalette{{
    {0.15f, 0.15f, 0.15f},
    {0.90f, 0.20f, 0.20f},
    {0.20f, 0.80f, 0.20f},
    {0.20f, 0.30f, 0.90f},
    {0.90f, 0.85f, 0.20f},
    {0.80f, 0.30f, 0.85f},
    {0.20f, 0.85f, 0.85f},
    {0.95f, 0.60f, 0.20f},
}};

std::string numbered(std::size_t index, const char* ext) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04zu.%s", index, ext);
  return buf;
}

}  // namespace

void SceneSpec::validate() const {
  if (num_classes < 2) throw ConfigError("scene needs at least 2 classes");
  if (num_classes > 255) throw ConfigError("scene classes must fit in 8-bit labels below the ignore value");
  if (height < 8 || width < 8) throw ConfigError("scene extent must be at least 8x8");
  if (min_shapes > max_shapes) throw ConfigError("min_shapes exceeds max_shapes");
  if (noise < 0) throw ConfigError("noise amplitude must be non-negative");
}

ShapeKind shape_kind_for_class(std::int32_t cls) {
  switch ((cls - 1) % 3) {
    case 0:
      return ShapeKind::kRectangle;
    case 1:
      return ShapeKind::kDisk;
    default:
      return ShapeKind::kStripes;
  }
}

bool ShapeInstance::covers(std::size_t y, std::size_t x) const {
  if (y < y0 || y >= y1 || x < x0 || x >= x1) return false;
  switch (kind) {
    case ShapeKind::kRectangle:
      return true;
    case ShapeKind::kDisk: {
      const double ry = static_cast<double>(y1 - y0) / 2;
      const double rx = static_cast<double>(x1 - x0) / 2;
      const double dy = (static_cast<double>(y) + 0.5 - static_cast<double>(y0) - ry) / ry;
      const double dx = (static_cast<double>(x) + 0.5 - static_cast<double>(x0) - rx) / rx;
      return dy * dy + dx * dx <= 1.0;
    }
    case ShapeKind::kStripes: {
      const std::size_t offset = vertical ? x - x0 : y - y0;
      return (offset / stripe_period) % 2 == 0;
    }
  }
  return false;
}

std::array<float, 3> class_color(std::int32_t cls, std::size_t num_classes) {
  if (cls < 0 || static_cast<std::size_t>(cls) >= num_classes) throw ContractError("class_color: class out of range");
  if (static_cast<std::size_t>(cls) < kPalette.size()) return kPalette[static_cast<std::size_t>(cls)];
  // Golden-angle hues past the fixed palette.
  const double hue = std::fmod(static_cast<double>(cls) * 0.618033988749895, 1.0) * 6.0;
  const double f = hue - std::floor(hue);
  const auto sector = static_cast<int>(hue);
  const float hi = 0.9f, lo = 0.2f;
  const auto mid_up = static_cast<float>(lo + (hi - lo) * f);
  const auto mid_down = static_cast<float>(hi - (hi - lo) * f);
  switch (sector) {
    case 0: return {hi, mid_up, lo};
    case 1: return {mid_down, hi, lo};
    case 2: return {lo, hi, mid_up};
    case 3: return {lo, mid_down, hi};
    case 4: return {mid_up, lo, hi};
    default: return {hi, lo, mid_down};
  }
}

Scene render_scene(const SceneSpec& spec, std::size_t index) {
  spec.validate();
  Rng rng(splitmix64(spec.seed ^ splitmix64(index)));
  const std::size_t h = spec.height;
  const std::size_t w = spec.width;

  Scene scene;
  std::uniform_int_distribution<std::size_t> shape_count(spec.min_shapes, spec.max_shapes);
  std::uniform_int_distribution<std::int32_t> pick_class(1, static_cast<std::int32_t>(spec.num_classes) - 1);
  std::uniform_int_distribution<std::size_t> extent_h(std::max<std::size_t>(2, h / 8), h / 2);
  std::uniform_int_distribution<std::size_t> extent_w(std::max<std::size_t>(2, w / 8), w / 2);
  // Bands stay wider than the stride-4 decoder grid.
  const std::size_t side = std::min(h, w);
  std::uniform_int_distribution<std::size_t> period(std::max<std::size_t>(2, side / 10), std::max<std::size_t>(3, side / 6));
  std::bernoulli_distribution coin(0.5);
  const std::size_t shapes = shape_count(rng);
  for (std::size_t s = 0; s < shapes; ++s) {
    ShapeInstance shape;
    shape.label = pick_class(rng);
    shape.kind = shape_kind_for_class(shape.label);
    const std::size_t sh = extent_h(rng);
    const std::size_t sw = extent_w(rng);
    shape.y0 = std::uniform_int_distribution<std::size_t>(0, h - sh)(rng);
    shape.x0 = std::uniform_int_distribution<std::size_t>(0, w - sw)(rng);
    shape.y1 = shape.y0 + sh;
    shape.x1 = shape.x0 + sw;
    shape.stripe_period = period(rng);
    shape.vertical = coin(rng);
    scene.shapes.push_back(shape);
  }

  scene.labels = LabelMap(1, h, w, 0);
  for (const auto& shape : scene.shapes)
    for (std::size_t y = shape.y0; y < shape.y1; ++y)
      for (std::size_t x = shape.x0; x < shape.x1; ++x)
        if (shape.covers(y, x)) scene.labels.at(0, y, x) = shape.label;

  scene.image = Tensor(Shape{1, 3, h, w});
  std::uniform_real_distribution<float> jitter(static_cast<float>(-spec.noise), static_cast<float>(spec.noise));
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const auto color = class_color(scene.labels.at(0, y, x), spec.num_classes);
      for (std::size_t c = 0; c < 3; ++c) {
        const float v = spec.noise > 0 ? color[c] + jitter(rng) : color[c];
        scene.image.at(0, c, y, x) = std::clamp(v, 0.0f, 1.0f);
      }
    }
  return scene;
}

std::filesystem::path image_path(const std::filesystem::path& dir, std::size_t index) {
  return dir / "images" / numbered(index, "frmt");
}

std::filesystem::path label_path(const std::filesystem::path& dir, std::size_t index) {
  return dir / "labels" / numbered(index, "pgm");
}

void write_pgm(const std::filesystem::path& path, std::size_t height, std::size_t width,
               const std::vector<std::uint8_t>& pixels) {
  if (pixels.size() != height * width) throw DimensionError("write_pgm: pixel count does not match extent");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "P5\n" << width << ' ' << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

PgmImage read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  auto token = [&]() {
    std::string t;
    char ch;
    while (in.get(ch)) {
      if (ch == '#') {
        std::string skip;
        std::getline(in, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(ch))) {
        if (!t.empty()) break;
        continue;
      }
      t.push_back(ch);
    }
    return t;
  };
  const std::string source = path.string();
  if (token() != "P5") throw FormatError(source + ": not a binary PGM (P5)");
  PgmImage img;
  std::string maxval;
  try {
    img.width = std::stoul(token());
    img.height = std::stoul(token());
    maxval = token();
  } catch (const std::exception&) {
    throw FormatError(source + ": malformed PGM header");
  }
  if (maxval != "255") throw FormatError(source + ": PGM maxval must be 255, got " + maxval);
  if (img.width == 0 || img.height == 0) throw FormatError(source + ": empty PGM");
  img.pixels.resize(img.width * img.height);
  if (!in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()))) {
    throw FormatError(source + ": truncated PGM payload");
  }
  return img;
}

DatasetManifest generate(const SceneSpec& spec, std::size_t count, const std::filesystem::path& dir) {
  spec.validate();
  std::filesystem::create_directories(dir / "images");
  std::filesystem::create_directories(dir / "labels");
  DatasetManifest manifest{count, spec.num_classes, spec.height, spec.width, spec.seed,
                           std::vector<std::uint64_t>(spec.num_classes, 0)};
  for (std::size_t i = 0; i < count; ++i) {
    const Scene scene = render_scene(spec, i);
    save_tensor(image_path(dir, i), scene.image);
    std::vector<std::uint8_t> pixels(scene.labels.values.size());
    for (std::size_t p = 0; p < pixels.size(); ++p) {
      const auto v = scene.labels.values[p];
      pixels[p] = static_cast<std::uint8_t>(v);
      ++manifest.histogram[static_cast<std::size_t>(v)];
    }
    write_pgm(label_path(dir, i), spec.height, spec.width, pixels);
  }
  KeyValueConfig doc;
  doc.set("count", static_cast<std::uint64_t>(count));
  doc.set("num_classes", static_cast<std::uint64_t>(spec.num_classes));
  doc.set("height", static_cast<std::uint64_t>(spec.height));
  doc.set("width", static_cast<std::uint64_t>(spec.width));
  doc.set("seed", spec.seed);
  doc.set("noise", spec.noise);
  doc.set("min_shapes", static_cast<std::uint64_t>(spec.min_shapes));
  doc.set("max_shapes", static_cast<std::uint64_t>(spec.max_shapes));
  doc.set("ignore_index", static_cast<std::int64_t>(kIgnoreIndex));
  std::vector<std::size_t> hist(manifest.histogram.begin(), manifest.histogram.end());
  doc.set_sizes("histogram", hist);
  doc.save(dir / "manifest.txt");
  return manifest;
}

DatasetManifest read_manifest(const std::filesystem::path& dir) {
  const auto doc = KeyValueConfig::load(dir / "manifest.txt");
  DatasetManifest m;
  m.count = doc.get_uint("count", 0);
  m.num_classes = doc.get_uint("num_classes", 0);
  m.height = doc.get_uint("height", 0);
  m.width = doc.get_uint("width", 0);
  m.seed = doc.get_uint("seed", 0);
  for (std::size_t v : doc.get_sizes("histogram", {})) m.histogram.push_back(v);
  if (m.count == 0 || m.num_classes < 2) throw FormatError((dir / "manifest.txt").string() + ": incomplete manifest");
  return m;
}

SegBatch load_batch(const std::filesystem::path& dir, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw ContractError("load_batch: no indices");
  SegBatch batch;
  std::vector<float> pixels;
  std::size_t h = 0, w = 0;
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto ipath = image_path(dir, indices[k]);
    const Tensor image = load_tensor(ipath);
    const PgmImage labels = read_pgm(label_path(dir, indices[k]));
    if (image.dim(0) != 1 || image.dim(1) != 3) {
      throw FormatError(ipath.string() + ": expected a 1x3xHxW image, got " + to_string(image.shape()));
    }
    if (k == 0) {
      h = image.dim(2);
      w = image.dim(3);
      batch.labels = LabelMap(indices.size(), h, w);
    }
    if (image.dim(2) != h || image.dim(3) != w || labels.height != h || labels.width != w) {
      throw FormatError(ipath.string() + ": image/label extents disagree within the batch");
    }
    pixels.insert(pixels.end(), image.data().begin(), image.data().end());
    for (std::size_t p = 0; p < labels.pixels.size(); ++p) batch.labels.values[k * h * w + p] = labels.pixels[p];
  }
  batch.images = Tensor(Shape{indices.size(), 3, h, w}, std::move(pixels));
  return batch;
}

}  // namespace frm
