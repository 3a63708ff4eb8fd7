#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <iterator>

#include "frm/datagen.hpp"
#include "frm/tensor_io.hpp"
#include "oracles.hpp"

using namespace frm;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("frm_test_datagen_" + name);
  fs::remove_all(dir);
  return dir;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("regeneration is byte-identical") {
  SceneSpec spec;
  spec.seed = 7;
  const auto a = scratch("a");
  const auto b = scratch("b");
  generate(spec, 10, a);
  generate(spec, 10, b);
  std::size_t files = 0;
  for (const auto& entry : fs::recursive_directory_iterator(a)) {
    if (!entry.is_regular_file()) continue;
    const auto other = b / fs::relative(entry.path(), a);
    REQUIRE(fs::exists(other));
    CHECK(slurp(entry.path()) == slurp(other));
    ++files;
  }
  CHECK(files == 21);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("a different seed gives different scenes") {
  SceneSpec one, two;
  two.seed = 2;
  CHECK(render_scene(one, 0).labels.values != render_scene(two, 0).labels.values);
  CHECK(render_scene(one, 0).labels.values != render_scene(one, 1).labels.values);
}

TEST_CASE("single rectangle label area matches the painted area") {
  SceneSpec spec;
  spec.num_classes = 2;
  spec.min_shapes = spec.max_shapes = 1;
  spec.noise = 0.0;
  const auto color = class_color(1, 2);
  for (std::size_t i = 0; i < 20; ++i) {
    auto scene = render_scene(spec, i);
    REQUIRE(scene.shapes.size() == 1);
    const auto& shape = scene.shapes[0];
    CHECK(shape.kind == ShapeKind::kRectangle);
    std::size_t labelled = 0, painted = 0;
    for (std::size_t y = 0; y < spec.height; ++y)
      for (std::size_t x = 0; x < spec.width; ++x) {
        labelled += scene.labels.at(0, y, x) == 1;
        bool match = true;
        for (std::size_t c = 0; c < 3; ++c) match = match && scene.image.at(0, c, y, x) == color[c];
        painted += match;
      }
    CHECK(labelled == (shape.y1 - shape.y0) * (shape.x1 - shape.x0));
    CHECK(painted == labelled);
  }
}

TEST_CASE("labels and pixel values stay in range") {
  SceneSpec spec;
  spec.num_classes = 7;
  for (std::size_t i = 0; i < 10; ++i) {
    auto scene = render_scene(spec, i);
    for (auto v : scene.labels.values) CHECK((v >= 0 && v < 7));
    for (float v : scene.image.data()) CHECK((v >= 0.0f && v <= 1.0f));
  }
  CHECK(shape_kind_for_class(1) == ShapeKind::kRectangle);
  CHECK(shape_kind_for_class(2) == ShapeKind::kDisk);
  CHECK(shape_kind_for_class(3) == ShapeKind::kStripes);
  CHECK(shape_kind_for_class(4) == ShapeKind::kRectangle);
}

TEST_CASE("scene specification errors") {
  SceneSpec spec;
  spec.num_classes = 1;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  spec.num_classes = 3;
  spec.min_shapes = 5;
  spec.max_shapes = 2;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
}

TEST_CASE("manifest histogram equals a recount of the written labels") {
  SceneSpec spec;
  spec.seed = 3;
  const auto dir = scratch("hist");
  const auto manifest = generate(spec, 12, dir);
  std::vector<std::uint64_t> recount(spec.num_classes, 0);
  for (std::size_t i = 0; i < 12; ++i) {
    const auto pgm = read_pgm(label_path(dir, i));
    for (auto v : pgm.pixels) ++recount.at(v);
  }
  CHECK(recount == manifest.histogram);
  const auto back = read_manifest(dir);
  CHECK(back.histogram == manifest.histogram);
  CHECK(back.count == 12);
  CHECK(back.num_classes == spec.num_classes);
  fs::remove_all(dir);
}

TEST_CASE("written datasets load back exactly, in index order") {
  SceneSpec spec;
  spec.seed = 4;
  const auto dir = scratch("roundtrip");
  generate(spec, 6, dir);
  const std::vector<std::size_t> order{3, 1, 5, 0};
  const auto batch = load_batch(dir, order);
  CHECK(batch.images.shape() == Shape{4, 3, 64, 64});
  CHECK(batch.labels.n == 4);
  const std::size_t plane = 3 * 64 * 64;
  for (std::size_t b = 0; b < order.size(); ++b) {
    const auto scene = render_scene(spec, order[b]);
    std::vector<float> pixels(batch.images.data().begin() + static_cast<std::ptrdiff_t>(b * plane),
                              batch.images.data().begin() + static_cast<std::ptrdiff_t>((b + 1) * plane));
    CHECK(pixels == scene.image.to_vector());
    std::vector<std::int32_t> labels(batch.labels.values.begin() + static_cast<std::ptrdiff_t>(b * 64 * 64),
                                     batch.labels.values.begin() + static_cast<std::ptrdiff_t>((b + 1) * 64 * 64));
    CHECK(labels == scene.labels.values);
  }
  CHECK_THROWS_AS(load_batch(dir, {6}), std::exception);
  fs::remove_all(dir);
}

TEST_CASE("PGM validation") {
  const auto dir = scratch("pgm");
  fs::create_directories(dir);
  const auto good = dir / "good.pgm";
  write_pgm(good, 2, 3, {0, 1, 2, 3, 4, 255});
  const auto pgm = read_pgm(good);
  CHECK(pgm.height == 2);
  CHECK(pgm.width == 3);
  CHECK(pgm.pixels == std::vector<std::uint8_t>{0, 1, 2, 3, 4, 255});
  CHECK(slurp(good).rfind("P5", 0) == 0);

  const auto bad = dir / "maxval.pgm";
  {
    std::ofstream out(bad, std::ios::binary);
    out << "P5\n2 2\n15\n";
    out.write("\x01\x02\x03\x04", 4);
  }
  CHECK_THROWS_WITH_AS(read_pgm(bad), doctest::Contains("maxval.pgm"), FormatError);

  const auto magic = dir / "magic.pgm";
  {
    std::ofstream out(magic, std::ios::binary);
    out << "P2\n1 1\n255\n0\n";
  }
  CHECK_THROWS_AS(read_pgm(magic), FormatError);
  const auto short_file = dir / "short.pgm";
  {
    std::ofstream out(short_file, std::ios::binary);
    out << "P5\n4 4\n255\n";
    out.write("\x01\x02", 2);
  }
  CHECK_THROWS_AS(read_pgm(short_file), FormatError);
  fs::remove_all(dir);
}

TEST_CASE("a corrupt image file is reported by name") {
  SceneSpec spec;
  const auto dir = scratch("corrupt");
  generate(spec, 2, dir);
  {
    std::ofstream out(image_path(dir, 1), std::ios::binary);
    out << "JUNKJUNKJUNK";
  }
  const std::string name = image_path(dir, 1).filename().string();
  CHECK_THROWS_WITH_AS(load_batch(dir, {0, 1}), doctest::Contains(name.c_str()), FormatError);
  fs::remove_all(dir);
}

TEST_CASE("colours alone separate the classes") {
  // Nearest class mean in RGB is a linear decision rule:
  // argmax_k (mu_k . x - |mu_k|^2 / 2).
  SceneSpec spec;
  spec.seed = 11;
  const std::size_t k = spec.num_classes;
  std::vector<std::array<double, 3>> mean(k, {0, 0, 0});
  std::vector<double> count(k, 0);
  for (std::size_t i = 0; i < 40; ++i) {
    auto scene = render_scene(spec, i);
    for (std::size_t y = 0; y < spec.height; ++y)
      for (std::size_t x = 0; x < spec.width; ++x) {
        const auto c = static_cast<std::size_t>(scene.labels.at(0, y, x));
        for (std::size_t ch = 0; ch < 3; ++ch) mean[c][ch] += scene.image.at(0, ch, y, x);
        ++count[c];
      }
  }
  for (std::size_t c = 0; c < k; ++c)
    for (double& v : mean[c]) v /= std::max(1.0, count[c]);
  std::vector<std::int32_t> pred, truth;
  for (std::size_t i = 40; i < 60; ++i) {
    auto scene = render_scene(spec, i);
    for (std::size_t y = 0; y < spec.height; ++y)
      for (std::size_t x = 0; x < spec.width; ++x) {
        double best = -1e300;
        std::int32_t arg = 0;
        for (std::size_t c = 0; c < k; ++c) {
          double score = 0;
          for (std::size_t ch = 0; ch < 3; ++ch) {
            score += mean[c][ch] * scene.image.at(0, ch, y, x) - 0.5 * mean[c][ch] * mean[c][ch];
          }
          if (score > best) {
            best = score;
            arg = static_cast<std::int32_t>(c);
          }
        }
        pred.push_back(arg);
        truth.push_back(scene.labels.at(0, y, x));
      }
  }
  std::vector<bool> present;
  const auto iou = oracle::brute_iou(pred, truth, k, kIgnoreIndex, present);
  double total = 0, classes = 0;
  for (std::size_t c = 0; c < k; ++c) {
    if (!present[c]) continue;
    total += iou[c];
    ++classes;
  }
  CHECK(total / classes >= 0.6);
}
