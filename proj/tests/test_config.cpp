#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <sstream>

#include "frm/config.hpp"
#include "frm/model.hpp"
#include "frm/trainer.hpp"

using namespace frm;

namespace {

KeyValueConfig parse(const std::string& text) {
  std::istringstream in(text);
  return KeyValueConfig::parse(in, "inline");
}

}  // namespace

TEST_CASE("key=value parsing") {
  auto c = parse("# comment\n\nlr0 = 0.02\ncrop=48x40\n  name = ppm  \nchannels=8,16,32,64\nflag=true\n");
  CHECK(c.get_double("lr0", 0) == 0.02);
  CHECK(c.get("crop", "") == "48x40");
  CHECK(c.get("name", "") == "ppm");
  CHECK(c.get_sizes("channels", {}) == std::vector<std::size_t>{8, 16, 32, 64});
  CHECK(c.get_bool("flag", false));
  CHECK(c.get_uint("missing", 9) == 9);
  CHECK_FALSE(c.has("missing"));
}

TEST_CASE("malformed documents name the line") {
  CHECK_THROWS_WITH_AS(parse("a=1\nnot a pair\n"), doctest::Contains("inline:2"), ConfigError);
  auto c = parse("n=abc\nx=1.5z\nb=maybe\n");
  CHECK_THROWS_AS(c.get_uint("n", 0), ConfigError);
  CHECK_THROWS_AS(c.get_double("x", 0), ConfigError);
  CHECK_THROWS_AS(c.get_bool("b", false), ConfigError);
}

TEST_CASE("written form is canonical and round-trips") {
  KeyValueConfig c;
  c.set("b", std::uint64_t{2});
  c.set("a", 0.1);
  c.set_sizes("plan", {1, 2});
  const std::string text = c.str();
  CHECK(text.find("a=") < text.find("b="));
  auto back = parse(text);
  CHECK(back.entries() == c.entries());
  CHECK(back.get_double("a", 0) == 0.1);
}

TEST_CASE("later values win on merge") {
  auto base = parse("a=1\nb=2\n");
  base.merge(parse("b=3\nc=4\n"));
  CHECK(base.get_int("a", 0) == 1);
  CHECK(base.get_int("b", 0) == 3);
  CHECK(base.get_int("c", 0) == 4);
}

TEST_CASE("sizes") {
  CHECK(parse_size("64x32") == std::pair<std::size_t, std::size_t>{64, 32});
  CHECK_THROWS_AS(parse_size("64"), ConfigError);
  CHECK_THROWS_AS(parse_size("0x4"), ConfigError);
}

TEST_CASE("files") {
  const auto path = std::filesystem::temp_directory_path() / "frm_test_config.txt";
  auto c = parse("k=v\n");
  c.save(path);
  CHECK(KeyValueConfig::load(path).get("k", "") == "v");
  std::filesystem::remove(path);
  CHECK_THROWS_AS(KeyValueConfig::load(path), IoError);
}

TEST_CASE("model config round trip and validation") {
  ModelConfig m;
  m.channels = {8, 16, 32, 64};
  m.context_head = "dappm";
  m.num_classes = 5;
  KeyValueConfig doc;
  m.write(doc);
  auto back = ModelConfig::read(doc);
  CHECK(back.channels == m.channels);
  CHECK(back.context_head == "dappm");
  CHECK(back.num_classes == 5);
  CHECK(back.concat_channels() == 120);
  CHECK_NOTHROW(back.validate());
  back.context_head = "aspp";
  CHECK_THROWS_AS(back.validate(), ConfigError);
  back.context_head = "frm";
  back.num_classes = 1;
  CHECK_THROWS_AS(back.validate(), ConfigError);
  doc.set("channels", "8,16,32");
  CHECK_THROWS_AS(ModelConfig::read(doc), ConfigError);
}

TEST_CASE("train config reads crop as one number or HxW") {
  auto square = TrainConfig::read(parse("crop=48\n"));
  CHECK(square.crop_h == 48);
  CHECK(square.crop_w == 48);
  auto rect = TrainConfig::read(parse("crop=32x48\nlambda=0.5\ntau=0.2\n"));
  CHECK(rect.crop_h == 32);
  CHECK(rect.crop_w == 48);
  CHECK(rect.loss.lambda == 0.5);
  CHECK(rect.loss.tau == 0.2);
  CHECK_THROWS_AS(TrainConfig::read(parse("batch=0\n")), ConfigError);
}
