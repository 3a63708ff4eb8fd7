#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "frm/config.hpp"
#include "frm/datagen.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string output;
};

fs::path work() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / "frm_test_cli";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Result run(const std::string& args) {
  const fs::path log = work() / "last_output.txt";
  const std::string command = std::string(FRM_BINARY) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(command.c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.output = slurp(log);
  return r;
}

bool contains(const std::string& text, const std::string& needle) { return text.find(needle) != std::string::npos; }

// Tiny dataset and model settings shared by the training commands.
const std::string kSmall =
    " --set holdout=2 --set channels=8,8,16,16 --set decoder_width=16 --set embed_dim=8 --set eval_batch=4"
    " --set log_interval=2 --set eval_interval=2 --set crop=32";

fs::path dataset() {
  static const fs::path dir = [] {
    const auto d = work() / "data";
    const auto r = run("gen --out " + d.string() + " --size 32x32 --count 8 --classes 3");
    REQUIRE(r.code == 0);
    return d;
  }();
  return dir;
}

fs::path trained() {
  static const fs::path dir = [] {
    const auto d = work() / "run";
    const auto r = run("train --data " + dataset().string() + " --out " + d.string() + " --iters 4 --batch 2" + kSmall);
    INFO(r.output);
    REQUIRE(r.code == 0);
    return d;
  }();
  return dir;
}

}  // namespace

TEST_CASE("missing or unknown subcommands are usage errors") {
  CHECK(run("").code == 2);
  CHECK(run("frobnicate").code == 2);
  CHECK(run("train --bogus-flag").code == 2);
  CHECK(run("--help").code == 0);
}

TEST_CASE("gen writes a dataset and provenance") {
  const auto dir = dataset();
  CHECK(fs::exists(dir / "manifest.txt"));
  CHECK(fs::exists(dir / "images" / "0007.frmt"));
  const auto prov = frm::KeyValueConfig::load(dir / "run.txt");
  CHECK(prov.get("command", "") == "gen");
  CHECK(prov.get("size", "") == "32x32");
  CHECK(prov.get_uint("num_classes", 0) == 3);
  CHECK(frm::read_manifest(dir).count == 8);
}

TEST_CASE("train writes checkpoint, metrics and summary") {
  const auto dir = trained();
  CHECK(fs::exists(dir / "checkpoint" / "weights.frmt"));
  const std::string metrics = slurp(dir / "metrics.csv");
  CHECK(metrics.rfind("iteration,lr,loss,ce,cl,holdout_miou\n", 0) == 0);
  const auto summary = frm::KeyValueConfig::load(dir / "summary.txt");
  CHECK(summary.get_uint("iterations", 0) == 4);
  CHECK(summary.has("final_loss_hex"));
  const auto prov = frm::KeyValueConfig::load(dir / "run.txt");
  CHECK(prov.get("command", "") == "train");
  CHECK(prov.get_uint("iters", 0) == 4);
  CHECK(prov.get_uint("num_classes", 0) == 3);
}

TEST_CASE("config precedence: defaults < file < flags") {
  const auto file = work() / "cfg.txt";
  std::ofstream(file) << "iters=3\nbatch=3\nlr0=0.05\n";
  const auto out = work() / "precedence";
  const auto r = run("train --data " + dataset().string() + " --out " + out.string() + " --config " + file.string() +
                     " --iters 2" + kSmall);
  INFO(r.output);
  REQUIRE(r.code == 0);
  const auto prov = frm::KeyValueConfig::load(out / "run.txt");
  CHECK(prov.get_uint("iters", 0) == 2);
  CHECK(prov.get_uint("batch", 0) == 3);
  CHECK(prov.get_double("lr0", 0) == 0.05);
  CHECK(prov.get_double("momentum", 0) == 0.9);
}

TEST_CASE("resume continues the iteration counter") {
  const auto out = work() / "resumed";
  const auto r = run("train --data " + dataset().string() + " --out " + out.string() + " --checkpoint " +
                     (trained() / "checkpoint").string() + " --iters 6 --batch 2" + kSmall);
  INFO(r.output);
  REQUIRE(r.code == 0);
  CHECK(contains(r.output, "resuming at iteration 4"));
  CHECK(frm::KeyValueConfig::load(out / "summary.txt").get_uint("iterations", 0) == 6);
  const std::string metrics = slurp(out / "metrics.csv");
  CHECK(contains(metrics, "\n6,"));
  CHECK_FALSE(contains(metrics, "\n2,"));
}

TEST_CASE("the ppm and dappm heads train") {
  for (const std::string head : {"ppm", "dappm"}) {
    const auto out = work() / ("head_" + head);
    const auto r = run("train --data " + dataset().string() + " --out " + out.string() + " --context-head " + head +
                       " --iters 2 --batch 2" + kSmall);
    INFO(r.output);
    CHECK(r.code == 0);
  }
}

TEST_CASE("train and eval argument errors") {
  CHECK(run("train --data " + (work() / "nowhere").string() + " --out " + (work() / "x").string()).code == 2);
  CHECK(run("train --data " + dataset().string()).code == 2);
  CHECK(run("train --data " + dataset().string() + " --out " + (work() / "bad").string() + " --classes 4" + kSmall)
            .code == 2);
  CHECK(run("train --data " + dataset().string() + " --out " + (work() / "bad").string() + " --set iters=abc").code ==
        2);
  CHECK(run("train --data " + dataset().string() + " --out " + (work() / "bad").string() + " --set novalue").code == 2);
  CHECK(run("train --data " + dataset().string() + " --out " + (work() / "bad").string() + " --config " +
            (work() / "absent.txt").string())
            .code == 2);
}

TEST_CASE("eval reports per-class IoU and is repeatable") {
  const std::string args =
      "eval --data " + dataset().string() + " --checkpoint " + (trained() / "checkpoint").string() + " --set holdout=2";
  const auto a = run(args);
  const auto b = run(args);
  CHECK(a.code == 0);
  CHECK(contains(a.output, "class 2  IoU"));
  CHECK(contains(a.output, "mIoU"));
  CHECK(a.output == b.output);
  CHECK(run(args + " --split all").code == 0);
  CHECK(run(args + " --split bogus").code == 2);
}

TEST_CASE("eval rejects a dataset with a different class count") {
  const auto other = work() / "data4";
  REQUIRE(run("gen --out " + other.string() + " --size 32x32 --count 4 --classes 4").code == 0);
  const auto r = run("eval --data " + other.string() + " --checkpoint " + (trained() / "checkpoint").string() +
                     " --set holdout=2");
  CHECK(r.code == 2);
  CHECK(contains(r.output, "classes"));
}

TEST_CASE("broken checkpoints are format errors") {
  const auto broken = work() / "broken";
  fs::remove_all(broken);
  fs::copy(trained() / "checkpoint", broken);
  std::ofstream(broken / "weights.frmt") << "garbage";
  CHECK(run("eval --data " + dataset().string() + " --checkpoint " + broken.string() + " --set holdout=2").code == 3);
  CHECK(run("eval --data " + dataset().string() + " --checkpoint " + (work() / "none").string() + " --set holdout=2")
            .code == 3);
}

TEST_CASE("infer writes a mask of the image size") {
  const auto mask = work() / "mask.pgm";
  const auto r = run("infer --checkpoint " + (trained() / "checkpoint").string() + " --image " +
                     frm::image_path(dataset(), 0).string() + " --out " + mask.string());
  INFO(r.output);
  REQUIRE(r.code == 0);
  const auto pgm = frm::read_pgm(mask);
  CHECK(pgm.height == 32);
  CHECK(pgm.width == 32);
  for (auto v : pgm.pixels) CHECK(v < 3);
  CHECK(run("infer --checkpoint " + (trained() / "checkpoint").string() + " --image " +
            frm::label_path(dataset(), 0).string() + " --out " + mask.string())
            .code == 3);
}

TEST_CASE("gradcheck passes, is seeded, and names an injected fault") {
  const auto a = run("gradcheck --seed 7");
  const auto b = run("gradcheck --seed 7");
  CHECK(a.code == 0);
  CHECK(a.output == b.output);
  CHECK(contains(a.output, "gradcheck passed"));
  const auto bad = run("gradcheck --inject-fault softmax");
  CHECK(bad.code == 1);
  CHECK(contains(bad.output, "gradcheck FAILED: softmax"));
}

TEST_CASE("oracle sweep passes") {
  const auto r = run("oracle");
  CHECK(r.code == 0);
  CHECK(contains(r.output, "PASS"));
  CHECK(run("oracle").output == r.output);
}

TEST_CASE("bench writes tables for every head") {
  const auto out = work() / "bench";
  const auto r = run("bench --size 64x64 --out " + out.string());
  REQUIRE(r.code == 0);
  for (const std::string head : {"frm", "ppm", "dappm"}) {
    CHECK(contains(r.output, head));
    CHECK(fs::exists(out / ("costs_" + head + ".csv")));
  }
  CHECK(fs::exists(out / "bench.csv"));
  CHECK(run("bench --mode sideways").code == 2);
  CHECK(run("bench --size 64").code == 2);
}
