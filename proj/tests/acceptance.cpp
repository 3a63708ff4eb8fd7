// Acceptance run: one PASS/FAIL line per criterion; exit status 1 if any
// fails. The toy training criterion drives the frm binary end to end.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <tuple>

#include "frm/config.hpp"
#include "frm/datagen.hpp"
#include "frm/frm.hpp"
#include "frm/gradcheck.hpp"
#include "frm/losses.hpp"
#include "frm/profiler.hpp"
#include "frm/reference.hpp"
#include "frm/trainer.hpp"

using namespace frm;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(const std::string& name, const std::function<Outcome()>& check) {
  Outcome o;
  try {
    o = check();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  if (!o.pass) ++failures;
  std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << std::endl;
}

std::string fmt(double v) {
  std::ostringstream out;
  out << v;
  return out.str();
}

Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, float stddev = 1.0f) {
  Tensor t(shape);
  std::normal_distribution<float> normal(0.0f, stddev);
  for (float& v : t.mutable_data()) v = normal(rng);
  return t;
}

Outcome dnl_oracle() {
  const auto start = Clock::now();
  const auto sweep = run_dnl_oracle_sweep(1, 4, {4, 8}, 1e-5);
  const double secs = seconds_since(start);
  return {sweep.passed() && sweep.max_deviation() < 1e-5 && secs < 10.0,
          std::to_string(sweep.cases.size()) + " cases, max deviation " + fmt(sweep.max_deviation()) + " (< 1e-5), " +
              fmt(secs) + " s (< 10 s)"};
}

Outcome row_sums() {
  std::mt19937_64 rng(2);
  double worst = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t h = 1 + trial % 5;
    const std::size_t w = 1 + (trial / 5) % 5;
    DnlBlock<float> block(DnlConfig{8, true});
    block.init_kaiming(rng);
    const auto maps = block.transforms(random_tensor({2, 8, h, w}, rng, 2.0f));
    const auto rows = sum_axis(dnl_attention_weights(maps.query, maps.key, maps.unary), 3);
    for (float s : rows.data()) worst = std::max(worst, std::abs(static_cast<double>(s) - 2.0));
  }
  return {worst <= 1e-5, "50 inputs, max |row sum - 2| " + fmt(worst) + " (<= 1e-5)"};
}

// Largest change of the attention output when q, k or m is shifted by a
// per-channel constant.
template <typename T>
double worst_shift_change() {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> offset(0.0, 5.0);
  double worst = 0;
  for (int trial = 0; trial < 10; ++trial) {
    DnlBlock<T> block(DnlConfig{8, true});
    Rng init(static_cast<std::uint64_t>(trial));
    block.init_kaiming(init);
    BasicTensor<T> x(Shape{2, 8, 4, 3});
    std::normal_distribution<double> normal(0.0, 1.0);
    for (T& v : x.mutable_data()) v = static_cast<T>(normal(rng));
    const auto maps = block.transforms(x);
    const auto base = dnl_attend(maps);
    for (int which = 0; which < 3; ++which) {
      DnlMaps<T> shifted = maps;
      BasicTensor<T>* target = which == 0 ? &shifted.query : which == 1 ? &shifted.key : &shifted.unary;
      BasicTensor<T> shift(Shape{1, target->dim(1), 1, 1});
      for (T& v : shift.mutable_data()) v = static_cast<T>(offset(rng));
      *target = add(*target, shift);
      const auto y = dnl_attend(shifted);
      for (std::size_t i = 0; i < y.numel(); ++i) {
        worst = std::max(worst, std::abs(static_cast<double>(y.data()[i]) - static_cast<double>(base.data()[i])));
      }
    }
  }
  return worst;
}

// Float storage rounds q + s itself at about |s| * 6e-8, so the invariance is
// measured in double; the float figure is reported alongside.
Outcome shift_invariance() {
  const double exact = worst_shift_change<double>();
  const double single = worst_shift_change<float>();
  return {exact < 1e-6, "q, k, m shifts over 10 blocks, max change " + fmt(exact) + " in double (< 1e-6), " +
                            fmt(single) + " in float"};
}

Outcome gradient_suite() {
  const auto start = Clock::now();
  GradcheckOptions options;
  options.tolerance = 1e-5;
  const auto r = run_gradcheck(options);
  const double secs = seconds_since(start);
  const auto* worst = r.worst();
  std::string detail = std::to_string(r.components.size()) + " components";
  if (worst) detail += ", worst " + worst->name + " " + fmt(worst->worst_error);
  detail += " (< 1e-5), " + fmt(secs) + " s (< 120 s)";
  for (const auto& name : r.failures()) detail += ", failed " + name;
  return {r.passed() && secs < 120.0, detail};
}

Outcome loss_closed_forms() {
  double ce_worst = 0;
  for (std::size_t k : {2, 5, 19}) {
    Tensor logits(Shape{2, k, 3, 4}, 0.7f);
    LabelMap labels(2, 3, 4, static_cast<std::int32_t>(k - 1));
    ce_worst = std::max(ce_worst, std::abs(cross_entropy(logits, labels).value.item() - std::log(double(k))));
  }

  // Anchor along x; positive and negative mirrored about it.
  Tensor emb(Shape{1, 2, 1, 3});
  const float coords[3][2] = {{1, 0}, {0.6f, 0.8f}, {0.6f, -0.8f}};
  for (std::size_t j = 0; j < 3; ++j)
    for (std::size_t c = 0; c < 2; ++c) emb.at(0, c, 0, j) = coords[j][c];
  ContrastiveSample sample;
  for (std::size_t j = 0; j < 3; ++j) sample.pixels.push_back(PixelIndex{0, 0, j});
  sample.classes = {0, 0, 1};
  sample.terms.push_back(ContrastiveTerm{0, {1}, {2}});
  const double cl = contrastive_loss(emb, sample, 0.1).value.item();
  const double cl_err = std::abs(cl - std::log(2.0));

  std::mt19937_64 rng(4);
  auto logits = random_tensor({2, 5, 16, 16}, rng);
  auto embeddings = random_tensor({2, 8, 4, 4}, rng);
  LabelMap labels(2, 16, 16);
  std::uniform_int_distribution<std::int32_t> pick(0, 4);
  for (auto& v : labels.values) v = pick(rng);
  LossConfig config;
  config.lambda = 0.0;
  Rng sampler(5);
  const auto hybrid = hybrid_loss(logits, embeddings, labels, config, sampler);
  const bool exact = hybrid.total_value() == static_cast<double>(cross_entropy(logits, labels).value.item());

  return {ce_worst <= 1e-6 && cl_err <= 1e-6 && exact,
          "|CE - ln K| " + fmt(ce_worst) + ", |CL - ln 2| " + fmt(cl_err) + " (<= 1e-6), lambda=0 total " +
              (exact ? "==" : "!=") + " CE"};
}

int run_frm(const std::string& args, const fs::path& log) {
  const std::string command = std::string(FRM_BINARY) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(command.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path work_dir() {
  static const fs::path dir = [] {
    const auto d = fs::temp_directory_path() / "frm_acceptance";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

fs::path dataset() {
  static const fs::path dir = [] {
    const auto d = work_dir() / "data";
    if (run_frm("gen --out " + d.string() + " --seed 1 --count 320", work_dir() / "gen.log") != 0) {
      throw std::runtime_error("frm gen failed, see " + (work_dir() / "gen.log").string());
    }
    return d;
  }();
  return dir;
}

Outcome toy_training() {
  const auto data = dataset();
  const auto out = work_dir() / "train";
  const auto start = Clock::now();
  const int code = run_frm("train --data " + data.string() + " --out " + out.string(), work_dir() / "train.log");
  const double secs = seconds_since(start);
  if (code != 0) return {false, "frm train exited with " + std::to_string(code)};
  const auto summary = KeyValueConfig::load(out / "summary.txt");
  const auto run = KeyValueConfig::load(out / "run.txt");
  const double holdout = summary.get_double("holdout_miou", 0);
  const bool config_ok = run.get_uint("iters", 0) == 1000 && run.get_uint("holdout", 0) == 64 &&
                         run.get_double("lambda", 0) == 1.0 && run.get_double("tau", 0) == 0.1 &&
                         read_manifest(data).count == 320 && read_manifest(data).num_classes == 5;
  return {config_ok && holdout >= 0.85 && secs < 900.0,
          "256 train / 64 holdout, 1000 iterations, holdout mIoU " + fmt(holdout) + " (>= 0.85), " + fmt(secs) +
              " s (< 900 s)" + (config_ok ? "" : ", unexpected configuration")};
}

Outcome bench_structure() {
  ModelConfig config;
  config.num_classes = 5;
  const auto cmp = compare_heads(config, 64, 64, {"frm", "ppm", "dappm"}, Mode::kInference);
  auto shared = [](const CostReport& r) {
    std::vector<std::tuple<std::string, std::uint64_t, std::uint64_t>> rows;
    for (const auto& row : r.rows) {
      if (row.path.rfind("context", 0) != 0) rows.emplace_back(row.path, row.params, row.flops);
    }
    return rows;
  };
  bool ok = cmp.reports.size() == 3;
  std::string detail;
  for (const auto& r : cmp.reports) {
    const auto context = r.subtotal("context");
    ok = ok && context.params > 0 && context.flops > 0 && shared(r) == shared(cmp.reports[0]) &&
         r.subtotal("embed").flops == 0 && r.subtotal("embed").params == 0;
    detail += r.context_head + " " + fmt(static_cast<double>(r.total_flops())) + " FLOPs, ";
  }
  const auto training = count_costs(config, 64, 64, Mode::kTraining);
  const auto inference = count_costs(config, 64, 64, Mode::kInference);
  ok = ok && training.total_flops() - inference.total_flops() == training.subtotal("embed").flops;
  return {ok, detail + "non-context rows identical, inference embed FLOPs " +
                  fmt(static_cast<double>(inference.subtotal("embed").flops))};
}

Outcome determinism() {
  const auto split = load_split(dataset(), 64);
  auto train_once = [&] {
    ModelConfig mc;
    mc.num_classes = 5;
    SegModel<float> model(mc);
    TrainConfig tc;
    tc.iters = 20;
    model.init(tc.seed);
    Trainer trainer(model, tc, split.train);
    trainer.run();
    return trainer.last_loss();
  };
  const double a = train_once();
  const double b = train_once();
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", a);
  return {std::memcmp(&a, &b, sizeof a) == 0, "two 20-iteration runs, final loss " + std::string(buf) +
                                                   (a == b ? " both times" : " vs " + fmt(b))};
}

}  // namespace

int main() {
  report("dnl oracle equivalence", dnl_oracle);
  report("attention weight normalization", row_sums);
  report("whitening and unary shift invariance", shift_invariance);
  report("gradient suite", gradient_suite);
  report("loss closed forms", loss_closed_forms);
  report("toy training", toy_training);
  report("bench structure", bench_structure);
  report("determinism", determinism);
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
