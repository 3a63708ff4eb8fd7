#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "frm/config.hpp"
#include "frm/datagen.hpp"
#include "frm/gradcheck.hpp"
#include "frm/model.hpp"
#include "frm/profiler.hpp"
#include "frm/reference.hpp"
#include "frm/tensor_io.hpp"
#include "frm/trainer.hpp"

namespace fs = std::filesystem;
using namespace frm;

namespace {

constexpr int kOk = 0;
constexpr int kCheckFailed = 1;
constexpr int kUsage = 2;
constexpr int kIo = 3;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Flag values; unset optionals leave the config untouched.
struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string data;
  std::string out;
  std::optional<std::string> context_head;
  std::optional<std::string> size;
  std::string checkpoint;
  std::vector<std::string> set;

  // gen
  std::optional<std::uint64_t> count;
  std::optional<std::uint64_t> classes;
  // train
  std::optional<std::uint64_t> iters;
  std::optional<std::uint64_t> batch;
  std::optional<double> lambda;
  std::optional<double> tau;
  std::optional<double> lr0;
  // eval
  std::string split = "holdout";
  // gradcheck
  std::string inject_fault;
  std::optional<std::uint64_t> probes;
  // bench
  std::string mode = "inference";
  // infer
  std::string image;
};

KeyValueConfig defaults() {
  KeyValueConfig kv;
  ModelConfig model;
  model.num_classes = 5;
  model.write(kv);
  TrainConfig{}.write(kv);
  const SceneSpec scene;
  kv.set("count", std::uint64_t{320});
  kv.set("holdout", std::uint64_t{64});
  kv.set("size", std::to_string(scene.height) + "x" + std::to_string(scene.width));
  kv.set("noise", scene.noise);
  kv.set("min_shapes", static_cast<std::uint64_t>(scene.min_shapes));
  kv.set("max_shapes", static_cast<std::uint64_t>(scene.max_shapes));
  kv.set("eval_interval", std::uint64_t{250});
  kv.set("eval_batch", std::uint64_t{16});
  return kv;
}

// defaults < config file < flags
KeyValueConfig resolve(const Flags& f) {
  KeyValueConfig kv = defaults();
  if (!f.config.empty()) {
    if (!fs::exists(f.config)) throw UsageError("config file not found: " + f.config);
    kv.merge(KeyValueConfig::load(f.config));
  }
  KeyValueConfig flags;
  if (f.seed) flags.set("seed", *f.seed);
  if (f.context_head) flags.set("context_head", *f.context_head);
  if (f.size) flags.set("size", *f.size);
  if (f.count) flags.set("count", *f.count);
  if (f.classes) flags.set("num_classes", *f.classes);
  if (f.iters) flags.set("iters", *f.iters);
  if (f.batch) flags.set("batch", *f.batch);
  if (f.lambda) flags.set("lambda", *f.lambda);
  if (f.tau) flags.set("tau", *f.tau);
  if (f.lr0) flags.set("lr0", *f.lr0);
  for (const auto& entry : f.set) {
    const auto eq = entry.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError("--set expects key=value, got '" + entry + "'");
    flags.set(entry.substr(0, eq), entry.substr(eq + 1));
  }
  kv.merge(flags);
  return kv;
}

void write_provenance(const fs::path& dir, const std::string& command, const KeyValueConfig& kv) {
  fs::create_directories(dir);
  std::ofstream out(dir / "run.txt");
  if (!out) throw IoError("cannot write " + (dir / "run.txt").string());
  out << "# frm " << command << "\n" << "command=" << command << "\n" << kv.str();
}

SceneSpec scene_from(const KeyValueConfig& kv) {
  SceneSpec spec;
  std::tie(spec.height, spec.width) = parse_size(kv.get("size", "64x64"));
  spec.num_classes = kv.get_uint("num_classes", spec.num_classes);
  spec.min_shapes = kv.get_uint("min_shapes", spec.min_shapes);
  spec.max_shapes = kv.get_uint("max_shapes", spec.max_shapes);
  spec.noise = kv.get_double("noise", spec.noise);
  spec.seed = kv.get_uint("seed", spec.seed);
  spec.validate();
  return spec;
}

std::string hex_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

std::string format_miou(const MiouResult& r) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(4);
  for (std::size_t c = 0; c < r.per_class.size(); ++c) {
    out << "class " << c << "  IoU ";
    if (r.per_class[c]) {
      out << *r.per_class[c];
    } else {
      out << "n/a";
    }
    out << "\n";
  }
  if (r.defined) {
    out << "mIoU " << r.miou << "\n";
  } else {
    out << "mIoU undefined (no labelled pixels)\n";
  }
  return out.str();
}

void require_dataset(const Flags& f) {
  if (f.data.empty()) throw UsageError("--data is required");
  if (!fs::exists(fs::path(f.data) / "manifest.txt")) {
    throw UsageError("no dataset at " + f.data + " (run 'frm gen' first)");
  }
}

int cmd_gen(const Flags& f) {
  if (f.out.empty()) throw UsageError("gen needs --out");
  const KeyValueConfig kv = resolve(f);
  const SceneSpec spec = scene_from(kv);
  const std::size_t count = kv.get_uint("count", 320);
  write_provenance(f.out, "gen", kv);
  const auto manifest = generate(spec, count, f.out);
  std::cout << "wrote " << manifest.count << " images (" << spec.height << "x" << spec.width << ", K=" << spec.num_classes
            << ") to " << f.out << "\n";
  return kOk;
}

int cmd_train(const Flags& f) {
  require_dataset(f);
  if (f.out.empty()) throw UsageError("train needs --out");
  KeyValueConfig kv = resolve(f);
  std::optional<Checkpoint> resume;
  if (!f.checkpoint.empty()) {
    resume = load_checkpoint(f.checkpoint);
    // The architecture comes from the checkpoint; schedule settings may be
    // overridden.
    KeyValueConfig arch;
    ModelConfig::read(resume->config).write(arch);
    kv.merge(arch);
  }

  const std::size_t holdout = kv.get_uint("holdout", 64);
  const DatasetSplit data = load_split(f.data, holdout);
  const bool classes_given = resume.has_value() || f.classes.has_value() ||
                             (!f.config.empty() && KeyValueConfig::load(f.config).has("num_classes"));
  if (!classes_given) kv.set("num_classes", static_cast<std::uint64_t>(data.manifest.num_classes));
  const ModelConfig model_config = ModelConfig::read(kv);
  if (model_config.num_classes != data.manifest.num_classes) {
    throw ConfigError("model has " + std::to_string(model_config.num_classes) + " classes, dataset has " +
                      std::to_string(data.manifest.num_classes));
  }
  const TrainConfig train_config = TrainConfig::read(kv);
  const std::size_t eval_interval = kv.get_uint("eval_interval", 250);
  const std::size_t eval_batch = kv.get_uint("eval_batch", 16);
  write_provenance(f.out, "train", kv);

  SegModel<float> model(model_config);
  model.init(train_config.seed);
  Trainer trainer(model, train_config, data.train);
  if (resume) {
    load_weights(model, *resume);
    trainer.import_state(resume->tensors, resume->config.get_uint("iteration", 0));
    std::cout << "resuming at iteration " << trainer.iteration() << "\n";
  }

  const fs::path metrics_path = fs::path(f.out) / "metrics.csv";
  const bool append = resume && fs::exists(metrics_path);
  std::ofstream metrics(metrics_path, append ? std::ios::app : std::ios::trunc);
  if (!metrics) throw IoError("cannot write " + metrics_path.string());
  if (!append) metrics << "iteration,lr,loss,ce,cl,holdout_miou\n";
  metrics << std::setprecision(9);

  const auto start = std::chrono::steady_clock::now();
  std::size_t last_eval = trainer.iteration();
  trainer.run([&](const TrainLogRow& row) {
    std::string miou_cell;
    if (row.iteration - last_eval >= eval_interval || row.iteration == train_config.iters) {
      const auto r = miou(evaluate(model, data.holdout, eval_batch, train_config.loss.ignore_index));
      miou_cell = std::to_string(r.miou);
      last_eval = row.iteration;
    }
    metrics << row.iteration << ',' << row.lr << ',' << row.loss << ',' << row.ce << ',' << row.cl << ','
            << miou_cell << "\n";
    metrics.flush();
    std::cout << "iter " << std::setw(5) << row.iteration << "  lr " << std::fixed << std::setprecision(5) << row.lr
              << "  loss " << row.loss << "  ce " << row.ce << "  cl " << row.cl
              << (miou_cell.empty() ? "" : "  holdout mIoU " + miou_cell) << "\n"
              << std::defaultfloat;
  });
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  KeyValueConfig meta;
  train_config.write(meta);
  meta.set("iteration", static_cast<std::uint64_t>(trainer.iteration()));
  save_checkpoint(fs::path(f.out) / "checkpoint", model, meta, trainer.export_state());

  const auto train_miou = miou(evaluate(model, data.train, eval_batch, train_config.loss.ignore_index));
  const auto val = miou(evaluate(model, data.holdout, eval_batch, train_config.loss.ignore_index));
  std::ostringstream summary;
  summary << "iterations=" << trainer.iteration() << "\n"
          << "final_loss=" << std::setprecision(17) << trainer.last_loss() << "\n"
          << "final_loss_hex=" << hex_double(trainer.last_loss()) << "\n"
          << "train_miou=" << train_miou.miou << "\n"
          << "holdout_miou=" << val.miou << "\n"
          << "seconds=" << std::setprecision(4) << seconds << "\n";
  std::ofstream(fs::path(f.out) / "summary.txt") << summary.str();
  std::cout << summary.str();
  return kOk;
}

int cmd_eval(const Flags& f) {
  require_dataset(f);
  if (f.checkpoint.empty()) throw UsageError("eval needs --checkpoint");
  const Checkpoint ckpt = load_checkpoint(f.checkpoint);
  KeyValueConfig kv = resolve(f);
  KeyValueConfig arch;
  ModelConfig::read(ckpt.config).write(arch);
  kv.merge(arch);
  const ModelConfig config = ModelConfig::read(kv);
  const std::size_t holdout = kv.get_uint("holdout", 64);
  const DatasetSplit data = load_split(f.data, holdout);
  if (config.num_classes != data.manifest.num_classes) {
    throw ConfigError("checkpoint has " + std::to_string(config.num_classes) + " classes, dataset has " +
                      std::to_string(data.manifest.num_classes));
  }
  if (!f.out.empty()) write_provenance(f.out, "eval", kv);

  SegModel<float> model(config);
  load_weights(model, ckpt);
  std::vector<SegSample> samples;
  if (f.split == "holdout") {
    samples = data.holdout;
  } else if (f.split == "train") {
    samples = data.train;
  } else {
    samples = data.train;
    samples.insert(samples.end(), data.holdout.begin(), data.holdout.end());
  }
  const auto r = miou(evaluate(model, samples, kv.get_uint("eval_batch", 16), static_cast<std::int32_t>(
                                                                                  kv.get_int("ignore_index", 255))));
  const std::string text = "split " + f.split + " (" + std::to_string(samples.size()) + " images)\n" + format_miou(r);
  std::cout << text;
  if (!f.out.empty()) std::ofstream(fs::path(f.out) / "eval.txt") << text;
  return kOk;
}

int cmd_gradcheck(const Flags& f) {
  const KeyValueConfig kv = resolve(f);
  if (!f.out.empty()) write_provenance(f.out, "gradcheck", kv);
  GradcheckOptions options;
  options.seed = kv.get_uint("seed", 1);
  if (f.probes) options.probes_per_tensor = *f.probes;
  if (!f.inject_fault.empty()) {
    debug::set_faulty_backward(f.inject_fault);
    std::cout << "fault injected into backward of '" << f.inject_fault << "'\n";
  }
  const auto report = run_gradcheck(options);
  debug::set_faulty_backward("");
  std::cout << report.format();
  if (report.passed()) {
    std::cout << "gradcheck passed: " << report.components.size() << " components\n";
    return kOk;
  }
  std::cout << "gradcheck FAILED:";
  for (const auto& name : report.failures()) std::cout << " " << name;
  std::cout << "\n";
  return kCheckFailed;
}

int cmd_oracle(const Flags& f) {
  const KeyValueConfig kv = resolve(f);
  if (!f.out.empty()) write_provenance(f.out, "oracle", kv);
  const auto sweep = run_dnl_oracle_sweep(kv.get_uint("seed", 1));
  std::cout << sweep.format();
  return sweep.passed() ? kOk : kCheckFailed;
}

int cmd_bench(const Flags& f) {
  const KeyValueConfig kv = resolve(f);
  const auto [h, w] = parse_size(kv.get("size", "64x64"));
  if (f.mode != "inference" && f.mode != "training") throw UsageError("--mode must be inference or training");
  const Mode mode = f.mode == "training" ? Mode::kTraining : Mode::kInference;
  const ModelConfig config = ModelConfig::read(kv);
  if (!f.out.empty()) write_provenance(f.out, "bench", kv);
  const auto cmp = compare_heads(config, h, w, {"frm", "ppm", "dappm"}, mode);
  std::cout << cmp.table();
  if (!f.out.empty()) {
    std::ofstream(fs::path(f.out) / "bench.txt") << cmp.table();
    std::ofstream(fs::path(f.out) / "bench.csv") << cmp.csv();
    for (const auto& r : cmp.reports) {
      std::ofstream(fs::path(f.out) / ("costs_" + r.context_head + ".txt")) << r.table();
      std::ofstream(fs::path(f.out) / ("costs_" + r.context_head + ".csv")) << r.csv();
    }
  }
  return kOk;
}

int cmd_infer(const Flags& f) {
  if (f.checkpoint.empty() || f.image.empty() || f.out.empty()) {
    throw UsageError("infer needs --checkpoint, --image and --out");
  }
  const Checkpoint ckpt = load_checkpoint(f.checkpoint);
  SegModel<float> model(ModelConfig::read(ckpt.config));
  load_weights(model, ckpt);
  const Tensor image = load_tensor(f.image);
  if (image.dim(0) != 1 || image.dim(1) != 3) {
    throw FormatError(f.image + ": expected a 1x3xHxW image, got " + to_string(image.shape()));
  }
  NoGradGuard no_grad;
  const auto labels = argmax_labels(model.forward(image, Mode::kInference).logits);
  std::vector<std::uint8_t> pixels(labels.values.begin(), labels.values.end());
  fs::path out(f.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_pgm(out, labels.h, labels.w, pixels);
  std::cout << "wrote " << labels.h << "x" << labels.w << " mask to " << f.out << "\n";
  return kOk;
}

void common_flags(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config, "key=value config file");
  cmd->add_option("--seed", f.seed, "random seed");
  cmd->add_option("--out", f.out, "output path");
  cmd->add_option("--set", f.set, "override a config key (key=value), repeatable");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Feature refinement module: data, training, checks and cost reports"};
  app.require_subcommand(1);
  Flags f;

  auto* gen = app.add_subcommand("gen", "generate a synthetic segmentation dataset");
  common_flags(gen, f);
  gen->add_option("--size", f.size, "image size HxW");
  gen->add_option("--count", f.count, "number of images");
  gen->add_option("--classes", f.classes, "class count K (background included)");

  auto* train = app.add_subcommand("train", "train a model on a generated dataset");
  common_flags(train, f);
  train->add_option("--data", f.data, "dataset directory");
  train->add_option("--context-head", f.context_head, "frm, ppm or dappm");
  train->add_option("--checkpoint", f.checkpoint, "resume from this checkpoint directory");
  train->add_option("--iters", f.iters, "total iterations");
  train->add_option("--batch", f.batch, "batch size");
  train->add_option("--lambda", f.lambda, "contrastive loss weight");
  train->add_option("--tau", f.tau, "contrastive temperature");
  train->add_option("--lr", f.lr0, "initial learning rate");
  train->add_option("--classes", f.classes, "class count (must match the dataset)");

  auto* eval = app.add_subcommand("eval", "per-class IoU and mIoU of a checkpoint");
  common_flags(eval, f);
  eval->add_option("--data", f.data, "dataset directory");
  eval->add_option("--checkpoint", f.checkpoint, "checkpoint directory");
  eval->add_option("--split", f.split, "holdout, train or all")->check(CLI::IsMember({"holdout", "train", "all"}));

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  common_flags(gradcheck, f);
  gradcheck->add_option("--probes", f.probes, "elements probed per tensor");
  gradcheck->add_option("--inject-fault", f.inject_fault, "corrupt the backward rule of this op")->group("");

  auto* oracle = app.add_subcommand("oracle", "compare DNL attention against a literal per-pair evaluation");
  common_flags(oracle, f);

  auto* bench = app.add_subcommand("bench", "parameter and FLOP tables for the frm, ppm and dappm heads");
  common_flags(bench, f);
  bench->add_option("--size", f.size, "input size HxW");
  bench->add_option("--context-head", f.context_head, "ignored; all heads are reported");
  bench->add_option("--mode", f.mode, "inference or training");

  auto* infer = app.add_subcommand("infer", "predict a label mask (PGM) for one FRMT image");
  common_flags(infer, f);
  infer->add_option("--checkpoint", f.checkpoint, "checkpoint directory");
  infer->add_option("--image", f.image, "1x3xHxW FRMT image");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*gen) return cmd_gen(f);
    if (*train) return cmd_train(f);
    if (*eval) return cmd_eval(f);
    if (*gradcheck) return cmd_gradcheck(f);
    if (*oracle) return cmd_oracle(f);
    if (*bench) return cmd_bench(f);
    if (*infer) return cmd_infer(f);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kIo;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kCheckFailed;
  }
  return kUsage;
}
