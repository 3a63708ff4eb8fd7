#include "frm/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "frm/baselines.hpp"
#include "frm/frm.hpp"
#include "frm/losses.hpp"
#include "frm/model.hpp"

namespace frm {

double gradient_error(double analytic, double numeric, double floor) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / scale;
}

bool GradcheckReport::passed() const {
  if (components.empty()) return false;
  return std::all_of(components.begin(), components.end(), [](const auto& c) { return c.passed; });
}

const ComponentResult* GradcheckReport::worst() const {
  const ComponentResult* w = nullptr;
  for (const auto& c : components)
    if (!w || c.worst_error > w->worst_error) w = &c;
  return w;
}

std::vector<std::string> GradcheckReport::failures() const {
  std::vector<std::string> out;
  for (const auto& c : components)
    if (!c.passed) out.push_back(c.name);
  return out;
}

std::string GradcheckReport::format() const {
  std::size_t width = 9;
  for (const auto& c : components) width = std::max(width, c.name.size());
  std::ostringstream out;
  out << std::left << std::setw(static_cast<int>(width)) << "component" << std::right << std::setw(8) << "probes"
      << std::setw(14) << "worst rel" << "  status  location\n";
  for (const auto& c : components) {
    out << std::left << std::setw(static_cast<int>(width)) << c.name << std::right << std::setw(8) << c.probes
        << std::setw(14) << std::scientific << std::setprecision(3) << c.worst_error << "  "
        << (c.passed ? "ok    " : "FAIL  ") << "  " << c.worst_at << "  analytic " << std::setprecision(6)
        << c.analytic << " numeric " << c.numeric << "\n";
  }
  if (const auto* w = worst()) {
    out << "worst component: " << w->name << " (" << std::scientific << std::setprecision(3) << w->worst_error
        << ", tolerance " << tolerance << ")\n";
  }
  return out.str();
}

ComponentResult check_gradients(const std::string& name, const std::function<TensorD()>& loss,
                                const std::vector<ProbeTarget>& targets, const GradcheckOptions& options, Rng& rng) {
  for (const auto& [label, t] : targets) {
    t->set_requires_grad(true);
    t->zero_grad();
  }
  loss().backward();
  std::vector<std::vector<double>> analytic;
  for (const auto& [label, t] : targets) {
    analytic.push_back(t->has_grad() ? std::vector<double>(t->grad().begin(), t->grad().end())
                                     : std::vector<double>(t->numel(), 0.0));
  }

  ComponentResult result;
  result.name = name;
  NoGradGuard no_grad;
  for (std::size_t k = 0; k < targets.size(); ++k) {
    TensorD& t = *targets[k].second;
    std::vector<std::size_t> probes(t.numel());
    std::iota(probes.begin(), probes.end(), std::size_t{0});
    if (probes.size() > options.probes_per_tensor) {
      std::vector<std::size_t> picked;
      std::sample(probes.begin(), probes.end(), std::back_inserter(picked), options.probes_per_tensor, rng);
      probes = std::move(picked);
    }
    for (std::size_t i : probes) {
      auto values = t.mutable_data();
      const double original = values[i];
      // Central difference at step h; false when the two evaluations see
      // different ReLU activation patterns, i.e. the window straddles a kink.
      auto central = [&](double h, double& out) {
        std::vector<std::uint8_t> signs_plus;
        std::vector<std::uint8_t> signs_minus;
        debug::set_relu_sign_sink(&signs_plus);
        values[i] = original + h;
        const double plus = loss().item();
        debug::set_relu_sign_sink(&signs_minus);
        values[i] = original - h;
        const double minus = loss().item();
        debug::set_relu_sign_sink(nullptr);
        values[i] = original;
        out = (plus - minus) / (2 * h);
        return signs_plus == signs_minus;
      };
      double numeric = 0;
      for (double h = options.step;; h *= 0.1) {
        double coarse = 0;
        double fine = 0;
        const bool smooth = central(h, coarse) && central(h / 2, fine);
        // Richardson extrapolation cancels the h^2 truncation term.
        numeric = (4 * fine - coarse) / 3;
        if (smooth) break;
        if (h * 0.1 < options.min_step) {
          ++result.kinks;
          break;
        }
        ++result.reduced_steps;
      }
      const double err = gradient_error(analytic[k][i], numeric, options.floor);
      ++result.probes;
      if (result.probes == 1 || err > result.worst_error) {
        result.worst_error = err;
        result.worst_at = targets[k].first + "[" + std::to_string(i) + "]";
        result.analytic = analytic[k][i];
        result.numeric = numeric;
      }
    }
  }
  result.passed = result.probes > 0 && result.worst_error < options.tolerance;
  return result;
}

namespace {

TensorD random_tensor(const Shape& shape, Rng& rng, double stddev = 1.0) {
  std::normal_distribution<double> normal(0.0, stddev);
  TensorD t(shape);
  for (double& v : t.mutable_data()) v = normal(rng);
  return t;
}

// Values kept away from zero so ReLU kinks stay outside the probe step.
TensorD away_from_zero(const Shape& shape, Rng& rng) {
  TensorD t = random_tensor(shape, rng);
  for (double& v : t.mutable_data())
    if (std::abs(v) < 0.05) v += v < 0 ? -0.1 : 0.1;
  return t;
}

// sum(t * r) with r drawn from a fixed seed, so every call sees the same
// weights and no output gradient is uniform.
TensorD weighted_sum(const TensorD& t, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(t, random_tensor(t.shape(), rng)));
}

std::vector<ProbeTarget> parameter_targets(ParameterSet<double>& params) {
  std::vector<ProbeTarget> out;
  for (auto& p : params.params) out.emplace_back(p.name, p.tensor);
  return out;
}

void randomize_biases(ParameterSet<double>& params, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 0.5);
  for (auto& p : params.params) {
    if (p.decay) continue;
    for (double& v : p.tensor->mutable_data()) v = normal(rng);
  }
}

class Suite {
 public:
  Suite(const GradcheckOptions& options) : options_(options), rng_(options.seed) {}

  Rng& rng() { return rng_; }

  void run(const std::string& name, const std::function<TensorD()>& loss, const std::vector<ProbeTarget>& targets) {
    report_.components.push_back(check_gradients(name, loss, targets, options_, rng_));
  }

  GradcheckReport take() {
    report_.tolerance = options_.tolerance;
    return std::move(report_);
  }

 private:
  GradcheckOptions options_;
  Rng rng_;
  GradcheckReport report_;
};

void primitive_ops(Suite& s) {
  Rng& rng = s.rng();
  {
    auto a = random_tensor({2, 3, 4, 5}, rng);
    auto b = random_tensor({1, 3, 1, 5}, rng);
    s.run("add", [&] { return weighted_sum(add(a, b), 11); }, {{"a", &a}, {"b", &b}});
    s.run("sub", [&] { return weighted_sum(sub(a, b), 12); }, {{"a", &a}, {"b", &b}});
    s.run("mul", [&] { return weighted_sum(mul(a, b), 13); }, {{"a", &a}, {"b", &b}});
    s.run("scale", [&] { return weighted_sum(scale(a, 2.5), 14); }, {{"a", &a}});
    s.run("add_scalar", [&] { return weighted_sum(add_scalar(a, -0.75), 15); }, {{"a", &a}});
    s.run("sum", [&] { return scale(sum(a), 0.5); }, {{"a", &a}});
    s.run("mean", [&] { return scale(mean(a), 3.0); }, {{"a", &a}});
    s.run("sum_axis", [&] { return add(weighted_sum(sum_axis(a, 1), 16), weighted_sum(sum_axis(a, 3), 17)); },
          {{"a", &a}});
    s.run("mean_axis", [&] { return add(weighted_sum(mean_axis(a, 2), 18), weighted_sum(mean_axis(a, 0), 19)); },
          {{"a", &a}});
    s.run("reshape", [&] { return weighted_sum(reshape(a, Shape{1, 6, 5, 4}), 20); }, {{"a", &a}});
    s.run("transpose", [&] { return weighted_sum(transpose(a), 21); }, {{"a", &a}});
  }
  {
    auto x = away_from_zero({2, 3, 4, 4}, rng);
    s.run("relu", [&] { return weighted_sum(relu(x), 22); }, {{"x", &x}});
  }
  {
    auto a = random_tensor({2, 2, 3, 4}, rng);
    auto b = random_tensor({2, 1, 3, 4}, rng);
    auto c = random_tensor({2, 3, 3, 4}, rng);
    s.run("concat_channels", [&] { return weighted_sum(concat_channels<double>({a, b, c}), 23); },
          {{"a", &a}, {"b", &b}, {"c", &c}});
  }
  {
    auto a = random_tensor({2, 1, 3, 4}, rng);
    auto b = random_tensor({2, 1, 4, 5}, rng);
    s.run("matmul", [&] { return weighted_sum(matmul(a, b), 24); }, {{"a", &a}, {"b", &b}});
  }
  {
    auto x = random_tensor({2, 3, 3, 4}, rng, 2.0);
    s.run("softmax", [&] { return add(weighted_sum(softmax(x, 3), 25), weighted_sum(softmax(x, 1), 26)); },
          {{"x", &x}});
  }
  {
    auto x = random_tensor({2, 4, 5, 6}, rng);
    auto w = random_tensor({6, 2, 3, 3}, rng, 0.5);
    auto b = random_tensor({1, 6, 1, 1}, rng);
    auto xp = random_tensor({1, 4, 3, 3}, rng);
    auto wp = random_tensor({5, 4, 1, 1}, rng);
    auto wd = random_tensor({4, 1, 3, 3}, rng);
    s.run("conv2d",
          [&] {
            auto grouped = conv2d(x, w, &b, Conv2dParams{2, 1, 2});
            auto point = conv2d<double>(xp, wp, nullptr, Conv2dParams{});
            auto depth = conv2d<double>(x, wd, nullptr, Conv2dParams{1, 1, 4});
            return add(add(weighted_sum(grouped, 27), weighted_sum(point, 28)), weighted_sum(depth, 29));
          },
          {{"x", &x}, {"w", &w}, {"b", &b}, {"xp", &xp}, {"wp", &wp}, {"wd", &wd}});
  }
  {
    auto x = random_tensor({3, 4, 3, 3}, rng);
    auto gamma = random_tensor({1, 4, 1, 1}, rng);
    auto beta = random_tensor({1, 4, 1, 1}, rng);
    s.run("batch_norm",
          [&] { return weighted_sum(batch_norm_train<double>(x, gamma, beta, 1e-5, nullptr, nullptr), 30); },
          {{"x", &x}, {"gamma", &gamma}, {"beta", &beta}});
    const std::vector<double> running_mean{0.1, -0.2, 0.3, 0.0};
    const std::vector<double> running_var{1.5, 0.5, 2.0, 1.0};
    s.run("batch_norm_eval",
          [&] { return weighted_sum(batch_norm_eval(x, gamma, beta, running_mean, running_var, 1e-5), 31); },
          {{"x", &x}, {"gamma", &gamma}, {"beta", &beta}});
  }
  {
    auto x = random_tensor({1, 3, 7, 5}, rng);
    s.run("adaptive_avg_pool", [&] { return weighted_sum(adaptive_avg_pool(x, 3, 2), 32); }, {{"x", &x}});
    s.run("bilinear_resize",
          [&] { return add(weighted_sum(bilinear_resize(x, 9, 11), 33), weighted_sum(bilinear_resize(x, 3, 2), 34)); },
          {{"x", &x}});
  }
  {
    auto x = random_tensor({2, 5, 3, 3}, rng);
    s.run("l2_normalize", [&] { return weighted_sum(l2_normalize_channels(x), 35); }, {{"x", &x}});
    const std::vector<PixelIndex> where{{0, 0, 0}, {1, 2, 1}, {0, 1, 2}, {1, 2, 1}};
    s.run("gather_pixels", [&] { return weighted_sum(gather_pixels(x, where), 36); }, {{"x", &x}});
  }
  {
    auto logits = random_tensor({2, 4, 3, 3}, rng, 2.0);
    std::vector<std::int32_t> labels(18);
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<std::int32_t>(i % 5 == 4 ? 255 : i % 4);
    s.run("cross_entropy", [&] { return softmax_cross_entropy<double>(logits, labels, 255); },
          {{"logits", &logits}});
  }
  {
    auto sim = random_tensor({1, 1, 6, 6}, rng, 3.0);
    const std::vector<ContrastiveTerm> terms{{0, {1, 2}, {3, 4, 5}}, {3, {4}, {0, 1}}, {5, {2, 4}, {0}}};
    s.run("contrastive", [&] { return contrastive_from_similarity(sim, terms); }, {{"sim", &sim}});
  }
}

void layers(Suite& s) {
  Rng& rng = s.rng();
  {
    ConvBnRelu<double> block(conv3x3(3, 4, 2, false));
    block.init_kaiming(rng);
    ParameterSet<double> params;
    block.collect(params, "block");
    for (double& v : block.bn().gamma().mutable_data()) v = 0.5 + std::uniform_real_distribution<double>(0, 1)(rng);
    auto x = random_tensor({2, 3, 6, 6}, rng);
    auto targets = parameter_targets(params);
    targets.emplace_back("x", &x);
    s.run("conv_bn_relu", [&] { return weighted_sum(block.forward(x, Mode::kTraining), 40); }, targets);
  }
  {
    DnlBlock<double> block(DnlConfig{8, true});
    block.init_kaiming(rng);
    ParameterSet<double> params;
    block.collect(params, "dnl");
    randomize_biases(params, rng);
    auto x = random_tensor({1, 8, 4, 4}, rng);
    auto targets = parameter_targets(params);
    targets.emplace_back("x", &x);
    s.run("dnl_block", [&] { return weighted_sum(dnl_forward(block, x), 41); }, targets);
  }
  {
    FfnBlock<double> block(8, 4);
    block.init_kaiming(rng);
    ParameterSet<double> params;
    block.collect(params, "ffn");
    randomize_biases(params, rng);
    auto x = random_tensor({1, 8, 4, 4}, rng);
    auto targets = parameter_targets(params);
    targets.emplace_back("x", &x);
    s.run("ffn_block", [&] { return weighted_sum(ffn_forward(block, x), 42); }, targets);
  }
  {
    FrmHead<double> head(FrmConfig{16, 8, 4});
    head.init_kaiming(rng);
    ParameterSet<double> params;
    head.collect(params, "frm");
    randomize_biases(params, rng);
    FeaturePyramid<double> pyramid{random_tensor({1, 2, 16, 16}, rng), random_tensor({1, 2, 8, 8}, rng),
                                   random_tensor({1, 4, 4, 4}, rng), random_tensor({1, 8, 2, 2}, rng)};
    auto targets = parameter_targets(params);
    targets.emplace_back("f1", &pyramid.f1);
    targets.emplace_back("f2", &pyramid.f2);
    targets.emplace_back("f3", &pyramid.f3);
    targets.emplace_back("f4", &pyramid.f4);
    s.run("frm_head", [&] { return weighted_sum(frm_forward(head, pyramid), 43); }, targets);
  }
  {
    PpmConfig config;
    config.in_channels = 8;
    config.out_channels = 6;
    config.bins = {1, 2, 3};
    PpmHead<double> head(config);
    head.init_kaiming(rng);
    ParameterSet<double> params;
    head.collect(params, "ppm");
    randomize_biases(params, rng);
    auto x = random_tensor({1, 8, 3, 3}, rng);
    auto targets = parameter_targets(params);
    targets.emplace_back("x", &x);
    s.run("ppm_head", [&] { return weighted_sum(head.forward(x, Mode::kTraining), 44); }, targets);
  }
  {
    DappmConfig config;
    config.in_channels = 8;
    config.out_channels = 6;
    DappmHead<double> head(config);
    head.init_kaiming(rng);
    ParameterSet<double> params;
    head.collect(params, "dappm");
    randomize_biases(params, rng);
    auto x = random_tensor({1, 8, 4, 4}, rng);
    auto targets = parameter_targets(params);
    targets.emplace_back("x", &x);
    s.run("dappm_head", [&] { return weighted_sum(head.forward(x, Mode::kTraining), 45); }, targets);
  }
}

void full_model(Suite& s, std::uint64_t seed) {
  ModelConfig config;
  config.channels = {4, 8, 8, 16};
  config.decoder_width = 8;
  config.num_classes = 3;
  config.embed_dim = 8;

  // Float initialization replayed in double precision.
  SegModel<float> reference(config);
  reference.init(seed);
  SegModel<double> model(config);
  auto params = model.parameters();
  copy_parameters(params, reference.parameters());
  randomize_biases(params, s.rng());

  Rng& rng = s.rng();
  auto image = random_tensor({2, 3, 64, 64}, rng);
  LabelMap labels(2, 64, 64);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t y = 0; y < 64; ++y)
      for (std::size_t x = 0; x < 64; ++x) labels.at(n, y, x) = static_cast<std::int32_t>((y / 16 + x / 24 + n) % 3);
  LossConfig loss;
  loss.anchors_per_class = 4;
  loss.max_positives = 3;
  loss.max_negatives = 6;

  auto targets = parameter_targets(params);
  targets.emplace_back("image", &image);
  s.run("model",
        [&] {
          Rng sampler(seed + 1);
          auto out = model.forward(image, Mode::kTraining);
          return hybrid_loss(out.logits, *out.embeddings, labels, loss, sampler).total;
        },
        targets);
}

}  // namespace

GradcheckReport run_gradcheck(const GradcheckOptions& options) {
  Suite suite(options);
  primitive_ops(suite);
  layers(suite);
  full_model(suite, options.seed);
  return suite.take();
}

}  // namespace frm
