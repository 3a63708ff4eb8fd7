#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "frm/layers.hpp"

namespace frm {

struct GradcheckOptions {
  double step = 1e-4;
  // A probe whose step straddles a ReLU kink is retried with the step cut by
  // 10 until it no longer does or would fall below min_step.
  double min_step = 1e-7;
  double tolerance = 1e-5;
  // Gradient magnitudes below this are compared on an absolute scale.
  double floor = 1e-4;
  // Elements probed per tensor; smaller tensors are probed exhaustively.
  std::size_t probes_per_tensor = 12;
  std::uint64_t seed = 1;
};

struct ComponentResult {
  std::string name;
  double worst_error = 0;
  // "tensor[index]" of the worst probe.
  std::string worst_at;
  double analytic = 0;
  double numeric = 0;
  std::size_t probes = 0;
  // Probes retried with a smaller step, and probes that still straddled a
  // kink at min_step.
  std::size_t reduced_steps = 0;
  std::size_t kinks = 0;
  bool passed = false;
};

struct GradcheckReport {
  std::vector<ComponentResult> components;
  double tolerance = 1e-5;

  bool passed() const;
  const ComponentResult* worst() const;
  std::vector<std::string> failures() const;
  std::string format() const;
};

// |a - n| / max(|a|, |n|, floor)
double gradient_error(double analytic, double numeric, double floor);

using ProbeTarget = std::pair<std::string, TensorD*>;

// Compares the analytic gradient of loss() with Richardson-extrapolated
// central differences (steps h and h/2) at the given leaves. loss() must be deterministic and rebuild the graph on every
// call.
ComponentResult check_gradients(const std::string& name, const std::function<TensorD()>& loss,
                                const std::vector<ProbeTarget>& targets, const GradcheckOptions& options, Rng& rng);

// Every primitive op, every layer type, each context head and the full
// model under the hybrid loss. Float weights are initialized, then copied
// into a double-precision replica for the check.
GradcheckReport run_gradcheck(const GradcheckOptions& options);

}  // namespace frm
