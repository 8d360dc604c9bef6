#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "smn/autodiff.hpp"

namespace smn {

/// Builds a graph on the given tape from leaf Vars (one per input tensor).
/// The output may have any shape; it is contracted with fixed random weights.
using GraphFn = std::function<Var(Tape&, std::span<const Var>)>;

struct GradCheckOptions {
  double epsilon = 1e-3;
  // err = |analytic - numeric| / max(|analytic|, |numeric|, floor)
  double floor = 1e-3;
  double tolerance = 1e-4;
  // Elements that miss the tolerance and whose one-sided differences are
  // asymmetric enough to explain the miss, or whose estimate moves by half
  // the miss when the step is halved, lie within epsilon of a kink (relu, max
  // selection). They are re-measured with this step.
  double kink_epsilon = 1e-6;
  std::uint64_t projection_seed = 7;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t kink_rechecks = 0;
  std::string worst;  // "input i, element j"
  bool passed(double tol = 1e-4) const { return max_rel_error < tol; }
};

/// Compares reverse-mode gradients with central finite differences on every
/// input element. Throws NumericalError on a non-finite loss.
GradCheckResult grad_check(const GraphFn& graph, std::vector<Tensor> inputs,
                           const GradCheckOptions& options = {});

struct GradCase {
  std::string name;
  GraphFn graph;
  std::vector<Tensor> inputs;
};

/// Every differentiable operator plus the composite paths the model relies on
/// (input fusion -> GRU -> gated write, a three-step recurrent chain, memory
/// heads fused with a stop-gradient base), with inputs drawn from `seed`.
std::vector<GradCase> gradient_suite(std::uint64_t seed);

struct SuiteEntry {
  std::string name;
  GradCheckResult result;
};

/// Runs gradient_suite for seeds [first_seed, first_seed + seeds) and reports
/// the worst case per entry name, in suite order.
std::vector<SuiteEntry> run_gradient_suite(std::uint64_t first_seed, int seeds,
                                           const GradCheckOptions& options = {});

}  // namespace smn
