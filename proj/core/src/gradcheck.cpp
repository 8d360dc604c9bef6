#include "smn/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "smn/error.hpp"
#include "smn/ops.hpp"
#include "smn/rng.hpp"

namespace smn {

namespace {

class Evaluator {
 public:
  Evaluator(const GraphFn& graph, Tensor projection)
      : graph_(graph), projection_(std::move(projection)) {}

  double operator()(const std::vector<Tensor>& inputs) const {
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(inputs.size());
    for (const auto& t : inputs) vars.push_back(tape.constant(t));
    Var out = graph_(tape, vars);
    const double l = weighted_sum(out, projection_).value()[0];
    if (!std::isfinite(l)) throw NumericalError("grad_check: non-finite loss");
    return l;
  }

 private:
  const GraphFn& graph_;
  Tensor projection_;
};

double rel_error(double a, double n, double floor) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

}  // namespace

GradCheckResult grad_check(const GraphFn& graph, std::vector<Tensor> inputs,
                           const GradCheckOptions& opt) {
  std::vector<Tensor> analytic;
  Tensor projection;
  {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& t : inputs) vars.push_back(tape.variable(t));
    Var out = graph(tape, vars);
    Rng rng(opt.projection_seed);
    projection = Tensor(out.shape(), 0.0);
    for (double& v : projection.values()) v = rng.uniform(-1.0, 1.0);
    Var loss = weighted_sum(out, projection);
    if (!loss.value().all_finite()) throw NumericalError("grad_check: non-finite loss");
    tape.backward(loss);
    for (const auto& v : vars) analytic.push_back(tape.grad(v));
  }
  const Evaluator eval(graph, projection);
  const double f0 = eval(inputs);

  GradCheckResult res;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t j = 0; j < inputs[i].size(); ++j) {
      const double x0 = inputs[i][j];
      auto at = [&](double step) {
        inputs[i][j] = x0 + step;
        const double f = eval(inputs);
        inputs[i][j] = x0;
        return f;
      };
      const double eps = opt.epsilon;
      const double fp = at(eps);
      const double fm = at(-eps);
      const double numeric = (fp - fm) / (2 * eps);
      const double a = analytic[i][j];
      double err = rel_error(a, numeric, opt.floor);
      if (err >= opt.tolerance) {
        // A kink inside the stencil shows up as unequal one-sided slopes, or
        // (kinks on both sides) as an estimate that moves when the step halves.
        const double asym = std::abs((fp - f0) / eps - (f0 - fm) / eps);
        const double halved = (at(eps / 2) - at(-eps / 2)) / eps;
        const double miss = std::abs(a - numeric);
        if (asym >= miss || std::abs(halved - numeric) >= 0.5 * miss) {
          const double h = opt.kink_epsilon;
          const double fine = (at(h) - at(-h)) / (2 * h);
          err = rel_error(a, fine, opt.floor);
          ++res.kink_rechecks;
        }
      }
      ++res.checked;
      if (err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst = "input " + std::to_string(i) + ", element " + std::to_string(j);
      }
    }
  }
  return res;
}

}  // namespace smn
