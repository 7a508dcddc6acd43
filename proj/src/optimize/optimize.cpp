#include "shepherd/optimize.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>

#include "shepherd/model.hpp"

namespace shepherd::optimize {

ControlSchedule project_control(const ControlSchedule& c) {
  ControlSchedule out = c;
  const double cap = c.speed_cap();
  for (int k = 0; k < out.slices(); ++k) {
    for (int m = 0; m < out.agents(); ++m) {
      auto u = out.agent(k, m);
      double s2 = 0.0;
      for (double x : u) s2 += x * x;
      const double speed = std::sqrt(s2);
      // A clipped vector can land a few ulps above the cap; the slack keeps the
      // operator idempotent.
      if (speed > cap * (1.0 + 8.0 * std::numeric_limits<double>::epsilon())) {
        for (double& x : u) x *= cap / speed;
      }
    }
  }
  return out;
}

NcgDirection ncg_direction(const ControlSchedule& gradient,
                           const ControlSchedule* previous_gradient,
                           const ControlSchedule* previous_direction, double tol_cg) {
  NcgDirection out{gradient.zeros_like(), 0.0, false};
  axpy(-1.0, gradient, out.direction);
  if (previous_gradient == nullptr || previous_direction == nullptr) return out;

  ControlSchedule dq = gradient;
  axpy(-1.0, *previous_gradient, dq);
  const double denom = inner(dq, *previous_direction);
  if (denom == 0.0 || !std::isfinite(denom)) {
    out.restarted = true;
    return out;
  }
  out.beta = inner(dq, gradient) / denom;
  axpy(-out.beta, *previous_direction, out.direction);
  if (inner(out.direction, gradient) > -tol_cg) {
    out.direction = gradient.zeros_like();
    axpy(-1.0, gradient, out.direction);
    out.restarted = true;
  }
  return out;
}

ArmijoResult armijo_search(ReducedProblem& problem, const ControlSchedule& control,
                           const CostBreakdown& current_cost, const ControlSchedule& gradient,
                           const ControlSchedule& direction, const ArmijoOptions& options) {
  const double q2 = inner(gradient, gradient);
  const double reference = current_cost.total();
  double omega = options.initial_step;
  for (int j = 0; j <= options.max_halvings; ++j) {
    ControlSchedule trial = control;
    axpy(omega, direction, trial);
    trial = project_control(trial);
    const CostBreakdown cost = problem.evaluate(trial);
    if (cost.total() <= reference - options.gamma * omega * q2) {
      return ArmijoResult{std::move(trial), cost, omega, j, false};
    }
    omega *= 0.5;
  }
  return ArmijoResult{control, current_cost, 0.0, options.max_halvings, true};
}

double relative_change(const ControlSchedule& next, const ControlSchedule& current,
                       double initial_norm) {
  ControlSchedule diff = next;
  axpy(-1.0, current, diff);
  const double change = l2_norm(diff);
  return initial_norm > 0.0 ? change / initial_norm : change;
}

namespace {

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

}  // namespace

OptimizerReport run_instantaneous_control(SlicedSystem& system, const ControlSchedule& layout,
                                          std::span<const double> first_slice,
                                          const IcOptions& options) {
  const auto start = std::chrono::steady_clock::now();
  OptimizerReport report;
  report.strategy = "IC";
  report.control = layout.zeros_like();
  const std::size_t width = static_cast<std::size_t>(layout.agents() * layout.dim());
  if (first_slice.size() != width) throw Error("initial slice control has the wrong size");
  std::vector<double> guess(first_slice.begin(), first_slice.end());

  for (int k = 0; k < layout.slices(); ++k) {
    const double t0 = layout.knots()[k];
    const double length = layout.slice_length(k);
    auto problem = system.slice_problem(t0, length);

    ControlSchedule c =
        ControlSchedule::uniform(t0, length, 1, layout.agents(), layout.dim(), layout.speed_cap());
    std::copy(guess.begin(), guess.end(), c.slice(0).begin());
    c = project_control(c);

    CostBreakdown cost;
    const ControlSchedule q = problem->gradient(c, &cost);
    ControlSchedule s = q.zeros_like();
    axpy(-1.0, q, s);
    ArmijoResult step = armijo_search(*problem, c, cost, q, s, options.armijo);

    system.commit(step.control);
    auto accepted = step.control.slice(0);
    std::copy(accepted.begin(), accepted.end(), report.control.slice(k).begin());
    for (std::size_t i = 0; i < width; ++i) guess[i] = options.next_slice_factor * accepted[i];

    IterationRecord rec;
    rec.iteration = k + 1;
    rec.time = t0;
    rec.cost = step.cost;
    rec.gradient_norm = l2_norm(q);
    rec.step = step.step;
    rec.relative_change = relative_change(step.control, c, l2_norm(c));
    rec.halvings = step.halvings;
    rec.stagnated = step.stagnated;
    if (step.stagnated) ++report.stagnant_iterations;
    report.iterations.push_back(rec);
    report.peak_memory_bytes = std::max(report.peak_memory_bytes, problem->peak_memory_bytes());
  }
  report.status = "completed";
  report.wall_seconds = seconds_since(start);
  return report;
}

OptimizerReport run_optimal_control(ReducedProblem& problem, const ControlSchedule& initial,
                                    const OcOptions& options) {
  const auto start = std::chrono::steady_clock::now();
  OptimizerReport report;
  report.strategy = "OC";
  report.status = "max_iterations";

  ControlSchedule c = project_control(initial);
  const double initial_norm = l2_norm(c);
  CostBreakdown cost;
  ControlSchedule q = problem.gradient(c, &cost);
  report.initial_cost = cost;

  ControlSchedule prev_q;
  ControlSchedule prev_s;
  bool have_previous = false;
  int consecutive_stagnant = 0;

  for (int it = 1; it <= options.max_iterations; ++it) {
    NcgDirection dir = ncg_direction(q, have_previous ? &prev_q : nullptr,
                                     have_previous ? &prev_s : nullptr, options.tol_cg);
    ArmijoResult step = armijo_search(problem, c, cost, q, dir.direction, options.armijo);

    IterationRecord rec;
    rec.iteration = it;
    rec.cost = step.cost;
    rec.gradient_norm = l2_norm(q);
    rec.step = step.step;
    rec.relative_change = relative_change(step.control, c, initial_norm);
    rec.halvings = step.halvings;
    rec.restarted = dir.restarted;
    rec.stagnated = step.stagnated;
    report.iterations.push_back(rec);

    if (step.stagnated) {
      ++report.stagnant_iterations;
      if (++consecutive_stagnant >= 2) {
        report.status = "stagnated";
        break;
      }
      // Retry once from steepest descent.
      have_previous = false;
      continue;
    }
    consecutive_stagnant = 0;
    prev_q = q;
    prev_s = dir.direction;
    have_previous = true;
    c = std::move(step.control);
    cost = step.cost;
    if (rec.relative_change <= options.tol) {
      report.status = "converged";
      break;
    }
    if (it < options.max_iterations) q = problem.gradient(c, &cost);
  }
  report.control = c;
  report.peak_memory_bytes = problem.peak_memory_bytes();
  report.wall_seconds = seconds_since(start);
  return report;
}

}  // namespace shepherd::optimize
