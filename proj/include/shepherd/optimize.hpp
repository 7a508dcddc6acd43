#pragma once

// Control-space machinery shared by both levels: projection onto the speed cap,
// nonlinear CG directions, the projected Armijo rule, and the Instantaneous
// Control / Optimal Control drivers.

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "shepherd/control.hpp"

namespace shepherd::optimize {

/// Time-integrated cost parts (each already carries the 1/T prefactor).
struct CostBreakdown {
  double j1 = 0.0;
  double j2 = 0.0;
  double j3 = 0.0;
  double total() const { return j1 + j2 + j3; }
};

/// Reduced cost c -> J(G(c), c) and its L2 gradient over a fixed control layout.
class ReducedProblem {
 public:
  virtual ~ReducedProblem() = default;
  virtual CostBreakdown evaluate(const ControlSchedule& control) = 0;
  /// Gradient (Riesz representative in the discrete L2 product). When `cost`
  /// is non-null it receives the cost of the same forward solve.
  virtual ControlSchedule gradient(const ControlSchedule& control, CostBreakdown* cost) = 0;
  virtual std::size_t peak_memory_bytes() const { return 0; }
};

/// A system that Instantaneous Control advances one slice at a time.
class SlicedSystem {
 public:
  virtual ~SlicedSystem() = default;
  /// Reduced problem for a single slice [t0, t0 + length] starting from the
  /// committed state, with one constant control value on the slice.
  virtual std::unique_ptr<ReducedProblem> slice_problem(double t0, double length) = 0;
  /// Advance the committed state across the slice with the accepted control.
  virtual void commit(const ControlSchedule& slice_control) = 0;
};

/// Per agent and slice, radial clipping to |u_m| <= u_max.
ControlSchedule project_control(const ControlSchedule& c);

struct NcgDirection {
  ControlSchedule direction;
  double beta = 0.0;
  bool restarted = false;  // fell back to steepest descent
};

/// Nonlinear CG direction. Pass null `previous_gradient` on the first iteration.
NcgDirection ncg_direction(const ControlSchedule& gradient,
                           const ControlSchedule* previous_gradient,
                           const ControlSchedule* previous_direction, double tol_cg);

struct ArmijoOptions {
  double initial_step = 1.0;
  double gamma = 1e-4;
  int max_halvings = 30;
};

struct ArmijoResult {
  ControlSchedule control;  // projected accepted iterate (or the input on stagnation)
  CostBreakdown cost;       // cost at `control`
  double step = 0.0;        // accepted omega, 0 on stagnation
  int halvings = 0;
  bool stagnated = false;
};

/// Largest omega = omega0 / 2^j with
///   J(Proj(c + omega s)) <= J(c) - gamma omega |q|^2.
ArmijoResult armijo_search(ReducedProblem& problem, const ControlSchedule& control,
                           const CostBreakdown& current_cost, const ControlSchedule& gradient,
                           const ControlSchedule& direction, const ArmijoOptions& options);

struct IterationRecord {
  int iteration = 0;
  double time = 0.0;  // slice start for IC, unused for OC
  CostBreakdown cost;
  double gradient_norm = 0.0;
  double step = 0.0;
  double relative_change = 0.0;
  int halvings = 0;
  bool restarted = false;
  bool stagnated = false;
};

struct OptimizerReport {
  std::string strategy;
  std::string status;
  std::vector<IterationRecord> iterations;
  ControlSchedule control;
  double wall_seconds = 0.0;
  std::size_t peak_memory_bytes = 0;
  int stagnant_iterations = 0;
  /// Cost of the initial control (OC only).
  CostBreakdown initial_cost;
};

struct IcOptions {
  ArmijoOptions armijo{1000.0, 1e-4, 30};
  double next_slice_factor = 0.1;
};

/// Instantaneous Control: one projected steepest-descent step per slice of
/// `layout`. `first_slice` is the initial guess for slice 1 (M x D values).
OptimizerReport run_instantaneous_control(SlicedSystem& system, const ControlSchedule& layout,
                                          std::span<const double> first_slice,
                                          const IcOptions& options);

struct OcOptions {
  ArmijoOptions armijo{10.0, 1e-4, 30};
  double tol = 0.05;
  double tol_cg = 1e-10;
  int max_iterations = 50;
};

/// Relative change between consecutive iterates, scaled by the initial control
/// norm (or absolute when the initial control is zero).
double relative_change(const ControlSchedule& next, const ControlSchedule& current,
                       double initial_norm);

/// Optimal Control: NCG directions with projected Armijo steps over the full
/// horizon until the relative control change drops below `tol`.
OptimizerReport run_optimal_control(ReducedProblem& problem, const ControlSchedule& initial,
                                    const OcOptions& options);

}  // namespace shepherd::optimize
