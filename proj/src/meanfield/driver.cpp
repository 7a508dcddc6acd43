#include <algorithm>
#include <cmath>

#include "shepherd/meanfield.hpp"

namespace shepherd::meanfield {

namespace {

// Fields held besides the checkpointed trajectory during a backward sweep:
// the adjoint, two recomputed snapshots and the sweep scratch.
constexpr std::size_t kAdjointWorkingSet = 5;

void check_control(const MfState& s, const ControlSchedule& control) {
  if (control.dim() != 2) throw Error("mean-field controls must be 2-D");
  if (static_cast<std::size_t>(control.agents()) * 2 != s.agents.size()) {
    throw Error("control agent count does not match the agent positions");
  }
}

// (1/T) d l / d f at each spatial cell; the same for every velocity.
std::vector<double> cost_source(const PhaseGrid& grid, const Moments& mo, double mass,
                                const CostWeights& w) {
  std::vector<double> src(grid.spatial_cells());
  const double ex = mo.mean[0], ey = mo.mean[1];
  const double gap = mo.variance - w.target_variance;
  const double e2 = ex * ex + ey * ey;
  for (int i = 0; i < grid.nx; ++i) {
    for (int j = 0; j < grid.nx; ++j) {
      const double x = grid.x(i), y = grid.x(j);
      const double dvar = x * x + y * y - 2.0 * (2.0 - mass) * (ex * x + ey * y) + e2;
      const double dmean = (ex - w.destination[0]) * x + (ey - w.destination[1]) * y;
      src[static_cast<std::size_t>(i) * grid.nx + j] =
          (0.5 * w.sigma1 * gap * dvar + w.sigma2 * dmean) / w.horizon;
    }
  }
  return src;
}

// g(x, v) -= weight * s(x)
void subtract_spatial(std::vector<double>& g, const std::vector<double>& s, double weight,
                      std::size_t block) {
  for (std::size_t c = 0; c < s.size(); ++c) {
    const double d = weight * s[c];
    if (d == 0.0) continue;
    double* p = g.data() + c * block;
    for (std::size_t k = 0; k < block; ++k) p[k] -= d;
  }
}

}  // namespace

std::size_t steps_per_slice_for(const PhaseGrid& grid, double slice_length, double cfl_fraction) {
  if (!(slice_length > 0.0)) throw Error("slice length must be positive");
  if (!(cfl_fraction > 0.0 && cfl_fraction <= 1.0)) throw Error("CFL fraction must lie in (0, 1]");
  const double target = cfl_fraction * grid.max_step();
  return static_cast<std::size_t>(std::ceil(slice_length / target - 1e-9));
}

ForwardRecord integrate_forward(const DensityField& f0, std::span<const double> agents0,
                                const ControlSchedule& control, const Solver& solver,
                                std::size_t steps_per_slice, std::size_t stride,
                                std::shared_ptr<CheckpointStore<MfState>> store) {
  if (steps_per_slice == 0) throw Error("steps per slice must be positive");
  MfState state = solver.make_state(f0, std::vector<double>(agents0.begin(), agents0.end()));
  check_control(state, control);
  const std::size_t sps = steps_per_slice;
  const std::size_t steps = sps * static_cast<std::size_t>(control.slices());
  for (int k = 0; k < control.slices(); ++k) {
    check_cfl(solver.grid(), control.slice_length(k) / static_cast<double>(sps));
  }

  ForwardRecord rec;
  rec.steps_per_slice = sps;
  rec.times.resize(steps + 1);
  for (std::size_t n = 0; n <= steps; ++n) {
    const std::size_t k = std::min(n / sps, static_cast<std::size_t>(control.slices()) - 1);
    const std::size_t j = n - k * sps;
    rec.times[n] = control.knots()[k] +
                   static_cast<double>(j) * control.slice_length(static_cast<int>(k)) /
                       static_cast<double>(sps);
  }
  const Solver* sp = &solver;
  const ControlSchedule u = control;
  const std::vector<double> times = rec.times;
  rec.states = Trajectory<MfState>(steps + 1, stride, [sp, u, times, sps](const MfState& s,
                                                                          std::size_t n) {
    return sp->step(s, u.slice(static_cast<int>(n / sps)), times[n + 1] - times[n], nullptr);
  });
  if (store) rec.states.use_store(std::move(store));

  auto record = [&](const MfState& s) {
    const auto rho = s.f.spatial_density();
    rec.crowd_moments.push_back(spatial_moments(solver.grid(), rho));
    rec.agent_positions.push_back(s.agents);
    double m = 0.0;
    for (double r : rho) m += r;
    rec.mass.push_back(m * solver.grid().dx() * solver.grid().dx());
  };
  record(state);
  rec.states.push(state);
  StepStats stats;
  for (std::size_t n = 0; n < steps; ++n) {
    state = solver.step(state, control.slice(static_cast<int>(n / sps)),
                        rec.times[n + 1] - rec.times[n], &stats);
    record(state);
    rec.states.push(state);
  }
  rec.clipped_mass = stats.clipped_mass;
  return rec;
}

optimize::CostBreakdown assemble_cost(const ForwardRecord& record, const ControlSchedule& control,
                                      const CostWeights& weights) {
  optimize::CostBreakdown out;
  const std::vector<double> none;
  auto parts_at = [&](std::size_t n) {
    const Moments& mo = record.crowd_moments[n];
    return running_cost(mo.mean, mo.variance, none, control.agents(), weights);
  };
  CostParts prev = parts_at(0);
  for (std::size_t n = 0; n < record.steps(); ++n) {
    const CostParts next = parts_at(n + 1);
    const double h = record.times[n + 1] - record.times[n];
    out.j1 += 0.5 * h * (prev.variance_term + next.variance_term);
    out.j2 += 0.5 * h * (prev.destination_term + next.destination_term);
    prev = next;
  }
  for (int k = 0; k < control.slices(); ++k) {
    double u2 = 0.0;
    for (double u : control.slice(k)) u2 += u * u;
    out.j3 += control.slice_length(k) * weights.sigma3 / (2.0 * control.agents()) * u2;
  }
  out.j1 /= weights.horizon;
  out.j2 /= weights.horizon;
  out.j3 /= weights.horizon;
  return out;
}

// Backward sweep, the reverse mode of the forward scheme. g is the adjoint
// density: minus the derivative of the discrete cost with respect to f,
// divided by the cell volume. Every sub-step is differentiated exactly at
// states recomputed from the stored one. The acceleration built at node n is used by the
// half steps on both sides of the node; its sensitivity W feeds the nonlocal
// term D (back into g) and the agent sensitivity R (into phi).
AdjointRecord integrate_adjoint(ForwardRecord& record, const ControlSchedule& control,
                                const Solver& solver, const CostWeights& weights,
                                bool keep_history) {
  const PhaseGrid& grid = solver.grid();
  const std::size_t steps = record.steps();
  const std::size_t sps = record.steps_per_slice;
  const std::size_t block = grid.velocity_cells();
  const std::size_t mdim = 2 * static_cast<std::size_t>(control.agents());

  AdjointRecord adj;
  adj.phi.assign(steps + 1, std::vector<double>(mdim, 0.0));
  adj.phi_slice_integral.assign(static_cast<std::size_t>(control.slices()),
                                std::vector<double>(mdim, 0.0));
  if (keep_history) adj.g.assign(steps + 1, {});

  std::vector<double> g(grid.cells(), 0.0);
  std::vector<double> carried(2 * grid.spatial_cells(), 0.0);  // W from the later half step
  auto add_source = [&](std::size_t n, double w) {
    subtract_spatial(g, cost_source(grid, record.crowd_moments[n], record.mass[n], weights), w,
                     block);
  };

  add_source(steps, 0.5 * (record.times[steps] - record.times[steps - 1]));
  if (keep_history) adj.g[steps] = g;
  for (std::size_t n = steps; n-- > 0;) {
    const double dt = record.times[n + 1] - record.times[n];
    const MfState next = record.states.at(n + 1);  // copy: at(n) may evict it
    const MfState& s = record.states.at(n);

    DensityField fa = s.f;
    solver.velocity_step(fa.values, s.accel, 0.5 * dt, nullptr);
    DensityField fb = fa;
    solver.spatial_step(fb.values, dt, false, nullptr);

    std::vector<double> W = carried;
    solver.velocity_step_adjoint(fb.values, next.accel, 0.5 * dt, g, W);
    // A_{n+1} = A(rho(f_b), d_{n+1})
    subtract_spatial(g, solver.nonlocal_term(W), 1.0, block);
    const std::vector<double> R = solver.agent_sensitivity(W, next.agents);
    for (std::size_t i = 0; i < mdim; ++i) adj.phi[n][i] = adj.phi[n + 1][i] + R[i];
    const std::size_t k = n / sps;
    for (std::size_t i = 0; i < mdim; ++i) adj.phi_slice_integral[k][i] += dt * adj.phi[n][i];

    solver.spatial_step_adjoint(fa.values, dt, g);
    std::fill(carried.begin(), carried.end(), 0.0);
    solver.velocity_step_adjoint(s.f.values, s.accel, 0.5 * dt, g, carried);

    const double w = n > 0 ? 0.5 * (dt + record.times[n] - record.times[n - 1]) : 0.5 * dt;
    add_source(n, w);
    if (keep_history) adj.g[n] = g;
  }
  if (!keep_history) adj.g.push_back(std::move(g));
  return adj;
}

ControlSchedule gradient_from_adjoint(const AdjointRecord& adjoint, const ControlSchedule& control,
                                      const CostWeights& weights) {
  ControlSchedule g = control.zeros_like();
  const double reg = weights.sigma3 / (control.agents() * weights.horizon);
  for (int k = 0; k < control.slices(); ++k) {
    auto gk = g.slice(k);
    auto uk = control.slice(k);
    const auto& integral = adjoint.phi_slice_integral[static_cast<std::size_t>(k)];
    const double len = control.slice_length(k);
    for (std::size_t i = 0; i < gk.size(); ++i) gk[i] = reg * uk[i] - integral[i] / len;
  }
  return g;
}

GradientResult reduced_gradient(const ControlSchedule& control, const DensityField& f0,
                                std::span<const double> agents0, const Solver& solver,
                                const CostWeights& weights, std::size_t steps_per_slice) {
  ForwardRecord rec = integrate_forward(f0, agents0, control, solver, steps_per_slice);
  const AdjointRecord adj = integrate_adjoint(rec, control, solver, weights);
  return GradientResult{gradient_from_adjoint(adj, control, weights),
                        assemble_cost(rec, control, weights)};
}

Problem::Problem(DensityField f0, std::vector<double> agents0,
                 std::shared_ptr<const Solver> solver, CostWeights weights,
                 std::size_t steps_per_slice, std::size_t memory_budget_bytes)
    : f0_(std::move(f0)),
      agents0_(std::move(agents0)),
      solver_(std::move(solver)),
      weights_(std::move(weights)),
      steps_per_slice_(steps_per_slice),
      budget_(memory_budget_bytes) {
  if (!solver_) throw Error("mean-field problem needs a solver");
  if (steps_per_slice_ == 0) throw Error("steps per slice must be positive");
  if (!(f0_.grid == solver_->grid())) throw Error("density grid does not match the solver grid");
  weights_.validate();
}

std::size_t Problem::stride_for(const ControlSchedule& control) const {
  if (budget_ == 0) return 1;
  const std::size_t snapshots = steps_per_slice_ * static_cast<std::size_t>(control.slices()) + 1;
  const std::size_t bytes = f0_.bytes();
  const std::size_t working = kAdjointWorkingSet * bytes;
  if (budget_ <= working) throw Error("memory budget does not cover the adjoint working set");
  if (store_) return choose_spilled_stride(bytes, budget_ - working);
  return choose_stride(snapshots, bytes, budget_ - working);
}

optimize::CostBreakdown Problem::evaluate(const ControlSchedule& control) {
  const std::size_t steps = steps_per_slice_ * static_cast<std::size_t>(control.slices());
  auto rec = std::make_unique<ForwardRecord>(
      integrate_forward(f0_, agents0_, control, *solver_, steps_per_slice_, steps + 1));
  const optimize::CostBreakdown cost = assemble_cost(*rec, control, weights_);
  peak_bytes_ = std::max(peak_bytes_, 3 * f0_.bytes());
  last_ = std::move(rec);
  return cost;
}

ControlSchedule Problem::gradient(const ControlSchedule& control, optimize::CostBreakdown* cost) {
  auto rec = std::make_unique<ForwardRecord>(integrate_forward(
      f0_, agents0_, control, *solver_, steps_per_slice_, stride_for(control),
      store_ ? store_() : nullptr));
  if (cost != nullptr) *cost = assemble_cost(*rec, control, weights_);
  const AdjointRecord adj = integrate_adjoint(*rec, control, *solver_, weights_);
  const std::size_t resident = rec->states.peak_resident() * f0_.bytes();
  peak_bytes_ = std::max(peak_bytes_, resident + kAdjointWorkingSet * f0_.bytes());
  ControlSchedule g = gradient_from_adjoint(adj, control, weights_);
  last_ = std::move(rec);
  return g;
}

TimeSample make_sample(double t, const DensityField& f, std::span<const double> agents) {
  TimeSample s;
  s.t = t;
  s.rho = f.spatial_density();
  s.crowd = spatial_moments(f.grid, s.rho);
  s.agents.assign(agents.begin(), agents.end());
  double m = 0.0;
  for (double r : s.rho) m += r;
  s.mass = m * f.grid.dx() * f.grid.dx();
  return s;
}

SlicedSystem::SlicedSystem(DensityField f0, std::vector<double> agents0,
                           std::shared_ptr<const Solver> solver, CostWeights weights,
                           std::size_t steps_per_slice)
    : solver_(std::move(solver)), weights_(std::move(weights)), steps_per_slice_(steps_per_slice) {
  if (!solver_) throw Error("mean-field system needs a solver");
  if (steps_per_slice_ == 0) throw Error("steps per slice must be positive");
  state_ = solver_->make_state(std::move(f0), std::move(agents0));
  samples_.push_back(make_sample(0.0, state_.f, state_.agents));
}

std::unique_ptr<optimize::ReducedProblem> SlicedSystem::slice_problem(double /*t0*/,
                                                                      double length) {
  CostWeights w = weights_;
  w.horizon = length;
  return std::make_unique<Problem>(state_.f, state_.agents, solver_, w, steps_per_slice_);
}

void SlicedSystem::commit(const ControlSchedule& slice_control) {
  check_control(state_, slice_control);
  StepStats stats;
  for (int k = 0; k < slice_control.slices(); ++k) {
    const double h = slice_control.slice_length(k) / static_cast<double>(steps_per_slice_);
    for (std::size_t j = 0; j < steps_per_slice_; ++j) {
      state_ = solver_->step(state_, slice_control.slice(k), h, &stats);
      time_ = slice_control.knots()[k] + static_cast<double>(j + 1) * h;
      samples_.push_back(make_sample(time_, state_.f, state_.agents));
    }
  }
  clipped_ += stats.clipped_mass;
}

}  // namespace shepherd::meanfield
