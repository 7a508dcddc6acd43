#include "shepherd/micro.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace shepherd::micro {

namespace {

// Adjoint stages, frames and interpolated states, counted in snapshot sizes.
constexpr std::size_t kAdjointWorkingSet = 12;

void check_control(const MicroState& state, const ControlSchedule& control) {
  if (control.dim() != state.dim) throw Error("control dimension does not match the state");
  if (static_cast<std::size_t>(control.agents()) != state.agent_count()) {
    throw Error("control agent count does not match the state");
  }
}

// y + h * k, where k = (dx, dv, dd).
MicroState shifted(const MicroState& y, const MicroState& k, double h) {
  MicroState out = y;
  for (std::size_t i = 0; i < out.positions.size(); ++i) out.positions[i] += h * k.positions[i];
  for (std::size_t i = 0; i < out.velocities.size(); ++i) out.velocities[i] += h * k.velocities[i];
  for (std::size_t i = 0; i < out.agents.size(); ++i) out.agents[i] += h * k.agents[i];
  return out;
}

MicroState rhs(const MicroState& y, std::span<const double> control, const InteractionModel& model) {
  MicroState k;
  k.dim = y.dim;
  k.positions = y.velocities;
  k.velocities.resize(y.velocities.size());
  micro_drift(y, model, k.velocities);
  k.agents.assign(control.begin(), control.end());
  return k;
}

struct AdjointState {
  std::vector<double> r, s, phi;
};

// Data the adjoint right-hand side needs at one time: positions, agents and the
// source coefficients built from the crowd moments there.
struct AdjointFrame {
  std::vector<double> x;
  std::vector<double> d;
  std::vector<double> mean;
  double variance_gap = 0.0;  // V - Vbar
};

AdjointFrame make_frame(std::vector<double> x, std::vector<double> d, int dim,
                        const CostWeights& w) {
  AdjointFrame f;
  Moments m = moments(x, dim);
  f.x = std::move(x);
  f.d = std::move(d);
  f.mean = std::move(m.mean);
  f.variance_gap = m.variance - w.target_variance;
  return f;
}

// Adds H(z) w to out, with H the Hessian of Phi at z.
inline void add_hessian_product(const PotentialParams& p, const double* z, const double* w,
                                double scale, double* out, std::size_t dim) {
  double s2 = 0.0;
  for (std::size_t c = 0; c < dim; ++c) s2 += z[c] * z[c];
  if (s2 == 0.0) return;
  const double s = std::sqrt(s2);
  const RadialDerivatives rd = radial_derivatives(p, s);
  const double iso = rd.first / s;
  const double radial = (rd.second - iso) / s2;
  double zw = 0.0;
  for (std::size_t c = 0; c < dim; ++c) zw += z[c] * w[c];
  for (std::size_t c = 0; c < dim; ++c) out[c] += scale * (radial * zw * z[c] + iso * w[c]);
}

// Homogeneous part of the adjoint right-hand side. The cost source is added
// separately as node impulses (see apply_source).
AdjointState adjoint_rhs(const AdjointFrame& f, const AdjointState& a, const InteractionModel& model,
                         int dim_i) {
  const std::size_t dim = static_cast<std::size_t>(dim_i);
  const std::size_t n = f.x.size() / dim;
  const std::size_t m = f.d.size() / dim;
  const double inv_n = 1.0 / static_cast<double>(n);
  const double inv_m = 1.0 / static_cast<double>(m);
  AdjointState out;
  out.r.assign(n * dim, 0.0);
  out.s.resize(n * dim);
  out.phi.assign(m * dim, 0.0);

  for (std::size_t i = 0; i < n * dim; ++i) out.s[i] = -a.r[i] + model.friction * a.s[i];

  std::vector<double> z(dim), ds(dim);
  const PotentialParams& p1 = model.crowd;
  if (p1.attraction_strength != 0.0 || p1.repulsion_strength != 0.0) {
    std::vector<double> acc(dim);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        for (std::size_t c = 0; c < dim; ++c) {
          z[c] = f.x[i * dim + c] - f.x[j * dim + c];
          ds[c] = a.s[i * dim + c] - a.s[j * dim + c];
        }
        std::fill(acc.begin(), acc.end(), 0.0);
        add_hessian_product(p1, z.data(), ds.data(), inv_n, acc.data(), dim);
        for (std::size_t c = 0; c < dim; ++c) {
          out.r[i * dim + c] += acc[c];
          out.r[j * dim + c] -= acc[c];
        }
      }
    }
  }

  const PotentialParams& p2 = model.agent;
  if (p2.attraction_strength != 0.0 || p2.repulsion_strength != 0.0) {
    std::vector<double> acc(dim);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < m; ++k) {
        for (std::size_t c = 0; c < dim; ++c) z[c] = f.x[i * dim + c] - f.d[k * dim + c];
        std::fill(acc.begin(), acc.end(), 0.0);
        add_hessian_product(p2, z.data(), &a.s[i * dim], inv_m, acc.data(), dim);
        for (std::size_t c = 0; c < dim; ++c) {
          out.r[i * dim + c] += acc[c];
          out.phi[k * dim + c] -= acc[c];
        }
      }
    }
  }

  return out;
}

// The cost is integrated with the trapezoid rule on the step grid, so its
// sensitivity enters r as a jump at every node with the trapezoid weight.
// Marching backward, r(t_n-) = r(t_n+) - weight * d_x l(t_n) / T.
void apply_source(const AdjointFrame& f, std::vector<double>& r, const CostWeights& w, int dim_i,
                  double weight) {
  const std::size_t dim = static_cast<std::size_t>(dim_i);
  const std::size_t n = f.x.size() / dim;
  const double pre = weight / w.horizon;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < dim; ++c) {
      r[i * dim + c] -= pre * (w.sigma1 * f.variance_gap * (f.x[i * dim + c] - f.mean[c]) +
                               w.sigma2 * (f.mean[c] - w.destination[c]));
    }
  }
}

AdjointState stage(const AdjointState& a, const AdjointState& k, double h) {
  AdjointState out = a;
  for (std::size_t i = 0; i < out.r.size(); ++i) out.r[i] += h * k.r[i];
  for (std::size_t i = 0; i < out.s.size(); ++i) out.s[i] += h * k.s[i];
  for (std::size_t i = 0; i < out.phi.size(); ++i) out.phi[i] += h * k.phi[i];
  return out;
}

}  // namespace

MicroState rk4_step(const MicroState& y, std::span<const double> control,
                    const InteractionModel& model, double dt) {
  const MicroState k1 = rhs(y, control, model);
  const MicroState k2 = rhs(shifted(y, k1, 0.5 * dt), control, model);
  const MicroState k3 = rhs(shifted(y, k2, 0.5 * dt), control, model);
  const MicroState k4 = rhs(shifted(y, k3, dt), control, model);
  MicroState out = y;
  const double w = dt / 6.0;
  for (std::size_t i = 0; i < out.positions.size(); ++i) {
    out.positions[i] +=
        w * (k1.positions[i] + 2.0 * k2.positions[i] + 2.0 * k3.positions[i] + k4.positions[i]);
  }
  for (std::size_t i = 0; i < out.velocities.size(); ++i) {
    out.velocities[i] += w * (k1.velocities[i] + 2.0 * k2.velocities[i] +
                              2.0 * k3.velocities[i] + k4.velocities[i]);
  }
  // The agent velocity is frozen over the step, so this is exact.
  for (std::size_t i = 0; i < out.agents.size(); ++i) out.agents[i] += dt * control[i];
  return out;
}

ForwardRecord integrate_forward(const MicroState& initial, const ControlSchedule& control,
                                const InteractionModel& model, std::size_t steps,
                                std::size_t stride,
                                std::shared_ptr<CheckpointStore<MicroState>> store) {
  initial.validate();
  model.validate();
  check_control(initial, control);
  const std::size_t slices = static_cast<std::size_t>(control.slices());
  if (steps == 0 || steps % slices != 0) {
    throw Error("RK4 step count must be a positive multiple of the slice count");
  }
  const std::size_t per_slice = steps / slices;

  ForwardRecord rec;
  rec.steps_per_slice = per_slice;
  rec.dt = control.slice_length(0) / static_cast<double>(per_slice);
  rec.times.resize(steps + 1);
  for (std::size_t n = 0; n <= steps; ++n) {
    const std::size_t k = std::min(n / per_slice, slices - 1);
    const std::size_t j = n - k * per_slice;
    rec.times[n] = control.knots()[k] +
                   control.slice_length(static_cast<int>(k)) * static_cast<double>(j) /
                       static_cast<double>(per_slice);
  }
  rec.times.back() = control.end();

  auto stepper = [control, model, per_slice, times = rec.times](const MicroState& y,
                                                                 std::size_t n) {
    const int k = static_cast<int>(n / per_slice);
    return rk4_step(y, control.slice(k), model, times[n + 1] - times[n]);
  };
  rec.states = Trajectory<MicroState>(steps + 1, stride, stepper);
  if (store) rec.states.use_store(std::move(store));
  rec.crowd_moments.reserve(steps + 1);
  rec.agent_positions.reserve(steps + 1);

  MicroState y = initial;
  for (std::size_t n = 0;; ++n) {
    rec.crowd_moments.push_back(moments(y.positions, y.dim));
    rec.agent_positions.push_back(y.agents);
    if (!y.finite()) throw SolverError("forward integration produced non-finite values");
    if (n == steps) {
      rec.states.push(std::move(y));
      break;
    }
    MicroState next = stepper(y, n);
    rec.states.push(std::move(y));
    y = std::move(next);
  }
  return rec;
}

AdjointRecord integrate_adjoint(ForwardRecord& record, const ControlSchedule& control,
                                const InteractionModel& model, const CostWeights& weights,
                                AdjointScaling scaling, bool keep_history) {
  weights.validate();
  const std::size_t steps = record.steps();
  const std::size_t per_slice = record.steps_per_slice;
  const MicroState& y0 = record.states.at(0);
  const int dim = y0.dim;
  const std::size_t n = y0.particle_count();
  const std::size_t m = y0.agent_count();
  const double source_scale =
      scaling == AdjointScaling::Rescaled ? 1.0 : 1.0 / static_cast<double>(n);

  AdjointRecord out;
  out.rescaled = scaling == AdjointScaling::Rescaled;
  out.phi.assign(steps + 1, {});
  out.phi_slice_integral.assign(static_cast<std::size_t>(control.slices()),
                                std::vector<double>(m * dim, 0.0));
  if (keep_history) {
    out.r.assign(steps + 1, {});
    out.s.assign(steps + 1, {});
  }

  AdjointState a{std::vector<double>(n * dim, 0.0), std::vector<double>(n * dim, 0.0),
                 std::vector<double>(m * dim, 0.0)};
  out.phi[steps] = a.phi;
  if (keep_history) {
    out.r[steps] = a.r;
    out.s[steps] = a.s;
  }

  // Frame at the upper end of the current step, reused as we march backward.
  MicroState upper = record.states.at(steps);
  AdjointFrame f_hi = make_frame(upper.positions, upper.agents, dim, weights);
  // Stored values are right limits at each node, so the terminal one is zero.
  // The jump at t_0 would not reach the gradient and is skipped.
  auto step_length = [&](std::size_t k) { return record.times[k + 1] - record.times[k]; };
  apply_source(f_hi, a.r, weights, dim, source_scale * 0.5 * step_length(steps - 1));

  for (std::size_t step = steps; step-- > 0;) {
    const MicroState lower = record.states.at(step);
    const double h = record.times[step + 1] - record.times[step];

    // Cubic Hermite midpoint of the positions, using the stored velocities.
    std::vector<double> xm(lower.positions.size());
    for (std::size_t i = 0; i < xm.size(); ++i) {
      xm[i] = 0.5 * (lower.positions[i] + upper.positions[i]) +
              0.125 * h * (lower.velocities[i] - upper.velocities[i]);
    }
    std::vector<double> dm(lower.agents.size());
    for (std::size_t i = 0; i < dm.size(); ++i) dm[i] = 0.5 * (lower.agents[i] + upper.agents[i]);
    const AdjointFrame f_mid = make_frame(std::move(xm), std::move(dm), dim, weights);
    AdjointFrame f_lo = make_frame(lower.positions, lower.agents, dim, weights);

    const AdjointState k1 = adjoint_rhs(f_hi, a, model, dim);
    const AdjointState a2 = stage(a, k1, -0.5 * h);
    const AdjointState k2 = adjoint_rhs(f_mid, a2, model, dim);
    const AdjointState a3 = stage(a, k2, -0.5 * h);
    const AdjointState k3 = adjoint_rhs(f_mid, a3, model, dim);
    const AdjointState a4 = stage(a, k3, -h);
    const AdjointState k4 = adjoint_rhs(f_lo, a4, model, dim);

    auto& integral = out.phi_slice_integral[step / per_slice];
    for (std::size_t i = 0; i < integral.size(); ++i) {
      integral[i] += h / 6.0 * (a.phi[i] + 2.0 * a2.phi[i] + 2.0 * a3.phi[i] + a4.phi[i]);
    }

    AdjointState next = a;
    const double w = -h / 6.0;
    for (std::size_t i = 0; i < next.r.size(); ++i) {
      next.r[i] += w * (k1.r[i] + 2.0 * k2.r[i] + 2.0 * k3.r[i] + k4.r[i]);
      next.s[i] += w * (k1.s[i] + 2.0 * k2.s[i] + 2.0 * k3.s[i] + k4.s[i]);
    }
    for (std::size_t i = 0; i < next.phi.size(); ++i) {
      next.phi[i] += w * (k1.phi[i] + 2.0 * k2.phi[i] + 2.0 * k3.phi[i] + k4.phi[i]);
    }
    a = std::move(next);

    out.phi[step] = a.phi;
    if (keep_history) {
      out.r[step] = a.r;
      out.s[step] = a.s;
    }
    if (step > 0) {
      apply_source(f_lo, a.r, weights, dim,
                   source_scale * 0.5 * (step_length(step) + step_length(step - 1)));
    }
    upper = lower;
    f_hi = std::move(f_lo);
  }
  if (!keep_history) {
    out.r.push_back(a.r);
    out.s.push_back(a.s);
  }
  for (const auto& v : out.phi) {
    for (double x : v) {
      if (!std::isfinite(x)) throw SolverError("adjoint integration produced non-finite values");
    }
  }
  return out;
}

optimize::CostBreakdown assemble_cost(const ForwardRecord& record, const ControlSchedule& control,
                                      const CostWeights& weights) {
  optimize::CostBreakdown out;
  const std::size_t steps = record.steps();
  const std::vector<double> none;
  auto parts_at = [&](std::size_t n) {
    const Moments& mo = record.crowd_moments[n];
    return running_cost(mo.mean, mo.variance, none, control.agents(), weights);
  };
  CostParts prev = parts_at(0);
  for (std::size_t n = 0; n < steps; ++n) {
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

ControlSchedule gradient_from_adjoint(const AdjointRecord& adjoint, const ControlSchedule& control,
                                      const CostWeights& weights, std::size_t particles) {
  ControlSchedule g = control.zeros_like();
  const double adj_scale = adjoint.rescaled ? 1.0 / static_cast<double>(particles) : 1.0;
  const double reg = weights.sigma3 / (control.agents() * weights.horizon);
  for (int k = 0; k < control.slices(); ++k) {
    auto gk = g.slice(k);
    auto uk = control.slice(k);
    const auto& integral = adjoint.phi_slice_integral[static_cast<std::size_t>(k)];
    const double len = control.slice_length(k);
    for (std::size_t i = 0; i < gk.size(); ++i) {
      gk[i] = reg * uk[i] - adj_scale * integral[i] / len;
    }
  }
  return g;
}

GradientResult reduced_gradient(const ControlSchedule& control, const MicroState& initial,
                                const InteractionModel& model, const CostWeights& weights,
                                std::size_t steps_per_slice) {
  ForwardRecord rec = integrate_forward(initial, control, model,
                                        steps_per_slice * static_cast<std::size_t>(control.slices()));
  const AdjointRecord adj = integrate_adjoint(rec, control, model, weights);
  return GradientResult{gradient_from_adjoint(adj, control, weights, initial.particle_count()),
                        assemble_cost(rec, control, weights)};
}

MicroState sample_particles(std::size_t count, std::span<const double> box_lo,
                            std::span<const double> box_hi, double velocity_std,
                            std::span<const double> agents, std::uint64_t seed,
                            Sampling sampling) {
  if (box_lo.size() != box_hi.size() || box_lo.empty()) throw Error("sampling box is malformed");
  const int dim = static_cast<int>(box_lo.size());
  if (agents.size() % box_lo.size() != 0) throw Error("agent positions do not match dimension");
  MicroState s(dim, count, agents.size() / box_lo.size());
  std::mt19937_64 rng(seed);
  std::vector<std::uniform_real_distribution<double>> pos;
  for (int c = 0; c < dim; ++c) {
    if (!(box_hi[c] > box_lo[c])) throw Error("sampling box must have positive extent");
    pos.emplace_back(box_lo[c], box_hi[c]);
  }
  std::normal_distribution<double> vel(0.0, velocity_std > 0.0 ? velocity_std : 1.0);
  if (sampling == Sampling::Random) {
    for (std::size_t i = 0; i < count; ++i) {
      for (int c = 0; c < dim; ++c) s.positions[i * dim + c] = pos[c](rng);
    }
  } else {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::vector<std::size_t> slab(count);
    for (int c = 0; c < dim; ++c) {
      std::iota(slab.begin(), slab.end(), std::size_t{0});
      std::shuffle(slab.begin(), slab.end(), rng);
      const double w = (box_hi[c] - box_lo[c]) / static_cast<double>(count);
      for (std::size_t i = 0; i < count; ++i)
        s.positions[i * dim + c] = box_lo[c] + (static_cast<double>(slab[i]) + unit(rng)) * w;
    }
  }
  if (velocity_std > 0.0) {
    for (double& v : s.velocities) v = vel(rng);
  }
  std::copy(agents.begin(), agents.end(), s.agents.begin());
  return s;
}

Problem::Problem(MicroState initial, InteractionModel model, CostWeights weights,
                 std::size_t steps_per_slice, std::size_t memory_budget_bytes)
    : initial_(std::move(initial)),
      model_(std::move(model)),
      weights_(std::move(weights)),
      steps_per_slice_(steps_per_slice),
      budget_(memory_budget_bytes) {
  if (steps_per_slice_ == 0) throw Error("steps per slice must be positive");
  initial_.validate();
  model_.validate();
  weights_.validate();
}

std::size_t Problem::stride_for(const ControlSchedule& control) const {
  if (budget_ == 0) return 1;
  const std::size_t snapshots = steps_per_slice_ * static_cast<std::size_t>(control.slices()) + 1;
  const std::size_t working = kAdjointWorkingSet * initial_.bytes();
  if (budget_ <= working) throw Error("memory budget does not cover the adjoint working set");
  if (store_) return choose_spilled_stride(initial_.bytes(), budget_ - working);
  return choose_stride(snapshots, initial_.bytes(), budget_ - working);
}

optimize::CostBreakdown Problem::evaluate(const ControlSchedule& control) {
  const std::size_t steps = steps_per_slice_ * static_cast<std::size_t>(control.slices());
  // Cost evaluation never revisits states, so keep only the initial one.
  auto rec = std::make_unique<ForwardRecord>(
      integrate_forward(initial_, control, model_, steps, steps + 1));
  const optimize::CostBreakdown cost = assemble_cost(*rec, control, weights_);
  peak_bytes_ = std::max(peak_bytes_, 2 * initial_.bytes());
  last_ = std::move(rec);
  return cost;
}

ControlSchedule Problem::gradient(const ControlSchedule& control, optimize::CostBreakdown* cost) {
  const std::size_t steps = steps_per_slice_ * static_cast<std::size_t>(control.slices());
  auto rec = std::make_unique<ForwardRecord>(
      integrate_forward(initial_, control, model_, steps, stride_for(control),
                        store_ ? store_() : nullptr));
  if (cost != nullptr) *cost = assemble_cost(*rec, control, weights_);
  const AdjointRecord adj = integrate_adjoint(*rec, control, model_, weights_);
  // Resident forward snapshots plus the adjoint working set (a few N x 2D vectors).
  const std::size_t resident = rec->states.peak_resident() * initial_.bytes();
  peak_bytes_ = std::max(peak_bytes_, resident + kAdjointWorkingSet * initial_.bytes());
  ControlSchedule g = gradient_from_adjoint(adj, control, weights_, initial_.particle_count());
  last_ = std::move(rec);
  return g;
}

SlicedSystem::SlicedSystem(MicroState initial, InteractionModel model, CostWeights weights,
                           std::size_t steps_per_slice)
    : state_(std::move(initial)),
      model_(std::move(model)),
      weights_(std::move(weights)),
      steps_per_slice_(steps_per_slice) {
  state_.validate();
  samples_.push_back(TimeSample{0.0, moments(state_.positions, state_.dim), state_.agents});
  slice_states_.push_back(state_);
}

std::unique_ptr<optimize::ReducedProblem> SlicedSystem::slice_problem(double /*t0*/,
                                                                      double length) {
  CostWeights w = weights_;
  w.horizon = length;
  return std::make_unique<Problem>(state_, model_, w, steps_per_slice_);
}

void SlicedSystem::commit(const ControlSchedule& slice_control) {
  check_control(state_, slice_control);
  for (int k = 0; k < slice_control.slices(); ++k) {
    const double h = slice_control.slice_length(k) / static_cast<double>(steps_per_slice_);
    for (std::size_t j = 0; j < steps_per_slice_; ++j) {
      state_ = rk4_step(state_, slice_control.slice(k), model_, h);
      time_ = slice_control.knots()[k] + static_cast<double>(j + 1) * h;
      samples_.push_back(TimeSample{time_, moments(state_.positions, state_.dim), state_.agents});
    }
    if (!state_.finite()) throw SolverError("instantaneous control produced non-finite values");
    slice_states_.push_back(state_);
  }
}

}  // namespace shepherd::micro
