#pragma once

// Mean-field level: a 4-D phase-space density (2-D space x 2-D velocity)
// advanced by Strang splitting, the backward adjoint sweep and the reduced
// gradient with respect to the agent velocities.
//
// Splitting per step of length dt:
//   velocity half step   f_t + div_v((A(x) - alpha v) f) = 0   with A from (rho_n, d_n)
//   spatial full step    f_t + v . grad_x f = 0                semi-Lagrangian, cubic
//   velocity half step   as above with A from (rho_{n+1}, d_{n+1})
// The velocity steps never change rho, so one convolution per step suffices;
// the acceleration of the new state is carried into the next step.

#include <cstddef>
#include <memory>
#include <span>
#include <vector>

#include "shepherd/checkpoint.hpp"
#include "shepherd/control.hpp"
#include "shepherd/model.hpp"
#include "shepherd/optimize.hpp"

namespace shepherd::meanfield {

/// Uniform cell-centred tensor grid on [-x_half, x_half]^2 x [-v_max, v_max]^2.
struct PhaseGrid {
  int nx = 25;
  int nv = 25;
  double x_half = 100.0;
  double v_max = 5.0;

  double dx() const { return 2.0 * x_half / nx; }
  double dv() const { return 2.0 * v_max / nv; }
  double x(int i) const { return -x_half + (i + 0.5) * dx(); }
  double v(int j) const { return -v_max + (j + 0.5) * dv(); }
  std::size_t spatial_cells() const { return static_cast<std::size_t>(nx) * nx; }
  std::size_t velocity_cells() const { return static_cast<std::size_t>(nv) * nv; }
  std::size_t cells() const { return spatial_cells() * velocity_cells(); }
  std::size_t index(int ix, int iy, int ivx, int ivy) const {
    return ((static_cast<std::size_t>(ix) * nx + iy) * nv + ivx) * nv + ivy;
  }
  double cell_volume() const { return dx() * dx() * dv() * dv(); }
  /// Largest step allowed by the transport CFL condition dt v_max / dx <= 1/2.
  double max_step() const { return 0.5 * dx() / v_max; }

  void validate() const;
  bool operator==(const PhaseGrid&) const = default;
};

/// Throws with the violated inequality when dt breaks the transport CFL bound.
void check_cfl(const PhaseGrid& grid, double dt);

/// Nonnegative density with values in grid.index order.
struct DensityField {
  PhaseGrid grid;
  std::vector<double> values;

  DensityField() = default;
  explicit DensityField(const PhaseGrid& g) : grid(g), values(g.cells(), 0.0) {}

  double mass() const;
  /// Velocity marginal rho on the nx x nx spatial cells.
  std::vector<double> spatial_density() const;
  Moments moments() const;
  double min_value() const;
  std::size_t bytes() const { return values.size() * sizeof(double); }
};

/// Moments of a spatial density (unnormalised integrals, as in the cost).
Moments spatial_moments(const PhaseGrid& grid, std::span<const double> rho);

/// Uniform on the spatial box (partial coverage of edge cells counted
/// exactly) times a Gaussian bump of the given width at v = 0. Mass is
/// renormalised to 1.
DensityField sample_initial_density(const PhaseGrid& grid, std::span<const double> box_lo,
                                    std::span<const double> box_hi, double velocity_width = 0.5);

/// grad Phi tabulated at every offset between two spatial cell centres.
class ForceTable {
 public:
  ForceTable() = default;
  ForceTable(const PhaseGrid& grid, const PotentialParams& p);

  /// out(c) = sum_c' grad Phi(x_c - x_c') rho(c') dx^2, two components per cell.
  void convolve(std::span<const double> rho, std::span<double> out) const;
  /// out(c) = sum_c' grad Phi(x_c - x_c') . w(c') dx^2 for a vector field w.
  void convolve_dot(std::span<const double> w, std::span<double> out) const;
  bool active() const { return active_; }

 private:
  int n_ = 0;
  double area_ = 0.0;
  bool active_ = false;
  std::vector<double> tx_, ty_;  // (2n-1)^2 offsets
};

/// Direct-summation convolution K_1 * rho at every spatial cell centre.
std::vector<double> convolve_force(const DensityField& field, const PotentialParams& p);

/// None gives the plain linear schemes (Lax-Wendroff in v, unlimited cubic
/// fluxes in x); used for smooth-problem order checks and transpose tests.
enum class Limiter { VanLeer, None };

struct SchemeOptions {
  Limiter limiter = Limiter::VanLeer;
  /// Courant number bound for each velocity sub-step.
  double velocity_cfl = 0.5;
  /// Set negative values to zero after each sub-step. Turning this off with
  /// Limiter::None leaves a linear scheme that moves the low moments exactly.
  bool clip = true;
};

struct StepStats {
  double clipped_mass = 0.0;  // mass added by clipping negative values
  int max_substeps = 0;       // largest velocity sub-cycle count
};

/// Density, agent positions and the acceleration field A(rho, d) of this
/// state (carried so each step needs one convolution).
struct MfState {
  DensityField f;
  std::vector<double> agents;
  std::vector<double> accel;  // two components per spatial cell
  std::size_t bytes() const {
    return f.bytes() + (agents.size() + accel.size()) * sizeof(double);
  }
};

/// Forward and adjoint building blocks on one grid with one interaction model.
class Solver {
 public:
  Solver(const PhaseGrid& grid, const InteractionModel& model, SchemeOptions options = {});

  const PhaseGrid& grid() const { return grid_; }
  const InteractionModel& model() const { return model_; }
  const SchemeOptions& options() const { return options_; }

  /// A(x) = -(K_1 * rho)(x) - (1/M) sum_m K_2(x, d_m), two components per cell.
  std::vector<double> acceleration(std::span<const double> rho,
                                   std::span<const double> agents) const;
  MfState make_state(DensityField f, std::vector<double> agents) const;

  /// Finite-volume velocity step of length h (sub-cycled for the CFL bound),
  /// negative values clipped at the end.
  void velocity_step(std::span<double> f, std::span<const double> accel, double h,
                     StepStats* stats) const;
  /// Reverse-mode derivative of velocity_step at input `f_in`: replaces `g`
  /// (a derivative with respect to the output) by the derivative with respect
  /// to the input, and adds the sensitivity to the acceleration field to
  /// `accel_sens` (two components per spatial cell, scaled by dv^2 so that it
  /// approaches h G from weighted_velocity_gradient as the grid is refined).
  /// Sub-cycles, limiter and clipping are differentiated exactly.
  void velocity_step_adjoint(std::span<const double> f_in, std::span<const double> accel,
                             double h, std::span<double> g, std::span<double> accel_sens) const;
  /// Conservative semi-Lagrangian shift by v dt (x1 then x2). The face fluxes
  /// integrate a cubic reconstruction over the backtracked interval, limited
  /// for positivity. With transpose = true applies the exact transpose of the
  /// unlimited operator.
  void spatial_step(std::span<double> f, double dt, bool transpose, StepStats* stats) const;

  /// Reverse-mode derivative of the (limited) spatial step at input f_in.
  void spatial_step_adjoint(std::span<const double> f_in, double dt, std::span<double> g) const;

  /// One Strang step of length dt with agent velocities `control` frozen over it.
  MfState step(const MfState& s, std::span<const double> control, double dt,
               StepStats* stats) const;

  /// G(x) = sum_v grad_v g f dv^2 (two components per spatial cell), centred
  /// differences in v, one-sided at the velocity boundary.
  std::vector<double> weighted_velocity_gradient(std::span<const double> g,
                                                 std::span<const double> f) const;
  /// D(x) = sum_x' grad Phi_1(x' - x) . G(x') dx^2 for a field G like the one
  /// above or the sensitivity from velocity_step_adjoint.
  std::vector<double> nonlocal_term(std::span<const double> weighted_gradient) const;
  /// R_m = (1/M) sum_x H_2(x - d_m) G(x) dx^2, two components per agent.
  std::vector<double> agent_sensitivity(std::span<const double> weighted_gradient,
                                        std::span<const double> agents) const;

 private:
  void clip(std::span<double> f, StepStats* stats) const;

  PhaseGrid grid_;
  InteractionModel model_;
  SchemeOptions options_;
  ForceTable crowd_;
};

/// Single Strang step with a freshly built solver on the field's grid.
DensityField strang_forward_step(const DensityField& field, std::span<const double> agents,
                                 std::span<const double> control, const InteractionModel& model,
                                 double dt);

struct ForwardRecord {
  std::vector<double> times;
  Trajectory<MfState> states;
  std::vector<Moments> crowd_moments;
  std::vector<std::vector<double>> agent_positions;
  std::vector<double> mass;
  double clipped_mass = 0.0;
  std::size_t steps_per_slice = 1;

  std::size_t steps() const { return times.size() - 1; }
};

/// Steps per slice so that dt <= cfl_fraction * max_step.
std::size_t steps_per_slice_for(const PhaseGrid& grid, double slice_length,
                                double cfl_fraction = 0.5);

/// The record keeps a pointer to `solver` for checkpoint recomputation; the
/// solver must outlive it.
ForwardRecord integrate_forward(const DensityField& f0, std::span<const double> agents0,
                                const ControlSchedule& control, const Solver& solver,
                                std::size_t steps_per_slice, std::size_t stride = 1,
                                std::shared_ptr<CheckpointStore<MfState>> store = nullptr);

struct AdjointRecord {
  std::vector<std::vector<double>> phi;  // per grid time (right limits), M x 2
  std::vector<std::vector<double>> phi_slice_integral;
  std::vector<std::vector<double>> g;  // every grid time if requested, else only t_0
};

AdjointRecord integrate_adjoint(ForwardRecord& record, const ControlSchedule& control,
                                const Solver& solver, const CostWeights& weights,
                                bool keep_history = false);

optimize::CostBreakdown assemble_cost(const ForwardRecord& record, const ControlSchedule& control,
                                      const CostWeights& weights);

/// sigma3/(MT) w - phi_d averaged over each slice.
ControlSchedule gradient_from_adjoint(const AdjointRecord& adjoint, const ControlSchedule& control,
                                      const CostWeights& weights);

struct GradientResult {
  ControlSchedule gradient;
  optimize::CostBreakdown cost;
};

GradientResult reduced_gradient(const ControlSchedule& control, const DensityField& f0,
                                std::span<const double> agents0, const Solver& solver,
                                const CostWeights& weights, std::size_t steps_per_slice);

class Problem : public optimize::ReducedProblem {
 public:
  Problem(DensityField f0, std::vector<double> agents0, std::shared_ptr<const Solver> solver,
          CostWeights weights, std::size_t steps_per_slice, std::size_t memory_budget_bytes = 0);

  optimize::CostBreakdown evaluate(const ControlSchedule& control) override;
  ControlSchedule gradient(const ControlSchedule& control, optimize::CostBreakdown* cost) override;
  std::size_t peak_memory_bytes() const override { return peak_bytes_; }
  const ForwardRecord* last_record() const { return last_.get(); }
  void set_checkpoint_store(CheckpointStoreFactory<MfState> factory) { store_ = std::move(factory); }

 private:
  std::size_t stride_for(const ControlSchedule& control) const;

  DensityField f0_;
  std::vector<double> agents0_;
  std::shared_ptr<const Solver> solver_;
  CostWeights weights_;
  std::size_t steps_per_slice_;
  std::size_t budget_;
  std::size_t peak_bytes_ = 0;
  std::unique_ptr<ForwardRecord> last_;
  CheckpointStoreFactory<MfState> store_;
};

struct TimeSample {
  double t = 0.0;
  Moments crowd;
  std::vector<double> agents;
  std::vector<double> rho;  // spatial density
  double mass = 0.0;
};

class SlicedSystem : public optimize::SlicedSystem {
 public:
  SlicedSystem(DensityField f0, std::vector<double> agents0, std::shared_ptr<const Solver> solver,
               CostWeights weights, std::size_t steps_per_slice);

  std::unique_ptr<optimize::ReducedProblem> slice_problem(double t0, double length) override;
  void commit(const ControlSchedule& slice_control) override;

  const DensityField& density() const { return state_.f; }
  const std::vector<double>& agents() const { return state_.agents; }
  const std::vector<TimeSample>& samples() const { return samples_; }
  double clipped_mass() const { return clipped_; }

 private:
  MfState state_;
  std::shared_ptr<const Solver> solver_;
  CostWeights weights_;
  std::size_t steps_per_slice_;
  double time_ = 0.0;
  double clipped_ = 0.0;
  std::vector<TimeSample> samples_;
};

TimeSample make_sample(double t, const DensityField& f, std::span<const double> agents);

}  // namespace shepherd::meanfield
