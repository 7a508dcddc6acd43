#pragma once

// Microscopic level: RK4 forward integration of the particle/agent ODE, the
// backward (rescaled) adjoint system and the reduced gradient.

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "shepherd/checkpoint.hpp"
#include "shepherd/control.hpp"
#include "shepherd/model.hpp"
#include "shepherd/optimize.hpp"

namespace shepherd::micro {

/// Forward trajectory on a uniform time grid with per-snapshot moments.
struct ForwardRecord {
  std::vector<double> times;
  Trajectory<MicroState> states;
  std::vector<Moments> crowd_moments;  // one per snapshot
  std::vector<std::vector<double>> agent_positions;  // one per snapshot
  std::size_t steps_per_slice = 1;
  double dt = 0.0;

  std::size_t steps() const { return times.size() - 1; }
};

/// Adjoint trajectory. With rescaling on, r = N xi_1, s = N xi_2, phi = N xi_3.
/// The particle parts r and s hold every grid time only when requested,
/// otherwise just the value at the initial time.
struct AdjointRecord {
  std::vector<std::vector<double>> r;    // N x D
  std::vector<std::vector<double>> s;    // N x D
  std::vector<std::vector<double>> phi;  // per grid time, M x D
  /// Integral of phi over each control slice (M x D per slice).
  std::vector<std::vector<double>> phi_slice_integral;
  bool rescaled = true;
};

enum class AdjointScaling { Rescaled, Unscaled };

/// One classic RK4 step of dy/dt = F(y, u) with u frozen.
MicroState rk4_step(const MicroState& y, std::span<const double> control, const InteractionModel& model,
                    double dt);

/// Integrate over the control horizon with `steps` uniform RK4 steps. Steps
/// must be an integer multiple of the slice count. `stride` > 1 enables
/// checkpointed storage; `store` moves the checkpoints out of memory.
ForwardRecord integrate_forward(const MicroState& initial, const ControlSchedule& control,
                                const InteractionModel& model, std::size_t steps,
                                std::size_t stride = 1,
                                std::shared_ptr<CheckpointStore<MicroState>> store = nullptr);

/// Backward RK4 sweep of the adjoint system from zero terminal data.
AdjointRecord integrate_adjoint(ForwardRecord& record, const ControlSchedule& control,
                                const InteractionModel& model, const CostWeights& weights,
                                AdjointScaling scaling = AdjointScaling::Rescaled,
                                bool keep_history = false);

/// Trapezoid-in-time cost of a forward record (1/T prefactor applied once).
optimize::CostBreakdown assemble_cost(const ForwardRecord& record, const ControlSchedule& control,
                                      const CostWeights& weights);

/// sigma3/(MT) u - phi/N averaged over each slice.
ControlSchedule gradient_from_adjoint(const AdjointRecord& adjoint, const ControlSchedule& control,
                                      const CostWeights& weights, std::size_t particles);

struct GradientResult {
  ControlSchedule gradient;
  optimize::CostBreakdown cost;
};

GradientResult reduced_gradient(const ControlSchedule& control, const MicroState& initial,
                                const InteractionModel& model, const CostWeights& weights,
                                std::size_t steps_per_slice);

/// Random: i.i.d. uniform positions. Stratified: Latin hypercube, one
/// particle in each of the N slabs of every coordinate, which pins the
/// marginal moments far closer to the box values than i.i.d. draws.
enum class Sampling { Random, Stratified };

/// Positions uniform on an axis-aligned box (lo/hi per dimension),
/// velocities Gaussian with the given standard deviation (zero by default).
MicroState sample_particles(std::size_t count, std::span<const double> box_lo,
                            std::span<const double> box_hi, double velocity_std,
                            std::span<const double> agents, std::uint64_t seed,
                            Sampling sampling = Sampling::Random);

/// Reduced problem u -> J_N(G_N(u), u) over a fixed control layout.
class Problem : public optimize::ReducedProblem {
 public:
  Problem(MicroState initial, InteractionModel model, CostWeights weights,
          std::size_t steps_per_slice, std::size_t memory_budget_bytes = 0);

  optimize::CostBreakdown evaluate(const ControlSchedule& control) override;
  ControlSchedule gradient(const ControlSchedule& control, optimize::CostBreakdown* cost) override;
  std::size_t peak_memory_bytes() const override { return peak_bytes_; }

  /// Forward record of the most recent evaluation.
  const ForwardRecord* last_record() const { return last_.get(); }

  /// Gradient sweeps keep their checkpoints in stores made by `factory`.
  void set_checkpoint_store(CheckpointStoreFactory<MicroState> factory) { store_ = std::move(factory); }

 private:
  std::size_t stride_for(const ControlSchedule& control) const;

  MicroState initial_;
  InteractionModel model_;
  CostWeights weights_;
  std::size_t steps_per_slice_;
  std::size_t budget_;
  std::size_t peak_bytes_ = 0;
  std::unique_ptr<ForwardRecord> last_;
  CheckpointStoreFactory<MicroState> store_;
};

struct TimeSample {
  double t = 0.0;
  Moments crowd;
  std::vector<double> agents;
};

/// Sliced system for instantaneous control: each slice is a reduced problem
/// starting from the committed state.
class SlicedSystem : public optimize::SlicedSystem {
 public:
  SlicedSystem(MicroState initial, InteractionModel model, CostWeights weights,
               std::size_t steps_per_slice);

  std::unique_ptr<optimize::ReducedProblem> slice_problem(double t0, double length) override;
  void commit(const ControlSchedule& slice_control) override;

  const MicroState& state() const { return state_; }
  const std::vector<TimeSample>& samples() const { return samples_; }
  /// Full states at slice boundaries (index 0 is the initial state).
  const std::vector<MicroState>& slice_states() const { return slice_states_; }

 private:
  MicroState state_;
  InteractionModel model_;
  CostWeights weights_;
  std::size_t steps_per_slice_;
  double time_ = 0.0;
  std::vector<TimeSample> samples_;
  std::vector<MicroState> slice_states_;
};

}  // namespace shepherd::micro
