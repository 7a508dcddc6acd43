#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace shepherd {

/// Piecewise-constant agent velocities on a time grid t_0 < ... < t_K.
/// Values are stored slice-major: slice k holds M agents x D components.
class ControlSchedule {
 public:
  ControlSchedule() = default;
  ControlSchedule(std::vector<double> knots, int agents, int dim, double speed_cap);

  static ControlSchedule uniform(double t0, double horizon, int slices, int agents, int dim,
                                 double speed_cap);

  int slices() const { return static_cast<int>(knots_.size()) - 1; }
  int agents() const { return agents_; }
  int dim() const { return dim_; }
  double speed_cap() const { return speed_cap_; }
  double start() const { return knots_.front(); }
  double end() const { return knots_.back(); }
  double horizon() const { return knots_.back() - knots_.front(); }
  std::span<const double> knots() const { return knots_; }
  double slice_length(int k) const { return knots_[k + 1] - knots_[k]; }

  std::span<double> slice(int k);
  std::span<const double> slice(int k) const;
  std::span<double> agent(int k, int m);
  std::span<const double> agent(int k, int m) const;

  std::vector<double>& values() { return values_; }
  const std::vector<double>& values() const { return values_; }

  /// Index of the slice containing t (right-continuous; t == end maps to the last slice).
  int slice_at(double t) const;
  /// Per-agent speed never exceeds the cap (with a relative slack).
  bool feasible(double slack = 1e-12) const;
  /// Same knots, agents, dimension and cap.
  bool same_layout(const ControlSchedule& other) const;
  /// A copy with all values zero.
  ControlSchedule zeros_like() const;

 private:
  std::vector<double> knots_;
  std::vector<double> values_;
  int agents_ = 0;
  int dim_ = 0;
  double speed_cap_ = 0.0;
};

/// Discrete L2((0,T), R^{MD}) inner product.
double inner(const ControlSchedule& a, const ControlSchedule& b);
double l2_norm(const ControlSchedule& a);
/// y += alpha * x
void axpy(double alpha, const ControlSchedule& x, ControlSchedule& y);
/// Exact integral over [start, end] of |a(t) - b(t)|_{R^{MD}} for schedules with
/// possibly different knots on the same interval.
double l1_distance(const ControlSchedule& a, const ControlSchedule& b);

}  // namespace shepherd
