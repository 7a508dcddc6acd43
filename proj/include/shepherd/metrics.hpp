#pragma once

// Comparison of runs across levels and resolutions: particle histograms on a
// mean-field grid, the three scaled norms, and the convergence-study table.

#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "shepherd/control.hpp"
#include "shepherd/meanfield.hpp"

namespace shepherd::metrics {

struct Histogram {
  std::vector<double> density;  // nx x nx, count / (N dx^2)
  double overflow_fraction = 0.0;
};

/// Particles outside [-x_half, x_half]^2 go to the overflow bucket, so the
/// discrete integral of `density` is 1 - overflow_fraction.
Histogram histogram_density(std::span<const double> positions, const meanfield::PhaseGrid& grid);

/// Spatial densities sampled at given times on one grid.
struct DensitySeries {
  meanfield::PhaseGrid grid;
  std::vector<double> times;
  std::vector<std::vector<double>> rho;
};

/// Particle positions (N x 2) sampled at given times.
struct ParticleSeries {
  std::vector<double> times;
  std::vector<std::vector<double>> positions;
};

/// What a run contributes to a comparison. `cost` is the pointwise running
/// cost J(t) at `times`.
struct RunSeries {
  std::string label;
  std::vector<double> times;
  std::vector<double> cost;
  ControlSchedule control;
  std::optional<DensitySeries> density;
  std::optional<ParticleSeries> particles;
};

struct ComparisonReport {
  std::string label;
  std::string reference;
  double norm_J = 0.0;
  double norm_u = 0.0;
  std::optional<double> norm_rho;  // absent when the run carries no density
};

/// Integral of |d(t)| for d piecewise linear through (t_i, d_i), with sign
/// changes inside an interval integrated exactly.
double abs_integral(std::span<const double> t, std::span<const double> d);

/// Scaled norms of `run` against `reference`:
///   norm_u   = 1/(T M V) int |u - u_ref| dt
///   norm_J   = 1/T int |J - J_ref| dt
///   norm_rho = 1/T int int |rho - rho_ref| dx dy / L^2 dt,  L = 2 x_half
/// Time series on different grids are compared on the union grid by linear
/// interpolation. Particle runs are histogrammed onto the reference grid.
/// Throws when both runs carry densities on different grids.
ComparisonReport compare_runs(const RunSeries& run, const RunSeries& reference,
                              double velocity_scale = 5.0, bool compare_density = true);

struct StudyCell {
  enum class Kind { MeanField, Micro };
  Kind kind = Kind::MeanField;
  int size = 0;  // grid points per dimension or particle count

  std::string label() const;  // "M50" or "1000"
  bool operator==(const StudyCell&) const = default;
};

struct StudyTable {
  StudyCell reference;
  std::vector<StudyCell> cells;
  std::vector<std::optional<ComparisonReport>> reports;  // empty where the run failed
  std::vector<std::string> errors;                       // one per cell, empty when fine
};

using RunFunction = std::function<RunSeries(const StudyCell&)>;

/// Runs the reference and every mean-field grid and particle count through
/// `run`, and compares each against the reference. Density norms are only
/// formed for particle runs (histogrammed on the reference grid). A failing
/// run marks its column; a failing reference fails the whole study.
StudyTable convergence_study(std::span<const int> grids, std::span<const int> particle_counts,
                             const StudyCell& reference, const RunFunction& run,
                             double velocity_scale = 5.0);

/// Rows are the norms, columns the cells; missing entries are "-".
void write_study_csv(const StudyTable& table, std::ostream& out);

}  // namespace shepherd::metrics
