#pragma once

// Shared domain types for the crowd/agent control problem: Morse interaction
// potentials, the microscopic state, statistical moments and the running cost.

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace shepherd {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when an integrator produces non-finite values or a step guard fails.
class SolverError : public Error {
 public:
  using Error::Error;
};

/// Morse potential Phi(z) = R exp(-|z|/r) - A exp(-|z|/a).
struct PotentialParams {
  double attraction_strength = 0.0;  // A
  double repulsion_strength = 0.0;   // R
  double attraction_radius = 1.0;    // a
  double repulsion_radius = 1.0;     // r

  /// Strengths must be nonnegative and radii positive. Zero strengths are
  /// accepted so that an interaction can be switched off.
  void validate() const;

  static PotentialParams zero() { return {0.0, 0.0, 1.0, 1.0}; }
  /// Particle-particle interaction used in the reference experiments.
  static PotentialParams crowd() { return {20.0, 50.0, 100.0, 2.0}; }
  /// Particle-agent interaction used in the reference experiments.
  static PotentialParams agent() { return {5.0, 100.0, 1000.0, 50.0}; }
};

struct InteractionModel {
  PotentialParams crowd = PotentialParams::crowd();  // particle-particle
  PotentialParams agent = PotentialParams::agent();  // particle-agent
  double friction = 1.0;                             // alpha, 1/time

  void validate() const;
};

/// First and second radial derivatives of a Morse potential.
struct RadialDerivatives {
  double first = 0.0;
  double second = 0.0;
};

double eval_potential(const PotentialParams& p, double dist);
RadialDerivatives radial_derivatives(const PotentialParams& p, double dist);

/// Writes grad Phi(x - y) into `out`. Zero when x == y.
void eval_force(const PotentialParams& p, std::span<const double> x, std::span<const double> y,
                std::span<double> out);
std::vector<double> eval_force(const PotentialParams& p, std::span<const double> x,
                               std::span<const double> y);

/// Hessian of Phi at z (row-major dim x dim). Zero matrix at z == 0.
void eval_hessian(const PotentialParams& p, std::span<const double> z, std::span<double> out);

/// Positions and velocities of N particles plus positions of M agents, each
/// stored row-major with `dim` components per entity.
struct MicroState {
  int dim = 2;
  std::vector<double> positions;
  std::vector<double> velocities;
  std::vector<double> agents;

  MicroState() = default;
  MicroState(int dim, std::size_t particles, std::size_t agent_count);

  std::size_t particle_count() const { return positions.size() / static_cast<std::size_t>(dim); }
  std::size_t agent_count() const { return agents.size() / static_cast<std::size_t>(dim); }
  std::size_t bytes() const {
    return (positions.size() + velocities.size() + agents.size()) * sizeof(double);
  }
  bool finite() const;
  void validate() const;
};

/// Accelerations S_i(y) for every particle (N x dim, row-major).
std::vector<double> micro_drift(const MicroState& state, const InteractionModel& model);
void micro_drift(const MicroState& state, const InteractionModel& model, std::span<double> out);

struct Moments {
  std::vector<double> mean;
  double variance = 0.0;
};

Moments moments(std::span<const double> positions, int dim);

struct CostWeights {
  double sigma1 = 0.0;
  double sigma2 = 0.0;
  double sigma3 = 0.0;
  double target_variance = 0.0;
  std::vector<double> destination{0.0, 0.0};
  double horizon = 1.0;

  void validate() const;
};

/// The three parts of the (pointwise in time) running cost.
struct CostParts {
  double variance_term = 0.0;     // sigma1/4 (Var - Vbar)^2
  double destination_term = 0.0;  // sigma2/2 |E - E_des|^2
  double control_term = 0.0;      // sigma3/(2M) |u|^2
  double total() const { return variance_term + destination_term + control_term; }
};

CostParts running_cost(std::span<const double> mean, double variance,
                       std::span<const double> control_slice, int agents,
                       const CostWeights& weights);

}  // namespace shepherd
