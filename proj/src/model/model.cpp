#include "shepherd/model.hpp"

#include <cmath>
#include <sstream>

namespace shepherd {

void PotentialParams::validate() const {
  if (!(attraction_strength >= 0.0) || !(repulsion_strength >= 0.0)) {
    throw Error("potential strengths must be nonnegative");
  }
  if (!(attraction_radius > 0.0) || !(repulsion_radius > 0.0)) {
    throw Error("potential radii must be positive");
  }
}

void InteractionModel::validate() const {
  crowd.validate();
  agent.validate();
  if (!(friction >= 0.0)) throw Error("friction must be nonnegative");
}

double eval_potential(const PotentialParams& p, double dist) {
  if (!(dist >= 0.0)) throw Error("potential distance must be nonnegative");
  return p.repulsion_strength * std::exp(-dist / p.repulsion_radius) -
         p.attraction_strength * std::exp(-dist / p.attraction_radius);
}

RadialDerivatives radial_derivatives(const PotentialParams& p, double dist) {
  const double er = p.repulsion_strength * std::exp(-dist / p.repulsion_radius);
  const double ea = p.attraction_strength * std::exp(-dist / p.attraction_radius);
  RadialDerivatives out;
  out.first = -er / p.repulsion_radius + ea / p.attraction_radius;
  out.second = er / (p.repulsion_radius * p.repulsion_radius) -
               ea / (p.attraction_radius * p.attraction_radius);
  return out;
}

void eval_force(const PotentialParams& p, std::span<const double> x, std::span<const double> y,
                std::span<double> out) {
  const std::size_t dim = x.size();
  double s2 = 0.0;
  for (std::size_t c = 0; c < dim; ++c) {
    const double z = x[c] - y[c];
    s2 += z * z;
  }
  if (s2 == 0.0) {
    for (std::size_t c = 0; c < dim; ++c) out[c] = 0.0;
    return;
  }
  const double s = std::sqrt(s2);
  const double scale = radial_derivatives(p, s).first / s;
  for (std::size_t c = 0; c < dim; ++c) out[c] = scale * (x[c] - y[c]);
}

std::vector<double> eval_force(const PotentialParams& p, std::span<const double> x,
                               std::span<const double> y) {
  std::vector<double> out(x.size());
  eval_force(p, x, y, out);
  return out;
}

void eval_hessian(const PotentialParams& p, std::span<const double> z, std::span<double> out) {
  const std::size_t dim = z.size();
  double s2 = 0.0;
  for (double zc : z) s2 += zc * zc;
  if (s2 == 0.0) {
    for (auto& o : out) o = 0.0;
    return;
  }
  const double s = std::sqrt(s2);
  const RadialDerivatives rd = radial_derivatives(p, s);
  // H = phi'' zhat zhat^T + (phi'/s)(I - zhat zhat^T)
  const double tangential = rd.first / s;
  const double radial = (rd.second - tangential) / s2;
  for (std::size_t i = 0; i < dim; ++i) {
    for (std::size_t j = 0; j < dim; ++j) {
      out[i * dim + j] = radial * z[i] * z[j] + (i == j ? tangential : 0.0);
    }
  }
}

MicroState::MicroState(int dim_, std::size_t particles, std::size_t agent_count)
    : dim(dim_),
      positions(particles * static_cast<std::size_t>(dim_), 0.0),
      velocities(particles * static_cast<std::size_t>(dim_), 0.0),
      agents(agent_count * static_cast<std::size_t>(dim_), 0.0) {}

bool MicroState::finite() const {
  for (const auto* v : {&positions, &velocities, &agents}) {
    for (double x : *v) {
      if (!std::isfinite(x)) return false;
    }
  }
  return true;
}

void MicroState::validate() const {
  if (dim < 1) throw Error("state dimension must be at least 1");
  if (positions.empty() || positions.size() % dim != 0) {
    throw Error("particle positions must hold N >= 1 rows of dimension D");
  }
  if (velocities.size() != positions.size()) {
    throw Error("particle velocities must match particle positions");
  }
  if (agents.empty() || agents.size() % dim != 0) {
    throw Error("agent positions must hold M >= 1 rows of dimension D");
  }
  if (!finite()) throw Error("state contains non-finite entries");
}

void micro_drift(const MicroState& state, const InteractionModel& model, std::span<double> out) {
  const std::size_t dim = static_cast<std::size_t>(state.dim);
  const std::size_t n = state.particle_count();
  const std::size_t m = state.agent_count();
  const double inv_n = 1.0 / static_cast<double>(n);
  const double inv_m = 1.0 / static_cast<double>(m);
  const double* x = state.positions.data();

  for (std::size_t i = 0; i < n * dim; ++i) out[i] = -model.friction * state.velocities[i];

  // Pairwise crowd forces. The symmetric loop applies K(x_i,x_j) = -K(x_j,x_i)
  // to both partners so the total crowd force cancels to round-off.
  const PotentialParams& p1 = model.crowd;
  const bool crowd_active = p1.attraction_strength != 0.0 || p1.repulsion_strength != 0.0;
  if (crowd_active) {
    std::vector<double> z(dim);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        double s2 = 0.0;
        for (std::size_t c = 0; c < dim; ++c) {
          z[c] = x[i * dim + c] - x[j * dim + c];
          s2 += z[c] * z[c];
        }
        if (s2 == 0.0) continue;
        const double s = std::sqrt(s2);
        const double scale = radial_derivatives(p1, s).first / s * inv_n;
        for (std::size_t c = 0; c < dim; ++c) {
          out[i * dim + c] -= scale * z[c];
          out[j * dim + c] += scale * z[c];
        }
      }
    }
  }

  const PotentialParams& p2 = model.agent;
  if (p2.attraction_strength != 0.0 || p2.repulsion_strength != 0.0) {
    std::vector<double> k(dim);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t a = 0; a < m; ++a) {
        eval_force(p2, std::span(x + i * dim, dim),
                   std::span(state.agents.data() + a * dim, dim), k);
        for (std::size_t c = 0; c < dim; ++c) out[i * dim + c] -= inv_m * k[c];
      }
    }
  }
}

std::vector<double> micro_drift(const MicroState& state, const InteractionModel& model) {
  std::vector<double> out(state.positions.size());
  micro_drift(state, model, out);
  return out;
}

Moments moments(std::span<const double> positions, int dim) {
  const std::size_t d = static_cast<std::size_t>(dim);
  const std::size_t n = positions.size() / d;
  if (n == 0) throw Error("moments need at least one particle");
  Moments m;
  m.mean.assign(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < d; ++c) m.mean[c] += positions[i * d + c];
  }
  for (auto& c : m.mean) c /= static_cast<double>(n);
  double var = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < d; ++c) {
      const double dx = positions[i * d + c] - m.mean[c];
      var += dx * dx;
    }
  }
  m.variance = var / static_cast<double>(n);
  return m;
}

void CostWeights::validate() const {
  if (!(sigma1 >= 0.0) || !(sigma2 >= 0.0) || !(sigma3 >= 0.0)) {
    throw Error("cost weights must be nonnegative");
  }
  if (!(horizon > 0.0)) throw Error("horizon T must be positive");
  if (destination.empty()) throw Error("destination must have at least one component");
}

CostParts running_cost(std::span<const double> mean, double variance,
                       std::span<const double> control_slice, int agents,
                       const CostWeights& weights) {
  CostParts parts;
  const double dv = variance - weights.target_variance;
  parts.variance_term = 0.25 * weights.sigma1 * dv * dv;
  double e2 = 0.0;
  for (std::size_t c = 0; c < mean.size(); ++c) {
    const double de = mean[c] - weights.destination[c];
    e2 += de * de;
  }
  parts.destination_term = 0.5 * weights.sigma2 * e2;
  double u2 = 0.0;
  for (double u : control_slice) u2 += u * u;
  parts.control_term = weights.sigma3 / (2.0 * agents) * u2;
  return parts;
}

}  // namespace shepherd
