#include <algorithm>
#include <cmath>
#include <sstream>

#include "shepherd/meanfield.hpp"

namespace shepherd::meanfield {

void PhaseGrid::validate() const {
  if (nx < 4 || nv < 4) throw Error("phase grid needs at least 4 points per dimension");
  if (!(x_half > 0.0) || !(v_max > 0.0)) throw Error("phase grid bounds must be positive");
}

void check_cfl(const PhaseGrid& grid, double dt) {
  const double ratio = dt * grid.v_max / grid.dx();
  if (!(dt > 0.0) || ratio > 0.5 * (1.0 + 1e-12)) {
    std::ostringstream msg;
    msg << "CFL violated: dt * |V| / dx = " << dt << " * " << grid.v_max << " / " << grid.dx()
        << " = " << ratio << " > 0.5";
    throw Error(msg.str());
  }
}

double DensityField::mass() const {
  double s = 0.0;
  for (double x : values) s += x;
  return s * grid.cell_volume();
}

std::vector<double> DensityField::spatial_density() const {
  const std::size_t nvc = grid.velocity_cells();
  std::vector<double> rho(grid.spatial_cells(), 0.0);
  const double dv2 = grid.dv() * grid.dv();
  for (std::size_t c = 0; c < rho.size(); ++c) {
    double s = 0.0;
    const double* p = values.data() + c * nvc;
    for (std::size_t k = 0; k < nvc; ++k) s += p[k];
    rho[c] = s * dv2;
  }
  return rho;
}

Moments spatial_moments(const PhaseGrid& grid, std::span<const double> rho) {
  const double area = grid.dx() * grid.dx();
  Moments m;
  m.mean.assign(2, 0.0);
  for (int i = 0; i < grid.nx; ++i) {
    for (int j = 0; j < grid.nx; ++j) {
      const double w = rho[static_cast<std::size_t>(i) * grid.nx + j] * area;
      m.mean[0] += w * grid.x(i);
      m.mean[1] += w * grid.x(j);
    }
  }
  double var = 0.0;
  for (int i = 0; i < grid.nx; ++i) {
    for (int j = 0; j < grid.nx; ++j) {
      const double w = rho[static_cast<std::size_t>(i) * grid.nx + j] * area;
      const double a = grid.x(i) - m.mean[0], b = grid.x(j) - m.mean[1];
      var += w * (a * a + b * b);
    }
  }
  m.variance = var;
  return m;
}

Moments DensityField::moments() const { return spatial_moments(grid, spatial_density()); }

double DensityField::min_value() const {
  return values.empty() ? 0.0 : *std::min_element(values.begin(), values.end());
}

DensityField sample_initial_density(const PhaseGrid& grid, std::span<const double> box_lo,
                                    std::span<const double> box_hi, double velocity_width) {
  grid.validate();
  if (box_lo.size() != 2 || box_hi.size() != 2) throw Error("initial support must be a 2-D box");
  for (int c = 0; c < 2; ++c) {
    if (!(box_hi[c] > box_lo[c])) throw Error("initial support must have positive extent");
    if (box_lo[c] < -grid.x_half || box_hi[c] > grid.x_half) {
      throw Error("initial support lies outside the spatial grid");
    }
  }
  if (!(velocity_width > 0.0)) throw Error("velocity profile width must be positive");

  const double dx = grid.dx();
  auto coverage = [&](int i, int c) {
    const double lo = grid.x(i) - 0.5 * dx, hi = grid.x(i) + 0.5 * dx;
    return std::max(0.0, std::min(hi, box_hi[c]) - std::max(lo, box_lo[c])) / dx;
  };
  std::vector<double> cx(grid.nx), cy(grid.nx), pv(grid.nv);
  for (int i = 0; i < grid.nx; ++i) {
    cx[i] = coverage(i, 0);
    cy[i] = coverage(i, 1);
  }
  for (int j = 0; j < grid.nv; ++j) {
    const double v = grid.v(j) / velocity_width;
    pv[j] = std::exp(-0.5 * v * v);
  }

  DensityField f(grid);
  double total = 0.0;
  for (int ix = 0; ix < grid.nx; ++ix) {
    for (int iy = 0; iy < grid.nx; ++iy) {
      const double s = cx[ix] * cy[iy];
      if (s == 0.0) continue;
      for (int a = 0; a < grid.nv; ++a) {
        for (int b = 0; b < grid.nv; ++b) {
          const double val = s * pv[a] * pv[b];
          f.values[grid.index(ix, iy, a, b)] = val;
          total += val;
        }
      }
    }
  }
  const double scale = 1.0 / (total * grid.cell_volume());
  for (double& x : f.values) x *= scale;
  return f;
}

ForceTable::ForceTable(const PhaseGrid& grid, const PotentialParams& p)
    : n_(grid.nx), area_(grid.dx() * grid.dx()) {
  active_ = p.attraction_strength != 0.0 || p.repulsion_strength != 0.0;
  const int w = 2 * n_ - 1;
  tx_.assign(static_cast<std::size_t>(w) * w, 0.0);
  ty_.assign(tx_.size(), 0.0);
  if (!active_) return;
  const double dx = grid.dx();
  const std::vector<double> origin{0.0, 0.0};
  for (int a = 0; a < w; ++a) {
    for (int b = 0; b < w; ++b) {
      const std::vector<double> z{(a - (n_ - 1)) * dx, (b - (n_ - 1)) * dx};
      auto k = eval_force(p, z, origin);
      tx_[static_cast<std::size_t>(a) * w + b] = k[0];
      ty_[static_cast<std::size_t>(a) * w + b] = k[1];
    }
  }
}

void ForceTable::convolve(std::span<const double> rho, std::span<double> out) const {
  std::fill(out.begin(), out.end(), 0.0);
  if (!active_) return;
  const int n = n_, w = 2 * n_ - 1;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      double sx = 0.0, sy = 0.0;
      for (int k = 0; k < n; ++k) {
        const double* r = rho.data() + static_cast<std::size_t>(k) * n;
        // Offset (i - k, j - l) with l running forward means the table index
        // runs backward from (j + n - 1).
        const std::size_t row = static_cast<std::size_t>(i - k + n - 1) * w + (j + n - 1);
        const double* px = tx_.data() + row;
        const double* py = ty_.data() + row;
        for (int l = 0; l < n; ++l) {
          sx += px[-l] * r[l];
          sy += py[-l] * r[l];
        }
      }
      const std::size_t c = static_cast<std::size_t>(i) * n + j;
      out[2 * c] = sx * area_;
      out[2 * c + 1] = sy * area_;
    }
  }
}

void ForceTable::convolve_dot(std::span<const double> wf, std::span<double> out) const {
  std::fill(out.begin(), out.end(), 0.0);
  if (!active_) return;
  const int n = n_, w = 2 * n_ - 1;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      double s = 0.0;
      for (int k = 0; k < n; ++k) {
        const double* r = wf.data() + 2 * static_cast<std::size_t>(k) * n;
        const std::size_t row = static_cast<std::size_t>(i - k + n - 1) * w + (j + n - 1);
        const double* px = tx_.data() + row;
        const double* py = ty_.data() + row;
        for (int l = 0; l < n; ++l) s += px[-l] * r[2 * l] + py[-l] * r[2 * l + 1];
      }
      out[static_cast<std::size_t>(i) * n + j] = s * area_;
    }
  }
}

std::vector<double> convolve_force(const DensityField& field, const PotentialParams& p) {
  ForceTable table(field.grid, p);
  std::vector<double> out(2 * field.grid.spatial_cells());
  const auto rho = field.spatial_density();
  if (!table.active()) return out;
  table.convolve(rho, out);
  return out;
}

}  // namespace shepherd::meanfield
