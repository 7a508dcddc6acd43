#include "shepherd/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>

namespace shepherd::metrics {

namespace {

// Bracketing index and weight of t in a sorted grid (clamped at the ends).
struct Lerp {
  std::size_t i = 0;
  double w = 0.0;  // weight of i + 1
};

Lerp locate(std::span<const double> grid, double t) {
  if (grid.size() < 2 || t <= grid.front()) return {0, 0.0};
  if (t >= grid.back()) return {grid.size() - 2, 1.0};
  const auto it = std::upper_bound(grid.begin(), grid.end(), t);
  const std::size_t i = static_cast<std::size_t>(it - grid.begin()) - 1;
  return {i, (t - grid[i]) / (grid[i + 1] - grid[i])};
}

double sample(std::span<const double> v, const Lerp& l) {
  if (v.size() == 1) return v[0];
  return (1.0 - l.w) * v[l.i] + l.w * v[l.i + 1];
}

// Union of two time grids restricted to their common span.
std::vector<double> union_grid(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw Error("cannot compare empty time series");
  const double lo = std::max(a.front(), b.front()), hi = std::min(a.back(), b.back());
  if (hi < lo) throw Error("time series do not overlap");
  const double tol = 1e-12 * std::max(1.0, std::abs(hi));
  std::vector<double> t;
  for (double x : a)
    if (x >= lo - tol && x <= hi + tol) t.push_back(x);
  for (double x : b)
    if (x >= lo - tol && x <= hi + tol) t.push_back(x);
  std::sort(t.begin(), t.end());
  std::vector<double> out;
  for (double x : t)
    if (out.empty() || x - out.back() > tol) out.push_back(x);
  return out;
}

void check_series(std::span<const double> t, std::size_t values, const char* what) {
  if (t.size() != values) throw Error(std::string(what) + ": times and values differ in length");
  for (std::size_t i = 1; i < t.size(); ++i)
    if (!(t[i] > t[i - 1])) throw Error(std::string(what) + ": times must increase");
}

DensitySeries histogram_series(const ParticleSeries& p, const meanfield::PhaseGrid& grid) {
  DensitySeries d{grid, p.times, {}};
  d.rho.reserve(p.positions.size());
  for (const auto& x : p.positions) d.rho.push_back(histogram_density(x, grid).density);
  return d;
}

double density_norm(const DensitySeries& a, const DensitySeries& ref, double horizon) {
  if (a.grid.nx != ref.grid.nx || a.grid.x_half != ref.grid.x_half) {
    throw Error("density norms need both runs on the same spatial grid");
  }
  check_series(a.times, a.rho.size(), "density series");
  check_series(ref.times, ref.rho.size(), "reference density series");
  const auto t = union_grid(a.times, ref.times);
  std::vector<Lerp> la(t.size()), lr(t.size());
  for (std::size_t k = 0; k < t.size(); ++k) {
    la[k] = locate(a.times, t[k]);
    lr[k] = locate(ref.times, t[k]);
  }
  auto value = [](const DensitySeries& s, const Lerp& l, std::size_t c) {
    if (s.rho.size() == 1) return s.rho[0][c];
    return (1.0 - l.w) * s.rho[l.i][c] + l.w * s.rho[l.i + 1][c];
  };
  const std::size_t cells = ref.grid.spatial_cells();
  for (const auto& r : a.rho)
    if (r.size() != cells) throw Error("density snapshot has the wrong size");
  for (const auto& r : ref.rho)
    if (r.size() != cells) throw Error("reference density snapshot has the wrong size");
  std::vector<double> diff(t.size());
  double total = 0.0;
  for (std::size_t c = 0; c < cells; ++c) {
    for (std::size_t k = 0; k < t.size(); ++k) diff[k] = value(a, la[k], c) - value(ref, lr[k], c);
    total += abs_integral(t, diff);
  }
  const double L = 2.0 * ref.grid.x_half;
  const double area = ref.grid.dx() * ref.grid.dx() / (L * L);
  return total * area / horizon;
}

}  // namespace

Histogram histogram_density(std::span<const double> positions, const meanfield::PhaseGrid& grid) {
  grid.validate();
  if (positions.size() % 2 != 0) throw Error("histogram needs 2-D positions");
  const std::size_t n = positions.size() / 2;
  Histogram h;
  h.density.assign(grid.spatial_cells(), 0.0);
  if (n == 0) return h;
  const double dx = grid.dx(), L = grid.x_half;
  std::size_t outside = 0;
  for (std::size_t p = 0; p < n; ++p) {
    const double x = positions[2 * p], y = positions[2 * p + 1];
    if (!(x >= -L && x <= L && y >= -L && y <= L)) {
      ++outside;
      continue;
    }
    // the closed upper edge belongs to the last cell
    const int i = std::min(grid.nx - 1, static_cast<int>((x + L) / dx));
    const int j = std::min(grid.nx - 1, static_cast<int>((y + L) / dx));
    h.density[static_cast<std::size_t>(i) * grid.nx + j] += 1.0;
  }
  const double scale = 1.0 / (static_cast<double>(n) * dx * dx);
  for (double& v : h.density) v *= scale;
  h.overflow_fraction = static_cast<double>(outside) / static_cast<double>(n);
  return h;
}

double abs_integral(std::span<const double> t, std::span<const double> d) {
  double s = 0.0;
  for (std::size_t i = 0; i + 1 < t.size(); ++i) {
    const double h = t[i + 1] - t[i], a = d[i], b = d[i + 1];
    if ((a >= 0.0) == (b >= 0.0) || a == 0.0 || b == 0.0) {
      s += 0.5 * h * (std::abs(a) + std::abs(b));
    } else {
      // two triangles on either side of the root
      s += 0.5 * h * (a * a + b * b) / (std::abs(a) + std::abs(b));
    }
  }
  return s;
}

ComparisonReport compare_runs(const RunSeries& run, const RunSeries& reference,
                              double velocity_scale, bool compare_density) {
  if (!(velocity_scale > 0.0)) throw Error("velocity scale must be positive");
  check_series(run.times, run.cost.size(), "cost series");
  check_series(reference.times, reference.cost.size(), "reference cost series");
  ComparisonReport r;
  r.label = run.label;
  r.reference = reference.label;

  const double horizon = reference.times.back() - reference.times.front();
  if (!(horizon > 0.0)) throw Error("reference run has no time extent");

  const auto t = union_grid(run.times, reference.times);
  std::vector<double> diff(t.size());
  for (std::size_t k = 0; k < t.size(); ++k) {
    diff[k] = sample(run.cost, locate(run.times, t[k])) -
              sample(reference.cost, locate(reference.times, t[k]));
  }
  r.norm_J = abs_integral(t, diff) / horizon;

  const double agents = reference.control.agents();
  r.norm_u = l1_distance(run.control, reference.control) /
             (reference.control.horizon() * agents * velocity_scale);

  if (compare_density && reference.density) {
    if (run.density) {
      r.norm_rho = density_norm(*run.density, *reference.density, horizon);
    } else if (run.particles) {
      r.norm_rho = density_norm(histogram_series(*run.particles, reference.density->grid),
                                *reference.density, horizon);
    }
  }
  return r;
}

std::string StudyCell::label() const {
  return kind == Kind::MeanField ? "M" + std::to_string(size) : std::to_string(size);
}

StudyTable convergence_study(std::span<const int> grids, std::span<const int> particle_counts,
                             const StudyCell& reference, const RunFunction& run,
                             double velocity_scale) {
  if (reference.kind != StudyCell::Kind::MeanField) {
    throw Error("the study reference must be a mean-field run");
  }
  StudyTable table;
  table.reference = reference;
  for (int g : grids) table.cells.push_back({StudyCell::Kind::MeanField, g});
  for (int n : particle_counts) table.cells.push_back({StudyCell::Kind::Micro, n});

  const RunSeries ref = run(reference);
  for (const StudyCell& cell : table.cells) {
    try {
      const RunSeries series = cell == reference ? ref : run(cell);
      table.reports.push_back(compare_runs(series, ref, velocity_scale,
                                           cell.kind == StudyCell::Kind::Micro));
      table.errors.emplace_back();
    } catch (const std::exception& e) {
      table.reports.emplace_back();
      table.errors.emplace_back(e.what());
    }
  }
  return table;
}

void write_study_csv(const StudyTable& table, std::ostream& out) {
  out << "norm";
  for (const auto& c : table.cells) out << ',' << c.label();
  out << '\n';
  const auto flags = out.flags();
  const auto precision = out.precision();
  out << std::scientific << std::setprecision(6);
  auto row = [&](const char* name, auto get) {
    out << name;
    for (const auto& r : table.reports) {
      out << ',';
      if (!r) {
        out << '-';
        continue;
      }
      const std::optional<double> v = get(*r);
      if (v) out << *v;
      else out << '-';
    }
    out << '\n';
  };
  row("J", [](const ComparisonReport& r) { return std::optional<double>(r.norm_J); });
  row("u", [](const ComparisonReport& r) { return std::optional<double>(r.norm_u); });
  row("rho", [](const ComparisonReport& r) { return r.norm_rho; });
  out.flags(flags);
  out.precision(precision);
}

}  // namespace shepherd::metrics
