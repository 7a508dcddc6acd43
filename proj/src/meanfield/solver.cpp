#include <algorithm>
#include <cmath>
#include <vector>

#include "shepherd/meanfield.hpp"

namespace shepherd::meanfield {

namespace {

// Lax-Wendroff flux with an optional van Leer limiter, written through the
// harmonic mean of the two neighbouring differences: phi(theta) delta equals
// 2 r delta / (r + delta) when r delta > 0 and zero otherwise.
inline double limited(double r, double delta, bool limit) {
  if (!limit) return delta;
  const double p = r * delta;
  return p > 0.0 ? 2.0 * p / (r + delta) : 0.0;
}

// One explicit step on `n` rows of length `width`. Face k sits between rows
// k - 1 and k; c[k] is the face speed. Ghost rows are zero and boundary faces
// are first-order upwind.
void lw_rows(double* f, int n, int width, const double* c, double lambda, bool limit,
             std::vector<double>& flux) {
  flux.assign(static_cast<std::size_t>(n + 1) * width, 0.0);
  auto row = [&](int r) { return f + static_cast<std::size_t>(r) * width; };
  {
    double* F = flux.data();
    if (c[0] < 0.0) {
      const double* f0 = row(0);
      for (int e = 0; e < width; ++e) F[e] = c[0] * f0[e];
    }
    F = flux.data() + static_cast<std::size_t>(n) * width;
    if (c[n] > 0.0) {
      const double* fl = row(n - 1);
      for (int e = 0; e < width; ++e) F[e] = c[n] * fl[e];
    }
  }
  for (int k = 1; k < n; ++k) {
    double* F = flux.data() + static_cast<std::size_t>(k) * width;
    const double ck = c[k];
    const double nu = ck * lambda;
    const double* fl = row(k - 1);
    const double* fr = row(k);
    if (ck >= 0.0) {
      const double* fll = k >= 2 ? row(k - 2) : nullptr;
      const double half = 0.5 * (1.0 - nu);
      for (int e = 0; e < width; ++e) {
        const double delta = fr[e] - fl[e];
        const double r = fl[e] - (fll ? fll[e] : 0.0);
        F[e] = ck * (fl[e] + half * limited(r, delta, limit));
      }
    } else {
      const double* frr = k + 1 < n ? row(k + 1) : nullptr;
      const double half = 0.5 * (1.0 + nu);
      for (int e = 0; e < width; ++e) {
        const double delta = fr[e] - fl[e];
        const double r = (frr ? frr[e] : 0.0) - fr[e];
        F[e] = ck * (fr[e] - half * limited(r, delta, limit));
      }
    }
  }
  for (int j = 0; j < n; ++j) {
    double* fj = row(j);
    const double* Fl = flux.data() + static_cast<std::size_t>(j) * width;
    const double* Fr = Fl + width;
    for (int e = 0; e < width; ++e) fj[e] -= lambda * (Fr[e] - Fl[e]);
  }
}

// Reverse mode of one lw_rows step at input f. On entry `lam` is the
// derivative with respect to the output, on exit with respect to the input.
// Returns the derivative with respect to a uniform shift of every face speed
// (the acceleration component of this sweep).
double lw_rows_vjp(const double* f, int n, int width, const double* c, double lambda, bool limit,
                   double* lam, std::vector<double>& fbar, std::vector<double>& next) {
  const std::size_t w = static_cast<std::size_t>(width);
  fbar.assign((n + 1) * w, 0.0);
  auto row = [&](int r) { return f + r * w; };
  auto lrow = [&](int r) { return lam + r * w; };
  // out_j = f_j - lambda (F_{j+1} - F_j)  =>  Fbar_k = -lambda (lam_{k-1} - lam_k)
  for (int k = 0; k <= n; ++k) {
    double* fb = fbar.data() + k * w;
    const double* ll = k > 0 ? lrow(k - 1) : nullptr;
    const double* lr = k < n ? lrow(k) : nullptr;
    for (std::size_t e = 0; e < w; ++e) fb[e] = -lambda * ((ll ? ll[e] : 0.0) - (lr ? lr[e] : 0.0));
  }
  next.assign(lam, lam + n * w);
  auto nrow = [&](int r) { return next.data() + r * w; };
  double dc = 0.0;
  if (c[0] < 0.0) {
    const double* fb = fbar.data();
    const double* f0 = row(0);
    double* n0 = nrow(0);
    for (std::size_t e = 0; e < w; ++e) {
      n0[e] += fb[e] * c[0];
      dc += fb[e] * f0[e];
    }
  }
  if (c[n] > 0.0) {
    const double* fb = fbar.data() + n * w;
    const double* fl = row(n - 1);
    double* nl = nrow(n - 1);
    for (std::size_t e = 0; e < w; ++e) {
      nl[e] += fb[e] * c[n];
      dc += fb[e] * fl[e];
    }
  }
  for (int k = 1; k < n; ++k) {
    const double* fb = fbar.data() + k * w;
    const double ck = c[k];
    const double nu = ck * lambda;
    const double* fl = row(k - 1);
    const double* fr = row(k);
    if (ck >= 0.0) {
      const double* fll = k >= 2 ? row(k - 2) : nullptr;
      double* nll = k >= 2 ? nrow(k - 2) : nullptr;
      double* nl = nrow(k - 1);
      double* nr = nrow(k);
      const double half = 0.5 * ck * (1.0 - nu);
      const double dhalf = 0.5 * (1.0 - 2.0 * nu);
      for (std::size_t e = 0; e < w; ++e) {
        const double delta = fr[e] - fl[e];
        const double r = fl[e] - (fll ? fll[e] : 0.0);
        double p = delta, pr = 0.0, pd = 1.0;
        if (limit) {
          const double q = r * delta;
          if (q > 0.0) {
            const double s = r + delta;
            p = 2.0 * q / s;
            pr = 2.0 * delta * delta / (s * s);
            pd = 2.0 * r * r / (s * s);
          } else {
            p = pr = pd = 0.0;
          }
        }
        const double b = fb[e];
        dc += b * (fl[e] + dhalf * p);
        nl[e] += b * (ck + half * (pr - pd));
        nr[e] += b * half * pd;
        if (nll) nll[e] -= b * half * pr;
      }
    } else {
      const double* frr = k + 1 < n ? row(k + 1) : nullptr;
      double* nrr = k + 1 < n ? nrow(k + 1) : nullptr;
      double* nl = nrow(k - 1);
      double* nr = nrow(k);
      const double half = 0.5 * ck * (1.0 + nu);
      const double dhalf = 0.5 * (1.0 + 2.0 * nu);
      for (std::size_t e = 0; e < w; ++e) {
        const double delta = fr[e] - fl[e];
        const double r = (frr ? frr[e] : 0.0) - fr[e];
        double p = delta, pr = 0.0, pd = 1.0;
        if (limit) {
          const double q = r * delta;
          if (q > 0.0) {
            const double s = r + delta;
            p = 2.0 * q / s;
            pr = 2.0 * delta * delta / (s * s);
            pd = 2.0 * r * r / (s * s);
          } else {
            p = pr = pd = 0.0;
          }
        }
        // F = c f_r - half P(r, delta), r = f_rr - f_r, delta = f_r - f_l
        const double b = fb[e];
        dc += b * (fr[e] - dhalf * p);
        nr[e] += b * (ck - half * (pd - pr));
        nl[e] += b * half * pd;
        if (nrr) nrr[e] -= b * half * pr;
      }
    }
  }
  std::copy(next.begin(), next.end(), lam);
  return dc;
}

void transpose_block(const double* in, double* out, int n) {
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) out[j * n + i] = in[i * n + j];
}

// Face flux of the conservative semi-Lagrangian scheme: the mass that crosses
// the face in one step is the integral of a cubic reconstruction of the
// primitive over the backtracked interval. `u` is the upwind value, `d` the
// value across the face and `o` the value behind the upwind cell; a = |s|.
inline double cubic_flux(double o, double u, double d, double a, bool limit) {
  const double a1 = (1.0 - a) * (2.0 - a) / 6.0;
  const double a2 = (1.0 - a) * (1.0 + a) / 6.0;
  double ep = 1.0, em = 1.0;
  if (limit) {
    if (d > u) ep = std::min(1.0, 2.0 * u / (d - u));
    if (o > u) em = std::min(1.0, 2.0 * u / (o - u));
  }
  return a * (u + ep * a1 * (d - u) + em * a2 * (u - o));
}

// Ring of the two most recently overwritten rows, so sweeps can run in place.
class RowHistory {
 public:
  RowHistory(const double* data, int n, std::size_t width)
      : data_(data), n_(n), width_(width), saved_(2 * width), zeros_(width, 0.0) {}
  // Row r as it was before the sweep, given that rows < current are overwritten.
  const double* get(int r, int current) const {
    if (r < 0 || r >= n_) return zeros_.data();
    if (r < current) return saved_.data() + static_cast<std::size_t>(r & 1) * width_;
    return data_ + static_cast<std::size_t>(r) * width_;
  }
  void save(int r) {
    std::copy_n(data_ + static_cast<std::size_t>(r) * width_, width_,
                saved_.data() + static_cast<std::size_t>(r & 1) * width_);
  }

 private:
  const double* data_;
  int n_;
  std::size_t width_;
  std::vector<double> saved_;
  std::vector<double> zeros_;
};

// Shift rows by s (in cells, per element, |s| <= 1). Face k lies between rows
// k - 1 and k; an upwind ghost row means zero inflow.
void shift_rows(double* data, int n, std::size_t width, const double* s, bool limit) {
  RowHistory hist(data, n, width);
  std::vector<double> f_left(width, 0.0), f_right(width);
  auto face = [&](int k, int current, std::vector<double>& out) {
    const double* rm2 = hist.get(k - 2, current);
    const double* rm1 = hist.get(k - 1, current);
    const double* r0 = hist.get(k, current);
    const double* rp1 = hist.get(k + 1, current);
    for (std::size_t e = 0; e < width; ++e) {
      const double se = s[e];
      if (se >= 0.0) {
        out[e] = k >= 1 ? cubic_flux(rm2[e], rm1[e], r0[e], se, limit) : 0.0;
      } else {
        out[e] = k < n ? -cubic_flux(rp1[e], r0[e], rm1[e], -se, limit) : 0.0;
      }
    }
  };
  face(0, 0, f_left);
  for (int j = 0; j < n; ++j) {
    face(j + 1, j, f_right);
    hist.save(j);
    double* row = data + static_cast<std::size_t>(j) * width;
    for (std::size_t e = 0; e < width; ++e) row[e] -= f_right[e] - f_left[e];
    std::swap(f_left, f_right);
  }
}

// Exact transpose of the unlimited shift_rows.
void shift_rows_transpose(double* data, int n, std::size_t width, const double* s) {
  RowHistory hist(data, n, width);
  std::vector<double> out(width);
  for (int m = 0; m < n; ++m) {
    const double* g[5];
    for (int q = 0; q < 5; ++q) g[q] = hist.get(m - 2 + q, m);  // g[2] is row m
    // w_k = g_{k-1} - g_k for faces k = m - 1 .. m + 2
    for (std::size_t e = 0; e < width; ++e) {
      const double w_m1 = g[0][e] - g[1][e];
      const double w_0 = g[1][e] - g[2][e];
      const double w_p1 = g[2][e] - g[3][e];
      const double w_p2 = g[3][e] - g[4][e];
      const double se = s[e];
      double acc = 0.0;
      if (se >= 0.0) {
        const double a = se;
        const double a1 = (1.0 - a) * (2.0 - a) / 6.0, a2 = (1.0 - a) * (1.0 + a) / 6.0;
        if (m >= 1) acc += w_0 * a * a1;                 // face m, upwind row m - 1
        acc += w_p1 * a * (1.0 - a1 + a2);               // face m + 1, upwind row m
        if (m + 2 <= n) acc += w_p2 * (-a * a2);         // face m + 2, upwind row m + 1
      } else {
        const double a = -se;
        const double a1 = (1.0 - a) * (2.0 - a) / 6.0, a2 = (1.0 - a) * (1.0 + a) / 6.0;
        if (m + 1 <= n - 1) acc -= w_p1 * (a * a1);      // face m + 1, upwind row m + 1
        acc -= w_0 * (a * (1.0 - a1 + a2));              // face m, upwind row m
        if (m >= 1) acc += w_m1 * (a * a2);              // face m - 1, upwind row m - 1
      }
      out[e] = g[2][e] - acc;
    }
    hist.save(m);
    std::copy(out.begin(), out.end(), data + static_cast<std::size_t>(m) * width);
  }
}

// Partial derivatives of cubic_flux / a with respect to (o, u, d).
inline void cubic_flux_partials(double o, double u, double d, double a, bool limit, double& po,
                                double& pu, double& pd) {
  const double a1 = (1.0 - a) * (2.0 - a) / 6.0;
  const double a2 = (1.0 - a) * (1.0 + a) / 6.0;
  po = 0.0;
  pu = 1.0;
  pd = 0.0;
  if (limit && d > u && 2.0 * u < d - u) {
    pu += 2.0 * a1;
  } else {
    pu -= a1;
    pd += a1;
  }
  if (limit && o > u && 2.0 * u < o - u) {
    pu -= 2.0 * a2;
  } else {
    pu += a2;
    po -= a2;
  }
}

// Reverse mode of shift_rows at input f (rows n x width, unchanged). `lam`
// holds the derivative with respect to the output and is overwritten with the
// derivative with respect to the input.
void shift_rows_vjp(const double* f, double* lam, int n, std::size_t width, const double* s,
                    bool limit) {
  RowHistory hist(lam, n, width);
  std::vector<double> out(width);
  const std::vector<double> zeros(width, 0.0);
  auto frow = [&](int r) { return r < 0 || r >= n ? zeros.data() : f + r * width; };
  for (int m = 0; m < n; ++m) {
    const double* l[5];
    for (int q = 0; q < 5; ++q) l[q] = hist.get(m - 2 + q, m);
    const double* fr[7];
    for (int q = 0; q < 7; ++q) fr[q] = frow(m - 3 + q);  // fr[3] is row m
    for (std::size_t e = 0; e < width; ++e) {
      const double w_m1 = l[0][e] - l[1][e];
      const double w_0 = l[1][e] - l[2][e];
      const double w_p1 = l[2][e] - l[3][e];
      const double w_p2 = l[3][e] - l[4][e];
      const double se = s[e];
      double po, pu, pd, acc = 0.0;
      auto F = [&](int r) { return fr[r - m + 3][e]; };
      if (se >= 0.0) {
        const double a = se;
        if (m >= 1) {  // face m: o = m - 2, u = m - 1, d = m
          cubic_flux_partials(F(m - 2), F(m - 1), F(m), a, limit, po, pu, pd);
          acc += w_0 * a * pd;
        }
        cubic_flux_partials(F(m - 1), F(m), F(m + 1), a, limit, po, pu, pd);  // face m + 1
        acc += w_p1 * a * pu;
        if (m + 2 <= n) {  // face m + 2: o = m
          cubic_flux_partials(F(m), F(m + 1), F(m + 2), a, limit, po, pu, pd);
          acc += w_p2 * a * po;
        }
      } else {
        const double a = -se;
        if (m + 1 <= n - 1) {  // face m + 1: u = m + 1, d = m, o = m + 2
          cubic_flux_partials(F(m + 2), F(m + 1), F(m), a, limit, po, pu, pd);
          acc -= w_p1 * a * pd;
        }
        cubic_flux_partials(F(m + 1), F(m), F(m - 1), a, limit, po, pu, pd);  // face m
        acc -= w_0 * a * pu;
        if (m >= 1) {  // face m - 1: u = m - 1, d = m - 2, o = m
          cubic_flux_partials(F(m), F(m - 1), F(m - 2), a, limit, po, pu, pd);
          acc -= w_m1 * a * po;
        }
      }
      out[e] = l[2][e] - acc;
    }
    hist.save(m);
    std::copy(out.begin(), out.end(), lam + static_cast<std::size_t>(m) * width);
  }
}

int substeps(double max_speed, double h, double dv, double cfl) {
  return std::max(1, static_cast<int>(std::ceil(max_speed * h / (cfl * dv) - 1e-12)));
}

}  // namespace

Solver::Solver(const PhaseGrid& grid, const InteractionModel& model, SchemeOptions options)
    : grid_(grid), model_(model), options_(options) {
  grid_.validate();
  model_.validate();
  if (!(options_.velocity_cfl > 0.0 && options_.velocity_cfl <= 1.0)) {
    throw Error("velocity Courant bound must lie in (0, 1]");
  }
  crowd_ = ForceTable(grid_, model_.crowd);
}

std::vector<double> Solver::acceleration(std::span<const double> rho,
                                         std::span<const double> agents) const {
  const std::size_t cells = grid_.spatial_cells();
  std::vector<double> a(2 * cells, 0.0);
  crowd_.convolve(rho, a);
  for (double& x : a) x = -x;
  const std::size_t m = agents.size() / 2;
  if (m == 0) return a;
  const double inv_m = 1.0 / static_cast<double>(m);
  double k[2];
  double x[2];
  for (int i = 0; i < grid_.nx; ++i) {
    for (int j = 0; j < grid_.nx; ++j) {
      x[0] = grid_.x(i);
      x[1] = grid_.x(j);
      const std::size_t c = static_cast<std::size_t>(i) * grid_.nx + j;
      for (std::size_t q = 0; q < m; ++q) {
        eval_force(model_.agent, x, agents.subspan(2 * q, 2), k);
        a[2 * c] -= inv_m * k[0];
        a[2 * c + 1] -= inv_m * k[1];
      }
    }
  }
  return a;
}

MfState Solver::make_state(DensityField f, std::vector<double> agents) const {
  if (!(f.grid == grid_)) throw Error("density grid does not match the solver grid");
  if (agents.size() % 2 != 0) throw Error("agent positions must be 2-D");
  MfState s{std::move(f), std::move(agents), {}};
  s.accel = acceleration(s.f.spatial_density(), s.agents);
  return s;
}

void Solver::clip(std::span<double> f, StepStats* stats) const {
  if (!options_.clip) return;
  double added = 0.0;
  for (double& x : f) {
    if (x < 0.0) {
      added -= x;
      x = 0.0;
    }
  }
  if (stats != nullptr) stats->clipped_mass += added * grid_.cell_volume();
}

void Solver::velocity_step(std::span<double> f, std::span<const double> accel, double h,
                           StepStats* stats) const {
  const int nv = grid_.nv;
  const double dv = grid_.dv();
  const double alpha = model_.friction;
  const bool limit = options_.limiter == Limiter::VanLeer;
  const std::size_t block = grid_.velocity_cells();
  std::vector<double> c(nv + 1), flux, tmp(block);
  for (std::size_t cell = 0; cell < grid_.spatial_cells(); ++cell) {
    double* blk = f.data() + cell * block;
    for (int d = 0; d < 2; ++d) {
      const double a = accel[2 * cell + d];
      for (int k = 0; k <= nv; ++k) c[k] = a - alpha * (-grid_.v_max + k * dv);
      const double top = std::max(std::abs(c[0]), std::abs(c[nv]));
      const int nsub = substeps(top, h, dv, options_.velocity_cfl);
      const double lambda = h / nsub / dv;
      if (stats != nullptr) stats->max_substeps = std::max(stats->max_substeps, nsub);
      if (d == 0) {
        for (int q = 0; q < nsub; ++q) lw_rows(blk, nv, nv, c.data(), lambda, limit, flux);
      } else {
        transpose_block(blk, tmp.data(), nv);
        for (int q = 0; q < nsub; ++q) lw_rows(tmp.data(), nv, nv, c.data(), lambda, limit, flux);
        transpose_block(tmp.data(), blk, nv);
      }
    }
  }
  clip(f, stats);
}

void Solver::velocity_step_adjoint(std::span<const double> f_in, std::span<const double> accel,
                                   double h, std::span<double> g,
                                   std::span<double> accel_sens) const {
  const int nv = grid_.nv;
  const double dv = grid_.dv();
  const double alpha = model_.friction;
  const bool limit = options_.limiter == Limiter::VanLeer;
  const std::size_t block = grid_.velocity_cells();
  std::vector<double> c1(nv + 1), c2(nv + 1), flux, fbar, next, lam(block), tmp(block);
  std::vector<double> states1, states2;
  for (std::size_t cell = 0; cell < grid_.spatial_cells(); ++cell) {
    int nsub[2];
    double lambda[2];
    std::vector<double>* c[2] = {&c1, &c2};
    for (int d = 0; d < 2; ++d) {
      const double a = accel[2 * cell + d];
      for (int k = 0; k <= nv; ++k) (*c[d])[k] = a - alpha * (-grid_.v_max + k * dv);
      const double top = std::max(std::abs((*c[d])[0]), std::abs((*c[d])[nv]));
      nsub[d] = substeps(top, h, dv, options_.velocity_cfl);
      lambda[d] = h / nsub[d] / dv;
    }
    // Recompute the sub-cycle states (v2 sweeps in transposed layout).
    states1.resize((nsub[0] + 1) * block);
    states2.resize((nsub[1] + 1) * block);
    std::copy_n(f_in.data() + cell * block, block, states1.data());
    for (int q = 0; q < nsub[0]; ++q) {
      std::copy_n(states1.data() + q * block, block, states1.data() + (q + 1) * block);
      lw_rows(states1.data() + (q + 1) * block, nv, nv, c1.data(), lambda[0], limit, flux);
    }
    transpose_block(states1.data() + nsub[0] * block, states2.data(), nv);
    for (int q = 0; q < nsub[1]; ++q) {
      std::copy_n(states2.data() + q * block, block, states2.data() + (q + 1) * block);
      lw_rows(states2.data() + (q + 1) * block, nv, nv, c2.data(), lambda[1], limit, flux);
    }
    // Clipping passes nothing back where the raw value was negative.
    double* gb = g.data() + cell * block;
    const double* raw = states2.data() + nsub[1] * block;  // transposed layout
    transpose_block(gb, lam.data(), nv);
    for (std::size_t i = 0; i < block; ++i)
      if (options_.clip && raw[i] < 0.0) lam[i] = 0.0;
    double sens[2] = {0.0, 0.0};
    for (int q = nsub[1]; q-- > 0;) {
      sens[1] += lw_rows_vjp(states2.data() + q * block, nv, nv, c2.data(), lambda[1], limit,
                             lam.data(), fbar, next);
    }
    transpose_block(lam.data(), tmp.data(), nv);
    for (int q = nsub[0]; q-- > 0;) {
      sens[0] += lw_rows_vjp(states1.data() + q * block, nv, nv, c1.data(), lambda[0], limit,
                             tmp.data(), fbar, next);
    }
    std::copy(tmp.begin(), tmp.end(), gb);
    const double dv2 = dv * dv;
    accel_sens[2 * cell] += dv2 * sens[0];
    accel_sens[2 * cell + 1] += dv2 * sens[1];
  }
}

void Solver::spatial_step(std::span<double> f, double dt, bool transpose, StepStats* stats) const {
  check_cfl(grid_, dt);
  const int nx = grid_.nx, nv = grid_.nv;
  const double ratio = dt / grid_.dx();
  const bool limit = options_.limiter == Limiter::VanLeer && !transpose;
  const std::size_t vblock = grid_.velocity_cells();

  // x1 rows have width nx * nv^2 and a shift set by v1; x2 rows (inside one
  // x1 slab) have width nv^2 and a shift set by v2.
  std::vector<double> s1(static_cast<std::size_t>(nx) * vblock), s2(vblock);
  for (int iy = 0; iy < nx; ++iy)
    for (int a = 0; a < nv; ++a)
      for (int b = 0; b < nv; ++b) {
        s1[(static_cast<std::size_t>(iy) * nv + a) * nv + b] = grid_.v(a) * ratio;
        s2[static_cast<std::size_t>(a) * nv + b] = grid_.v(b) * ratio;
      }

  auto sweep_x1 = [&] {
    if (transpose) shift_rows_transpose(f.data(), nx, s1.size(), s1.data());
    else shift_rows(f.data(), nx, s1.size(), s1.data(), limit);
  };
  auto sweep_x2 = [&] {
    for (int ix = 0; ix < nx; ++ix) {
      double* slab = f.data() + static_cast<std::size_t>(ix) * nx * vblock;
      if (transpose) shift_rows_transpose(slab, nx, vblock, s2.data());
      else shift_rows(slab, nx, vblock, s2.data(), limit);
    }
  };
  if (transpose) {
    sweep_x2();
    sweep_x1();
  } else {
    sweep_x1();
    sweep_x2();
    clip(f, stats);  // only round-off can go negative here
  }
}

void Solver::spatial_step_adjoint(std::span<const double> f_in, double dt,
                                  std::span<double> g) const {
  check_cfl(grid_, dt);
  const int nx = grid_.nx, nv = grid_.nv;
  const double ratio = dt / grid_.dx();
  const bool limit = options_.limiter == Limiter::VanLeer;
  const std::size_t vblock = grid_.velocity_cells();
  std::vector<double> s1(static_cast<std::size_t>(nx) * vblock), s2(vblock);
  for (int iy = 0; iy < nx; ++iy)
    for (int a = 0; a < nv; ++a)
      for (int b = 0; b < nv; ++b) {
        s1[(static_cast<std::size_t>(iy) * nv + a) * nv + b] = grid_.v(a) * ratio;
        s2[static_cast<std::size_t>(a) * nv + b] = grid_.v(b) * ratio;
      }
  std::vector<double> mid(f_in.begin(), f_in.end());
  shift_rows(mid.data(), nx, s1.size(), s1.data(), limit);
  for (int ix = 0; ix < nx; ++ix) {
    const std::size_t off = static_cast<std::size_t>(ix) * nx * vblock;
    shift_rows_vjp(mid.data() + off, g.data() + off, nx, vblock, s2.data(), limit);
  }
  shift_rows_vjp(f_in.data(), g.data(), nx, s1.size(), s1.data(), limit);
}

MfState Solver::step(const MfState& s, std::span<const double> control, double dt,
                     StepStats* stats) const {
  check_cfl(grid_, dt);
  if (control.size() != s.agents.size()) throw Error("control does not match the agent count");
  const double mass0 = s.f.mass();
  MfState out{s.f, s.agents, {}};
  StepStats local;
  velocity_step(out.f.values, s.accel, 0.5 * dt, &local);
  spatial_step(out.f.values, dt, false, &local);
  for (std::size_t i = 0; i < out.agents.size(); ++i) out.agents[i] += dt * control[i];
  out.accel = acceleration(out.f.spatial_density(), out.agents);
  velocity_step(out.f.values, out.accel, 0.5 * dt, &local);

  const double mass1 = out.f.mass();
  if (!std::isfinite(mass1)) throw SolverError("mean-field step produced non-finite values");
  if (local.clipped_mass > 0.1 * std::max(mass0, 1e-300)) {
    throw SolverError("mean-field step clipped more than 10% of the mass");
  }
  if (stats != nullptr) {
    stats->clipped_mass += local.clipped_mass;
    stats->max_substeps = std::max(stats->max_substeps, local.max_substeps);
  }
  return out;
}

std::vector<double> Solver::weighted_velocity_gradient(std::span<const double> g,
                                                       std::span<const double> f) const {
  const int nv = grid_.nv;
  const double dv = grid_.dv();
  const double dv2 = dv * dv;
  const std::size_t block = grid_.velocity_cells();
  std::vector<double> out(2 * grid_.spatial_cells(), 0.0);
  auto diff = [&](const double* p, int i, std::size_t stride) {
    if (i == 0) return (p[stride] - p[0]) / dv;
    if (i == nv - 1) return (p[(nv - 1) * stride] - p[(nv - 2) * stride]) / dv;
    return (p[(i + 1) * stride] - p[(i - 1) * stride]) / (2.0 * dv);
  };
  for (std::size_t cell = 0; cell < grid_.spatial_cells(); ++cell) {
    const double* gb = g.data() + cell * block;
    const double* fb = f.data() + cell * block;
    double sx = 0.0, sy = 0.0;
    for (int a = 0; a < nv; ++a) {
      for (int b = 0; b < nv; ++b) {
        const double fv = fb[a * nv + b];
        if (fv == 0.0) continue;
        sx += diff(gb + b, a, nv) * fv;
        sy += diff(gb + static_cast<std::size_t>(a) * nv, b, 1) * fv;
      }
    }
    out[2 * cell] = sx * dv2;
    out[2 * cell + 1] = sy * dv2;
  }
  return out;
}

std::vector<double> Solver::nonlocal_term(std::span<const double> weighted_gradient) const {
  std::vector<double> d(grid_.spatial_cells(), 0.0);
  crowd_.convolve_dot(weighted_gradient, d);
  for (double& x : d) x = -x;  // the table holds grad Phi(x - x'), D needs x' - x
  return d;
}

std::vector<double> Solver::agent_sensitivity(std::span<const double> weighted_gradient,
                                              std::span<const double> agents) const {
  const std::size_t m = agents.size() / 2;
  std::vector<double> r(2 * m, 0.0);
  if (m == 0) return r;
  const double scale = grid_.dx() * grid_.dx() / static_cast<double>(m);
  double h[4], z[2];
  for (std::size_t q = 0; q < m; ++q) {
    double rx = 0.0, ry = 0.0;
    for (int i = 0; i < grid_.nx; ++i) {
      for (int j = 0; j < grid_.nx; ++j) {
        const std::size_t c = static_cast<std::size_t>(i) * grid_.nx + j;
        const double gx = weighted_gradient[2 * c], gy = weighted_gradient[2 * c + 1];
        if (gx == 0.0 && gy == 0.0) continue;
        z[0] = grid_.x(i) - agents[2 * q];
        z[1] = grid_.x(j) - agents[2 * q + 1];
        eval_hessian(model_.agent, z, h);
        rx += h[0] * gx + h[1] * gy;
        ry += h[2] * gx + h[3] * gy;
      }
    }
    r[2 * q] = rx * scale;
    r[2 * q + 1] = ry * scale;
  }
  return r;
}

DensityField strang_forward_step(const DensityField& field, std::span<const double> agents,
                                 std::span<const double> control, const InteractionModel& model,
                                 double dt) {
  Solver solver(field.grid, model);
  const MfState s = solver.make_state(field, std::vector<double>(agents.begin(), agents.end()));
  return solver.step(s, control, dt, nullptr).f;
}

}  // namespace shepherd::meanfield
