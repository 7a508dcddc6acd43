#include "shepherd/control.hpp"

#include <algorithm>
#include <cmath>

#include "shepherd/model.hpp"

namespace shepherd {

ControlSchedule::ControlSchedule(std::vector<double> knots, int agents, int dim, double speed_cap)
    : knots_(std::move(knots)), agents_(agents), dim_(dim), speed_cap_(speed_cap) {
  if (knots_.size() < 2) throw Error("control schedule needs at least one slice");
  for (std::size_t k = 1; k < knots_.size(); ++k) {
    if (!(knots_[k] > knots_[k - 1])) throw Error("control knots must be strictly increasing");
  }
  if (agents_ < 1 || dim_ < 1) throw Error("control schedule needs M >= 1 and D >= 1");
  if (!(speed_cap_ > 0.0)) throw Error("speed cap u_max must be positive");
  values_.assign(static_cast<std::size_t>(slices() * agents_ * dim_), 0.0);
}

ControlSchedule ControlSchedule::uniform(double t0, double horizon, int slices, int agents,
                                         int dim, double speed_cap) {
  if (slices < 1) throw Error("control schedule needs at least one slice");
  std::vector<double> knots(static_cast<std::size_t>(slices) + 1);
  for (int k = 0; k <= slices; ++k) knots[k] = t0 + horizon * k / slices;
  knots.back() = t0 + horizon;
  return ControlSchedule(std::move(knots), agents, dim, speed_cap);
}

std::span<double> ControlSchedule::slice(int k) {
  const std::size_t w = static_cast<std::size_t>(agents_ * dim_);
  return std::span(values_).subspan(k * w, w);
}

std::span<const double> ControlSchedule::slice(int k) const {
  const std::size_t w = static_cast<std::size_t>(agents_ * dim_);
  return std::span(values_).subspan(k * w, w);
}

std::span<double> ControlSchedule::agent(int k, int m) {
  return slice(k).subspan(static_cast<std::size_t>(m * dim_), static_cast<std::size_t>(dim_));
}

std::span<const double> ControlSchedule::agent(int k, int m) const {
  return slice(k).subspan(static_cast<std::size_t>(m * dim_), static_cast<std::size_t>(dim_));
}

int ControlSchedule::slice_at(double t) const {
  auto it = std::upper_bound(knots_.begin(), knots_.end(), t);
  int k = static_cast<int>(it - knots_.begin()) - 1;
  return std::clamp(k, 0, slices() - 1);
}

bool ControlSchedule::feasible(double slack) const {
  for (int k = 0; k < slices(); ++k) {
    for (int m = 0; m < agents_; ++m) {
      double s2 = 0.0;
      for (double u : agent(k, m)) s2 += u * u;
      if (std::sqrt(s2) > speed_cap_ * (1.0 + slack)) return false;
    }
  }
  return true;
}

bool ControlSchedule::same_layout(const ControlSchedule& other) const {
  return agents_ == other.agents_ && dim_ == other.dim_ && knots_ == other.knots_;
}

ControlSchedule ControlSchedule::zeros_like() const {
  ControlSchedule out = *this;
  std::fill(out.values_.begin(), out.values_.end(), 0.0);
  return out;
}

double inner(const ControlSchedule& a, const ControlSchedule& b) {
  if (!a.same_layout(b)) throw Error("inner product of schedules with different layouts");
  double sum = 0.0;
  for (int k = 0; k < a.slices(); ++k) {
    auto sa = a.slice(k);
    auto sb = b.slice(k);
    double dot = 0.0;
    for (std::size_t i = 0; i < sa.size(); ++i) dot += sa[i] * sb[i];
    sum += a.slice_length(k) * dot;
  }
  return sum;
}

double l2_norm(const ControlSchedule& a) { return std::sqrt(inner(a, a)); }

void axpy(double alpha, const ControlSchedule& x, ControlSchedule& y) {
  if (!x.same_layout(y)) throw Error("axpy on schedules with different layouts");
  auto& yv = y.values();
  const auto& xv = x.values();
  for (std::size_t i = 0; i < yv.size(); ++i) yv[i] += alpha * xv[i];
}

double l1_distance(const ControlSchedule& a, const ControlSchedule& b) {
  if (a.agents() != b.agents() || a.dim() != b.dim()) {
    throw Error("schedules differ in agent count or dimension");
  }
  std::vector<double> cuts(a.knots().begin(), a.knots().end());
  cuts.insert(cuts.end(), b.knots().begin(), b.knots().end());
  std::sort(cuts.begin(), cuts.end());
  cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());
  const double lo = std::max(a.start(), b.start());
  const double hi = std::min(a.end(), b.end());
  double total = 0.0;
  for (std::size_t i = 0; i + 1 < cuts.size(); ++i) {
    const double t0 = std::max(cuts[i], lo);
    const double t1 = std::min(cuts[i + 1], hi);
    if (!(t1 > t0)) continue;
    const double mid = 0.5 * (t0 + t1);
    auto ua = a.slice(a.slice_at(mid));
    auto ub = b.slice(b.slice_at(mid));
    double s2 = 0.0;
    for (std::size_t j = 0; j < ua.size(); ++j) s2 += (ua[j] - ub[j]) * (ua[j] - ub[j]);
    total += (t1 - t0) * std::sqrt(s2);
  }
  return total;
}

}  // namespace shepherd
