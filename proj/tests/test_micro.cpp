#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "oracles.hpp"
#include "shepherd/micro.hpp"

using namespace shepherd;

namespace {

MicroState crowd_state(std::size_t n, int m, unsigned seed) {
  std::vector<double> agents;
  for (int k = 0; k < m; ++k) {
    const double th = M_PI / 4 + 2 * M_PI * k / m;
    agents.push_back(22.5 + 60 * std::cos(th));
    agents.push_back(17.5 + 60 * std::sin(th));
  }
  const std::vector<double> lo{-10.0, -20.0}, hi{55.0, 55.0};
  return micro::sample_particles(n, lo, hi, 0.0, agents, seed);
}

// A tight crowd with agents close by, so that control derivatives are far
// above the round-off floor of a central difference at eps = 1e-5.
MicroState compact_state(std::size_t n, int m, unsigned seed) {
  std::vector<double> agents;
  for (int k = 0; k < m; ++k) {
    const double th = M_PI / 4 + 2 * M_PI * k / m;
    agents.push_back(22.5 + 15 * std::cos(th));
    agents.push_back(17.5 + 15 * std::sin(th));
  }
  const std::vector<double> lo{12.5, 7.5}, hi{32.5, 27.5};
  return micro::sample_particles(n, lo, hi, 0.0, agents, seed);
}

CostWeights s3_weights(const MicroState& s, double horizon) {
  CostWeights w{0.005, 0.5, 1e-6, 0.0, {-20.0, -20.0}, horizon};
  w.target_variance = 0.9 * moments(s.positions, s.dim).variance;
  return w;
}

ControlSchedule random_control(double horizon, int slices, int m, unsigned seed) {
  auto c = ControlSchedule::uniform(0.0, horizon, slices, m, 2, 10.0);
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> u(-4.0, 4.0);
  for (double& x : c.values()) x = u(rng);
  return c;
}

ControlSchedule random_direction(const ControlSchedule& like, unsigned seed) {
  ControlSchedule h = like.zeros_like();
  std::mt19937 rng(seed);
  std::normal_distribution<double> g;
  for (double& x : h.values()) x = g(rng);
  const double n = l2_norm(h);
  for (double& x : h.values()) x /= n;
  return h;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("RK4 reproduces exponential velocity decay") {
  MicroState s(2, 1, 1);
  s.velocities = {1.0, 0.0};
  s.agents = {0.0, 0.0};
  InteractionModel m{PotentialParams::zero(), PotentialParams::zero(), 1.0};
  auto c = ControlSchedule::uniform(0.0, 1.0, 1, 1, 2, 10.0);
  auto rec = micro::integrate_forward(s, c, m, 100);
  const MicroState& end = rec.states.at(100);
  CHECK(std::abs(end.velocities[0] - std::exp(-1.0)) <= 1e-9);
  CHECK(std::abs(end.positions[0] - (1.0 - std::exp(-1.0))) <= 1e-9);
}

TEST_CASE("agents follow constant controls") {
  MicroState s = crowd_state(3, 2, 1);
  s.agents = {0.0, 0.0, 5.0, 5.0};
  auto c = ControlSchedule::uniform(0.0, 2.0, 4, 2, 2, 10.0);
  for (int k = 0; k < 4; ++k) {
    c.agent(k, 0)[0] = 1.0;
    c.agent(k, 1)[1] = -2.0;
  }
  auto rec = micro::integrate_forward(s, c, InteractionModel{}, 40);
  const auto& d = rec.agent_positions.back();
  CHECK(std::abs(d[0] - 2.0) <= 1e-13);
  CHECK(d[1] == 0.0);
  CHECK(d[2] == 5.0);
  CHECK(std::abs(d[3] - 1.0) <= 1e-13);
}

TEST_CASE("forward record structure") {
  MicroState s = crowd_state(4, 2, 3);
  auto c = random_control(1.0, 5, 2, 4);
  auto rec = micro::integrate_forward(s, c, InteractionModel{}, 20);
  CHECK(rec.times.size() == 21);
  CHECK(rec.states.size() == 21);
  CHECK(rec.crowd_moments.size() == 21);
  CHECK(rec.times.front() == 0.0);
  CHECK(rec.times.back() == 1.0);
  for (std::size_t i = 1; i < rec.times.size(); ++i) CHECK(rec.times[i] > rec.times[i - 1]);
  CHECK(rec.states.at(0).positions == s.positions);
  CHECK(rec.states.at(0).velocities == s.velocities);
}

TEST_CASE("forward rejects bad step counts and blow-up") {
  MicroState s = crowd_state(4, 2, 3);
  auto c = random_control(1.0, 3, 2, 4);
  CHECK_THROWS_AS(micro::integrate_forward(s, c, InteractionModel{}, 10), Error);
  CHECK_THROWS_AS(micro::integrate_forward(s, c, InteractionModel{}, 0), Error);
  InteractionModel wild;
  wild.agent = PotentialParams{0.0, 1e308, 1.0, 1e-3};
  s.agents = {s.positions[0] + 1e-9, s.positions[1], 0.0, 0.0};
  CHECK_THROWS_AS(micro::integrate_forward(s, c, wild, 3), SolverError);
}

TEST_CASE("RK4 self-convergence is fourth order") {
  MicroState s = crowd_state(4, 2, 17);
  // Pull the crowd together so that the interactions matter.
  for (double& x : s.positions) x *= 0.2;
  s.agents = {-15.0, 0.0, 20.0, 10.0};
  auto c = random_control(0.5, 1, 2, 5);
  InteractionModel m;
  auto terminal = [&](std::size_t steps) {
    auto rec = micro::integrate_forward(s, c, m, steps);
    const auto& y = rec.states.at(steps);
    std::vector<double> out = y.positions;
    out.insert(out.end(), y.velocities.begin(), y.velocities.end());
    return out;
  };
  auto ref = terminal(160);
  const double e1 = max_abs_diff(terminal(8), ref);
  const double e2 = max_abs_diff(terminal(16), ref);
  const double factor = e1 / e2;
  CHECK(factor >= 12.0);
  CHECK(factor <= 20.0);
}

TEST_CASE("total crowd momentum is conserved without friction and agents") {
  MicroState s = crowd_state(20, 1, 8);
  for (double& x : s.positions) x = 0.3 * x;
  std::mt19937 rng(3);
  std::normal_distribution<double> g;
  for (double& v : s.velocities) v = g(rng);
  InteractionModel m{PotentialParams::crowd(), PotentialParams::zero(), 0.0};
  auto c = ControlSchedule::uniform(0.0, 1.0, 1, 1, 2, 10.0);
  auto rec = micro::integrate_forward(s, c, m, 100);
  const auto& end = rec.states.at(100);
  double p0[2] = {0, 0}, p1[2] = {0, 0};
  double scale = 0;
  for (std::size_t i = 0; i < 20; ++i) {
    for (int k = 0; k < 2; ++k) {
      p0[k] += s.velocities[2 * i + k];
      p1[k] += end.velocities[2 * i + k];
      scale += std::abs(s.velocities[2 * i + k]);
    }
  }
  CHECK(std::hypot(p1[0] - p0[0], p1[1] - p0[1]) / scale <= 1e-8);
}

TEST_CASE("adjoint vanishes without state costs") {
  MicroState s = crowd_state(5, 2, 2);
  auto c = random_control(0.5, 5, 2, 3);
  CostWeights w{0.0, 0.0, 1e-2, 0.0, {-20.0, -20.0}, 0.5};
  auto rec = micro::integrate_forward(s, c, InteractionModel{}, 50);
  auto adj = micro::integrate_adjoint(rec, c, InteractionModel{}, w, micro::AdjointScaling::Rescaled,
                                      true);
  for (const auto* series : {&adj.r, &adj.s, &adj.phi}) {
    for (const auto& v : *series) {
      for (double x : v) CHECK(x == 0.0);
    }
  }
  auto g = micro::gradient_from_adjoint(adj, c, w, 5);
  const double scale = w.sigma3 / (2 * w.horizon);
  for (std::size_t i = 0; i < g.values().size(); ++i) CHECK(g.values()[i] == scale * c.values()[i]);

  auto zero = c.zeros_like();
  auto gz = micro::reduced_gradient(zero, s, InteractionModel{}, w, 10).gradient;
  for (double x : gz.values()) CHECK(x == 0.0);
}

TEST_CASE("adjoint terminal data is zero") {
  MicroState s = crowd_state(5, 2, 2);
  auto c = random_control(0.5, 5, 2, 3);
  auto w = s3_weights(s, 0.5);
  auto rec = micro::integrate_forward(s, c, InteractionModel{}, 50);
  auto adj = micro::integrate_adjoint(rec, c, InteractionModel{}, w, micro::AdjointScaling::Rescaled,
                                      true);
  for (double x : adj.r.back()) CHECK(x == 0.0);
  for (double x : adj.s.back()) CHECK(x == 0.0);
  for (double x : adj.phi.back()) CHECK(x == 0.0);
  double mag = 0;
  for (double x : adj.r.front()) mag += std::abs(x);
  CHECK(mag > 0.0);
}

TEST_CASE("gradient matches central finite differences") {
  MicroState s = compact_state(5, 2, 21);
  auto c = random_control(0.5, 5, 2, 22);
  auto w = s3_weights(s, 0.5);
  micro::Problem problem(s, InteractionModel{}, w, 10);
  auto g = problem.gradient(c, nullptr);
  for (unsigned k = 0; k < 10; ++k) {
    auto h = random_direction(c, 100 + k);
    auto cost = [&](double eps) {
      auto trial = c;
      axpy(eps, h, trial);
      return problem.evaluate(trial).total();
    };
    const double fd = oracle::directional_fd(cost, 1e-5);
    CHECK(oracle::rel_err(inner(g, h), fd) <= 1e-4);
  }
}

TEST_CASE("rescaled and unscaled adjoints agree") {
  MicroState s = crowd_state(6, 2, 31);
  auto c = random_control(0.5, 5, 2, 32);
  auto w = s3_weights(s, 0.5);
  InteractionModel m;
  auto rec = micro::integrate_forward(s, c, m, 50);
  auto a = micro::integrate_adjoint(rec, c, m, w, micro::AdjointScaling::Rescaled, true);
  auto b = micro::integrate_adjoint(rec, c, m, w, micro::AdjointScaling::Unscaled, true);
  for (std::size_t t = 0; t < a.r.size(); ++t) {
    for (std::size_t i = 0; i < a.r[t].size(); ++i) {
      CHECK(std::abs(a.r[t][i] - 6.0 * b.r[t][i]) <= 1e-12 * (1.0 + std::abs(a.r[t][i])));
      CHECK(std::abs(a.s[t][i] - 6.0 * b.s[t][i]) <= 1e-12 * (1.0 + std::abs(a.s[t][i])));
    }
  }
  auto ga = micro::gradient_from_adjoint(a, c, w, 6);
  auto gb = micro::gradient_from_adjoint(b, c, w, 6);
  for (std::size_t i = 0; i < ga.values().size(); ++i) {
    CHECK(ga.values()[i] == doctest::Approx(gb.values()[i]).epsilon(1e-12));
  }
}

TEST_CASE("checkpointed adjoint equals the in-memory adjoint") {
  MicroState s = crowd_state(8, 2, 41);
  auto c = random_control(1.0, 10, 2, 42);
  auto w = s3_weights(s, 1.0);
  InteractionModel m;
  auto full = micro::integrate_forward(s, c, m, 100, 1);
  auto ckpt = micro::integrate_forward(s, c, m, 100, 7);
  auto a = micro::integrate_adjoint(full, c, m, w);
  auto b = micro::integrate_adjoint(ckpt, c, m, w);
  CHECK(full.states.recomputations() == 0);
  CHECK(ckpt.states.recomputations() > 0);
  for (std::size_t t = 0; t < a.phi.size(); ++t) CHECK(max_abs_diff(a.phi[t], b.phi[t]) <= 1e-12);
  CHECK(max_abs_diff(a.r.front(), b.r.front()) <= 1e-12);

  // Budget of roughly a quarter of the full record.
  const std::size_t budget = 26 * s.bytes();
  micro::Problem p_full(s, m, w, 10);
  micro::Problem p_ckpt(s, m, w, 10, budget + 12 * s.bytes());
  auto ga = p_full.gradient(c, nullptr);
  auto gb = p_ckpt.gradient(c, nullptr);
  CHECK(max_abs_diff(ga.values(), gb.values()) <= 1e-12);
  CHECK(p_ckpt.peak_memory_bytes() <= budget + 12 * s.bytes());
  CHECK(p_ckpt.last_record()->states.stride() > 1);
}

TEST_CASE("cost assembly uses the trapezoid rule with exact control term") {
  MicroState s(2, 1, 1);
  s.velocities = {1.0, 0.0};
  InteractionModel m{PotentialParams::zero(), PotentialParams::zero(), 0.0};
  auto c = ControlSchedule::uniform(0.0, 2.0, 2, 1, 2, 10.0);
  c.agent(0, 0)[0] = 3.0;
  c.agent(1, 0)[1] = 4.0;
  CostWeights w{0.0, 2.0, 0.5, 0.0, {0.0, 0.0}, 2.0};
  auto rec = micro::integrate_forward(s, c, m, 4);
  auto cost = micro::assemble_cost(rec, c, w);
  // E(t) = (t, 0); trapezoid of |E|^2 on h = 0.5 over [0,2].
  double trap = 0;
  for (int i = 0; i < 4; ++i) {
    const double a = 0.5 * i, b = 0.5 * (i + 1);
    trap += 0.25 * (a * a + b * b);
  }
  CHECK(cost.j1 == 0.0);
  CHECK(cost.j2 == doctest::Approx(trap / 2.0).epsilon(1e-14));
  CHECK(cost.j3 == doctest::Approx((0.5 / 2 * 9 + 0.5 / 2 * 16) / 2.0).epsilon(1e-14));
}

TEST_CASE("particle sampling is seeded and inside the box") {
  const std::vector<double> lo{-10.0, -20.0}, hi{55.0, 55.0}, agents{0.0, 0.0};
  auto a = micro::sample_particles(500, lo, hi, 0.0, agents, 5);
  auto b = micro::sample_particles(500, lo, hi, 0.0, agents, 5);
  CHECK(a.positions == b.positions);
  for (std::size_t i = 0; i < 500; ++i) {
    CHECK(a.positions[2 * i] >= -10.0);
    CHECK(a.positions[2 * i] <= 55.0);
    CHECK(a.positions[2 * i + 1] >= -20.0);
    CHECK(a.positions[2 * i + 1] <= 55.0);
  }
  for (double v : a.velocities) CHECK(v == 0.0);
}

TEST_CASE("stratified sampling puts one particle in every slab") {
  const std::vector<double> lo{-10.0, -20.0}, hi{55.0, 55.0}, agents{0.0, 0.0};
  const std::size_t n = 400;
  auto a = micro::sample_particles(n, lo, hi, 0.0, agents, 5, micro::Sampling::Stratified);
  auto b = micro::sample_particles(n, lo, hi, 0.0, agents, 5, micro::Sampling::Stratified);
  CHECK(a.positions == b.positions);
  for (int c = 0; c < 2; ++c) {
    std::vector<int> hits(n, 0);
    const double w = (hi[c] - lo[c]) / n;
    for (std::size_t i = 0; i < n; ++i) {
      const auto k = static_cast<std::size_t>((a.positions[2 * i + c] - lo[c]) / w);
      REQUIRE(k < n);
      ++hits[k];
    }
    CHECK(std::count(hits.begin(), hits.end(), 1) == static_cast<long>(n));
  }
  // Marginal means sit within one slab width of the box centre; i.i.d.
  // draws spread about 1 unit here.
  const auto m = moments(a.positions, 2);
  CHECK(std::abs(m.mean[0] - 22.5) <= 65.0 / n);
  CHECK(std::abs(m.mean[1] - 17.5) <= 75.0 / n);
}
