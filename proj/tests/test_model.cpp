#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "oracles.hpp"
#include "shepherd/model.hpp"

using namespace shepherd;

namespace {

oracle::Morse as_oracle(const PotentialParams& p) {
  return {p.attraction_strength, p.repulsion_strength, p.attraction_radius, p.repulsion_radius};
}

}  // namespace

TEST_CASE("potential at zero distance is R - A") {
  PotentialParams p{3.0, 7.0, 2.0, 5.0};
  CHECK(eval_potential(p, 0.0) == doctest::Approx(4.0).epsilon(1e-15));
  CHECK(eval_potential(PotentialParams::crowd(), 0.0) == doctest::Approx(30.0).epsilon(1e-15));
}

TEST_CASE("potential matches plug-in evaluation") {
  const auto p = PotentialParams::crowd();
  const double expected = 50.0 * std::exp(-10.0 / 2.0) - 20.0 * std::exp(-10.0 / 100.0);
  CHECK(std::abs(eval_potential(p, 10.0) - expected) <= 1e-12 * std::abs(expected));
  CHECK(eval_potential(p, 10.0) == doctest::Approx(oracle::potential(as_oracle(p), 10.0)));
}

TEST_CASE("negative distance is rejected") {
  CHECK_THROWS_AS(eval_potential(PotentialParams::crowd(), -1.0), Error);
}

TEST_CASE("potential parameter validation") {
  CHECK_NOTHROW(PotentialParams::zero().validate());
  CHECK_THROWS_AS((PotentialParams{1.0, 1.0, 0.0, 1.0}.validate()), Error);
  CHECK_THROWS_AS((PotentialParams{-1.0, 1.0, 1.0, 1.0}.validate()), Error);
  InteractionModel m;
  m.friction = -0.5;
  CHECK_THROWS_AS(m.validate(), Error);
}

TEST_CASE("force vanishes at zero separation") {
  const std::vector<double> x{3.0, -2.0};
  auto f = eval_force(PotentialParams::crowd(), x, x);
  CHECK(f[0] == 0.0);
  CHECK(f[1] == 0.0);
}

TEST_CASE("force is antisymmetric") {
  std::mt19937 rng(7);
  std::uniform_real_distribution<double> u(-80.0, 80.0);
  for (const auto& p : {PotentialParams::crowd(), PotentialParams::agent()}) {
    for (int t = 0; t < 200; ++t) {
      std::vector<double> x{u(rng), u(rng)}, y{u(rng), u(rng)};
      auto a = eval_force(p, x, y);
      auto b = eval_force(p, y, x);
      for (int c = 0; c < 2; ++c) CHECK(a[c] == -b[c]);
    }
  }
}

TEST_CASE("force at (1,0) matches finite differences") {
  const auto p = PotentialParams::crowd();
  auto f = eval_force(p, std::vector<double>{1.0, 0.0}, std::vector<double>{0.0, 0.0});
  auto fd = oracle::force_fd(as_oracle(p), {1.0, 0.0});
  CHECK(oracle::rel_err(f[0], fd[0]) <= 1e-6);
  CHECK(std::abs(f[1]) <= 1e-12);
}

TEST_CASE("force matches finite differences at random radii") {
  std::mt19937 rng(11);
  std::uniform_real_distribution<double> radius(0.1, 200.0), angle(0.0, 2 * M_PI);
  for (const auto& p : {PotentialParams::crowd(), PotentialParams::agent()}) {
    for (int t = 0; t < 100; ++t) {
      const double s = radius(rng), th = angle(rng);
      const std::vector<double> z{s * std::cos(th), s * std::sin(th)};
      auto f = eval_force(p, z, std::vector<double>{0.0, 0.0});
      // Central differences with a step scaled to the radius to keep the
      // truncation and cancellation errors below the tolerance.
      auto fd = oracle::force_fd(as_oracle(p), z, 1e-6 * std::max(1.0, s));
      double nf = 0, nd = 0;
      for (int c = 0; c < 2; ++c) {
        nf += (f[c] - fd[c]) * (f[c] - fd[c]);
        nd += fd[c] * fd[c];
      }
      CHECK(std::sqrt(nf / nd) <= 1e-6);
    }
  }
}

TEST_CASE("hessian matches finite differences of the force") {
  std::mt19937 rng(5);
  std::uniform_real_distribution<double> u(-30.0, 30.0);
  const auto p = PotentialParams::crowd();
  for (int t = 0; t < 20; ++t) {
    const std::vector<double> z{u(rng), u(rng)};
    std::vector<double> h(4);
    eval_hessian(p, z, h);
    const double eps = 1e-5;
    for (int c = 0; c < 2; ++c) {
      auto zp = z, zm = z;
      zp[c] += eps;
      zm[c] -= eps;
      auto fp = oracle::force(as_oracle(p), zp);
      auto fm = oracle::force(as_oracle(p), zm);
      for (int r = 0; r < 2; ++r) {
        const double fd = (fp[r] - fm[r]) / (2 * eps);
        CHECK(std::abs(h[r * 2 + c] - fd) <= 1e-6 * (1.0 + std::abs(fd)));
      }
    }
    CHECK(h[1] == doctest::Approx(h[2]));
  }
}

TEST_CASE("drift of a lone particle far from its agent is friction only") {
  MicroState s(2, 1, 1);
  s.positions = {0.0, 0.0};
  s.velocities = {0.7, -1.3};
  s.agents = {1e9, 0.0};
  InteractionModel m;
  auto a = micro_drift(s, m);
  CHECK(std::abs(a[0] + 0.7) <= 1e-12);
  CHECK(std::abs(a[1] - 1.3) <= 1e-12);
}

TEST_CASE("two symmetric particles feel opposite drifts") {
  MicroState s(2, 2, 1);
  s.positions = {-1.5, 0.5, 1.5, -0.5};
  s.agents = {0.0, 400.0};
  InteractionModel m;
  m.agent = PotentialParams::zero();
  auto a = micro_drift(s, m);
  CHECK(a[0] == -a[2]);
  CHECK(a[1] == -a[3]);
}

TEST_CASE("drift matches the naive double loop") {
  MicroState s(2, 3, 2);
  s.positions = oracle::uniform(6, -20.0, 20.0, 1);
  s.velocities = oracle::uniform(6, -2.0, 2.0, 2);
  s.agents = oracle::uniform(4, -40.0, 40.0, 3);
  InteractionModel m;
  auto a = micro_drift(s, m);
  auto ref = oracle::drift(s.positions, s.velocities, s.agents, 2, as_oracle(m.crowd),
                           as_oracle(m.agent), m.friction);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] - ref[i]) <= 1e-13);
}

TEST_CASE("drift with interactions off is -alpha v exactly") {
  MicroState s(2, 5, 2);
  s.positions = oracle::uniform(10, -20.0, 20.0, 4);
  s.velocities = oracle::uniform(10, -2.0, 2.0, 5);
  s.agents = oracle::uniform(4, -20.0, 20.0, 6);
  InteractionModel m{PotentialParams::zero(), PotentialParams::zero(), 0.3};
  auto a = micro_drift(s, m);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == -0.3 * s.velocities[i]);
}

TEST_CASE("micro state validation") {
  MicroState s(2, 2, 1);
  CHECK_NOTHROW(s.validate());
  s.velocities[1] = NAN;
  CHECK_THROWS_AS(s.validate(), Error);
  CHECK_THROWS_AS(MicroState(2, 0, 1).validate(), Error);
  CHECK_THROWS_AS(MicroState(2, 1, 0).validate(), Error);
}

TEST_CASE("moments of two points") {
  std::vector<double> x{0.0, 0.0, 2.0, 0.0};
  auto m = moments(x, 2);
  CHECK(m.mean[0] == 1.0);
  CHECK(m.mean[1] == 0.0);
  CHECK(m.variance == 1.0);
  std::vector<double> same{3.0, 4.0, 3.0, 4.0, 3.0, 4.0};
  CHECK(moments(same, 2).variance == 0.0);
}

TEST_CASE("moments match two-pass oracle and are translation invariant") {
  auto x = oracle::uniform(200, -50.0, 50.0, 9);
  auto m = moments(x, 2);
  auto ref = oracle::moments(x, 2);
  CHECK(std::abs(m.mean[0] - ref.mean[0]) <= 1e-12);
  CHECK(std::abs(m.mean[1] - ref.mean[1]) <= 1e-12);
  CHECK(std::abs(m.variance - ref.variance) <= 1e-12 * ref.variance);

  auto y = x;
  for (std::size_t i = 0; i < y.size(); i += 2) {
    y[i] += 12.5;
    y[i + 1] -= 3.25;
  }
  auto t = moments(y, 2);
  CHECK(std::abs(t.mean[0] - (m.mean[0] + 12.5)) <= 1e-12);
  CHECK(std::abs(t.mean[1] - (m.mean[1] - 3.25)) <= 1e-12);
  CHECK(std::abs(t.variance - m.variance) <= 1e-12 * m.variance);
}

TEST_CASE("running cost") {
  CostWeights w{0.005, 0.5, 1e-6, 100.0, {-20.0, -20.0}, 10.0};
  const std::vector<double> zero(4, 0.0);
  CHECK(running_cost(w.destination, 100.0, zero, 2, w).total() == 0.0);

  CostWeights w2{0.0, 0.0, 2.0, 0.0, {0.0, 0.0}, 1.0};
  const std::vector<double> u{3.0, 4.0};
  CHECK(running_cost(std::vector<double>{5.0, 5.0}, 7.0, u, 1, w2).total() == 25.0);

  // Hand-evaluated S3 example.
  const std::vector<double> mean{10.0, 4.0};
  const std::vector<double> c{1.0, 2.0, -3.0, 0.5};
  auto parts = running_cost(mean, 130.0, c, 2, w);
  const double v = 0.005 / 4 * 30.0 * 30.0;
  const double e = 0.5 / 2 * (30.0 * 30.0 + 24.0 * 24.0);
  const double u3 = 1e-6 / 4 * (1 + 4 + 9 + 0.25);
  CHECK(parts.variance_term == doctest::Approx(v).epsilon(1e-14));
  CHECK(parts.destination_term == doctest::Approx(e).epsilon(1e-14));
  CHECK(parts.control_term == doctest::Approx(u3).epsilon(1e-14));
}

TEST_CASE("running cost is invariant under agent permutation") {
  CostWeights w{0.005, 0.5, 1e-3, 50.0, {-20.0, -20.0}, 10.0};
  const std::vector<double> mean{1.0, 2.0};
  const std::vector<double> c{1.0, 2.0, -3.0, 0.5, 4.0, 4.0};
  const std::vector<double> p{4.0, 4.0, 1.0, 2.0, -3.0, 0.5};
  CHECK(running_cost(mean, 60.0, c, 3, w).total() == running_cost(mean, 60.0, p, 3, w).total());
}

TEST_CASE("cost weights validation") {
  CostWeights w;
  CHECK_NOTHROW(w.validate());
  w.horizon = 0.0;
  CHECK_THROWS_AS(w.validate(), Error);
  w.horizon = 1.0;
  w.sigma2 = -1.0;
  CHECK_THROWS_AS(w.validate(), Error);
}
