// Acceptance checks. Prints one PASS/FAIL line per criterion; the exit code is
// the number of failures. Usage: acceptance [--work DIR] [criterion ...]

#include <array>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include "oracles.hpp"
#include "shepherd/harness.hpp"

using namespace shepherd;
namespace fs = std::filesystem;

namespace {

// Tolerances and runtime limits, fixed here and nowhere else.
constexpr double kMicroGradTol = 1e-4;
constexpr double kMicroGradSeconds = 10;
constexpr double kMfGradTol = 5e-3;
constexpr double kMfGradSeconds = 300;
constexpr double kRk4Order = 3.5;
constexpr double kStrangOrder = 1.8;
constexpr double kOrderSeconds = 120;
constexpr double kMassDrift = 1e-3;
constexpr double kMomentumDrift = 1e-8;
constexpr double kOcSeconds = 300;
constexpr double kIcReduction = 0.05;
constexpr double kIcSeconds = 120;
constexpr double kMomentTol = 0.05;
constexpr double kMomentSeconds = 900;
constexpr double kStudySeconds = 1800;
constexpr double kUnitSeconds = 10;
constexpr double kCheckpointTol = 1e-12;

struct Outcome {
  bool pass = false;
  std::string detail;
};

fs::path g_work = "acceptance_work";

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(4);
  s << v;
  return s.str();
}

const std::vector<double> kBoxLo{-10.0, -20.0}, kBoxHi{55.0, 55.0};

std::vector<double> ring(int m, double cx, double cy, double radius) {
  std::vector<double> d;
  for (int k = 0; k < m; ++k) {
    const double th = M_PI / 4 + 2 * M_PI * k / m;
    d.push_back(cx + radius * std::cos(th));
    d.push_back(cy + radius * std::sin(th));
  }
  return d;
}

CostWeights s3(double variance, double horizon) {
  CostWeights w{0.005, 0.5, 1e-6, 0.0, {-20.0, -20.0}, horizon};
  w.target_variance = 0.9 * variance;
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
  auto h = like.zeros_like();
  std::mt19937 rng(seed);
  std::normal_distribution<double> g;
  for (double& x : h.values()) x = g(rng);
  const double n = l2_norm(h);
  for (double& x : h.values()) x /= n;
  return h;
}

// Column of a numeric CSV with a header line.
std::vector<double> csv_column(const fs::path& path, const std::string& name) {
  std::ifstream in(path);
  std::string line;
  if (!std::getline(in, line)) throw Error("empty " + path.string());
  int col = -1, i = 0;
  std::stringstream hs(line);
  for (std::string h; std::getline(hs, h, ','); ++i)
    if (h == name) col = i;
  if (col < 0) throw Error(name + " missing in " + path.string());
  std::vector<double> out;
  while (std::getline(in, line)) {
    std::stringstream rs(line);
    std::string cell;
    for (int k = 0; k <= col; ++k) std::getline(rs, cell, ',');
    out.push_back(std::stod(cell));
  }
  return out;
}

harness::RunConfig config(std::vector<std::string> overrides, const std::string& dir) {
  overrides.push_back("run.output=" + (g_work / dir).string());
  return harness::parse_config("", overrides);
}

// 1. Micro gradient against central differences.
Outcome micro_gradient() {
  // Tight crowd next to its agents so the derivatives sit far above the
  // round-off floor of the difference quotient.
  const auto agents = ring(2, 22.5, 17.5, 15);
  const std::vector<double> lo{12.5, 7.5}, hi{32.5, 27.5};
  const MicroState s = micro::sample_particles(10, lo, hi, 0.0, agents, 21);
  const double T = 1.0;
  const auto w = s3(moments(s.positions, 2).variance, T);
  const auto c = random_control(T, 10, 2, 22);
  micro::Problem p(s, InteractionModel{}, w, 10);  // 100 steps
  const auto g = p.gradient(c, nullptr);
  double worst = 0;
  for (unsigned k = 0; k < 10; ++k) {
    const auto h = random_direction(c, 100 + k);
    auto cost = [&](double eps) {
      auto trial = c;
      axpy(eps, h, trial);
      return p.evaluate(trial).total();
    };
    worst = std::max(worst, oracle::rel_err(inner(g, h), oracle::directional_fd(cost, 1e-5)));
  }
  return {worst <= kMicroGradTol, "max rel err " + fmt(worst)};
}

// 2. Mean-field gradient against central differences.
Outcome meanfield_gradient() {
  const meanfield::PhaseGrid g{16, 16, 100.0, 5.0};
  auto solver = std::make_shared<meanfield::Solver>(g, InteractionModel{});
  const auto f0 = meanfield::sample_initial_density(g, kBoxLo, kBoxHi);
  const double T = 0.5;
  const auto w = s3(f0.moments().variance, T);
  const auto u = random_control(T, 5, 2, 17);
  meanfield::Problem p(f0, ring(2, 22.5, 17.5, 60), solver, w,
                       meanfield::steps_per_slice_for(g, T / 5));
  const auto grad = p.gradient(u, nullptr);
  double worst = 0;
  for (unsigned k = 0; k < 5; ++k) {
    const auto e = random_direction(u, 300 + k);
    auto cost = [&](double eps) {
      auto trial = u;
      axpy(eps, e, trial);
      return p.evaluate(trial).total();
    };
    worst = std::max(worst, oracle::rel_err(inner(grad, e), oracle::directional_fd(cost, 1e-4)));
  }
  return {worst <= kMfGradTol, "max rel err " + fmt(worst)};
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// 3. Observed orders of RK4 and of the Strang splitting.
Outcome orders() {
  MicroState s = micro::sample_particles(4, kBoxLo, kBoxHi, 0.0, ring(2, 22.5, 17.5, 60), 17);
  for (double& x : s.positions) x *= 0.2;
  s.agents = {-15.0, 0.0, 20.0, 10.0};
  const auto c = random_control(0.5, 1, 2, 5);
  const InteractionModel m;
  auto terminal = [&](std::size_t steps) {
    auto rec = micro::integrate_forward(s, c, m, steps);
    const auto& y = rec.states.at(steps);
    std::vector<double> out = y.positions;
    out.insert(out.end(), y.velocities.begin(), y.velocities.end());
    return out;
  };
  const auto ref = terminal(160);
  const double rk4 =
      oracle::order(max_abs_diff(terminal(8), ref), max_abs_diff(terminal(16), ref));

  // Linear scheme without friction: the sub-steps move the low moments
  // exactly, so self-convergence of E and V isolates the splitting error.
  const meanfield::PhaseGrid g{32, 32, 100.0, 8.0};
  meanfield::SchemeOptions opt;
  opt.limiter = meanfield::Limiter::None;
  opt.clip = false;
  InteractionModel model;
  model.friction = 0.0;
  meanfield::Solver solver(g, model, opt);
  meanfield::DensityField f0(g);
  for (int i = 0; i < g.nx; ++i)
    for (int j = 0; j < g.nx; ++j)
      for (int a = 0; a < g.nv; ++a)
        for (int b = 0; b < g.nv; ++b) {
          const double x = g.x(i) / 20, y = (g.x(j) - 10) / 20;
          const double u = (g.v(a) - 0.3) / 1.5, w = (g.v(b) + 0.2) / 1.5;
          f0.values[g.index(i, j, a, b)] = std::exp(-0.5 * (x * x + y * y + u * u + w * w));
        }
  const double mass = f0.mass();
  for (double& x : f0.values) x /= mass;
  const std::vector<double> d0{40.0, -30.0}, u{-2.0, 1.5};
  auto run = [&](int steps) {
    auto st = solver.make_state(f0, d0);
    for (int n = 0; n < steps; ++n) st = solver.step(st, u, 1.0 / steps, nullptr);
    const auto mo = st.f.moments();
    return std::vector<double>{mo.mean[0], mo.mean[1], mo.variance};
  };
  const auto a = run(4), b = run(8), cc = run(16);
  double strang = INFINITY;
  for (int k = 0; k < 3; ++k)
    strang = std::min(strang, oracle::order(std::abs(a[k] - b[k]), std::abs(b[k] - cc[k])));
  return {rk4 >= kRk4Order && strang >= kStrangOrder,
          "RK4 " + fmt(rk4) + ", Strang " + fmt(strang)};
}

// 4. Mass and momentum conservation.
Outcome conservation() {
  const meanfield::PhaseGrid g{25, 25, 100.0, 5.0};
  meanfield::Solver solver(g, InteractionModel{});
  auto st = solver.make_state(meanfield::sample_initial_density(g, kBoxLo, kBoxHi),
                              ring(2, 22.5, 17.5, 60));
  // Agents heading for the target at half the speed cap.
  std::vector<double> u;
  for (int m = 0; m < 2; ++m) {
    const double dx = -20.0 - st.agents[2 * m], dy = -20.0 - st.agents[2 * m + 1];
    const double n = std::hypot(dx, dy);
    u.push_back(5.0 * dx / n);
    u.push_back(5.0 * dy / n);
  }
  const double T = 10.0;
  const std::size_t steps = 10 * meanfield::steps_per_slice_for(g, 1.0);
  const double m0 = st.f.mass();
  for (std::size_t n = 0; n < steps; ++n) st = solver.step(st, u, T / steps, nullptr);
  const double mass_drift = std::abs(st.f.mass() - m0);

  MicroState s = micro::sample_particles(200, kBoxLo, kBoxHi, 1.0, ring(1, 22.5, 17.5, 60), 8);
  const InteractionModel free{PotentialParams::crowd(), PotentialParams::zero(), 0.0};
  const auto c = ControlSchedule::uniform(0.0, 1.0, 1, 1, 2, 10.0);
  auto rec = micro::integrate_forward(s, c, free, 100);
  const auto& end = rec.states.at(100);
  double p0[2] = {0, 0}, p1[2] = {0, 0}, scale = 0;
  for (std::size_t i = 0; i < 200; ++i)
    for (int k = 0; k < 2; ++k) {
      p0[k] += s.velocities[2 * i + k];
      p1[k] += end.velocities[2 * i + k];
      scale += std::abs(s.velocities[2 * i + k]);
    }
  const double momentum_drift = std::hypot(p1[0] - p0[0], p1[1] - p0[1]) / scale;
  return {mass_drift <= kMassDrift && momentum_drift <= kMomentumDrift,
          "mass drift " + fmt(mass_drift) + " over " + std::to_string(steps) +
              " steps, momentum drift " + fmt(momentum_drift)};
}

// 5. Optimal control on the micro level.
Outcome optimal_control() {
  const auto c = config({"run.strategy=OC", "crowd.particles=200", "run.snapshot_stride=0"}, "oc");
  const auto r = harness::run_experiment(c);
  if (r.exit_code != 0) return {false, "run failed: " + r.error};
  const auto& its = r.report.iterations;
  if (its.empty()) return {false, "no iterations"};
  double prev = r.report.initial_cost.total();
  bool monotone = true;
  int best = 0;
  double best_drop = -INFINITY;
  for (std::size_t i = 0; i < its.size(); ++i) {
    const double drop = prev - its[i].cost.total();
    monotone = monotone && drop >= 0;
    if (drop > best_drop) best_drop = drop, best = static_cast<int>(i) + 1;
    prev = its[i].cost.total();
  }
  return {monotone && best == 1,
          std::to_string(its.size()) + " iterations, " + fmt(r.report.initial_cost.total()) +
              " -> " + fmt(prev) + ", largest drop at iteration " + std::to_string(best) +
              ", status " + r.report.status};
}

// 6. Instantaneous control beats the zero-control baseline.
Outcome instantaneous_control() {
  const std::vector<std::string> base{"crowd.particles=200", "time.slices=5",
                                      "optimizer.initial_control=zero", "run.snapshot_stride=0"};
  auto with = [&](const char* strategy) {
    auto o = base;
    o.push_back(std::string("run.strategy=") + strategy);
    return o;
  };
  const auto ic = harness::run_experiment(config(with("IC"), "ic"));
  const auto none = harness::run_experiment(config(with("none"), "ic_baseline"));
  if (ic.exit_code != 0 || none.exit_code != 0) return {false, ic.error + none.error};
  const double j_ic = csv_column(ic.directory / "timeseries.csv", "J2").back();
  const double j_base = csv_column(none.directory / "timeseries.csv", "J2").back();
  const double reduction = 1.0 - j_ic / j_base;
  return {reduction >= kIcReduction, "final J2 " + fmt(j_ic) + " vs baseline " + fmt(j_base) +
                                         " (" + fmt(100 * reduction) + "% lower)"};
}

// 7. Large crowd against the mean-field density under the same control.
Outcome micro_vs_meanfield() {
  const std::vector<std::string> base{"run.strategy=none", "time.T=2", "time.slices=10",
                                      "time.steps=200", "crowd.velocity_std=0.5",
                                      "crowd.velocity_width=0.5", "grid.nx=50", "grid.nv=50",
                                      "run.snapshot_stride=0"};
  auto with = [&](const char* level, const char* extra) {
    auto o = base;
    o.push_back(std::string("run.level=") + level);
    o.push_back(extra);
    return o;
  };
  const auto mic = harness::run_experiment(config(with("micro", "crowd.particles=4000"), "n4000"));
  const auto mf = harness::run_experiment(config(with("meanfield", "grid.steps=0"), "m50"));
  if (mic.exit_code != 0 || mf.exit_code != 0) return {false, mic.error + mf.error};
  auto load = [](const fs::path& d) {
    return std::array<std::vector<double>, 4>{
        csv_column(d / "timeseries.csv", "t"), csv_column(d / "timeseries.csv", "E_x"),
        csv_column(d / "timeseries.csv", "E_y"), csv_column(d / "timeseries.csv", "Var")};
  };
  const auto a = load(mic.directory), b = load(mf.directory);
  // Mean-field times are a subset of the finer particle grid; interpolate anyway.
  auto at = [](const std::vector<double>& t, const std::vector<double>& y, double s) {
    std::size_t k = 1;
    while (k + 1 < t.size() && t[k] < s) ++k;
    const double th = (s - t[k - 1]) / (t[k] - t[k - 1]);
    return (1 - th) * y[k - 1] + th * y[k];
  };
  double worst_e = 0, worst_v = 0;
  for (std::size_t i = 0; i < b[0].size(); ++i) {
    const double s = b[0][i];
    const double ex = at(a[0], a[1], s) - b[1][i], ey = at(a[0], a[2], s) - b[2][i];
    worst_e = std::max(worst_e, std::hypot(ex, ey) / std::hypot(b[1][i], b[2][i]));
    worst_v = std::max(worst_v, std::abs(at(a[0], a[3], s) - b[3][i]) / b[3][i]);
  }
  return {worst_e <= kMomentTol && worst_v <= kMomentTol,
          "max rel diff E " + fmt(worst_e) + ", V " + fmt(worst_v)};
}

// 8. Convergence trends of instantaneous control against a fine mean-field run.
Outcome convergence_trends() {
  const auto c = config({"time.T=2", "time.slices=5", "time.steps=200",
                         "optimizer.initial_control=zero", "run.snapshot_stride=0"},
                        "study");
  harness::StudyOptions opt;
  const auto table = harness::run_study(c, opt);
  std::map<std::string, metrics::ComparisonReport> by;
  for (std::size_t i = 0; i < table.cells.size(); ++i) {
    if (!table.errors[i].empty()) return {false, table.cells[i].label() + ": " + table.errors[i]};
    by[table.cells[i].label()] = *table.reports[i];
  }
  const auto &n250 = by.at("250"), &n500 = by.at("500"), &n1000 = by.at("1000");
  const auto &m25 = by.at("M25"), &m50 = by.at("M50");
  const bool particles = n500.norm_J <= n250.norm_J && n1000.norm_J <= n500.norm_J &&
                         *n500.norm_rho <= *n250.norm_rho && *n1000.norm_rho <= *n500.norm_rho;
  const bool grids = m50.norm_J <= m25.norm_J && m50.norm_u <= m25.norm_u;
  std::ostringstream d;
  d << "norm_J 250/500/1000 " << fmt(n250.norm_J) << "/" << fmt(n500.norm_J) << "/"
    << fmt(n1000.norm_J) << ", norm_rho " << fmt(*n250.norm_rho) << "/" << fmt(*n500.norm_rho)
    << "/" << fmt(*n1000.norm_rho) << ", grids 25/50 norm_J " << fmt(m25.norm_J) << "/"
    << fmt(m50.norm_J) << " norm_u " << fmt(m25.norm_u) << "/" << fmt(m50.norm_u);
  return {particles && grids, d.str()};
}

// 9. Exact checks of the optimizer building blocks.
class Quadratic : public optimize::ReducedProblem {
 public:
  explicit Quadratic(ControlSchedule target) : target_(std::move(target)) {}
  optimize::CostBreakdown evaluate(const ControlSchedule& c) override {
    auto d = c;
    axpy(-1.0, target_, d);
    return {0.5 * inner(d, d), 0.0, 0.0};
  }
  ControlSchedule gradient(const ControlSchedule& c, optimize::CostBreakdown* cost) override {
    if (cost) *cost = evaluate(c);
    auto d = c;
    axpy(-1.0, target_, d);
    return d;
  }

 private:
  ControlSchedule target_;
};

ControlSchedule one_slice(std::vector<double> v) {
  auto c = ControlSchedule::uniform(0.0, 1.0, 1, 1, static_cast<int>(v.size()), 10.0);
  c.values() = std::move(v);
  return c;
}

// Independent quadratic per slice; logs the guess each slice starts from.
class Slices : public optimize::SlicedSystem {
 public:
  std::unique_ptr<optimize::ReducedProblem> slice_problem(double t0, double length) override {
    auto t = ControlSchedule::uniform(t0, length, 1, 1, 2, 10.0);
    t.values() = {3.0 + t0, -1.0};
    return std::make_unique<Logged>(t, guesses);
  }
  void commit(const ControlSchedule& c) override { accepted.push_back(c.values()); }
  std::vector<std::vector<double>> guesses, accepted;

 private:
  struct Logged : Quadratic {
    Logged(ControlSchedule t, std::vector<std::vector<double>>& log) : Quadratic(t), log(log) {}
    ControlSchedule gradient(const ControlSchedule& c, optimize::CostBreakdown* cost) override {
      log.push_back(c.values());
      return Quadratic::gradient(c, cost);
    }
    std::vector<std::vector<double>>& log;
  };
};

Outcome unit_checks() {
  using namespace optimize;
  std::vector<std::string> failed;
  auto check = [&](bool ok, const char* what) {
    if (!ok) failed.emplace_back(what);
  };

  const auto p = project_control(one_slice({30.0, 40.0}));
  check(std::abs(p.values()[0] - 6.0) <= 1e-15 && std::abs(p.values()[1] - 8.0) <= 1e-15,
        "projection");
  check(project_control(one_slice({3.0, 4.0})).values() == std::vector<double>{3.0, 4.0},
        "projection of a feasible control");

  const auto sd = ncg_direction(one_slice({1.0, -2.0}), nullptr, nullptr, 1e-10);
  check(sd.direction.values() == std::vector<double>{-1.0, 2.0} && !sd.restarted, "ncg first");
  const auto qp = one_slice({1.0, 0.0}), q = one_slice({0.0, 1.0}), sp = one_slice({-1.0, 0.0});
  const auto hs = ncg_direction(q, &qp, &sp, 1e-10);
  check(hs.beta == 1.0 && hs.direction.values() == std::vector<double>{1.0, -1.0} &&
            !hs.restarted,
        "ncg update");
  const auto same = one_slice({0.5, 1.0});
  const auto flat = ncg_direction(same, &same, &sp, 1e-10);
  check(flat.restarted && flat.direction.values() == std::vector<double>{-0.5, -1.0},
        "ncg zero-curvature restart");
  const auto q2p = one_slice({0.0, 1.0}), s2p = one_slice({1.0, 2.0});
  const auto up = ncg_direction(qp, &q2p, &s2p, 1e-10);
  check(up.restarted && up.direction.values() == std::vector<double>{-1.0, 0.0},
        "ncg non-descent restart");

  // Sufficient decrease J(new) <= J - gamma omega |q|^2, with halving from omega0.
  Quadratic quad(one_slice({3.0, 0.0}));
  const auto c0 = one_slice({0.0, 0.0});
  CostBreakdown cost;
  const auto g = quad.gradient(c0, &cost);
  auto dir = g.zeros_like();
  axpy(-1.0, g, dir);
  const auto a = armijo_search(quad, c0, cost, g, dir, ArmijoOptions{1000.0, 1e-4, 30});
  const double gg = inner(g, g);
  auto bigger = c0;
  axpy(2 * a.step, dir, bigger);
  check(!a.stagnated && a.halvings > 0 && a.step == 1000.0 / std::pow(2.0, a.halvings) &&
            a.cost.total() <= cost.total() - 1e-4 * a.step * gg &&
            quad.evaluate(project_control(bigger)).total() >
                cost.total() - 1e-4 * 2 * a.step * gg,
        "armijo");

  // Stopping: converged exactly when the relative change falls below 0.05.
  auto target = ControlSchedule::uniform(0.0, 2.0, 4, 2, 2, 10.0);
  auto start = target.zeros_like();
  for (std::size_t i = 0; i < target.values().size(); ++i) {
    target.values()[i] = 0.5 * std::sin(1.0 + i);
    start.values()[i] = 2.0 * std::cos(2.0 + i);
  }
  Quadratic oc(target);
  OcOptions oopt;
  oopt.armijo.initial_step = 0.4;
  const auto rep = run_optimal_control(oc, start, oopt);
  bool stop = rep.status == "converged" && rep.iterations.back().relative_change <= 0.05;
  for (std::size_t i = 0; i + 1 < rep.iterations.size(); ++i)
    stop = stop && rep.iterations[i].relative_change > 0.05;
  check(stop && rep.iterations.size() > 1, "stopping tolerance");

  // Instantaneous control warm-starts each slice with 0.1 times the last one.
  Slices sys;
  IcOptions iopt;
  iopt.armijo.initial_step = 0.5;
  const auto layout = ControlSchedule::uniform(0.0, 3.0, 3, 1, 2, 10.0);
  const std::vector<double> first{1.0, 1.0};
  run_instantaneous_control(sys, layout, first, iopt);
  bool warm = sys.guesses.size() == 3 && sys.guesses[0] == first;
  for (std::size_t k = 1; k < sys.guesses.size() && warm; ++k)
    for (std::size_t i = 0; i < 2; ++i)
      warm = warm && sys.guesses[k][i] == 0.1 * sys.accepted[k - 1][i];
  check(warm, "IC warm start factor");

  std::string d = failed.empty() ? "all exact checks hold" : "failed:";
  for (const auto& f : failed) d += " " + f;
  return {failed.empty(), d};
}

// 10. Checkpointed and disk-backed adjoints against the in-memory sweep.
Outcome checkpointing() {
  const MicroState s = micro::sample_particles(8, kBoxLo, kBoxHi, 0.0, ring(2, 22.5, 17.5, 60), 41);
  const auto c = random_control(1.0, 10, 2, 42);
  const auto w = s3(moments(s.positions, 2).variance, 1.0);
  const InteractionModel m;
  // Room for roughly a quarter of the record plus the sweep's working set.
  const std::size_t micro_budget = 38 * s.bytes();
  micro::Problem full(s, m, w, 10), tight(s, m, w, 10, micro_budget), disk(s, m, w, 10, micro_budget);
  const fs::path store_dir = g_work / "checkpoints";
  disk.set_checkpoint_store([&] {
    return std::make_shared<harness::DiskCheckpointStore<MicroState>>(store_dir / "micro");
  });
  const auto ga = full.gradient(c, nullptr), gb = tight.gradient(c, nullptr),
             gc = disk.gradient(c, nullptr);
  double worst = std::max(max_abs_diff(ga.values(), gb.values()), max_abs_diff(ga.values(), gc.values()));
  bool within = tight.peak_memory_bytes() <= micro_budget && disk.peak_memory_bytes() <= micro_budget &&
                tight.last_record()->states.stride() > 1;

  const meanfield::PhaseGrid g{10, 8, 100.0, 5.0};
  auto solver = std::make_shared<meanfield::Solver>(g, InteractionModel{});
  const auto f0 = meanfield::sample_initial_density(g, kBoxLo, kBoxHi);
  const auto wm = s3(f0.moments().variance, 2.0);
  const auto u = random_control(2.0, 5, 2, 4);
  const std::size_t mf_budget = 15 * f0.bytes();
  meanfield::Problem mfull(f0, ring(2, 22.5, 17.5, 60), solver, wm, 4);
  meanfield::Problem mtight(f0, ring(2, 22.5, 17.5, 60), solver, wm, 4, mf_budget);
  const auto ha = mfull.gradient(u, nullptr), hb = mtight.gradient(u, nullptr);
  for (std::size_t i = 0; i < ha.values().size(); ++i)
    worst = std::max(worst, std::abs(ha.values()[i] - hb.values()[i]) / std::abs(ha.values()[i]));
  within = within && mtight.peak_memory_bytes() <= mf_budget &&
           mtight.last_record()->states.stride() > 1;
  return {worst <= kCheckpointTol && within,
          "max diff " + fmt(worst) + ", peaks " + std::to_string(tight.peak_memory_bytes()) + "/" +
              std::to_string(disk.peak_memory_bytes()) + " <= " + std::to_string(micro_budget) +
              ", " + std::to_string(mtight.peak_memory_bytes()) + " <= " +
              std::to_string(mf_budget)};
}

struct Criterion {
  int id;
  const char* name;
  double seconds;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--work" && i + 1 < argc) {
      g_work = argv[++i];
    } else {
      only.insert(std::stoi(a));
    }
  }
  const std::vector<Criterion> all{
      {1, "micro gradient vs finite differences", kMicroGradSeconds, micro_gradient},
      {2, "mean-field gradient vs finite differences", kMfGradSeconds, meanfield_gradient},
      {3, "RK4 and Strang orders", kOrderSeconds, orders},
      {4, "mass and momentum conservation", INFINITY, conservation},
      {5, "optimal control descent", kOcSeconds, optimal_control},
      {6, "instantaneous control vs zero control", kIcSeconds, instantaneous_control},
      {7, "N=4000 particles vs grid 50", kMomentSeconds, micro_vs_meanfield},
      {8, "convergence trends", kStudySeconds, convergence_trends},
      {9, "exact optimizer checks", kUnitSeconds, unit_checks},
      {10, "checkpointed adjoint", INFINITY, checkpointing},
  };
  int failures = 0;
  for (const auto& c : all) {
    if (!only.empty() && !only.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = secs <= c.seconds;
    const bool pass = o.pass && in_time;
    failures += pass ? 0 : 1;
    std::cout << "criterion " << c.id << ": " << (pass ? "PASS" : "FAIL") << "  " << c.name
              << "  (" << o.detail << "; " << fmt(secs) << " s"
              << (std::isfinite(c.seconds) ? " of " + fmt(c.seconds) : std::string()) << ")"
              << std::endl;
  }
  return failures;
}
