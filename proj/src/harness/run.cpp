#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

#include "json.hpp"

#include "internal.hpp"

namespace shepherd::harness {

using namespace detail;
using json = nlohmann::json;

namespace {

// Forwards to a sliced system and reports every committed slice boundary.
class Recorder final : public optimize::SlicedSystem {
 public:
  Recorder(optimize::SlicedSystem& inner, std::function<void(int)> on_boundary)
      : inner_(inner), on_boundary_(std::move(on_boundary)) {}

  std::unique_ptr<optimize::ReducedProblem> slice_problem(double t0, double length) override {
    return inner_.slice_problem(t0, length);
  }
  void commit(const ControlSchedule& slice_control) override {
    inner_.commit(slice_control);
    boundary_ += slice_control.slices();
    on_boundary_(boundary_);
  }

 private:
  optimize::SlicedSystem& inner_;
  std::function<void(int)> on_boundary_;
  int boundary_ = 0;
};

ControlSchedule slice_schedule(const ControlSchedule& c, int k) {
  const double t0 = c.knots()[k], t1 = c.knots()[k + 1];
  ControlSchedule s({t0, t1}, c.agents(), c.dim(), c.speed_cap());
  const auto v = c.slice(k);
  std::copy(v.begin(), v.end(), s.slice(0).begin());
  return s;
}

// Everything a run needs besides the optimizer.
struct Setup {
  InteractionModel model;
  CostWeights weights;
  ControlSchedule layout;
  ControlSchedule initial;
  MicroState particles;
  meanfield::DensityField density;
  std::vector<double> agents;
  std::shared_ptr<const meanfield::Solver> solver;
};

Setup build(const RunConfig& c) {
  Setup s;
  s.model.crowd = c.crowd_potential;
  s.model.agent = c.agent_potential;
  s.model.friction = c.alpha;
  s.agents = c.initial_agents();
  double variance = 0.0;
  if (c.level == Level::Micro) {
    s.particles = micro::sample_particles(c.particles, c.box_lo, c.box_hi, c.velocity_std, s.agents,
                                          c.seed, c.sampling);
    variance = moments(s.particles.positions, 2).variance;
  } else {
    s.density = meanfield::sample_initial_density(c.grid, c.box_lo, c.box_hi, c.velocity_width);
    variance = s.density.moments().variance;
    s.solver = std::make_shared<meanfield::Solver>(c.grid, s.model);
  }
  s.weights.sigma1 = c.sigma1;
  s.weights.sigma2 = c.sigma2;
  s.weights.sigma3 = c.sigma3;
  s.weights.target_variance = c.variance_factor * variance;
  s.weights.destination = {c.target[0], c.target[1]};
  s.weights.horizon = c.horizon;
  s.layout = ControlSchedule::uniform(0.0, c.horizon, c.slices, c.agents, 2, c.u_max);
  s.initial = s.layout.zeros_like();
  if (c.initial_control == InitialControl::TowardTarget) {
    for (int k = 0; k < c.slices; ++k) {
      for (int m = 0; m < c.agents; ++m) {
        const double dx = c.target[0] - s.agents[2 * m], dy = c.target[1] - s.agents[2 * m + 1];
        const double len = std::hypot(dx, dy);
        if (len == 0.0) continue;
        auto u = s.initial.agent(k, m);
        u[0] = 0.5 * c.u_max * dx / len;
        u[1] = 0.5 * c.u_max * dy / len;
      }
    }
  }
  return s;
}

// One row per time-stepper step of the (final) trajectory.
struct Trace {
  std::vector<double> t;
  std::vector<Moments> crowd;
  std::vector<std::vector<double>> agents;
  std::vector<double> mass;  // mean-field only
  std::size_t steps_per_slice = 1;
  // Slice boundaries
  std::vector<double> boundary_t;
  std::vector<std::vector<double>> boundary_rho;        // mean-field
  std::vector<std::vector<double>> boundary_positions;  // micro
};

struct SnapshotEntry {
  std::string path;
  double time = 0.0;
  int slice = 0;
};

class Run {
 public:
  Run(const RunConfig& c, std::ostream* log) : c_(c), dir_(c.output), log_(log) {}

  RunSummary execute();

 private:
  void say(const std::string& s) {
    if (log_) *log_ << s << '\n';
  }
  void optimize_micro(Setup& s);
  void optimize_meanfield(Setup& s);
  void boundary(int k, double t, const MicroState* p, const meanfield::DensityField* f);
  void write_outputs(const Setup& s);
  void write_manifest(const std::string& status, const std::string& error, double wall);
  std::string add_file(const std::string& rel) {
    files_.push_back(rel);
    return rel;
  }
  template <class State>
  CheckpointStoreFactory<State> disk_factory() {
    if (c_.checkpoint != CheckpointPolicy::Disk) return {};
    return [this] {
      return std::make_shared<DiskCheckpointStore<State>>(dir_ / "checkpoints" /
                                                          ("sweep_" + std::to_string(sweeps_++)));
    };
  }

  const RunConfig& c_;
  fs::path dir_;
  std::ostream* log_;
  optimize::OptimizerReport report_;
  Trace trace_;
  std::vector<SnapshotEntry> snapshots_;
  std::vector<std::string> files_;
  std::vector<std::string> warnings_;
  std::size_t state_bytes_ = 0;
  std::size_t sweeps_ = 0;
  double clipped_mass_ = 0.0;
};

void Run::boundary(int k, double t, const MicroState* p, const meanfield::DensityField* f) {
  trace_.boundary_t.push_back(t);
  if (p) trace_.boundary_positions.push_back(p->positions);
  if (f) trace_.boundary_rho.push_back(f->spatial_density());
  const bool due = c_.snapshot_stride > 0 && (k % c_.snapshot_stride == 0 || k == c_.slices);
  if (!due) return;
  std::ostringstream name;
  name << "snapshots/" << (f ? "density_k" : "particles_k") << std::setw(5) << std::setfill('0') << k
       << (f ? ".bin" : ".csv");
  const std::string rel = add_file(name.str());
  if (f) {
    write_snapshot(dir_ / rel, *f, t);
  } else {
    std::ofstream out = open_output(dir_ / rel);
    csv_row(out, {"x", "y", "vx", "vy"});
    for (std::size_t i = 0; i < p->particle_count(); ++i) {
      csv_row(out, {sci(p->positions[2 * i]), sci(p->positions[2 * i + 1]),
                    sci(p->velocities[2 * i]), sci(p->velocities[2 * i + 1])});
    }
    if (!out) throw Error("writing " + rel + " failed");
  }
  snapshots_.push_back({rel, t, k});
}

void Run::optimize_micro(Setup& s) {
  const std::size_t sps = c_.particle_steps_per_slice();
  micro::SlicedSystem system(s.particles, s.model, s.weights, sps);
  auto on_boundary = [&](int k) { boundary(k, s.layout.knots()[k], &system.state(), nullptr); };
  on_boundary(0);
  if (c_.strategy == Strategy::Instantaneous) {
    Recorder rec(system, on_boundary);
    optimize::IcOptions o;
    o.armijo = {c_.initial_step(), c_.gamma, c_.max_halvings};
    o.next_slice_factor = c_.next_slice_factor;
    report_ = optimize::run_instantaneous_control(rec, s.layout, s.initial.slice(0), o);
  } else {
    if (c_.strategy == Strategy::None) {
      report_.strategy = "none";
      report_.status = "completed";
      report_.control = s.initial;
    } else {
      micro::Problem problem(s.particles, s.model, s.weights, sps, c_.memory_budget_bytes());
      if (auto f = disk_factory<MicroState>()) problem.set_checkpoint_store(f);
      optimize::OcOptions o;
      o.armijo = {c_.initial_step(), c_.gamma, c_.max_halvings};
      o.tol = c_.tol;
      o.tol_cg = c_.tol_cg;
      o.max_iterations = c_.max_iterations;
      report_ = optimize::run_optimal_control(problem, s.initial, o);
    }
    for (int k = 0; k < c_.slices; ++k) {
      system.commit(slice_schedule(report_.control, k));
      on_boundary(k + 1);
    }
  }
  trace_.steps_per_slice = sps;
  for (const auto& smp : system.samples()) {
    trace_.t.push_back(smp.t);
    trace_.crowd.push_back(smp.crowd);
    trace_.agents.push_back(smp.agents);
  }
  state_bytes_ = s.particles.bytes();
}

void Run::optimize_meanfield(Setup& s) {
  const std::size_t sps = c_.grid_steps_per_slice();
  meanfield::SlicedSystem system(s.density, s.agents, s.solver, s.weights, sps);
  auto on_boundary = [&](int k) { boundary(k, s.layout.knots()[k], nullptr, &system.density()); };
  on_boundary(0);
  if (c_.strategy == Strategy::Instantaneous) {
    Recorder rec(system, on_boundary);
    optimize::IcOptions o;
    o.armijo = {c_.initial_step(), c_.gamma, c_.max_halvings};
    o.next_slice_factor = c_.next_slice_factor;
    report_ = optimize::run_instantaneous_control(rec, s.layout, s.initial.slice(0), o);
  } else {
    if (c_.strategy == Strategy::None) {
      report_.strategy = "none";
      report_.status = "completed";
      report_.control = s.initial;
    } else {
      meanfield::Problem problem(s.density, s.agents, s.solver, s.weights, sps,
                                 c_.memory_budget_bytes());
      if (auto f = disk_factory<meanfield::MfState>()) problem.set_checkpoint_store(f);
      optimize::OcOptions o;
      o.armijo = {c_.initial_step(), c_.gamma, c_.max_halvings};
      o.tol = c_.tol;
      o.tol_cg = c_.tol_cg;
      o.max_iterations = c_.max_iterations;
      report_ = optimize::run_optimal_control(problem, s.initial, o);
    }
    for (int k = 0; k < c_.slices; ++k) {
      system.commit(slice_schedule(report_.control, k));
      on_boundary(k + 1);
    }
  }
  trace_.steps_per_slice = sps;
  for (const auto& smp : system.samples()) {
    trace_.t.push_back(smp.t);
    trace_.crowd.push_back(smp.crowd);
    trace_.agents.push_back(smp.agents);
    trace_.mass.push_back(smp.mass);
  }
  clipped_mass_ = system.clipped_mass();
  state_bytes_ = s.density.bytes();
}

std::vector<std::string> agent_columns(int agents, const char* prefix) {
  std::vector<std::string> h;
  for (int m = 1; m <= agents; ++m) {
    h.push_back(std::string(prefix) + std::to_string(m) + "_x");
    h.push_back(std::string(prefix) + std::to_string(m) + "_y");
  }
  return h;
}

// Control active on the step that ends at row n (row 0 uses the first slice).
int row_slice(std::size_t n, std::size_t steps_per_slice) {
  return n == 0 ? 0 : static_cast<int>((n - 1) / steps_per_slice);
}

void Run::write_outputs(const Setup& s) {
  const ControlSchedule& u = report_.control;
  const int M = c_.agents;
  const bool mf = c_.level == Level::MeanField;

  {
    std::ofstream out = open_output(dir_ / add_file("timeseries.csv"));
    std::vector<std::string> h{"t", "J", "J1", "J2", "J3", "E_x", "E_y", "Var"};
    for (auto& a : agent_columns(M, "d")) h.push_back(a);
    for (auto& a : agent_columns(M, "u")) h.push_back(a);
    if (mf) h.push_back("mass");
    csv_row(out, h);
    for (std::size_t n = 0; n < trace_.t.size(); ++n) {
      const auto uk = u.slice(row_slice(n, trace_.steps_per_slice));
      const Moments& mo = trace_.crowd[n];
      const CostParts p = running_cost(mo.mean, mo.variance, uk, M, s.weights);
      std::vector<std::string> r{sci(trace_.t[n]), sci(p.total()), sci(p.variance_term),
                                 sci(p.destination_term), sci(p.control_term), sci(mo.mean[0]),
                                 sci(mo.mean[1]), sci(mo.variance)};
      for (double d : trace_.agents[n]) r.push_back(sci(d));
      for (double v : uk) r.push_back(sci(v));
      if (mf) r.push_back(sci(trace_.mass[n]));
      csv_row(out, r);
    }
    if (!out) throw Error("writing timeseries.csv failed");
  }

  {
    std::ofstream out = open_output(dir_ / add_file("control.csv"));
    std::vector<std::string> h{"slice", "t0", "t1"};
    for (auto& a : agent_columns(M, "u")) h.push_back(a);
    csv_row(out, h);
    for (int k = 0; k < u.slices(); ++k) {
      std::vector<std::string> r{std::to_string(k), sci(u.knots()[k]), sci(u.knots()[k + 1])};
      for (double v : u.slice(k)) r.push_back(sci(v));
      csv_row(out, r);
    }
    if (!out) throw Error("writing control.csv failed");
  }

  const bool oc = c_.strategy == Strategy::Optimal;
  json iterations = json::array();
  {
    std::ofstream out = open_output(dir_ / add_file("report.csv"));
    csv_row(out, {"iteration", "time", "J", "J1", "J2", "J3", "grad_norm", "omega", "rel_change",
                  "halvings", "restarted", "stagnated"});
    auto emit = [&](const optimize::IterationRecord& r) {
      csv_row(out, {std::to_string(r.iteration), sci(r.time), sci(r.cost.total()), sci(r.cost.j1),
                    sci(r.cost.j2), sci(r.cost.j3), sci(r.gradient_norm), sci(r.step),
                    sci(r.relative_change), std::to_string(r.halvings),
                    std::to_string(r.restarted ? 1 : 0), std::to_string(r.stagnated ? 1 : 0)});
      iterations.push_back({{"iteration", r.iteration},
                            {"time", r.time},
                            {"J", r.cost.total()},
                            {"J1", r.cost.j1},
                            {"J2", r.cost.j2},
                            {"J3", r.cost.j3},
                            {"grad_norm", r.gradient_norm},
                            {"omega", r.step},
                            {"rel_change", r.relative_change},
                            {"halvings", r.halvings},
                            {"restarted", r.restarted},
                            {"stagnated", r.stagnated}});
    };
    if (oc) {
      optimize::IterationRecord first;
      first.cost = report_.initial_cost;
      emit(first);
    }
    for (const auto& r : report_.iterations) emit(r);
    if (!out) throw Error("writing report.csv failed");
  }
  {
    json j{{"strategy", report_.strategy},
           {"status", report_.status},
           {"stagnant_iterations", report_.stagnant_iterations},
           {"optimizer_seconds", report_.wall_seconds},
           {"peak_memory_bytes", report_.peak_memory_bytes},
           {"iterations", iterations}};
    std::ofstream out = open_output(dir_ / add_file("report.json"));
    out << j.dump(2) << '\n';
    if (!out) throw Error("writing report.json failed");
  }
}

void Run::write_manifest(const std::string& status, const std::string& error, double wall) {
  const std::string config = resolved_config(c_);
  json files = json::array();
  for (const auto& rel : files_) {
    const fs::path p = dir_ / rel;
    if (!fs::exists(p)) continue;
    files.push_back({{"path", rel}, {"bytes", fs::file_size(p)}, {"sha256", sha256_file(p)}});
  }
  json snaps = json::array();
  for (const auto& s : snapshots_) snaps.push_back({{"path", s.path}, {"time", s.time}, {"slice", s.slice}});
  const std::size_t peak = report_.peak_memory_bytes;
  json m{{"level", c_.level == Level::Micro ? "micro" : "meanfield"},
         {"strategy", strategy_name(c_.strategy)},
         {"scenario", c_.scenario},
         {"seed", c_.seed},
         {"config_sha256", sha256_hex(config)},
         {"status", status},
         {"exit_code", status == "ok" ? 0 : 1},
         {"error", error},
         {"optimizer_status", report_.status},
         {"iterations", report_.iterations.size()},
         {"wall_seconds", wall},
         {"peak_memory_bytes", peak},
         {"peak_memory_gb", static_cast<double>(peak) / 1e9},
         {"state_bytes", state_bytes_},
         {"memory_budget_bytes", c_.memory_budget_bytes()},
         {"checkpoint", c_.checkpoint == CheckpointPolicy::Disk ? "disk" : "memory"},
         {"snapshots", snaps},
         {"warnings", warnings_},
         {"files", files}};
  if (c_.level == Level::MeanField) m["clipped_mass"] = clipped_mass_;
  std::ofstream out = open_output(dir_ / "manifest.json");
  out << m.dump(2) << '\n';
}

RunSummary Run::execute() {
  const auto start = std::chrono::steady_clock::now();
  RunSummary summary;
  summary.directory = dir_;
  std::string status = "ok", error;
  std::error_code ec;
  fs::create_directories(dir_, ec);
  if (ec) throw Error("cannot create output directory " + dir_.string() + ": " + ec.message());
  try {
    {
      std::ofstream out = open_output(dir_ / add_file("config.ini"));
      out << resolved_config(c_);
    }
    say("running " + std::string(c_.level == Level::Micro ? "micro" : "meanfield") + " " +
        strategy_name(c_.strategy) + " into " + dir_.string());
    Setup s = build(c_);
    if (c_.level == Level::Micro) optimize_micro(s);
    else optimize_meanfield(s);
    write_outputs(s);

    metrics::RunSeries series;
    series.label = c_.level == Level::Micro ? std::to_string(c_.particles) : "M" + std::to_string(c_.grid.nx);
    series.control = report_.control;
    series.times = trace_.t;
    for (std::size_t n = 0; n < trace_.t.size(); ++n) {
      const Moments& mo = trace_.crowd[n];
      series.cost.push_back(running_cost(mo.mean, mo.variance,
                                         report_.control.slice(row_slice(n, trace_.steps_per_slice)),
                                         c_.agents, s.weights)
                                .total());
    }
    if (c_.level == Level::Micro) {
      series.particles = metrics::ParticleSeries{trace_.boundary_t, trace_.boundary_positions};
    } else {
      series.density = metrics::DensitySeries{c_.grid, trace_.boundary_t, trace_.boundary_rho};
    }
    summary.series = std::move(series);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    status = "failed";
    error = e.what();
    say("run failed: " + error);
  }
  fs::remove_all(dir_ / "checkpoints", ec);
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  write_manifest(status, error, wall);
  summary.exit_code = status == "ok" ? 0 : 1;
  summary.status = status;
  summary.error = error;
  summary.report = std::move(report_);
  summary.files = files_;
  return summary;
}

}  // namespace

RunSummary run_experiment(const RunConfig& config, std::ostream* log) {
  config.validate();
  Run run(config, log);
  return run.execute();
}

metrics::StudyTable run_study(const RunConfig& config, const StudyOptions& options,
                              std::ostream* log) {
  using metrics::StudyCell;
  const fs::path root = config.output;
  const StudyCell reference{StudyCell::Kind::MeanField, options.reference_grid};
  std::vector<StudyCell> cells{reference};
  for (int g : options.grids)
    if (!(StudyCell{StudyCell::Kind::MeanField, g} == reference)) cells.push_back({StudyCell::Kind::MeanField, g});
  for (int n : options.particle_counts) cells.push_back({StudyCell::Kind::Micro, n});

  auto cell_config = [&](const StudyCell& cell) {
    RunConfig c = config;
    c.output = (root / cell.label()).string();
    if (cell.kind == StudyCell::Kind::MeanField) {
      c.level = Level::MeanField;
      c.grid.nx = c.grid.nv = cell.size;
      c.grid_steps = 0;
    } else {
      c.level = Level::Micro;
      c.particles = static_cast<std::size_t>(cell.size);
    }
    c.validate();
    return c;
  };

  std::map<std::string, RunSummary> results;
  std::mutex mu;
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      RunSummary r;
      try {
        r = run_experiment(cell_config(cells[i]), nullptr);
      } catch (const std::exception& e) {
        r.exit_code = 1;
        r.status = "failed";
        r.error = e.what();
      }
      std::lock_guard lock(mu);
      if (log) *log << "study cell " << cells[i].label() << ": " << r.status << '\n';
      results[cells[i].label()] = std::move(r);
    }
  };
  const int threads = std::max(1, std::min<int>(options.threads, static_cast<int>(cells.size())));
  std::vector<std::thread> pool;
  for (int t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  auto run = [&](const StudyCell& cell) -> metrics::RunSeries {
    const RunSummary& r = results.at(cell.label());
    if (r.exit_code != 0 || !r.series) throw Error(cell.label() + ": " + r.error);
    return *r.series;
  };
  metrics::StudyTable table =
      metrics::convergence_study(options.grids, options.particle_counts, reference, run, 5.0);

  {
    std::ofstream out = open_output(root / "study.csv");
    metrics::write_study_csv(table, out);
    if (!out) throw Error("writing study.csv failed");
  }
  json cells_json = json::array();
  for (std::size_t i = 0; i < table.cells.size(); ++i) {
    cells_json.push_back({{"cell", table.cells[i].label()},
                          {"status", table.errors[i].empty() ? "ok" : "failed"},
                          {"error", table.errors[i]}});
  }
  json m{{"reference", reference.label()},
         {"cells", cells_json},
         {"files", json::array({{{"path", "study.csv"},
                                 {"bytes", fs::file_size(root / "study.csv")},
                                 {"sha256", sha256_file(root / "study.csv")}}})}};
  std::ofstream out = open_output(root / "manifest.json");
  out << m.dump(2) << '\n';
  return table;
}

}  // namespace shepherd::harness
