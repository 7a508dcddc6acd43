#pragma once

// Experiment plumbing: configuration with scenario presets, one-call runs that
// write CSV/JSON/snapshot artifacts plus a hashed manifest, disk checkpoint
// stores, convergence studies and plot-data bundles.

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "shepherd/checkpoint.hpp"
#include "shepherd/meanfield.hpp"
#include "shepherd/metrics.hpp"
#include "shepherd/micro.hpp"
#include "shepherd/optimize.hpp"

namespace shepherd::harness {

namespace fs = std::filesystem;

/// Bad configuration input; the CLI maps it to exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

enum class Level { Micro, MeanField };
/// None replays the initial control without optimising (baselines).
enum class Strategy { Instantaneous, Optimal, None };
enum class InitialControl { TowardTarget, Zero };
enum class CheckpointPolicy { Memory, Disk };

std::string strategy_name(Strategy s);  // "IC", "OC" or "none"

struct Scenario {
  std::string name;
  double sigma1 = 0.0;
  double sigma2 = 0.0;
};

/// S1, S2 or S3. Throws ConfigError for anything else.
Scenario scenario_preset(std::string_view name);

struct RunConfig {
  // [run]
  Level level = Level::Micro;
  Strategy strategy = Strategy::Instantaneous;
  std::string scenario = "S3";  // S1, S2, S3 or custom
  std::uint64_t seed = 1;
  std::string output = "runs/default";
  int snapshot_stride = 10;  // slices between snapshots, 0 disables them

  // [time]
  double horizon = 10.0;
  int slices = 100;
  int steps = 1000;  // particle RK4 steps over the horizon

  // [crowd]
  std::size_t particles = 200;
  std::array<double, 2> box_lo{-10.0, -20.0};
  std::array<double, 2> box_hi{55.0, 55.0};
  double velocity_std = 0.0;    // initial particle velocities
  double velocity_width = 0.5;  // initial velocity bump of the density
  micro::Sampling sampling = micro::Sampling::Random;
  PotentialParams crowd_potential = PotentialParams::crowd();
  double alpha = 1.0;
  int dim = 2;

  // [agents]
  int agents = 2;
  std::vector<double> agent_positions;  // empty: ring around the box
  double ring_radius = 60.0;
  PotentialParams agent_potential = PotentialParams::agent();
  double u_max = 10.0;

  // [cost]
  double sigma1 = 0.005;
  double sigma2 = 0.5;
  double sigma3 = 1e-6;
  double variance_factor = 0.9;
  std::array<double, 2> target{-20.0, -20.0};

  // [grid]
  meanfield::PhaseGrid grid{25, 25, 100.0, 5.0};
  int grid_steps = 0;  // mean-field steps over the horizon, 0 picks them from the CFL bound

  // [optimizer]
  std::optional<double> omega0;  // 1000 for IC, 10 for OC when unset
  double gamma = 1e-4;
  double tol = 0.05;
  double tol_cg = 1e-10;
  int max_iterations = 50;
  int max_halvings = 30;
  double next_slice_factor = 0.1;
  InitialControl initial_control = InitialControl::TowardTarget;

  // [memory]
  double memory_budget_mb = 0.0;  // 0: unlimited
  CheckpointPolicy checkpoint = CheckpointPolicy::Memory;

  double initial_step() const;
  std::size_t memory_budget_bytes() const;
  std::size_t particle_steps_per_slice() const;
  std::size_t grid_steps_per_slice() const;
  /// Explicit agent positions, or the ring placement.
  std::vector<double> initial_agents() const;
  /// Throws ConfigError naming the violated condition.
  void validate() const;
};

/// Parses key-value text with [sections], then `overrides` ("section.key=value",
/// later ones win). The scenario preset is applied before any explicit sigma.
/// Unknown keys are collected and reported together. The result is validated.
RunConfig parse_config(std::string_view text, std::span<const std::string> overrides = {});
RunConfig load_config(const std::optional<fs::path>& file,
                      std::span<const std::string> overrides = {});

/// Every key with its resolved value; parse_config of this text gives the
/// same configuration back.
std::string resolved_config(const RunConfig& config);

struct ConfigKey {
  std::string name;  // section.key
  std::string help;
};
const std::vector<ConfigKey>& config_keys();

std::string sha256_hex(std::string_view data);
std::string sha256_file(const fs::path& path);

/// Density snapshot: "HRDSNAP\0", u32 version, u32 nx, u32 nv, u32 reserved,
/// f64 x_lo, x_hi, v_lo, v_hi, time, then the cell values in grid.index
/// order. All numbers little-endian.
struct Snapshot {
  meanfield::PhaseGrid grid;
  double time = 0.0;
  std::vector<double> values;
};
void write_snapshot(const fs::path& path, const meanfield::DensityField& field, double time);
Snapshot read_snapshot(const fs::path& path);

/// Raw binary state files used by DiskCheckpointStore.
void write_state(std::ostream& out, const MicroState& s);
void read_state(std::istream& in, MicroState& s);
void write_state(std::ostream& out, const meanfield::MfState& s);
void read_state(std::istream& in, meanfield::MfState& s);

/// Checkpoints as one file per slot in a directory that is removed with the
/// store. A failed write (disk full, missing permissions) throws Error.
template <class State>
class DiskCheckpointStore final : public CheckpointStore<State> {
 public:
  explicit DiskCheckpointStore(fs::path directory);
  ~DiskCheckpointStore() override;
  DiskCheckpointStore(const DiskCheckpointStore&) = delete;
  DiskCheckpointStore& operator=(const DiskCheckpointStore&) = delete;

  void put(std::size_t slot, const State& s) override;
  State get(std::size_t slot) override;
  std::size_t writes() const { return writes_; }

 private:
  fs::path file(std::size_t slot) const;
  fs::path dir_;
  std::size_t writes_ = 0;
};

extern template class DiskCheckpointStore<MicroState>;
extern template class DiskCheckpointStore<meanfield::MfState>;

struct RunSummary {
  int exit_code = 0;  // 0 ok, 1 run failure
  std::string status;
  std::string error;
  fs::path directory;
  optimize::OptimizerReport report;
  /// Series for the comparison metrics (absent when the run failed).
  std::optional<metrics::RunSeries> series;
  std::vector<std::string> files;  // relative to `directory`
};

/// Runs the configured level and strategy and writes into config.output:
///   timeseries.csv   t, J, J1, J2, J3, E_x, E_y, Var, agent positions, controls
///   report.csv/json  optimizer iterations
///   control.csv      one row per slice
///   snapshots/       densities (.bin) or particles (.csv) every snapshot_stride slices
///   manifest.json    seed, config hash, wall time, peak memory, file hashes, status
/// Solver failures are caught and recorded with exit code 1.
RunSummary run_experiment(const RunConfig& config, std::ostream* log = nullptr);

struct StudyOptions {
  std::vector<int> grids{25, 50};
  std::vector<int> particle_counts{250, 500, 1000};
  int reference_grid = 75;
  int threads = 1;
};

/// Convergence table against a mean-field reference. Each cell runs in its own
/// directory under config.output; study.csv holds the norms.
metrics::StudyTable run_study(const RunConfig& config, const StudyOptions& options,
                              std::ostream* log = nullptr);

struct PlotBundle {
  std::vector<std::string> files;
  std::vector<std::string> warnings;
};

/// Plot-ready CSVs from the artifacts in `run_dir`: agent trajectories, cost
/// parts over time (IC) or iteration (OC), and density grids or particle
/// scatter plus histogram at the snapshots nearest to `times` (all snapshots
/// when empty). Missing artifacts give a partial bundle with warnings, also
/// recorded in `out_dir`/manifest.json.
PlotBundle emit_plot_data(const fs::path& run_dir, const fs::path& out_dir,
                          std::span<const double> times = {});

}  // namespace shepherd::harness
