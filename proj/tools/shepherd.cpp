// Command-line front end: run | study | emit-plots | inspect.
// Exit codes: 0 ok, 1 run failure, 2 configuration error.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"
#include "shepherd/harness.hpp"

namespace fs = std::filesystem;
namespace h = shepherd::harness;

namespace {

constexpr int kOk = 0, kRunFailure = 1, kConfigError = 2;

// Config file, generic --set overrides and one flag per config key.
struct ConfigInput {
  std::string file;
  std::vector<std::string> sets;
  std::vector<std::pair<std::string, std::string>> flags;  // key, value
  bool quiet = false;

  void attach(CLI::App* app) {
    app->add_option("-c,--config", file, "key-value config file with [sections]");
    app->add_option("--set", sets, "override, section.key=value (repeatable)");
    app->add_flag("-q,--quiet", quiet, "do not print the resolved config");
    flags.reserve(h::config_keys().size());
    for (const auto& k : h::config_keys()) {
      flags.emplace_back(k.name, std::string());
      app->add_option("--" + k.name, flags.back().second, k.help);
    }
  }

  h::RunConfig load(const CLI::App* app) const {
    std::vector<std::string> overrides;
    for (const auto& [key, value] : flags) {
      if (app->count("--" + key) > 0) overrides.push_back(key + "=" + value);
    }
    overrides.insert(overrides.end(), sets.begin(), sets.end());
    h::RunConfig c = h::load_config(file.empty() ? std::nullopt : std::optional<fs::path>(file),
                                    overrides);
    // Relative output directories live under the output root when one is set.
    if (const char* root = std::getenv("SHEPHERD_OUTPUT_ROOT"); root && *root) {
      if (fs::path(c.output).is_relative()) c.output = (fs::path(root) / c.output).string();
    }
    if (!quiet) std::cout << h::resolved_config(c) << std::flush;
    return c;
  }
};

int env_threads() {
  if (const char* t = std::getenv("SHEPHERD_THREADS"); t && *t) {
    const int n = std::atoi(t);
    if (n > 0) return n;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

int inspect(const fs::path& path) {
  if (fs::is_directory(path)) return inspect(path / "manifest.json");
  if (path.extension() == ".bin") {
    const h::Snapshot s = h::read_snapshot(path);
    shepherd::meanfield::DensityField f(s.grid);
    f.values = s.values;
    const auto m = f.moments();
    std::cout << "snapshot " << path.string() << "\n  grid " << s.grid.nx << "^2 x " << s.grid.nv
              << "^2 on [-" << s.grid.x_half << ", " << s.grid.x_half << "]^2 x [-" << s.grid.v_max
              << ", " << s.grid.v_max << "]^2\n  time " << s.time << "\n  mass " << f.mass()
              << "\n  mean " << m.mean[0] << " " << m.mean[1] << "\n  variance " << m.variance
              << "\n  min " << f.min_value() << "\n";
    return kOk;
  }
  if (path.extension() == ".json") {
    std::ifstream in(path);
    if (!in) throw shepherd::Error("cannot read " + path.string());
    nlohmann::json m;
    in >> m;
    for (const char* key : {"level", "strategy", "scenario", "seed", "status", "error",
                            "optimizer_status", "iterations", "wall_seconds", "peak_memory_bytes",
                            "memory_budget_bytes", "checkpoint", "reference"}) {
      if (m.contains(key)) std::cout << key << ": " << m[key].dump() << "\n";
    }
    if (m.contains("files")) std::cout << "files: " << m["files"].size() << "\n";
    if (m.contains("warnings")) {
      for (const auto& w : m["warnings"]) std::cout << "warning: " << w.get<std::string>() << "\n";
    }
    return m.value("exit_code", 0) == 0 ? kOk : kRunFailure;
  }
  // Anything else is read as a config file and printed resolved.
  std::cout << h::resolved_config(h::load_config(path));
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adjoint-based control of a particle crowd by external agents"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "run one experiment");
  ConfigInput run_in;
  run_in.attach(run);

  auto* study = app.add_subcommand("study", "convergence study against a mean-field reference");
  ConfigInput study_in;
  study_in.attach(study);
  h::StudyOptions study_opts;
  study_opts.threads = 0;
  study->add_option("--grids", study_opts.grids, "mean-field grid sizes")->delimiter(',');
  study->add_option("--particles", study_opts.particle_counts, "particle counts")->delimiter(',');
  study->add_option("--reference", study_opts.reference_grid, "reference grid size");
  study->add_option("--threads", study_opts.threads, "worker threads (default SHEPHERD_THREADS)");

  auto* plots = app.add_subcommand("emit-plots", "plot-ready CSVs from a run directory");
  std::string plot_run, plot_out;
  std::vector<double> plot_times;
  plots->add_option("run_dir", plot_run, "run directory")->required();
  plots->add_option("-o,--out", plot_out, "output directory (default <run_dir>/plots)");
  plots->add_option("--times", plot_times, "snapshot times")->delimiter(',');

  auto* insp = app.add_subcommand("inspect", "summarise a manifest, snapshot or config");
  std::string insp_path;
  insp->add_option("path", insp_path, "file or run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (run->parsed()) {
      const h::RunConfig c = run_in.load(run);
      const h::RunSummary r = h::run_experiment(c, &std::cerr);
      std::cerr << "status " << r.status << (r.error.empty() ? "" : ": " + r.error) << "\n";
      return r.exit_code == 0 ? kOk : kRunFailure;
    }
    if (study->parsed()) {
      const h::RunConfig c = study_in.load(study);
      if (study_opts.threads <= 0) study_opts.threads = env_threads();
      const auto table = h::run_study(c, study_opts, &std::cerr);
      shepherd::metrics::write_study_csv(table, std::cout);
      for (const auto& e : table.errors)
        if (!e.empty()) return kRunFailure;
      return kOk;
    }
    if (plots->parsed()) {
      const fs::path out = plot_out.empty() ? fs::path(plot_run) / "plots" : fs::path(plot_out);
      const auto b = h::emit_plot_data(plot_run, out, plot_times);
      std::cout << b.files.size() << " files in " << out.string() << "\n";
      for (const auto& w : b.warnings) std::cerr << "warning: " << w << "\n";
      return kOk;
    }
    if (insp->parsed()) return inspect(insp_path);
  } catch (const h::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRunFailure;
  }
  return kOk;
}
