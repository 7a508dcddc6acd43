#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "json.hpp"

#include "internal.hpp"

namespace shepherd::harness {

using namespace detail;
using json = nlohmann::json;

namespace {

class Bundle {
 public:
  explicit Bundle(fs::path out) : out_(std::move(out)) {}

  std::ofstream open(const std::string& rel) {
    bundle_.files.push_back(rel);
    return open_output(out_ / rel);
  }
  void warn(std::string w) { bundle_.warnings.push_back(std::move(w)); }
  PlotBundle finish(const json& extra) {
    json files = json::array();
    for (const auto& rel : bundle_.files) {
      const fs::path p = out_ / rel;
      files.push_back({{"path", rel}, {"bytes", fs::file_size(p)}, {"sha256", sha256_file(p)}});
    }
    json m = extra;
    m["files"] = files;
    m["warnings"] = bundle_.warnings;
    std::ofstream out = open_output(out_ / "manifest.json");
    out << m.dump(2) << '\n';
    return bundle_;
  }

 private:
  fs::path out_;
  PlotBundle bundle_;
};

std::string tag(int slice) {
  std::ostringstream s;
  s << "k" << std::setw(5) << std::setfill('0') << slice;
  return s.str();
}

void agent_tracks(const CsvTable& ts, Bundle& b) {
  std::vector<int> cols;
  for (int m = 1;; ++m) {
    const int x = ts.column("d" + std::to_string(m) + "_x");
    if (x < 0) break;
    cols.push_back(x);
  }
  if (cols.empty()) {
    b.warn("timeseries.csv has no agent columns");
    return;
  }
  std::ofstream out = b.open("agents.csv");
  csv_row(out, {"t", "agent", "x", "y"});
  for (const auto& r : ts.rows) {
    for (std::size_t m = 0; m < cols.size(); ++m) {
      csv_row(out, {sci(r[0]), std::to_string(m + 1), sci(r[cols[m]]), sci(r[cols[m] + 1])});
    }
  }
}

void cost_curve(const CsvTable& t, const char* index, Bundle& b) {
  const int i = t.column(index), j = t.column("J"), j1 = t.column("J1"), j2 = t.column("J2");
  if (i < 0 || j < 0 || j1 < 0 || j2 < 0) {
    b.warn(std::string("cost columns missing for index '") + index + "'");
    return;
  }
  std::ofstream out = b.open("cost.csv");
  csv_row(out, {index, "J", "J1", "J2"});
  for (const auto& r : t.rows) {
    const std::string first = std::string(index) == "iteration"
                                  ? std::to_string(static_cast<long long>(std::llround(r[i])))
                                  : sci(r[i]);
    csv_row(out, {first, sci(r[j]), sci(r[j1]), sci(r[j2])});
  }
}

// Writes x, y, rho on the spatial cells and returns the discrete mass.
double density_grid(const meanfield::PhaseGrid& g, std::span<const double> rho, std::ofstream& out) {
  csv_row(out, {"x", "y", "rho"});
  double mass = 0.0;
  for (int i = 0; i < g.nx; ++i) {
    for (int j = 0; j < g.nx; ++j) {
      const double r = rho[static_cast<std::size_t>(i) * g.nx + j];
      mass += r;
      csv_row(out, {sci(g.x(i)), sci(g.x(j)), sci(r)});
    }
  }
  return mass * g.dx() * g.dx();
}

}  // namespace

PlotBundle emit_plot_data(const fs::path& run_dir, const fs::path& out_dir,
                          std::span<const double> times) {
  Bundle b(out_dir);
  json extra{{"run", run_dir.string()}};

  json manifest;
  if (std::ifstream in(run_dir / "manifest.json"); in) {
    try {
      in >> manifest;
    } catch (const std::exception& e) {
      b.warn(std::string("manifest.json unreadable: ") + e.what());
    }
  } else {
    b.warn("manifest.json missing");
  }
  const std::string strategy = manifest.value("strategy", std::string());
  const std::string level = manifest.value("level", std::string());

  std::optional<RunConfig> config;
  try {
    config = load_config(run_dir / "config.ini");
  } catch (const std::exception& e) {
    b.warn(std::string("config.ini unusable: ") + e.what());
  }

  std::optional<CsvTable> ts;
  try {
    ts = read_csv(run_dir / "timeseries.csv");
    agent_tracks(*ts, b);
  } catch (const std::exception& e) {
    b.warn(std::string("timeseries.csv: ") + e.what());
  }

  if (strategy == "OC") {
    try {
      cost_curve(read_csv(run_dir / "report.csv"), "iteration", b);
    } catch (const std::exception& e) {
      b.warn(std::string("report.csv: ") + e.what());
    }
  } else if (strategy == "IC" || strategy == "none") {
    if (ts) cost_curve(*ts, "t", b);
  } else {
    b.warn("strategy unknown, no cost curve");
  }

  // Snapshots nearest to the requested times.
  std::vector<json> snaps;
  if (manifest.contains("snapshots")) {
    for (const auto& s : manifest["snapshots"]) snaps.push_back(s);
  }
  if (snaps.empty()) b.warn("run has no snapshots");
  std::vector<std::size_t> pick;
  if (times.empty()) {
    for (std::size_t i = 0; i < snaps.size(); ++i) pick.push_back(i);
  } else if (!snaps.empty()) {
    for (double t : times) {
      std::size_t best = 0;
      for (std::size_t i = 1; i < snaps.size(); ++i) {
        if (std::abs(snaps[i]["time"].get<double>() - t) <
            std::abs(snaps[best]["time"].get<double>() - t))
          best = i;
      }
      if (std::find(pick.begin(), pick.end(), best) == pick.end()) pick.push_back(best);
    }
  }
  json masses = json::array();
  for (std::size_t i : pick) {
    const std::string rel = snaps[i]["path"].get<std::string>();
    const int slice = snaps[i].value("slice", 0);
    try {
      if (level == "meanfield") {
        const Snapshot s = read_snapshot(run_dir / rel);
        meanfield::DensityField f(s.grid);
        f.values = s.values;
        std::ofstream out = b.open("density_" + tag(slice) + ".csv");
        const double mass = density_grid(s.grid, f.spatial_density(), out);
        masses.push_back({{"time", s.time}, {"mass", mass}});
      } else {
        const CsvTable p = read_csv(run_dir / rel);
        std::vector<double> pos;
        {
          std::ofstream out = b.open("scatter_" + tag(slice) + ".csv");
          csv_row(out, {"x", "y"});
          for (const auto& r : p.rows) {
            csv_row(out, {sci(r[0]), sci(r[1])});
            pos.push_back(r[0]);
            pos.push_back(r[1]);
          }
        }
        if (config) {
          const auto h = metrics::histogram_density(pos, config->grid);
          std::ofstream out = b.open("histogram_" + tag(slice) + ".csv");
          const double mass = density_grid(config->grid, h.density, out);
          masses.push_back({{"time", snaps[i]["time"]}, {"mass", mass},
                            {"overflow", h.overflow_fraction}});
        }
      }
    } catch (const std::exception& e) {
      b.warn(rel + ": " + e.what());
    }
  }
  extra["density_mass"] = masses;
  return b.finish(extra);
}

}  // namespace shepherd::harness
