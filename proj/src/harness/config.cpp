#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "shepherd/harness.hpp"

namespace shepherd::harness {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

// Shortest text that parses back to the same double.
std::string num(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string list(std::span<const double> v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + num(v[i]);
  return s;
}

double parse_double(const std::string& key, const std::string& text) {
  double v = 0.0;
  const std::string t = trim(text);
  const auto r = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || r.ec != std::errc() || r.ptr != t.data() + t.size() || !std::isfinite(v)) {
    throw ConfigError(key + ": expected a number, got '" + text + "'");
  }
  return v;
}

long long parse_int(const std::string& key, const std::string& text) {
  long long v = 0;
  const std::string t = trim(text);
  const auto r = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || r.ec != std::errc() || r.ptr != t.data() + t.size()) {
    throw ConfigError(key + ": expected an integer, got '" + text + "'");
  }
  return v;
}

std::vector<double> parse_list(const std::string& key, const std::string& text) {
  std::string t = text;
  std::replace(t.begin(), t.end(), ',', ' ');
  std::istringstream in(t);
  std::vector<double> out;
  std::string tok;
  while (in >> tok) out.push_back(parse_double(key, tok));
  return out;
}

std::array<double, 2> parse_pair(const std::string& key, const std::string& text) {
  const auto v = parse_list(key, text);
  if (v.size() != 2) throw ConfigError(key + ": expected two numbers, got '" + text + "'");
  return {v[0], v[1]};
}

PotentialParams parse_potential(const std::string& key, const std::string& text) {
  const auto v = parse_list(key, text);
  if (v.size() != 4) throw ConfigError(key + ": expected four numbers A R a r, got '" + text + "'");
  return {v[0], v[1], v[2], v[3]};
}

std::string potential_text(const PotentialParams& p) {
  const double v[] = {p.attraction_strength, p.repulsion_strength, p.attraction_radius,
                      p.repulsion_radius};
  return list(v);
}

template <class E>
E parse_enum(const std::string& key, const std::string& text,
             std::initializer_list<std::pair<const char*, E>> names) {
  const std::string t = lower(trim(text));
  std::string options;
  for (const auto& [n, e] : names) {
    if (t == lower(n)) return e;
    options += (options.empty() ? "" : ", ") + std::string(n);
  }
  throw ConfigError(key + ": expected one of " + options + ", got '" + text + "'");
}

struct Field {
  const char* key;
  const char* help;
  std::function<void(RunConfig&, const std::string& key, const std::string& value)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define DOUBLE_FIELD(KEY, MEMBER, HELP)                                                     \
  Field {                                                                                   \
    KEY, HELP,                                                                              \
        [](RunConfig& c, const std::string& k, const std::string& v) {                      \
          c.MEMBER = parse_double(k, v);                                                    \
        },                                                                                  \
        [](const RunConfig& c) { return num(c.MEMBER); }                                    \
  }
#define INT_FIELD(KEY, MEMBER, HELP)                                                        \
  Field {                                                                                   \
    KEY, HELP,                                                                              \
        [](RunConfig& c, const std::string& k, const std::string& v) {                      \
          const long long n = parse_int(k, v);                                              \
          if (n < 0) throw ConfigError(k + ": must not be negative");                       \
          c.MEMBER = static_cast<decltype(c.MEMBER)>(n);                                    \
        },                                                                                  \
        [](const RunConfig& c) { return std::to_string(c.MEMBER); }                         \
  }
#define PAIR_FIELD(KEY, MEMBER, HELP)                                                       \
  Field {                                                                                   \
    KEY, HELP,                                                                              \
        [](RunConfig& c, const std::string& k, const std::string& v) {                      \
          c.MEMBER = parse_pair(k, v);                                                      \
        },                                                                                  \
        [](const RunConfig& c) { return list(c.MEMBER); }                                   \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      {"run.level", "micro or meanfield",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.level = parse_enum<Level>(k, v, {{"micro", Level::Micro}, {"meanfield", Level::MeanField}});
       },
       [](const RunConfig& c) { return std::string(c.level == Level::Micro ? "micro" : "meanfield"); }},
      {"run.strategy", "IC (instantaneous), OC (optimal) or none (initial control only)",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.strategy = parse_enum<Strategy>(
             k, v, {{"IC", Strategy::Instantaneous}, {"OC", Strategy::Optimal}, {"none", Strategy::None}});
       },
       [](const RunConfig& c) { return strategy_name(c.strategy); }},
      {"run.scenario", "S1, S2, S3 (sets sigma1 and sigma2) or custom",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         const std::string t = trim(v);
         if (lower(t) == "custom") {
           c.scenario = "custom";
           return;
         }
         Scenario s;
         try {
           s = scenario_preset(t);
         } catch (const ConfigError& e) {
           throw ConfigError(k + ": " + e.what());
         }
         c.scenario = s.name;
         c.sigma1 = s.sigma1;
         c.sigma2 = s.sigma2;
       },
       [](const RunConfig& c) { return c.scenario; }},
      {"run.seed", "seed of the particle sampler",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         const long long s = parse_int(k, v);
         if (s < 0) throw ConfigError(k + ": must not be negative");
         c.seed = static_cast<std::uint64_t>(s);
       },
       [](const RunConfig& c) { return std::to_string(c.seed); }},
      {"run.output", "output directory",
       [](RunConfig& c, const std::string&, const std::string& v) { c.output = trim(v); },
       [](const RunConfig& c) { return c.output; }},
      INT_FIELD("run.snapshot_stride", snapshot_stride, "slices between snapshots, 0 for none"),

      DOUBLE_FIELD("time.T", horizon, "control horizon"),
      INT_FIELD("time.slices", slices, "number K of control slices"),
      INT_FIELD("time.steps", steps, "particle RK4 steps over the horizon (multiple of K)"),

      INT_FIELD("crowd.particles", particles, "particle count N"),
      PAIR_FIELD("crowd.box_lo", box_lo, "lower corner of the initial box"),
      PAIR_FIELD("crowd.box_hi", box_hi, "upper corner of the initial box"),
      DOUBLE_FIELD("crowd.velocity_std", velocity_std, "std of initial particle velocities"),
      DOUBLE_FIELD("crowd.velocity_width", velocity_width, "width of the initial velocity bump"),
      {"crowd.sampling", "random (i.i.d. uniform) or stratified (Latin hypercube) positions",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.sampling = parse_enum<micro::Sampling>(
             k, v, {{"random", micro::Sampling::Random}, {"stratified", micro::Sampling::Stratified}});
       },
       [](const RunConfig& c) {
         return std::string(c.sampling == micro::Sampling::Stratified ? "stratified" : "random");
       }},
      {"crowd.potential", "A R a r of the particle-particle Morse potential",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.crowd_potential = parse_potential(k, v);
       },
       [](const RunConfig& c) { return potential_text(c.crowd_potential); }},
      DOUBLE_FIELD("crowd.alpha", alpha, "friction coefficient"),
      INT_FIELD("crowd.dim", dim, "space dimension (2)"),

      INT_FIELD("agents.count", agents, "number M of agents"),
      {"agents.positions", "x y per agent; empty places them on a ring",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.agent_positions = parse_list(k, v);
       },
       [](const RunConfig& c) { return list(c.agent_positions); }},
      DOUBLE_FIELD("agents.ring_radius", ring_radius, "ring radius around the box centre"),
      {"agents.potential", "A R a r of the particle-agent Morse potential",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.agent_potential = parse_potential(k, v);
       },
       [](const RunConfig& c) { return potential_text(c.agent_potential); }},
      DOUBLE_FIELD("agents.u_max", u_max, "agent speed cap"),

      DOUBLE_FIELD("cost.sigma1", sigma1, "variance weight"),
      DOUBLE_FIELD("cost.sigma2", sigma2, "destination weight"),
      DOUBLE_FIELD("cost.sigma3", sigma3, "control weight"),
      DOUBLE_FIELD("cost.variance_factor", variance_factor, "target variance over initial variance"),
      PAIR_FIELD("cost.target", target, "desired crowd centre"),

      INT_FIELD("grid.nx", grid.nx, "spatial cells per dimension"),
      INT_FIELD("grid.nv", grid.nv, "velocity cells per dimension"),
      DOUBLE_FIELD("grid.x_half", grid.x_half, "half width of the spatial domain"),
      DOUBLE_FIELD("grid.v_max", grid.v_max, "half width of the velocity domain"),
      INT_FIELD("grid.steps", grid_steps, "mean-field steps over the horizon, 0 from the CFL bound"),

      {"optimizer.omega0", "initial Armijo step (default 1000 for IC, 10 for OC)",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         if (trim(v).empty()) c.omega0.reset();
         else c.omega0 = parse_double(k, v);
       },
       [](const RunConfig& c) { return c.omega0 ? num(*c.omega0) : std::string(); }},
      DOUBLE_FIELD("optimizer.gamma", gamma, "Armijo sufficient-decrease constant"),
      DOUBLE_FIELD("optimizer.tol", tol, "relative control change that stops OC"),
      DOUBLE_FIELD("optimizer.tol_cg", tol_cg, "NCG restart threshold"),
      INT_FIELD("optimizer.max_iterations", max_iterations, "OC iteration cap"),
      INT_FIELD("optimizer.max_halvings", max_halvings, "Armijo halving cap"),
      DOUBLE_FIELD("optimizer.next_slice_factor", next_slice_factor,
                   "IC: next slice starts from this multiple of the last control"),
      {"optimizer.initial_control", "target (toward the destination at u_max/2) or zero",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.initial_control = parse_enum<InitialControl>(
             k, v, {{"target", InitialControl::TowardTarget}, {"zero", InitialControl::Zero}});
       },
       [](const RunConfig& c) {
         return std::string(c.initial_control == InitialControl::Zero ? "zero" : "target");
       }},

      DOUBLE_FIELD("memory.budget_mb", memory_budget_mb, "OC trajectory budget in MiB, 0 unlimited"),
      {"memory.checkpoint", "memory or disk",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.checkpoint = parse_enum<CheckpointPolicy>(
             k, v, {{"memory", CheckpointPolicy::Memory}, {"disk", CheckpointPolicy::Disk}});
       },
       [](const RunConfig& c) {
         return std::string(c.checkpoint == CheckpointPolicy::Disk ? "disk" : "memory");
       }},
  };
  return table;
}

#undef DOUBLE_FIELD
#undef INT_FIELD
#undef PAIR_FIELD

const Field* find_field(const std::string& key) {
  for (const auto& f : fields())
    if (key == f.key) return &f;
  return nullptr;
}

using Entries = std::vector<std::pair<std::string, std::string>>;

Entries read_ini(std::string_view text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in{std::string(text)};
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("config line " + std::to_string(e.line()) + ": " + e.message());
  }
  Entries out;
  for (const auto& [section, body] : tree) {
    if (body.empty()) {
      // a key outside any section, or a section without keys
      if (!body.data().empty()) out.emplace_back(section, body.data());
      continue;
    }
    for (const auto& [key, value] : body) out.emplace_back(section + "." + key, value.data());
  }
  return out;
}

}  // namespace

std::string strategy_name(Strategy s) {
  switch (s) {
    case Strategy::Instantaneous: return "IC";
    case Strategy::Optimal: return "OC";
    case Strategy::None: break;
  }
  return "none";
}

Scenario scenario_preset(std::string_view name) {
  const std::string n = lower(trim(name));
  if (n == "s1") return {"S1", 0.09, 0.001};
  if (n == "s2") return {"S2", 0.0001, 0.9};
  if (n == "s3") return {"S3", 0.005, 0.5};
  throw ConfigError("unknown scenario '" + std::string(name) + "' (S1, S2, S3 or custom)");
}

double RunConfig::initial_step() const {
  if (omega0) return *omega0;
  return strategy == Strategy::Instantaneous ? 1000.0 : 10.0;
}

std::size_t RunConfig::memory_budget_bytes() const {
  return static_cast<std::size_t>(std::llround(memory_budget_mb * 1024.0 * 1024.0));
}

std::size_t RunConfig::particle_steps_per_slice() const {
  return static_cast<std::size_t>(steps / slices);
}

std::size_t RunConfig::grid_steps_per_slice() const {
  if (grid_steps > 0) return static_cast<std::size_t>(grid_steps / slices);
  return meanfield::steps_per_slice_for(grid, horizon / slices);
}

std::vector<double> RunConfig::initial_agents() const {
  if (!agent_positions.empty()) return agent_positions;
  const double cx = 0.5 * (box_lo[0] + box_hi[0]), cy = 0.5 * (box_lo[1] + box_hi[1]);
  std::vector<double> d;
  for (int m = 0; m < agents; ++m) {
    const double a = std::numbers::pi / 4.0 + 2.0 * std::numbers::pi * m / agents;
    d.push_back(cx + ring_radius * std::cos(a));
    d.push_back(cy + ring_radius * std::sin(a));
  }
  return d;
}

void RunConfig::validate() const {
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  require(dim == 2, "crowd.dim: only D = 2 is supported");
  require(horizon > 0.0, "time.T must be positive");
  require(slices > 0, "time.slices must be positive");
  require(agents > 0, "agents.count must be positive");
  require(u_max > 0.0, "agents.u_max must be positive");
  require(box_hi[0] > box_lo[0] && box_hi[1] > box_lo[1], "crowd.box_hi must exceed crowd.box_lo");
  require(alpha >= 0.0, "crowd.alpha must not be negative");
  require(sigma1 >= 0.0 && sigma2 >= 0.0 && sigma3 >= 0.0, "cost weights must not be negative");
  require(variance_factor > 0.0, "cost.variance_factor must be positive");
  require(agent_positions.empty() ||
              agent_positions.size() == static_cast<std::size_t>(2 * agents),
          "agents.positions: expected " + std::to_string(2 * agents) + " numbers, got " +
              std::to_string(agent_positions.size()));
  require(ring_radius >= 0.0, "agents.ring_radius must not be negative");
  require(initial_step() > 0.0, "optimizer.omega0 must be positive");
  require(gamma > 0.0 && gamma < 1.0, "optimizer.gamma must lie in (0, 1)");
  require(tol > 0.0, "optimizer.tol must be positive");
  require(tol_cg >= 0.0, "optimizer.tol_cg must not be negative");
  require(max_iterations > 0, "optimizer.max_iterations must be positive");
  require(max_halvings >= 0, "optimizer.max_halvings must not be negative");
  require(next_slice_factor >= 0.0, "optimizer.next_slice_factor must not be negative");
  require(memory_budget_mb >= 0.0, "memory.budget_mb must not be negative");
  require(!output.empty(), "run.output must not be empty");
  try {
    crowd_potential.validate();
    agent_potential.validate();
  } catch (const Error& e) {
    throw ConfigError(std::string("potential: ") + e.what());
  }
  if (level == Level::Micro) {
    require(particles > 0, "crowd.particles must be positive");
    require(steps > 0 && steps % slices == 0,
            "time.steps (" + std::to_string(steps) + ") must be a positive multiple of time.slices (" +
                std::to_string(slices) + ")");
  } else {
    try {
      grid.validate();
    } catch (const Error& e) {
      throw ConfigError(std::string("grid: ") + e.what());
    }
    require(grid_steps == 0 || grid_steps % slices == 0,
            "grid.steps (" + std::to_string(grid_steps) + ") must be a multiple of time.slices (" +
                std::to_string(slices) + ")");
    if (grid_steps > 0) {
      try {
        meanfield::check_cfl(grid, horizon / grid_steps);
      } catch (const Error& e) {
        throw ConfigError(std::string("grid.steps: ") + e.what());
      }
    }
  }
}

RunConfig parse_config(std::string_view text, std::span<const std::string> overrides) {
  Entries entries = read_ini(text);
  for (const std::string& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + o + "' is not key=value");
    entries.emplace_back(trim(o.substr(0, eq)), o.substr(eq + 1));
  }

  std::vector<std::string> unknown;
  for (const auto& [k, v] : entries)
    if (!find_field(k)) unknown.push_back(k);
  if (!unknown.empty()) {
    std::string msg = "unknown config keys:";
    for (const auto& k : unknown) msg += " " + k;
    throw ConfigError(msg);
  }

  // Later entries win, and the scenario goes first so explicit weights override it.
  std::map<std::string, std::string> last;
  for (const auto& [k, v] : entries) last[k] = v;
  RunConfig c;
  if (auto it = last.find("run.scenario"); it != last.end()) {
    find_field(it->first)->set(c, it->first, it->second);
  }
  for (const auto& f : fields()) {
    const std::string key = f.key;
    if (key == "run.scenario") continue;
    if (auto it = last.find(key); it != last.end()) f.set(c, key, it->second);
  }
  c.validate();
  return c;
}

RunConfig load_config(const std::optional<fs::path>& file, std::span<const std::string> overrides) {
  std::string text;
  if (file) {
    std::ifstream in(*file);
    if (!in) throw ConfigError("cannot read config file " + file->string());
    std::ostringstream s;
    s << in.rdbuf();
    text = s.str();
  }
  return parse_config(text, overrides);
}

std::string resolved_config(const RunConfig& config) {
  std::string out, section;
  for (const auto& f : fields()) {
    const std::string key = f.key;
    const auto dot = key.find('.');
    const std::string s = key.substr(0, dot);
    if (s != section) {
      out += (section.empty() ? "" : "\n") + ("[" + s + "]\n");
      section = s;
    }
    out += key.substr(dot + 1) + " = " + f.get(config) + "\n";
  }
  return out;
}

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    for (const auto& f : fields()) k.push_back({f.key, f.help});
    return k;
  }();
  return keys;
}

}  // namespace shepherd::harness
