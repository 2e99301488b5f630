#pragma once

// Run configuration in INI form. See configs/*.ini for annotated examples.
//
//   [system]    name = oscillator | product | pendulum | custom
//               r, hamiltonian, conserved (H2..Hk separated by ';'), periodic (0/1 list)  -- custom only
//   [observable] A = <expression>           (H and H1..Hk may be used as names)
//   [gibbs]     beta, n, burn_in, thin, proposal_scale (number or auto), seed
//   [dynamics]  T, dt, trajectories (0 = all samples), drift_tolerance
//   [bounds]    degrees (comma list), saturation_degree, d_probe, jitter, bootstrap, bootstrap_seed
//   [labeler]   <cell name> = <predicate>   (one line per cell, in order)
//   [output]    dir

#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "mazur/bounds.hpp"
#include "mazur/correlation.hpp"
#include "mazur/dynamics.hpp"
#include "mazur/error.hpp"
#include "mazur/gibbs.hpp"

namespace mazur {

struct SystemConfig {
  std::string name = "oscillator";
  int r = 1;
  std::string hamiltonian;
  std::vector<std::string> conserved;
  std::vector<bool> periodic;
};

struct BoundConfig {
  std::vector<int> degrees = {0, 1, 2, 3};
  std::optional<int> saturation_degree;
  std::optional<int> d_probe;
  double jitter = 1e-12;
  std::size_t bootstrap = 200;
  std::uint64_t bootstrap_seed = 12345;
  int degree_cap = 10;
  std::size_t basis_cap = 2000;
};

struct RunConfig {
  SystemConfig system;
  std::string observable = "q1^2";
  double beta = 1.0;
  SamplerOptions sampler;
  CorrelationOptions dynamics;
  BoundConfig bounds;
  std::vector<std::pair<std::string, std::string>> labeler;
  std::string output_dir = ".";

  int saturation_degree() const {
    return bounds.saturation_degree.value_or(*std::max_element(bounds.degrees.begin(), bounds.degrees.end()));
  }
  int d_probe() const { return bounds.d_probe.value_or(saturation_degree() + 2); }
  int max_degree() const {
    return std::max(d_probe(), *std::max_element(bounds.degrees.begin(), bounds.degrees.end()));
  }
};

namespace detail {

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) {
    const auto b = item.find_first_not_of(" \t"), e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

class ConfigReader {
 public:
  explicit ConfigReader(const boost::property_tree::ptree& tree) : tree_(tree) {}

  template <class T>
  std::optional<T> get(const std::string& path) {
    used_.insert(path);
    auto node = tree_.get_optional<std::string>(path);
    if (!node) return std::nullopt;
    std::istringstream in(*node);
    T value{};
    in >> value;
    if (in.fail() || !(in >> std::ws).eof()) throw ValidationError(path + ": cannot parse '" + *node + "'");
    return value;
  }

  std::optional<std::string> text(const std::string& path) {
    used_.insert(path);
    auto node = tree_.get_optional<std::string>(path);
    if (!node) return std::nullopt;
    return *node;
  }

  void mark_section(const std::string& section) { sections_.insert(section); }

  /// Rejects keys that were never read, which catches typos.
  void check_unknown() const {
    for (const auto& [section, body] : tree_) {
      if (sections_.count(section)) continue;
      if (body.empty()) throw ValidationError(section + ": key outside of a section");
      for (const auto& [key, value] : body) {
        (void)value;
        if (!used_.count(section + "." + key)) throw ValidationError(section + "." + key + ": unknown configuration key");
      }
    }
  }

 private:
  const boost::property_tree::ptree& tree_;
  std::set<std::string> used_;
  std::set<std::string> sections_;
};

}  // namespace detail

inline SystemSpec build_system(const SystemConfig& c) {
  if (c.name != "custom") return systems::by_name(c.name);
  if (c.r < 1) throw ValidationError("system.r: must be >= 1");
  if (c.hamiltonian.empty()) throw ValidationError("system.hamiltonian: required for a custom system");
  try {
    return make_system("custom", c.r, c.hamiltonian, c.conserved, c.periodic);
  } catch (const ParseError& e) {
    throw ValidationError(std::string("system: ") + e.what());
  }
}

/// Builds the labeler from config cells; predicates are parsed against the system.
inline std::optional<Labeler> build_labeler(const RunConfig& cfg, const SystemSpec& sys) {
  if (cfg.labeler.empty()) return std::nullopt;
  Labeler lab;
  for (const auto& [name, text] : cfg.labeler) {
    try {
      lab.names.push_back(name);
      lab.cells.push_back(parse_predicate(text, sys.r, sys.macros()));
    } catch (const ParseError& e) {
      throw ValidationError("labeler." + name + ": " + e.what());
    }
  }
  return lab;
}

/// Checks ranges and that every expression parses against the declared system.
inline void validate(const RunConfig& cfg) {
  if (!(cfg.beta > 0.0) || !std::isfinite(cfg.beta)) throw ValidationError("gibbs.beta: must be > 0");
  if (cfg.sampler.n < 1) throw ValidationError("gibbs.n: must be >= 1");
  if (cfg.sampler.thin < 1) throw ValidationError("gibbs.thin: must be >= 1");
  if (cfg.sampler.proposal_scale && !(*cfg.sampler.proposal_scale > 0.0))
    throw ValidationError("gibbs.proposal_scale: must be > 0 or auto");
  if (!(cfg.dynamics.T > 0.0)) throw ValidationError("dynamics.T: must be > 0");
  if (!(cfg.dynamics.dt > 0.0) || cfg.dynamics.dt >= cfg.dynamics.T) throw ValidationError("dynamics.dt: must be in (0, T)");
  if (!(cfg.dynamics.integration.drift_tolerance > 0.0))
    throw ValidationError("dynamics.drift_tolerance: must be > 0");
  if (cfg.bounds.degrees.empty()) throw ValidationError("bounds.degrees: at least one degree is required");
  for (int d : cfg.bounds.degrees)
    if (d < 0 || d > cfg.bounds.degree_cap)
      throw ValidationError("bounds.degrees: degree " + std::to_string(d) + " outside 0.." +
                            std::to_string(cfg.bounds.degree_cap));
  if (cfg.d_probe() <= cfg.saturation_degree())
    throw ValidationError("bounds.d_probe: must exceed the saturation degree");
  if (cfg.d_probe() > cfg.bounds.degree_cap)
    throw ValidationError("bounds.d_probe: exceeds the degree cap " + std::to_string(cfg.bounds.degree_cap));
  if (!(cfg.bounds.jitter >= 0.0) || cfg.bounds.jitter > 1e-4) throw ValidationError("bounds.jitter: must be in [0, 1e-4]");
  if (cfg.bounds.bootstrap < 2) throw ValidationError("bounds.bootstrap: must be >= 2");

  const SystemSpec sys = build_system(cfg.system);
  const std::size_t nu = basis_size(static_cast<int>(sys.k()), cfg.max_degree());
  if (nu > cfg.bounds.basis_cap)
    throw ValidationError("bounds.degrees: basis size " + std::to_string(nu) + " exceeds the cap " +
                          std::to_string(cfg.bounds.basis_cap));
  try {
    (void)sys.parse_observable(cfg.observable);
  } catch (const ParseError& e) {
    throw ValidationError(std::string("observable.A: ") + e.what());
  }
  (void)build_labeler(cfg, sys);
}

inline RunConfig parse_config(std::istream& in) {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  detail::ConfigReader rd(tree);
  RunConfig cfg;

  if (auto v = rd.text("system.name")) cfg.system.name = *v;
  if (cfg.system.name == "custom") {
    cfg.system.r = rd.get<int>("system.r").value_or(0);
    cfg.system.hamiltonian = rd.text("system.hamiltonian").value_or("");
    if (auto v = rd.text("system.conserved")) cfg.system.conserved = detail::split(*v, ';');
    if (auto v = rd.text("system.periodic"))
      for (const auto& flag : detail::split(*v, ',')) {
        if (flag != "0" && flag != "1") throw ValidationError("system.periodic: entries must be 0 or 1");
        cfg.system.periodic.push_back(flag == "1");
      }
  } else {
    const auto names = systems::names();
    if (std::find(names.begin(), names.end(), cfg.system.name) == names.end())
      throw ValidationError("system.name: unknown system '" + cfg.system.name +
                            "' (valid: oscillator, product, pendulum, custom)");
  }

  if (auto v = rd.text("observable.A")) cfg.observable = *v;

  if (auto v = rd.get<double>("gibbs.beta")) cfg.beta = *v;
  if (auto v = rd.get<long long>("gibbs.n")) {
    if (*v < 1) throw ValidationError("gibbs.n: must be >= 1");
    cfg.sampler.n = static_cast<std::size_t>(*v);
  }
  if (auto v = rd.get<long long>("gibbs.burn_in")) {
    if (*v < 0) throw ValidationError("gibbs.burn_in: must be >= 0");
    cfg.sampler.burn_in = static_cast<std::size_t>(*v);
  }
  if (auto v = rd.get<long long>("gibbs.thin")) {
    if (*v < 1) throw ValidationError("gibbs.thin: must be >= 1");
    cfg.sampler.thin = static_cast<std::size_t>(*v);
  }
  if (auto v = rd.text("gibbs.proposal_scale"); v && *v != "auto") cfg.sampler.proposal_scale = rd.get<double>("gibbs.proposal_scale");
  if (auto v = rd.get<std::uint64_t>("gibbs.seed")) cfg.sampler.seed = *v;

  if (auto v = rd.get<double>("dynamics.T")) cfg.dynamics.T = *v;
  if (auto v = rd.get<double>("dynamics.dt")) cfg.dynamics.dt = *v;
  if (auto v = rd.get<long long>("dynamics.trajectories")) {
    if (*v < 0) throw ValidationError("dynamics.trajectories: must be >= 0");
    cfg.dynamics.max_samples = static_cast<std::size_t>(*v);
  }
  if (auto v = rd.get<double>("dynamics.drift_tolerance")) cfg.dynamics.integration.drift_tolerance = *v;

  if (auto v = rd.text("bounds.degrees")) {
    cfg.bounds.degrees.clear();
    for (const auto& item : detail::split(*v, ',')) {
      try {
        std::size_t pos = 0;
        cfg.bounds.degrees.push_back(std::stoi(item, &pos));
        if (pos != item.size()) throw std::invalid_argument(item);
      } catch (const std::logic_error&) {
        throw ValidationError("bounds.degrees: cannot parse '" + item + "'");
      }
    }
  }
  if (auto v = rd.get<int>("bounds.saturation_degree")) cfg.bounds.saturation_degree = *v;
  if (auto v = rd.get<int>("bounds.d_probe")) cfg.bounds.d_probe = *v;
  if (auto v = rd.get<double>("bounds.jitter")) cfg.bounds.jitter = *v;
  if (auto v = rd.get<long long>("bounds.bootstrap")) {
    if (*v < 2) throw ValidationError("bounds.bootstrap: must be >= 2");
    cfg.bounds.bootstrap = static_cast<std::size_t>(*v);
  }
  if (auto v = rd.get<std::uint64_t>("bounds.bootstrap_seed")) cfg.bounds.bootstrap_seed = *v;

  if (auto section = tree.get_child_optional("labeler")) {
    rd.mark_section("labeler");
    for (const auto& [name, value] : *section) cfg.labeler.emplace_back(name, value.get_value<std::string>());
  }
  if (auto v = rd.text("output.dir")) cfg.output_dir = *v;

  rd.check_unknown();
  validate(cfg);
  return cfg;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config file '" + path + "'");
  return parse_config(in);
}

}  // namespace mazur
