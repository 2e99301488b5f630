// mazur: sampling, C(A) estimation, bounds and verification from a config file.
// Exit codes: 0 success, 1 validation error, 2 runtime/numeric error, 3 verification failures.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "mazur/config.hpp"
#include "mazur/gibbs.hpp"
#include "mazur/parallel.hpp"
#include "mazur/regular.hpp"
#include "mazur/report.hpp"
#include "mazur/verify.hpp"

namespace fs = std::filesystem;
using namespace mazur;

namespace {

struct Flags {
  std::string config;
  std::string ensemble;
  std::string out;
  std::string input;
  std::optional<std::uint64_t> seed;
  unsigned threads = 0;
  std::string suite = "all";
  bool no_timestamp = false;
  bool level_table = false;
};

RunConfig load(const Flags& f) {
  if (f.config.empty()) throw ValidationError("--config is required for this command");
  RunConfig cfg = load_config(f.config);
  if (f.seed) cfg.sampler.seed = *f.seed;
  return cfg;
}

fs::path out_dir(const Flags& f, const RunConfig* cfg) {
  fs::path dir = !f.out.empty() ? fs::path(f.out) : (cfg ? fs::path(cfg->output_dir) : fs::path("."));
  fs::create_directories(dir);
  return dir;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot open '" + path.string() + "' for writing");
  out << text;
}

template <class Fn>
void write_with(const fs::path& path, Fn&& fn) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot open '" + path.string() + "' for writing");
  fn(out);
}

void print_warnings(const std::vector<std::string>& warnings) {
  for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
}

/// Loads the ensemble named by --ensemble, or samples one from the config.
GibbsEnsemble ensemble_for(const Flags& f, const RunConfig& cfg, const SystemSpec& sys) {
  if (f.ensemble.empty()) return sample_gibbs(sys, cfg.beta, cfg.sampler);
  GibbsEnsemble ens = load_ensemble(f.ensemble);
  if (ens.r != sys.r) throw ValidationError("ensemble r=" + std::to_string(ens.r) + " does not match the config system");
  if (ens.system != sys.name)
    throw ValidationError("ensemble was sampled for system '" + ens.system + "', config has '" + sys.name + "'");
  if (!ens.hamiltonian.empty() && ens.hamiltonian != sys.hamiltonian.to_string())
    throw ValidationError("ensemble Hamiltonian '" + ens.hamiltonian + "' does not match the config");
  if (ens.beta != cfg.beta)
    throw ValidationError("ensemble beta=" + format_double(ens.beta) + " does not match gibbs.beta=" +
                          format_double(cfg.beta));
  return ens;
}

int cmd_sample(const Flags& f) {
  const RunConfig cfg = load(f);
  const SystemSpec sys = build_system(cfg.system);
  const GibbsEnsemble ens = sample_gibbs(sys, cfg.beta, cfg.sampler);
  const fs::path path = !f.ensemble.empty() ? fs::path(f.ensemble) : out_dir(f, &cfg) / "ensemble.csv";
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  save_ensemble(path.string(), ens);
  print_warnings(ens.warnings);
  std::cout << "wrote " << ens.size() << " samples to " << path.string() << " (acceptance "
            << format_double(ens.acceptance_rate) << ")\n";
  return 0;
}

int cmd_correlate(const Flags& f) {
  const RunConfig cfg = load(f);
  const SystemSpec sys = build_system(cfg.system);
  const GibbsEnsemble ens = ensemble_for(f, cfg, sys);
  const Expression A = sys.parse_observable(cfg.observable);
  const auto run = run_trajectories(sys, std::span<const Expression>(&A, 1), ens, cfg.dynamics);
  const auto [norm, direct] = estimates_from(run, 0, A);
  nlohmann::ordered_json j;
  j["schema_version"] = report_schema_version;
  if (!f.no_timestamp) j["generated_at"] = detail::utc_timestamp();
  j["system"] = sys.name;
  j["observable"] = cfg.observable;
  j["beta"] = cfg.beta;
  j["T"] = norm.T;
  j["dt"] = norm.dt;
  j["trajectories"] = norm.n_ensemble;
  j["max_drift"] = run.max_drift;
  j["C"] = {{to_string(norm.method), detail::estimate_json(norm)}, {to_string(direct.method), detail::estimate_json(direct)}};
  std::vector<std::string> warnings = ens.warnings;
  detail::append_unique(warnings, norm.warnings);
  detail::append_unique(warnings, direct.warnings);
  j["warnings"] = warnings;
  const fs::path path = out_dir(f, &cfg) / "correlate.json";
  write_file(path, j.dump(2) + "\n");
  print_warnings(warnings);
  std::cout << "C(A) norm_of_orbital_average = " << format_double(norm.value) << " +- " << format_double(norm.std_error)
            << "\nC(A) direct_time_integral   = " << format_double(direct.value) << " +- "
            << format_double(direct.std_error) << "\nwrote " << path.string() << "\n";
  return 0;
}

int cmd_bound(const Flags& f) {
  const RunConfig cfg = load(f);
  const SystemSpec sys = build_system(cfg.system);
  const auto labeler = build_labeler(cfg, sys);
  const GibbsEnsemble ens = ensemble_for(f, cfg, sys);
  const AnalysisParams params = AnalysisParams::from(cfg);
  const Analysis an = analyze(sys, ens, {cfg.observable}, params, labeler ? &*labeler : nullptr);
  const BoundReport rep = make_report(sys, ens, an, 0, params);

  const fs::path dir = out_dir(f, &cfg);
  write_file(dir / "report.json", to_json(rep, !f.no_timestamp).dump(2) + "\n");
  write_with(dir / "report.csv", [&](std::ostream& os) { write_csv(os, rep); });
  write_with(dir / "gram.csv", [&](std::ostream& os) { write_gram_csv(os, rep.analysis.overlaps); });
  write_with(dir / "overlaps.csv", [&](std::ostream& os) { write_overlaps_csv(os, rep.analysis.overlaps); });
  print_warnings(rep.warnings);

  const auto& a = rep.analysis;
  std::cout << "C(A) = " << format_double(a.c_norm->value) << " +- " << format_double(a.c_norm->std_error)
            << " (norm), " << format_double(a.c_direct->value) << " +- " << format_double(a.c_direct->std_error)
            << " (direct)\n";
  for (std::size_t i = 0; i < a.bounds.plain.size(); ++i) {
    const auto& b = a.bounds.plain[i];
    std::cout << "bound_" << b.d << " = " << format_double(b.value) << " +- " << format_double(b.std_error);
    if (!a.bounds.partitioned.empty())
      std::cout << "   partitioned = " << format_double(a.bounds.partitioned[i].value) << " +- "
                << format_double(a.bounds.partitioned[i].std_error);
    std::cout << "\n";
  }
  std::cout << "mazur_strict = " << format_double(a.mazur_strict.value) << "\nsaturation: " << a.saturation.verdict
            << " (" << a.saturation.note << ")\nwrote " << (dir / "report.json").string() << "\n";
  return 0;
}

int cmd_verify(const Flags& f) {
  const auto names = suite_names();
  if (f.suite != "all" && std::find(names.begin(), names.end(), f.suite) == names.end())
    throw ValidationError("unknown suite '" + f.suite + "' (valid: oscillator, product, pendulum, all)");
  const auto results = verify(f.suite, f.seed.value_or(20261018));
  const auto j = to_json(results);
  std::size_t failures = 0;
  for (const auto& r : results) {
    for (const auto& c : r.checks) {
      std::cout << (c.passed ? "PASS" : "FAIL") << " [" << c.criterion << "] " << r.suite << ": " << c.name
                << "  measured=" << format_double(c.measured) << " reference=" << format_double(c.reference)
                << " tolerance=" << format_double(c.tolerance) << "\n";
      failures += c.passed ? 0 : 1;
    }
    print_warnings(r.warnings);
  }
  if (!f.out.empty()) write_file(out_dir(f, nullptr) / "verify.json", j.dump(2) + "\n");
  std::cout << failures << " failing checks\n";
  return failures > 0 ? 3 : 0;
}

int cmd_report(const Flags& f) {
  if (f.level_table) {
    const RunConfig cfg = load(f);
    const SystemSpec sys = build_system(cfg.system);
    if (sys.regular_factors.empty())
      throw ValidationError("level-set tables need an ergodically regular system (oscillator or product)");
    const Expression A = sys.parse_observable(cfg.observable);
    std::vector<std::vector<double>> energies;
    const auto nf = sys.regular_factors.size();
    for (int i = 1; i <= 40; ++i) {
      const double e = 0.25 * i / cfg.beta;
      energies.push_back(std::vector<double>(nf, e));
    }
    const auto rows = level_table(sys, A, energies);
    const fs::path path = out_dir(f, &cfg) / "level_table.csv";
    write_with(path, [&](std::ostream& os) { write_level_table(os, rows); });
    std::cout << "wrote " << path.string() << "\n";
    return 0;
  }
  if (f.input.empty()) throw ValidationError("report needs --input REPORT.json or --level-table with --config");
  std::ifstream in(f.input);
  if (!in) throw ValidationError("cannot open '" + f.input + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("report: ") + e.what());
  }
  if (!j.contains("schema_version") || j["schema_version"] != report_schema_version)
    throw ValidationError("report: unsupported or missing schema_version");
  std::cout << "system " << j["system"]["name"].get<std::string>() << ", observable "
            << j["observable"].get<std::string>() << ", beta " << j["beta"].get<double>() << "\n";
  for (const auto& [method, e] : j["C"].items())
    std::cout << "C " << method << ": " << e["value"].get<double>() << " +- " << e["std_error"].get<double>() << "\n";
  std::cout << "d  bound  std_error  condition  jitter\n";
  for (const auto& b : j["bounds"])
    std::cout << b["d"].get<int>() << "  " << b["value"].get<double>() << "  " << b["std_error"].get<double>() << "  "
              << b["condition_number"].dump() << "  " << b["jitter"].get<double>() << "\n";
  if (j.contains("partitioned"))
    for (const auto& b : j["partitioned"]["bounds"])
      std::cout << "partitioned d=" << b["d"].get<int>() << ": " << b["value"].get<double>() << "\n";
  std::cout << "saturation: " << j["saturation"]["verdict"].get<std::string>() << "\n";
  for (const auto& w : j["warnings"]) std::cout << "warning: " << w.get<std::string>() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mazur-type lower bounds on time-averaged autocorrelations of Hamiltonian observables"};
  app.require_subcommand(1);
  Flags f;
  app.add_option("--config", f.config, "run configuration (INI)");
  app.add_option("--ensemble", f.ensemble, "ensemble file to write (sample) or read (correlate, bound)");
  app.add_option("--out", f.out, "output directory");
  app.add_option("--threads", f.threads, "worker threads (0 = all cores)");
  app.add_option("--seed", f.seed, "override the sampler seed (verify: suite seed)");
  app.add_flag("--no-timestamp", f.no_timestamp, "omit generated_at from JSON output");

  auto* sample = app.add_subcommand("sample", "draw a Gibbs ensemble")->fallthrough();
  auto* correlate = app.add_subcommand("correlate", "estimate C(A) with both estimators")->fallthrough();
  auto* bound = app.add_subcommand("bound", "compute the bound report")->fallthrough();
  auto* verify_cmd = app.add_subcommand("verify", "run verification suites")->fallthrough();
  verify_cmd->add_option("suite", f.suite, "oscillator, product, pendulum or all");
  auto* report = app.add_subcommand("report", "summarize a report JSON or write an A^H table")->fallthrough();
  report->add_option("--input", f.input, "report.json produced by bound");
  report->add_flag("--level-table", f.level_table, "write level-set averages A^H(E) as CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    set_thread_count(f.threads);
    if (*sample) return cmd_sample(f);
    if (*correlate) return cmd_correlate(f);
    if (*bound) return cmd_bound(f);
    if (*verify_cmd) return cmd_verify(f);
    if (*report) return cmd_report(f);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
