#include "kbflow/kbflow.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <map>

namespace {

enum Exit { kPass = 0, kCheckFailed = 1, kUsage = 2, kNumerical = 3 };

std::filesystem::path output_dir(const std::string& flag, const kbflow::Scenario& sc) {
  if (!flag.empty()) return flag;
  if (!sc.output.dir.empty()) return sc.output.dir;
  if (const char* env = std::getenv("KBFLOW_OUT"); env && *env) return env;
  return "kbflow_out";
}

const std::map<std::string, std::string> kHelp = {
    {"gramians", "window Gramians and uniformity constants"},
    {"solve-are", "stabilizing solution of the algebraic Riccati equation"},
    {"integrate-dre", "Riccati trajectory from analysis.Q"},
    {"bounds", "two-sided uniform bounds on the Riccati flow"},
    {"constants", "stability constant ledger"},
    {"certify-semigroup", "exponential decay of the filter semigroup"},
    {"certify-riccati", "bounds, polarization, monotonicity and contraction of the Riccati flow"},
    {"simulate", "coupled signal, filter and ensemble paths"},
    {"verify-events", "Monte Carlo check of the deviation event probabilities"},
    {"verify-moments", "Monte Carlo check of the deviation moment bounds"},
    {"verify-contraction", "Monte Carlo check of the contraction moment bounds"},
    {"report", "every stage above plus the conditional bias check"},
};

void summarize(const kbflow::CertificationReport& rep, std::ostream& os) {
  for (const auto& c : rep.checks)
    os << (c.pass ? "PASS " : "FAIL ") << c.name << "  margin=" << c.margin << '\n';
  os << (rep.pass() ? "PASS" : "FAIL") << ' ' << rep.command << " (" << rep.checks.size() << " checks)\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Stability certificates for Kalman-Bucy filters and their ensemble diffusions"};
  app.require_subcommand(1, 1);
  std::string scenario_path, out_flag;
  std::optional<std::uint64_t> seed;
  bool quiet = false;
  for (const auto& name : kbflow::Pipeline::commands()) {
    auto* sub = app.add_subcommand(name, kHelp.at(name));
    sub->add_option("--scenario,-s", scenario_path, "Scenario JSON file")->required();
    sub->add_option("--out,-o", out_flag, "Output directory");
    sub->add_option("--seed", seed, "Override mc.seed");
    sub->add_flag("--quiet,-q", quiet, "Only print the final verdict");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }
  const std::string command = app.get_subcommands().front()->get_name();

  try {
    const kbflow::Scenario sc = kbflow::parse_scenario(scenario_path);
    const kbflow::CertificationReport rep = kbflow::run(sc, command, seed);
    const auto dir = output_dir(out_flag, sc);
    kbflow::write_report(rep, dir);
    if (quiet) {
      std::cout << (rep.pass() ? "PASS" : "FAIL") << ' ' << command << '\n';
    } else {
      summarize(rep, std::cout);
      std::cout << "report: " << (dir / "report.json").string() << '\n';
    }
    return rep.pass() ? kPass : kCheckFailed;
  } catch (const kbflow::ScenarioError& e) {
    std::cerr << "scenario error: " << e.what() << '\n';
    for (const auto& p : e.problems()) std::cerr << "  " << p << '\n';
    return kUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const kbflow::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kNumerical;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << '\n';
    return kNumerical;
  }
}
