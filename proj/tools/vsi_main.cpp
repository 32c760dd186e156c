// vsi: batch driver for the implantation / emitter / scan simulation chain.
//
//   vsi <implant|hbt|saturation|odmr|dose-sweep|report> [--config FILE] [overrides]
//
// Exit codes: 0 success, 2 configuration error, 3 runtime or model error.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "vsi/experiment.hpp"

namespace {

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::int64_t> dose;
  std::optional<double> duration_s;
  std::optional<double> power_mw;
  std::optional<int> emitters;
  std::optional<std::string> out;
  bool run_all = false;
};

void apply(const std::string& cmd, const Overrides& o, vsi::ExperimentConfig& c) {
  if (const char* env = std::getenv("TOOL_SEED"); env != nullptr && *env != '\0') {
    try {
      std::size_t used = 0;
      c.seed = std::stoull(env, &used);
      if (used != std::string(env).size()) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw vsi::ConfigError(std::string("TOOL_SEED: not an unsigned integer: ") + env);
    }
  }
  if (o.seed) c.seed = *o.seed;
  if (o.out) c.output_dir = *o.out;
  if (o.dose) {
    c.implantation.dose = *o.dose;
    if (cmd == "dose-sweep") c.dose_sweep.doses = {*o.dose};
  }
  if (o.duration_s) {
    if (cmd == "saturation")
      c.saturation.duration_s = *o.duration_s;
    else
      c.hbt.duration_s = *o.duration_s;
  }
  if (o.power_mw) {
    if (cmd == "dose-sweep")
      c.scanner.power_mw = *o.power_mw;
    else
      c.hbt.power_mw = *o.power_mw;
  }
  if (o.emitters) c.hbt.k_emitters = *o.emitters;
  c.validate();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Simulation and analysis pipeline for implanted single-defect arrays"};
  app.require_subcommand(1, 1);
  Overrides o;
  for (const auto& name : vsi::command_names()) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", o.config, "JSON configuration file (defaults if omitted)");
    sub->add_option("--seed", o.seed, "root seed (overrides config and TOOL_SEED)");
    sub->add_option("--dose", o.dose, "ions per spot");
    sub->add_option("--duration-s", o.duration_s, "acquisition time per measurement, s");
    sub->add_option("--power-mw", o.power_mw, "excitation power, mW");
    sub->add_option("--emitters", o.emitters, "number of emitters in the HBT focus");
    sub->add_option("--out", o.out, "output directory");
    if (name == "report")
      sub->add_flag("--run-all", o.run_all, "run every experiment before tabulating");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  const std::string cmd = app.get_subcommands().front()->get_name();

  vsi::ExperimentConfig config;
  try {
    if (!o.config.empty()) config = vsi::load_config(o.config);
    apply(cmd, o, config);
  } catch (const vsi::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  }

  try {
    if (cmd == "report" && o.run_all)
      for (const auto& name : {"implant", "hbt", "saturation", "odmr"})
        vsi::run_command(name, config);
    const auto outcome = vsi::run_command(cmd, config);
    for (const auto& f : outcome.files) std::cout << f.string() << '\n';
  } catch (const vsi::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
  return 0;
}
