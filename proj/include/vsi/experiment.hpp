#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "vsi/emitter.hpp"
#include "vsi/implantation.hpp"
#include "vsi/odmr.hpp"

namespace vsi {

/// Invalid configuration; message names the offending key.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ImplantationConfig {
  std::string layout = "array";  // array | stripe
  int rows = 5;
  int cols = 10;
  double pitch_um = 2.0;
  std::int64_t dose = 40;
  double stripe_length_um = 1.5;
  double stripe_width_um = 1.5;
  double stripe_step_nm = 20.0;
  BeamStraggleModel beam;
  DamageYieldModel yield;

  bool operator==(const ImplantationConfig&) const = default;
};

struct EmitterConfig {
  EmitterRates rates = default_emitter_rates();

  bool operator==(const EmitterConfig&) const = default;
};

struct CorrelatorConfig {
  double bin_ns = 1.0;
  double tau_max_ns = 2000.0;

  bool operator==(const CorrelatorConfig&) const = default;
};

struct HbtConfig {
  int k_emitters = 1;
  double signal_kcps = 3.0;  // detected rate per emitter
  double background_kcps = 2.0;
  double power_mw = 0.65;
  double duration_s = 600.0;

  bool operator==(const HbtConfig&) const = default;
};

struct SaturationConfig {
  std::vector<double> powers_mw{0.1, 0.2, 0.35, 0.5, 0.75, 1.0, 2.0, 3.0};
  double duration_s = 20.0;

  bool operator==(const SaturationConfig&) const = default;
};

struct OdmrConfig {
  OdmrLine line;
  ModulationScheme scheme{2.8, 0.5, 10000};
  double photon_rate_kcps = 1000.0;
  double start_mhz = 40.0;
  double stop_mhz = 100.0;
  double step_mhz = 1.0;

  bool operator==(const OdmrConfig&) const = default;
};

struct ScannerConfig {
  double psf_sigma_nm = 150.0;
  double power_mw = 0.7;
  double background_kcps = 2.0;  // within one PSF area
  double dwell_ms = 5.0;
  double pixel_size_nm = 100.0;
  double threshold_sigma = 5.0;
  double min_separation_nm = 500.0;

  bool operator==(const ScannerConfig&) const = default;
};

struct DoseSweepConfig {
  std::vector<std::int64_t> doses{40, 70, 100, 200, 400, 700};
  int rows = 40;
  int cols = 40;

  bool operator==(const DoseSweepConfig&) const = default;
};

struct ExperimentConfig {
  std::uint64_t seed = 20170215;
  std::string output_dir = "out";
  ImplantationConfig implantation;
  EmitterConfig emitter;
  CorrelatorConfig correlator;
  HbtConfig hbt;
  SaturationConfig saturation;
  OdmrConfig odmr;
  ScannerConfig scanner;
  DoseSweepConfig dose_sweep;

  void validate() const;
  bool operator==(const ExperimentConfig&) const = default;
};

nlohmann::json to_json(const ExperimentConfig& config);
/// Missing keys take defaults; unknown keys and invalid values throw
/// ConfigError naming the key path.
ExperimentConfig config_from_json(const nlohmann::json& doc);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Reference values the report compares against.
inline constexpr double kTargetOdmrCenterMhz = 70.2;
inline constexpr double kTargetG2Zero = 0.35;
inline constexpr double kTargetSaturationKcps = 13.0;
inline constexpr double kTargetSaturationPowerMw = 0.48;
inline constexpr double kTargetLambda = 1.56;
inline constexpr double kTargetConversionYield = 0.039;
inline constexpr double kTargetSingleFraction = 0.38;

struct CommandOutcome {
  std::vector<std::filesystem::path> files;
  nlohmann::json summary;
};

CommandOutcome run_implant(const ExperimentConfig& config);
CommandOutcome run_hbt(const ExperimentConfig& config);
CommandOutcome run_saturation(const ExperimentConfig& config);
CommandOutcome run_odmr(const ExperimentConfig& config);
CommandOutcome run_dose_sweep(const ExperimentConfig& config);
CommandOutcome run_report(const ExperimentConfig& config);

/// Dispatch by subcommand name (implant, hbt, saturation, odmr, dose-sweep,
/// report).
CommandOutcome run_command(std::string_view name, const ExperimentConfig& config);
const std::vector<std::string>& command_names();

}  // namespace vsi
