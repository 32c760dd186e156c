#pragma once

#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <vector>

namespace vsi {

/// Resonance line expressed directly as fractional PL change.
struct OdmrLine {
  double center_mhz = 70.0;
  double fwhm_mhz = 10.0;
  double peak_contrast = -0.005;
  double baseline = 0.0;

  void validate() const;
  bool operator==(const OdmrLine&) const = default;
};

/// Square-wave microwave gating. One cycle lasts 2 * half_cycle_ms; the drive
/// is ON for duty_cycle of it.
struct ModulationScheme {
  double half_cycle_ms = 2.8;
  double duty_cycle = 0.5;
  std::int64_t n_cycles = 1000;

  void validate() const;
  bool operator==(const ModulationScheme&) const = default;
  double on_ms() const { return 2.0 * half_cycle_ms * duty_cycle; }
  double off_ms() const { return 2.0 * half_cycle_ms * (1.0 - duty_cycle); }
};

struct OdmrPoint {
  double freq_mhz = 0.0;
  double contrast = 0.0;
  double std_error = 0.0;
};

class UndefinedContrastError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

double lorentzian(double f_mhz, const OdmrLine& line);

/// (on - off) / off. Throws UndefinedContrastError when off is zero.
double compute_contrast(std::int64_t on_counts, std::int64_t off_counts);

std::vector<OdmrPoint> simulate_odmr_sweep(const std::vector<double>& freqs_mhz,
                                           const OdmrLine& line,
                                           double photon_rate_kcps,
                                           const ModulationScheme& scheme,
                                           std::uint64_t seed);

/// Evenly spaced sweep including both ends.
std::vector<double> frequency_grid(double start_mhz, double stop_mhz,
                                   double step_mhz);

void write_csv(std::ostream& os, const std::vector<OdmrPoint>& sweep);
std::vector<OdmrPoint> read_sweep_csv(std::istream& is);

}  // namespace vsi
