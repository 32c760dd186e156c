#pragma once

#include <array>
#include <complex>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "vsi/random.hpp"

namespace vsi {

/// I(P) = i_s / (1 + p_0 / P), i_s in kcps, p_0 in mW.
struct SaturationParams {
  double i_s = 13.0;
  double p_0 = 0.48;

  void validate() const;
};

/// g2(tau) = 1 - a exp(-|tau|/tau_1) + b exp(-|tau|/tau_2), taus in ns.
struct G2Params {
  double a = 0.0;
  double b = 0.0;
  double tau_1 = 1.0;
  double tau_2 = 1.0;

  void validate() const;
};

/// Three-level (ground / excited / shelf) rate model. Rates in 1/ns.
struct EmitterRates {
  double k_pump_per_mW = 0.0;
  double k_rad = 0.0;
  double k_isc = 0.0;
  double k_deshelve = 0.0;
  double detection_efficiency = 1.0;

  void validate() const;
  bool operator==(const EmitterRates&) const = default;
};

enum class Channel : std::uint8_t { combined = 0, detector_a = 1, detector_b = 2 };

struct PhotonStream {
  std::vector<std::int64_t> timestamps;  // ns, non-decreasing, < duration_ns
  std::int64_t duration_ns = 0;
  Channel channel = Channel::combined;

  std::size_t size() const { return timestamps.size(); }
  /// Mean detected rate in kcps.
  double rate_kcps() const;
  void validate() const;
};

double saturation_rate(const SaturationParams& params, double power_mw);
double g2_model(const G2Params& params, double tau_ns);

/// Analytic biexponential of the three-level model pumped at power_mw.
/// tau_1 is the fast (antibunching) time, tau_2 the slow (bunching) time.
G2Params g2_from_rates(const EmitterRates& rates, double power_mw);

/// Steady-state populations (ground, excited, shelf).
std::array<double, 3> steady_state(const EmitterRates& rates, double power_mw);

/// Detected steady-state rate of one emitter, kcps.
double detected_rate_kcps(const EmitterRates& rates, double power_mw);

/// Saturation law implied by a rate model (exact, not fitted).
SaturationParams saturation_from_rates(const EmitterRates& rates);

/// Chooses k_pump_per_mW and detection_efficiency so the model saturates at
/// target.i_s with saturation power target.p_0, keeping the given
/// radiative/shelving rates.
EmitterRates calibrate_rates(const SaturationParams& target, double k_rad,
                             double k_isc, double k_deshelve);

/// Default V_Si-like emitter: 6.25 ns radiative lifetime, 100 ns shelf,
/// calibrated to saturate at 13.0 kcps with P_0 = 0.48 mW.
EmitterRates default_emitter_rates();

/// Rescales detection efficiency so one emitter is detected at target_kcps
/// when pumped at power_mw. Throws if that needs an efficiency above 1.
EmitterRates with_detected_rate(const EmitterRates& rates, double power_mw,
                                double target_kcps);

enum class SimulationMethod {
  renewal,  // exact phase-type sampling of the time between detections
  kinetic,  // every state transition stepped explicitly
};

/// Union of k independent emitters and a Poisson background.
PhotonStream simulate_photon_stream(
    int k_emitters, const EmitterRates& rates, double background_kcps,
    double power_mw, std::int64_t duration_ns, std::uint64_t seed,
    SimulationMethod method = SimulationMethod::renewal);

/// One emitter, explicit competing-rates kinetic Monte Carlo.
PhotonStream simulate_emitter_kinetic(const EmitterRates& rates,
                                      double power_mw,
                                      std::int64_t duration_ns, Engine& rng);

/// One emitter via the detected-photon renewal process.
PhotonStream simulate_emitter_renewal(const EmitterRates& rates,
                                      double power_mw,
                                      std::int64_t duration_ns, Engine& rng);

PhotonStream simulate_background(double background_kcps,
                                 std::int64_t duration_ns, Engine& rng);

PhotonStream merge_streams(const std::vector<PhotonStream>& streams);

/// Time from a given start state to the next *detected* photon, in ns.
/// After a detection the emitter is always in the ground state, so the
/// detected stream is a renewal process with this phase-type law.
class DetectionTimeSampler {
 public:
  enum State { ground = 0, excited = 1, shelf = 2 };

  DetectionTimeSampler(const EmitterRates& rates, double power_mw);

  double survival(State from, double t_ns) const;
  double density(State from, double t_ns) const;
  double sample(State from, Engine& rng) const;
  State sample_stationary_state(Engine& rng) const;
  double mean_time(State from) const;

 private:
  std::array<std::complex<double>, 3> eigenvalues_{};
  // weights_[s][j]: survival(s, t) = Re sum_j weights_[s][j] exp(eig_j t)
  std::array<std::array<std::complex<double>, 3>, 3> weights_{};
  std::array<double, 3> stationary_{};
  double slowest_rate_ = 0.0;
};

struct IntensityTrace {
  std::vector<std::int64_t> counts;  // full bins only
  std::int64_t dropped = 0;          // photons in the trailing partial bin
};

/// Bins are right-closed: [0, w], (w, 2w], ... Only bins lying entirely
/// inside [0, duration] are kept.
IntensityTrace intensity_trace(const PhotonStream& stream, double bin_ms);

// ---- file formats ----
// Binary: 16-byte little-endian header
//   [0,4) "PHTS"  [4,6) u16 version  [6] u8 channel  [7] reserved
//   [8,16) u64 duration_ns
// followed by u64 little-endian timestamps.
inline constexpr std::uint16_t kPhotonStreamVersion = 1;

void write_binary(std::ostream& os, const PhotonStream& stream);
PhotonStream read_binary(std::istream& is);
void write_csv(std::ostream& os, const PhotonStream& stream);
/// CSV carries timestamps only; duration defaults to last timestamp + 1.
PhotonStream read_csv(std::istream& is, std::int64_t duration_ns = -1,
                      Channel channel = Channel::combined);

std::string to_string(Channel channel);

}  // namespace vsi
