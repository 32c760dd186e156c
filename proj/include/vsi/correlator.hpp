#pragma once

#include <cstdint>
#include <iosfwd>
#include <utility>
#include <vector>

#include "vsi/emitter.hpp"

namespace vsi {

/// Raw delay histogram of tau = t_b - t_a. Bin i covers
/// [(i - 0.5) * bin_ns, (i + 0.5) * bin_ns) for i in [-half_bins, half_bins];
/// only pairs with |tau| <= tau_max_ns are counted.
struct RawHistogram {
  double bin_ns = 1.0;
  double tau_max_ns = 0.0;
  std::int64_t half_bins = 0;
  std::vector<std::uint64_t> counts;  // index i + half_bins

  std::size_t size() const { return counts.size(); }
  double center(std::size_t k) const {
    return static_cast<double>(static_cast<std::int64_t>(k) - half_bins) * bin_ns;
  }
  std::uint64_t total() const;
  bool operator==(const RawHistogram&) const = default;
};

/// C_N(tau) or background-corrected g2(tau). Each value is an affine image
/// of the raw count in its bin: value = count_offset + count * unit_error,
/// so fitters can recover expected counts from a model curve.
struct CorrelationCurve {
  std::vector<double> tau_centers;
  std::vector<double> values;
  std::vector<double> std_errors;
  double bin_width_ns = 1.0;
  bool normalized = false;
  bool corrected = false;
  double unit_error = 0.0;
  double count_offset = 0.0;

  std::size_t size() const { return values.size(); }
  void validate() const;
};

struct SignalBackground {
  double signal_kcps = 0.0;
  double background_kcps = 0.0;
};

/// 50/50 beamsplitter. Outputs keep the input duration.
std::pair<PhotonStream, PhotonStream> split_stream(const PhotonStream& stream,
                                                   std::uint64_t seed);

RawHistogram make_histogram(double bin_ns, double tau_max_ns);

/// Bin index (offset by half_bins) for an in-window delay.
std::int64_t bin_of(const RawHistogram& h, std::int64_t tau_ns);

/// Sliding-window full correlation, O(n_a + n_b + pairs).
RawHistogram coincidence_histogram(const PhotonStream& a, const PhotonStream& b,
                                   double bin_ns, double tau_max_ns);

/// O(n_a * n_b) reference used to check coincidence_histogram.
RawHistogram brute_force_histogram(const PhotonStream& a, const PhotonStream& b,
                                   double bin_ns, double tau_max_ns);

/// counts / (rate_a * rate_b * duration * bin), rates in kcps.
CorrelationCurve normalize_histogram(const RawHistogram& hist, double rate_a_kcps,
                                     double rate_b_kcps, std::int64_t duration_ns);

double signal_fraction(const SignalBackground& sb);

/// g2 = (C_N - (1 - rho^2)) / rho^2.
CorrelationCurve background_correct(const CorrelationCurve& curve, double rho);

/// Inverse of background_correct: C_N = rho^2 g2 + 1 - rho^2.
CorrelationCurve background_uncorrect(const CorrelationCurve& curve, double rho);

/// Columns tau_ns,value,std_error. Leading comment row carries bin width and
/// flags: "# bin_width_ns=1,normalized=1,corrected=1,unit_error=..,count_offset=..".
void write_csv(std::ostream& os, const CorrelationCurve& curve);
CorrelationCurve read_curve_csv(std::istream& is);

}  // namespace vsi
