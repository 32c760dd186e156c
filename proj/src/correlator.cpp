#include "vsi/correlator.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>

#include "vsi/text.hpp"

namespace vsi {

std::uint64_t RawHistogram::total() const {
  return std::accumulate(counts.begin(), counts.end(), std::uint64_t{0});
}

void CorrelationCurve::validate() const {
  if (tau_centers.size() != values.size() || values.size() != std_errors.size())
    throw std::invalid_argument("correlation curve columns differ in length");
  if (!(bin_width_ns > 0.0))
    throw std::invalid_argument("correlation curve bin width must be > 0");
  const std::size_t n = tau_centers.size();
  for (std::size_t i = 0; i < n / 2; ++i)
    if (std::abs(tau_centers[i] + tau_centers[n - 1 - i]) > 1e-9 * bin_width_ns)
      throw std::invalid_argument("correlation curve tau axis is not symmetric");
}

std::pair<PhotonStream, PhotonStream> split_stream(const PhotonStream& stream,
                                                   std::uint64_t seed) {
  auto rng = substream(seed, "beamsplitter");
  PhotonStream a;
  PhotonStream b;
  a.duration_ns = b.duration_ns = stream.duration_ns;
  a.channel = Channel::detector_a;
  b.channel = Channel::detector_b;
  a.timestamps.reserve(stream.size() / 2 + 16);
  b.timestamps.reserve(stream.size() / 2 + 16);
  // One random bit per photon, drawn 64 at a time.
  std::uint64_t bits = 0;
  int left = 0;
  for (auto t : stream.timestamps) {
    if (left == 0) {
      bits = rng();
      left = 64;
    }
    (bits & 1U ? b : a).timestamps.push_back(t);
    bits >>= 1;
    --left;
  }
  return {std::move(a), std::move(b)};
}

RawHistogram make_histogram(double bin_ns, double tau_max_ns) {
  if (!(bin_ns > 0.0)) throw std::invalid_argument("bin width must be > 0");
  if (!(tau_max_ns >= bin_ns))
    throw std::invalid_argument("tau_max must be >= bin width");
  RawHistogram h;
  h.bin_ns = bin_ns;
  h.tau_max_ns = tau_max_ns;
  h.half_bins = static_cast<std::int64_t>(std::floor(tau_max_ns / bin_ns + 0.5));
  h.counts.assign(static_cast<std::size_t>(2 * h.half_bins + 1), 0);
  return h;
}

std::int64_t bin_of(const RawHistogram& h, std::int64_t tau_ns) {
  return static_cast<std::int64_t>(
             std::floor(static_cast<double>(tau_ns) / h.bin_ns + 0.5)) +
         h.half_bins;
}

namespace {

void require_sorted(const PhotonStream& s, const char* which) {
  if (!std::is_sorted(s.timestamps.begin(), s.timestamps.end()))
    throw std::invalid_argument(std::string("stream ") + which + " is not sorted");
}

}  // namespace

RawHistogram coincidence_histogram(const PhotonStream& a, const PhotonStream& b,
                                   double bin_ns, double tau_max_ns) {
  auto h = make_histogram(bin_ns, tau_max_ns);
  require_sorted(a, "a");
  require_sorted(b, "b");
  // Delays are integers, so |tau| <= tau_max iff |tau| <= floor(tau_max).
  const auto reach = static_cast<std::int64_t>(std::floor(tau_max_ns));
  const auto& tb = b.timestamps;
  const std::size_t nb = tb.size();
  std::size_t lo = 0;
  for (auto ta : a.timestamps) {
    while (lo < nb && tb[lo] < ta - reach) ++lo;
    for (std::size_t j = lo; j < nb && tb[j] <= ta + reach; ++j)
      ++h.counts[static_cast<std::size_t>(bin_of(h, tb[j] - ta))];
  }
  return h;
}

RawHistogram brute_force_histogram(const PhotonStream& a, const PhotonStream& b,
                                   double bin_ns, double tau_max_ns) {
  auto h = make_histogram(bin_ns, tau_max_ns);
  for (auto ta : a.timestamps)
    for (auto tb : b.timestamps) {
      const std::int64_t tau = tb - ta;
      if (std::abs(static_cast<double>(tau)) <= tau_max_ns)
        ++h.counts[static_cast<std::size_t>(bin_of(h, tau))];
    }
  return h;
}

CorrelationCurve normalize_histogram(const RawHistogram& hist, double rate_a_kcps,
                                     double rate_b_kcps, std::int64_t duration_ns) {
  if (duration_ns <= 0)
    throw std::invalid_argument("normalize_histogram: duration must be > 0");
  if (!(rate_a_kcps > 0.0 && rate_b_kcps > 0.0))
    throw std::invalid_argument("normalize_histogram: rates must be > 0");
  const double expected_per_bin = rate_a_kcps * 1e-6 * rate_b_kcps * 1e-6 *
                                  static_cast<double>(duration_ns) * hist.bin_ns;
  const double unit = 1.0 / expected_per_bin;
  CorrelationCurve c;
  c.bin_width_ns = hist.bin_ns;
  c.normalized = true;
  c.unit_error = unit;
  c.count_offset = 0.0;
  c.tau_centers.reserve(hist.size());
  c.values.reserve(hist.size());
  c.std_errors.reserve(hist.size());
  for (std::size_t k = 0; k < hist.size(); ++k) {
    const auto n = static_cast<double>(hist.counts[k]);
    c.tau_centers.push_back(hist.center(k));
    c.values.push_back(n * unit);
    c.std_errors.push_back(std::sqrt(n) * unit);
  }
  return c;
}

double signal_fraction(const SignalBackground& sb) {
  if (!(sb.signal_kcps >= 0.0 && sb.background_kcps >= 0.0))
    throw std::invalid_argument("signal and background must be >= 0");
  const double total = sb.signal_kcps + sb.background_kcps;
  if (!(total > 0.0))
    throw std::invalid_argument("signal + background must be > 0");
  return sb.signal_kcps / total;
}

CorrelationCurve background_correct(const CorrelationCurve& curve, double rho) {
  if (!(rho > 0.0 && rho <= 1.0))
    throw std::invalid_argument("background_correct: rho must be in (0, 1]");
  if (!curve.normalized || curve.corrected)
    throw std::invalid_argument(
        "background_correct: expects a normalized, uncorrected curve");
  const double rho2 = rho * rho;
  const double floor = 1.0 - rho2;
  CorrelationCurve out = curve;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out.values[i] = (curve.values[i] - floor) / rho2;
    out.std_errors[i] = curve.std_errors[i] / rho2;
  }
  out.unit_error = curve.unit_error / rho2;
  out.count_offset = (curve.count_offset - floor) / rho2;
  out.corrected = true;
  return out;
}

CorrelationCurve background_uncorrect(const CorrelationCurve& curve, double rho) {
  if (!(rho > 0.0 && rho <= 1.0))
    throw std::invalid_argument("background_uncorrect: rho must be in (0, 1]");
  if (!curve.corrected)
    throw std::invalid_argument("background_uncorrect: curve is not corrected");
  const double rho2 = rho * rho;
  const double floor = 1.0 - rho2;
  CorrelationCurve out = curve;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out.values[i] = rho2 * curve.values[i] + floor;
    out.std_errors[i] = curve.std_errors[i] * rho2;
  }
  out.unit_error = curve.unit_error * rho2;
  out.count_offset = curve.count_offset * rho2 + floor;
  out.corrected = false;
  return out;
}

void write_csv(std::ostream& os, const CorrelationCurve& curve) {
  os << "# bin_width_ns=" << fmt_num(curve.bin_width_ns)
     << ",normalized=" << (curve.normalized ? 1 : 0)
     << ",corrected=" << (curve.corrected ? 1 : 0)
     << ",unit_error=" << fmt_num(curve.unit_error)
     << ",count_offset=" << fmt_num(curve.count_offset) << '\n';
  os << "tau_ns,value,std_error\n";
  for (std::size_t i = 0; i < curve.size(); ++i)
    os << fmt_num(curve.tau_centers[i]) << ',' << fmt_num(curve.values[i]) << ','
       << fmt_num(curve.std_errors[i]) << '\n';
}

CorrelationCurve read_curve_csv(std::istream& is) {
  CorrelationCurve c;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      for (const auto& field : split(line.substr(1), ',')) {
        const auto eq = field.find('=');
        if (eq == std::string::npos) continue;
        const auto key = trim(field.substr(0, eq));
        const double v = std::stod(field.substr(eq + 1));
        if (key == "bin_width_ns") c.bin_width_ns = v;
        else if (key == "normalized") c.normalized = v != 0.0;
        else if (key == "corrected") c.corrected = v != 0.0;
        else if (key == "unit_error") c.unit_error = v;
        else if (key == "count_offset") c.count_offset = v;
      }
      continue;
    }
    if (line.rfind("tau_ns", 0) == 0) continue;
    const auto cols = split(line, ',');
    if (cols.size() < 3) throw std::runtime_error("curve CSV row needs 3 columns");
    c.tau_centers.push_back(std::stod(cols[0]));
    c.values.push_back(std::stod(cols[1]));
    c.std_errors.push_back(std::stod(cols[2]));
  }
  c.validate();
  return c;
}

}  // namespace vsi
