#include "vsi/emitter.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <ostream>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace vsi {

namespace {

constexpr double kKcpsPerInverseNs = 1e6;  // 1/ns = 1e9 /s = 1e6 kcps

}  // namespace

void SaturationParams::validate() const {
  if (!(i_s > 0.0 && p_0 > 0.0))
    throw std::invalid_argument("saturation parameters must be > 0");
}

void G2Params::validate() const {
  if (!(tau_1 > 0.0 && tau_2 > 0.0))
    throw std::invalid_argument("g2 time constants must be > 0");
  if (!(a >= 0.0 && b >= 0.0))
    throw std::invalid_argument("g2 amplitudes must be >= 0");
  if (!(1.0 - a + b >= -1e-12))
    throw std::invalid_argument("g2(0) = 1 - a + b must be >= 0");
}

void EmitterRates::validate() const {
  if (!(k_pump_per_mW > 0.0 && k_rad > 0.0 && k_isc > 0.0 &&
        k_deshelve > 0.0))
    throw std::invalid_argument("emitter rates must all be > 0");
  if (!(detection_efficiency > 0.0 && detection_efficiency <= 1.0))
    throw std::invalid_argument("detection efficiency must be in (0, 1]");
}

double PhotonStream::rate_kcps() const {
  if (duration_ns <= 0) return 0.0;
  return static_cast<double>(timestamps.size()) /
         static_cast<double>(duration_ns) * kKcpsPerInverseNs;
}

void PhotonStream::validate() const {
  if (duration_ns <= 0)
    throw std::invalid_argument("photon stream duration must be > 0");
  if (!std::is_sorted(timestamps.begin(), timestamps.end()))
    throw std::invalid_argument("photon stream timestamps are not sorted");
  if (!timestamps.empty() &&
      (timestamps.front() < 0 || timestamps.back() >= duration_ns))
    throw std::invalid_argument("photon stream timestamp outside [0, duration)");
}

std::string to_string(Channel channel) {
  switch (channel) {
    case Channel::combined: return "combined";
    case Channel::detector_a: return "detector_a";
    case Channel::detector_b: return "detector_b";
  }
  return "unknown";
}

double saturation_rate(const SaturationParams& params, double power_mw) {
  if (!(power_mw > 0.0))
    throw std::invalid_argument("saturation_rate: power must be > 0");
  return params.i_s / (1.0 + params.p_0 / power_mw);
}

double g2_model(const G2Params& p, double tau_ns) {
  const double t = std::abs(tau_ns);
  return 1.0 - p.a * std::exp(-t / p.tau_1) + p.b * std::exp(-t / p.tau_2);
}

std::array<double, 3> steady_state(const EmitterRates& r, double power_mw) {
  const double kp = r.k_pump_per_mW * power_mw;
  const double excited =
      1.0 / (1.0 + (r.k_rad + r.k_isc) / kp + r.k_isc / r.k_deshelve);
  const double ground = excited * (r.k_rad + r.k_isc) / kp;
  const double shelf = excited * r.k_isc / r.k_deshelve;
  return {ground, excited, shelf};
}

double detected_rate_kcps(const EmitterRates& rates, double power_mw) {
  rates.validate();
  if (!(power_mw > 0.0)) throw std::invalid_argument("power must be > 0");
  return rates.detection_efficiency * rates.k_rad *
         steady_state(rates, power_mw)[1] * kKcpsPerInverseNs;
}

SaturationParams saturation_from_rates(const EmitterRates& r) {
  r.validate();
  const double shelving = 1.0 + r.k_isc / r.k_deshelve;
  return {r.detection_efficiency * r.k_rad / shelving * kKcpsPerInverseNs,
          (r.k_rad + r.k_isc) / (shelving * r.k_pump_per_mW)};
}

EmitterRates calibrate_rates(const SaturationParams& target, double k_rad,
                             double k_isc, double k_deshelve) {
  target.validate();
  const double shelving = 1.0 + k_isc / k_deshelve;
  EmitterRates r;
  r.k_rad = k_rad;
  r.k_isc = k_isc;
  r.k_deshelve = k_deshelve;
  r.k_pump_per_mW = (k_rad + k_isc) / (shelving * target.p_0);
  r.detection_efficiency = target.i_s / kKcpsPerInverseNs * shelving / k_rad;
  r.validate();
  return r;
}

EmitterRates default_emitter_rates() {
  return calibrate_rates(SaturationParams{13.0, 0.48}, 0.16, 0.02, 0.01);
}

EmitterRates with_detected_rate(const EmitterRates& rates, double power_mw,
                                double target_kcps) {
  if (!(target_kcps > 0.0))
    throw std::invalid_argument("target detected rate must be > 0");
  EmitterRates out = rates;
  out.detection_efficiency *= target_kcps / detected_rate_kcps(rates, power_mw);
  if (out.detection_efficiency > 1.0)
    throw std::invalid_argument(
        "target rate needs a detection efficiency above 1");
  return out;
}

G2Params g2_from_rates(const EmitterRates& r, double power_mw) {
  r.validate();
  if (!(power_mw > 0.0)) throw std::invalid_argument("power must be > 0");
  const double kp = r.k_pump_per_mW * power_mw;
  // Non-zero eigenvalues of the 3x3 generator are -lambda, with lambda the
  // roots of lambda^2 - trace*lambda + det = 0.
  const double trace = kp + r.k_rad + r.k_isc + r.k_deshelve;
  const double det = kp * r.k_isc + kp * r.k_deshelve +
                     r.k_rad * r.k_deshelve + r.k_isc * r.k_deshelve;
  const double disc = trace * trace - 4.0 * det;
  if (!(disc > 0.0))
    throw std::invalid_argument("degenerate rate eigenvalues");
  const double root = std::sqrt(disc);
  const double fast = 0.5 * (trace + root);
  const double slow = det / fast;  // avoids cancellation in trace - root
  const double excited = steady_state(r, power_mw)[1];
  // P(excited | ground at 0) = E_ss + c1 e^{-fast t} + c2 e^{-slow t},
  // with value 0 and slope kp at t = 0.
  const double a = (kp / excited - slow) / (fast - slow);
  return {a, a - 1.0, 1.0 / fast, 1.0 / slow};
}

// ---- detected-photon renewal sampler ----

DetectionTimeSampler::DetectionTimeSampler(const EmitterRates& r,
                                           double power_mw) {
  r.validate();
  if (!(power_mw > 0.0)) throw std::invalid_argument("power must be > 0");
  const double kp = r.k_pump_per_mW * power_mw;
  const double eta = r.detection_efficiency;
  // Sub-generator without the detected transition (row = from-state).
  Eigen::Matrix3d sub;
  sub << -kp, kp, 0.0,
      (1.0 - eta) * r.k_rad, -(r.k_rad + r.k_isc), r.k_isc,
      r.k_deshelve, 0.0, -r.k_deshelve;
  Eigen::EigenSolver<Eigen::Matrix3d> solver(sub);
  if (solver.info() != Eigen::Success)
    throw std::runtime_error("eigen-decomposition of emitter generator failed");
  const Eigen::Matrix3cd vecs = solver.eigenvectors();
  const Eigen::Vector3cd vals = solver.eigenvalues();
  const Eigen::Vector3cd right = vecs.inverse() * Eigen::Vector3cd::Ones();
  slowest_rate_ = std::numeric_limits<double>::infinity();
  for (int j = 0; j < 3; ++j) {
    eigenvalues_[j] = vals(j);
    slowest_rate_ = std::min(slowest_rate_, -vals(j).real());
    for (int s = 0; s < 3; ++s) weights_[s][j] = vecs(s, j) * right(j);
  }
  stationary_ = steady_state(r, power_mw);
}

double DetectionTimeSampler::survival(State from, double t) const {
  std::complex<double> sum = 0.0;
  for (int j = 0; j < 3; ++j)
    sum += weights_[from][j] * std::exp(eigenvalues_[j] * t);
  return sum.real();
}

double DetectionTimeSampler::density(State from, double t) const {
  std::complex<double> sum = 0.0;
  for (int j = 0; j < 3; ++j)
    sum += weights_[from][j] * eigenvalues_[j] * std::exp(eigenvalues_[j] * t);
  return -sum.real();
}

double DetectionTimeSampler::mean_time(State from) const {
  std::complex<double> sum = 0.0;
  for (int j = 0; j < 3; ++j) sum -= weights_[from][j] / eigenvalues_[j];
  return sum.real();
}

DetectionTimeSampler::State DetectionTimeSampler::sample_stationary_state(
    Engine& rng) const {
  const double u = uniform_open(rng);
  if (u < stationary_[0]) return ground;
  if (u < stationary_[0] + stationary_[1]) return excited;
  return shelf;
}

double DetectionTimeSampler::sample(State from, Engine& rng) const {
  // Invert the survival function: find t with S(t) = u.
  const double u = uniform_open(rng);
  double lo = 0.0;
  double hi = std::max(1.0, -std::log(u) / slowest_rate_);
  while (survival(from, hi) > u) {
    lo = hi;
    hi *= 2.0;
  }
  double t = 0.5 * (lo + hi);
  for (int iter = 0; iter < 200; ++iter) {
    const double excess = survival(from, t) - u;
    if (excess > 0.0)
      lo = t;
    else
      hi = t;
    const double f = density(from, t);
    double next = f > 0.0 ? t + excess / f : 0.5 * (lo + hi);
    if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
    if (std::abs(next - t) <= 1e-12 * std::max(1.0, t) || hi - lo <= 1e-12 * hi)
      return next;
    t = next;
  }
  return t;
}

// ---- stream synthesis ----

PhotonStream simulate_emitter_renewal(const EmitterRates& rates,
                                      double power_mw,
                                      std::int64_t duration_ns, Engine& rng) {
  if (duration_ns <= 0) throw std::invalid_argument("duration must be > 0");
  const DetectionTimeSampler sampler(rates, power_mw);
  PhotonStream out;
  out.duration_ns = duration_ns;
  const double end = static_cast<double>(duration_ns);
  double t = sampler.sample(sampler.sample_stationary_state(rng), rng);
  while (t < end) {
    out.timestamps.push_back(static_cast<std::int64_t>(t));
    t += sampler.sample(DetectionTimeSampler::ground, rng);
  }
  return out;
}

PhotonStream simulate_emitter_kinetic(const EmitterRates& r, double power_mw,
                                      std::int64_t duration_ns, Engine& rng) {
  r.validate();
  if (duration_ns <= 0) throw std::invalid_argument("duration must be > 0");
  if (!(power_mw > 0.0)) throw std::invalid_argument("power must be > 0");
  const double kp = r.k_pump_per_mW * power_mw;
  const double k_excited = r.k_rad + r.k_isc;
  const auto pop = steady_state(r, power_mw);

  PhotonStream out;
  out.duration_ns = duration_ns;
  const double end = static_cast<double>(duration_ns);
  const auto wait = [&](double rate) { return -std::log(uniform_open(rng)) / rate; };

  double u0 = uniform_open(rng);
  int state = u0 < pop[0] ? 0 : (u0 < pop[0] + pop[1] ? 1 : 2);
  double t = 0.0;
  while (true) {
    if (state == 0) {
      t += wait(kp);
      state = 1;
    } else if (state == 1) {
      t += wait(k_excited);
      if (t >= end) break;
      if (uniform_open(rng) * k_excited < r.k_rad) {
        state = 0;
        if (uniform_open(rng) < r.detection_efficiency)
          out.timestamps.push_back(static_cast<std::int64_t>(t));
      } else {
        state = 2;
      }
    } else {
      t += wait(r.k_deshelve);
      state = 0;
    }
    if (t >= end) break;
  }
  return out;
}

PhotonStream simulate_background(double background_kcps,
                                 std::int64_t duration_ns, Engine& rng) {
  if (!(background_kcps >= 0.0))
    throw std::invalid_argument("background rate must be >= 0");
  if (duration_ns <= 0) throw std::invalid_argument("duration must be > 0");
  PhotonStream out;
  out.duration_ns = duration_ns;
  if (background_kcps == 0.0) return out;
  const double rate = background_kcps / kKcpsPerInverseNs;
  const double end = static_cast<double>(duration_ns);
  double t = -std::log(uniform_open(rng)) / rate;
  while (t < end) {
    out.timestamps.push_back(static_cast<std::int64_t>(t));
    t += -std::log(uniform_open(rng)) / rate;
  }
  return out;
}

PhotonStream merge_streams(const std::vector<PhotonStream>& streams) {
  PhotonStream out;
  std::size_t total = 0;
  for (const auto& s : streams) {
    total += s.size();
    out.duration_ns = std::max(out.duration_ns, s.duration_ns);
  }
  out.timestamps.reserve(total);
  for (const auto& s : streams) {
    const auto mid = out.timestamps.size();
    out.timestamps.insert(out.timestamps.end(), s.timestamps.begin(),
                          s.timestamps.end());
    std::inplace_merge(out.timestamps.begin(),
                       out.timestamps.begin() + static_cast<std::ptrdiff_t>(mid),
                       out.timestamps.end());
  }
  return out;
}

PhotonStream simulate_photon_stream(int k_emitters, const EmitterRates& rates,
                                    double background_kcps, double power_mw,
                                    std::int64_t duration_ns,
                                    std::uint64_t seed,
                                    SimulationMethod method) {
  if (k_emitters < 0) throw std::invalid_argument("k_emitters must be >= 0");
  if (duration_ns <= 0) throw std::invalid_argument("duration must be > 0");
  std::vector<PhotonStream> parts;
  for (int i = 0; i < k_emitters; ++i) {
    auto rng = substream(seed, "emitter", static_cast<std::uint64_t>(i));
    parts.push_back(method == SimulationMethod::renewal
                        ? simulate_emitter_renewal(rates, power_mw, duration_ns, rng)
                        : simulate_emitter_kinetic(rates, power_mw, duration_ns, rng));
  }
  auto bg_rng = substream(seed, "background");
  parts.push_back(simulate_background(background_kcps, duration_ns, bg_rng));
  auto out = merge_streams(parts);
  out.duration_ns = duration_ns;
  out.channel = Channel::combined;
  return out;
}

IntensityTrace intensity_trace(const PhotonStream& stream, double bin_ms) {
  if (!(bin_ms > 0.0)) throw std::invalid_argument("bin width must be > 0");
  const double bin_ns = bin_ms * 1e6;
  const auto n_full =
      static_cast<std::size_t>(std::floor(static_cast<double>(stream.duration_ns) / bin_ns));
  IntensityTrace trace;
  trace.counts.assign(n_full, 0);
  for (auto t : stream.timestamps) {
    const double x = static_cast<double>(t) / bin_ns;
    const auto i = t == 0 ? std::size_t{0} : static_cast<std::size_t>(std::ceil(x) - 1.0);
    if (i < n_full)
      ++trace.counts[i];
    else
      ++trace.dropped;
  }
  return trace;
}

// ---- I/O ----

namespace {

void put_le(std::ostream& os, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_le(std::istream& is, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) {
    const int c = is.get();
    if (c == std::char_traits<char>::eof())
      throw std::runtime_error("truncated photon stream file");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return v;
}

}  // namespace

void write_binary(std::ostream& os, const PhotonStream& stream) {
  os.write("PHTS", 4);
  put_le(os, kPhotonStreamVersion, 2);
  put_le(os, static_cast<std::uint8_t>(stream.channel), 1);
  put_le(os, 0, 1);
  put_le(os, static_cast<std::uint64_t>(stream.duration_ns), 8);
  for (auto t : stream.timestamps) put_le(os, static_cast<std::uint64_t>(t), 8);
}

PhotonStream read_binary(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::string(magic, 4) != "PHTS")
    throw std::runtime_error("not a PHTS photon stream");
  if (get_le(is, 2) != kPhotonStreamVersion)
    throw std::runtime_error("unsupported PHTS version");
  const auto channel = get_le(is, 1);
  if (channel > 2) throw std::runtime_error("invalid PHTS channel");
  get_le(is, 1);
  PhotonStream out;
  out.channel = static_cast<Channel>(channel);
  out.duration_ns = static_cast<std::int64_t>(get_le(is, 8));
  while (is.peek() != std::char_traits<char>::eof())
    out.timestamps.push_back(static_cast<std::int64_t>(get_le(is, 8)));
  out.validate();
  return out;
}

void write_csv(std::ostream& os, const PhotonStream& stream) {
  for (auto t : stream.timestamps) os << t << '\n';
}

PhotonStream read_csv(std::istream& is, std::int64_t duration_ns,
                      Channel channel) {
  PhotonStream out;
  out.channel = channel;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::size_t used = 0;
    const long long t = std::stoll(line, &used);
    out.timestamps.push_back(t);
  }
  out.duration_ns = duration_ns >= 0
                        ? duration_ns
                        : (out.timestamps.empty() ? 1 : out.timestamps.back() + 1);
  out.validate();
  return out;
}

}  // namespace vsi
