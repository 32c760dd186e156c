#include "vsi/odmr.hpp"

#include <cmath>
#include <istream>
#include <ostream>
#include <random>
#include <string>

#include "vsi/random.hpp"
#include "vsi/text.hpp"

namespace vsi {

void OdmrLine::validate() const {
  if (!(fwhm_mhz > 0.0)) throw std::invalid_argument("ODMR fwhm must be > 0");
  if (!(std::abs(peak_contrast) < 1.0))
    throw std::invalid_argument("ODMR |peak_contrast| must be < 1");
}

void ModulationScheme::validate() const {
  if (!(half_cycle_ms > 0.0))
    throw std::invalid_argument("half-cycle duration must be > 0");
  if (!(duty_cycle > 0.0 && duty_cycle < 1.0))
    throw std::invalid_argument("duty cycle must be in (0, 1)");
  if (n_cycles < 1) throw std::invalid_argument("n_cycles must be >= 1");
}

double lorentzian(double f_mhz, const OdmrLine& line) {
  const double hw = 0.5 * line.fwhm_mhz;
  const double d = f_mhz - line.center_mhz;
  return line.baseline + line.peak_contrast * hw * hw / (d * d + hw * hw);
}

double compute_contrast(std::int64_t on_counts, std::int64_t off_counts) {
  if (off_counts <= 0)
    throw UndefinedContrastError("contrast undefined: no OFF counts");
  return static_cast<double>(on_counts - off_counts) /
         static_cast<double>(off_counts);
}

std::vector<OdmrPoint> simulate_odmr_sweep(const std::vector<double>& freqs_mhz,
                                           const OdmrLine& line,
                                           double photon_rate_kcps,
                                           const ModulationScheme& scheme,
                                           std::uint64_t seed) {
  line.validate();
  scheme.validate();
  if (!(photon_rate_kcps > 0.0))
    throw std::invalid_argument("photon rate must be > 0");
  // kcps * ms = counts
  const double cycles = static_cast<double>(scheme.n_cycles);
  const double on_exposure = photon_rate_kcps * scheme.on_ms() * cycles;
  const double off_exposure = photon_rate_kcps * scheme.off_ms() * cycles;
  const bool equal_windows = scheme.duty_cycle == 0.5;

  std::vector<OdmrPoint> out;
  out.reserve(freqs_mhz.size());
  for (std::size_t i = 0; i < freqs_mhz.size(); ++i) {
    const double f = freqs_mhz[i];
    auto rng = substream(seed, "odmr.freq", i);
    std::poisson_distribution<std::int64_t> on_dist(on_exposure *
                                                    (1.0 + lorentzian(f, line)));
    std::poisson_distribution<std::int64_t> off_dist(off_exposure);
    const auto on = on_dist(rng);
    const auto off = off_dist(rng);

    double contrast = 0.0;
    if (equal_windows) {
      contrast = compute_contrast(on, off);
    } else {
      if (off <= 0) throw UndefinedContrastError("contrast undefined: no OFF counts");
      contrast = (static_cast<double>(on) / scheme.on_ms()) /
                     (static_cast<double>(off) / scheme.off_ms()) - 1.0;
    }
    // Delta method on the ratio of two Poisson counts.
    const double on_eff = std::max<double>(static_cast<double>(on), 1.0);
    const double ratio = 1.0 + contrast;
    const double err =
        std::abs(ratio) * std::sqrt(1.0 / on_eff + 1.0 / static_cast<double>(off));
    out.push_back({f, contrast, err});
  }
  return out;
}

std::vector<double> frequency_grid(double start_mhz, double stop_mhz,
                                   double step_mhz) {
  if (!(step_mhz > 0.0) || !(stop_mhz >= start_mhz))
    throw std::invalid_argument("invalid frequency grid");
  const auto n = static_cast<std::size_t>(
      std::floor((stop_mhz - start_mhz) / step_mhz + 1e-9)) + 1;
  std::vector<double> f(n);
  for (std::size_t i = 0; i < n; ++i)
    f[i] = start_mhz + static_cast<double>(i) * step_mhz;
  return f;
}

void write_csv(std::ostream& os, const std::vector<OdmrPoint>& sweep) {
  os << "freq_mhz,contrast,std_error\n";
  for (const auto& p : sweep)
    os << fmt_num(p.freq_mhz) << ',' << fmt_num(p.contrast) << ','
       << fmt_num(p.std_error) << '\n';
}

std::vector<OdmrPoint> read_sweep_csv(std::istream& is) {
  std::vector<OdmrPoint> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#' || line.rfind("freq", 0) == 0) continue;
    const auto cols = split(line, ',');
    if (cols.size() < 3) throw std::runtime_error("sweep CSV row needs 3 columns");
    out.push_back({std::stod(cols[0]), std::stod(cols[1]), std::stod(cols[2])});
  }
  return out;
}

}  // namespace vsi
