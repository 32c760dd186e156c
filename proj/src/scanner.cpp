#include "vsi/scanner.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numbers>
#include <numeric>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>

#include <boost/math/special_functions/gamma.hpp>

#include "vsi/random.hpp"
#include "vsi/text.hpp"

namespace vsi {

namespace {

constexpr double kPsfCutoffSigmas = 6.0;
// Near-optimal disk radius for a Gaussian spot on a flat background.
constexpr double kDetectRadiusSigmas = 1.6;

std::int64_t clamp_index(double v, std::int64_t n) {
  return std::clamp<std::int64_t>(static_cast<std::int64_t>(std::floor(v)), 0, n - 1);
}

}  // namespace

std::int64_t ScanImage::total() const {
  return std::accumulate(pixels.begin(), pixels.end(), std::int64_t{0});
}

void ScanImage::validate() const {
  if (!(pixel_size_nm > 0.0)) throw std::invalid_argument("pixel size must be > 0");
  if (width < 0 || height < 0 ||
      pixels.size() != static_cast<std::size_t>(width * height))
    throw std::invalid_argument("image dimensions do not match pixel count");
  for (auto p : pixels)
    if (p < 0) throw std::invalid_argument("pixel counts must be >= 0");
}

void RenderParams::validate() const {
  if (!(psf_sigma_nm > 0.0 && per_defect_kcps > 0.0 && dwell_ms > 0.0 &&
        pixel_size_nm > 0.0))
    throw std::invalid_argument("render parameters must be > 0");
  if (!(background_kcps_per_px >= 0.0))
    throw std::invalid_argument("background per pixel must be >= 0");
}

double background_per_pixel(double background_kcps, double psf_sigma_nm,
                            double pixel_size_nm) {
  const double psf_area = 2.0 * std::numbers::pi * psf_sigma_nm * psf_sigma_nm;
  return background_kcps * pixel_size_nm * pixel_size_nm / psf_area;
}

ScanRegion region_for_plan(const ImplantPlan& plan, double pixel_size_nm,
                           double margin_nm) {
  if (plan.spots.empty()) return {{0.0, 0.0}, 1, 1};
  double x0 = plan.spots.front().center_nm.x;
  double x1 = x0;
  double y0 = plan.spots.front().center_nm.y;
  double y1 = y0;
  for (const auto& s : plan.spots) {
    x0 = std::min(x0, s.center_nm.x);
    x1 = std::max(x1, s.center_nm.x);
    y0 = std::min(y0, s.center_nm.y);
    y1 = std::max(y1, s.center_nm.y);
  }
  ScanRegion r;
  r.origin_nm = {x0 - margin_nm, y0 - margin_nm};
  r.width = static_cast<std::int64_t>(std::ceil((x1 - x0 + 2 * margin_nm) / pixel_size_nm)) + 1;
  r.height = static_cast<std::int64_t>(std::ceil((y1 - y0 + 2 * margin_nm) / pixel_size_nm)) + 1;
  return r;
}

std::vector<double> expected_counts(const DefectMap& defects, const RenderParams& p,
                                    const ScanRegion& region) {
  p.validate();
  const auto w = region.width;
  const auto h = region.height;
  std::vector<double> mu(static_cast<std::size_t>(w * h),
                         p.background_kcps_per_px * p.dwell_ms);
  const double px = p.pixel_size_nm;
  const double s2 = p.psf_sigma_nm * p.psf_sigma_nm;
  const double amplitude = p.per_defect_kcps * p.dwell_ms * px * px /
                           (2.0 * std::numbers::pi * s2);
  const double reach = kPsfCutoffSigmas * p.psf_sigma_nm;
  for (const auto& d : defects.defects) {
    const double fx = (d.position_nm.x - region.origin_nm.x) / px;
    const double fy = (d.position_nm.y - region.origin_nm.y) / px;
    const auto ix0 = clamp_index(fx - reach / px, w);
    const auto ix1 = clamp_index(fx + reach / px + 1.0, w);
    const auto iy0 = clamp_index(fy - reach / px, h);
    const auto iy1 = clamp_index(fy + reach / px + 1.0, h);
    for (auto iy = iy0; iy <= iy1; ++iy) {
      const double dy = region.origin_nm.y + static_cast<double>(iy) * px - d.position_nm.y;
      for (auto ix = ix0; ix <= ix1; ++ix) {
        const double dx = region.origin_nm.x + static_cast<double>(ix) * px - d.position_nm.x;
        const double r2 = dx * dx + dy * dy;
        if (r2 > reach * reach) continue;
        mu[static_cast<std::size_t>(iy * w + ix)] += amplitude * std::exp(-0.5 * r2 / s2);
      }
    }
  }
  return mu;
}

ScanImage render_scan(const DefectMap& defects, const RenderParams& params,
                      std::uint64_t seed) {
  params.validate();
  const ScanRegion region =
      params.region ? *params.region : region_for_plan(defects.plan, params.pixel_size_nm);
  if (region.width < 1 || region.height < 1)
    throw std::invalid_argument("scan region must have at least one pixel");
  const auto mu = expected_counts(defects, params, region);

  ScanImage img;
  img.width = region.width;
  img.height = region.height;
  img.origin_nm = region.origin_nm;
  img.pixel_size_nm = params.pixel_size_nm;
  img.dwell_ms = params.dwell_ms;
  img.pixels.resize(mu.size());
  // One substream per row keeps rows independent of evaluation order.
  for (std::int64_t iy = 0; iy < img.height; ++iy) {
    auto rng = substream(seed, "scan.row", static_cast<std::uint64_t>(iy));
    for (std::int64_t ix = 0; ix < img.width; ++ix) {
      const auto k = static_cast<std::size_t>(iy * img.width + ix);
      if (mu[k] > 0.0) {
        std::poisson_distribution<std::int64_t> draw(mu[k]);
        img.pixels[k] = draw(rng);
      }
    }
  }
  return img;
}

// ---- spot analysis ----

BackgroundLevel estimate_background(const std::vector<double>& values) {
  if (values.empty()) return {};
  std::vector<double> kept = values;
  BackgroundLevel level;
  for (int iter = 0; iter < 10; ++iter) {
    const double n = static_cast<double>(kept.size());
    const double mean = std::accumulate(kept.begin(), kept.end(), 0.0) / n;
    double var = 0.0;
    for (double v : kept) var += (v - mean) * (v - mean);
    const double sd = kept.size() > 1 ? std::sqrt(var / (n - 1.0)) : 0.0;
    level = {mean, sd};
    std::vector<double> next;
    next.reserve(kept.size());
    for (double v : kept)
      if (std::abs(v - mean) <= 3.0 * sd) next.push_back(v);
    if (next.size() == kept.size() || next.empty()) break;
    kept = std::move(next);
  }
  return level;
}

namespace {

std::vector<double> gaussian_kernel(double sigma_px) {
  const auto radius = static_cast<std::int64_t>(std::ceil(3.0 * sigma_px));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  for (std::int64_t i = -radius; i <= radius; ++i)
    kernel[static_cast<std::size_t>(i + radius)] =
        std::exp(-0.5 * static_cast<double>(i * i) / (sigma_px * sigma_px));
  const double norm = std::accumulate(kernel.begin(), kernel.end(), 0.0);
  for (auto& k : kernel) k /= norm;
  return kernel;
}

std::vector<double> smooth(const ScanImage& img, double sigma_px) {
  const auto kernel = gaussian_kernel(sigma_px);
  const auto radius = static_cast<std::int64_t>(kernel.size() / 2);

  const auto w = img.width;
  const auto h = img.height;
  // Separable pass with edge renormalization so borders keep the mean level.
  auto pass = [&](const std::vector<double>& in, bool horizontal) {
    std::vector<double> out(in.size(), 0.0);
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        double acc = 0.0;
        double wsum = 0.0;
        for (std::int64_t i = -radius; i <= radius; ++i) {
          const auto xx = horizontal ? x + i : x;
          const auto yy = horizontal ? y : y + i;
          if (xx < 0 || yy < 0 || xx >= w || yy >= h) continue;
          const double k = kernel[static_cast<std::size_t>(i + radius)];
          acc += k * in[static_cast<std::size_t>(yy * w + xx)];
          wsum += k;
        }
        out[static_cast<std::size_t>(y * w + x)] = acc / wsum;
      }
    return out;
  };
  std::vector<double> raw(img.pixels.begin(), img.pixels.end());
  return pass(pass(raw, true), false);
}

struct Aperture {
  double sum = 0.0;        // raw counts
  double pixels = 0.0;     // number of pixels
  double captured = 0.0;   // PSF fraction inside the aperture
  Vec2 centroid;
};

Aperture aperture(const ScanImage& img, Vec2 center, double radius_nm, double psf_sigma,
                  double background) {
  const double px = img.pixel_size_nm;
  const double fx = (center.x - img.origin_nm.x) / px;
  const double fy = (center.y - img.origin_nm.y) / px;
  const double rpx = radius_nm / px;
  const auto ix0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(fx - rpx)));
  const auto ix1 = std::min<std::int64_t>(img.width - 1, static_cast<std::int64_t>(std::ceil(fx + rpx)));
  const auto iy0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(fy - rpx)));
  const auto iy1 = std::min<std::int64_t>(img.height - 1, static_cast<std::int64_t>(std::ceil(fy + rpx)));
  const double s2 = psf_sigma * psf_sigma;
  const double psf_norm = px * px / (2.0 * std::numbers::pi * s2);

  Aperture a;
  double wx = 0.0;
  double wy = 0.0;
  double wsum = 0.0;
  for (auto iy = iy0; iy <= iy1; ++iy)
    for (auto ix = ix0; ix <= ix1; ++ix) {
      const Vec2 c = img.pixel_center(ix, iy);
      const double r2 = (c.x - center.x) * (c.x - center.x) + (c.y - center.y) * (c.y - center.y);
      if (r2 > radius_nm * radius_nm) continue;
      const auto v = static_cast<double>(img.at(ix, iy));
      a.sum += v;
      a.pixels += 1.0;
      a.captured += psf_norm * std::exp(-0.5 * r2 / s2);
      const double excess = std::max(0.0, v - background);
      wx += excess * c.x;
      wy += excess * c.y;
      wsum += excess;
    }
  a.centroid = wsum > 0.0 ? Vec2{wx / wsum, wy / wsum} : center;
  return a;
}

SpotStat photometry(const ScanImage& img, int id, Vec2 center, const DetectOptions& o,
                    double background) {
  const double radius = o.aperture_sigmas * o.psf_sigma_nm;
  const auto a = aperture(img, center, radius, o.psf_sigma_nm, background);
  SpotStat s;
  s.spot_id = id;
  s.centroid_nm = a.centroid;
  const double net = a.sum - background * a.pixels;
  s.integrated_kcps = a.captured > 0.0 ? std::max(0.0, net) / img.dwell_ms / a.captured : 0.0;
  return s;
}

}  // namespace

std::vector<SpotStat> detect_spots(const ScanImage& image, const DetectOptions& o) {
  image.validate();
  if (image.pixels.empty()) return {};
  const auto sm = smooth(image, o.psf_sigma_nm / image.pixel_size_nm);
  const auto bg = estimate_background(sm);
  const std::vector<double> raw(image.pixels.begin(), image.pixels.end());
  const double raw_bg = std::max(0.0, estimate_background(raw).mean);
  const auto w = image.width;
  const auto h = image.height;
  // Raw counts in a disk of kDetectRadiusSigmas * psf around a candidate
  // are Poisson under the background-only hypothesis; the candidate is kept
  // when their upper tail is below the one-sided Gaussian tail of
  // threshold_sigma. The expected count is floored at one so an empty
  // background does not make single photons significant.
  const double p_max = 0.5 * std::erfc(o.threshold_sigma / std::numbers::sqrt2);
  auto significant = [&](std::int64_t x, std::int64_t y) {
    const auto a = aperture(image, image.pixel_center(x, y),
                            kDetectRadiusSigmas * o.psf_sigma_nm, o.psf_sigma_nm, raw_bg);
    if (a.sum < 1.0) return false;
    const double mu = std::max(raw_bg * a.pixels, 1.0);
    return boost::math::gamma_p(a.sum, mu) < p_max;
  };

  std::vector<std::int64_t> peaks;
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      const auto k = y * w + x;
      const double v = sm[static_cast<std::size_t>(k)];
      bool is_max = true;
      for (std::int64_t dy = -1; dy <= 1 && is_max; ++dy)
        for (std::int64_t dx = -1; dx <= 1; ++dx) {
          if (dx == 0 && dy == 0) continue;
          const auto xx = x + dx;
          const auto yy = y + dy;
          if (xx < 0 || yy < 0 || xx >= w || yy >= h) continue;
          const auto kk = yy * w + xx;
          const double n = sm[static_cast<std::size_t>(kk)];
          // Plateaus: the first pixel in scan order wins.
          if (n > v || (n == v && kk < k)) {
            is_max = false;
            break;
          }
        }
      if (is_max && significant(x, y)) peaks.push_back(k);
    }

  std::stable_sort(peaks.begin(), peaks.end(), [&](auto l, auto r) {
    return sm[static_cast<std::size_t>(l)] > sm[static_cast<std::size_t>(r)];
  });
  std::vector<Vec2> accepted;
  const double min_sep2 = o.min_separation_nm * o.min_separation_nm;
  for (auto k : peaks) {
    const Vec2 c = image.pixel_center(k % w, k / w);
    const bool clear = std::none_of(accepted.begin(), accepted.end(), [&](const Vec2& a) {
      return (a.x - c.x) * (a.x - c.x) + (a.y - c.y) * (a.y - c.y) < min_sep2;
    });
    if (clear) accepted.push_back(c);
  }
  std::sort(accepted.begin(), accepted.end(),
            [](const Vec2& l, const Vec2& r) { return l.y != r.y ? l.y < r.y : l.x < r.x; });

  std::vector<SpotStat> out;
  out.reserve(accepted.size());
  for (std::size_t i = 0; i < accepted.size(); ++i) {
    // Re-centre the aperture on the centroid once.
    auto s = photometry(image, static_cast<int>(i), accepted[i], o, bg.mean);
    s = photometry(image, static_cast<int>(i), s.centroid_nm, o, bg.mean);
    out.push_back(s);
  }
  return out;
}

std::vector<SpotStat> measure_plan_spots(const ScanImage& image, const ImplantPlan& plan,
                                         const DetectOptions& o) {
  image.validate();
  const auto sm = smooth(image, o.psf_sigma_nm / image.pixel_size_nm);
  const auto bg = estimate_background(sm);
  std::vector<SpotStat> out;
  out.reserve(plan.spots.size());
  for (const auto& spot : plan.spots)
    out.push_back(photometry(image, spot.spot_id, spot.center_nm, o, bg.mean));
  return out;
}

double mean_counts_per_spot(const std::vector<SpotStat>& stats) {
  if (stats.empty()) throw std::invalid_argument("mean_counts_per_spot: no spots");
  double sum = 0.0;
  for (const auto& s : stats) sum += s.integrated_kcps;
  return sum / static_cast<double>(stats.size());
}

std::vector<SpotStat> classify_defect_number(std::vector<SpotStat> stats,
                                             double unit_brightness_kcps) {
  if (!(unit_brightness_kcps > 0.0))
    throw std::invalid_argument("unit brightness must be > 0");
  for (auto& s : stats)
    s.estimated_k = std::max<std::int64_t>(0, std::llround(s.integrated_kcps / unit_brightness_kcps));
  return stats;
}

// ---- I/O ----

void write_pgm(std::ostream& os, const ScanImage& image) {
  os << "P5\n" << image.width << ' ' << image.height << "\n65535\n";
  for (auto p : image.pixels) {
    const auto v = static_cast<std::uint16_t>(std::clamp<std::int64_t>(p, 0, 65535));
    os.put(static_cast<char>(v >> 8));
    os.put(static_cast<char>(v & 0xff));
  }
}

ScanImage read_pgm(std::istream& is) {
  std::string magic;
  is >> magic;
  if (magic != "P5") throw std::runtime_error("not a binary PGM");
  ScanImage img;
  int maxval = 0;
  is >> img.width >> img.height >> maxval;
  if (!is || maxval != 65535) throw std::runtime_error("expected a 16-bit PGM");
  is.get();
  img.pixels.resize(static_cast<std::size_t>(img.width * img.height));
  for (auto& p : img.pixels) {
    const int hi = is.get();
    const int lo = is.get();
    if (!is) throw std::runtime_error("truncated PGM");
    p = (hi << 8) | lo;
  }
  return img;
}

void write_csv(std::ostream& os, const ScanImage& image) {
  for (std::int64_t y = 0; y < image.height; ++y) {
    for (std::int64_t x = 0; x < image.width; ++x) {
      if (x) os << ',';
      os << image.at(x, y);
    }
    os << '\n';
  }
}

void write_csv(std::ostream& os, const std::vector<SpotStat>& stats) {
  os << "spot_id,x_nm,y_nm,integrated_kcps,estimated_k\n";
  for (const auto& s : stats)
    os << s.spot_id << ',' << fmt_num(s.centroid_nm.x) << ',' << fmt_num(s.centroid_nm.y)
       << ',' << fmt_num(s.integrated_kcps) << ',' << s.estimated_k << '\n';
}

}  // namespace vsi
