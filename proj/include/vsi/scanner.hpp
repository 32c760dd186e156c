#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <vector>

#include "vsi/implantation.hpp"

namespace vsi {

/// Pixel (ix, iy) is centred at origin + (ix, iy) * pixel_size.
struct ScanImage {
  std::int64_t width = 0;
  std::int64_t height = 0;
  std::vector<std::int64_t> pixels;  // row-major, y outer
  double pixel_size_nm = 100.0;
  double dwell_ms = 5.0;
  Vec2 origin_nm;

  std::int64_t at(std::int64_t ix, std::int64_t iy) const {
    return pixels[static_cast<std::size_t>(iy * width + ix)];
  }
  Vec2 pixel_center(std::int64_t ix, std::int64_t iy) const {
    return {origin_nm.x + static_cast<double>(ix) * pixel_size_nm,
            origin_nm.y + static_cast<double>(iy) * pixel_size_nm};
  }
  std::int64_t total() const;
  void validate() const;
};

struct ScanRegion {
  Vec2 origin_nm;
  std::int64_t width = 0;
  std::int64_t height = 0;
};

struct RenderParams {
  double psf_sigma_nm = 150.0;
  double per_defect_kcps = 7.712;  // saturation law at 0.7 mW
  double background_kcps_per_px = 0.1415;
  double dwell_ms = 5.0;
  double pixel_size_nm = 100.0;
  /// Empty: plan bounding box plus a 1 um margin.
  std::optional<ScanRegion> region;

  void validate() const;
};

/// Background per pixel that adds up to background_kcps over one PSF area
/// (2 pi sigma^2).
double background_per_pixel(double background_kcps, double psf_sigma_nm,
                            double pixel_size_nm);

ScanRegion region_for_plan(const ImplantPlan& plan, double pixel_size_nm,
                           double margin_nm = 1000.0);

/// Expected (noise-free) counts per pixel.
std::vector<double> expected_counts(const DefectMap& defects,
                                    const RenderParams& params,
                                    const ScanRegion& region);

ScanImage render_scan(const DefectMap& defects, const RenderParams& params,
                      std::uint64_t seed);

struct SpotStat {
  int spot_id = 0;
  Vec2 centroid_nm;
  double integrated_kcps = 0.0;
  std::int64_t estimated_k = 0;
};

struct DetectOptions {
  double threshold_sigma = 5.0;
  double min_separation_nm = 500.0;
  /// Matched-filter width and the PSF used for aperture correction.
  double psf_sigma_nm = 150.0;
  /// Photometry aperture radius in units of psf_sigma.
  double aperture_sigmas = 3.0;
};

struct BackgroundLevel {
  double mean = 0.0;
  double stddev = 0.0;
};

/// Sigma-clipped mean and spread of an array of pixel values.
BackgroundLevel estimate_background(const std::vector<double>& values);

/// Local maxima of the PSF-smoothed image whose raw counts in a 1.6 sigma
/// disk exceed the background with Poisson tail probability below the
/// Gaussian tail of threshold_sigma. Spots closer than min_separation are
/// merged into the brighter one.
std::vector<SpotStat> detect_spots(const ScanImage& image, const DetectOptions& options);

/// Aperture photometry at every planned spot centre, including empty spots.
std::vector<SpotStat> measure_plan_spots(const ScanImage& image, const ImplantPlan& plan,
                                         const DetectOptions& options);

double mean_counts_per_spot(const std::vector<SpotStat>& stats);

/// estimated_k = round(integrated / unit), half away from zero, floored at 0.
std::vector<SpotStat> classify_defect_number(std::vector<SpotStat> stats,
                                             double unit_brightness_kcps);

// 16-bit binary PGM (P5, maxval 65535, big-endian samples); counts above
// 65535 are clipped.
void write_pgm(std::ostream& os, const ScanImage& image);
ScanImage read_pgm(std::istream& is);
void write_csv(std::ostream& os, const ScanImage& image);
void write_csv(std::ostream& os, const std::vector<SpotStat>& stats);

}  // namespace vsi
