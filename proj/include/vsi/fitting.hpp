#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vsi/correlator.hpp"
#include "vsi/emitter.hpp"
#include "vsi/odmr.hpp"

namespace vsi {

class RankDeficientError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ModelId { linear, lorentzian, g2, saturation };

/// A smooth model y = f(x; theta) with an analytic gradient in theta and an
/// unconstrained internal parameterization u used by the optimizer.
struct ParametricModel {
  ModelId id = ModelId::linear;
  std::string name;
  std::vector<std::string> param_names;
  std::function<double(double, std::span<const double>)> value;
  std::function<void(double, std::span<const double>, std::span<double>)> gradient;
  std::function<std::vector<double>(std::span<const double>)> to_internal;
  std::function<std::vector<double>(std::span<const double>)> to_external;
  /// Row-major d theta / d u evaluated at u.
  std::function<std::vector<double>(std::span<const double>)> external_jacobian;
  /// Internal coordinates that are logarithms; empty means none.
  std::vector<bool> log_scale;

  std::size_t size() const { return param_names.size(); }
};

/// linear: slope. lorentzian: center_mhz, fwhm_mhz, peak_contrast, baseline.
/// g2: a, b, tau_1, tau_2 (tau_1 < tau_2). saturation: i_s, p_0.
const ParametricModel& builtin_model(ModelId id);

struct DataPoint {
  double x = 0.0;
  double y = 0.0;
  double sigma = 1.0;
};

struct FitOptions {
  int max_iterations = 200;
  double chi2_rel_tol = 1e-10;
  double grad_tol = 1e-8;
  double initial_damping = 1e-3;
  double rank_rcond = 1e-13;
  /// Log-coordinates with Fisher information below this are reported as
  /// unidentifiable (1e-8 means sigma(log theta) > 1e4).
  double min_log_information = 1e-8;
  /// Parameters held at their initial value, by index; empty means all free.
  /// The mask acts on internal coordinates (for g2: log tau_1 and
  /// log(tau_2 - tau_1)).
  std::vector<bool> fixed;
};

struct FitResult {
  std::string model;
  std::vector<std::string> names;
  std::vector<double> params;
  std::vector<double> std_errors;
  std::vector<std::vector<double>> covariance;
  double chi2 = 0.0;
  double residual_norm = 0.0;  // sqrt(chi2)
  int dof = 0;
  bool converged = false;
  int n_iterations = 0;

  double param(const std::string& name) const;
  double error(const std::string& name) const;
  double cov(const std::string& a, const std::string& b) const;
};

/// Weighted least squares by damped Gauss-Newton (Levenberg-Marquardt
/// schedule, x10 / /10). Throws RankDeficientError when the normal matrix
/// is singular at the solution; returns converged=false when the iteration
/// budget runs out.
FitResult fit_curve(const ParametricModel& model, std::span<const DataPoint> data,
                    std::span<const double> init, const FitOptions& options = {});

/// g2 model averaged over histogram bins of the given width, same parameters
/// as the g2 builtin. Matches what a binned coincidence histogram measures.
ParametricModel binned_g2_model(double bin_width_ns);

struct G2FitOptions {
  FitOptions engine;
  /// Compare each bin with the model averaged over the bin instead of the
  /// model at the bin centre.
  bool bin_averaged = true;
  /// Refits with weights from model-predicted counts instead of observed
  /// counts; removes the low-count bias of sqrt(N) weights.
  int reweight_passes = 2;
};

struct G2Fit {
  FitResult fit;
  double g2_zero = 0.0;
  double g2_zero_error = 0.0;
};

G2Fit fit_g2(const CorrelationCurve& curve, const G2Params& init,
             const G2FitOptions& options = {});

FitResult fit_lorentzian(const std::vector<OdmrPoint>& sweep, const OdmrLine& init,
                         const FitOptions& options = {});

struct SaturationPoint {
  double power_mw = 0.0;
  double rate_kcps = 0.0;
  double sigma = 0.0;
};

FitResult fit_saturation(const std::vector<SaturationPoint>& points,
                         const SaturationParams& init,
                         const FitOptions& options = {});

struct CountHistogram {
  std::vector<std::int64_t> k_values;
  std::vector<std::int64_t> frequencies;
  std::int64_t n_spots = 0;

  void validate() const;
  std::int64_t frequency(std::int64_t k) const;
};

CountHistogram histogram_from_counts(std::span<const std::int64_t> counts);
CountHistogram histogram_from_map(const std::map<std::int64_t, std::int64_t>& freq);

struct PoissonFit {
  double lambda = 0.0;
  double std_error = 0.0;
  double chi2 = 0.0;
  int dof = 0;
  double p_value = 1.0;
  int pooled_bins = 0;
  bool degenerate = false;
};

double poisson_pmf(std::int64_t k, double lambda);
PoissonFit fit_poisson(const CountHistogram& hist);
double conversion_yield(double lambda, double dose);
double single_emitter_fraction(const CountHistogram& hist);

nlohmann::json to_json(const FitResult& fit);
nlohmann::json to_json(const PoissonFit& fit);

}  // namespace vsi
