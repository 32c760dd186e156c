#include "vsi/fitting.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <utility>

#include <Eigen/Dense>
#include <boost/math/special_functions/gamma.hpp>

namespace vsi {

namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

std::vector<double> identity_map(std::span<const double> v) {
  return {v.begin(), v.end()};
}

// Builds a model whose internal parameters are theta, or log(theta) for the
// flagged positive entries.
ParametricModel with_log_params(ParametricModel m, std::vector<bool> positive) {
  m.to_internal = [positive](std::span<const double> theta) {
    std::vector<double> u(theta.begin(), theta.end());
    for (std::size_t i = 0; i < u.size(); ++i)
      if (positive[i]) {
        if (!(u[i] > 0.0))
          throw std::invalid_argument("initial value of a positive parameter must be > 0");
        u[i] = std::log(u[i]);
      }
    return u;
  };
  m.to_external = [positive](std::span<const double> u) {
    std::vector<double> theta(u.begin(), u.end());
    for (std::size_t i = 0; i < theta.size(); ++i)
      if (positive[i]) theta[i] = std::exp(theta[i]);
    return theta;
  };
  m.external_jacobian = [positive](std::span<const double> u) {
    const std::size_t n = u.size();
    std::vector<double> g(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) g[i * n + i] = positive[i] ? std::exp(u[i]) : 1.0;
    return g;
  };
  m.log_scale = positive;
  return m;
}

ParametricModel make_linear() {
  ParametricModel m;
  m.id = ModelId::linear;
  m.name = "linear";
  m.param_names = {"slope"};
  m.value = [](double x, std::span<const double> p) { return p[0] * x; };
  m.gradient = [](double x, std::span<const double>, std::span<double> g) { g[0] = x; };
  m.to_internal = identity_map;
  m.to_external = identity_map;
  m.external_jacobian = [](std::span<const double>) { return std::vector<double>{1.0}; };
  return m;
}

ParametricModel make_lorentzian() {
  ParametricModel m;
  m.id = ModelId::lorentzian;
  m.name = "lorentzian";
  m.param_names = {"center_mhz", "fwhm_mhz", "peak_contrast", "baseline"};
  m.value = [](double f, std::span<const double> p) {
    const double h = 0.5 * p[1];
    const double d = f - p[0];
    return p[3] + p[2] * h * h / (d * d + h * h);
  };
  m.gradient = [](double f, std::span<const double> p, std::span<double> g) {
    const double h = 0.5 * p[1];
    const double d = f - p[0];
    const double q = d * d + h * h;
    g[0] = p[2] * h * h * 2.0 * d / (q * q);
    g[1] = p[2] * h * d * d / (q * q);
    g[2] = h * h / q;
    g[3] = 1.0;
  };
  return with_log_params(m, {false, true, false, false});
}

ParametricModel make_saturation() {
  ParametricModel m;
  m.id = ModelId::saturation;
  m.name = "saturation";
  m.param_names = {"i_s", "p_0"};
  m.value = [](double power, std::span<const double> p) {
    return p[0] / (1.0 + p[1] / power);
  };
  m.gradient = [](double power, std::span<const double> p, std::span<double> g) {
    const double s = power + p[1];
    g[0] = power / s;
    g[1] = -p[0] * power / (s * s);
  };
  return with_log_params(m, {true, true});
}

// tau_1 = exp(u2), tau_2 = tau_1 + exp(u3): keeps tau_1 < tau_2.
ParametricModel make_g2() {
  ParametricModel m;
  m.id = ModelId::g2;
  m.name = "g2";
  m.param_names = {"a", "b", "tau_1", "tau_2"};
  m.value = [](double tau, std::span<const double> p) {
    const double t = std::abs(tau);
    return 1.0 - p[0] * std::exp(-t / p[2]) + p[1] * std::exp(-t / p[3]);
  };
  m.gradient = [](double tau, std::span<const double> p, std::span<double> g) {
    const double t = std::abs(tau);
    const double e1 = std::exp(-t / p[2]);
    const double e2 = std::exp(-t / p[3]);
    g[0] = -e1;
    g[1] = e2;
    g[2] = -p[0] * e1 * t / (p[2] * p[2]);
    g[3] = p[1] * e2 * t / (p[3] * p[3]);
  };
  m.to_internal = [](std::span<const double> p) {
    if (!(p[2] > 0.0 && p[3] > p[2]))
      throw std::invalid_argument("g2 init needs 0 < tau_1 < tau_2");
    return std::vector<double>{p[0], p[1], std::log(p[2]), std::log(p[3] - p[2])};
  };
  m.to_external = [](std::span<const double> u) {
    const double t1 = std::exp(u[2]);
    return std::vector<double>{u[0], u[1], t1, t1 + std::exp(u[3])};
  };
  m.external_jacobian = [](std::span<const double> u) {
    const double t1 = std::exp(u[2]);
    const double gap = std::exp(u[3]);
    return std::vector<double>{1, 0, 0, 0,  //
                               0, 1, 0, 0,  //
                               0, 0, t1, 0,  //
                               0, 0, t1, gap};
  };
  m.log_scale = {false, false, true, true};
  return m;
}

// Integral of exp(-t / tau) over [0, x], x >= 0, and its tau-derivative.
double exp_integral(double x, double tau) { return -tau * std::expm1(-x / tau); }
double exp_integral_dtau(double x, double tau) {
  const double y = x / tau;
  return -std::expm1(-y) - y * std::exp(-y);
}

// Mean of exp(-|t| / tau) over the bin [c - w/2, c + w/2] and its
// tau-derivative.
std::pair<double, double> exp_bin_mean(double c, double w, double tau) {
  const double lo = c - 0.5 * w;
  const double hi = c + 0.5 * w;
  double v, d;
  if (lo >= 0.0) {
    v = exp_integral(hi, tau) - exp_integral(lo, tau);
    d = exp_integral_dtau(hi, tau) - exp_integral_dtau(lo, tau);
  } else if (hi <= 0.0) {
    v = exp_integral(-lo, tau) - exp_integral(-hi, tau);
    d = exp_integral_dtau(-lo, tau) - exp_integral_dtau(-hi, tau);
  } else {
    v = exp_integral(-lo, tau) + exp_integral(hi, tau);
    d = exp_integral_dtau(-lo, tau) + exp_integral_dtau(hi, tau);
  }
  return {v / w, d / w};
}

struct Linearization {
  VectorXd residuals;  // (y - f) / sigma
  MatrixXd jacobian;   // d f / d u / sigma
  double chi2 = 0.0;
};

Linearization linearize(const ParametricModel& model, std::span<const DataPoint> data,
                        const VectorXd& u, const std::vector<Eigen::Index>& free) {
  const auto n = static_cast<Eigen::Index>(model.size());
  const std::vector<double> uu(u.data(), u.data() + n);
  const auto theta = model.to_external(uu);
  const auto g = model.external_jacobian(uu);
  const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
      dtheta_du(g.data(), n, n);

  Linearization lin;
  lin.residuals.resize(static_cast<Eigen::Index>(data.size()));
  lin.jacobian.resize(static_cast<Eigen::Index>(data.size()), n);
  std::vector<double> grad(static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& d = data[i];
    const auto row = static_cast<Eigen::Index>(i);
    lin.residuals(row) = (d.y - model.value(d.x, theta)) / d.sigma;
    model.gradient(d.x, theta, grad);
    const Eigen::Map<const Eigen::RowVectorXd> gt(grad.data(), n);
    lin.jacobian.row(row) = gt * dtheta_du / d.sigma;
  }
  if (free.size() != static_cast<std::size_t>(n))
    lin.jacobian = MatrixXd(lin.jacobian(Eigen::all, free));
  lin.chi2 = lin.residuals.squaredNorm();
  return lin;
}

}  // namespace

ParametricModel binned_g2_model(double bin_width_ns) {
  if (!(bin_width_ns > 0.0)) throw std::invalid_argument("bin width must be > 0");
  ParametricModel m = make_g2();
  const double w = bin_width_ns;
  m.value = [w](double tau, std::span<const double> p) {
    return 1.0 - p[0] * exp_bin_mean(tau, w, p[2]).first +
           p[1] * exp_bin_mean(tau, w, p[3]).first;
  };
  m.gradient = [w](double tau, std::span<const double> p, std::span<double> g) {
    const auto [m1, d1] = exp_bin_mean(tau, w, p[2]);
    const auto [m2, d2] = exp_bin_mean(tau, w, p[3]);
    g[0] = -m1;
    g[1] = m2;
    g[2] = -p[0] * d1;
    g[3] = p[1] * d2;
  };
  return m;
}

const ParametricModel& builtin_model(ModelId id) {
  static const ParametricModel linear = make_linear();
  static const ParametricModel lorentz = make_lorentzian();
  static const ParametricModel g2 = make_g2();
  static const ParametricModel saturation = make_saturation();
  switch (id) {
    case ModelId::linear: return linear;
    case ModelId::lorentzian: return lorentz;
    case ModelId::g2: return g2;
    case ModelId::saturation: return saturation;
  }
  throw std::invalid_argument("unknown model id");
}

double FitResult::param(const std::string& name) const {
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return params[i];
  throw std::out_of_range("no fit parameter '" + name + "'");
}

double FitResult::error(const std::string& name) const {
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return std_errors[i];
  throw std::out_of_range("no fit parameter '" + name + "'");
}

double FitResult::cov(const std::string& a, const std::string& b) const {
  std::size_t ia = names.size();
  std::size_t ib = names.size();
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] == a) ia = i;
    if (names[i] == b) ib = i;
  }
  if (ia == names.size() || ib == names.size())
    throw std::out_of_range("unknown covariance entry");
  return covariance[ia][ib];
}

FitResult fit_curve(const ParametricModel& model, std::span<const DataPoint> data,
                    std::span<const double> init, const FitOptions& options) {
  const std::size_t np = model.size();
  if (init.size() != np)
    throw std::invalid_argument("fit_curve: init has the wrong number of parameters");
  for (const auto& d : data)
    if (!(d.sigma > 0.0) || !std::isfinite(d.y) || !std::isfinite(d.x))
      throw std::invalid_argument("fit_curve: data needs finite x, y and sigma > 0");

  if (!options.fixed.empty() && options.fixed.size() != np)
    throw std::invalid_argument("fit_curve: fixed mask has the wrong length");
  std::vector<Eigen::Index> free;
  for (std::size_t i = 0; i < np; ++i)
    if (options.fixed.empty() || !options.fixed[i]) free.push_back(static_cast<Eigen::Index>(i));
  if (free.empty()) throw std::invalid_argument("fit_curve: every parameter is fixed");
  if (data.size() < free.size())
    throw std::invalid_argument("fit_curve: fewer data points than free parameters");

  const auto u0 = model.to_internal(init);
  VectorXd u = Eigen::Map<const VectorXd>(u0.data(), static_cast<Eigen::Index>(np));
  auto lin = linearize(model, data, u, free);
  double damping = options.initial_damping;

  FitResult result;
  int iter = 0;
  for (; iter < options.max_iterations; ++iter) {
    const MatrixXd normal = lin.jacobian.transpose() * lin.jacobian;
    const VectorXd gradient = lin.jacobian.transpose() * lin.residuals;
    if (gradient.norm() < options.grad_tol || lin.chi2 == 0.0) {
      result.converged = true;
      break;
    }
    const VectorXd scale = normal.diagonal();
    if ((scale.array() <= 0.0).any())
      throw RankDeficientError("fit_curve: Jacobian column is identically zero");

    bool accepted = false;
    while (!accepted) {
      MatrixXd damped = normal;
      damped.diagonal() += damping * scale;
      const Eigen::LDLT<MatrixXd> solver(damped);
      const VectorXd step = solver.solve(gradient);
      if (solver.info() != Eigen::Success || !step.allFinite())
        throw RankDeficientError("fit_curve: singular normal equations");
      VectorXd trial_u = u;
      trial_u(free) += step;
      auto trial = linearize(model, data, trial_u, free);
      if (std::isfinite(trial.chi2) && trial.chi2 <= lin.chi2) {
        const double rel = (lin.chi2 - trial.chi2) / std::max(trial.chi2, 1e-300);
        u = trial_u;
        lin = std::move(trial);
        damping = std::max(damping / 10.0, 1e-15);
        accepted = true;
        if (rel < options.chi2_rel_tol) {
          result.converged = true;
        }
      } else {
        damping *= 10.0;
        if (damping > 1e16) break;
      }
    }
    if (result.converged) {
      ++iter;
      break;
    }
    if (!accepted) {
      // No downhill step at any damping: a local minimum to working precision.
      result.converged = true;
      break;
    }
  }
  result.n_iterations = iter;

  // Covariance in u from (J^T J)^-1, mapped to theta through d theta / d u.
  const MatrixXd normal = lin.jacobian.transpose() * lin.jacobian;
  const VectorXd col_scale = normal.diagonal().cwiseSqrt();
  if ((col_scale.array() <= 0.0).any())
    throw RankDeficientError("fit_curve: parameter has no influence on the data");
  const MatrixXd scaled =
      col_scale.cwiseInverse().asDiagonal() * normal * col_scale.cwiseInverse().asDiagonal();
  const Eigen::SelfAdjointEigenSolver<MatrixXd> eig(scaled);
  const double emax = eig.eigenvalues().maxCoeff();
  const double emin = eig.eigenvalues().minCoeff();
  if (!(emin > options.rank_rcond * emax))
    throw RankDeficientError("fit_curve: parameters are not identifiable (rank-deficient Jacobian)");
  if (!model.log_scale.empty())
    for (std::size_t k = 0; k < free.size(); ++k)
      if (model.log_scale[static_cast<std::size_t>(free[k])] &&
          normal(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k)) <
              options.min_log_information)
        throw RankDeficientError("fit_curve: parameter '" +
                                 model.param_names[static_cast<std::size_t>(free[k])] +
                                 "' is not constrained by the data");
  const MatrixXd cov_scaled = eig.eigenvectors() *
                              eig.eigenvalues().cwiseInverse().asDiagonal() *
                              eig.eigenvectors().transpose();
  const MatrixXd cov_u =
      col_scale.cwiseInverse().asDiagonal() * cov_scaled * col_scale.cwiseInverse().asDiagonal();

  const std::vector<double> uu(u.data(), u.data() + u.size());
  const auto g = model.external_jacobian(uu);
  const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
      dtheta_du(g.data(), static_cast<Eigen::Index>(np), static_cast<Eigen::Index>(np));
  const MatrixXd g_free = dtheta_du(Eigen::all, free);
  const MatrixXd cov_theta = g_free * cov_u * g_free.transpose();

  result.model = model.name;
  result.names = model.param_names;
  result.params = model.to_external(uu);
  result.covariance.assign(np, std::vector<double>(np));
  result.std_errors.resize(np);
  for (std::size_t i = 0; i < np; ++i) {
    for (std::size_t j = 0; j < np; ++j)
      result.covariance[i][j] =
          cov_theta(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    result.std_errors[i] = std::sqrt(std::max(0.0, result.covariance[i][i]));
  }
  result.chi2 = lin.chi2;
  result.residual_norm = std::sqrt(lin.chi2);
  result.dof = static_cast<int>(data.size()) - static_cast<int>(free.size());
  return result;
}

// ---- model-specific fitters ----

G2Fit fit_g2(const CorrelationCurve& curve, const G2Params& init,
             const G2FitOptions& options) {
  curve.validate();
  if (!curve.corrected)
    throw std::invalid_argument("fit_g2: expects a background-corrected curve");
  const ParametricModel model = options.bin_averaged ? binned_g2_model(curve.bin_width_ns)
                                                     : builtin_model(ModelId::g2);
  const double unit = curve.unit_error;

  std::vector<DataPoint> data(curve.size());
  for (std::size_t i = 0; i < curve.size(); ++i) {
    // Zero-count bins get the one-count error floor.
    const double sigma = unit > 0.0 ? std::max(curve.std_errors[i], unit)
                                    : curve.std_errors[i];
    data[i] = {curve.tau_centers[i], curve.values[i], sigma};
  }
  std::vector<double> theta{init.a, init.b, init.tau_1, init.tau_2};
  G2Fit out;
  out.fit = fit_curve(model, data, theta, options.engine);
  if (unit > 0.0) {
    for (int pass = 0; pass < options.reweight_passes; ++pass) {
      for (auto& d : data) {
        const double expected = (model.value(d.x, out.fit.params) - curve.count_offset) / unit;
        d.sigma = std::sqrt(std::max(expected, 1.0)) * unit;
      }
      out.fit = fit_curve(model, data, out.fit.params, options.engine);
    }
  }
  out.g2_zero = 1.0 - out.fit.params[0] + out.fit.params[1];
  const double var = out.fit.covariance[0][0] + out.fit.covariance[1][1] -
                     2.0 * out.fit.covariance[0][1];
  out.g2_zero_error = std::sqrt(std::max(0.0, var));
  return out;
}

FitResult fit_lorentzian(const std::vector<OdmrPoint>& sweep, const OdmrLine& init,
                         const FitOptions& options) {
  if (sweep.size() < 4) throw std::invalid_argument("fit_lorentzian: needs >= 4 points");
  std::vector<DataPoint> data;
  data.reserve(sweep.size());
  for (const auto& p : sweep) data.push_back({p.freq_mhz, p.contrast, p.std_error});
  const std::vector<double> theta{init.center_mhz, init.fwhm_mhz, init.peak_contrast,
                                  init.baseline};
  return fit_curve(builtin_model(ModelId::lorentzian), data, theta, options);
}

FitResult fit_saturation(const std::vector<SaturationPoint>& points,
                         const SaturationParams& init, const FitOptions& options) {
  if (points.size() < 3) throw std::invalid_argument("fit_saturation: needs >= 3 points");
  std::vector<DataPoint> data;
  data.reserve(points.size());
  for (const auto& p : points) {
    if (!(p.power_mw > 0.0)) throw std::invalid_argument("fit_saturation: power must be > 0");
    data.push_back({p.power_mw, p.rate_kcps, p.sigma});
  }
  const std::vector<double> theta{init.i_s, init.p_0};
  return fit_curve(builtin_model(ModelId::saturation), data, theta, options);
}

// ---- Poisson statistics ----

void CountHistogram::validate() const {
  if (k_values.size() != frequencies.size())
    throw std::invalid_argument("count histogram columns differ in length");
  std::int64_t sum = 0;
  for (std::size_t i = 0; i < k_values.size(); ++i) {
    if (k_values[i] < 0 || frequencies[i] < 0)
      throw std::invalid_argument("count histogram entries must be >= 0");
    sum += frequencies[i];
  }
  if (sum != n_spots) throw std::invalid_argument("count histogram frequencies do not sum to n_spots");
}

std::int64_t CountHistogram::frequency(std::int64_t k) const {
  std::int64_t f = 0;
  for (std::size_t i = 0; i < k_values.size(); ++i)
    if (k_values[i] == k) f += frequencies[i];
  return f;
}

CountHistogram histogram_from_map(const std::map<std::int64_t, std::int64_t>& freq) {
  CountHistogram h;
  for (const auto& [k, f] : freq) {
    h.k_values.push_back(k);
    h.frequencies.push_back(f);
    h.n_spots += f;
  }
  h.validate();
  return h;
}

CountHistogram histogram_from_counts(std::span<const std::int64_t> counts) {
  std::map<std::int64_t, std::int64_t> freq;
  for (auto k : counts) ++freq[k];
  return histogram_from_map(freq);
}

double poisson_pmf(std::int64_t k, double lambda) {
  if (k < 0) return 0.0;
  if (lambda == 0.0) return k == 0 ? 1.0 : 0.0;
  return std::exp(static_cast<double>(k) * std::log(lambda) - lambda -
                  std::lgamma(static_cast<double>(k) + 1.0));
}

PoissonFit fit_poisson(const CountHistogram& hist) {
  hist.validate();
  if (hist.n_spots < 1) throw std::invalid_argument("fit_poisson: n_spots must be >= 1");
  const auto n = static_cast<double>(hist.n_spots);
  double sum = 0.0;
  std::int64_t k_max = 0;
  for (std::size_t i = 0; i < hist.k_values.size(); ++i) {
    sum += static_cast<double>(hist.k_values[i]) * static_cast<double>(hist.frequencies[i]);
    if (hist.frequencies[i] > 0) k_max = std::max(k_max, hist.k_values[i]);
  }
  PoissonFit fit;
  fit.lambda = sum / n;
  fit.std_error = std::sqrt(fit.lambda / n);
  if (fit.lambda == 0.0) {
    fit.degenerate = true;
    return fit;
  }

  // Pool adjacent k so every bin expects >= 5 spots; the last bin is the
  // upper tail k >= K.
  std::vector<double> expected;
  std::vector<double> observed;
  double e_acc = 0.0;
  double o_acc = 0.0;
  double cdf = 0.0;
  for (std::int64_t k = 0;; ++k) {
    const double p = poisson_pmf(k, fit.lambda);
    cdf += p;
    e_acc += n * p;
    o_acc += static_cast<double>(hist.frequency(k));
    const double tail_expected = n * std::max(0.0, 1.0 - cdf);
    if (e_acc >= 5.0 && tail_expected >= 5.0) {
      expected.push_back(e_acc);
      observed.push_back(o_acc);
      e_acc = o_acc = 0.0;
    }
    if (tail_expected < 5.0 && k >= k_max) {
      e_acc += tail_expected;
      for (std::size_t i = 0; i < hist.k_values.size(); ++i)
        if (hist.k_values[i] > k) o_acc += static_cast<double>(hist.frequencies[i]);
      if (expected.empty() || e_acc >= 5.0) {
        expected.push_back(e_acc);
        observed.push_back(o_acc);
      } else {
        expected.back() += e_acc;
        observed.back() += o_acc;
      }
      break;
    }
  }
  fit.pooled_bins = static_cast<int>(expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) {
    const double d = observed[i] - expected[i];
    fit.chi2 += d * d / expected[i];
  }
  fit.dof = fit.pooled_bins - 2;  // minus one for the total, one for lambda
  fit.p_value = fit.dof > 0 ? boost::math::gamma_q(0.5 * fit.dof, 0.5 * fit.chi2)
                            : std::numeric_limits<double>::quiet_NaN();
  return fit;
}

double conversion_yield(double lambda, double dose) {
  if (!(dose > 0.0)) throw std::invalid_argument("conversion_yield: dose must be > 0");
  return lambda / dose;
}

double single_emitter_fraction(const CountHistogram& hist) {
  hist.validate();
  if (hist.n_spots < 1)
    throw std::invalid_argument("single_emitter_fraction: n_spots must be >= 1");
  return static_cast<double>(hist.frequency(1)) / static_cast<double>(hist.n_spots);
}

nlohmann::json to_json(const FitResult& fit) {
  nlohmann::json params = nlohmann::json::object();
  nlohmann::json errors = nlohmann::json::object();
  for (std::size_t i = 0; i < fit.names.size(); ++i) {
    params[fit.names[i]] = fit.params[i];
    errors[fit.names[i]] = fit.std_errors[i];
  }
  return {{"model", fit.model},
          {"params", params},
          {"std_errors", errors},
          {"covariance", fit.covariance},
          {"chi2", fit.chi2},
          {"residual_norm", fit.residual_norm},
          {"dof", fit.dof},
          {"converged", fit.converged},
          {"n_iterations", fit.n_iterations}};
}

nlohmann::json to_json(const PoissonFit& fit) {
  return {{"lambda", fit.lambda},
          {"std_error", fit.std_error},
          {"chi2", fit.chi2},
          {"dof", fit.dof},
          {"p_value", std::isnan(fit.p_value) ? nlohmann::json(nullptr)
                                              : nlohmann::json(fit.p_value)},
          {"pooled_bins", fit.pooled_bins},
          {"degenerate", fit.degenerate}};
}

}  // namespace vsi
