#include <doctest.h>

#include <cmath>
#include <limits>
#include <map>
#include <random>
#include <vector>

#include "vsi/fitting.hpp"

using namespace vsi;

namespace {

std::vector<double> random_params(ModelId id, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  switch (id) {
    case ModelId::linear:
      return {-5.0 + 10.0 * u(rng)};
    case ModelId::lorentzian:
      return {45.0 + 50.0 * u(rng), 3.0 + 20.0 * u(rng),
              (u(rng) < 0.5 ? -1.0 : 1.0) * (0.002 + 0.02 * u(rng)), -0.01 + 0.02 * u(rng)};
    case ModelId::saturation:
      return {1.0 + 30.0 * u(rng), 0.05 + 2.0 * u(rng)};
    case ModelId::g2: {
      const double t1 = 1.0 + 10.0 * u(rng);
      return {0.2 + 0.8 * u(rng), 0.05 + 0.5 * u(rng), t1, t1 * (3.0 + 30.0 * u(rng))};
    }
  }
  return {};
}

double random_x(ModelId id, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  switch (id) {
    case ModelId::linear: return -10.0 + 20.0 * u(rng);
    case ModelId::lorentzian: return 30.0 + 80.0 * u(rng);
    case ModelId::saturation: return 0.05 + 3.0 * u(rng);
    case ModelId::g2: return -300.0 + 600.0 * u(rng);
  }
  return 0.0;
}

// Sample grid on which each model is identifiable.
std::vector<double> design(ModelId id) {
  std::vector<double> x;
  switch (id) {
    case ModelId::linear:
      for (int i = 1; i <= 20; ++i) x.push_back(0.5 * i);
      break;
    case ModelId::lorentzian:
      for (int i = 0; i <= 80; ++i) x.push_back(30.0 + i);
      break;
    case ModelId::saturation:
      x = {0.1, 0.2, 0.35, 0.5, 0.75, 1.0, 2.0, 3.0};
      break;
    case ModelId::g2:
      for (int i = -300; i <= 300; i += 2) x.push_back(i);
      break;
  }
  return x;
}

void check_gradient(const ParametricModel& m, std::span<const double> p, double x) {
  std::vector<double> g(m.size());
  m.gradient(x, p, g);
  for (std::size_t j = 0; j < m.size(); ++j) {
    const double h = 1e-4 * std::max(std::abs(p[j]), 1e-3);
    auto at = [&](double k) {
      std::vector<double> q(p.begin(), p.end());
      q[j] += k * h;
      return m.value(x, q);
    };
    // Five-point central stencil, truncation error O(h^4).
    const double fd = (8.0 * (at(1) - at(-1)) - (at(2) - at(-2))) / (12.0 * h);
    // Relative agreement, plus the rounding floor of the stencil itself.
    const double rounding = 10.0 * std::numeric_limits<double>::epsilon() *
                            std::abs(m.value(x, p)) / h;
    INFO(m.name, " d/d", m.param_names[j], " at x=", x);
    CHECK(std::abs(g[j] - fd) <= 1e-6 * std::max(std::abs(g[j]), std::abs(fd)) + rounding);
  }
}

const ModelId kAll[] = {ModelId::linear, ModelId::lorentzian, ModelId::saturation, ModelId::g2};

}  // namespace

TEST_CASE("analytic gradients match finite differences") {
  std::mt19937_64 rng(17);
  for (ModelId id : kAll) {
    const auto& m = builtin_model(id);
    for (int i = 0; i < 100; ++i) check_gradient(m, random_params(id, rng), random_x(id, rng));
  }
  const auto binned = binned_g2_model(1.0);
  for (int i = 0; i < 100; ++i)
    check_gradient(binned, random_params(ModelId::g2, rng), std::round(random_x(ModelId::g2, rng)));
  CHECK_THROWS_AS(binned_g2_model(0.0), std::invalid_argument);
}

TEST_CASE("bin-averaged g2 matches numerical integration") {
  const double w = 2.0;
  const auto binned = binned_g2_model(w);
  const G2Params truth{0.9, 0.25, 3.0, 60.0};
  const std::vector<double> p{truth.a, truth.b, truth.tau_1, truth.tau_2};
  for (double c : {0.0, 2.0, -4.0, 10.0, 100.0}) {
    // Composite Simpson on each side of the kink at zero.
    auto simpson = [&](double lo, double hi) {
      const int n = 2000;
      const double h = (hi - lo) / n;
      double s = g2_model(truth, lo) + g2_model(truth, hi);
      for (int k = 1; k < n; ++k) s += (k % 2 ? 4.0 : 2.0) * g2_model(truth, lo + k * h);
      return s * h / 3.0;
    };
    const double lo = c - 0.5 * w, hi = c + 0.5 * w;
    const double integral = (lo < 0.0 && hi > 0.0) ? simpson(lo, 0.0) + simpson(0.0, hi)
                                                   : simpson(lo, hi);
    CHECK(binned.value(c, p) == doctest::Approx(integral / w).epsilon(1e-10));
  }
}

TEST_CASE("linear model matches weighted least squares closed form") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::uniform_real_distribution<double> sig(0.1, 2.0);
  std::vector<DataPoint> data;
  double sxy = 0.0, sxx = 0.0;
  for (int i = 1; i <= 30; ++i) {
    const double x = 0.3 * i;
    const double s = sig(rng);
    const double y = 2.5 * x + s * noise(rng);
    data.push_back({x, y, s});
    sxy += x * y / (s * s);
    sxx += x * x / (s * s);
  }
  const auto fit = fit_curve(builtin_model(ModelId::linear), data, std::vector<double>{0.0});
  CHECK(fit.converged);
  CHECK(std::abs(fit.params[0] - sxy / sxx) < 1e-10);
  CHECK(fit.std_errors[0] == doctest::Approx(1.0 / std::sqrt(sxx)).epsilon(1e-8));
  CHECK(fit.dof == 29);
}

TEST_CASE("exact data at the truth converges immediately") {
  std::mt19937_64 rng(6);
  for (ModelId id : kAll) {
    const auto& m = builtin_model(id);
    const auto p = random_params(id, rng);
    std::vector<DataPoint> data;
    for (double x : design(id)) data.push_back({x, m.value(x, p), 0.01});
    const auto fit = fit_curve(m, data, p);
    CHECK(fit.converged);
    CHECK(fit.n_iterations <= 2);
    CHECK(fit.residual_norm < 1e-8);
  }
}

TEST_CASE("noiseless round trips from perturbed starts") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> jitter(0.9, 1.1);
  for (ModelId id : kAll) {
    const auto& m = builtin_model(id);
    for (int trial = 0; trial < 20; ++trial) {
      const auto p = random_params(id, rng);
      std::vector<DataPoint> data;
      for (double x : design(id)) data.push_back({x, m.value(x, p), 0.01});
      auto init = p;
      for (auto& v : init) v *= jitter(rng);
      if (id == ModelId::g2 && init[3] <= init[2]) init[3] = 2.0 * init[2];
      // Start the line center within a fraction of a linewidth.
      if (id == ModelId::lorentzian) init[0] = p[0] + 2.0 * (jitter(rng) - 1.0) * p[1];
      const auto fit = fit_curve(m, data, init);
      INFO(m.name, " trial ", trial);
      CHECK(fit.converged);
      for (std::size_t j = 0; j < p.size(); ++j)
        CHECK(std::abs(fit.params[j] - p[j]) <= 1e-6 * std::max(std::abs(p[j]), 1e-3));
    }
  }
}

TEST_CASE("fit_g2 recovers a noiseless curve") {
  const G2Params truth{0.9, 0.25, 5.0, 100.0};
  CorrelationCurve c;
  c.corrected = true;
  c.normalized = true;
  c.bin_width_ns = 1.0;
  for (int t = -500; t <= 500; ++t) {
    c.tau_centers.push_back(t);
    c.values.push_back(g2_model(truth, t));
    c.std_errors.push_back(0.01);
  }
  G2FitOptions point;
  point.bin_averaged = false;
  const auto fit = fit_g2(c, {0.8, 0.3, 4.0, 80.0}, point);
  CHECK(std::abs(fit.fit.param("a") - 0.9) < 1e-6);
  CHECK(std::abs(fit.fit.param("b") - 0.25) < 1e-6);
  CHECK(std::abs(fit.fit.param("tau_1") - 5.0) < 1e-6);
  CHECK(std::abs(fit.fit.param("tau_2") - 100.0) < 1e-6);
  CHECK(fit.g2_zero == doctest::Approx(0.35).epsilon(1e-6));
  CHECK(fit.g2_zero_error >= 0.0);

  // Same truth through the bin-averaged model.
  const auto binned = binned_g2_model(1.0);
  const std::vector<double> p{0.9, 0.25, 5.0, 100.0};
  for (std::size_t i = 0; i < c.size(); ++i) c.values[i] = binned.value(c.tau_centers[i], p);
  const auto fb = fit_g2(c, {0.8, 0.3, 4.0, 80.0});
  CHECK(std::abs(fb.fit.param("a") - 0.9) < 1e-6);
  CHECK(std::abs(fb.fit.param("tau_1") - 5.0) < 1e-6);
  CHECK(fb.g2_zero == doctest::Approx(0.35).epsilon(1e-6));

  CorrelationCurve raw = c;
  raw.corrected = false;
  CHECK_THROWS_AS(fit_g2(raw, truth), std::invalid_argument);
  CHECK_THROWS_AS(fit_g2(c, {0.9, 0.25, 100.0, 5.0}), std::invalid_argument);
}

TEST_CASE("lorentzian and saturation round trips") {
  const OdmrLine line{70.2, 9.0, -0.006, 0.0005};
  std::vector<OdmrPoint> sweep;
  for (double f = 40; f <= 100; f += 1) sweep.push_back({f, lorentzian(f, line), 1e-4});
  const auto fl = fit_lorentzian(sweep, OdmrLine{68.0, 12.0, -0.004, 0.0});
  CHECK(std::abs(fl.param("center_mhz") - 70.2) < 1e-8);
  CHECK(std::abs(fl.param("fwhm_mhz") - 9.0) < 1e-8);
  CHECK(std::abs(fl.param("peak_contrast") + 0.006) < 1e-8);
  CHECK(std::abs(fl.param("baseline") - 0.0005) < 1e-8);
  sweep.resize(3);
  CHECK_THROWS_AS(fit_lorentzian(sweep, line), std::invalid_argument);

  const SaturationParams sat{13.0, 0.48};
  std::vector<SaturationPoint> pts;
  for (double p : design(ModelId::saturation)) pts.push_back({p, saturation_rate(sat, p), 0.1});
  const auto fs = fit_saturation(pts, {8.0, 1.0});
  CHECK(std::abs(fs.param("i_s") - 13.0) < 1e-8);
  CHECK(std::abs(fs.param("p_0") - 0.48) < 1e-8);
}

TEST_CASE("saturation with 5% noise recovers parameters") {
  const SaturationParams sat{13.0, 0.48};
  std::mt19937_64 rng(44);
  std::normal_distribution<double> z(0.0, 1.0);
  const int reps = 100;
  double sum_is = 0.0, sum_p0 = 0.0, sum2_p0 = 0.0, sum_err_p0 = 0.0;
  for (int r = 0; r < reps; ++r) {
    std::vector<SaturationPoint> pts;
    for (double p : design(ModelId::saturation)) {
      const double truth = saturation_rate(sat, p);
      pts.push_back({p, truth * (1.0 + 0.05 * z(rng)), 0.05 * truth});
    }
    const auto fit = fit_saturation(pts, {10.0, 1.0});
    CHECK(fit.converged);
    sum_is += fit.param("i_s");
    sum_p0 += fit.param("p_0");
    sum2_p0 += fit.param("p_0") * fit.param("p_0");
    sum_err_p0 += fit.error("p_0");
  }
  CHECK(std::abs(sum_is / reps / 13.0 - 1.0) < 0.10);
  CHECK(std::abs(sum_p0 / reps / 0.48 - 1.0) < 0.10);
  // Single-fit scatter of p_0 (about 8% here) agrees with the reported error.
  const double mean = sum_p0 / reps;
  const double sd = std::sqrt(sum2_p0 / reps - mean * mean);
  CHECK(sd / (sum_err_p0 / reps) == doctest::Approx(1.0).epsilon(0.2));
}

TEST_CASE("one-sigma intervals cover the truth 68% of the time") {
  std::mt19937_64 rng(1234);
  std::normal_distribution<double> z(0.0, 1.0);
  const std::map<ModelId, std::vector<double>> truths{
      {ModelId::linear, {2.0}},
      {ModelId::lorentzian, {70.0, 10.0, -0.005, 0.0}},
      {ModelId::saturation, {13.0, 0.48}},
      {ModelId::g2, {0.9, 0.25, 4.0, 60.0}}};
  const std::map<ModelId, double> noise{{ModelId::linear, 0.5},
                                        {ModelId::lorentzian, 5e-4},
                                        {ModelId::saturation, 0.3},
                                        {ModelId::g2, 0.05}};
  const int reps = 500;
  for (const auto& [id, p] : truths) {
    const auto& m = builtin_model(id);
    std::vector<int> covered(p.size(), 0);
    for (int r = 0; r < reps; ++r) {
      std::vector<DataPoint> data;
      for (double x : design(id))
        data.push_back({x, m.value(x, p) + noise.at(id) * z(rng), noise.at(id)});
      const auto fit = fit_curve(m, data, p);
      for (std::size_t j = 0; j < p.size(); ++j)
        covered[j] += std::abs(fit.params[j] - p[j]) <= fit.std_errors[j];
    }
    for (std::size_t j = 0; j < p.size(); ++j) {
      INFO(m.name, " ", m.param_names[j]);
      CHECK(std::abs(covered[j] / double(reps) - 0.6827) <= 0.05);
    }
  }
}

TEST_CASE("scale equivariance") {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> z(0.0, 1.0);
  const double c = 3.7;
  {
    const OdmrLine line;
    std::vector<OdmrPoint> a, b;
    for (double f = 40; f <= 100; f += 1) {
      const double y = lorentzian(f, line) + 5e-4 * z(rng);
      a.push_back({f, y, 5e-4});
      b.push_back({f, c * y, c * 5e-4});
    }
    const OdmrLine init{68.0, 8.0, -0.004, 0.0};
    const OdmrLine init_b{68.0, 8.0, -0.004 * c, 0.0};
    const auto fa = fit_lorentzian(a, init);
    const auto fb = fit_lorentzian(b, init_b);
    CHECK(std::abs(fa.param("center_mhz") - fb.param("center_mhz")) < 1e-10);
    CHECK(std::abs(fa.param("fwhm_mhz") - fb.param("fwhm_mhz")) < 1e-10);
    CHECK(fb.param("peak_contrast") == doctest::Approx(c * fa.param("peak_contrast")).epsilon(1e-10));
  }
  {
    const SaturationParams sat{13.0, 0.48};
    std::vector<SaturationPoint> a, b;
    for (double p : design(ModelId::saturation)) {
      const double y = saturation_rate(sat, p) * (1.0 + 0.05 * z(rng));
      a.push_back({p, y, 0.5});
      b.push_back({p, c * y, c * 0.5});
    }
    const auto fa = fit_saturation(a, {10.0, 1.0});
    const auto fb = fit_saturation(b, {10.0 * c, 1.0});
    CHECK(std::abs(fa.param("p_0") - fb.param("p_0")) < 1e-10);
    CHECK(fb.param("i_s") == doctest::Approx(c * fa.param("i_s")).epsilon(1e-10));
  }
}

TEST_CASE("degenerate and invalid inputs") {
  std::vector<SaturationPoint> flat;
  for (double p : design(ModelId::saturation)) flat.push_back({p, 5.0, 0.1});
  CHECK_THROWS_AS(fit_saturation(flat, {5.0, 0.5}), RankDeficientError);

  const auto& lin = builtin_model(ModelId::linear);
  std::vector<DataPoint> zeros{{0.0, 1.0, 1.0}, {0.0, 2.0, 1.0}};
  CHECK_THROWS_AS(fit_curve(lin, zeros, std::vector<double>{1.0}), RankDeficientError);
  std::vector<DataPoint> bad{{1.0, 1.0, 0.0}};
  CHECK_THROWS_AS(fit_curve(lin, bad, std::vector<double>{1.0}), std::invalid_argument);
  CHECK_THROWS_AS(fit_curve(lin, std::vector<DataPoint>{}, std::vector<double>{1.0}),
                  std::invalid_argument);

  // An iteration budget of one cannot converge from a poor start.
  std::vector<SaturationPoint> pts;
  for (double p : design(ModelId::saturation)) pts.push_back({p, saturation_rate({13, 0.48}, p), 0.1});
  FitOptions tight;
  tight.max_iterations = 1;
  CHECK_FALSE(fit_saturation(pts, {1.0, 3.0}, tight).converged);
}

TEST_CASE("fixed mask holds parameters") {
  const SaturationParams sat{13.0, 0.48};
  std::mt19937_64 rng(3);
  std::normal_distribution<double> z(0.0, 1.0);
  std::vector<SaturationPoint> pts;
  for (double p : design(ModelId::saturation))
    pts.push_back({p, saturation_rate(sat, p) + 0.2 * z(rng), 0.2});
  FitOptions opts;
  opts.fixed = {false, true};
  const auto fit = fit_saturation(pts, {10.0, 0.48}, opts);
  CHECK(fit.param("p_0") == 0.48);
  CHECK(fit.error("p_0") == 0.0);
  CHECK(fit.dof == 7);
  // With p_0 fixed the model is linear in i_s.
  double sxy = 0.0, sxx = 0.0;
  for (const auto& p : pts) {
    const double x = p.power_mw / (p.power_mw + 0.48);
    sxy += x * p.rate_kcps;
    sxx += x * x;
  }
  CHECK(fit.param("i_s") == doctest::Approx(sxy / sxx).epsilon(1e-9));

  opts.fixed = {true, true};
  CHECK_THROWS_AS(fit_saturation(pts, {10.0, 0.48}, opts), std::invalid_argument);
  opts.fixed = {true};
  CHECK_THROWS_AS(fit_saturation(pts, {10.0, 0.48}, opts), std::invalid_argument);
}

TEST_CASE("poisson fit") {
  const auto zero = fit_poisson(histogram_from_map({{0, 50}}));
  CHECK(zero.lambda == 0.0);
  CHECK(zero.std_error == 0.0);
  CHECK(zero.degenerate);

  const auto h = histogram_from_map({{0, 10}, {1, 19}, {2, 12}, {3, 6}, {4, 3}});
  CHECK(h.n_spots == 50);
  const auto f = fit_poisson(h);
  CHECK(f.lambda == doctest::Approx(1.46).epsilon(1e-14));
  CHECK(f.std_error == doctest::Approx(std::sqrt(1.46 / 50)).epsilon(1e-12));
  CHECK(f.p_value > 0.05);
  CHECK(f.dof == f.pooled_bins - 2);

  // MLE is the sample mean for any histogram.
  std::mt19937_64 rng(2);
  std::poisson_distribution<std::int64_t> draw(1.56);
  std::vector<int> within(1, 0);
  for (int r = 0; r < 50; ++r) {
    std::vector<std::int64_t> counts(50);
    double sum = 0.0;
    for (auto& k : counts) sum += static_cast<double>(k = draw(rng));
    const auto fit = fit_poisson(histogram_from_counts(counts));
    CHECK(fit.lambda == doctest::Approx(sum / 50.0).epsilon(1e-14));
    within[0] += std::abs(fit.lambda - 1.56) <= 0.53;
  }
  CHECK(within[0] >= 49);

  CHECK(poisson_pmf(1, 1.56) == doctest::Approx(1.56 * std::exp(-1.56)).epsilon(1e-14));
  CHECK(poisson_pmf(0, 0.0) == 1.0);
  CHECK_THROWS_AS(fit_poisson(CountHistogram{}), std::invalid_argument);
  CountHistogram broken{{0, 1}, {3, 3}, 5};
  CHECK_THROWS_AS(broken.validate(), std::invalid_argument);
}

TEST_CASE("conversion yield and single-emitter fraction") {
  CHECK(conversion_yield(1.56, 40.0) == doctest::Approx(0.039).epsilon(1e-14));
  CHECK(conversion_yield(0.0, 70.0) == 0.0);
  CHECK(conversion_yield(1.56, 700.0) == doctest::Approx(0.00223).epsilon(1e-3));
  CHECK_THROWS_AS(conversion_yield(1.0, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(conversion_yield(1.0, -5.0), std::invalid_argument);

  CHECK(single_emitter_fraction(histogram_from_map({{1, 50}})) == 1.0);
  CHECK(single_emitter_fraction(histogram_from_map({{0, 10}, {1, 19}, {2, 21}})) ==
        doctest::Approx(0.38));
  CHECK(poisson_pmf(1, 1.56) == doctest::Approx(0.328).epsilon(2e-3));
  CHECK(50.0 * poisson_pmf(1, 1.56) == doctest::Approx(16.4).epsilon(2e-3));
}

TEST_CASE("fit results serialize by name") {
  const SaturationParams sat{13.0, 0.48};
  std::vector<SaturationPoint> pts;
  for (double p : design(ModelId::saturation)) pts.push_back({p, saturation_rate(sat, p), 0.1});
  const auto fit = fit_saturation(pts, {10.0, 1.0});
  const auto j = to_json(fit);
  CHECK(j["model"] == "saturation");
  CHECK(j["params"]["i_s"].get<double>() == fit.param("i_s"));
  CHECK(j["std_errors"]["p_0"].get<double>() == fit.error("p_0"));
  CHECK(j["covariance"].size() == 2);
  CHECK(j["converged"].get<bool>());
  CHECK(fit.cov("i_s", "p_0") == fit.covariance[0][1]);
  CHECK_THROWS_AS(fit.param("nope"), std::out_of_range);

  const auto pj = to_json(fit_poisson(histogram_from_map({{0, 10}, {1, 19}, {2, 12}, {3, 6}, {4, 3}})));
  CHECK(pj["lambda"].get<double>() == doctest::Approx(1.46));
  CHECK(pj.contains("p_value"));
}
