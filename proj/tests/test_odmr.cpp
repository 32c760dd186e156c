#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "vsi/fitting.hpp"
#include "vsi/odmr.hpp"

using namespace vsi;

TEST_CASE("lorentzian shape") {
  OdmrLine line{70.0, 10.0, -0.005, 0.001};
  CHECK(lorentzian(70.0, line) == doctest::Approx(-0.004).epsilon(1e-14));
  CHECK(lorentzian(75.0, line) == doctest::Approx(0.001 - 0.0025).epsilon(1e-14));
  CHECK(lorentzian(65.0, line) == doctest::Approx(0.001 - 0.0025).epsilon(1e-14));
  CHECK(std::abs(lorentzian(1e9, line) - 0.001) < 1e-15);
  CHECK(std::abs(lorentzian(-1e9, line) - 0.001) < 1e-15);

  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> d(0.0, 50.0);
  for (int i = 0; i < 100; ++i) {
    const double delta = d(rng);
    CHECK(lorentzian(70.0 + delta, line) == doctest::Approx(lorentzian(70.0 - delta, line)));
  }

  CHECK_THROWS_AS(OdmrLine({70.0, 0.0, -0.005, 0.0}).validate(), std::invalid_argument);
  CHECK_THROWS_AS(OdmrLine({70.0, 1.0, -1.0, 0.0}).validate(), std::invalid_argument);
}

TEST_CASE("contrast statistic") {
  CHECK(compute_contrast(1000, 1000) == 0.0);
  CHECK(compute_contrast(1005000, 1000000) == doctest::Approx(0.005).epsilon(1e-14));
  CHECK(compute_contrast(990, 1000) < 0.0);
  CHECK_THROWS_AS(compute_contrast(10, 0), UndefinedContrastError);
}

TEST_CASE("modulation scheme") {
  ModulationScheme s;
  CHECK(s.on_ms() == doctest::Approx(2.8));
  CHECK(s.off_ms() == doctest::Approx(2.8));
  CHECK_THROWS_AS(ModulationScheme({2.8, 1.0, 10}).validate(), std::invalid_argument);
  CHECK_THROWS_AS(ModulationScheme({2.8, 0.5, 0}).validate(), std::invalid_argument);
  CHECK_THROWS_AS(ModulationScheme({0.0, 0.5, 10}).validate(), std::invalid_argument);
}

TEST_CASE("frequency grid") {
  const auto f = frequency_grid(40.0, 100.0, 1.0);
  CHECK(f.size() == 61);
  CHECK(f.front() == 40.0);
  CHECK(f.back() == 100.0);
  CHECK(frequency_grid(1.0, 1.0, 0.5).size() == 1);
  CHECK_THROWS_AS(frequency_grid(2.0, 1.0, 0.5), std::invalid_argument);
}

TEST_CASE("null line gives zero contrast") {
  OdmrLine line{70.0, 10.0, 0.0, 0.0};
  const auto sweep = simulate_odmr_sweep(frequency_grid(40, 100, 1), line, 1000.0,
                                         {2.8, 0.5, 1000}, 5);
  for (const auto& p : sweep) CHECK(std::abs(p.contrast) < 5.0 * p.std_error);
}

TEST_CASE("sweep length and determinism") {
  const auto f = frequency_grid(60, 80, 0.5);
  const auto a = simulate_odmr_sweep(f, OdmrLine{}, 500.0, {2.8, 0.5, 100}, 9);
  const auto b = simulate_odmr_sweep(f, OdmrLine{}, 500.0, {2.8, 0.5, 100}, 9);
  const auto c = simulate_odmr_sweep(f, OdmrLine{}, 500.0, {2.8, 0.5, 100}, 10);
  REQUIRE(a.size() == f.size());
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].freq_mhz == f[i]);
    CHECK(a[i].contrast == b[i].contrast);
    differs |= a[i].contrast != c[i].contrast;
  }
  CHECK(differs);
}

TEST_CASE("error scales as 1/sqrt(cycles)") {
  const auto f = frequency_grid(40, 100, 1);
  const OdmrLine line;
  double e1 = 0.0, e2 = 0.0;
  const auto s1 = simulate_odmr_sweep(f, line, 1000.0, {2.8, 0.5, 1000}, 1);
  const auto s2 = simulate_odmr_sweep(f, line, 1000.0, {2.8, 0.5, 2000}, 1);
  for (std::size_t i = 0; i < f.size(); ++i) {
    e1 += s1[i].std_error;
    e2 += s2[i].std_error;
  }
  CHECK(e1 / e2 == doctest::Approx(std::sqrt(2.0)).epsilon(0.10));
}

TEST_CASE("contrast estimator is unbiased") {
  const OdmrLine line{70.0, 10.0, -0.005, 0.0};
  const double f = 72.0;
  const double truth = lorentzian(f, line);
  double sum = 0.0, sum2 = 0.0;
  const int n = 1000;
  for (int r = 0; r < n; ++r) {
    const auto p = simulate_odmr_sweep({f}, line, 1000.0, {2.8, 0.5, 100},
                                       static_cast<std::uint64_t>(r))[0];
    sum += p.contrast;
    sum2 += p.contrast * p.contrast;
  }
  const double mean = sum / n;
  const double sem = std::sqrt((sum2 / n - mean * mean) / (n - 1));
  CHECK(std::abs(mean - truth) < 3.0 * sem);
}

TEST_CASE("unequal duty cycle normalizes by window length") {
  const OdmrLine line{70.0, 10.0, -0.01, 0.0};
  const auto sweep = simulate_odmr_sweep({70.0, 200.0}, line, 1000.0, {2.8, 0.3, 20000}, 3);
  CHECK(std::abs(sweep[0].contrast + 0.01) < 5.0 * sweep[0].std_error);
  CHECK(std::abs(sweep[1].contrast) < 5.0 * sweep[1].std_error);
}

TEST_CASE("fit recovers the line center") {
  const auto f = frequency_grid(40, 100, 1);
  const OdmrLine truth{70.2, 10.0, -0.005, 0.0};
  const auto sweep = simulate_odmr_sweep(f, truth, 1000.0, {2.8, 0.5, 100000}, 21);
  const auto fit = fit_lorentzian(sweep, OdmrLine{69.0, 8.0, -0.004, 0.0});
  CHECK(fit.converged);
  CHECK(std::abs(fit.param("center_mhz") - 70.2) < 0.3);
  CHECK(std::abs(fit.param("center_mhz") - 70.2) < 3.0 * fit.error("center_mhz"));

  const OdmrLine def;  // 70.0 MHz truth
  const auto s2 = simulate_odmr_sweep(f, def, 1000.0, {2.8, 0.5, 10000}, 22);
  const auto fit2 = fit_lorentzian(s2, OdmrLine{68.0, 12.0, -0.004, 0.0});
  CHECK(std::abs(fit2.param("center_mhz") - 70.0) < 3.0 * fit2.error("center_mhz"));
}

TEST_CASE("sweep CSV round trip") {
  const auto sweep =
      simulate_odmr_sweep(frequency_grid(60, 62, 0.5), OdmrLine{}, 100.0, {2.8, 0.5, 10}, 2);
  std::stringstream ss;
  write_csv(ss, sweep);
  CHECK(ss.str().rfind("freq_mhz,contrast,std_error\n", 0) == 0);
  const auto back = read_sweep_csv(ss);
  REQUIRE(back.size() == sweep.size());
  for (std::size_t i = 0; i < sweep.size(); ++i) {
    CHECK(back[i].freq_mhz == sweep[i].freq_mhz);
    CHECK(back[i].contrast == doctest::Approx(sweep[i].contrast).epsilon(1e-12));
    CHECK(back[i].std_error == doctest::Approx(sweep[i].std_error).epsilon(1e-12));
  }
}
