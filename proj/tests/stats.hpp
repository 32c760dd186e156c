#pragma once

// Small statistical helpers shared by the test suites.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include <boost/math/distributions/chi_squared.hpp>

namespace vsi::test {

struct Moments {
  double mean = 0.0;
  double var = 0.0;  // unbiased
};

inline Moments moments(const std::vector<double>& xs) {
  Moments m;
  const double n = static_cast<double>(xs.size());
  for (double x : xs) m.mean += x;
  m.mean /= n;
  for (double x : xs) m.var += (x - m.mean) * (x - m.mean);
  m.var /= n - 1.0;
  return m;
}

// Pearson chi-square of observed counts against expected counts, pooling
// adjacent cells until each expects at least min_expected. Returns the
// upper-tail p-value with (cells - 1 - fitted) degrees of freedom.
inline double chi_square_p(const std::vector<double>& observed,
                           const std::vector<double>& expected, int fitted = 0,
                           double min_expected = 5.0) {
  std::vector<double> o, e;
  double oa = 0.0, ea = 0.0;
  for (std::size_t i = 0; i < observed.size(); ++i) {
    oa += observed[i];
    ea += expected[i];
    if (ea >= min_expected) {
      o.push_back(oa);
      e.push_back(ea);
      oa = ea = 0.0;
    }
  }
  if (ea > 0.0 || oa > 0.0) {
    o.back() += oa;
    e.back() += ea;
  }
  double chi2 = 0.0;
  for (std::size_t i = 0; i < o.size(); ++i) chi2 += (o[i] - e[i]) * (o[i] - e[i]) / e[i];
  const int dof = static_cast<int>(o.size()) - 1 - fitted;
  boost::math::chi_squared dist(dof);
  return boost::math::cdf(boost::math::complement(dist, chi2));
}

// One-sample Kolmogorov-Smirnov test; p-value from the asymptotic
// Kolmogorov distribution with the Stephens small-sample correction.
inline double ks_p(std::vector<double> xs, const std::function<double(double)>& cdf) {
  std::sort(xs.begin(), xs.end());
  const double n = static_cast<double>(xs.size());
  double d = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double f = cdf(xs[i]);
    d = std::max({d, static_cast<double>(i + 1) / n - f, f - static_cast<double>(i) / n});
  }
  const double sn = std::sqrt(n);
  const double lambda = (sn + 0.12 + 0.11 / sn) * d;
  double p = 0.0;
  for (int k = 1; k <= 100; ++k) {
    const double term = 2.0 * std::exp(-2.0 * k * k * lambda * lambda);
    p += (k % 2 == 1) ? term : -term;
    if (term < 1e-16) break;
  }
  return std::clamp(p, 0.0, 1.0);
}

}  // namespace vsi::test
