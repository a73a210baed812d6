#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <utility>
#include <vector>

#include "marlin/gridworld.hpp"

namespace marlin {

/// Linear-interpolation quantile (the common "type 7" rule): for n points the
/// q-quantile sits at rank (n-1)q between adjacent order statistics.
inline double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw ValidationError("quantile of an empty sample");
  q = std::clamp(q, 0.0, 1.0);
  std::sort(values.begin(), values.end());
  const double h = (static_cast<double>(values.size()) - 1.0) * q;
  const auto lo = static_cast<std::size_t>(h);
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

inline double median(std::vector<double> values) { return quantile(std::move(values), 0.5); }

namespace detail {

/// Continued fraction for the regularized incomplete beta, evaluated with
/// Lentz's method. Converges quickly for x < (a+1)/(a+b+2).
inline double beta_cf(double a, double b, double x) {
  constexpr int kMaxIter = 300;
  constexpr double kEps = 3e-16;
  constexpr double kTiny = 1e-300;
  const double qab = a + b;
  const double qap = a + 1.0;
  const double qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::fabs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < kEps) break;
  }
  return h;
}

}  // namespace detail

/// Regularized incomplete beta I_x(a, b).
inline double incomplete_beta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                          a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(ln_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * detail::beta_cf(a, b, x) / a;
  return 1.0 - front * detail::beta_cf(b, a, 1.0 - x) / b;
}

/// Two-sided p-value of a Student-t statistic: p = I_{df/(df+t^2)}(df/2, 1/2).
inline double t_two_sided_p(double t, int df) {
  if (df <= 0) throw ValidationError("t test wants positive degrees of freedom");
  const double x = df / (df + t * t);
  return std::clamp(incomplete_beta(df / 2.0, 0.5, x), 0.0, 1.0);
}

/// Exact two-sided sign test: given n nonzero differences of which `positive`
/// are > 0, the p-value is min(1, 2 min(P(X<=k), P(X>=k))) for X ~ B(n, 1/2).
/// With no nonzero differences there is no evidence either way: p = 1.
inline double sign_test_p(int positive, int n) {
  if (positive < 0 || positive > n) throw ValidationError("sign test wants 0 <= k <= n");
  if (n <= 0) return 1.0;
  auto log_choose = [n](int k) {
    return std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
  };
  const double ln_half = n * std::log(0.5);
  auto tail_le = [&](int k) {
    long double acc = 0.0L;
    for (int i = 0; i <= k; ++i) acc += std::exp(log_choose(i) + ln_half);
    return acc;
  };
  // P(X >= k) = P(X <= n-k) by symmetry of B(n, 1/2); summing both tails the
  // same way keeps sign_test_p(k, n) == sign_test_p(n-k, n) bit-exact
  const long double le = tail_le(positive);
  const long double ge = tail_le(n - positive);
  const long double p = 2.0L * std::min(le, ge);
  return static_cast<double>(std::min(1.0L, std::max(0.0L, p)));
}

/// Paired comparison of per-seed scores, differences taken as a - b. The t
/// statistic needs the differences to carry variance: an exactly constant
/// nonzero shift leaves t undefined, and then only the distribution-free sign
/// test is reported. All-zero differences are no evidence at all: t = 0, p = 1.
struct PairedTest {
  int n = 0;
  double mean_diff = 0.0;
  std::optional<double> statistic;  // paired t; absent when variance degenerates
  std::optional<double> p_value;    // two-sided t p-value, absent with statistic
  int positive = 0;                 // differences > 0
  int negative = 0;                 // differences < 0
  double sign_p = 1.0;

  bool degenerate() const { return !statistic.has_value(); }
  double preferred_p() const { return p_value ? *p_value : sign_p; }
};

inline PairedTest paired_test(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ValidationError("paired test wants equal-length samples");
  if (a.size() < 2) throw ValidationError("paired test wants at least two pairs");
  PairedTest result;
  result.n = static_cast<int>(a.size());

  std::vector<double> d(a.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    d[i] = a[i] - b[i];
    sum += d[i];
    if (d[i] > 0.0) ++result.positive;
    if (d[i] < 0.0) ++result.negative;
  }
  result.mean_diff = sum / static_cast<double>(result.n);
  result.sign_p = sign_test_p(result.positive, result.positive + result.negative);

  double ss = 0.0;
  for (double x : d) ss += (x - result.mean_diff) * (x - result.mean_diff);
  const double sd = std::sqrt(ss / static_cast<double>(result.n - 1));
  if (sd == 0.0 && result.mean_diff == 0.0) {
    result.statistic = 0.0;
    result.p_value = 1.0;
    return result;
  }
  // a shift that is constant up to floating-point rounding has no usable
  // variance: the t statistic would only measure representation noise
  if (sd <= std::fabs(result.mean_diff) * 1e-12) return result;
  const double t = result.mean_diff / (sd / std::sqrt(static_cast<double>(result.n)));
  result.statistic = t;
  result.p_value = t_two_sided_p(t, result.n - 1);
  return result;
}

}  // namespace marlin
