#include "verbose/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace verbose {

namespace {

double upper_normal_tail(double z) { return 0.5 * std::erfc(z / std::sqrt(2.0)); }

}  // namespace

Regression linear_fit(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw std::invalid_argument("linear_fit: length mismatch");
  if (x.size() < 2) throw DegenerateVariance("linear_fit: need at least two points");
  const double mx = mean(x), my = mean(y);
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  if (!(sxx > 0.0) || !(syy > 0.0)) throw DegenerateVariance("linear_fit: degenerate variance");
  Regression out;
  out.slope = sxy / sxx;
  out.intercept = my - out.slope * mx;
  out.r = std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
  return out;
}

MannWhitney mann_whitney(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("mann_whitney: empty sample");
  const std::size_t n1 = a.size(), n2 = b.size(), n = n1 + n2;
  std::vector<std::pair<double, int>> all;
  all.reserve(n);
  for (double v : a) all.emplace_back(v, 0);
  for (double v : b) all.emplace_back(v, 1);
  std::sort(all.begin(), all.end());

  double rank_sum_a = 0.0, tie_term = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && all[j].first == all[i].first) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
    const double t = static_cast<double>(j - i);
    tie_term += t * t * t - t;
    for (std::size_t k = i; k < j; ++k)
      if (all[k].second == 0) rank_sum_a += avg_rank;
    i = j;
  }
  const double dn1 = static_cast<double>(n1), dn2 = static_cast<double>(n2), dn = static_cast<double>(n);
  MannWhitney out;
  out.u = rank_sum_a - dn1 * (dn1 + 1.0) / 2.0;
  const double mu = dn1 * dn2 / 2.0;
  const double var = dn1 * dn2 / 12.0 * ((dn + 1.0) - tie_term / (dn * (dn - 1.0)));
  if (!(var > 0.0)) return out;  // every value tied: no evidence either way
  const double sd = std::sqrt(var);
  const double diff = out.u - mu;
  out.z = diff / sd;
  out.p_greater = upper_normal_tail((diff - 0.5) / sd);
  out.p_two_sided = std::min(1.0, 2.0 * upper_normal_tail((std::abs(diff) - 0.5) / sd));
  return out;
}

SignTest sign_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("sign_test: length mismatch");
  SignTest out;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] > b[i]) ++out.positive;
    if (a[i] < b[i]) ++out.negative;
  }
  const std::size_t n = out.positive + out.negative;
  if (n == 0) return out;
  // P(X >= positive), X ~ Binomial(n, 1/2)
  const double dn = static_cast<double>(n);
  double p = 0.0;
  for (std::size_t k = out.positive; k <= n; ++k) {
    const double dk = static_cast<double>(k);
    p += std::exp(std::lgamma(dn + 1.0) - std::lgamma(dk + 1.0) - std::lgamma(dn - dk + 1.0) - dn * std::log(2.0));
  }
  out.p_greater = std::min(1.0, p);
  return out;
}

double mean(std::span<const double> v) {
  if (v.empty()) throw std::invalid_argument("mean: empty input");
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double median(std::span<const double> v) {
  if (v.empty()) throw std::invalid_argument("median: empty input");
  std::vector<double> s(v.begin(), v.end());
  std::sort(s.begin(), s.end());
  const std::size_t h = s.size() / 2;
  return s.size() % 2 ? s[h] : 0.5 * (s[h - 1] + s[h]);
}

std::size_t Histogram::total() const { return std::accumulate(counts.begin(), counts.end(), std::size_t{0}); }

Histogram histogram(std::span<const double> v, std::size_t bins, double lo, double hi) {
  if (bins == 0) throw std::invalid_argument("histogram: bins must be >= 1");
  if (!(hi > lo)) hi = lo + 1.0;
  Histogram h{lo, (hi - lo) / static_cast<double>(bins), std::vector<std::size_t>(bins, 0)};
  for (double x : v) {
    if (x < lo || x > hi) throw std::out_of_range("histogram: value outside [lo, hi]");
    auto b = static_cast<std::size_t>((x - lo) / h.width);
    ++h.counts[std::min(b, bins - 1)];
  }
  return h;
}

}  // namespace verbose
