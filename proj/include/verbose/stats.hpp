#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

namespace verbose {

class DegenerateVariance : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

struct Regression {
  double r = 0.0;
  double slope = 0.0;
  double intercept = 0.0;
};

/// Least-squares fit of y on x with the Pearson correlation. Throws
/// DegenerateVariance when either series is constant.
Regression linear_fit(std::span<const double> x, std::span<const double> y);

struct MannWhitney {
  double u = 0.0;  // U statistic of the first sample
  double z = 0.0;
  double p_two_sided = 1.0;
  /// One-sided p for "first sample tends to be larger".
  double p_greater = 1.0;
};

/// Normal approximation with tie and continuity correction.
MannWhitney mann_whitney(std::span<const double> a, std::span<const double> b);

struct SignTest {
  std::size_t positive = 0;
  std::size_t negative = 0;
  /// Exact one-sided binomial p for "differences tend to be positive"; ties dropped.
  double p_greater = 1.0;
};

/// Paired sign test on a[i] − b[i].
SignTest sign_test(std::span<const double> a, std::span<const double> b);

double mean(std::span<const double> v);
double median(std::span<const double> v);

struct Histogram {
  double lo = 0.0;
  double width = 1.0;
  std::vector<std::size_t> counts;

  std::size_t total() const;
};

/// `bins` equal-width bins over [lo, hi]; the top edge belongs to the last bin.
Histogram histogram(std::span<const double> v, std::size_t bins, double lo, double hi);

}  // namespace verbose
