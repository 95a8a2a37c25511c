#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "verbose/numerics.hpp"

namespace testing {

inline verbose::Matrix random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  verbose::Matrix m(rows, cols);
  for (double& v : m.values()) v = d(rng);
  return m;
}

inline double rel_error(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8}); }

inline double max_abs_diff(const verbose::Matrix& a, const verbose::Matrix& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]));
  return worst;
}

}  // namespace testing
