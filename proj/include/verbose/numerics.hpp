#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace verbose {

/// Raised when an iterative numerical routine exhausts its iteration budget.
class ConvergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dense row-major double matrix.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Matrix identity(std::size_t n);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  Matrix transposed() const;
  void fill(double v);
  void append_row(std::span<const double> r);

  bool all_finite() const;

  bool operator==(const Matrix& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix matmul(const Matrix& a, const Matrix& b);
/// aᵀ·b
Matrix matmul_tn(const Matrix& a, const Matrix& b);
/// a·bᵀ
Matrix matmul_nt(const Matrix& a, const Matrix& b);

/// out[j] = Σ_k x[k]·w(k, j), accumulated in k order. Row i of matmul(a, w)
/// is bit-identical to vecmat(a.row(i), w).
void vecmat(std::span<const double> x, const Matrix& w, std::span<double> out);

double frobenius_norm(const Matrix& m);

/// Probability vector over a finite vocabulary.
class Distribution {
 public:
  /// Validates nonnegativity and unit mass (1e-9).
  explicit Distribution(std::vector<double> probs);
  static Distribution uniform(std::size_t size);

  std::span<const double> probs() const { return probs_; }
  std::size_t size() const { return probs_.size(); }
  double operator[](std::size_t i) const { return probs_[i]; }

 private:
  std::vector<double> probs_;
};

Distribution softmax(std::span<const double> logits);
/// Entropy in nats with 0·ln0 = 0.
double entropy(const Distribution& p);
/// D_KL(p ‖ uniform) = ln V − H(p).
double kl_to_uniform(const Distribution& p);
/// Gradient of kl_to_uniform(softmax(z)) with respect to z.
std::vector<double> kl_to_uniform_logit_grad(std::span<const double> logits);

// Raw kernels shared by the tape and the incremental decoder.
void softmax_inplace(std::span<double> v);
double log_sum_exp(std::span<const double> v);

struct Svd {
  Matrix u;                    // rows × k
  std::vector<double> sigma;   // k, descending
  Matrix vt;                   // k × cols
};

/// Thin SVD by one-sided Jacobi, k = min(rows, cols).
Svd svd(const Matrix& m, int max_sweeps = 80);

struct NuclearNorm {
  double value = 0.0;
  Matrix subgradient;
};

/// Σσ and U·Vᵀ restricted to σ > 1e-10·σ_max.
NuclearNorm nuclear_norm(const Matrix& m);

/// Central differences (f(x + h·e_i) − f(x − h·e_i)) / 2h.
std::vector<double> finite_diff_grad(const std::function<double(std::span<const double>)>& f,
                                     std::span<const double> x, double h);

}  // namespace verbose
