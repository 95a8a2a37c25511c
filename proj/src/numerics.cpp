#include "verbose/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace verbose {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw std::invalid_argument("Matrix: data length does not match shape");
  }
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  Matrix m(r, c);
  std::size_t i = 0;
  for (const auto& row : rows) {
    if (row.size() != c) throw std::invalid_argument("Matrix::from_rows: ragged rows");
    std::copy(row.begin(), row.end(), m.row(i++).begin());
  }
  return m;
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::transposed() const {
  Matrix t(cols_, rows_);
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
  return t;
}

void Matrix::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

void Matrix::append_row(std::span<const double> r) {
  if (rows_ == 0 && cols_ == 0) cols_ = r.size();
  if (r.size() != cols_) throw std::invalid_argument("Matrix::append_row: width mismatch");
  data_.insert(data_.end(), r.begin(), r.end());
  ++rows_;
}

bool Matrix::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) vecmat(a.row(i), b, out.row(i));
  return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) throw std::invalid_argument("matmul_tn: row count mismatch");
  const std::size_t n = a.cols();
  const std::size_t m = b.cols();
  Matrix out(n, m);
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const double* ak = a.data() + k * n;
    const double* bk = b.data() + k * m;
    for (std::size_t i = 0; i < n; ++i) {
      const double s = ak[i];
      if (s == 0.0) continue;
      double* oi = out.data() + i * m;
      for (std::size_t j = 0; j < m; ++j) oi[j] += s * bk[j];
    }
  }
  return out;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw std::invalid_argument("matmul_nt: column count mismatch");
  const std::size_t k = a.cols();
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* ai = a.data() + i * k;
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const double* bj = b.data() + j * k;
      double s = 0.0;
      for (std::size_t t = 0; t < k; ++t) s += ai[t] * bj[t];
      out(i, j) = s;
    }
  }
  return out;
}

void vecmat(std::span<const double> x, const Matrix& w, std::span<double> out) {
  const std::size_t m = w.cols();
  std::fill(out.begin(), out.end(), 0.0);
  double* o = out.data();
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double s = x[k];
    const double* wk = w.data() + k * m;
    for (std::size_t j = 0; j < m; ++j) o[j] += s * wk[j];
  }
}

double frobenius_norm(const Matrix& m) {
  double s = 0.0;
  for (double v : m.values()) s += v * v;
  return std::sqrt(s);
}

Distribution::Distribution(std::vector<double> probs) : probs_(std::move(probs)) {
  double total = 0.0;
  for (double p : probs_) {
    if (!(p >= 0.0) || p > 1.0 + 1e-12) throw std::invalid_argument("Distribution: entry outside [0,1]");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("Distribution: mass is not 1");
}

Distribution Distribution::uniform(std::size_t size) {
  return Distribution(std::vector<double>(size, 1.0 / static_cast<double>(size)));
}

void softmax_inplace(std::span<double> v) {
  if (v.empty()) return;
  const double mx = *std::max_element(v.begin(), v.end());
  double total = 0.0;
  for (double& x : v) {
    x = std::exp(x - mx);
    total += x;
  }
  for (double& x : v) x /= total;
}

double log_sum_exp(std::span<const double> v) {
  const double mx = *std::max_element(v.begin(), v.end());
  double total = 0.0;
  for (double x : v) total += std::exp(x - mx);
  return mx + std::log(total);
}

Distribution softmax(std::span<const double> logits) {
  if (logits.empty()) throw std::invalid_argument("softmax: empty logits");
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (!std::isfinite(logits[i])) {
      std::ostringstream msg;
      msg << "softmax: non-finite logit at index " << i;
      throw std::invalid_argument(msg.str());
    }
  }
  std::vector<double> p(logits.begin(), logits.end());
  softmax_inplace(p);
  return Distribution(std::move(p));
}

double entropy(const Distribution& p) {
  double h = 0.0;
  for (double v : p.probs())
    if (v > 0.0) h -= v * std::log(v);
  return h;
}

double kl_to_uniform(const Distribution& p) {
  return std::max(0.0, std::log(static_cast<double>(p.size())) - entropy(p));
}

std::vector<double> kl_to_uniform_logit_grad(std::span<const double> logits) {
  // d/dz_j Σ p ln p = p_j (ln p_j − Σ_k p_k ln p_k), with ln p from log-softmax.
  const double lse = log_sum_exp(logits);
  std::vector<double> grad(logits.size());
  double neg_h = 0.0;
  for (std::size_t j = 0; j < logits.size(); ++j) {
    const double logp = logits[j] - lse;
    const double p = std::exp(logp);
    grad[j] = logp;
    neg_h += p * logp;
  }
  for (std::size_t j = 0; j < logits.size(); ++j) {
    const double p = std::exp(logits[j] - lse);
    grad[j] = p * (grad[j] - neg_h);
  }
  return grad;
}

namespace {

Svd svd_tall(const Matrix& a, int max_sweeps) {
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  // Columns stored contiguously.
  std::vector<double> w(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) w[j * m + i] = a(i, j);
  std::vector<double> v(n * n, 0.0);
  for (std::size_t j = 0; j < n; ++j) v[j * n + j] = 1.0;

  constexpr double tol = 1e-15;
  bool converged = false;
  for (int sweep = 0; sweep < max_sweeps && !converged; ++sweep) {
    converged = true;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      double* wp = w.data() + p * m;
      for (std::size_t q = p + 1; q < n; ++q) {
        double* wq = w.data() + q * m;
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          alpha += wp[i] * wp[i];
          beta += wq[i] * wq[i];
          gamma += wp[i] * wq[i];
        }
        if (alpha == 0.0 || beta == 0.0) continue;
        if (std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
        converged = false;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0.0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double x = wp[i];
          const double y = wq[i];
          wp[i] = c * x - s * y;
          wq[i] = s * x + c * y;
        }
        double* vp = v.data() + p * n;
        double* vq = v.data() + q * n;
        for (std::size_t i = 0; i < n; ++i) {
          const double x = vp[i];
          const double y = vq[i];
          vp[i] = c * x - s * y;
          vq[i] = s * x + c * y;
        }
      }
    }
  }
  if (!converged) {
    throw ConvergenceError("svd: one-sided Jacobi did not converge in " + std::to_string(max_sweeps) +
                           " sweeps");
  }

  std::vector<double> norms(n);
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < m; ++i) s += w[j * m + i] * w[j * m + i];
    norms[j] = std::sqrt(s);
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return norms[x] > norms[y]; });

  Svd out{Matrix(m, n), std::vector<double>(n), Matrix(n, n)};
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t j = order[k];
    out.sigma[k] = norms[j];
    if (norms[j] > 0.0)
      for (std::size_t i = 0; i < m; ++i) out.u(i, k) = w[j * m + i] / norms[j];
    for (std::size_t i = 0; i < n; ++i) out.vt(k, i) = v[j * n + i];
  }
  return out;
}

}  // namespace

Svd svd(const Matrix& m, int max_sweeps) {
  if (!m.all_finite()) throw std::invalid_argument("svd: non-finite entry");
  if (m.rows() >= m.cols()) return svd_tall(m, max_sweeps);
  Svd t = svd_tall(m.transposed(), max_sweeps);
  return Svd{t.vt.transposed(), std::move(t.sigma), t.u.transposed()};
}

NuclearNorm nuclear_norm(const Matrix& m) {
  NuclearNorm out{0.0, Matrix(m.rows(), m.cols())};
  if (m.empty()) return out;
  const Svd s = svd(m);
  const double cutoff = 1e-10 * (s.sigma.empty() ? 0.0 : s.sigma.front());
  for (std::size_t k = 0; k < s.sigma.size(); ++k) {
    out.value += s.sigma[k];
    if (s.sigma[k] <= cutoff) continue;
    for (std::size_t i = 0; i < m.rows(); ++i) {
      const double uik = s.u(i, k);
      if (uik == 0.0) continue;
      for (std::size_t j = 0; j < m.cols(); ++j) out.subgradient(i, j) += uik * s.vt(k, j);
    }
  }
  return out;
}

std::vector<double> finite_diff_grad(const std::function<double(std::span<const double>)>& f,
                                     std::span<const double> x, double h) {
  std::vector<double> probe(x.begin(), x.end());
  std::vector<double> grad(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = f(probe);
    probe[i] = orig - h;
    const double fm = f(probe);
    probe[i] = orig;
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

}  // namespace verbose
