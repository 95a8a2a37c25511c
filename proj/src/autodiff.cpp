#include "verbose/autodiff.hpp"

#include <cmath>
#include <stdexcept>

namespace verbose::ad {

void layer_norm_row(const double* x, std::size_t n, const double* gamma, const double* beta, double* out,
                    double* mean_out, double* rstd_out) {
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean += x[i];
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (std::size_t i = 0; i < n; ++i) var += (x[i] - mean) * (x[i] - mean);
  var /= static_cast<double>(n);
  const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
  for (std::size_t i = 0; i < n; ++i) out[i] = (x[i] - mean) * rstd * gamma[i] + beta[i];
  if (mean_out) *mean_out = mean;
  if (rstd_out) *rstd_out = rstd;
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
}

double gelu(double x) {
  const double u = kGeluC * (x + 0.044715 * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_grad(double x) {
  const double u = kGeluC * (x + 0.044715 * x * x * x);
  const double th = std::tanh(u);
  const double du = kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
  return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
}

void attend_head_row(const double* q, const double* k, const double* v, std::size_t stride, std::size_t len,
                     std::size_t head_dim, double* probs, double* out) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
  double mx = -INFINITY;
  for (std::size_t j = 0; j < len; ++j) {
    const double* kj = k + j * stride;
    double s = 0.0;
    for (std::size_t d = 0; d < head_dim; ++d) s += q[d] * kj[d];
    probs[j] = s * scale;
    if (probs[j] > mx) mx = probs[j];
  }
  double total = 0.0;
  for (std::size_t j = 0; j < len; ++j) {
    probs[j] = std::exp(probs[j] - mx);
    total += probs[j];
  }
  for (std::size_t j = 0; j < len; ++j) probs[j] /= total;
  for (std::size_t j = 0; j < len; ++j) {
    const double* vj = v + j * stride;
    const double p = probs[j];
    for (std::size_t d = 0; d < head_dim; ++d) out[d] += p * vj[d];
  }
}

Var Tape::push(Matrix value, bool requires_grad, std::function<void(Tape&, std::size_t)> backward) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Var Tape::constant(Matrix value) { return push(std::move(value), false, nullptr); }

Var Tape::input(Matrix value) { return push(std::move(value), true, nullptr); }

Var Tape::parameter(const Matrix& value, Matrix* grad_sink) {
  Node n;
  n.ref = &value;
  n.grad_sink = grad_sink;
  n.requires_grad = grad_sink != nullptr;
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

const Matrix& Tape::value(Var v) const {
  const Node& n = nodes_.at(v.id);
  return n.ref ? *n.ref : n.owned;
}

Matrix& Tape::grad(Var v) {
  Node& n = nodes_.at(v.id);
  if (n.grad.empty()) {
    const Matrix& val = n.ref ? *n.ref : n.owned;
    n.grad = Matrix(val.rows(), val.cols());
  }
  return n.grad;
}

bool Tape::has_grad(Var v) const { return !nodes_.at(v.id).grad.empty(); }

bool Tape::requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

void Tape::accumulate(Var target, const Matrix& delta) {
  if (!requires_grad(target)) return;
  Matrix& g = grad(target);
  double* gd = g.data();
  const double* dd = delta.data();
  for (std::size_t i = 0; i < g.size(); ++i) gd[i] += dd[i];
}

void Tape::backward() {
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.backward) n.backward(*this, i);
    if (n.grad_sink) {
      double* s = n.grad_sink->data();
      const double* g = n.grad.data();
      for (std::size_t k = 0; k < n.grad.size(); ++k) s[k] += g[k];
    }
  }
}

Var Tape::matmul(Var a, Var b) {
  Matrix out = verbose::matmul(value(a), value(b));
  const bool rg = requires_grad(a) || requires_grad(b);
  return push(std::move(out), rg, [a, b](Tape& t, std::size_t self) {
    const Matrix& g = t.nodes_[self].grad;
    if (t.requires_grad(a)) t.accumulate(a, matmul_nt(g, t.value(b)));
    if (t.requires_grad(b)) t.accumulate(b, matmul_tn(t.value(a), g));
  });
}

Var Tape::add(Var a, Var b) {
  const Matrix& av = value(a);
  const Matrix& bv = value(b);
  if (av.rows() != bv.rows() || av.cols() != bv.cols()) throw std::invalid_argument("Tape::add: shape mismatch");
  Matrix out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += bv.data()[i];
  const bool rg = requires_grad(a) || requires_grad(b);
  return push(std::move(out), rg, [a, b](Tape& t, std::size_t self) {
    const Matrix g = t.nodes_[self].grad;
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var Tape::add_row(Var a, Var row) {
  const Matrix& av = value(a);
  const Matrix& rv = value(row);
  if (rv.rows() != 1 || rv.cols() != av.cols()) throw std::invalid_argument("Tape::add_row: shape mismatch");
  Matrix out = av;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += rv(0, c);
  const bool rg = requires_grad(a) || requires_grad(row);
  return push(std::move(out), rg, [a, row](Tape& t, std::size_t self) {
    const Matrix g = t.nodes_[self].grad;
    t.accumulate(a, g);
    if (t.requires_grad(row)) {
      Matrix s(1, g.cols());
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) s(0, c) += g(r, c);
      t.accumulate(row, s);
    }
  });
}

Var Tape::scale(Var a, double s) {
  Matrix out = value(a);
  for (double& x : out.values()) x *= s;
  return push(std::move(out), requires_grad(a), [a, s](Tape& t, std::size_t self) {
    Matrix g = t.nodes_[self].grad;
    for (double& x : g.values()) x *= s;
    t.accumulate(a, g);
  });
}

Var Tape::layer_norm(Var x, Var gamma, Var beta) {
  const Matrix& xv = value(x);
  const Matrix& gv = value(gamma);
  const Matrix& bv = value(beta);
  const std::size_t n = xv.cols();
  if (gv.size() != n || bv.size() != n) throw std::invalid_argument("Tape::layer_norm: shape mismatch");
  Matrix out(xv.rows(), n);
  std::vector<double> means(xv.rows()), rstds(xv.rows());
  for (std::size_t r = 0; r < xv.rows(); ++r)
    layer_norm_row(xv.row(r).data(), n, gv.data(), bv.data(), out.row(r).data(), &means[r], &rstds[r]);
  const bool rg = requires_grad(x) || requires_grad(gamma) || requires_grad(beta);
  return push(std::move(out), rg,
              [x, gamma, beta, means = std::move(means), rstds = std::move(rstds)](Tape& t, std::size_t self) {
                const Matrix& g = t.nodes_[self].grad;
                const Matrix& xv = t.value(x);
                const Matrix& gv = t.value(gamma);
                const std::size_t n = xv.cols();
                Matrix dx(xv.rows(), n), dgamma(gv.rows(), gv.cols()), dbeta(gv.rows(), gv.cols());
                std::vector<double> xhat(n), dxhat(n);
                for (std::size_t r = 0; r < xv.rows(); ++r) {
                  double mean_d = 0.0, mean_dx = 0.0;
                  for (std::size_t i = 0; i < n; ++i) {
                    xhat[i] = (xv(r, i) - means[r]) * rstds[r];
                    dxhat[i] = g(r, i) * gv.data()[i];
                    dgamma.data()[i] += g(r, i) * xhat[i];
                    dbeta.data()[i] += g(r, i);
                    mean_d += dxhat[i];
                    mean_dx += dxhat[i] * xhat[i];
                  }
                  mean_d /= static_cast<double>(n);
                  mean_dx /= static_cast<double>(n);
                  for (std::size_t i = 0; i < n; ++i) dx(r, i) = rstds[r] * (dxhat[i] - mean_d - xhat[i] * mean_dx);
                }
                t.accumulate(x, dx);
                t.accumulate(gamma, dgamma);
                t.accumulate(beta, dbeta);
              });
}

Var Tape::gelu(Var x) {
  Matrix out = value(x);
  for (double& v : out.values()) v = ad::gelu(v);
  return push(std::move(out), requires_grad(x), [x](Tape& t, std::size_t self) {
    Matrix g = t.nodes_[self].grad;
    const Matrix& xv = t.value(x);
    for (std::size_t i = 0; i < g.size(); ++i) g.data()[i] *= gelu_grad(xv.data()[i]);
    t.accumulate(x, g);
  });
}

Var Tape::attention(Var q, Var k, Var v, std::size_t heads, bool causal, Matrix* weights_out) {
  const Matrix& qv = value(q);
  const Matrix& kv = value(k);
  const Matrix& vv = value(v);
  const std::size_t n = qv.rows();
  const std::size_t m = kv.rows();
  const std::size_t c = qv.cols();
  if (kv.cols() != c || vv.cols() != c || vv.rows() != m || heads == 0 || c % heads != 0)
    throw std::invalid_argument("Tape::attention: shape mismatch");
  if (causal && n > m) throw std::invalid_argument("Tape::attention: more queries than keys");
  const std::size_t dh = c / heads;
  std::vector<double> probs(heads * n * m, 0.0);
  Matrix out(n, c);
  auto visible = [=](std::size_t i) { return causal ? m - n + i + 1 : m; };
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t len = visible(i);
    for (std::size_t h = 0; h < heads; ++h) {
      attend_head_row(qv.data() + i * c + h * dh, kv.data() + h * dh, vv.data() + h * dh, c, len, dh,
                      probs.data() + (h * n + i) * m, out.data() + i * c + h * dh);
    }
  }
  if (weights_out) {
    *weights_out = Matrix(n, m);
    const double inv = 1.0 / static_cast<double>(heads);
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) (*weights_out)(i, j) += probs[(h * n + i) * m + j] * inv;
  }
  const bool rg = requires_grad(q) || requires_grad(k) || requires_grad(v);
  return push(std::move(out), rg, [=, probs = std::move(probs)](Tape& t, std::size_t self) {
    const Matrix& g = t.nodes_[self].grad;
    const Matrix& qv = t.value(q);
    const Matrix& kv = t.value(k);
    const Matrix& vv = t.value(v);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Matrix dq(n, c), dk(m, c), dv(m, c);
    std::vector<double> ds(m);
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * dh;
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t len = visible(i);
        const double* p = probs.data() + (h * n + i) * m;
        const double* gi = g.data() + i * c + off;
        double dot = 0.0;
        for (std::size_t j = 0; j < len; ++j) {
          const double* vj = vv.data() + j * c + off;
          double dp = 0.0;
          for (std::size_t d = 0; d < dh; ++d) dp += gi[d] * vj[d];
          ds[j] = dp;
          dot += p[j] * dp;
          double* dvj = dv.data() + j * c + off;
          for (std::size_t d = 0; d < dh; ++d) dvj[d] += p[j] * gi[d];
        }
        const double* qi = qv.data() + i * c + off;
        double* dqi = dq.data() + i * c + off;
        for (std::size_t j = 0; j < len; ++j) {
          const double s = p[j] * (ds[j] - dot) * scale;
          if (s == 0.0) continue;
          const double* kj = kv.data() + j * c + off;
          double* dkj = dk.data() + j * c + off;
          for (std::size_t d = 0; d < dh; ++d) {
            dqi[d] += s * kj[d];
            dkj[d] += s * qi[d];
          }
        }
      }
    }
    t.accumulate(q, dq);
    t.accumulate(k, dk);
    t.accumulate(v, dv);
  });
}

Var Tape::slice_rows(Var a, std::size_t begin, std::size_t count) {
  const Matrix& av = value(a);
  if (begin + count > av.rows()) throw std::invalid_argument("Tape::slice_rows: out of range");
  const std::size_t c = av.cols();
  Matrix out(count, c, std::vector<double>(av.data() + begin * c, av.data() + (begin + count) * c));
  return push(std::move(out), requires_grad(a), [a, begin](Tape& t, std::size_t self) {
    const Matrix& g = t.nodes_[self].grad;
    Matrix& ga = t.grad(a);
    const std::size_t c = g.cols();
    for (std::size_t i = 0; i < g.size(); ++i) ga.data()[begin * c + i] += g.data()[i];
  });
}

Var Tape::concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("Tape::concat_rows: no parts");
  const std::size_t c = value(parts[0]).cols();
  Matrix out;
  bool rg = false;
  for (Var p : parts) {
    const Matrix& pv = value(p);
    if (pv.cols() != c) throw std::invalid_argument("Tape::concat_rows: width mismatch");
    for (std::size_t r = 0; r < pv.rows(); ++r) out.append_row(pv.row(r));
    rg = rg || requires_grad(p);
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return push(std::move(out), rg, [ps](Tape& t, std::size_t self) {
    const Matrix g = t.nodes_[self].grad;
    std::size_t offset = 0;
    for (Var p : ps) {
      const std::size_t n = t.value(p).size();
      if (t.requires_grad(p)) {
        Matrix& gp = t.grad(p);
        for (std::size_t i = 0; i < n; ++i) gp.data()[i] += g.data()[offset + i];
      }
      offset += n;
    }
  });
}

Var Tape::concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("Tape::concat_cols: no parts");
  const std::size_t r = value(parts[0]).rows();
  std::size_t total = 0;
  bool rg = false;
  for (Var p : parts) {
    if (value(p).rows() != r) throw std::invalid_argument("Tape::concat_cols: height mismatch");
    total += value(p).cols();
    rg = rg || requires_grad(p);
  }
  Matrix out(r, total);
  std::size_t off = 0;
  for (Var p : parts) {
    const Matrix& pv = value(p);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < pv.cols(); ++j) out(i, off + j) = pv(i, j);
    off += pv.cols();
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return push(std::move(out), rg, [ps](Tape& t, std::size_t self) {
    const Matrix g = t.nodes_[self].grad;
    std::size_t off = 0;
    for (Var p : ps) {
      const std::size_t w = t.value(p).cols();
      if (t.requires_grad(p)) {
        Matrix& gp = t.grad(p);
        for (std::size_t i = 0; i < g.rows(); ++i)
          for (std::size_t j = 0; j < w; ++j) gp(i, j) += g(i, off + j);
      }
      off += w;
    }
  });
}

Var Tape::mean_rows(Var a) {
  const Matrix& av = value(a);
  Matrix out(1, av.cols());
  for (std::size_t r = 0; r < av.rows(); ++r)
    for (std::size_t c = 0; c < av.cols(); ++c) out(0, c) += av(r, c);
  const double inv = 1.0 / static_cast<double>(av.rows());
  for (double& v : out.values()) v *= inv;
  return push(std::move(out), requires_grad(a), [a, inv](Tape& t, std::size_t self) {
    const Matrix& g = t.nodes_[self].grad;
    Matrix& ga = t.grad(a);
    for (std::size_t r = 0; r < ga.rows(); ++r)
      for (std::size_t c = 0; c < ga.cols(); ++c) ga(r, c) += g(0, c) * inv;
  });
}

Var Tape::gather_rows(Var table, std::span<const int> ids) {
  const Matrix& tv = value(table);
  Matrix out(ids.size(), tv.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= tv.rows())
      throw std::out_of_range("Tape::gather_rows: id out of range");
    std::copy(tv.row(ids[i]).begin(), tv.row(ids[i]).end(), out.row(i).begin());
  }
  std::vector<int> idv(ids.begin(), ids.end());
  return push(std::move(out), requires_grad(table), [table, idv](Tape& t, std::size_t self) {
    const Matrix& g = t.nodes_[self].grad;
    Matrix& gt = t.grad(table);
    for (std::size_t i = 0; i < idv.size(); ++i)
      for (std::size_t c = 0; c < g.cols(); ++c) gt(idv[i], c) += g(i, c);
  });
}

Var Tape::patchify(Var frame, std::size_t height, std::size_t width, std::size_t patch) {
  const Matrix& fv = value(frame);
  if (fv.size() != height * width * 3 || height % patch != 0 || width % patch != 0)
    throw std::invalid_argument("Tape::patchify: frame shape mismatch");
  const std::size_t ph = height / patch, pw = width / patch;
  const std::size_t dim = patch * patch * 3;
  std::vector<std::size_t> index(ph * pw * dim);
  for (std::size_t py = 0; py < ph; ++py)
    for (std::size_t px = 0; px < pw; ++px)
      for (std::size_t dy = 0; dy < patch; ++dy)
        for (std::size_t dx = 0; dx < patch; ++dx)
          for (std::size_t ch = 0; ch < 3; ++ch) {
            const std::size_t p = py * pw + px;
            const std::size_t e = (dy * patch + dx) * 3 + ch;
            index[p * dim + e] = ((py * patch + dy) * width + (px * patch + dx)) * 3 + ch;
          }
  Matrix out(ph * pw, dim);
  for (std::size_t i = 0; i < index.size(); ++i) out.data()[i] = fv.data()[index[i]];
  return push(std::move(out), requires_grad(frame), [frame, index = std::move(index)](Tape& t, std::size_t self) {
    const Matrix& g = t.nodes_[self].grad;
    Matrix& gf = t.grad(frame);
    for (std::size_t i = 0; i < index.size(); ++i) gf.data()[index[i]] += g.data()[i];
  });
}

}  // namespace verbose::ad
