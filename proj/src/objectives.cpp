#include "verbose/objectives.hpp"

#include <cmath>
#include <iostream>
#include <stdexcept>

namespace verbose {

namespace {

void add_scaled(Matrix& acc, const Matrix& g, double scale) {
  if (g.empty()) return;
  if (acc.empty()) acc = Matrix(g.rows(), g.cols());
  if (acc.rows() != g.rows() || acc.cols() != g.cols()) throw std::invalid_argument("accumulate: gradient shape mismatch");
  for (std::size_t i = 0; i < acc.size(); ++i) acc.data()[i] += scale * g.data()[i];
}

LossValue negative_nuclear(const Matrix& stacked, bool normalize_rows, Matrix LossGradient::*field) {
  LossValue out;
  if (stacked.rows() == 0) return out;
  const double s = normalize_rows ? 1.0 / std::sqrt(static_cast<double>(stacked.rows())) : 1.0;
  Matrix m = stacked;
  if (s != 1.0)
    for (double& v : m.values()) v *= s;
  NuclearNorm nn = nuclear_norm(m);
  out.value = -nn.value;
  for (double& v : nn.subgradient.values()) v *= -s;
  out.grad.*field = std::move(nn.subgradient);
  return out;
}

}  // namespace

void accumulate(LossGradient& acc, const LossGradient& g, double scale) {
  add_scaled(acc.d_logits, g.d_logits, scale);
  add_scaled(acc.d_probs, g.d_probs, scale);
  add_scaled(acc.d_hidden, g.d_hidden, scale);
  add_scaled(acc.d_frame_features, g.d_frame_features, scale);
  if (!g.d_activations.empty()) {
    if (acc.d_activations.empty()) acc.d_activations.resize(g.d_activations.size());
    if (acc.d_activations.size() != g.d_activations.size())
      throw std::invalid_argument("accumulate: activation gradient count mismatch");
    for (std::size_t k = 0; k < g.d_activations.size(); ++k) add_scaled(acc.d_activations[k], g.d_activations[k], scale);
  }
}

LossValue delayed_eos_loss(const LossContext& ctx) {
  const Matrix& p = ctx.outputs.probs;
  const std::size_t n = ctx.outputs.steps();
  LossValue out;
  if (n == 0) {
    std::cerr << "warning: delayed_eos_loss on an empty trace is defined as 0\n";
    return out;
  }
  const auto eos = static_cast<std::size_t>(ctx.vocab.eos_id());
  const double inv = 1.0 / static_cast<double>(n);
  out.grad.d_logits = Matrix(n, p.cols());
  for (std::size_t i = 0; i < n; ++i) {
    const double pe = p(i, eos);
    out.value += pe;
    for (std::size_t j = 0; j < p.cols(); ++j) out.grad.d_logits(i, j) = -inv * pe * p(i, j);
    out.grad.d_logits(i, eos) += inv * pe;
  }
  out.value *= inv;
  return out;
}

LossValue uncertainty_loss(const LossContext& ctx) {
  const Matrix& z = ctx.outputs.logits;
  const std::size_t n = ctx.outputs.steps();
  LossValue out;
  if (n == 0) return out;
  const double log_v = std::log(static_cast<double>(z.cols()));
  out.grad.d_logits = Matrix(n, z.cols());
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = z.row(i);
    const double lse = log_sum_exp(row);
    double neg_h = 0.0;
    for (double zj : row) neg_h += std::exp(zj - lse) * (zj - lse);
    out.value += log_v + neg_h;
    const auto g = kl_to_uniform_logit_grad(row);
    std::copy(g.begin(), g.end(), out.grad.d_logits.row(i).begin());
  }
  return out;
}

LossValue token_diversity_loss(const LossContext& ctx, bool normalize_rows) {
  return negative_nuclear(ctx.outputs.hidden, normalize_rows, &LossGradient::d_hidden);
}

LossValue frame_diversity_loss(const LossContext& ctx, bool normalize_rows) {
  if (ctx.outputs.frame_features.rows() == 0) throw std::invalid_argument("frame_diversity_loss: no frame features");
  return negative_nuclear(ctx.outputs.frame_features, normalize_rows, &LossGradient::d_frame_features);
}

CompositeLoss composite_loss(const std::array<double, 3>& weights, const LossContext& ctx, Modality modality,
                             bool normalize_diversity) {
  for (double w : weights)
    if (!std::isfinite(w)) throw std::invalid_argument("composite_loss: non-finite weight");
  const LossValue l1 = delayed_eos_loss(ctx);
  const LossValue l2 = uncertainty_loss(ctx);
  const LossValue l3 = modality == Modality::image ? token_diversity_loss(ctx, normalize_diversity)
                                                   : frame_diversity_loss(ctx, normalize_diversity);
  CompositeLoss out;
  out.parts = {l1.value, l2.value, l3.value};
  const LossValue* parts[3] = {&l1, &l2, &l3};
  for (std::size_t k = 0; k < 3; ++k) {
    out.total.value += weights[k] * parts[k]->value;
    if (weights[k] != 0.0) accumulate(out.total.grad, parts[k]->grad, weights[k]);
  }
  return out;
}

double sponge_value(std::span<const Matrix> activations) {
  double total = 0.0;
  for (const Matrix& a : activations)
    for (double v : a.values()) total += v * v;
  return -total;
}

LossValue sponge_objective(const LossContext& ctx) {
  LossValue out;
  out.value = sponge_value(ctx.outputs.activations);
  for (const Matrix& a : ctx.outputs.activations) {
    Matrix g = a;
    for (double& v : g.values()) v *= -2.0;
    out.grad.d_activations.push_back(std::move(g));
  }
  return out;
}

LossValue nicg_objective(const LossContext& ctx) {
  const Matrix& z = ctx.outputs.logits;
  const std::size_t n = ctx.outputs.steps();
  LossValue out;
  if (n == 0) return out;
  if (ctx.tokens.size() != n) throw std::invalid_argument("nicg_objective: token count mismatch");
  const auto eos = static_cast<std::size_t>(ctx.vocab.eos_id());
  out.grad.d_logits = Matrix(n, z.cols());
  for (std::size_t i = 0; i < n; ++i) {
    const auto y = static_cast<std::size_t>(ctx.tokens[i]);
    out.value += z(i, eos) + z(i, y);
    out.grad.d_logits(i, eos) += 1.0;
    out.grad.d_logits(i, y) += 1.0;
  }
  return out;
}

}  // namespace verbose
