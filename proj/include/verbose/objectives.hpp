#pragma once

#include <array>

#include "verbose/victim.hpp"

namespace verbose {

// Attack losses as differentiable functionals of a teacher-forced decode. Each
// returns its value together with the gradient routed through the victim's
// backward_to_input contract. All are minimized.

/// 𝓛₁ = (1/N) Σ_i p_i[EOS]. N = 0 yields 0 and logs a warning.
LossValue delayed_eos_loss(const LossContext& ctx);

/// 𝓛₂ = Σ_i D_KL(p_i ‖ U) = Σ_i (ln V − H(p_i)), evaluated from log-softmax.
LossValue uncertainty_loss(const LossContext& ctx);

/// 𝓛₃ for images: −‖[g_1; …; g_N]‖_*, optionally of the matrix scaled by 1/√N.
LossValue token_diversity_loss(const LossContext& ctx, bool normalize_rows = false);

/// 𝓛₃ for videos: −‖[h_1; …; h_M]‖_*, optionally scaled by 1/√M.
LossValue frame_diversity_loss(const LossContext& ctx, bool normalize_rows = false);

struct LossVector {
  double l1 = 0.0;
  double l2 = 0.0;
  double l3 = 0.0;

  double operator[](std::size_t k) const { return k == 0 ? l1 : (k == 1 ? l2 : l3); }
  std::array<double, 3> as_array() const { return {l1, l2, l3}; }
};

struct CompositeLoss {
  LossVector parts;
  LossValue total;
};

/// λ₁𝓛₁ + λ₂𝓛₂ + λ₃𝓛₃ with 𝓛₃ chosen by modality. Every part is evaluated;
/// only terms with nonzero weight contribute gradient.
CompositeLoss composite_loss(const std::array<double, 3>& weights, const LossContext& ctx, Modality modality,
                             bool normalize_diversity = false);

/// Sponge baseline: −Σ_layers ‖activations‖₂².
double sponge_value(std::span<const Matrix> activations);
LossValue sponge_objective(const LossContext& ctx);

/// Slowdown baseline: Σ_i (z_i[EOS] + z_i[y_i]) over pre-softmax logits.
LossValue nicg_objective(const LossContext& ctx);

/// acc += scale · g, allocating zero-shaped fields on demand.
void accumulate(LossGradient& acc, const LossGradient& g, double scale);

}  // namespace verbose
