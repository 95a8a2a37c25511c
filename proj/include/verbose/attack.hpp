#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "verbose/objectives.hpp"
#include "verbose/victim.hpp"

namespace verbose {

enum class AttackMethod { original, noise, sponge, nicg, verbose };

std::string_view to_string(AttackMethod m);
AttackMethod parse_method(std::string_view s);

/// 𝒯(t) = a·ln t + b. a = b = 0 disables decay for that term.
struct DecaySchedule {
  double a = 0.0;
  double b = 0.0;

  bool disabled() const { return a == 0.0 && b == 0.0; }
};

struct AttackConfig {
  double epsilon = 8.0 / 255.0;
  double alpha = 1.0 / 255.0;
  std::size_t iterations = 1000;
  std::size_t max_length = 512;
  DecodePolicy policy = DecodePolicy::greedy();
  /// Decode the current sample every this many iterations; tokens are reused
  /// in between.
  std::size_t redecode_period = 1;
  std::array<DecaySchedule, 3> schedule{{{10.0, -20.0}, {0.0, 0.0}, {0.5, 1.0}}};
  double momentum = 0.9;
  double tau_min = 1e-3;

  // Ablation switches.
  std::array<bool, 3> terms{true, true, true};
  bool temporal_decay = true;
  bool use_momentum = true;
  /// Scale the stacked diversity matrix by 1/√rows before the nuclear norm.
  bool normalize_diversity = false;

  static AttackConfig image_default();
  static AttackConfig video_default();
  static AttackConfig defaults_for(Modality m) { return m == Modality::image ? image_default() : video_default(); }

  void validate() const;
  nlohmann::json to_json() const;
  /// Fields absent from `j` keep the values already in `base`.
  static AttackConfig from_json(const nlohmann::json& j, AttackConfig base);
};

class AttackError : public std::runtime_error {
 public:
  AttackError(std::size_t iteration, const std::string& what)
      : std::runtime_error("iteration " + std::to_string(iteration) + ": " + what), iteration_(iteration) {}
  std::size_t iteration() const { return iteration_; }

 private:
  std::size_t iteration_;
};

/// max(a·ln t + b, τ_min); exactly 1 when the schedule is disabled.
double temporal_decay(const DecaySchedule& s, double t, double tau_min);

struct WeightState {
  std::array<double, 3> raw{1.0, 1.0, 1.0};
  std::array<double, 3> smoothed{1.0, 1.0, 1.0};
  LossVector previous;
};

/// λ_k = |𝓛₂| / |𝓛_k| / 𝒯_k(t) from the previous iteration's losses. Terms with
/// |𝓛_k| < 1e-12 or switched off in `config.terms` get weight 0.
std::array<double, 3> compute_weights(const LossVector& previous, std::size_t t, const AttackConfig& config);

/// λ̄ = m·λ̄_prev + (1 − m)·λ_raw, elementwise.
std::array<double, 3> momentum_update(const std::array<double, 3>& smoothed, const std::array<double, 3>& raw,
                                      double m);

/// Clamps every frame of `candidate` to the L∞ ball of radius ε around the
/// matching frame of `original`, then to [0,1].
PixelSample project(const PixelSample& candidate, const PixelSample& original, double epsilon);

/// x − α·sign(g) followed by project(). Throws std::domain_error on a
/// non-finite gradient entry.
PixelSample pgd_step(const PixelSample& current, const PixelGradient& gradient, double alpha,
                     const PixelSample& original, double epsilon);

/// Largest per-frame L∞ distance between two samples of equal shape.
double max_frame_linf(const PixelSample& a, const PixelSample& b);

struct IterationRecord {
  std::size_t t = 0;
  LossVector losses;
  double objective = 0.0;
  std::array<double, 3> raw_weights{};
  std::array<double, 3> weights{};
  /// Unclamped a·ln t + b per term, kept so the literal schedule can be studied.
  std::array<double, 3> raw_decay{};
  std::size_t length = 0;
  /// ε minus the largest per-frame L∞ distance after this step.
  double slack = 0.0;

  nlohmann::json to_json() const;
};

struct AttackResult {
  PixelSample sample;
  std::vector<IterationRecord> history;
};

/// Called with every PGD iterate, after projection.
using IterateObserver = std::function<void(std::size_t t, const PixelSample& iterate)>;

AttackResult attack(const VictimModel& victim, const PixelSample& sample, std::span<const int> prompt,
                    AttackMethod method, const AttackConfig& config, std::mt19937_64& rng,
                    const IterateObserver& observer = {});

/// One JSON object per line.
std::string history_jsonl(const std::vector<IterationRecord>& history);

}  // namespace verbose
