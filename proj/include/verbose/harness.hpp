#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "verbose/attack.hpp"
#include "verbose/energy.hpp"
#include "verbose/shape_world.hpp"
#include "verbose/stats.hpp"

namespace verbose {

struct EvalOptions {
  DecodePolicy policy = DecodePolicy::nucleus(0.9);
  std::size_t max_length = 512;
  std::size_t trials = 3;
  ClockSpec clock;
  MeterSpec meter;

  nlohmann::json to_json() const;
  static EvalOptions from_json(const nlohmann::json& j);
  static EvalOptions from_json(const nlohmann::json& j, EvalOptions base);
};

struct GenerationMeasurement {
  double mean_length = 0.0;
  double mean_latency = 0.0;
  std::optional<double> mean_energy;
  /// Trace of the first trial.
  GenerationTrace trace;
};

/// Decodes `trials` times, trial k seeded with derive_seed(seed, k), and
/// averages length, latency and energy. Energy is absent if any trial's meter
/// reading failed.
GenerationMeasurement measure_generation(const VictimModel& victim, const PixelSample& sample,
                                         std::span<const int> prompt, const EvalOptions& options,
                                         std::uint64_t seed);

struct LinearityPoint {
  std::size_t length = 0;
  double latency = 0.0;
  std::optional<double> energy;
};

struct LinearityReport {
  std::vector<LinearityPoint> points;
  Regression latency_fit;
  std::optional<Regression> energy_fit;

  nlohmann::json to_json() const;
};

/// Fits latency (and energy, when every point has it) on token count.
LinearityReport linearity_from_points(std::vector<LinearityPoint> points);

/// Forces each length by suppressing EOS with max_length = length, then fits.
/// Needs at least four distinct lengths.
LinearityReport linearity_check(const VictimModel& victim, const PixelSample& sample,
                                const std::vector<std::size_t>& lengths, const EvalOptions& options,
                                std::uint64_t seed);

struct ChairCounts {
  std::size_t mentions = 0;
  std::size_t hallucinated = 0;
};

/// Object mentions in a shape-world caption checked against its ground truth.
/// Synonyms map onto the four shapes; nouns outside the shape world always
/// count as hallucinated; a preceding color word must also match.
ChairCounts chair_counts(const std::string& caption, const std::vector<ShapeObject>& truth);

struct Chair {
  double instance = 0.0;  // CHAIR_i
  double sentence = 0.0;  // CHAIR_s
};

Chair chair_metrics(const std::vector<std::string>& captions, const std::vector<std::vector<ShapeObject>>& truths);

/// Entropy (nats) of the step-averaged attention over visual positions.
double attention_dispersion(const StepOutputs& outputs);

/// |∂ Σ ln p_i[y_i] / ∂ pixel| for the given token sequence.
PixelGradient saliency_map(const VictimModel& victim, const PixelSample& sample, std::span<const int> prompt,
                           std::span<const int> tokens, const FrameMask& mask = {});

struct Perceptibility {
  double linf = 0.0;
  double rmse = 0.0;
};

Perceptibility perceptibility(const PixelSample& original, const PixelSample& perturbed);

struct LengthComparison {
  Histogram histogram_a;
  Histogram histogram_b;
  double median_a = 0.0;
  double median_b = 0.0;
  MannWhitney test;  // a against b

  nlohmann::json to_json() const;
  /// bin_lo, bin_hi, count_a, count_b
  std::string to_csv() const;
};

/// Histogram of lengths over [0, max] in `bins` bins.
Histogram length_histogram(std::span<const double> lengths, std::size_t bins);
LengthComparison compare_lengths(std::span<const double> a, std::span<const double> b, std::size_t bins);

struct SampleRecord {
  std::size_t id = 0;
  std::string method;
  double length = 0.0;
  double latency = 0.0;
  std::optional<double> energy;
  std::string caption;
  ChairCounts chair;
  double attention_entropy = 0.0;
  Perceptibility perturbation;

  nlohmann::json to_json() const;
};

/// Runs `fn(i)` for i in [0, n) over at most `workers` threads. The first
/// exception is rethrown after all workers stop.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn);

struct MethodRun {
  std::vector<PixelSample> samples;
  std::vector<std::vector<IterationRecord>> histories;
};

/// Attacks every item; item i uses an rng seeded by derive_seed(seed, i).
MethodRun run_attacks(const VictimModel& victim, const std::vector<ShapeWorldItem>& items,
                      std::span<const int> prompt, AttackMethod method, const AttackConfig& config,
                      std::uint64_t seed, std::size_t workers);

/// Measures each perturbed sample on `victim`; ground truth and originals come
/// from `items`.
std::vector<SampleRecord> evaluate_samples(const VictimModel& victim, const std::vector<ShapeWorldItem>& items,
                                           const std::vector<PixelSample>& samples, std::span<const int> prompt,
                                           const std::string& method, const EvalOptions& options,
                                           std::uint64_t seed, std::size_t workers);

struct MethodSummary {
  std::string method;
  std::size_t count = 0;
  double mean_length = 0.0;
  double mean_latency = 0.0;
  std::optional<double> mean_energy;
  Chair chair;
  double mean_attention_entropy = 0.0;

  nlohmann::json to_json() const;
};

MethodSummary summarize(const std::string& method, const std::vector<SampleRecord>& records,
                        const std::vector<ShapeWorldItem>& items);

struct AblationCell {
  std::string name;
  std::array<bool, 3> terms{};
  bool temporal_decay = true;
  bool momentum = true;
  double mean_length = 0.0;
  double mean_latency = 0.0;
  std::optional<double> mean_energy;
};

struct AblationTable {
  double clean_mean_length = 0.0;
  std::vector<AblationCell> cells;  // 7 loss subsets, then 4 optimizer cells

  const AblationCell& cell(const std::string& name) const;
  nlohmann::json to_json() const;
  std::string to_csv() const;
};

/// Loss subsets run with decay and momentum on; optimizer cells use all three
/// losses and toggle decay and momentum.
AblationTable ablation_suite(const VictimModel& victim, const std::vector<ShapeWorldItem>& items,
                             std::span<const int> prompt, const AttackConfig& config, const EvalOptions& options,
                             std::uint64_t seed, std::size_t workers);

struct NamedVictim {
  std::string name;
  const VictimModel* model = nullptr;
};

struct TransferTable {
  std::vector<std::string> sources;  // first entry is "none"
  std::vector<std::string> targets;
  /// mean_length[source][target]
  std::vector<std::vector<double>> mean_length;

  nlohmann::json to_json() const;
  std::string to_csv() const;
};

/// Mean length on each target of samples attacked on each source, plus the
/// unattacked row.
TransferTable transfer_eval(const std::vector<NamedVictim>& sources, const std::vector<NamedVictim>& targets,
                            const std::vector<ShapeWorldItem>& items, std::span<const int> prompt,
                            const AttackConfig& config, const EvalOptions& options, std::uint64_t seed,
                            std::size_t workers);

std::string records_jsonl(const std::vector<SampleRecord>& records);

}  // namespace verbose
