#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "verbose/shape_world.hpp"
#include "verbose/victim.hpp"

namespace verbose {

struct TrainConfig {
  std::size_t epochs = 6;
  std::size_t batch_size = 16;
  double learning_rate = 6e-3;
  double grad_clip = 1.0;
  /// Mass moved from each target token to the uniform distribution.
  double label_smoothing = 0.0;
  std::uint64_t seed = 0;

  /// Videos need twice the epochs to reach the accuracy images reach in six.
  static TrainConfig defaults_for(Modality m) {
    TrainConfig c;
    if (m == Modality::video) c.epochs = 12;
    return c;
  }
};

struct TrainReport {
  std::vector<double> epoch_loss;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Teacher-forced cross-entropy training with Adam on caption + EOS targets.
/// The architecture's seed is replaced by `config.seed`, which also drives the
/// shuffling order. Throws TrainingDiverged (naming the seed) on a NaN loss.
VictimModel train_toy(ModelConfig architecture, const std::vector<ShapeWorldItem>& data, const TrainConfig& config,
                      TrainReport* report = nullptr);

struct CaptionScore {
  /// Fraction of reference positions (caption + EOS) the greedy decode matches.
  double token_accuracy = 0.0;
  double mean_length = 0.0;
  double eos_rate = 0.0;
};

CaptionScore score_captions(const VictimModel& model, const std::vector<ShapeWorldItem>& items,
                            std::size_t max_length = 512);

}  // namespace verbose
