#include "verbose/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace verbose {

namespace {

ModelParams zeros_like(const ModelParams& p) {
  ModelParams z = p;
  z.visit([](const std::string&, Matrix& m) { m.fill(0.0); });
  return z;
}

std::vector<Matrix*> flatten(ModelParams& p) {
  std::vector<Matrix*> out;
  p.visit([&](const std::string&, Matrix& m) { out.push_back(&m); });
  return out;
}

}  // namespace

VictimModel train_toy(ModelConfig architecture, const std::vector<ShapeWorldItem>& data, const TrainConfig& config,
                      TrainReport* report) {
  architecture.seed = config.seed;
  VictimModel model(architecture);
  if (config.epochs == 0 || data.empty()) return model;
  const VocabSpec& vocab = model.vocab();

  std::vector<std::vector<int>> targets;
  for (const auto& item : data) {
    auto ids = vocab.encode(item.caption);
    ids.push_back(vocab.eos_id());
    targets.push_back(std::move(ids));
  }

  ModelParams grads = zeros_like(model.params());
  ModelParams adam_m = grads, adam_v = grads;
  auto params = flatten(model.mutable_params());
  auto gs = flatten(grads);
  auto ms = flatten(adam_m);
  auto vs = flatten(adam_v);

  std::mt19937_64 rng(config.seed ^ 0x5eed5eedULL);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t batch = std::max<std::size_t>(1, config.batch_size);
  const std::size_t steps_per_epoch = (data.size() + batch - 1) / batch;
  const double total_steps = static_cast<double>(steps_per_epoch * config.epochs);
  const double warmup = std::min(100.0, 0.05 * total_steps);
  constexpr double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  std::size_t step = 0;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      for (Matrix* g : gs) g->fill(0.0);
      double batch_loss = 0.0;
      for (std::size_t k = start; k < end; ++k) {
        const std::size_t i = order[k];
        batch_loss += accumulate_caption_gradient(model, data[i].sample, {}, targets[i], grads, config.label_smoothing);
      }
      if (!std::isfinite(batch_loss))
        throw TrainingDiverged("training diverged (non-finite loss) at epoch " + std::to_string(epoch) +
                               " with seed " + std::to_string(config.seed));
      epoch_loss += batch_loss;
      const double inv = 1.0 / static_cast<double>(end - start);
      double norm2 = 0.0;
      for (Matrix* g : gs)
        for (double& v : g->values()) {
          v *= inv;
          norm2 += v * v;
        }
      const double clip = std::sqrt(norm2) > config.grad_clip ? config.grad_clip / std::sqrt(norm2) : 1.0;
      ++step;
      const double progress = static_cast<double>(step) / total_steps;
      double lr = config.learning_rate * (0.1 + 0.9 * 0.5 * (1.0 + std::cos(M_PI * progress)));
      if (static_cast<double>(step) < warmup) lr *= static_cast<double>(step) / warmup;
      const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
      for (std::size_t p = 0; p < params.size(); ++p) {
        double* w = params[p]->data();
        const double* g = gs[p]->data();
        double* m = ms[p]->data();
        double* v = vs[p]->data();
        for (std::size_t e = 0; e < params[p]->size(); ++e) {
          const double ge = g[e] * clip;
          m[e] = beta1 * m[e] + (1.0 - beta1) * ge;
          v[e] = beta2 * v[e] + (1.0 - beta2) * ge * ge;
          w[e] -= lr * (m[e] / c1) / (std::sqrt(v[e] / c2) + adam_eps);
        }
      }
    }
    if (report) report->epoch_loss.push_back(epoch_loss / static_cast<double>(data.size()));
  }
  return model;
}

CaptionScore score_captions(const VictimModel& model, const std::vector<ShapeWorldItem>& items,
                            std::size_t max_length) {
  CaptionScore s;
  if (items.empty()) return s;
  std::size_t matched = 0, total = 0, eos = 0, length = 0;
  std::mt19937_64 rng(0);
  DecodeOptions opt;
  opt.max_length = max_length;
  for (const auto& item : items) {
    auto ref = model.vocab().encode(item.caption);
    ref.push_back(model.vocab().eos_id());
    const auto trace = generate(model, item.sample, {}, opt, rng);
    for (std::size_t i = 0; i < ref.size(); ++i)
      if (i < trace.tokens.size() && trace.tokens[i] == ref[i]) ++matched;
    total += ref.size();
    length += trace.length();
    if (trace.ended_with_eos(model.vocab().eos_id())) ++eos;
  }
  const double n = static_cast<double>(items.size());
  s.token_accuracy = static_cast<double>(matched) / static_cast<double>(total);
  s.mean_length = static_cast<double>(length) / n;
  s.eos_rate = static_cast<double>(eos) / n;
  return s;
}

}  // namespace verbose
