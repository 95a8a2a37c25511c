#include "verbose/attack.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace verbose {

namespace {

nlohmann::json policy_json(const DecodePolicy& p) {
  if (p.kind == DecodePolicy::Kind::greedy) return {{"kind", "greedy"}};
  return {{"kind", "nucleus"}, {"top_p", p.top_p}};
}

DecodePolicy policy_from_json(const nlohmann::json& j) {
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "greedy") return DecodePolicy::greedy();
  if (kind == "nucleus") return DecodePolicy::nucleus(j.value("top_p", 0.9));
  throw std::invalid_argument("unknown decode policy: " + kind);
}

PixelSample clamp_to_ball(std::span<const double> c, const PixelSample& original, double epsilon) {
  const auto o = original.pixels();
  std::vector<double> out(c.size());
  for (std::size_t i = 0; i < c.size(); ++i)
    out[i] = std::clamp(std::clamp(c[i], o[i] - epsilon, o[i] + epsilon), 0.0, 1.0);
  return PixelSample(original.kind(), original.shape(), std::move(out));
}

template <class T>
void read_opt(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

std::string_view to_string(AttackMethod m) {
  switch (m) {
    case AttackMethod::original:
      return "original";
    case AttackMethod::noise:
      return "noise";
    case AttackMethod::sponge:
      return "sponge";
    case AttackMethod::nicg:
      return "nicg";
    case AttackMethod::verbose:
      return "verbose";
  }
  return "?";
}

AttackMethod parse_method(std::string_view s) {
  for (auto m : {AttackMethod::original, AttackMethod::noise, AttackMethod::sponge, AttackMethod::nicg,
                 AttackMethod::verbose})
    if (to_string(m) == s) return m;
  throw std::invalid_argument("unknown method: " + std::string(s));
}

AttackConfig AttackConfig::image_default() { return {}; }

AttackConfig AttackConfig::video_default() {
  AttackConfig c;
  c.schedule = {{{10000.0, 100000.0}, {0.0, 0.0}, {5.0, 500.0}}};
  return c;
}

void AttackConfig::validate() const {
  if (!(epsilon > 0.0)) throw std::invalid_argument("attack config: epsilon must be > 0");
  if (!(alpha > 0.0) || alpha > epsilon) throw std::invalid_argument("attack config: need 0 < alpha <= epsilon");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("attack config: momentum must lie in [0,1)");
  if (!(tau_min > 0.0)) throw std::invalid_argument("attack config: tau_min must be > 0");
  if (redecode_period < 1) throw std::invalid_argument("attack config: redecode_period must be >= 1");
  if (max_length < 1) throw std::invalid_argument("attack config: max_length must be >= 1");
  if (policy.kind == DecodePolicy::Kind::nucleus && !(policy.top_p > 0.0 && policy.top_p <= 1.0))
    throw std::invalid_argument("attack config: top_p must lie in (0,1]");
}

nlohmann::json AttackConfig::to_json() const {
  nlohmann::json sched = nlohmann::json::array();
  for (const auto& s : schedule) sched.push_back({{"a", s.a}, {"b", s.b}});
  return {{"epsilon", epsilon},
          {"alpha", alpha},
          {"iterations", iterations},
          {"max_length", max_length},
          {"policy", policy_json(policy)},
          {"redecode_period", redecode_period},
          {"schedule", sched},
          {"momentum", momentum},
          {"tau_min", tau_min},
          {"terms", terms},
          {"temporal_decay", temporal_decay},
          {"use_momentum", use_momentum},
          {"normalize_diversity", normalize_diversity}};
}

AttackConfig AttackConfig::from_json(const nlohmann::json& j, AttackConfig c) {
  read_opt(j, "epsilon", c.epsilon);
  read_opt(j, "alpha", c.alpha);
  read_opt(j, "iterations", c.iterations);
  read_opt(j, "max_length", c.max_length);
  if (j.contains("policy")) c.policy = policy_from_json(j.at("policy"));
  read_opt(j, "redecode_period", c.redecode_period);
  if (j.contains("schedule")) {
    const auto& s = j.at("schedule");
    if (!s.is_array() || s.size() != 3) throw std::invalid_argument("attack config: schedule needs 3 entries");
    for (std::size_t k = 0; k < 3; ++k) c.schedule[k] = {s[k].at("a").get<double>(), s[k].at("b").get<double>()};
  }
  read_opt(j, "momentum", c.momentum);
  read_opt(j, "tau_min", c.tau_min);
  read_opt(j, "terms", c.terms);
  read_opt(j, "temporal_decay", c.temporal_decay);
  read_opt(j, "use_momentum", c.use_momentum);
  read_opt(j, "normalize_diversity", c.normalize_diversity);
  c.validate();
  return c;
}

double temporal_decay(const DecaySchedule& s, double t, double tau_min) {
  if (!(t >= 1.0)) throw std::invalid_argument("temporal_decay: t must be >= 1");
  if (s.disabled()) return 1.0;
  return std::max(s.a * std::log(t) + s.b, tau_min);
}

std::array<double, 3> compute_weights(const LossVector& previous, std::size_t t, const AttackConfig& config) {
  std::array<double, 3> w{};
  const double ref = std::abs(previous.l2);
  for (std::size_t k = 0; k < 3; ++k) {
    if (!config.terms[k]) continue;
    const double mag = std::abs(previous[k]);
    if (mag < 1e-12) continue;
    const double decay = config.temporal_decay ? temporal_decay(config.schedule[k], static_cast<double>(t), config.tau_min) : 1.0;
    w[k] = ref / mag / decay;
  }
  return w;
}

std::array<double, 3> momentum_update(const std::array<double, 3>& smoothed, const std::array<double, 3>& raw,
                                      double m) {
  if (!(m >= 0.0 && m < 1.0)) throw std::invalid_argument("momentum_update: m must lie in [0,1)");
  std::array<double, 3> out{};
  for (std::size_t k = 0; k < 3; ++k) out[k] = m * smoothed[k] + (1.0 - m) * raw[k];
  return out;
}

PixelSample project(const PixelSample& candidate, const PixelSample& original, double epsilon) {
  if (candidate.shape() != original.shape() || candidate.kind() != original.kind())
    throw std::invalid_argument("project: shape mismatch");
  return clamp_to_ball(candidate.pixels(), original, epsilon);
}

PixelSample pgd_step(const PixelSample& current, const PixelGradient& gradient, double alpha,
                     const PixelSample& original, double epsilon) {
  if (gradient.shape != current.shape() || gradient.values.size() != current.pixels().size())
    throw std::invalid_argument("pgd_step: gradient shape mismatch");
  const auto x = current.pixels();
  std::vector<double> next(x.begin(), x.end());
  for (std::size_t i = 0; i < next.size(); ++i) {
    const double g = gradient.values[i];
    if (!std::isfinite(g)) throw std::domain_error("pgd_step: non-finite gradient at pixel " + std::to_string(i));
    if (g > 0.0)
      next[i] -= alpha;
    else if (g < 0.0)
      next[i] += alpha;
  }
  return clamp_to_ball(next, original, epsilon);
}

double max_frame_linf(const PixelSample& a, const PixelSample& b) {
  if (a.shape() != b.shape()) throw std::invalid_argument("max_frame_linf: shape mismatch");
  double worst = 0.0;
  const auto pa = a.pixels(), pb = b.pixels();
  for (std::size_t i = 0; i < pa.size(); ++i) worst = std::max(worst, std::abs(pa[i] - pb[i]));
  return worst;
}

nlohmann::json IterationRecord::to_json() const {
  return {{"t", t},
          {"losses", losses.as_array()},
          {"objective", objective},
          {"raw_weights", raw_weights},
          {"weights", weights},
          {"raw_decay", raw_decay},
          {"length", length},
          {"slack", slack}};
}

std::string history_jsonl(const std::vector<IterationRecord>& history) {
  std::ostringstream out;
  for (const auto& r : history) out << r.to_json().dump() << '\n';
  return out.str();
}

namespace {

PixelSample uniform_noise(const PixelSample& x, double epsilon, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-epsilon, epsilon);
  const auto px = x.pixels();
  std::vector<double> out(px.size());
  for (std::size_t i = 0; i < px.size(); ++i) out[i] = std::clamp(px[i] + u(rng), 0.0, 1.0);
  return PixelSample(x.kind(), x.shape(), std::move(out));
}

}  // namespace

AttackResult attack(const VictimModel& victim, const PixelSample& sample, std::span<const int> prompt,
                    AttackMethod method, const AttackConfig& config, std::mt19937_64& rng,
                    const IterateObserver& observer) {
  config.validate();
  if (sample.shape() != victim.config().input_shape())
    throw std::invalid_argument("attack: sample shape does not match the victim input");
  AttackResult result{sample, {}};
  if (method == AttackMethod::original) return result;
  if (method == AttackMethod::noise) {
    result.sample = uniform_noise(sample, config.epsilon, rng);
    return result;
  }
  const bool composite = method == AttackMethod::verbose;
  if (composite && std::none_of(config.terms.begin(), config.terms.end(), [](bool b) { return b; })) return result;

  const Modality modality = victim.config().modality();
  DecodeOptions decode;
  decode.policy = config.policy;
  decode.max_length = config.max_length;
  const double m = config.use_momentum ? config.momentum : 0.0;

  WeightState state;
  for (std::size_t k = 0; k < 3; ++k) state.raw[k] = state.smoothed[k] = config.terms[k] ? 1.0 : 0.0;
  std::vector<int> tokens;
  PixelSample current = sample;
  result.history.reserve(config.iterations);

  for (std::size_t t = 1; t <= config.iterations; ++t) {
    try {
      if ((t - 1) % config.redecode_period == 0 || tokens.empty())
        tokens = generate(victim, current, prompt, decode, rng).tokens;

      IterationRecord rec;
      rec.t = t;
      rec.length = tokens.size();
      for (std::size_t k = 0; k < 3; ++k)
        rec.raw_decay[k] = config.schedule[k].a * std::log(static_cast<double>(t)) + config.schedule[k].b;

      if (composite && t > 1) {
        state.raw = compute_weights(state.previous, t, config);
        state.smoothed = momentum_update(state.smoothed, state.raw, m);
      }
      rec.raw_weights = state.raw;
      rec.weights = state.smoothed;

      LossVector parts;
      LossFn fn = [&](const LossContext& ctx) -> LossValue {
        if (composite) {
          CompositeLoss c = composite_loss(state.smoothed, ctx, modality, config.normalize_diversity);
          parts = c.parts;
          return std::move(c.total);
        }
        parts = composite_loss({0.0, 0.0, 0.0}, ctx, modality, config.normalize_diversity).parts;
        return method == AttackMethod::sponge ? sponge_objective(ctx) : nicg_objective(ctx);
      };
      const InputGradient g = backward_to_input(victim, current, prompt, tokens, fn);
      rec.losses = parts;
      rec.objective = g.loss;
      state.previous = parts;

      current = pgd_step(current, g.gradient, config.alpha, sample, config.epsilon);
      rec.slack = config.epsilon - max_frame_linf(current, sample);
      if (rec.slack < -1e-12) throw std::logic_error("perturbation left the epsilon ball");
      result.history.push_back(rec);
      if (observer) observer(t, current);
    } catch (const AttackError&) {
      throw;
    } catch (const std::exception& e) {
      throw AttackError(t, e.what());
    }
  }
  result.sample = std::move(current);
  return result;
}

}  // namespace verbose
