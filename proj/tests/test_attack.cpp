#include <cmath>
#include <random>

#include "doctest.h"
#include "support.hpp"
#include "verbose/attack.hpp"

using namespace verbose;

namespace {

PixelSample random_sample(const ModelConfig& c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> px(c.input_shape().total());
  for (double& v : px) v = std::round(u(rng) * 255.0) / 255.0;
  return PixelSample(c.modality(), c.input_shape(), std::move(px));
}

AttackConfig small_config(Modality m, std::size_t iterations) {
  AttackConfig c = AttackConfig::defaults_for(m);
  c.iterations = iterations;
  c.max_length = 8;
  return c;
}

bool feasible(const PixelSample& x, const PixelSample& original, double eps) {
  for (double v : x.pixels())
    if (v < 0.0 || v > 1.0) return false;
  return max_frame_linf(x, original) <= eps + 1e-12;
}

}  // namespace

TEST_SUITE("optimizer") {
  TEST_CASE("temporal decay") {
    CHECK(temporal_decay({0.0, 1.0}, 57.0, 1e-3) == 1.0);
    CHECK(temporal_decay({10.0, -20.0}, std::exp(3.0), 1e-3) == doctest::Approx(10.0).epsilon(1e-12));
    CHECK(temporal_decay({10.0, -20.0}, 1.0, 1e-3) == 1e-3);
    CHECK(temporal_decay({0.0, 0.0}, 9.0, 1e-3) == 1.0);
    CHECK_THROWS(temporal_decay({1.0, 1.0}, 0.5, 1e-3));
  }

  TEST_CASE("decay is nondecreasing in t for positive slopes, so weights do not grow") {
    const DecaySchedule s{0.5, 1.0};
    AttackConfig c;
    c.schedule = {{{10.0, -20.0}, {0.0, 0.0}, {0.5, 1.0}}};
    const LossVector losses{0.3, 2.0, -5.0};
    double prev_decay = 0.0;
    std::array<double, 3> prev_w{1e300, 1e300, 1e300};
    for (std::size_t t = 1; t < 2000; t += 7) {
      const double d = temporal_decay(s, static_cast<double>(t), 1e-3);
      CHECK(d >= prev_decay);
      prev_decay = d;
      const auto w = compute_weights(losses, t, c);
      for (std::size_t k = 0; k < 3; ++k) CHECK(w[k] <= prev_w[k]);
      prev_w = w;
    }
  }

  TEST_CASE("weight normalization") {
    AttackConfig c;
    c.schedule = {{{0.0, 2.0}, {0.0, 0.0}, {0.0, 1.0}}};
    const auto w = compute_weights({4.0, 2.0, 2.0}, 5, c);
    CHECK(w[0] == doctest::Approx(0.25));
    CHECK(w[1] == 1.0);
    CHECK(w[2] == 1.0);
    CHECK(compute_weights({1e-13, 2.0, 2.0}, 5, c)[0] == 0.0);
    c.terms = {true, false, true};
    CHECK(compute_weights({4.0, 2.0, 2.0}, 5, c)[1] == 0.0);
    c.temporal_decay = false;
    CHECK(compute_weights({4.0, 2.0, 2.0}, 5, c)[0] == doctest::Approx(0.5));
  }

  TEST_CASE("momentum smoothing") {
    const std::array<double, 3> raw{1.0, 1.0, 1.0};
    CHECK(momentum_update({0.3, 0.1, 7.0}, raw, 0.0) == raw);
    std::array<double, 3> s{0.0, 0.0, 0.0};
    for (int t = 0; t < 3; ++t) s = momentum_update(s, raw, 0.9);
    CHECK(s[0] == doctest::Approx(0.271).epsilon(1e-12));
    // contraction by exactly m per step toward a constant target
    std::array<double, 3> v{5.0, -2.0, 0.5};
    const std::array<double, 3> c{2.0, 2.0, 2.0};
    for (int t = 1; t <= 30; ++t) {
      v = momentum_update(v, c, 0.7);
      CHECK(std::abs(v[0] - 2.0) == doctest::Approx(std::pow(0.7, t) * 3.0).epsilon(1e-9));
    }
    CHECK_THROWS(momentum_update(s, raw, 1.0));
  }

  TEST_CASE("projection onto the budget") {
    const FrameShape shape{3, 2, 2};
    const double eps = 8.0 / 255.0;
    const PixelSample x = PixelSample::filled(Modality::video, shape, 0.5);
    CHECK(project(x, x, eps) == x);
    std::vector<double> px(shape.total(), 0.5);
    px[4] = 0.5 + 2 * eps;
    px[5] = 0.5 - 3 * eps;
    const PixelSample p = project(PixelSample(Modality::video, shape, px), x, eps);
    CHECK(p.pixels()[4] == doctest::Approx(0.5 + eps));
    CHECK(p.pixels()[5] == doctest::Approx(0.5 - eps));
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<double> base(shape.total()), cand(shape.total());
      for (double& v : base) v = u(rng);
      for (double& v : cand) v = u(rng);
      const PixelSample o(Modality::video, shape, base);
      const PixelSample q = project(PixelSample(Modality::video, shape, cand), o, eps);
      for (std::size_t j = 0; j < 3; ++j)
        for (std::size_t i = 0; i < shape.frame_size(); ++i)
          CHECK(std::abs(q.frame(j)[i] - o.frame(j)[i]) <= eps + 1e-12);
      CHECK(feasible(q, o, eps));
    }
    CHECK_THROWS(project(x, PixelSample::filled(Modality::video, {2, 2, 2}, 0.5), eps));
  }

  TEST_CASE("signed gradient steps") {
    const FrameShape shape{1, 2, 2};
    const PixelSample x = PixelSample::filled(Modality::image, shape, 0.5);
    PixelGradient zero{shape, std::vector<double>(shape.total(), 0.0)};
    CHECK(pgd_step(x, zero, 1.0 / 255, x, 8.0 / 255) == x);
    PixelGradient ones{shape, std::vector<double>(shape.total(), 1.0)};
    const PixelSample y = pgd_step(x, ones, 1.0 / 255, x, 8.0 / 255);
    for (double v : y.pixels()) CHECK(v == doctest::Approx(0.5 - 1.0 / 255).epsilon(1e-15));
    ones.values[2] = std::nan("");
    CHECK_THROWS_AS(pgd_step(x, ones, 1.0 / 255, x, 8.0 / 255), std::domain_error);

    std::mt19937_64 rng(2);
    std::normal_distribution<double> n(0.0, 1.0);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> base(shape.total());
    for (double& v : base) v = u(rng) < 0.3 ? 0.0 : u(rng);
    const PixelSample o(Modality::image, shape, base);
    PixelSample cur = o;
    for (int t = 0; t < 40; ++t) {
      PixelGradient g{shape, std::vector<double>(shape.total())};
      for (double& v : g.values) v = n(rng);
      cur = pgd_step(cur, g, 3.0 / 255, o, 8.0 / 255);
      CHECK(feasible(cur, o, 8.0 / 255));
    }
  }

  TEST_CASE("config validation and JSON round trip") {
    AttackConfig c = AttackConfig::video_default();
    c.iterations = 17;
    c.policy = DecodePolicy::nucleus(0.8);
    c.terms = {true, false, true};
    const AttackConfig back = AttackConfig::from_json(c.to_json(), AttackConfig::image_default());
    CHECK(back.to_json() == c.to_json());
    CHECK(AttackConfig::from_json({{"alpha", 0.01}}, AttackConfig::image_default()).alpha == 0.01);
    CHECK_THROWS(AttackConfig::from_json({{"alpha", 1.0}}, AttackConfig::image_default()));
    CHECK_THROWS(AttackConfig::from_json({{"momentum", 1.0}}, AttackConfig::image_default()));
    CHECK_THROWS(AttackConfig::from_json({{"epsilon", 0.0}}, AttackConfig::image_default()));
    CHECK(AttackConfig::image_default().schedule[0].a == 10.0);
    CHECK(AttackConfig::video_default().schedule[2].b == 500.0);
    CHECK(parse_method("nicg") == AttackMethod::nicg);
    CHECK_THROWS(parse_method("gcg"));
  }

  TEST_CASE("zero iterations return the input with an empty history") {
    const VictimModel m(ModelConfig::reduced());
    const PixelSample x = random_sample(m.config(), 3);
    std::mt19937_64 rng(1);
    const AttackResult r = attack(m, x, {}, AttackMethod::verbose, small_config(Modality::image, 0), rng);
    CHECK(r.sample == x);
    CHECK(r.history.empty());
    CHECK(attack(m, x, {}, AttackMethod::original, small_config(Modality::image, 5), rng).sample == x);
  }

  TEST_CASE("noise baseline stays within the budget") {
    const VictimModel m(ModelConfig::reduced(2));
    const PixelSample x = random_sample(m.config(), 4);
    std::mt19937_64 rng(1);
    const AttackResult r = attack(m, x, {}, AttackMethod::noise, small_config(Modality::video, 10), rng);
    CHECK_FALSE(r.sample == x);
    CHECK(feasible(r.sample, x, 8.0 / 255));
    CHECK(r.history.empty());
  }

  TEST_CASE("verbose attack history, feasibility and reproducibility") {
    for (std::size_t frames : {1u, 3u}) {
      const VictimModel m(ModelConfig::reduced(frames));
      const PixelSample x = random_sample(m.config(), 5);
      const AttackConfig c = small_config(m.config().modality(), 6);
      std::mt19937_64 r1(9), r2(9);
      const AttackResult a = attack(m, x, {}, AttackMethod::verbose, c, r1);
      const AttackResult b = attack(m, x, {}, AttackMethod::verbose, c, r2);
      CHECK(a.sample == b.sample);
      CHECK(history_jsonl(a.history) == history_jsonl(b.history));
      REQUIRE(a.history.size() == 6);
      CHECK(a.history[0].weights == std::array<double, 3>{1.0, 1.0, 1.0});
      for (std::size_t t = 0; t < a.history.size(); ++t) {
        const auto& h = a.history[t];
        CHECK(h.t == t + 1);
        CHECK(h.slack >= -1e-12);
        CHECK(h.length >= 1);
        CHECK(h.length <= 8);
        CHECK(h.weights[1] == doctest::Approx(1.0));
        CHECK(h.raw_decay[0] == doctest::Approx(c.schedule[0].a * std::log(static_cast<double>(t + 1)) + c.schedule[0].b));
      }
      CHECK(feasible(a.sample, x, c.epsilon));
      CHECK_FALSE(a.sample == x);
    }
  }

  TEST_CASE("the observer sees every feasible iterate") {
    const VictimModel m(ModelConfig::reduced(2));
    const PixelSample x = random_sample(m.config(), 10);
    std::vector<std::size_t> seen;
    PixelSample last;
    std::mt19937_64 rng(1);
    const AttackResult r =
        attack(m, x, {}, AttackMethod::verbose, small_config(Modality::video, 5), rng, [&](std::size_t t, const PixelSample& it) {
          seen.push_back(t);
          CHECK(feasible(it, x, 8.0 / 255));
          last = it;
        });
    CHECK(seen == std::vector<std::size_t>{1, 2, 3, 4, 5});
    CHECK(last == r.sample);
  }

  TEST_CASE("disabled decay and momentum give the plain normalized weights") {
    const VictimModel m(ModelConfig::reduced());
    const PixelSample x = random_sample(m.config(), 6);
    AttackConfig c = small_config(Modality::image, 5);
    c.schedule = {{{0, 0}, {0, 0}, {0, 0}}};
    c.momentum = 0.0;
    std::mt19937_64 rng(1);
    const AttackResult r = attack(m, x, {}, AttackMethod::verbose, c, rng);
    for (std::size_t t = 1; t < r.history.size(); ++t) {
      const auto& prev = r.history[t - 1].losses;
      const auto& h = r.history[t];
      CHECK(h.weights == h.raw_weights);
      for (std::size_t k = 0; k < 3; ++k) CHECK(h.weights[k] == doctest::Approx(std::abs(prev.l2) / std::abs(prev[k])));
    }
  }

  TEST_CASE("switched-off loss terms carry zero weight") {
    const VictimModel m(ModelConfig::reduced());
    const PixelSample x = random_sample(m.config(), 7);
    AttackConfig c = small_config(Modality::image, 4);
    c.terms = {false, true, false};
    std::mt19937_64 rng(1);
    for (const auto& h : attack(m, x, {}, AttackMethod::verbose, c, rng).history) {
      CHECK(h.weights[0] == 0.0);
      CHECK(h.weights[2] == 0.0);
    }
    c.terms = {false, false, false};
    CHECK(attack(m, x, {}, AttackMethod::verbose, c, rng).sample == x);
  }

  TEST_CASE("re-decode period holds tokens between decodes") {
    const VictimModel m(ModelConfig::reduced());
    const PixelSample x = random_sample(m.config(), 8);
    AttackConfig c = small_config(Modality::image, 7);
    c.redecode_period = 3;
    std::mt19937_64 rng(1);
    const auto h = attack(m, x, {}, AttackMethod::verbose, c, rng).history;
    CHECK(h[1].length == h[0].length);
    CHECK(h[2].length == h[0].length);
    CHECK(h[4].length == h[3].length);
  }

  TEST_CASE("baseline optimizers stay feasible") {
    const VictimModel m(ModelConfig::reduced());
    const PixelSample x = random_sample(m.config(), 9);
    for (AttackMethod method : {AttackMethod::sponge, AttackMethod::nicg}) {
      std::mt19937_64 rng(1);
      const AttackResult r = attack(m, x, {}, method, small_config(Modality::image, 4), rng);
      CHECK(r.history.size() == 4);
      CHECK(feasible(r.sample, x, 8.0 / 255));
    }
  }

  TEST_CASE("shape mismatch is rejected") {
    const VictimModel m(ModelConfig::reduced());
    std::mt19937_64 rng(1);
    CHECK_THROWS(attack(m, PixelSample::filled(Modality::image, {1, 4, 4}, 0.5), {}, AttackMethod::verbose,
                        small_config(Modality::image, 2), rng));
  }
}
