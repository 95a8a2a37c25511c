#include <Eigen/Dense>
#include <random>

#include "doctest.h"
#include "support.hpp"
#include "verbose/objectives.hpp"

using namespace verbose;

namespace {

StepOutputs outputs_from_logits(const Matrix& logits) {
  StepOutputs o;
  o.logits = logits;
  o.probs = logits;
  for (std::size_t i = 0; i < o.probs.rows(); ++i) softmax_inplace(o.probs.row(i));
  return o;
}

// Loss value as a function of the flattened logits, for finite differences.
double loss_of_logits(const std::function<LossValue(const LossContext&)>& fn, std::span<const double> z, std::size_t rows,
                      std::size_t cols, const VocabSpec& vocab, std::span<const int> tokens) {
  const StepOutputs o = outputs_from_logits(Matrix(rows, cols, std::vector<double>(z.begin(), z.end())));
  return fn(LossContext{o, tokens, vocab}).value;
}

double eigen_nuclear(const Matrix& m) {
  Eigen::MatrixXd e(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) e(r, c) = m(r, c);
  return Eigen::JacobiSVD<Eigen::MatrixXd>(e).singularValues().sum();
}

}  // namespace

TEST_SUITE("objectives") {
  const VocabSpec vocab = VocabSpec::generic(8);

  TEST_CASE("delayed EOS loss is the mean EOS probability with the softmax gradient") {
    std::mt19937_64 rng(1);
    const Matrix z = testing::random_matrix(5, 8, rng);
    const StepOutputs o = outputs_from_logits(z);
    const std::vector<int> tokens(5, 3);
    const LossValue v = delayed_eos_loss({o, tokens, vocab});
    double expected = 0.0;
    for (std::size_t i = 0; i < 5; ++i) expected += o.probs(i, 2);
    CHECK(v.value == doctest::Approx(expected / 5.0).epsilon(1e-14));
    const auto fd = finite_diff_grad(
        [&](std::span<const double> x) { return loss_of_logits(delayed_eos_loss, x, 5, 8, vocab, tokens); }, z.values(), 1e-6);
    for (std::size_t i = 0; i < fd.size(); ++i) CHECK(v.grad.d_logits.data()[i] == doctest::Approx(fd[i]).epsilon(1e-6));
  }

  TEST_CASE("delayed EOS loss of an empty decode is zero") {
    const StepOutputs o = outputs_from_logits(Matrix(0, 8));
    CHECK(delayed_eos_loss({o, {}, vocab}).value == 0.0);
  }

  TEST_CASE("uncertainty loss sums KL to uniform and vanishes for uniform rows") {
    std::mt19937_64 rng(2);
    const Matrix z = testing::random_matrix(4, 8, rng, 3.0);
    const StepOutputs o = outputs_from_logits(z);
    const std::vector<int> tokens(4, 3);
    const LossValue v = uncertainty_loss({o, tokens, vocab});
    double expected = 0.0;
    for (std::size_t i = 0; i < 4; ++i) expected += kl_to_uniform(o.distribution(i));
    CHECK(v.value == doctest::Approx(expected).epsilon(1e-12));
    const auto fd = finite_diff_grad(
        [&](std::span<const double> x) { return loss_of_logits(uncertainty_loss, x, 4, 8, vocab, tokens); }, z.values(), 1e-6);
    for (std::size_t i = 0; i < fd.size(); ++i) CHECK(v.grad.d_logits.data()[i] == doctest::Approx(fd[i]).epsilon(1e-6));

    const StepOutputs flat = outputs_from_logits(Matrix(3, 8, 0.25));
    CHECK(std::abs(uncertainty_loss({flat, std::vector<int>(3, 3), vocab}).value) < 1e-12);
  }

  TEST_CASE("token diversity loss is the negative nuclear norm of the hidden states") {
    std::mt19937_64 rng(3);
    StepOutputs o = outputs_from_logits(Matrix(6, 8));
    o.hidden = testing::random_matrix(6, 10, rng);
    const std::vector<int> tokens(6, 3);
    const LossValue v = token_diversity_loss({o, tokens, vocab});
    CHECK(std::abs(v.value + eigen_nuclear(o.hidden)) < 1e-9);
    const auto f = [&](std::span<const double> x) {
      StepOutputs p = o;
      p.hidden = Matrix(6, 10, std::vector<double>(x.begin(), x.end()));
      return token_diversity_loss({p, tokens, vocab}).value;
    };
    const auto fd = finite_diff_grad(f, o.hidden.values(), 1e-6);
    for (std::size_t i = 0; i < fd.size(); ++i) CHECK(v.grad.d_hidden.data()[i] == doctest::Approx(fd[i]).epsilon(1e-5));
  }

  TEST_CASE("rank-one hidden states give minus sqrt(N) times the row norm") {
    std::mt19937_64 rng(4);
    const Matrix g = testing::random_matrix(1, 12, rng);
    StepOutputs o = outputs_from_logits(Matrix(7, 8));
    o.hidden = Matrix(0, 12);
    for (int i = 0; i < 7; ++i) o.hidden.append_row(g.row(0));
    const LossValue v = token_diversity_loss({o, std::vector<int>(7, 3), vocab});
    CHECK(std::abs(v.value + std::sqrt(7.0) * frobenius_norm(g)) < 1e-9);
    const LossValue n = token_diversity_loss({o, std::vector<int>(7, 3), vocab}, true);
    CHECK(std::abs(n.value + frobenius_norm(g)) < 1e-9);
  }

  TEST_CASE("frame diversity loss uses the frame features") {
    std::mt19937_64 rng(5);
    StepOutputs o = outputs_from_logits(Matrix(2, 8));
    o.frame_features = testing::random_matrix(8, 16, rng);
    const LossValue v = frame_diversity_loss({o, std::vector<int>(2, 3), vocab});
    CHECK(std::abs(v.value + eigen_nuclear(o.frame_features)) < 1e-9);
    CHECK(v.grad.d_frame_features.rows() == 8);
    StepOutputs none = outputs_from_logits(Matrix(2, 8));
    CHECK_THROWS(frame_diversity_loss({none, std::vector<int>(2, 3), vocab}));
  }

  TEST_CASE("composite loss weights values and drops zero-weight gradients") {
    std::mt19937_64 rng(6);
    StepOutputs o = outputs_from_logits(testing::random_matrix(4, 8, rng));
    o.hidden = testing::random_matrix(4, 6, rng);
    const std::vector<int> tokens(4, 5);
    const LossContext ctx{o, tokens, vocab};
    const CompositeLoss c = composite_loss({0.5, 2.0, 0.0}, ctx, Modality::image);
    CHECK(c.parts.l1 == delayed_eos_loss(ctx).value);
    CHECK(c.parts.l2 == uncertainty_loss(ctx).value);
    CHECK(c.parts.l3 == token_diversity_loss(ctx).value);
    CHECK(c.total.value == doctest::Approx(0.5 * c.parts.l1 + 2.0 * c.parts.l2).epsilon(1e-14));
    CHECK(c.total.grad.d_hidden.empty());
    const LossValue l1 = delayed_eos_loss(ctx), l2 = uncertainty_loss(ctx);
    for (std::size_t i = 0; i < l1.grad.d_logits.size(); ++i)
      CHECK(c.total.grad.d_logits.data()[i] ==
            doctest::Approx(0.5 * l1.grad.d_logits.data()[i] + 2.0 * l2.grad.d_logits.data()[i]).epsilon(1e-12));
    CHECK_THROWS(composite_loss({std::nan(""), 1.0, 1.0}, ctx, Modality::image));
  }

  TEST_CASE("sponge and slowdown baselines") {
    std::mt19937_64 rng(7);
    StepOutputs o = outputs_from_logits(testing::random_matrix(3, 8, rng));
    o.activations = {testing::random_matrix(2, 4, rng), testing::random_matrix(3, 4, rng)};
    const std::vector<int> tokens{4, 5, 2};
    const LossContext ctx{o, tokens, vocab};
    double sq = 0.0;
    for (const auto& a : o.activations)
      for (double v : a.values()) sq += v * v;
    const LossValue s = sponge_objective(ctx);
    CHECK(s.value == doctest::Approx(-sq).epsilon(1e-14));
    CHECK(s.grad.d_activations[1](2, 3) == doctest::Approx(-2.0 * o.activations[1](2, 3)));
    const LossValue n = nicg_objective(ctx);
    CHECK(n.value == doctest::Approx(o.logits(0, 2) + o.logits(0, 4) + o.logits(1, 2) + o.logits(1, 5) + 2 * o.logits(2, 2)));
    CHECK(n.grad.d_logits(2, 2) == 2.0);
    CHECK_THROWS(nicg_objective({o, std::vector<int>{1}, vocab}));
  }

  TEST_CASE("accumulate checks shapes") {
    LossGradient acc;
    LossGradient g;
    g.d_hidden = Matrix(2, 2, 1.0);
    accumulate(acc, g, 3.0);
    CHECK(acc.d_hidden(1, 1) == 3.0);
    g.d_hidden = Matrix(3, 2);
    CHECK_THROWS(accumulate(acc, g, 1.0));
  }

  TEST_CASE("losses composed with the reduced victim have correct input gradients") {
    for (std::size_t frames : {1u, 3u}) {
      const VictimModel m(ModelConfig::reduced(frames));
      std::mt19937_64 rng(11 + frames);
      std::uniform_real_distribution<double> u(0.05, 0.95);
      std::vector<double> px(m.config().input_shape().total());
      for (double& v : px) v = u(rng);
      const PixelSample x(m.config().modality(), m.config().input_shape(), px);
      const std::vector<int> tokens{5, 8, 3, 11, 2};
      const std::vector<LossFn> losses{
          delayed_eos_loss, uncertainty_loss,
          frames == 1 ? LossFn([](const LossContext& c) { return token_diversity_loss(c); })
                      : LossFn([](const LossContext& c) { return frame_diversity_loss(c); })};
      for (const LossFn& fn : losses) {
        const InputGradient g = backward_to_input(m, x, {}, tokens, fn);
        const auto value_at = [&](std::vector<double> p) {
          const PixelSample s(x.kind(), x.shape(), std::move(p));
          const StepOutputs o = teacher_forced_forward(m, s, {}, tokens);
          return fn(LossContext{o, tokens, m.vocab()}).value;
        };
        CHECK(g.loss == doctest::Approx(value_at(px)).epsilon(1e-12));
        std::uniform_int_distribution<std::size_t> pick(0, px.size() - 1);
        int good = 0;
        for (int probe = 0; probe < 20; ++probe) {
          const std::size_t i = pick(rng);
          auto up = px, down = px;
          up[i] += 1e-6;
          down[i] -= 1e-6;
          const double fd = (value_at(up) - value_at(down)) / 2e-6;
          if (testing::rel_error(g.gradient.values[i], fd) < 1e-4 || std::abs(g.gradient.values[i] - fd) < 1e-9) ++good;
        }
        CHECK(good >= 19);
      }
    }
  }
}
