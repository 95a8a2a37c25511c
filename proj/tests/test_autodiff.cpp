#include <functional>
#include <random>

#include "doctest.h"
#include "support.hpp"
#include "verbose/autodiff.hpp"

using namespace verbose;
using verbose::ad::Tape;
using verbose::ad::Var;

namespace {

// Builds op(inputs) on a fresh tape and reduces it with fixed random weights.
using Op = std::function<Var(Tape&, std::vector<Var>&)>;

double weighted_output(const Op& op, std::vector<Matrix> inputs, const Matrix& w) {
  Tape t;
  std::vector<Var> vars;
  for (auto& m : inputs) vars.push_back(t.input(m));
  const Matrix& out = t.value(op(t, vars));
  double s = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) s += out.data()[i] * w.data()[i];
  return s;
}

// Compares every input gradient against central differences.
void check_op(const Op& op, const std::vector<Matrix>& inputs, std::uint64_t seed, double tol = 1e-6) {
  std::mt19937_64 rng(seed);
  Tape t;
  std::vector<Var> vars;
  for (const auto& m : inputs) vars.push_back(t.input(m));
  const Var out = op(t, vars);
  const Matrix w = testing::random_matrix(t.value(out).rows(), t.value(out).cols(), rng);
  t.grad(out) = w;
  t.backward();
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const auto f = [&](std::span<const double> x) {
      auto in = inputs;
      in[k] = Matrix(inputs[k].rows(), inputs[k].cols(), std::vector<double>(x.begin(), x.end()));
      return weighted_output(op, in, w);
    };
    const auto fd = finite_diff_grad(f, inputs[k].values(), 1e-6);
    const Matrix& g = t.grad(vars[k]);
    for (std::size_t i = 0; i < fd.size(); ++i) CHECK(g.data()[i] == doctest::Approx(fd[i]).epsilon(tol).scale(1.0));
  }
}

}  // namespace

TEST_SUITE("autodiff") {
  TEST_CASE("matmul, add, add_row and scale gradients") {
    std::mt19937_64 rng(1);
    check_op([](Tape& t, std::vector<Var>& v) { return t.matmul(v[0], v[1]); },
             {testing::random_matrix(3, 4, rng), testing::random_matrix(4, 2, rng)}, 11);
    check_op([](Tape& t, std::vector<Var>& v) { return t.add(v[0], v[1]); },
             {testing::random_matrix(3, 4, rng), testing::random_matrix(3, 4, rng)}, 12);
    check_op([](Tape& t, std::vector<Var>& v) { return t.add_row(v[0], v[1]); },
             {testing::random_matrix(3, 4, rng), testing::random_matrix(1, 4, rng)}, 13);
    check_op([](Tape& t, std::vector<Var>& v) { return t.scale(v[0], -0.7); }, {testing::random_matrix(2, 5, rng)}, 14);
  }

  TEST_CASE("layer norm gradients for input, gain and bias") {
    std::mt19937_64 rng(2);
    check_op([](Tape& t, std::vector<Var>& v) { return t.layer_norm(v[0], v[1], v[2]); },
             {testing::random_matrix(4, 6, rng), testing::random_matrix(1, 6, rng), testing::random_matrix(1, 6, rng)}, 21);
  }

  TEST_CASE("gelu gradient") {
    std::mt19937_64 rng(3);
    check_op([](Tape& t, std::vector<Var>& v) { return t.gelu(v[0]); }, {testing::random_matrix(3, 5, rng, 2.0)}, 31);
    CHECK(ad::gelu(0.0) == 0.0);
    CHECK(ad::gelu(10.0) == doctest::Approx(10.0));
  }

  TEST_CASE("attention gradients, causal and bidirectional") {
    std::mt19937_64 rng(4);
    for (bool causal : {false, true}) {
      const auto op = [causal](Tape& t, std::vector<Var>& v) { return t.attention(v[0], v[1], v[2], 2, causal); };
      check_op(op, {testing::random_matrix(4, 6, rng), testing::random_matrix(4, 6, rng), testing::random_matrix(4, 6, rng)},
               41);
    }
    // cross attention: more keys than queries
    check_op([](Tape& t, std::vector<Var>& v) { return t.attention(v[0], v[1], v[2], 3, false); },
             {testing::random_matrix(2, 6, rng), testing::random_matrix(5, 6, rng), testing::random_matrix(5, 6, rng)}, 42);
  }

  TEST_CASE("attention weights are row distributions and causal rows ignore the future") {
    std::mt19937_64 rng(5);
    Tape t;
    Matrix w;
    const Var q = t.input(testing::random_matrix(4, 8, rng));
    const Var k = t.input(testing::random_matrix(4, 8, rng));
    t.attention(q, k, k, 2, true, &w);
    REQUIRE(w.rows() == 4);
    for (std::size_t i = 0; i < 4; ++i) {
      double total = 0.0;
      for (std::size_t j = 0; j < w.cols(); ++j) total += w(i, j);
      CHECK(total == doctest::Approx(1.0));
      for (std::size_t j = i + 1; j < w.cols(); ++j) CHECK(w(i, j) == 0.0);
    }
  }

  TEST_CASE("row and column plumbing gradients") {
    std::mt19937_64 rng(6);
    check_op([](Tape& t, std::vector<Var>& v) { return t.slice_rows(v[0], 1, 2); }, {testing::random_matrix(4, 3, rng)}, 61);
    check_op(
        [](Tape& t, std::vector<Var>& v) {
          const Var parts[] = {v[0], v[1]};
          return t.concat_rows(parts);
        },
        {testing::random_matrix(2, 3, rng), testing::random_matrix(3, 3, rng)}, 62);
    check_op(
        [](Tape& t, std::vector<Var>& v) {
          const Var parts[] = {v[0], v[1]};
          return t.concat_cols(parts);
        },
        {testing::random_matrix(2, 3, rng), testing::random_matrix(2, 4, rng)}, 63);
    check_op([](Tape& t, std::vector<Var>& v) { return t.mean_rows(v[0]); }, {testing::random_matrix(5, 3, rng)}, 64);
    check_op(
        [](Tape& t, std::vector<Var>& v) {
          const int ids[] = {2, 0, 2, 1};
          return t.gather_rows(v[0], ids);
        },
        {testing::random_matrix(3, 4, rng)}, 65);
  }

  TEST_CASE("patchify layout and gradient") {
    // 4×4 frame, 2×2 patches: patch 1 is the top-right block.
    Matrix frame(1, 4 * 4 * 3);
    for (std::size_t i = 0; i < frame.size(); ++i) frame.data()[i] = static_cast<double>(i);
    Tape t;
    const Matrix& p = t.value(t.patchify(t.input(frame), 4, 4, 2));
    REQUIRE(p.rows() == 4);
    REQUIRE(p.cols() == 12);
    // first pixel of patch 1 is (y=0, x=2), channel 0
    CHECK(p(1, 0) == static_cast<double>((0 * 4 + 2) * 3));
    // first pixel of patch 2 is (y=2, x=0)
    CHECK(p(2, 0) == static_cast<double>((2 * 4 + 0) * 3));
    std::mt19937_64 rng(7);
    check_op([](Tape& t2, std::vector<Var>& v) { return t2.patchify(v[0], 4, 4, 2); }, {testing::random_matrix(1, 48, rng)},
             71);
  }

  TEST_CASE("parameters accumulate into their sinks") {
    const Matrix w = Matrix::from_rows({{1.0, 2.0}, {3.0, 4.0}});
    Matrix sink(2, 2);
    Tape t;
    const Var x = t.constant(Matrix::from_rows({{1.0, 1.0}}));
    const Var y = t.matmul(x, t.parameter(w, &sink));
    t.grad(y) = Matrix::from_rows({{1.0, 1.0}});
    t.backward();
    CHECK(sink == Matrix::from_rows({{1.0, 1.0}, {1.0, 1.0}}));
    CHECK_FALSE(t.requires_grad(x));
  }
}
