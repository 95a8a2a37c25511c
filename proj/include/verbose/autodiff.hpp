#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "verbose/numerics.hpp"

namespace verbose::ad {

/// Handle to a node on a Tape.
struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
};

// Row kernels shared with the incremental decoder so that both paths round
// identically.
constexpr double kLayerNormEps = 1e-5;
void layer_norm_row(const double* x, std::size_t n, const double* gamma, const double* beta, double* out,
                    double* mean_out, double* rstd_out);
double gelu(double x);
double gelu_grad(double x);
/// Scaled dot-product attention of one query head-slice over `len` keys.
/// `k` and `v` point at the head offset of row 0; rows are `stride` apart.
/// Writes `len` softmax weights to `probs` and accumulates Σ p·v into `out`.
void attend_head_row(const double* q, const double* k, const double* v, std::size_t stride, std::size_t len,
                     std::size_t head_dim, double* probs, double* out);

/// Reverse-mode tape over dense matrices. Nodes are appended in evaluation
/// order; backward() sweeps them in reverse, skipping nodes that carry no
/// gradient requirement.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  Var input(Matrix value);
  /// References `value` without copying; it must outlive the tape. When
  /// `grad_sink` is non-null the parameter requires grad and backward()
  /// accumulates into the sink.
  Var parameter(const Matrix& value, Matrix* grad_sink = nullptr);

  const Matrix& value(Var v) const;
  /// Gradient buffer, allocated as zeros on first access.
  Matrix& grad(Var v);
  bool has_grad(Var v) const;
  bool requires_grad(Var v) const;

  void backward();

  Var matmul(Var a, Var b);
  Var add(Var a, Var b);
  /// a + broadcast of a 1×cols row.
  Var add_row(Var a, Var row);
  Var scale(Var a, double s);
  Var layer_norm(Var x, Var gamma, Var beta);
  Var gelu(Var x);
  /// Multi-head attention. Query row i sits at key position
  /// (keys − queries + i) when `causal`. Head-averaged weights are written to
  /// `weights_out` (queries × keys) when non-null.
  Var attention(Var q, Var k, Var v, std::size_t heads, bool causal, Matrix* weights_out = nullptr);
  Var slice_rows(Var a, std::size_t begin, std::size_t count);
  Var concat_rows(std::span<const Var> parts);
  Var concat_cols(std::span<const Var> parts);
  /// 1×cols mean over rows.
  Var mean_rows(Var a);
  /// Rows of `table` selected by `ids`; gradient scatters back.
  Var gather_rows(Var table, std::span<const int> ids);
  /// Frame stored as a 1×(H·W·3) row, channel-last, to (H/P·W/P)×(P·P·3)
  /// patch rows in raster order.
  Var patchify(Var frame, std::size_t height, std::size_t width, std::size_t patch);

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix owned;
    const Matrix* ref = nullptr;
    Matrix grad;
    Matrix* grad_sink = nullptr;
    bool requires_grad = false;
    std::function<void(Tape&, std::size_t)> backward;
  };

  Var push(Matrix value, bool requires_grad, std::function<void(Tape&, std::size_t)> backward);
  void accumulate(Var target, const Matrix& delta);

  std::vector<Node> nodes_;
};

}  // namespace verbose::ad
