#ifndef JOURNEYKV_AUTODIFF_HPP
#define JOURNEYKV_AUTODIFF_HPP

// Reverse-mode differentiation over dense matrices. A Tape owns every
// intermediate value; Var is a cheap handle into it. Ops are free functions so
// forward code reads like the math it implements.

#include "journeykv/numerics.hpp"

#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

namespace jkv::ad {

class Tape;

class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const;
  std::size_t id() const { return id_; }
  Tape& tape() const { return *tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  Var variable(Matrix value);

  /// Appends a computed node. `backward` is dropped when no parent needs a gradient.
  Var record(Matrix value, std::initializer_list<Var> parents, Backward backward);
  Var record(Matrix value, std::span<const Var> parents, Backward backward);

  /// Seeds d(root)/d(root) = 1 and propagates to every node. Root must be 1x1.
  void backward(Var root);

  bool requires_grad(Var v) const { return nodes_[v.id()].requires_grad; }
  const Matrix& value(std::size_t id) const { return nodes_[id].value; }

  /// Gradient accumulated at `v`; zeros if nothing flowed there.
  Matrix grad(Var v) const;

  /// Adds `g` to the gradient of `v` if it requires one.
  void accumulate(Var v, const Matrix& g);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    Backward backward;
    bool requires_grad = false;
  };

  std::deque<Node> nodes_;
};

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var hadamard(Var a, Var b);
Var scale(Var a, double factor);
/// a (n x m) + row (1 x m) broadcast over rows.
Var add_row(Var a, Var row);
/// a (n x m) + col (n x 1) broadcast over columns.
Var add_col(Var a, Var col);
Var matmul(Var a, Var b);
/// a * b^T
Var matmul_nt(Var a, Var b);
Var transpose(Var a);
Var tanh(Var a);
/// tanh approximation of the Gaussian error linear unit.
Var gelu(Var a);
Var sum(Var a);

Var slice_rows(Var a, Eigen::Index start, Eigen::Index count);
Var slice_cols(Var a, Eigen::Index start, Eigen::Index count);
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var gather_rows(Var a, std::span<const Eigen::Index> rows);
/// out(i, j) = table(row_ids[i], col_ids[j]).
Var gather_pairs(Var table, std::span<const Eigen::Index> row_ids,
                 std::span<const Eigen::Index> col_ids);
Var block_diagonal(std::span<const Var> blocks);
/// Row-major reshape.
Var reshape(Var a, Eigen::Index rows, Eigen::Index cols);

/// Row-wise layer normalization with per-column gain and offset (both 1 x m).
Var layer_norm_rows(Var x, Var gain, Var offset, double eps = 1e-5);
/// Row-wise softmax restricted to `allowed`; a row with no allowed entry throws.
Var masked_softmax_rows(Var scores, const BoolMatrix& allowed);
/// Mean over rows of -log softmax(logits_i)[targets_i].
Var mean_cross_entropy(Var logits, std::span<const Eigen::Index> targets);

/// Block-diagonal 2x2 rotations by angles[m] * step.
Var rotation_operator(Var angles, double step);
/// diag(exp(clamp(log_magnitudes, -ln bound, ln bound))).
Var diagonal_operator(Var log_magnitudes, double bound);
/// I + s * U V^T with s chosen so that ||s U V^T||_2 <= 1 - 1/bound.
Var low_rank_operator(Var u, Var v, double bound);
Var inverse(Var a);

/// out.row(i) = x.row(i) * M_{group[i]}, or * M_{group[i]}^T when `transpose_mats`.
Var rowwise_transform(Var x, std::span<const Eigen::Index> group, std::span<const Var> mats,
                      bool transpose_mats);

}  // namespace jkv::ad

#endif  // JOURNEYKV_AUTODIFF_HPP
