#ifndef JOURNEYKV_OPERATORS_HPP
#define JOURNEYKV_OPERATORS_HPP

#include "journeykv/numerics.hpp"
#include "journeykv/slot.hpp"

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace jkv {

enum class OperatorKind { rotation, diagonal, low_rank };

std::string to_string(OperatorKind kind);
OperatorKind parse_operator_kind(const std::string& text);

/// Every non-rotation operator keeps its singular values in [1/bound, bound].
inline constexpr double kStabilityBound = 10.0;

/// RoPE schedule theta_m = 10000^(-2m/d), m = 0 .. d/2-1.
template <typename Scalar = double>
VectorX<Scalar> rope_frequencies(int dim) {
  if (dim <= 0 || dim % 2 != 0) {
    throw DimensionError("rope_frequencies: dimension must be positive and even, got " +
                         std::to_string(dim));
  }
  VectorX<Scalar> freqs(dim / 2);
  for (int m = 0; m < dim / 2; ++m) {
    freqs[m] = std::pow(Scalar(10000), -Scalar(2 * m) / Scalar(dim));
  }
  return freqs;
}

/// Block-diagonal 2x2 rotation R(angle_m * step) per block.
template <typename Scalar>
MatrixX<Scalar> rotation_matrix(const VectorX<Scalar>& freqs, Scalar step) {
  const Eigen::Index half = freqs.size();
  MatrixX<Scalar> r = MatrixX<Scalar>::Zero(2 * half, 2 * half);
  for (Eigen::Index m = 0; m < half; ++m) {
    const Scalar phi = freqs[m] * step;
    const Scalar c = std::cos(phi), s = std::sin(phi);
    r(2 * m, 2 * m) = c;
    r(2 * m, 2 * m + 1) = -s;
    r(2 * m + 1, 2 * m) = s;
    r(2 * m + 1, 2 * m + 1) = c;
  }
  return r;
}

/// A d x d transport matrix together with the parameters that produced it.
template <typename Scalar = double>
class BasicRoleOperator {
 public:
  using MatrixType = MatrixX<Scalar>;
  using VectorType = VectorX<Scalar>;

  static BasicRoleOperator identity(int dim) {
    return rotation(VectorType::Zero(dim / 2), Scalar(0));
  }

  static BasicRoleOperator rotation(VectorType freqs, Scalar step) {
    BasicRoleOperator op(OperatorKind::rotation);
    op.matrix_ = rotation_matrix<Scalar>(freqs, step);
    op.angles_ = std::move(freqs);
    op.step_ = step;
    return op;
  }

  /// Log-magnitudes are clamped to [-ln bound, ln bound].
  static BasicRoleOperator diagonal(const VectorType& log_magnitudes,
                                    Scalar bound = Scalar(kStabilityBound)) {
    BasicRoleOperator op(OperatorKind::diagonal);
    const Scalar limit = std::log(bound);
    op.log_magnitudes_ = log_magnitudes.cwiseMax(-limit).cwiseMin(limit);
    op.matrix_ = op.log_magnitudes_.array().exp().matrix().asDiagonal();
    return op;
  }

  /// I + U V^T. When `constrain` is set, U is rescaled so ||U V^T||_2 <= 1 - 1/bound,
  /// which places every singular value of the operator in [1/bound, 2 - 1/bound].
  static BasicRoleOperator low_rank(MatrixType u, const MatrixType& v,
                                    Scalar bound = Scalar(kStabilityBound), bool constrain = true) {
    if (u.rows() != v.rows() || u.cols() != v.cols()) {
      throw DimensionError("low_rank: factor shapes " + shape_string(u) + " and " + shape_string(v));
    }
    BasicRoleOperator op(OperatorKind::low_rank);
    MatrixType product = u * v.transpose();
    if (constrain && product.size() > 0) {
      const Scalar radius = Scalar(1) - Scalar(1) / bound;
      Eigen::JacobiSVD<MatrixType> svd(product);
      const Scalar sigma = svd.singularValues()[0];
      if (sigma > radius) {
        u *= radius / sigma;
        product *= radius / sigma;
      }
    }
    op.u_ = std::move(u);
    op.v_ = v;
    op.matrix_ = MatrixType::Identity(op.v_.rows(), op.v_.rows()) + product;
    return op;
  }

  OperatorKind kind() const { return kind_; }
  int dim() const { return static_cast<int>(matrix_.rows()); }
  const MatrixType& matrix() const { return matrix_; }

  const VectorType& angles() const { return angles_; }
  Scalar step() const { return step_; }
  const VectorType& log_magnitudes() const { return log_magnitudes_; }
  const MatrixType& u() const { return u_; }
  const MatrixType& v() const { return v_; }

 private:
  explicit BasicRoleOperator(OperatorKind kind) : kind_(kind) {}

  OperatorKind kind_;
  MatrixType matrix_;
  VectorType angles_;
  Scalar step_ = 0;
  VectorType log_magnitudes_;
  MatrixType u_;
  MatrixType v_;
};

using RoleOperator = BasicRoleOperator<double>;

/// Block rotation at `step_index`; freqs holds one angle-per-unit per 2x2 block.
RoleOperator realize_rotation(long step_index, const Vector& freqs);
/// RoPE operator for position `k` at dimension `dim`; odd dim throws.
RoleOperator rope_operator(int dim, long k);

/// Exact inverse within the operator's own family: rotations transpose,
/// diagonals negate log-magnitudes, low-rank uses the Woodbury identity.
template <typename Scalar>
BasicRoleOperator<Scalar> invert(const BasicRoleOperator<Scalar>& op,
                                 Scalar bound = Scalar(kStabilityBound)) {
  using Op = BasicRoleOperator<Scalar>;
  using M = typename Op::MatrixType;
  switch (op.kind()) {
    case OperatorKind::rotation:
      return Op::rotation(op.angles(), -op.step());
    case OperatorKind::diagonal:
      return Op::diagonal(-op.log_magnitudes(), bound);
    case OperatorKind::low_rank: {
      Eigen::JacobiSVD<M> svd(op.matrix());
      const auto& sv = svd.singularValues();
      const Scalar smallest = sv.size() > 0 ? sv[sv.size() - 1] : Scalar(1);
      if (smallest < Scalar(1) / bound * (Scalar(1) - Scalar(1e-9))) {
        throw NumericError("invert: operator is singular within tolerance (smallest singular value " +
                           std::to_string(static_cast<double>(smallest)) + ")");
      }
      const Eigen::Index r = op.u().cols();
      M core = M::Identity(r, r) + op.v().transpose() * op.u();
      M u_inv = -(op.u() * core.inverse());
      return Op::low_rank(std::move(u_inv), op.v(), bound, /*constrain=*/false);
    }
  }
  throw std::logic_error("invert: unknown operator kind");
}

/// Returns a description of the first violated invariant, if any.
std::optional<std::string> invariant_violation(const RoleOperator& op,
                                               double bound = kStabilityBound);

/// Identifier recorded in journey paths, e.g. "slot:HEAD" or "instance:f3".
std::string slot_operator_id(const SlotId& slot);
std::string instance_operator_id(const std::string& instance);
std::string relation_operator_id(const std::string& relation);

/// Slot, relation and instance operators, optionally one per attention head.
/// Positional slots and within-slot positions are served from the RoPE schedule
/// on demand unless an explicit operator was registered.
class OperatorTable {
 public:
  explicit OperatorTable(int dim, int head_count = 1, bool per_head = false);
  /// Positional slots use `rope_freqs` (dim / 2 entries) instead of the default schedule.
  OperatorTable(int dim, int head_count, bool per_head, Vector rope_freqs);

  int dim() const { return dim_; }
  int head_count() const { return head_count_; }
  bool per_head() const { return per_head_; }
  const Vector& rope_freqs() const { return rope_freqs_; }

  /// `ops` holds one operator (shared) or head_count operators.
  void set_slot(const SlotId& slot, std::vector<RoleOperator> ops);
  void set_relation(const std::string& relation, std::vector<RoleOperator> ops);
  void set_instance(const std::string& instance, std::vector<RoleOperator> ops);

  bool has_slot(const SlotId& slot) const;
  bool has_relation(const std::string& relation) const;
  bool has_instance(const std::string& instance) const;

  RoleOperator slot(const SlotId& slot, int head = 0) const;
  RoleOperator relation(const std::string& relation, int head = 0) const;
  RoleOperator instance(const std::string& instance, int head = 0) const;
  /// Within-slot position operator (RoPE at `position`).
  RoleOperator within_slot(int position) const;

  /// Resolves an id produced by the *_operator_id helpers.
  RoleOperator resolve(const std::string& operator_id, int head = 0) const;

  std::vector<SlotId> slot_ids() const;
  std::vector<std::string> relation_ids() const;
  std::vector<std::string> instance_ids() const;

 private:
  using Family = std::map<std::string, std::vector<RoleOperator>>;

  void store(Family& family, const std::string& key, std::vector<RoleOperator> ops);
  const RoleOperator& pick(const Family& family, const std::string& key, const char* what,
                           int head) const;

  int dim_;
  int head_count_;
  bool per_head_;
  Vector rope_freqs_;
  std::map<SlotId, std::vector<RoleOperator>> slots_;
  Family relations_;
  Family instances_;
};

enum class Direction { forward, inverse };

struct JourneyStep {
  std::string operator_id;
  Direction direction = Direction::forward;
};

/// A composed transport matrix and the ordered factors that produced it.
struct Journey {
  Matrix matrix;
  std::vector<JourneyStep> path;
};

/// P_{a->b} = R_a R_b^{-1}.
Journey journey(const SlotId& a, const SlotId& b, const OperatorTable& table, int head = 0);
/// P = R_s R_{e1} R_{e2}^{-1} R_{s2}^{-1}.
Journey instance_journey(const SlotId& s, const std::string& e1, const std::string& e2,
                         const SlotId& s2, const OperatorTable& table, int head = 0);
/// P = R_i R_{e1} R_{e2}^{-1} R_j^{-1} with RoPE position operators R_i, R_j.
Journey cross_sentence_journey(int i, const std::string& e1, const std::string& e2, int j,
                               const OperatorTable& table, int head = 0);
/// J_{h->t} = R_r (forward) or J_{t->h} = R_r^{-1} (inverse).
Journey edge_journey(const std::string& relation, Direction direction, const OperatorTable& table,
                     int head = 0);

/// Product lhs * rhs with concatenated paths.
Journey compose(const Journey& lhs, const Journey& rhs);
/// Re-multiplies the path's factors from the table.
Matrix recompute(const Journey& journey, const OperatorTable& table, int head = 0);

enum class Readout { mean_pool, attention_pool };

std::string to_string(Readout readout);
Readout parse_readout(const std::string& text);

/// Two affine maps with tanh between, mapping a pooled token vector to the
/// parameter array of an operator. Column-vector convention: h = tanh(W1 x + b1).
struct ReadoutProjector {
  Matrix hidden_weight;
  Vector hidden_bias;
  Matrix output_weight;
  Vector output_bias;
  /// Scoring vector for attention pooling.
  Vector attention_query;

  static ReadoutProjector zeros(int input_dim, int hidden_dim, int param_count);
};

/// Length of the parameter array consumed by `operator_from_parameters`.
int parameter_count(OperatorKind kind, int dim, int rank = 1);
/// rotation: d/2 angles at step 1; diagonal: d log-magnitudes; low_rank: U then V, row-major d x rank.
RoleOperator operator_from_parameters(OperatorKind kind, const Vector& params, int dim,
                                      int rank = 1);

Vector pool_tokens(std::span<const Vector> tokens, Readout readout,
                   const ReadoutProjector& projector);

RoleOperator derive_instance_operator(std::span<const Vector> tokens, Readout readout,
                                      const ReadoutProjector& projector, OperatorKind kind,
                                      int dim, int rank = 1);

}  // namespace jkv

#endif  // JOURNEYKV_OPERATORS_HPP
