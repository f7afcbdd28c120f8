#ifndef JOURNEYKV_NUMERICS_HPP
#define JOURNEYKV_NUMERICS_HPP

#include <Eigen/Dense>

#include <cmath>
#include <algorithm>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>

namespace jkv {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Matrix = MatrixX<double>;
using Vector = VectorX<double>;

/// Boolean allow-matrix; true means the (query, key) pair may interact.
using BoolMatrix = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename Derived>
std::string shape_string(const Eigen::DenseBase<Derived>& m) {
  return "(" + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + ")";
}

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
  return m.derived().array().isFinite().all();
}

/// Checked dense product. Eigen's GEMM kernels accumulate in a fixed order
/// for a given build, so repeated calls are bitwise reproducible.
template <typename A, typename B>
MatrixX<typename A::Scalar> matmul(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: incompatible shapes " + shape_string(a) + " and " +
                         shape_string(b));
  }
  MatrixX<typename A::Scalar> out(a.rows(), b.cols());
  out.noalias() = a * b;
  return out;
}

/// Masked softmax with max subtraction. `allowed[i] == false` forces weight 0.
template <typename Scalar>
VectorX<Scalar> softmax(const VectorX<Scalar>& scores, std::span<const bool> allowed) {
  if (static_cast<Eigen::Index>(allowed.size()) != scores.size()) {
    throw DimensionError("softmax: mask length " + std::to_string(allowed.size()) +
                         " does not match score length " + std::to_string(scores.size()));
  }
  Scalar peak = -std::numeric_limits<Scalar>::infinity();
  for (Eigen::Index i = 0; i < scores.size(); ++i) {
    if (allowed[i]) peak = std::max(peak, scores[i]);
  }
  if (peak == -std::numeric_limits<Scalar>::infinity()) {
    throw NumericError("softmax: every entry is masked (degenerate attention row)");
  }
  VectorX<Scalar> out = VectorX<Scalar>::Zero(scores.size());
  Scalar total = 0;
  for (Eigen::Index i = 0; i < scores.size(); ++i) {
    if (!allowed[i]) continue;
    out[i] = std::exp(scores[i] - peak);
    total += out[i];
  }
  return out / total;
}

template <typename Scalar>
VectorX<Scalar> softmax(const VectorX<Scalar>& scores) {
  const auto n = static_cast<std::size_t>(scores.size());
  auto allowed = std::make_unique<bool[]>(n);
  std::fill_n(allowed.get(), n, true);
  return softmax<Scalar>(scores, std::span<const bool>(allowed.get(), n));
}

inline constexpr double kDefaultFiniteDiffStep = 1e-5;

/// Central-difference gradient, the reference oracle for every gradient check.
template <typename Scalar>
VectorX<Scalar> finite_diff_grad(const std::function<Scalar(const VectorX<Scalar>&)>& f,
                                 const VectorX<Scalar>& x,
                                 Scalar h = static_cast<Scalar>(kDefaultFiniteDiffStep)) {
  VectorX<Scalar> grad(x.size());
  VectorX<Scalar> probe = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + h;
    const Scalar up = f(probe);
    probe[i] = x[i] - h;
    const Scalar down = f(probe);
    probe[i] = x[i];
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("finite_diff_grad: non-finite evaluation at coordinate " +
                         std::to_string(i));
    }
    grad[i] = (up - down) / (2 * h);
  }
  return grad;
}

/// Symmetric relative error with a floor, used when comparing gradients.
inline double relative_error(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Largest absolute entry of (a - b).
template <typename A, typename B>
double max_abs_diff(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError("max_abs_diff: shapes " + shape_string(a) + " and " + shape_string(b));
  }
  if (a.size() == 0) return 0.0;
  return (a - b).cwiseAbs().maxCoeff();
}

/// Block-diagonal composition of square blocks.
Matrix block_diagonal(std::span<const Matrix> blocks);

}  // namespace jkv

#endif  // JOURNEYKV_NUMERICS_HPP
