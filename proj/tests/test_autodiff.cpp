#include "doctest.h"

#include "support.hpp"

#include "journeykv/autodiff.hpp"

#include <functional>

using namespace jkv;

namespace {

using Builder = std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>;

// Contracts the op output with a fixed random matrix so every output entry
// contributes, then compares tape gradients against central differences.
double worst_gradient_error(const std::vector<Matrix>& inputs, const Builder& build, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Matrix weights;
  auto evaluate = [&](const std::vector<Matrix>& values, bool record, std::vector<Matrix>* grads) {
    ad::Tape tape;
    std::vector<ad::Var> vars;
    for (const Matrix& v : values) vars.push_back(record ? tape.variable(v) : tape.constant(v));
    const ad::Var out = build(tape, vars);
    if (weights.size() == 0) weights = test::gaussian(static_cast<int>(out.rows()), static_cast<int>(out.cols()), rng);
    const ad::Var loss = ad::sum(ad::hadamard(out, tape.constant(weights)));
    if (grads) {
      tape.backward(loss);
      for (const ad::Var& v : vars) grads->push_back(tape.grad(v));
    }
    return loss.scalar();
  };
  std::vector<Matrix> grads;
  evaluate(inputs, true, &grads);
  double worst = 0.0;
  for (std::size_t which = 0; which < inputs.size(); ++which) {
    for (Eigen::Index i = 0; i < inputs[which].size(); ++i) {
      std::vector<Matrix> probe = inputs;
      const double h = 1e-6;
      probe[which].data()[i] += h;
      const double up = evaluate(probe, false, nullptr);
      probe[which].data()[i] -= 2 * h;
      const double down = evaluate(probe, false, nullptr);
      worst = std::max(worst, relative_error(grads[which].data()[i], (up - down) / (2 * h)));
    }
  }
  return worst;
}

}  // namespace

TEST_CASE("tape basics") {
  ad::Tape tape;
  const ad::Var c = tape.constant(Matrix::Constant(1, 1, 2.0));
  const ad::Var x = tape.variable(Matrix::Constant(1, 1, 3.0));
  const ad::Var y = ad::hadamard(ad::hadamard(x, x), c);
  CHECK(y.scalar() == 18.0);
  tape.backward(y);
  CHECK(tape.grad(x)(0, 0) == 12.0);
  CHECK(tape.grad(c)(0, 0) == 0.0);
  CHECK_THROWS_AS(tape.backward(tape.constant(Matrix::Zero(2, 1))), DimensionError);
  CHECK_THROWS_AS(ad::add(x, tape.constant(Matrix::Zero(2, 2))), DimensionError);
}

TEST_CASE("gradients of elementwise and linear ops match central differences") {
  std::mt19937_64 rng(11);
  const Matrix a = test::gaussian(3, 4, rng), b = test::gaussian(3, 4, rng), c = test::gaussian(4, 2, rng);
  const Matrix row = test::gaussian(1, 4, rng), col = test::gaussian(3, 1, rng);
  using V = std::vector<ad::Var>;
  CHECK(worst_gradient_error({a, b}, [](ad::Tape&, const V& v) { return ad::add(v[0], v[1]); }, 1) <= 1e-6);
  CHECK(worst_gradient_error({a, b}, [](ad::Tape&, const V& v) { return ad::sub(v[0], v[1]); }, 2) <= 1e-6);
  CHECK(worst_gradient_error({a, b}, [](ad::Tape&, const V& v) { return ad::hadamard(v[0], v[1]); }, 3) <= 1e-6);
  CHECK(worst_gradient_error({a}, [](ad::Tape&, const V& v) { return ad::scale(v[0], -1.7); }, 4) <= 1e-6);
  CHECK(worst_gradient_error({a, row}, [](ad::Tape&, const V& v) { return ad::add_row(v[0], v[1]); }, 5) <= 1e-6);
  CHECK(worst_gradient_error({a, col}, [](ad::Tape&, const V& v) { return ad::add_col(v[0], v[1]); }, 6) <= 1e-6);
  CHECK(worst_gradient_error({a, c}, [](ad::Tape&, const V& v) { return ad::matmul(v[0], v[1]); }, 7) <= 1e-6);
  CHECK(worst_gradient_error({a, b}, [](ad::Tape&, const V& v) { return ad::matmul_nt(v[0], v[1]); }, 8) <= 1e-6);
  CHECK(worst_gradient_error({a}, [](ad::Tape&, const V& v) { return ad::transpose(v[0]); }, 9) <= 1e-6);
  CHECK(worst_gradient_error({a}, [](ad::Tape&, const V& v) { return ad::tanh(v[0]); }, 10) <= 1e-6);
  CHECK(worst_gradient_error({a}, [](ad::Tape&, const V& v) { return ad::gelu(v[0]); }, 11) <= 1e-6);
  CHECK(worst_gradient_error({a}, [](ad::Tape&, const V& v) { return ad::reshape(v[0], 2, 6); }, 12) <= 1e-6);
}

TEST_CASE("gradients of structural ops match central differences") {
  std::mt19937_64 rng(12);
  const Matrix a = test::gaussian(4, 3, rng), b = test::gaussian(4, 2, rng), sq = test::gaussian(2, 2, rng);
  using V = std::vector<ad::Var>;
  CHECK(worst_gradient_error({a}, [](ad::Tape&, const V& v) { return ad::slice_rows(v[0], 1, 2); }, 1) <= 1e-6);
  CHECK(worst_gradient_error({a}, [](ad::Tape&, const V& v) { return ad::slice_cols(v[0], 1, 2); }, 2) <= 1e-6);
  CHECK(worst_gradient_error({a, b}, [](ad::Tape&, const V& v) { return ad::concat_cols(v); }, 3) <= 1e-6);
  CHECK(worst_gradient_error({a, a}, [](ad::Tape&, const V& v) { return ad::concat_rows(v); }, 4) <= 1e-6);
  const std::vector<Eigen::Index> rows{3, 0, 3, 1};
  CHECK(worst_gradient_error({a}, [&](ad::Tape&, const V& v) { return ad::gather_rows(v[0], rows); }, 5) <= 1e-6);
  const std::vector<Eigen::Index> r{0, 2, 2}, c{1, 1, 0};
  CHECK(worst_gradient_error({a}, [&](ad::Tape&, const V& v) { return ad::gather_pairs(v[0], r, c); }, 6) <= 1e-6);
  const Matrix sq3 = test::gaussian(3, 3, rng);
  CHECK(worst_gradient_error({sq, sq3}, [](ad::Tape&, const V& v) { return ad::block_diagonal(v); }, 7) <= 1e-6);
}

TEST_CASE("gradients of normalization and loss ops match central differences") {
  std::mt19937_64 rng(13);
  const Matrix x = test::gaussian(3, 5, rng), gain = test::gaussian(1, 5, rng), offset = test::gaussian(1, 5, rng);
  using V = std::vector<ad::Var>;
  CHECK(worst_gradient_error({x, gain, offset}, [](ad::Tape&, const V& v) { return ad::layer_norm_rows(v[0], v[1], v[2]); }, 1) <=
        1e-5);
  BoolMatrix allow = BoolMatrix::Constant(3, 5, true);
  allow(0, 1) = allow(2, 4) = allow(2, 0) = false;
  CHECK(worst_gradient_error({x}, [&](ad::Tape&, const V& v) { return ad::masked_softmax_rows(v[0], allow); }, 2) <= 1e-6);
  const std::vector<Eigen::Index> targets{4, 0, 2};
  CHECK(worst_gradient_error({x}, [&](ad::Tape&, const V& v) { return ad::mean_cross_entropy(v[0], targets); }, 3) <= 1e-6);
}

TEST_CASE("gradients of operator constructions match central differences") {
  std::mt19937_64 rng(14);
  using V = std::vector<ad::Var>;
  const Matrix angles = test::gaussian(1, 3, rng);
  CHECK(worst_gradient_error({angles}, [](ad::Tape&, const V& v) { return ad::rotation_operator(v[0], 2.5); }, 1) <= 1e-6);
  const Matrix logs = test::gaussian(1, 4, rng, 0.5);
  CHECK(worst_gradient_error({logs}, [](ad::Tape&, const V& v) { return ad::diagonal_operator(v[0], 10.0); }, 2) <= 1e-6);
  const Matrix small_u = test::gaussian(4, 2, rng, 0.2), small_v = test::gaussian(4, 2, rng, 0.2);
  CHECK(worst_gradient_error({small_u, small_v}, [](ad::Tape&, const V& v) { return ad::low_rank_operator(v[0], v[1], 10.0); }, 3) <=
        1e-5);
  const Matrix big_u = test::gaussian(4, 1, rng, 3.0), big_v = test::gaussian(4, 1, rng, 3.0);
  CHECK(worst_gradient_error({big_u, big_v}, [](ad::Tape&, const V& v) { return ad::low_rank_operator(v[0], v[1], 10.0); }, 4) <=
        1e-5);
  const Matrix m = Matrix::Identity(3, 3) + test::gaussian(3, 3, rng, 0.3);
  CHECK(worst_gradient_error({m}, [](ad::Tape&, const V& v) { return ad::inverse(v[0]); }, 5) <= 1e-5);
  const Matrix x = test::gaussian(4, 3, rng), m0 = test::gaussian(3, 3, rng), m1 = test::gaussian(3, 3, rng);
  const std::vector<Eigen::Index> group{1, 0, 1, 1};
  for (bool transposed : {false, true}) {
    CHECK(worst_gradient_error({x, m0, m1},
                               [&](ad::Tape&, const V& v) {
                                 const std::vector<ad::Var> mats{v[1], v[2]};
                                 return ad::rowwise_transform(v[0], group, mats, transposed);
                               },
                               6) <= 1e-6);
  }
}

TEST_CASE("operator constructions match the closed forms") {
  ad::Tape tape;
  Matrix angle(1, 1);
  angle << 1.0;
  const Matrix r = ad::rotation_operator(tape.constant(angle), 3.0).value();
  CHECK(r(0, 0) == doctest::Approx(std::cos(3.0)));
  CHECK(r(1, 0) == doctest::Approx(std::sin(3.0)));
  Matrix logs(1, 2);
  logs << 5.0, -0.5;
  const Matrix d = ad::diagonal_operator(tape.constant(logs), 10.0).value();
  CHECK(d(0, 0) == doctest::Approx(10.0));
  CHECK(d(1, 1) == doctest::Approx(std::exp(-0.5)));
  std::mt19937_64 rng(15);
  const Matrix u = test::gaussian(5, 2, rng, 3.0), v = test::gaussian(5, 2, rng, 3.0);
  const Matrix lr = ad::low_rank_operator(tape.constant(u), tape.constant(v), 10.0).value();
  Eigen::JacobiSVD<Matrix> svd(lr);
  CHECK(svd.singularValues().minCoeff() >= 0.1 - 1e-12);
  CHECK(svd.singularValues().maxCoeff() <= 1.9 + 1e-12);
}
