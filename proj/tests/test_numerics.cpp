#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "support.hpp"

#include "journeykv/attention.hpp"
#include "journeykv/numerics.hpp"

using namespace jkv;

TEST_CASE("matmul identity, hand oracle and annihilator") {
  std::mt19937_64 rng(1);
  const Matrix m = test::gaussian(2, 3, rng);
  CHECK(matmul(Matrix::Identity(2, 2), m) == m);

  Matrix a(2, 2), b(2, 1);
  a << 1, 2, 3, 4;
  b << 5, 6;
  Matrix expected(2, 1);
  expected << 17, 39;
  CHECK(matmul(a, b) == expected);

  CHECK(matmul(Matrix::Zero(4, 2), m).isZero(0.0));
  CHECK_THROWS_AS(matmul(m, m), DimensionError);
}

TEST_CASE("matmul agrees with a nested-loop product") {
  std::mt19937_64 rng(2);
  const Matrix a = test::gaussian(5, 7, rng), b = test::gaussian(7, 3, rng);
  Matrix loop = Matrix::Zero(5, 3);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 7; ++k) loop(i, j) += a(i, k) * b(k, j);
  CHECK(max_abs_diff(matmul(a, b), loop) <= 1e-12);
}

TEST_CASE("softmax closed forms and masking") {
  Vector zeros = Vector::Zero(2);
  CHECK(softmax<double>(zeros).isApprox(Vector::Constant(2, 0.5)));

  Vector s(2);
  s << std::log(2.0), 0.0;
  const Vector p = softmax<double>(s);
  CHECK(p[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(p[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  Vector five = Vector::Constant(2, 5.0);
  const bool allow[] = {true, false};
  const Vector one = softmax<double>(five, allow);
  CHECK(one[0] == 1.0);
  CHECK(one[1] == 0.0);

  const bool none[] = {false, false};
  CHECK_THROWS_AS(softmax<double>(five, none), NumericError);
  const bool short_mask[] = {true};
  CHECK_THROWS_AS(softmax<double>(five, short_mask), DimensionError);
}

TEST_CASE("softmax is shift invariant and survives large scores") {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 50; ++t) {
    const Vector s = test::gaussian(6, rng, 5.0);
    const Vector p = softmax<double>(s);
    CHECK(p.sum() == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(max_abs_diff(p, softmax<double>(Vector(s.array() + 700.0))) <= 1e-12);
  }
}

TEST_CASE("finite differences on simple functions") {
  Vector x(2);
  x << 1.0, 2.0;
  const Vector g = finite_diff_grad<double>([](const Vector& v) { return v.dot(v); }, x);
  CHECK(g[0] == doctest::Approx(2.0).epsilon(1e-9));
  CHECK(g[1] == doctest::Approx(4.0).epsilon(1e-9));
  CHECK(finite_diff_grad<double>([](const Vector&) { return 3.0; }, x).isZero(0.0));
  CHECK_THROWS_AS(finite_diff_grad<double>([](const Vector& v) { return std::log(v[0] - 1.0); }, x), NumericError);
}

TEST_CASE("finite differences recover the score gradient P k / sqrt(d)") {
  std::mt19937_64 rng(4);
  const int d = 8;
  OperatorTable table(d);
  table.set_slot(SlotId::named("A"), {test::random_operator(OperatorKind::low_rank, d, rng)});
  table.set_slot(SlotId::named("B"), {test::random_operator(OperatorKind::diagonal, d, rng)});
  const Journey path = journey(SlotId::named("A"), SlotId::named("B"), table);
  const Vector k = test::gaussian(d, rng), q = test::gaussian(d, rng);
  const Vector numeric =
      finite_diff_grad<double>([&](const Vector& v) { return journey_score(v, k, path, 0.3, d); }, q);
  const Vector analytic = path.matrix * k / std::sqrt(static_cast<double>(d));
  for (int i = 0; i < d; ++i) CHECK(relative_error(numeric[i], analytic[i]) <= 1e-4);
}

TEST_CASE("relative error uses the larger magnitude and a floor") {
  CHECK(relative_error(1.0, 1.0) == 0.0);
  CHECK(relative_error(2.0, 1.0) == doctest::Approx(0.5));
  CHECK(relative_error(1e-9, 0.0) == doctest::Approx(1e-3));
  CHECK(relative_error(1e-9, 0.0, 1e-12) == doctest::Approx(1.0));
}

TEST_CASE("block diagonal places blocks on the diagonal") {
  std::mt19937_64 rng(5);
  const std::vector<Matrix> blocks{test::gaussian(2, 2, rng), test::gaussian(3, 3, rng)};
  const Matrix m = block_diagonal(blocks);
  REQUIRE(m.rows() == 5);
  CHECK(m.block(0, 0, 2, 2) == blocks[0]);
  CHECK(m.block(2, 2, 3, 3) == blocks[1]);
  CHECK(m.block(0, 2, 2, 3).isZero(0.0));
  CHECK(m.block(2, 0, 3, 2).isZero(0.0));
}
