#include "doctest.h"

#include "support.hpp"

#include "journeykv/operators.hpp"

using namespace jkv;

namespace {

Matrix rotation2(double angle) {
  Matrix r(2, 2);
  r << std::cos(angle), -std::sin(angle), std::sin(angle), std::cos(angle);
  return r;
}

}  // namespace

TEST_CASE("random operators of every kind satisfy their invariants") {
  std::mt19937_64 rng(21);
  for (OperatorKind kind : {OperatorKind::rotation, OperatorKind::diagonal, OperatorKind::low_rank}) {
    for (int t = 0; t < 30; ++t) {
      const RoleOperator op = test::random_operator(kind, 8, rng);
      CHECK_FALSE(invariant_violation(op).has_value());
      const RoleOperator inv = invert(op);
      CHECK(max_abs_diff(Matrix(op.matrix() * inv.matrix()), Matrix::Identity(8, 8)) <= 1e-6);
    }
  }
}

TEST_CASE("stability clamps bound diagonal and low-rank operators") {
  std::mt19937_64 rng(22);
  const RoleOperator d = RoleOperator::diagonal(test::gaussian(6, rng, 10.0));
  for (int i = 0; i < 6; ++i) {
    CHECK(std::abs(d.matrix()(i, i)) >= 1.0 / kStabilityBound - 1e-12);
    CHECK(std::abs(d.matrix()(i, i)) <= kStabilityBound + 1e-12);
  }
  const RoleOperator lr = RoleOperator::low_rank(test::gaussian(6, 2, rng, 5.0), test::gaussian(6, 2, rng, 5.0));
  CHECK_FALSE(invariant_violation(lr).has_value());
  const RoleOperator loose =
      RoleOperator::low_rank(test::gaussian(6, 1, rng, 5.0), test::gaussian(6, 1, rng, 5.0), kStabilityBound, false);
  CHECK(invariant_violation(loose).has_value());
}

TEST_CASE("realize_rotation closed form and group law") {
  Vector theta(1);
  theta << 1.0;
  CHECK(realize_rotation(0, theta).matrix() == Matrix::Identity(2, 2));
  CHECK(max_abs_diff(realize_rotation(3, theta).matrix(), rotation2(3.0)) <= 1e-15);
  const Vector freqs = rope_frequencies(16);
  for (long i : {0L, 5L, 17L})
    for (long j : {1L, 9L, 60L}) {
      const Matrix lhs = realize_rotation(i, freqs).matrix() * realize_rotation(j, freqs).matrix();
      CHECK(max_abs_diff(lhs, realize_rotation(i + j, freqs).matrix()) <= 1e-12);
    }
  CHECK_THROWS_AS(rope_operator(5, 1), DimensionError);
}

TEST_CASE("invert on identity, rotations and diagonals") {
  const RoleOperator id = RoleOperator::identity(4);
  CHECK(invert(id).matrix() == Matrix::Identity(4, 4));
  Vector theta(1);
  theta << 1.0;
  CHECK(max_abs_diff(invert(realize_rotation(3, theta)).matrix(), realize_rotation(-3, theta).matrix()) <= 1e-15);
  std::mt19937_64 rng(23);
  const RoleOperator d = RoleOperator::diagonal(test::uniform(5, -2.0, 2.0, rng));
  const RoleOperator di = invert(d);
  for (int i = 0; i < 5; ++i) CHECK(di.matrix()(i, i) == doctest::Approx(1.0 / d.matrix()(i, i)).epsilon(1e-14));
  CHECK(max_abs_diff(Matrix(d.matrix() * di.matrix()), Matrix::Identity(5, 5)) <= 1e-12);
}

TEST_CASE("slot journeys") {
  std::mt19937_64 rng(24);
  OperatorTable table(6);
  const SlotId a = SlotId::named("A"), b = SlotId::named("B");
  table.set_slot(a, {test::random_operator(OperatorKind::low_rank, 6, rng)});
  table.set_slot(b, {test::random_operator(OperatorKind::diagonal, 6, rng)});
  CHECK(max_abs_diff(journey(a, a, table).matrix, Matrix::Identity(6, 6)) <= 1e-12);
  CHECK(max_abs_diff(Matrix(journey(a, b, table).matrix * journey(b, a, table).matrix), Matrix::Identity(6, 6)) <= 1e-9);
  const Matrix oracle = table.slot(a).matrix() * table.slot(b).matrix().inverse();
  CHECK(max_abs_diff(journey(a, b, table).matrix, oracle) <= 1e-12);
  const Journey path = journey(a, b, table);
  CHECK(max_abs_diff(recompute(path, table), path.matrix) <= 1e-15);

  Vector theta(1);
  theta << 1.0;
  OperatorTable flat(2, 1, false, theta);
  const Matrix p31 = journey(SlotId::positional(3), SlotId::positional(1), flat).matrix;
  CHECK(max_abs_diff(p31, realize_rotation(2, theta).matrix()) <= 1e-15);
  CHECK_THROWS(journey(a, SlotId::named("MISSING"), table));
}

TEST_CASE("instance and cross-sentence journeys") {
  std::mt19937_64 rng(25);
  OperatorTable table(4);
  const SlotId s = SlotId::named("S"), s2 = SlotId::named("T");
  table.set_slot(s, {test::random_operator(OperatorKind::rotation, 4, rng)});
  table.set_slot(s2, {test::random_operator(OperatorKind::rotation, 4, rng)});
  table.set_instance("x", {test::random_operator(OperatorKind::rotation, 4, rng)});
  table.set_instance("y", {test::random_operator(OperatorKind::rotation, 4, rng)});
  CHECK(max_abs_diff(instance_journey(s, "x", "x", s, table).matrix, Matrix::Identity(4, 4)) <= 1e-12);
  CHECK(max_abs_diff(instance_journey(s, "x", "x", s2, table).matrix, journey(s, s2, table).matrix) <= 1e-12);
  const Matrix four = table.slot(s).matrix() * table.instance("x").matrix() * table.instance("y").matrix().transpose() *
                      table.slot(s2).matrix().transpose();
  CHECK(max_abs_diff(instance_journey(s, "x", "y", s2, table).matrix, four) <= 1e-9);

  CHECK(max_abs_diff(cross_sentence_journey(4, "x", "x", 4, table).matrix, Matrix::Identity(4, 4)) <= 1e-12);
  CHECK(max_abs_diff(cross_sentence_journey(5, "x", "x", 2, table).matrix, realize_rotation(3, table.rope_freqs()).matrix()) <=
        1e-12);
  const Matrix cross = realize_rotation(5, table.rope_freqs()).matrix() * table.instance("x").matrix() *
                       table.instance("y").matrix().transpose() * realize_rotation(-2, table.rope_freqs()).matrix();
  CHECK(max_abs_diff(cross_sentence_journey(5, "x", "y", 2, table).matrix, cross) <= 1e-12);
}

TEST_CASE("edge journeys and composition") {
  std::mt19937_64 rng(26);
  OperatorTable table(4);
  table.set_relation("likes", {test::random_operator(OperatorKind::low_rank, 4, rng)});
  const Journey fwd = edge_journey("likes", Direction::forward, table);
  const Journey back = edge_journey("likes", Direction::inverse, table);
  CHECK(fwd.matrix == table.relation("likes").matrix());
  const Journey loop = compose(fwd, back);
  CHECK(loop.path.size() == fwd.path.size() + back.path.size());
  CHECK(max_abs_diff(loop.matrix, Matrix::Identity(4, 4)) <= 1e-9);
  CHECK(max_abs_diff(recompute(loop, table), loop.matrix) <= 1e-12);
}

TEST_CASE("per-head tables keep heads separate") {
  std::mt19937_64 rng(27);
  OperatorTable table(4, 2, true);
  const SlotId a = SlotId::named("A");
  const RoleOperator h0 = test::random_operator(OperatorKind::rotation, 4, rng);
  const RoleOperator h1 = test::random_operator(OperatorKind::rotation, 4, rng);
  table.set_slot(a, {h0, h1});
  CHECK(table.slot(a, 0).matrix() == h0.matrix());
  CHECK(table.slot(a, 1).matrix() == h1.matrix());
  CHECK(table.resolve(slot_operator_id(a), 1).matrix() == h1.matrix());
}

TEST_CASE("instance operator derivation") {
  std::mt19937_64 rng(28);
  const int d = 4, hidden = 5;
  const int count = parameter_count(OperatorKind::rotation, d);
  const ReadoutProjector zero = ReadoutProjector::zeros(d, hidden, count);
  const std::vector<Vector> tokens{test::gaussian(d, rng), test::gaussian(d, rng)};
  const RoleOperator id = derive_instance_operator(tokens, Readout::mean_pool, zero, OperatorKind::rotation, d);
  CHECK(id.kind() == OperatorKind::rotation);
  CHECK(id.matrix() == Matrix::Identity(d, d));

  CHECK(pool_tokens(std::span(tokens).first(1), Readout::mean_pool, zero) == tokens[0]);
  CHECK(max_abs_diff(pool_tokens(tokens, Readout::mean_pool, zero), Vector((tokens[0] + tokens[1]) / 2)) <= 1e-15);

  ReadoutProjector proj;
  proj.hidden_weight = test::gaussian(hidden, d, rng);
  proj.hidden_bias = test::gaussian(hidden, rng);
  proj.output_weight = test::gaussian(count, hidden, rng);
  proj.output_bias = test::gaussian(count, rng);
  proj.attention_query = test::gaussian(d, rng);
  const Vector mid = (tokens[0] + tokens[1]) / 2;
  Vector h(hidden);
  for (int i = 0; i < hidden; ++i) {
    double acc = proj.hidden_bias[i];
    for (int j = 0; j < d; ++j) acc += proj.hidden_weight(i, j) * mid[j];
    h[i] = std::tanh(acc);
  }
  Vector angles(count);
  for (int i = 0; i < count; ++i) {
    double acc = proj.output_bias[i];
    for (int j = 0; j < hidden; ++j) acc += proj.output_weight(i, j) * h[j];
    angles[i] = acc;
  }
  Matrix expected = Matrix::Zero(d, d);
  for (int m = 0; m < count; ++m) expected.block(2 * m, 2 * m, 2, 2) = rotation2(angles[m]);
  const RoleOperator derived = derive_instance_operator(tokens, Readout::mean_pool, proj, OperatorKind::rotation, d);
  CHECK(max_abs_diff(derived.matrix(), expected) <= 1e-12);

  const double s0 = tokens[0].dot(proj.attention_query), s1 = tokens[1].dot(proj.attention_query);
  const double w0 = 1.0 / (1.0 + std::exp(s1 - s0));
  const Vector attn = w0 * tokens[0] + (1 - w0) * tokens[1];
  CHECK(max_abs_diff(pool_tokens(tokens, Readout::attention_pool, proj), attn) <= 1e-12);
}

TEST_CASE("operator parameters round trip by kind") {
  std::mt19937_64 rng(29);
  CHECK(parameter_count(OperatorKind::rotation, 8) == 4);
  CHECK(parameter_count(OperatorKind::diagonal, 8) == 8);
  CHECK(parameter_count(OperatorKind::low_rank, 8, 2) == 32);
  const Vector p = test::gaussian(parameter_count(OperatorKind::low_rank, 4, 1), rng, 0.1);
  const RoleOperator lr = operator_from_parameters(OperatorKind::low_rank, p, 4, 1);
  Matrix expected = Matrix::Identity(4, 4) + p.head(4) * p.tail(4).transpose();
  CHECK(max_abs_diff(lr.matrix(), expected) <= 1e-15);
  CHECK_THROWS_AS(operator_from_parameters(OperatorKind::diagonal, p, 4), DimensionError);
  CHECK(parse_operator_kind(to_string(OperatorKind::low_rank)) == OperatorKind::low_rank);
  CHECK(parse_readout(to_string(Readout::attention_pool)) == Readout::attention_pool);
}
