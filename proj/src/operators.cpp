#include "journeykv/operators.hpp"

#include <algorithm>

namespace jkv {

std::string to_string(OperatorKind kind) {
  switch (kind) {
    case OperatorKind::rotation: return "rotation";
    case OperatorKind::diagonal: return "diagonal";
    case OperatorKind::low_rank: return "low_rank";
  }
  return "unknown";
}

OperatorKind parse_operator_kind(const std::string& text) {
  if (text == "rotation") return OperatorKind::rotation;
  if (text == "diagonal") return OperatorKind::diagonal;
  if (text == "low_rank") return OperatorKind::low_rank;
  throw std::invalid_argument("unknown operator kind '" + text + "'");
}

std::string to_string(Readout readout) {
  return readout == Readout::mean_pool ? "mean_pool" : "attention_pool";
}

Readout parse_readout(const std::string& text) {
  if (text == "mean_pool") return Readout::mean_pool;
  if (text == "attention_pool") return Readout::attention_pool;
  throw std::invalid_argument("unknown readout '" + text + "'");
}

RoleOperator realize_rotation(long step_index, const Vector& freqs) {
  if (!all_finite(freqs)) throw NumericError("realize_rotation: non-finite frequency");
  return RoleOperator::rotation(freqs, static_cast<double>(step_index));
}

RoleOperator rope_operator(int dim, long k) {
  return realize_rotation(k, rope_frequencies(dim));
}

std::optional<std::string> invariant_violation(const RoleOperator& op, double bound) {
  const Matrix& m = op.matrix();
  if (m.rows() != m.cols()) return "operator matrix is not square";
  if (!all_finite(m)) return "operator matrix has non-finite entries";
  const Eigen::Index d = m.rows();
  if (op.kind() == OperatorKind::rotation) {
    if (d % 2 != 0) return "rotation operator has odd dimension";
    const double ortho = max_abs_diff(m.transpose() * m, Matrix::Identity(d, d));
    if (ortho > 1e-9) return "rotation operator not orthogonal (error " + std::to_string(ortho) + ")";
    for (Eigen::Index i = 0; i < d; ++i)
      for (Eigen::Index j = 0; j < d; ++j)
        if (i / 2 != j / 2 && m(i, j) != 0.0) return "rotation operator is not 2x2 block-diagonal";
    return std::nullopt;
  }
  Eigen::JacobiSVD<Matrix> svd(m);
  const auto& sv = svd.singularValues();
  const double tol = 1e-9;
  if (sv.size() > 0 && (sv[0] > bound * (1 + tol) || sv[sv.size() - 1] < (1.0 / bound) * (1 - tol))) {
    return "singular values [" + std::to_string(sv[sv.size() - 1]) + ", " + std::to_string(sv[0]) +
           "] outside stability range";
  }
  return std::nullopt;
}

std::string slot_operator_id(const SlotId& slot) { return "slot:" + slot.str(); }
std::string instance_operator_id(const std::string& instance) { return "instance:" + instance; }
std::string relation_operator_id(const std::string& relation) { return "relation:" + relation; }

OperatorTable::OperatorTable(int dim, int head_count, bool per_head)
    : dim_(dim), head_count_(head_count), per_head_(per_head), rope_freqs_(rope_frequencies(dim)) {
  if (head_count <= 0) throw std::invalid_argument("OperatorTable: head_count must be positive");
}

OperatorTable::OperatorTable(int dim, int head_count, bool per_head, Vector rope_freqs)
    : OperatorTable(dim, head_count, per_head) {
  if (rope_freqs.size() * 2 != dim) {
    throw DimensionError("OperatorTable: " + std::to_string(rope_freqs.size()) +
                         " frequencies for dimension " + std::to_string(dim));
  }
  rope_freqs_ = std::move(rope_freqs);
}

namespace {

void check_ops(const std::vector<RoleOperator>& ops, int dim, int head_count, bool per_head,
               const std::string& key) {
  const std::size_t expected = per_head ? static_cast<std::size_t>(head_count) : 1u;
  if (ops.size() != expected) {
    throw std::invalid_argument("operator table: '" + key + "' needs " + std::to_string(expected) +
                                " operators, got " + std::to_string(ops.size()));
  }
  for (const RoleOperator& op : ops) {
    if (op.dim() != dim) {
      throw DimensionError("operator table: '" + key + "' has dimension " +
                           std::to_string(op.dim()) + ", table expects " + std::to_string(dim));
    }
  }
}

}  // namespace

void OperatorTable::store(Family& family, const std::string& key, std::vector<RoleOperator> ops) {
  check_ops(ops, dim_, head_count_, per_head_, key);
  family.insert_or_assign(key, std::move(ops));
}

void OperatorTable::set_slot(const SlotId& slot, std::vector<RoleOperator> ops) {
  check_ops(ops, dim_, head_count_, per_head_, slot.str());
  slots_.insert_or_assign(slot, std::move(ops));
}

void OperatorTable::set_relation(const std::string& relation, std::vector<RoleOperator> ops) {
  store(relations_, relation, std::move(ops));
}

void OperatorTable::set_instance(const std::string& instance, std::vector<RoleOperator> ops) {
  store(instances_, instance, std::move(ops));
}

bool OperatorTable::has_slot(const SlotId& slot) const {
  return slot.is_positional() || slots_.contains(slot);
}
bool OperatorTable::has_relation(const std::string& r) const { return relations_.contains(r); }
bool OperatorTable::has_instance(const std::string& e) const { return instances_.contains(e); }

const RoleOperator& OperatorTable::pick(const Family& family, const std::string& key,
                                        const char* what, int head) const {
  auto it = family.find(key);
  if (it == family.end()) {
    throw std::out_of_range(std::string("operator table: unknown ") + what + " '" + key + "'");
  }
  if (head < 0 || head >= head_count_) throw std::out_of_range("operator table: head out of range");
  return per_head_ ? it->second[static_cast<std::size_t>(head)] : it->second.front();
}

RoleOperator OperatorTable::slot(const SlotId& slot, int head) const {
  auto it = slots_.find(slot);
  if (it == slots_.end()) {
    if (slot.is_positional()) return realize_rotation(slot.position, rope_freqs_);
    throw std::out_of_range("operator table: unknown slot '" + slot.str() + "'");
  }
  if (head < 0 || head >= head_count_) throw std::out_of_range("operator table: head out of range");
  return per_head_ ? it->second[static_cast<std::size_t>(head)] : it->second.front();
}

RoleOperator OperatorTable::relation(const std::string& r, int head) const {
  return pick(relations_, r, "relation", head);
}

RoleOperator OperatorTable::instance(const std::string& e, int head) const {
  return pick(instances_, e, "instance", head);
}

RoleOperator OperatorTable::within_slot(int position) const {
  return realize_rotation(position, rope_freqs_);
}

RoleOperator OperatorTable::resolve(const std::string& operator_id, int head) const {
  const auto colon = operator_id.find(':');
  if (colon == std::string::npos) throw std::invalid_argument("malformed operator id '" + operator_id + "'");
  const std::string family = operator_id.substr(0, colon);
  const std::string key = operator_id.substr(colon + 1);
  if (family == "slot") return slot(SlotId::parse(key), head);
  if (family == "instance") return instance(key, head);
  if (family == "relation") return relation(key, head);
  throw std::invalid_argument("unknown operator family in '" + operator_id + "'");
}

std::vector<SlotId> OperatorTable::slot_ids() const {
  std::vector<SlotId> ids;
  for (const auto& [id, _] : slots_) ids.push_back(id);
  return ids;
}

std::vector<std::string> OperatorTable::relation_ids() const {
  std::vector<std::string> ids;
  for (const auto& [id, _] : relations_) ids.push_back(id);
  return ids;
}

std::vector<std::string> OperatorTable::instance_ids() const {
  std::vector<std::string> ids;
  for (const auto& [id, _] : instances_) ids.push_back(id);
  return ids;
}

namespace {

struct Factor {
  std::string id;
  RoleOperator op;
  Direction direction;
};

Journey chain(const std::vector<Factor>& factors, int dim) {
  Journey j;
  j.matrix = Matrix::Identity(dim, dim);
  for (const Factor& f : factors) {
    const Matrix m = f.direction == Direction::forward ? f.op.matrix() : invert(f.op).matrix();
    j.matrix = matmul(j.matrix, m);
    j.path.push_back({f.id, f.direction});
  }
  return j;
}

}  // namespace

Journey journey(const SlotId& a, const SlotId& b, const OperatorTable& table, int head) {
  return chain({{slot_operator_id(a), table.slot(a, head), Direction::forward},
                {slot_operator_id(b), table.slot(b, head), Direction::inverse}},
               table.dim());
}

Journey instance_journey(const SlotId& s, const std::string& e1, const std::string& e2,
                         const SlotId& s2, const OperatorTable& table, int head) {
  return chain({{slot_operator_id(s), table.slot(s, head), Direction::forward},
                {instance_operator_id(e1), table.instance(e1, head), Direction::forward},
                {instance_operator_id(e2), table.instance(e2, head), Direction::inverse},
                {slot_operator_id(s2), table.slot(s2, head), Direction::inverse}},
               table.dim());
}

Journey cross_sentence_journey(int i, const std::string& e1, const std::string& e2, int j,
                               const OperatorTable& table, int head) {
  if (i <= 0 || j <= 0) throw std::invalid_argument("cross_sentence_journey: positions start at 1");
  return instance_journey(SlotId::positional(i), e1, e2, SlotId::positional(j), table, head);
}

Journey edge_journey(const std::string& relation, Direction direction, const OperatorTable& table,
                     int head) {
  return chain({{relation_operator_id(relation), table.relation(relation, head), direction}},
               table.dim());
}

Journey compose(const Journey& lhs, const Journey& rhs) {
  Journey out;
  out.matrix = matmul(lhs.matrix, rhs.matrix);
  out.path = lhs.path;
  out.path.insert(out.path.end(), rhs.path.begin(), rhs.path.end());
  return out;
}

Matrix recompute(const Journey& journey, const OperatorTable& table, int head) {
  Matrix m = Matrix::Identity(table.dim(), table.dim());
  for (const JourneyStep& step : journey.path) {
    const RoleOperator op = table.resolve(step.operator_id, head);
    m = matmul(m, step.direction == Direction::forward ? op.matrix() : invert(op).matrix());
  }
  return m;
}

ReadoutProjector ReadoutProjector::zeros(int input_dim, int hidden_dim, int param_count) {
  return ReadoutProjector{Matrix::Zero(hidden_dim, input_dim), Vector::Zero(hidden_dim),
                          Matrix::Zero(param_count, hidden_dim), Vector::Zero(param_count),
                          Vector::Zero(input_dim)};
}

int parameter_count(OperatorKind kind, int dim, int rank) {
  switch (kind) {
    case OperatorKind::rotation: return dim / 2;
    case OperatorKind::diagonal: return dim;
    case OperatorKind::low_rank: return 2 * dim * rank;
  }
  return 0;
}

RoleOperator operator_from_parameters(OperatorKind kind, const Vector& params, int dim, int rank) {
  if (params.size() != parameter_count(kind, dim, rank)) {
    throw DimensionError("operator_from_parameters: " + to_string(kind) + " at dim " +
                         std::to_string(dim) + " needs " +
                         std::to_string(parameter_count(kind, dim, rank)) + " parameters, got " +
                         std::to_string(params.size()));
  }
  switch (kind) {
    case OperatorKind::rotation:
      if (dim % 2 != 0) throw DimensionError("rotation operator needs even dimension");
      return RoleOperator::rotation(params, 1.0);
    case OperatorKind::diagonal:
      return RoleOperator::diagonal(params);
    case OperatorKind::low_rank: {
      const Eigen::Index n = static_cast<Eigen::Index>(dim) * rank;
      Matrix u = Eigen::Map<const Matrix>(params.data(), dim, rank);
      Matrix v = Eigen::Map<const Matrix>(params.data() + n, dim, rank);
      return RoleOperator::low_rank(std::move(u), v);
    }
  }
  throw std::logic_error("operator_from_parameters: unknown kind");
}

Vector pool_tokens(std::span<const Vector> tokens, Readout readout,
                   const ReadoutProjector& projector) {
  if (tokens.empty()) throw std::invalid_argument("pool_tokens: empty token list");
  const Eigen::Index d = tokens.front().size();
  for (const Vector& t : tokens) {
    if (t.size() != d) throw DimensionError("pool_tokens: token dimensions differ");
  }
  Vector pooled = Vector::Zero(d);
  if (readout == Readout::mean_pool) {
    for (const Vector& t : tokens) pooled += t;
    return pooled / static_cast<double>(tokens.size());
  }
  if (projector.attention_query.size() != d) {
    throw DimensionError("pool_tokens: attention query has dimension " +
                         std::to_string(projector.attention_query.size()));
  }
  Vector scores(static_cast<Eigen::Index>(tokens.size()));
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    scores[static_cast<Eigen::Index>(i)] = tokens[i].dot(projector.attention_query);
  }
  const Vector w = softmax<double>(scores);
  for (std::size_t i = 0; i < tokens.size(); ++i) pooled += w[static_cast<Eigen::Index>(i)] * tokens[i];
  return pooled;
}

RoleOperator derive_instance_operator(std::span<const Vector> tokens, Readout readout,
                                      const ReadoutProjector& projector, OperatorKind kind,
                                      int dim, int rank) {
  const Vector pooled = pool_tokens(tokens, readout, projector);
  if (projector.hidden_weight.cols() != pooled.size()) {
    throw DimensionError("derive_instance_operator: projector input " +
                         shape_string(projector.hidden_weight) + " for pooled size " +
                         std::to_string(pooled.size()));
  }
  const Vector hidden = (projector.hidden_weight * pooled + projector.hidden_bias).array().tanh().matrix();
  const Vector params = projector.output_weight * hidden + projector.output_bias;
  return operator_from_parameters(kind, params, dim, rank);
}

}  // namespace jkv
