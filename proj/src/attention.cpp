#include "journeykv/attention.hpp"

#include <cmath>
#include <set>

namespace jkv {

std::string to_string(ReceptiveField level) {
  switch (level) {
    case ReceptiveField::instance_local: return "instance_local";
    case ReceptiveField::neighborhood: return "neighborhood";
    case ReceptiveField::global: return "global";
  }
  return "unknown";
}

ReceptiveField parse_receptive_field(const std::string& text) {
  if (text == "instance_local") return ReceptiveField::instance_local;
  if (text == "neighborhood") return ReceptiveField::neighborhood;
  if (text == "global") return ReceptiveField::global;
  throw std::invalid_argument("unknown receptive field '" + text + "'");
}

std::string to_string(JourneyMode mode) {
  return mode == JourneyMode::slot_journey ? "slot_journey" : "instance_journey";
}

JourneyMode parse_journey_mode(const std::string& text) {
  if (text == "slot_journey") return JourneyMode::slot_journey;
  if (text == "instance_journey") return JourneyMode::instance_journey;
  throw std::invalid_argument("unknown journey mode '" + text + "'");
}

void SlotPairBias::set_pair(const SlotId& from, const SlotId& to, int head, double value) {
  pairs_[{from, to, head}] = value;
}

void SlotPairBias::set_relation(const std::string& relation, int head, double value) {
  relations_[{relation, head}] = value;
}

double SlotPairBias::pair(const SlotId& from, const SlotId& to, int head) const {
  auto it = pairs_.find({from, to, head});
  return it == pairs_.end() ? 0.0 : it->second;
}

double SlotPairBias::relation(const std::string& relation, int head) const {
  auto it = relations_.find({relation, head});
  return it == relations_.end() ? 0.0 : it->second;
}

double journey_score(const Vector& q, const Vector& k, const Journey& journey, double bias, int d) {
  if (q.size() != k.size() || journey.matrix.rows() != q.size() || journey.matrix.cols() != k.size()) {
    throw DimensionError("journey_score: q " + std::to_string(q.size()) + ", k " +
                         std::to_string(k.size()) + ", journey " + shape_string(journey.matrix));
  }
  if (d <= 0) throw DimensionError("journey_score: head dimension must be positive");
  return q.dot(journey.matrix * k) / std::sqrt(static_cast<double>(d)) + bias;
}

double edge_score(const Vector& q_h, const Vector& k_t, const RoleOperator& relation, double bias,
                  int d, Direction direction) {
  if (q_h.size() != k_t.size() || relation.dim() != q_h.size()) {
    throw DimensionError("edge_score: q " + std::to_string(q_h.size()) + ", k " +
                         std::to_string(k_t.size()) + ", operator " + std::to_string(relation.dim()));
  }
  if (d <= 0) throw DimensionError("edge_score: head dimension must be positive");
  const Matrix& r = direction == Direction::forward ? relation.matrix() : invert(relation).matrix();
  return q_h.dot(r * k_t) / std::sqrt(static_cast<double>(d)) + bias;
}

RopeCheck rope_equivalence_check(const Vector& q, const Vector& k, int i, int j, const Vector& freqs) {
  if (q.size() != k.size() || q.size() != 2 * freqs.size()) {
    throw DimensionError("rope_equivalence_check: vectors of size " + std::to_string(q.size()) +
                         " and " + std::to_string(k.size()) + " for " + std::to_string(freqs.size()) +
                         " frequencies");
  }
  const RoleOperator ri = realize_rotation(i, freqs);
  const RoleOperator rj = realize_rotation(j, freqs);
  const Matrix transport = matmul(ri.matrix(), invert(rj).matrix());
  RopeCheck out;
  out.lhs = q.dot(transport * k);

  // Independent path: rotate each vector by its own position with explicit trig.
  auto rotate_back = [&](const Vector& v, int pos) {
    Vector r(v.size());
    for (Eigen::Index m = 0; m < freqs.size(); ++m) {
      const double phi = -freqs[m] * pos;
      const double c = std::cos(phi), s = std::sin(phi);
      r[2 * m] = c * v[2 * m] - s * v[2 * m + 1];
      r[2 * m + 1] = s * v[2 * m] + c * v[2 * m + 1];
    }
    return r;
  };
  out.rhs = rotate_back(q, i).dot(rotate_back(k, j));
  out.gap = std::abs(out.lhs - out.rhs);
  return out;
}

AttendResult attend(std::span<const AttendQuery> queries, std::span<const AttendKey> keys,
                    const AttentionMask& mask, const OperatorTable& table, const SlotPairBias& bias,
                    JourneyMode mode, int head) {
  const auto nq = static_cast<Eigen::Index>(queries.size());
  const auto nk = static_cast<Eigen::Index>(keys.size());
  if (mask.allow.rows() != nq || mask.allow.cols() != nk) {
    throw DimensionError("attend: mask " + shape_string(mask.allow) + " for " + std::to_string(nq) +
                         " queries and " + std::to_string(nk) + " keys");
  }
  const int d = table.dim();
  for (const AttendQuery& q : queries)
    if (q.q.size() != d) throw DimensionError("attend: query dimension differs from operator table");
  for (const AttendKey& k : keys)
    if (k.key.size() != d) throw DimensionError("attend: key dimension differs from operator table");
  if (mode == JourneyMode::instance_journey) {
    for (const AttendQuery& q : queries)
      if (!table.has_instance(q.instance)) throw std::out_of_range("attend: no operator for instance '" + q.instance + "'");
    for (const AttendKey& k : keys)
      if (!table.has_instance(k.instance)) throw std::out_of_range("attend: no operator for instance '" + k.instance + "'");
  }

  using PairKey = std::tuple<SlotId, std::string, SlotId, std::string>;
  std::map<PairKey, Matrix> journeys;
  auto transport = [&](const AttendQuery& q, const AttendKey& k) -> const Matrix& {
    const bool by_instance = mode == JourneyMode::instance_journey;
    PairKey key{q.slot, by_instance ? q.instance : "", k.slot, by_instance ? k.instance : ""};
    auto it = journeys.find(key);
    if (it == journeys.end()) {
      Journey j = by_instance ? instance_journey(q.slot, q.instance, k.instance, k.slot, table, head)
                              : journey(q.slot, k.slot, table, head);
      it = journeys.emplace(std::move(key), std::move(j.matrix)).first;
    }
    return it->second;
  };

  const Eigen::Index value_dim = keys.empty() ? 0 : keys.front().value.size();
  AttendResult result;
  result.weights = Matrix::Zero(nq, nk);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  for (Eigen::Index i = 0; i < nq; ++i) {
    const AttendQuery& q = queries[static_cast<std::size_t>(i)];
    // Transport the query once per distinct journey: (P^T q)^T k.
    std::map<const Matrix*, Vector> transported;
    Vector scores(nk);
    for (Eigen::Index j = 0; j < nk; ++j) {
      const AttendKey& k = keys[static_cast<std::size_t>(j)];
      if (!mask.allow(i, j)) {
        scores[j] = 0.0;
        continue;
      }
      const Matrix& p = transport(q, k);
      auto tq = transported.find(&p);
      if (tq == transported.end()) tq = transported.emplace(&p, p.transpose() * q.q).first;
      scores[j] = tq->second.dot(k.key) * scale + bias.pair(q.slot, k.slot, head);
    }
    Vector w;
    try {
      w = softmax<double>(scores, std::span<const bool>(mask.allow.data() + i * nk, static_cast<std::size_t>(nk)));
    } catch (const NumericError&) {
      throw NumericError("attend: query " + std::to_string(i) + " has every key masked");
    }
    result.weights.row(i) = w.transpose();
    Vector y = Vector::Zero(value_dim);
    for (Eigen::Index j = 0; j < nk; ++j) {
      if (w[j] != 0.0) y += w[j] * keys[static_cast<std::size_t>(j)].value;
    }
    result.outputs.push_back(std::move(y));
  }
  return result;
}

AttentionMask build_mask(ReceptiveField level, std::span<const StructuredInstance> instances,
                         const Adjacency& adjacency) {
  std::map<std::string, std::size_t> position;
  for (std::size_t i = 0; i < instances.size(); ++i) position.emplace(instances[i].id, i);
  std::set<std::pair<std::size_t, std::size_t>> linked;
  for (const auto& [id, neighbors] : adjacency) {
    auto a = position.find(id);
    if (a == position.end()) throw std::out_of_range("build_mask: adjacency names unknown instance '" + id + "'");
    for (const std::string& n : neighbors) {
      auto b = position.find(n);
      if (b == position.end()) throw std::out_of_range("build_mask: adjacency names unknown instance '" + n + "'");
      linked.emplace(a->second, b->second);
      linked.emplace(b->second, a->second);
    }
  }
  std::vector<std::size_t> owner;
  for (std::size_t i = 0; i < instances.size(); ++i) owner.insert(owner.end(), instances[i].tokens.size(), i);
  const auto n = static_cast<Eigen::Index>(owner.size());
  AttentionMask mask{level, BoolMatrix::Constant(n, n, level == ReceptiveField::global)};
  if (level == ReceptiveField::global) return mask;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      const std::size_t a = owner[static_cast<std::size_t>(i)], b = owner[static_cast<std::size_t>(j)];
      mask.allow(i, j) = a == b || (level == ReceptiveField::neighborhood && linked.contains({a, b}));
    }
  }
  return mask;
}

Adjacency restrict_adjacency(const Adjacency& adjacency, std::span<const StructuredInstance> instances) {
  std::set<std::string> keep;
  for (const StructuredInstance& inst : instances) keep.insert(inst.id);
  Adjacency out;
  for (const auto& [id, neighbors] : adjacency) {
    if (!keep.contains(id)) continue;
    auto& list = out[id];
    for (const std::string& n : neighbors)
      if (keep.contains(n)) list.push_back(n);
  }
  return out;
}

}  // namespace jkv
