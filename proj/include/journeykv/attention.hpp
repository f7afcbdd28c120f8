#ifndef JOURNEYKV_ATTENTION_HPP
#define JOURNEYKV_ATTENTION_HPP

#include "journeykv/numerics.hpp"
#include "journeykv/operators.hpp"
#include "journeykv/schema.hpp"

#include <map>
#include <span>
#include <string>
#include <tuple>
#include <vector>

namespace jkv {

enum class ReceptiveField { instance_local, neighborhood, global };

std::string to_string(ReceptiveField level);
ReceptiveField parse_receptive_field(const std::string& text);

enum class JourneyMode { slot_journey, instance_journey };

std::string to_string(JourneyMode mode);
JourneyMode parse_journey_mode(const std::string& text);

struct AttentionMask {
  ReceptiveField level = ReceptiveField::global;
  BoolMatrix allow;
};

/// Additive score biases b_{s(i),s(j)} per head and b_r per relation and head.
/// Unset entries read as zero.
class SlotPairBias {
 public:
  void set_pair(const SlotId& from, const SlotId& to, int head, double value);
  void set_relation(const std::string& relation, int head, double value);
  double pair(const SlotId& from, const SlotId& to, int head) const;
  double relation(const std::string& relation, int head) const;

 private:
  std::map<std::tuple<SlotId, SlotId, int>, double> pairs_;
  std::map<std::pair<std::string, int>, double> relations_;
};

/// q^T P k / sqrt(d) + bias.
double journey_score(const Vector& q, const Vector& k, const Journey& journey, double bias, int d);

/// Edge-labeled score q_h^T R_r k_t / sqrt(d) + b_r. The inverse direction uses
/// R_r^{-1}, i.e. the journey from tail back to head.
double edge_score(const Vector& q_h, const Vector& k_t, const RoleOperator& relation, double bias,
                  int d, Direction direction = Direction::forward);

struct RopeCheck {
  double lhs = 0.0;  ///< q^T (R_i R_j^{-1}) k through the journey operator.
  double rhs = 0.0;  ///< (R_i^T q)^T (R_j^T k), each vector rotated on its own.
  double gap = 0.0;
};

/// Compares the journey form against independently rotated vectors. R_i^T is
/// the RoPE rotation by -theta*i, so the right side is ordinary RoPE with the
/// sign of every frequency flipped.
RopeCheck rope_equivalence_check(const Vector& q, const Vector& k, int i, int j, const Vector& freqs);

struct AttendQuery {
  Vector q;
  SlotId slot;
  std::string instance;
};

struct AttendKey {
  Vector key;
  Vector value;
  SlotId slot;
  std::string instance;
};

struct AttendResult {
  std::vector<Vector> outputs;
  /// Attention weights, queries x keys.
  Matrix weights;
};

/// Reference single-head attention with journey transport. Journeys are built
/// per (slot, instance) pair and memoized for the call; scores add the
/// slot-pair bias; rows softmax under `mask`.
AttendResult attend(std::span<const AttendQuery> queries, std::span<const AttendKey> keys,
                    const AttentionMask& mask, const OperatorTable& table, const SlotPairBias& bias,
                    JourneyMode mode, int head = 0);

/// Mask over the concatenated tokens of `instances` (in order). `adjacency`
/// must name only instances in the list.
AttentionMask build_mask(ReceptiveField level, std::span<const StructuredInstance> instances,
                         const Adjacency& adjacency);

/// Restricts a corpus adjacency to the given instance ids.
Adjacency restrict_adjacency(const Adjacency& adjacency, std::span<const StructuredInstance> instances);

}  // namespace jkv

#endif  // JOURNEYKV_ATTENTION_HPP
