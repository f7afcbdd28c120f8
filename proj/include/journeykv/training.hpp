#ifndef JOURNEYKV_TRAINING_HPP
#define JOURNEYKV_TRAINING_HPP

#include "journeykv/autodiff.hpp"
#include "journeykv/config_file.hpp"
#include "journeykv/model.hpp"
#include "journeykv/repository.hpp"
#include "journeykv/schema.hpp"

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace jkv {

/// A token of batch instance `instance` (index into TrainingBatch::instances).
struct BatchToken {
  std::size_t instance = 0;
  int token = 0;
  bool operator==(const BatchToken&) const = default;
};

struct MlmTarget {
  BatchToken where;
  int true_id = 0;
};

/// Triple whose relation and tail were replaced by the mask token; scored
/// from the head. Candidate keys are read at `candidate_tokens`, aligned
/// with `candidates`.
struct LinkQuery {
  std::size_t instance = 0;
  int head_token = 0;
  int masked_token = 0;
  std::string relation;
  int true_id = 0;
  std::vector<int> candidates;
  std::vector<BatchToken> candidate_tokens;
};

/// Triple (entity, MASK, MASK) whose head state serves as the entity's
/// link-prediction key.
StructuredInstance entity_probe(const Vocabulary& vocab, int entity_id);

/// Two same-role tokens swapped between instances.
struct RoleCorruption {
  BatchToken first;
  BatchToken second;
  SlotId slot;
  int first_original = 0;
  int second_original = 0;
};

struct AlignmentPair {
  std::size_t sentence = 0;  ///< batch index of a sentence view
  std::vector<int> span;     ///< token indices in that view
  BatchToken entity;         ///< occurrence of an entity token in a fact
  bool positive = false;
};

struct TrainingBatch {
  std::vector<StructuredInstance> instances;
  Adjacency adjacency;
  std::vector<MlmTarget> mlm_targets;
  std::vector<LinkQuery> lp_queries;
  std::vector<RoleCorruption> rc_corruptions;
  std::vector<AlignmentPair> alignment_pairs;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ObjectiveWeights {
  double mlm = 1.0;
  double lp = 1.0;
  double rc = 1.0;
  double align = 0.5;
  /// Evaluation-time only; kept so configs can state it.
  double knn = 0.0;

  /// Throws unless all weights are nonnegative and at least one is positive.
  void validate() const;
};

struct BatchOptions {
  double mask_rate = 0.15;
  /// Share of triples turned into link-prediction queries.
  double lp_rate = 0.5;
  /// Share of remaining facts paired up for role swaps.
  double rc_rate = 0.2;
  int align_negatives = 3;
  /// Mask the tokens not used by link prediction or role swaps.
  bool mlm = true;
  /// Records per batch; 0 takes every record.
  std::size_t records = 0;
};

/// Draws masks, queries, swaps and alignment pairs over a sample of `corpus`.
/// Masking picks max(1, round(rate * n)) tokens per instance, then 80% mask
/// token, 10% random token, 10% unchanged. Sentence tokens are masked in
/// every view at once. When there are link queries, one probe per entity is
/// appended. Adjacency is recomputed from the corrupted tokens.
TrainingBatch make_batch(const Corpus& corpus, const BatchOptions& options, std::mt19937_64& rng);

/// Mean cross-entropy of softmax(outputs * embeddings^T) against `targets`.
ad::Var mlm_loss(ad::Var outputs, ad::Var embeddings, std::span<const Eigen::Index> targets);

struct RankingMetrics {
  double mrr = 0.0;
  double hits1 = 0.0;
  double hits_k = 0.0;
};

/// Rank of the true column in each row: 1 + #higher scores + #equal scores at
/// a lower column.
std::vector<int> true_ranks(const Matrix& scores, std::span<const Eigen::Index> true_columns);
RankingMetrics ranking_metrics(std::span<const int> ranks, int k);

struct LinkPredictionResult {
  ad::Var loss;
  Matrix scores;  ///< queries x candidates (shared candidate order per query)
  std::vector<int> ranks;
  RankingMetrics metrics;
};

/// Scores every candidate tail t by sum_h q_h^T R_r k_t / sqrt(d_head) + b_r,
/// with q from the head token's final state and k_t the final state at the
/// candidate's probe token.
LinkPredictionResult link_prediction_loss(const Model& model, const BoundParameters& params,
                                          const ForwardState& state, std::span<const LinkQuery> queries,
                                          int hits_k = 10);

struct RoleConsistencyResult {
  ad::Var loss;
  double accuracy = 0.0;
};

/// Cross-entropy of recovering the original ids at both ends of every swap.
RoleConsistencyResult role_consistency_loss(const ForwardState& state, std::span<const RoleCorruption> corruptions,
                                            ad::Var embeddings, std::size_t instance_count);

struct ContrastiveGroup {
  Eigen::Index anchor = 0;
  Eigen::Index positive = 0;
  std::vector<Eigen::Index> negatives;
};

/// Mean over groups of -log(exp(s+/tau) / sum exp(s/tau)) with s = anchor . key.
ad::Var info_nce(ad::Var anchors, ad::Var keys, std::span<const ContrastiveGroup> groups, double temperature);

/// Alignment between mean-pooled span states and entity item keys.
ad::Var alignment_loss(const Model& model, const BoundParameters& params, const ForwardState& state,
                       std::span<const StructuredInstance> instances, std::span<const AlignmentPair> pairs,
                       double temperature);

struct KnnDistribution {
  Vector distribution;
  bool repository_empty = false;
};

/// lambda * softmax(top-k scores / temperature) aggregated by token id plus
/// (1 - lambda) * model_dist. An empty repository returns model_dist.
KnnDistribution knn_interpolated_distribution(const Vector& model_dist, const Repository& repo, const Vector& query,
                                              std::size_t k, double lambda, double temperature,
                                              const Vocabulary& vocab, const ItemFilter& filter = {});

struct OptimizerConfig {
  double learning_rate = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int warmup_steps = 50;
};

struct TrainingConfig {
  ModelConfig model;
  ObjectiveWeights weights;
  OptimizerConfig optimizer;
  BatchOptions batch;
  int steps = 200;
  /// Draw a fresh batch every step; otherwise the first batch is reused.
  bool resample = true;
  double align_temperature = 0.1;
  double knn_temperature = 1.0;
  int knn_k = 8;
  int hits_k = 10;
  std::uint64_t seed = 0;
};

/// Model keys plus steps, learning_rate, beta1, beta2, epsilon, warmup_steps,
/// lambda_mlm, lambda_lp, lambda_rc, lambda_align, lambda_knn, mask_rate,
/// lp_rate, rc_rate, align_negatives, batch_records, resample,
/// align_temperature, knn_temperature, knn_k, hits_k. Unknown keys throw.
TrainingConfig read_training_config(const KeyValueConfig& config);
TrainingConfig load_training_config(const std::filesystem::path& path);

struct MetricsRow {
  int step = 0;
  double total_loss = 0.0;
  double loss_mlm = 0.0;
  double loss_lp = 0.0;
  double loss_rc = 0.0;
  double loss_align = 0.0;
  double lp_mrr = 0.0;
  double lp_hits1 = 0.0;
  double rc_acc = 0.0;
  double grad_norm = 0.0;
};

void write_metrics_csv(std::span<const MetricsRow> rows, std::ostream& out);

struct LossBreakdown {
  ad::Var total;
  MetricsRow metrics;
};

/// Weighted objective over one batch. Terms with zero weight or no
/// annotations are skipped and reported as 0.
LossBreakdown total_loss(const Model& model, const BoundParameters& params, const TrainingBatch& batch,
                         const TrainingConfig& config);

/// Called on every batch before the forward pass.
using BatchHook = std::function<void(TrainingBatch& batch, int step)>;

struct TrainResult {
  Model model;
  std::vector<MetricsRow> metrics;
};

/// Adam with linear warmup. config.model.vocab_size of 0 takes the corpus
/// vocabulary size. Throws TrainingError on a non-finite loss.
TrainResult train(const TrainingConfig& config, const Corpus& corpus, const BatchHook& hook = {});

/// Planted composition: facts of `result` are facts of `first` followed by `second`.
struct CompositionRule {
  int result = 0;
  int first = 0;
  int second = 0;
};

struct GeneratorSpec {
  int entities = 20;
  int relations = 3;
  std::vector<CompositionRule> rules = {{2, 0, 1}};
  double heldout_fraction = 0.3;
  int sentences = 10;
  double nary_rate = 0.0;
  double corruption_rate = 0.0;
  bool srl = false;

  /// Throws ConfigError on an inconsistent spec.
  void validate() const;
};

/// Keys: entities, relations, rules ("r2=r0.r1", comma separated, or "none"),
/// heldout_fraction, sentences, nary_rate, corruption_rate, srl.
GeneratorSpec read_generator_spec(const KeyValueConfig& config);

struct SyntheticData {
  Corpus corpus;
  std::vector<TripleRecord> heldout;
  std::vector<int> shifts;  ///< relation m maps entity e to e + shifts[m] mod entities
};

std::string entity_name(int index);
std::string relation_name(int index);

/// Entities on a cycle, base relations as random shifts, rule relations as
/// sums of shifts. Held-out facts come only from rule relations.
SyntheticData gen_synthetic(const GeneratorSpec& spec, std::uint64_t seed);

struct LinkEvaluation {
  RankingMetrics metrics;
  std::size_t queries = 0;
};

/// Ranks every entity as the tail of each held-out triple, with the corpus
/// facts present as context.
LinkEvaluation evaluate_link_prediction(const Model& model, const Corpus& corpus,
                                        std::span<const TripleRecord> heldout, int hits_k,
                                        const Repository* repository = nullptr);

struct RoleEvaluation {
  double accuracy = 0.0;
  double chance = 0.0;
  std::size_t corruptions = 0;
};

/// Accuracy of recovering swapped tail tokens over `rounds` corrupted batches.
/// Chance is 1 / (number of distinct tokens seen in the swapped role).
RoleEvaluation evaluate_role_consistency(const Model& model, const Corpus& corpus, std::uint64_t seed, int rounds);

struct PerplexityPoint {
  double lambda = 0.0;
  double perplexity = 0.0;
};

/// Masked-token perplexity on sentence views, interpolating with a datastore
/// built from a separate masking pass (items from the same sentence excluded).
std::vector<PerplexityPoint> evaluate_knn_perplexity(const Model& model, const Corpus& corpus,
                                                     std::span<const double> lambdas, std::size_t k,
                                                     double temperature, std::uint64_t seed);

}  // namespace jkv

#endif  // JOURNEYKV_TRAINING_HPP
