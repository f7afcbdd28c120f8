#include "journeykv/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>

namespace jkv {

void ObjectiveWeights::validate() const {
  for (double w : {mlm, lp, rc, align, knn}) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("objective weights must be finite and nonnegative");
  }
  if (mlm + lp + rc + align + knn <= 0.0) throw ConfigError("at least one objective weight must be positive");
}

namespace {

double uniform01(std::mt19937_64& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

int find_slot(const StructuredInstance& inst, const SlotId& slot) {
  for (std::size_t t = 0; t < inst.tokens.size(); ++t)
    if (inst.tokens[t].slot == slot) return static_cast<int>(t);
  return -1;
}

const SlotId kHead = SlotId::named("HEAD");
const SlotId kRelation = SlotId::named("RELATION");
const SlotId kTail = SlotId::named("TAIL");

/// Replacement id under the 80/10/10 recipe.
int corrupt_for_mlm(int original, int vocab_size, std::mt19937_64& rng) {
  const double u = uniform01(rng);
  if (u < 0.8) return Vocabulary::kMask;
  if (u < 0.9 && vocab_size > 1) return 1 + static_cast<int>(uniform_index(rng, static_cast<std::size_t>(vocab_size - 1)));
  return original;
}

std::vector<int> choose_positions(std::size_t n, double rate, std::mt19937_64& rng) {
  if (n == 0) return {};
  const std::size_t count =
      std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(rate * static_cast<double>(n))), 1, n);
  std::vector<int> all(n);
  std::iota(all.begin(), all.end(), 0);
  std::shuffle(all.begin(), all.end(), rng);
  all.resize(count);
  std::sort(all.begin(), all.end());
  return all;
}

}  // namespace

TrainingBatch make_batch(const Corpus& corpus, const BatchOptions& options, std::mt19937_64& rng) {
  TrainingBatch batch;
  std::vector<std::size_t> records(corpus.records.size());
  std::iota(records.begin(), records.end(), 0);
  if (options.records > 0 && options.records < records.size()) {
    std::shuffle(records.begin(), records.end(), rng);
    records.resize(options.records);
    std::sort(records.begin(), records.end());
  }
  for (std::size_t r : records) {
    if (std::holds_alternative<SentenceRecord>(corpus.records[r])) {
      for (InstanceKind view : {InstanceKind::sentence_sequence, InstanceKind::sentence_pos, InstanceKind::sentence_srl}) {
        if (auto i = corpus.index_of(sentence_instance_id(r, view))) batch.instances.push_back(corpus.instances[*i]);
      }
    } else if (auto i = corpus.index_of(fact_instance_id(r))) {
      batch.instances.push_back(corpus.instances[*i]);
    }
  }
  std::map<std::string, std::size_t> position;
  for (std::size_t i = 0; i < batch.instances.size(); ++i) position.emplace(batch.instances[i].id, i);

  const std::vector<int> entities(corpus.entities.begin(), corpus.entities.end());
  std::set<std::pair<std::size_t, int>> touched;
  std::vector<bool> used(batch.instances.size(), false);

  // Link-prediction queries on triples.
  for (std::size_t i = 0; i < batch.instances.size(); ++i) {
    StructuredInstance& inst = batch.instances[i];
    if (inst.kind != InstanceKind::triple) continue;
    if (uniform01(rng) >= options.lp_rate) continue;
    const int head = find_slot(inst, kHead), rel = find_slot(inst, kRelation), tail = find_slot(inst, kTail);
    if (head < 0 || rel < 0 || tail < 0) continue;
    LinkQuery q;
    q.instance = i;
    q.head_token = head;
    q.masked_token = tail;
    q.relation = corpus.vocabulary.token(inst.tokens[static_cast<std::size_t>(rel)].token_id);
    q.true_id = inst.tokens[static_cast<std::size_t>(tail)].token_id;
    q.candidates = entities;
    inst.tokens[static_cast<std::size_t>(rel)].token_id = Vocabulary::kMask;
    inst.tokens[static_cast<std::size_t>(tail)].token_id = Vocabulary::kMask;
    touched.emplace(i, rel);
    touched.emplace(i, tail);
    used[i] = true;
    batch.lp_queries.push_back(std::move(q));
  }

  // Role swaps between remaining facts that share a slot.
  std::vector<std::size_t> facts;
  for (std::size_t i = 0; i < batch.instances.size(); ++i)
    if (!is_language(batch.instances[i].kind) && !used[i]) facts.push_back(i);
  std::shuffle(facts.begin(), facts.end(), rng);
  const auto wanted = static_cast<std::size_t>(std::llround(options.rc_rate * static_cast<double>(facts.size()) / 2.0));
  std::vector<bool> paired(facts.size(), false);
  for (std::size_t a = 0; a < facts.size() && batch.rc_corruptions.size() < wanted; ++a) {
    if (paired[a]) continue;
    StructuredInstance& first = batch.instances[facts[a]];
    for (std::size_t b = a + 1; b < facts.size(); ++b) {
      if (paired[b]) continue;
      StructuredInstance& second = batch.instances[facts[b]];
      if (first.schema.name != second.schema.name) continue;
      const SlotId slot = first.kind == InstanceKind::triple ? kTail : first.tokens.back().slot;
      const int ta = find_slot(first, slot), tb = find_slot(second, slot);
      if (ta < 0 || tb < 0) continue;
      const int ia = first.tokens[static_cast<std::size_t>(ta)].token_id;
      const int ib = second.tokens[static_cast<std::size_t>(tb)].token_id;
      if (ia == ib) continue;
      first.tokens[static_cast<std::size_t>(ta)].token_id = ib;
      second.tokens[static_cast<std::size_t>(tb)].token_id = ia;
      batch.rc_corruptions.push_back(RoleCorruption{{facts[a], ta}, {facts[b], tb}, slot, ia, ib});
      touched.emplace(facts[a], ta);
      touched.emplace(facts[b], tb);
      paired[a] = paired[b] = true;
      used[facts[a]] = used[facts[b]] = true;
      break;
    }
  }

  // Masked modeling on everything else.
  if (options.mlm) {
    for (std::size_t i = 0; i < batch.instances.size(); ++i) {
      StructuredInstance& inst = batch.instances[i];
      if (used[i]) continue;
      if (is_language(inst.kind) && inst.kind != InstanceKind::sentence_sequence) continue;
      for (int t : choose_positions(inst.tokens.size(), options.mask_rate, rng)) {
        const int original = inst.tokens[static_cast<std::size_t>(t)].token_id;
        const int replacement = corrupt_for_mlm(original, corpus.vocabulary.size(), rng);
        inst.tokens[static_cast<std::size_t>(t)].token_id = replacement;
        touched.emplace(i, t);
        batch.mlm_targets.push_back(MlmTarget{{i, t}, original});
        for (const Link& link : inst.links) {
          if (link.token_index != t) continue;
          auto other = position.find(link.other.instance);
          if (other == position.end()) continue;
          batch.instances[other->second].tokens[static_cast<std::size_t>(link.other.token_index)].token_id = replacement;
          touched.emplace(other->second, link.other.token_index);
        }
      }
    }
  }

  // Alignment: entity mentions in sentences against clean fact occurrences.
  if (options.align_negatives > 0) {
    std::map<int, BatchToken> occurrence;
    for (std::size_t i = 0; i < batch.instances.size(); ++i) {
      const StructuredInstance& inst = batch.instances[i];
      if (is_language(inst.kind)) continue;
      for (std::size_t t = 0; t < inst.tokens.size(); ++t) {
        const int id = inst.tokens[t].token_id;
        if (touched.contains({i, static_cast<int>(t)}) || !corpus.entities.contains(id)) continue;
        occurrence.emplace(id, BatchToken{i, static_cast<int>(t)});
      }
    }
    for (std::size_t i = 0; i < batch.instances.size(); ++i) {
      const StructuredInstance& inst = batch.instances[i];
      if (inst.kind != InstanceKind::sentence_sequence) continue;
      for (std::size_t t = 0; t < inst.tokens.size(); ++t) {
        const int id = inst.tokens[t].token_id;
        if (touched.contains({i, static_cast<int>(t)})) continue;
        auto pos = occurrence.find(id);
        if (pos == occurrence.end()) continue;
        std::vector<int> others;
        for (const auto& [other, _] : occurrence)
          if (other != id) others.push_back(other);
        if (others.empty()) continue;
        std::shuffle(others.begin(), others.end(), rng);
        others.resize(std::min<std::size_t>(others.size(), static_cast<std::size_t>(options.align_negatives)));
        const std::vector<int> span{static_cast<int>(t)};
        batch.alignment_pairs.push_back(AlignmentPair{i, span, pos->second, true});
        for (int other : others) batch.alignment_pairs.push_back(AlignmentPair{i, span, occurrence.at(other), false});
      }
    }
  }

  if (!batch.lp_queries.empty()) {
    std::vector<BatchToken> keys;
    for (int e : entities) {
      keys.push_back(BatchToken{batch.instances.size(), 0});
      batch.instances.push_back(entity_probe(corpus.vocabulary, e));
    }
    for (LinkQuery& q : batch.lp_queries) q.candidate_tokens = keys;
  }
  batch.adjacency = compute_adjacency(batch.instances, corpus.entities);
  return batch;
}

StructuredInstance entity_probe(const Vocabulary& vocab, int entity_id) {
  const std::string& name = vocab.token(entity_id);
  const std::string& mask = vocab.token(Vocabulary::kMask);
  return triple_to_instance(vocab, TripleRecord{name, mask, mask, "probe"}, "probe:" + name);
}

ad::Var mlm_loss(ad::Var outputs, ad::Var embeddings, std::span<const Eigen::Index> targets) {
  if (targets.empty()) throw TrainingError("mlm_loss: no targets");
  if (static_cast<Eigen::Index>(targets.size()) != outputs.rows()) {
    throw DimensionError("mlm_loss: " + std::to_string(outputs.rows()) + " outputs for " +
                         std::to_string(targets.size()) + " targets");
  }
  return ad::mean_cross_entropy(ad::matmul_nt(outputs, embeddings), targets);
}

std::vector<int> true_ranks(const Matrix& scores, std::span<const Eigen::Index> true_columns) {
  if (static_cast<Eigen::Index>(true_columns.size()) != scores.rows()) {
    throw DimensionError("true_ranks: one true column per row required");
  }
  std::vector<int> ranks;
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    const Eigen::Index c = true_columns[static_cast<std::size_t>(i)];
    if (c < 0 || c >= scores.cols()) throw std::out_of_range("true_ranks: true column out of range");
    const double s = scores(i, c);
    int rank = 1;
    for (Eigen::Index j = 0; j < scores.cols(); ++j) {
      if (scores(i, j) > s || (scores(i, j) == s && j < c)) ++rank;
    }
    ranks.push_back(rank);
  }
  return ranks;
}

RankingMetrics ranking_metrics(std::span<const int> ranks, int k) {
  RankingMetrics m;
  if (ranks.empty()) return m;
  for (int r : ranks) {
    m.mrr += 1.0 / r;
    m.hits1 += r == 1 ? 1.0 : 0.0;
    m.hits_k += r <= k ? 1.0 : 0.0;
  }
  const auto n = static_cast<double>(ranks.size());
  m.mrr /= n;
  m.hits1 /= n;
  m.hits_k /= n;
  return m;
}

LinkPredictionResult link_prediction_loss(const Model& model, const BoundParameters& params, const ForwardState& state,
                                          std::span<const LinkQuery> queries, int hits_k) {
  if (queries.empty()) throw TrainingError("link_prediction_loss: no queries");
  const ModelConfig& c = model.config();
  const int dh = c.head_dim();
  ad::Tape& tape = params.tape();
  std::map<std::pair<std::string, int>, ad::Var> relation_ops;
  std::vector<ad::Var> losses;
  std::vector<Matrix> rows;
  LinkPredictionResult result;
  for (const LinkQuery& q : queries) {
    if (q.candidates.empty()) throw TrainingError("link_prediction_loss: empty candidate set");
    if (q.candidate_tokens.size() != q.candidates.size()) {
      throw TrainingError("link_prediction_loss: " + std::to_string(q.candidate_tokens.size()) + " key tokens for " +
                          std::to_string(q.candidates.size()) + " candidates");
    }
    auto truth = std::find(q.candidates.begin(), q.candidates.end(), q.true_id);
    if (truth == q.candidates.end()) {
      throw TrainingError("link_prediction_loss: true id " + std::to_string(q.true_id) + " not among candidates");
    }
    const Eigen::Index true_col = truth - q.candidates.begin();
    std::vector<std::pair<std::size_t, int>> key_tokens;
    for (const BatchToken& t : q.candidate_tokens) key_tokens.emplace_back(t.instance, t.token);
    ad::Var keys = state.rows(key_tokens);
    ad::Var query = state.row(q.instance, q.head_token);
    const int r = model.relation_index(q.relation);
    std::vector<ad::Var> heads;
    for (int h = 0; h < c.head_count; ++h) {
      auto key = std::make_pair(q.relation, h);
      auto it = relation_ops.find(key);
      if (it == relation_ops.end()) it = relation_ops.emplace(key, relation_operator(model, params, q.relation, h)).first;
      ad::Var qh = ad::matmul(ad::slice_cols(query, h * dh, dh), it->second);
      heads.push_back(ad::matmul_nt(qh, ad::slice_cols(keys, h * dh, dh)));
    }
    ad::Var score = heads.front();
    for (std::size_t h = 1; h < heads.size(); ++h) score = ad::add(score, heads[h]);
    score = ad::scale(score, 1.0 / std::sqrt(static_cast<double>(dh)));
    ad::Var bias = ad::sum(ad::slice_rows(params["bias.relation"], r, 1));
    score = ad::add(score, ad::matmul(bias, tape.constant(Matrix::Ones(1, static_cast<Eigen::Index>(key_tokens.size())))));
    const Eigen::Index target[] = {true_col};
    losses.push_back(ad::mean_cross_entropy(score, target));
    result.ranks.push_back(true_ranks(score.value(), target).front());
    rows.push_back(score.value());
  }
  ad::Var total = losses.front();
  for (std::size_t i = 1; i < losses.size(); ++i) total = ad::add(total, losses[i]);
  result.loss = ad::scale(total, 1.0 / static_cast<double>(losses.size()));
  const bool uniform = std::all_of(rows.begin(), rows.end(), [&](const Matrix& m) { return m.cols() == rows.front().cols(); });
  if (uniform) {
    result.scores.resize(static_cast<Eigen::Index>(rows.size()), rows.front().cols());
    for (std::size_t i = 0; i < rows.size(); ++i) result.scores.row(static_cast<Eigen::Index>(i)) = rows[i];
  }
  result.metrics = ranking_metrics(result.ranks, hits_k);
  return result;
}

RoleConsistencyResult role_consistency_loss(const ForwardState& state, std::span<const RoleCorruption> corruptions,
                                            ad::Var embeddings, std::size_t instance_count) {
  if (corruptions.empty()) throw TrainingError("role_consistency_loss: no corruptions");
  std::vector<std::pair<std::size_t, int>> tokens;
  std::vector<Eigen::Index> targets;
  for (const RoleCorruption& rc : corruptions) {
    if (rc.first.instance >= instance_count || rc.second.instance >= instance_count) {
      throw TrainingError("role_consistency_loss: corruption references a missing instance");
    }
    tokens.emplace_back(rc.first.instance, rc.first.token);
    targets.push_back(rc.first_original);
    tokens.emplace_back(rc.second.instance, rc.second.token);
    targets.push_back(rc.second_original);
  }
  ad::Var logits = ad::matmul_nt(state.rows(tokens), embeddings);
  RoleConsistencyResult result;
  result.loss = ad::mean_cross_entropy(logits, targets);
  int correct = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index best = 0;
    logits.value().row(i).maxCoeff(&best);
    if (best == targets[static_cast<std::size_t>(i)]) ++correct;
  }
  result.accuracy = static_cast<double>(correct) / static_cast<double>(targets.size());
  return result;
}

ad::Var info_nce(ad::Var anchors, ad::Var keys, std::span<const ContrastiveGroup> groups, double temperature) {
  if (groups.empty()) throw TrainingError("info_nce: no groups");
  if (!(temperature > 0.0)) throw std::invalid_argument("info_nce: temperature must be positive");
  ad::Var sims = ad::scale(ad::matmul_nt(anchors, keys), 1.0 / temperature);
  std::vector<ad::Var> losses;
  for (const ContrastiveGroup& g : groups) {
    if (g.negatives.empty()) throw TrainingError("info_nce: positive pair without negatives");
    std::vector<Eigen::Index> cols{g.positive};
    cols.insert(cols.end(), g.negatives.begin(), g.negatives.end());
    const Eigen::Index row[] = {g.anchor};
    const Eigen::Index target[] = {0};
    losses.push_back(ad::mean_cross_entropy(ad::gather_pairs(sims, row, cols), target));
  }
  ad::Var total = losses.front();
  for (std::size_t i = 1; i < losses.size(); ++i) total = ad::add(total, losses[i]);
  return ad::scale(total, 1.0 / static_cast<double>(losses.size()));
}

ad::Var alignment_loss(const Model& model, const BoundParameters& params, const ForwardState& state,
                       std::span<const StructuredInstance> instances, std::span<const AlignmentPair> pairs,
                       double temperature) {
  if (pairs.empty()) throw TrainingError("alignment_loss: no pairs");
  ad::Tape& tape = params.tape();
  std::map<std::pair<std::size_t, std::vector<int>>, std::size_t> group_of;
  std::vector<ContrastiveGroup> groups;
  std::vector<bool> has_positive;
  std::vector<ad::Var> anchors;
  std::map<std::pair<std::size_t, int>, Eigen::Index> key_of;
  std::vector<std::pair<std::size_t, int>> key_tokens;
  for (const AlignmentPair& p : pairs) {
    if (p.sentence >= instances.size() || p.entity.instance >= instances.size()) {
      throw TrainingError("alignment_loss: pair references a missing instance");
    }
    if (p.span.empty()) throw TrainingError("alignment_loss: empty span");
    auto [git, fresh] = group_of.emplace(std::make_pair(p.sentence, p.span), groups.size());
    if (fresh) {
      std::vector<std::pair<std::size_t, int>> span;
      for (int t : p.span) span.emplace_back(p.sentence, t);
      const double w = 1.0 / static_cast<double>(span.size());
      anchors.push_back(ad::matmul(tape.constant(Matrix::Constant(1, static_cast<Eigen::Index>(span.size()), w)),
                                   state.rows(span)));
      groups.push_back(ContrastiveGroup{static_cast<Eigen::Index>(groups.size()), -1, {}});
      has_positive.push_back(false);
    }
    auto [kit, new_key] = key_of.emplace(std::make_pair(p.entity.instance, p.entity.token),
                                         static_cast<Eigen::Index>(key_tokens.size()));
    if (new_key) key_tokens.emplace_back(p.entity.instance, p.entity.token);
    ContrastiveGroup& g = groups[git->second];
    if (p.positive) {
      if (has_positive[git->second]) throw TrainingError("alignment_loss: span has two positives");
      g.positive = kit->second;
      has_positive[git->second] = true;
    } else {
      g.negatives.push_back(kit->second);
    }
  }
  for (std::size_t i = 0; i < groups.size(); ++i) {
    if (!has_positive[i]) throw TrainingError("alignment_loss: span without a positive entity");
    if (groups[i].negatives.empty()) throw TrainingError("alignment_loss: positive pair without negatives");
  }
  std::vector<SlotId> slots;
  for (const auto& [inst, tok] : key_tokens) slots.push_back(instances[inst].tokens.at(static_cast<std::size_t>(tok)).slot);
  const EncodedItems keys = encode_items(model, params, state.rows(key_tokens), slots, model.repository_layer());
  return info_nce(ad::concat_rows(anchors), keys.keys, groups, temperature);
}

KnnDistribution knn_interpolated_distribution(const Vector& model_dist, const Repository& repo, const Vector& query,
                                              std::size_t k, double lambda, double temperature,
                                              const Vocabulary& vocab, const ItemFilter& filter) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("knn: lambda must lie in [0, 1]");
  if (!(temperature > 0.0)) throw std::invalid_argument("knn: temperature must be positive");
  if (model_dist.size() != vocab.size()) {
    throw DimensionError("knn: model distribution has " + std::to_string(model_dist.size()) +
                         " entries for a vocabulary of " + std::to_string(vocab.size()));
  }
  if (std::abs(model_dist.sum() - 1.0) > 1e-6 || (model_dist.array() < 0.0).any()) {
    throw std::invalid_argument("knn: model distribution is not normalized");
  }
  const std::vector<ScoredItem> hits = repo.empty() ? std::vector<ScoredItem>{} : query_exact(repo, query, k, filter);
  if (hits.empty()) return KnnDistribution{model_dist, true};
  Vector logits(static_cast<Eigen::Index>(hits.size()));
  for (std::size_t i = 0; i < hits.size(); ++i) logits[static_cast<Eigen::Index>(i)] = hits[i].score / temperature;
  const Vector weights = softmax(logits);
  Vector retrieval = Vector::Zero(model_dist.size());
  for (std::size_t i = 0; i < hits.size(); ++i) {
    retrieval[vocab.id(repo.item(hits[i].index).token)] += weights[static_cast<Eigen::Index>(i)];
  }
  return KnnDistribution{lambda * retrieval + (1.0 - lambda) * model_dist, false};
}

TrainingConfig read_training_config(const KeyValueConfig& kv) {
  TrainingConfig c;
  c.model = read_model_config(kv);
  c.steps = kv.get_int("steps", c.steps);
  c.optimizer.learning_rate = kv.get_double("learning_rate", c.optimizer.learning_rate);
  c.optimizer.beta1 = kv.get_double("beta1", c.optimizer.beta1);
  c.optimizer.beta2 = kv.get_double("beta2", c.optimizer.beta2);
  c.optimizer.epsilon = kv.get_double("epsilon", c.optimizer.epsilon);
  c.optimizer.warmup_steps = kv.get_int("warmup_steps", c.optimizer.warmup_steps);
  c.weights.mlm = kv.get_double("lambda_mlm", c.weights.mlm);
  c.weights.lp = kv.get_double("lambda_lp", c.weights.lp);
  c.weights.rc = kv.get_double("lambda_rc", c.weights.rc);
  c.weights.align = kv.get_double("lambda_align", c.weights.align);
  c.weights.knn = kv.get_double("lambda_knn", c.weights.knn);
  c.batch.mask_rate = kv.get_double("mask_rate", c.batch.mask_rate);
  c.batch.lp_rate = kv.get_double("lp_rate", c.batch.lp_rate);
  c.batch.rc_rate = kv.get_double("rc_rate", c.batch.rc_rate);
  c.batch.align_negatives = kv.get_int("align_negatives", c.batch.align_negatives);
  c.batch.records = kv.get_u64("batch_records", c.batch.records);
  c.resample = kv.get_bool("resample", c.resample);
  c.align_temperature = kv.get_double("align_temperature", c.align_temperature);
  c.knn_temperature = kv.get_double("knn_temperature", c.knn_temperature);
  c.knn_k = kv.get_int("knn_k", c.knn_k);
  c.hits_k = kv.get_int("hits_k", c.hits_k);
  c.seed = c.model.seed;
  kv.reject_unknown();
  if (c.steps < 0) throw ConfigError("steps must be nonnegative");
  if (c.hits_k <= 0 || c.knn_k <= 0) throw ConfigError("hits_k and knn_k must be positive");
  for (double rate : {c.batch.mask_rate, c.batch.lp_rate, c.batch.rc_rate}) {
    if (!(rate >= 0.0 && rate <= 1.0)) throw ConfigError("rates must lie in [0, 1]");
  }
  c.weights.validate();
  return c;
}

TrainingConfig load_training_config(const std::filesystem::path& path) {
  return read_training_config(KeyValueConfig::load(path));
}

void write_metrics_csv(std::span<const MetricsRow> rows, std::ostream& out) {
  out << "step,total_loss,loss_mlm,loss_lp,loss_rc,loss_align,lp_mrr,lp_hits1,rc_acc,grad_norm\n";
  char buf[512];
  for (const MetricsRow& r : rows) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.step, r.total_loss,
                  r.loss_mlm, r.loss_lp, r.loss_rc, r.loss_align, r.lp_mrr, r.lp_hits1, r.rc_acc, r.grad_norm);
    out << buf;
  }
}

LossBreakdown total_loss(const Model& model, const BoundParameters& params, const TrainingBatch& batch,
                         const TrainingConfig& config) {
  const ObjectiveWeights& w = config.weights;
  ForwardState state = forward(model, params, batch.instances, batch.adjacency);
  LossBreakdown out;
  std::vector<ad::Var> terms;
  if (w.mlm > 0.0 && !batch.mlm_targets.empty()) {
    std::vector<std::pair<std::size_t, int>> tokens;
    std::vector<Eigen::Index> targets;
    for (const MlmTarget& t : batch.mlm_targets) {
      tokens.emplace_back(t.where.instance, t.where.token);
      targets.push_back(t.true_id);
    }
    ad::Var loss = mlm_loss(state.rows(tokens), params["embed"], targets);
    out.metrics.loss_mlm = loss.scalar();
    terms.push_back(ad::scale(loss, w.mlm));
  }
  if (w.lp > 0.0 && !batch.lp_queries.empty()) {
    LinkPredictionResult lp = link_prediction_loss(model, params, state, batch.lp_queries, config.hits_k);
    out.metrics.loss_lp = lp.loss.scalar();
    out.metrics.lp_mrr = lp.metrics.mrr;
    out.metrics.lp_hits1 = lp.metrics.hits1;
    terms.push_back(ad::scale(lp.loss, w.lp));
  }
  if (w.rc > 0.0 && !batch.rc_corruptions.empty()) {
    RoleConsistencyResult rc =
        role_consistency_loss(state, batch.rc_corruptions, params["embed"], batch.instances.size());
    out.metrics.loss_rc = rc.loss.scalar();
    out.metrics.rc_acc = rc.accuracy;
    terms.push_back(ad::scale(rc.loss, w.rc));
  }
  if (w.align > 0.0 && !batch.alignment_pairs.empty()) {
    ad::Var loss = alignment_loss(model, params, state, batch.instances, batch.alignment_pairs, config.align_temperature);
    out.metrics.loss_align = loss.scalar();
    terms.push_back(ad::scale(loss, w.align));
  }
  if (terms.empty()) {
    out.total = params.tape().constant(Matrix::Zero(1, 1));
  } else {
    out.total = terms.front();
    for (std::size_t i = 1; i < terms.size(); ++i) out.total = ad::add(out.total, terms[i]);
  }
  out.metrics.total_loss = out.total.scalar();
  return out;
}

TrainResult train(const TrainingConfig& config, const Corpus& corpus, const BatchHook& hook) {
  config.weights.validate();
  ModelConfig mc = config.model;
  if (mc.vocab_size == 0) mc.vocab_size = corpus.vocabulary.size();
  if (mc.vocab_size != corpus.vocabulary.size()) {
    throw ConfigError("vocab_size " + std::to_string(mc.vocab_size) + " does not match corpus vocabulary of " +
                      std::to_string(corpus.vocabulary.size()));
  }
  TrainResult result{Model(mc, model_vocabulary(corpus)), {}};
  Model& model = result.model;
  std::mt19937_64 rng(config.seed);
  std::map<std::string, std::pair<Matrix, Matrix>> moments;
  for (const auto& [name, value] : model.parameters()) {
    moments.emplace(name, std::make_pair(Matrix::Zero(value.rows(), value.cols()), Matrix::Zero(value.rows(), value.cols())));
  }
  const OptimizerConfig& opt = config.optimizer;
  TrainingBatch fixed;
  for (int step = 0; step < config.steps; ++step) {
    TrainingBatch batch;
    if (config.resample || step == 0) {
      batch = make_batch(corpus, config.batch, rng);
      if (!config.resample) fixed = batch;
    } else {
      batch = fixed;
    }
    if (hook) hook(batch, step);
    ad::Tape tape;
    BoundParameters params(tape, model.parameters(), true);
    LossBreakdown loss = total_loss(model, params, batch, config);
    MetricsRow row = loss.metrics;
    row.step = step;
    if (!std::isfinite(row.total_loss)) {
      std::ostringstream msg;
      msg << "non-finite loss at step " << step << " (total " << row.total_loss << ", mlm " << row.loss_mlm
          << ", lp " << row.loss_lp << ", rc " << row.loss_rc << ", align " << row.loss_align << ")";
      throw TrainingError(msg.str());
    }
    if (tape.requires_grad(loss.total)) tape.backward(loss.total);
    std::map<std::string, Matrix> grads;
    double norm_sq = 0.0;
    for (const auto& [name, var] : params.vars()) {
      Matrix g = tape.grad(var);
      norm_sq += g.squaredNorm();
      grads.emplace(name, std::move(g));
    }
    row.grad_norm = std::sqrt(norm_sq);
    if (!std::isfinite(row.grad_norm)) throw TrainingError("non-finite gradient at step " + std::to_string(step));
    const double warm = opt.warmup_steps > 0 ? std::min(1.0, (step + 1.0) / opt.warmup_steps) : 1.0;
    const double lr = opt.learning_rate * warm;
    const double c1 = 1.0 - std::pow(opt.beta1, step + 1);
    const double c2 = 1.0 - std::pow(opt.beta2, step + 1);
    for (auto& [name, value] : model.parameters()) {
      const Matrix& g = grads.at(name);
      auto& [m, v] = moments.at(name);
      m = opt.beta1 * m + (1.0 - opt.beta1) * g;
      v = opt.beta2 * v + (1.0 - opt.beta2) * g.cwiseProduct(g);
      value.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + opt.epsilon);
    }
    result.metrics.push_back(row);
  }
  return result;
}

void GeneratorSpec::validate() const {
  if (entities < 2) throw ConfigError("generator: at least 2 entities are required");
  if (relations < 0) throw ConfigError("generator: relation count must be nonnegative");
  if (sentences < 0) throw ConfigError("generator: sentence count must be nonnegative");
  if (!(heldout_fraction >= 0.0 && heldout_fraction < 1.0)) throw ConfigError("generator: heldout_fraction must lie in [0, 1)");
  if (!(nary_rate >= 0.0 && nary_rate <= 1.0)) throw ConfigError("generator: nary_rate must lie in [0, 1]");
  if (!(corruption_rate >= 0.0 && corruption_rate <= 1.0)) throw ConfigError("generator: corruption_rate must lie in [0, 1]");
  std::set<int> results;
  for (const CompositionRule& r : rules) {
    for (int m : {r.result, r.first, r.second}) {
      if (m < 0 || m >= relations) {
        throw ConfigError("generator: rule refers to relation " + std::to_string(m) + " but only " +
                          std::to_string(relations) + " exist");
      }
    }
    if (!results.insert(r.result).second) throw ConfigError("generator: relation defined by two rules");
  }
  for (const CompositionRule& r : rules) {
    if (results.contains(r.first) || results.contains(r.second)) {
      throw ConfigError("generator: rule operands must be base relations");
    }
  }
  if (relations - static_cast<int>(results.size()) >= entities) {
    throw ConfigError("generator: too many base relations for distinct shifts");
  }
}

GeneratorSpec read_generator_spec(const KeyValueConfig& kv) {
  GeneratorSpec spec;
  spec.entities = kv.get_int("entities", spec.entities);
  spec.relations = kv.get_int("relations", spec.relations);
  if (spec.relations < 3) spec.rules.clear();
  if (kv.has("rules")) {
    spec.rules.clear();
    const std::string text = kv.get_string("rules", "");
    std::istringstream in(text);
    std::string rule;
    while (std::getline(in, rule, ',')) {
      rule.erase(std::remove_if(rule.begin(), rule.end(), [](unsigned char ch) { return std::isspace(ch); }), rule.end());
      if (rule.empty() || rule == "none") continue;
      int result = 0, first = 0, second = 0;
      if (std::sscanf(rule.c_str(), "r%d=r%d.r%d", &result, &first, &second) != 3) {
        throw ConfigError("generator: cannot parse rule '" + rule + "' (expected rA=rB.rC)");
      }
      spec.rules.push_back(CompositionRule{result, first, second});
    }
  }
  spec.heldout_fraction = kv.get_double("heldout_fraction", spec.heldout_fraction);
  spec.sentences = kv.get_int("sentences", spec.sentences);
  spec.nary_rate = kv.get_double("nary_rate", spec.nary_rate);
  spec.corruption_rate = kv.get_double("corruption_rate", spec.corruption_rate);
  spec.srl = kv.get_bool("srl", spec.srl);
  kv.reject_unknown();
  spec.validate();
  return spec;
}

std::string entity_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "e%02d", index);
  return buf;
}

std::string relation_name(int index) { return "r" + std::to_string(index); }

namespace {

std::string verb_for(int relation) {
  static const char* verbs[] = {"likes", "knows", "follows", "meets", "helps", "sees", "calls", "trusts"};
  if (relation < 8) return verbs[relation];
  return "relates" + std::to_string(relation);
}

}  // namespace

SyntheticData gen_synthetic(const GeneratorSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  const int n = spec.entities;
  SyntheticData data;
  data.shifts.assign(static_cast<std::size_t>(spec.relations), 0);
  std::set<int> derived;
  for (const CompositionRule& r : spec.rules) derived.insert(r.result);

  bool distinct = false;
  for (int attempt = 0; attempt < 1000 && !distinct; ++attempt) {
    for (int m = 0; m < spec.relations; ++m) {
      if (!derived.contains(m)) data.shifts[static_cast<std::size_t>(m)] = 1 + static_cast<int>(uniform_index(rng, static_cast<std::size_t>(n - 1)));
    }
    for (const CompositionRule& r : spec.rules) {
      data.shifts[static_cast<std::size_t>(r.result)] =
          (data.shifts[static_cast<std::size_t>(r.first)] + data.shifts[static_cast<std::size_t>(r.second)]) % n;
    }
    std::set<int> seen;
    distinct = true;
    for (int s : data.shifts) distinct = distinct && s != 0 && seen.insert(s).second;
  }
  if (!distinct) throw ConfigError("generator: cannot give every relation a distinct nonzero shift");

  std::vector<Record> records;
  std::vector<TripleRecord> train_triples;
  for (int m = 0; m < spec.relations; ++m) {
    std::vector<int> heads(static_cast<std::size_t>(n));
    std::iota(heads.begin(), heads.end(), 0);
    std::size_t held = 0;
    if (derived.contains(m)) {
      std::shuffle(heads.begin(), heads.end(), rng);
      held = static_cast<std::size_t>(std::llround(spec.heldout_fraction * n));
      std::sort(heads.begin() + static_cast<std::ptrdiff_t>(held), heads.end());
    }
    for (std::size_t i = 0; i < heads.size(); ++i) {
      const int h = heads[i];
      TripleRecord t{entity_name(h), relation_name(m), entity_name((h + data.shifts[static_cast<std::size_t>(m)]) % n), "synthetic"};
      if (i < held) {
        data.heldout.push_back(t);
        continue;
      }
      if (spec.corruption_rate > 0.0 && uniform01(rng) < spec.corruption_rate) {
        const int wrong = (h + data.shifts[static_cast<std::size_t>(m)] + 1 + static_cast<int>(uniform_index(rng, static_cast<std::size_t>(n - 1)))) % n;
        t.tail = entity_name(wrong);
        t.provenance = "synthetic:corrupted";
      }
      train_triples.push_back(t);
    }
  }
  std::sort(data.heldout.begin(), data.heldout.end(), [](const TripleRecord& a, const TripleRecord& b) {
    return std::tie(a.relation, a.head) < std::tie(b.relation, b.head);
  });
  for (const TripleRecord& t : train_triples) records.emplace_back(t);

  const auto nary = static_cast<int>(std::llround(spec.nary_rate * n));
  const int step = spec.relations > 0 ? data.shifts.front() : 1;
  for (int i = 0; i < nary; ++i) {
    NaryRecord fact;
    fact.predicate = "event";
    fact.args = {{"AGENT", entity_name(i % n)}, {"PATIENT", entity_name((i + step) % n)}, {"TIME", "t" + std::to_string(i % 4)}};
    fact.provenance = "synthetic:nary";
    records.emplace_back(fact);
  }

  for (int k = 0; k < spec.sentences; ++k) {
    SentenceRecord s;
    std::vector<TripleRecord> base;
    for (const TripleRecord& t : train_triples)
      if (t.provenance == "synthetic") base.push_back(t);
    if (base.empty()) {
      const std::string e = entity_name(static_cast<int>(uniform_index(rng, static_cast<std::size_t>(n))));
      s.tokens = {"the", e, "rests"};
      s.pos = {"DET", "NOUN", "VERB"};
      if (spec.srl) s.srl = SrlAssignment{{"ARG0", {1}}, {"V", {2}}};
    } else {
      const TripleRecord& t = base[uniform_index(rng, base.size())];
      const int m = std::stoi(t.relation.substr(1));
      s.tokens = {"the", t.head, verb_for(m), "the", t.tail};
      s.pos = {"DET", "NOUN", "VERB", "DET", "NOUN"};
      if (spec.srl) s.srl = SrlAssignment{{"ARG0", {1}}, {"V", {2}}, {"ARG1", {4}}};
    }
    records.emplace_back(std::move(s));
  }
  data.corpus = build_corpus(std::move(records));
  return data;
}

LinkEvaluation evaluate_link_prediction(const Model& model, const Corpus& corpus, std::span<const TripleRecord> heldout,
                                        int hits_k, const Repository* repository) {
  LinkEvaluation out;
  if (heldout.empty()) return out;
  std::vector<StructuredInstance> instances;
  for (const StructuredInstance& inst : corpus.instances)
    if (!is_language(inst.kind)) instances.push_back(inst);
  const std::vector<int> entities(corpus.entities.begin(), corpus.entities.end());
  std::vector<LinkQuery> queries;
  for (std::size_t i = 0; i < heldout.size(); ++i) {
    StructuredInstance q = triple_to_instance(corpus.vocabulary, heldout[i], "q" + std::to_string(i));
    const int tail = find_slot(q, kTail);
    LinkQuery lq;
    lq.instance = instances.size();
    lq.head_token = find_slot(q, kHead);
    lq.masked_token = tail;
    lq.relation = heldout[i].relation;
    lq.true_id = q.tokens[static_cast<std::size_t>(tail)].token_id;
    lq.candidates = entities;
    q.tokens[static_cast<std::size_t>(find_slot(q, kRelation))].token_id = Vocabulary::kMask;
    q.tokens[static_cast<std::size_t>(tail)].token_id = Vocabulary::kMask;
    instances.push_back(std::move(q));
    queries.push_back(std::move(lq));
  }
  std::vector<BatchToken> keys;
  for (int e : entities) {
    keys.push_back(BatchToken{instances.size(), 0});
    instances.push_back(entity_probe(corpus.vocabulary, e));
  }
  for (LinkQuery& q : queries) q.candidate_tokens = keys;
  const Adjacency adjacency = compute_adjacency(instances, corpus.entities);
  ad::Tape tape;
  BoundParameters params(tape, model.parameters(), false);
  ForwardOptions options;
  options.repository = repository;
  ForwardState state = forward(model, params, instances, adjacency, options);
  LinkPredictionResult lp = link_prediction_loss(model, params, state, queries, hits_k);
  out.metrics = lp.metrics;
  out.queries = queries.size();
  return out;
}

RoleEvaluation evaluate_role_consistency(const Model& model, const Corpus& corpus, std::uint64_t seed, int rounds) {
  std::map<SlotId, std::set<int>> role_vocab;
  for (const StructuredInstance& inst : corpus.instances) {
    if (is_language(inst.kind)) continue;
    for (const InstanceToken& tok : inst.tokens) role_vocab[tok.slot].insert(tok.token_id);
  }
  BatchOptions options;
  options.lp_rate = 0.0;
  options.rc_rate = 1.0;
  options.mlm = false;
  options.align_negatives = 0;
  std::mt19937_64 rng(seed);
  RoleEvaluation out;
  double correct = 0.0, chance = 0.0;
  for (int round = 0; round < rounds; ++round) {
    TrainingBatch batch = make_batch(corpus, options, rng);
    if (batch.rc_corruptions.empty()) continue;
    ad::Tape tape;
    BoundParameters params(tape, model.parameters(), false);
    ForwardState state = forward(model, params, batch.instances, batch.adjacency);
    RoleConsistencyResult rc = role_consistency_loss(state, batch.rc_corruptions, params["embed"], batch.instances.size());
    const double n = 2.0 * static_cast<double>(batch.rc_corruptions.size());
    correct += rc.accuracy * n;
    for (const RoleCorruption& c : batch.rc_corruptions) chance += 2.0 / static_cast<double>(role_vocab.at(c.slot).size());
    out.corruptions += 2 * batch.rc_corruptions.size();
  }
  if (out.corruptions > 0) {
    out.accuracy = correct / static_cast<double>(out.corruptions);
    out.chance = chance / static_cast<double>(out.corruptions);
  }
  return out;
}

std::vector<PerplexityPoint> evaluate_knn_perplexity(const Model& model, const Corpus& corpus,
                                                     std::span<const double> lambdas, std::size_t k,
                                                     double temperature, std::uint64_t seed) {
  BatchOptions options;
  options.lp_rate = 0.0;
  options.rc_rate = 0.0;
  options.align_negatives = 0;
  std::mt19937_64 rng(seed);
  struct Masked {
    Vector state;
    int true_id;
    std::string sentence;
    SlotId slot;
  };
  auto pass = [&]() {
    TrainingBatch batch = make_batch(corpus, options, rng);
    ForwardOutput out = forward(model, batch.instances, batch.adjacency);
    std::vector<Masked> masked;
    for (const MlmTarget& t : batch.mlm_targets) {
      const StructuredInstance& inst = batch.instances[t.where.instance];
      if (inst.kind != InstanceKind::sentence_sequence) continue;
      masked.push_back(Masked{out.token(t.where.instance, t.where.token), t.true_id, inst.id,
                              inst.tokens[static_cast<std::size_t>(t.where.token)].slot});
    }
    return masked;
  };
  const std::vector<Masked> store = pass();
  const std::vector<Masked> eval = pass();
  const int d = model.config().d_model;
  Repository repo(d, d);
  for (const Masked& m : store) {
    repo.add(RepositoryItem{m.state, m.state, m.slot, m.sentence, corpus.vocabulary.token(m.true_id), "datastore"});
  }
  const Matrix& embed = model.tensor("embed");
  std::vector<PerplexityPoint> points;
  for (double lambda : lambdas) {
    double nll = 0.0;
    for (const Masked& m : eval) {
      const Vector logits = embed * m.state;
      const Vector p = softmax(logits);
      const std::string sentence = m.sentence;
      const KnnDistribution mix = knn_interpolated_distribution(
          p, repo, m.state, k, lambda, temperature, corpus.vocabulary,
          [&sentence](const RepositoryItem& item) { return item.instance != sentence; });
      nll -= std::log(mix.distribution[m.true_id]);
    }
    points.push_back(PerplexityPoint{lambda, eval.empty() ? 0.0 : std::exp(nll / static_cast<double>(eval.size()))});
  }
  return points;
}

}  // namespace jkv
