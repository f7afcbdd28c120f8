#include "doctest.h"

#include "support.hpp"

#include "journeykv/training.hpp"

#include <set>
#include <sstream>

using namespace jkv;

namespace {

Corpus two_sentences() {
  return build_corpus({SentenceRecord{{"the", "cat", "sat"}, {"DET", "NOUN", "VERB"}, std::nullopt},
                       SentenceRecord{{"a", "dog", "ran"}, {"DET", "NOUN", "VERB"}, std::nullopt}});
}

TrainingConfig tiny_config() {
  TrainingConfig config;
  config.model.d_model = 8;
  config.model.head_count = 2;
  config.model.ff_dim = 16;
  config.model.seed = 3;
  config.seed = 3;
  config.steps = 3;
  return config;
}

}  // namespace

TEST_CASE("masked-token loss closed forms and loop oracle") {
  ad::Tape tape;
  std::mt19937_64 rng(61);
  const std::vector<Eigen::Index> targets{3, 7};
  const ad::Var uniform = mlm_loss(tape.constant(Matrix::Zero(2, 6)), tape.constant(test::gaussian(10, 6, rng)), targets);
  CHECK(uniform.scalar() == doctest::Approx(std::log(10.0)).epsilon(1e-14));

  Matrix onehot = Matrix::Zero(2, 10);
  onehot(0, 3) = onehot(1, 7) = 60.0;
  const ad::Var sharp = mlm_loss(tape.constant(onehot), tape.constant(Matrix::Identity(10, 10)), targets);
  CHECK(sharp.scalar() <= 1e-20);

  const Matrix out = test::gaussian(4, 5, rng), emb = test::gaussian(9, 5, rng);
  const std::vector<Eigen::Index> t4{0, 8, 2, 2};
  double oracle = 0.0;
  for (int i = 0; i < 4; ++i) {
    double z = 0.0;
    for (int v = 0; v < 9; ++v) z += std::exp(out.row(i).dot(emb.row(v)));
    oracle += std::log(z) - out.row(i).dot(emb.row(t4[static_cast<std::size_t>(i)]));
  }
  CHECK(mlm_loss(tape.constant(out), tape.constant(emb), t4).scalar() == doctest::Approx(oracle / 4).epsilon(1e-12));
  CHECK_THROWS_AS(mlm_loss(tape.constant(out), tape.constant(emb), std::span<const Eigen::Index>{}), TrainingError);
}

TEST_CASE("ranks agree with a full-sort oracle") {
  std::mt19937_64 rng(62);
  for (int t = 0; t < 50; ++t) {
    Matrix scores = test::gaussian(3, 8, rng);
    scores(0, 2) = scores(0, 5);
    const std::vector<Eigen::Index> truth{5, test::uniform_int(0, 7, rng), test::uniform_int(0, 7, rng)};
    const std::vector<int> ranks = true_ranks(scores, truth);
    for (Eigen::Index i = 0; i < 3; ++i) {
      std::vector<Eigen::Index> order(8);
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) { return scores(i, a) > scores(i, b); });
      const auto pos = std::find(order.begin(), order.end(), truth[static_cast<std::size_t>(i)]) - order.begin();
      CHECK(ranks[static_cast<std::size_t>(i)] == pos + 1);
    }
  }
  const std::vector<int> ranks{1, 2, 4, 20};
  const RankingMetrics m = ranking_metrics(ranks, 3);
  CHECK(m.mrr == doctest::Approx((1.0 + 0.5 + 0.25 + 0.05) / 4));
  CHECK(m.hits1 == 0.25);
  CHECK(m.hits_k == 0.5);
}

TEST_CASE("contrastive loss closed forms and direct formula") {
  ad::Tape tape;
  Matrix anchors(1, 2), keys(2, 2);
  anchors << 1.0, 0.0;
  keys << 0.3, 1.0, 0.3, -1.0;
  const std::vector<ContrastiveGroup> tie{{0, 0, {1}}};
  CHECK(info_nce(tape.constant(anchors), tape.constant(keys), tie, 0.5).scalar() == doctest::Approx(std::log(2.0)).epsilon(1e-14));
  Matrix far = keys;
  far(0, 0) = 50.0;
  CHECK(info_nce(tape.constant(anchors), tape.constant(far), tie, 0.1).scalar() <= 1e-12);

  std::mt19937_64 rng(63);
  const Matrix a = test::gaussian(3, 4, rng), k = test::gaussian(6, 4, rng);
  const std::vector<ContrastiveGroup> groups{{0, 1, {2, 3}}, {1, 4, {0}}, {2, 5, {1, 2, 3, 4}}};
  double oracle = 0.0;
  for (const ContrastiveGroup& g : groups) {
    double z = std::exp(a.row(g.anchor).dot(k.row(g.positive)) / 0.3);
    for (Eigen::Index n : g.negatives) z += std::exp(a.row(g.anchor).dot(k.row(n)) / 0.3);
    oracle += std::log(z) - a.row(g.anchor).dot(k.row(g.positive)) / 0.3;
  }
  CHECK(info_nce(tape.constant(a), tape.constant(k), groups, 0.3).scalar() == doctest::Approx(oracle / 3).epsilon(1e-12));
}

TEST_CASE("link prediction with a single candidate has zero loss") {
  const Corpus corpus = build_corpus({TripleRecord{"A", "r", "B", ""}, TripleRecord{"B", "r", "C", ""}});
  BatchOptions options;
  options.lp_rate = 1.0;
  options.mlm = false;
  std::mt19937_64 rng(64);
  TrainingBatch batch = make_batch(corpus, options, rng);
  REQUIRE(batch.lp_queries.size() == 2);
  for (LinkQuery& q : batch.lp_queries) {
    const auto at = std::find(q.candidates.begin(), q.candidates.end(), q.true_id) - q.candidates.begin();
    q.candidates = {q.true_id};
    q.candidate_tokens = {q.candidate_tokens[static_cast<std::size_t>(at)]};
  }
  ModelConfig config;
  config.vocab_size = corpus.vocabulary.size();
  const Model model(config, model_vocabulary(corpus));
  ad::Tape tape;
  BoundParameters params(tape, model.parameters(), false);
  const ForwardState state = forward(model, params, batch.instances, batch.adjacency);
  const LinkPredictionResult result = link_prediction_loss(model, params, state, batch.lp_queries);
  CHECK(result.loss.scalar() == doctest::Approx(0.0));
  CHECK(result.metrics.mrr == 1.0);
  CHECK(result.metrics.hits1 == 1.0);
}

TEST_CASE("batch construction invariants") {
  GeneratorSpec spec;
  spec.entities = 8;
  spec.sentences = 4;
  spec.nary_rate = 0.3;
  spec.srl = true;
  const Corpus corpus = gen_synthetic(spec, 5).corpus;
  BatchOptions options;
  options.lp_rate = 0.5;
  options.rc_rate = 0.5;
  std::mt19937_64 rng(65);
  for (int round = 0; round < 10; ++round) {
    const TrainingBatch batch = make_batch(corpus, options, rng);
    std::set<std::size_t> masked_instances;
    for (const MlmTarget& t : batch.mlm_targets) {
      masked_instances.insert(t.where.instance);
      CHECK(t.true_id != Vocabulary::kMask);
    }
    std::set<std::size_t> query_instances, swap_instances;
    for (const LinkQuery& q : batch.lp_queries) {
      const StructuredInstance& inst = batch.instances[q.instance];
      CHECK(inst.tokens[1].token_id == Vocabulary::kMask);
      CHECK(inst.tokens[2].token_id == Vocabulary::kMask);
      CHECK(q.candidates.size() == corpus.entities.size());
      CHECK(std::find(q.candidates.begin(), q.candidates.end(), q.true_id) != q.candidates.end());
      for (std::size_t c = 0; c < q.candidates.size(); ++c) {
        const StructuredInstance& probe = batch.instances[q.candidate_tokens[c].instance];
        CHECK(probe.provenance == "probe");
        CHECK(probe.tokens[static_cast<std::size_t>(q.candidate_tokens[c].token)].token_id == q.candidates[c]);
      }
      query_instances.insert(q.instance);
    }
    for (const RoleCorruption& rc : batch.rc_corruptions) {
      const StructuredInstance& a = batch.instances[rc.first.instance];
      const StructuredInstance& b = batch.instances[rc.second.instance];
      CHECK(a.tokens[static_cast<std::size_t>(rc.first.token)].slot == rc.slot);
      CHECK(b.tokens[static_cast<std::size_t>(rc.second.token)].slot == rc.slot);
      CHECK(a.tokens[static_cast<std::size_t>(rc.first.token)].token_id == rc.second_original);
      CHECK(b.tokens[static_cast<std::size_t>(rc.second.token)].token_id == rc.first_original);
      swap_instances.insert(rc.first.instance);
      swap_instances.insert(rc.second.instance);
    }
    // Every instance not reserved for another objective carries at least one masked token.
    for (std::size_t i = 0; i < batch.instances.size(); ++i) {
      const StructuredInstance& inst = batch.instances[i];
      if (inst.provenance == "probe" || query_instances.contains(i) || swap_instances.contains(i)) continue;
      if (is_language(inst.kind) && inst.kind != InstanceKind::sentence_sequence) continue;
      CHECK(masked_instances.contains(i));
    }
    CHECK(batch.adjacency == compute_adjacency(batch.instances, corpus.entities));
  }
}

TEST_CASE("knn interpolation endpoints and normalization") {
  Vocabulary vocab;
  for (const char* w : {"x", "y", "z"}) vocab.add(w);
  Vector p(4);
  p << 0.1, 0.2, 0.3, 0.4;
  Repository repo(2, 1);
  repo.add(RepositoryItem{Vector::Unit(2, 0), Vector::Zero(1), SlotId::positional(1), "s0", "y", ""});
  repo.add(RepositoryItem{Vector::Unit(2, 1), Vector::Zero(1), SlotId::positional(2), "s1", "z", ""});
  const Vector q = Vector::Unit(2, 0);
  CHECK(knn_interpolated_distribution(p, repo, q, 2, 0.0, 1.0, vocab).distribution == p);
  const Vector single = knn_interpolated_distribution(p, repo, q, 1, 1.0, 1.0, vocab).distribution;
  CHECK(single == Vector::Unit(4, vocab.id("y")));
  const KnnDistribution none = knn_interpolated_distribution(p, Repository(2, 1), q, 2, 0.5, 1.0, vocab);
  CHECK(none.repository_empty);
  CHECK(none.distribution == p);
  CHECK_THROWS(knn_interpolated_distribution(p, repo, q, 2, 1.5, 1.0, vocab));

  std::mt19937_64 rng(66);
  for (int t = 0; t < 100; ++t) {
    const Vector model = softmax<double>(test::gaussian(4, rng, 2.0));
    const double lambda = test::uniform(1, 0.0, 1.0, rng)[0];
    const Vector mixed = knn_interpolated_distribution(model, repo, test::gaussian(2, rng), 2, lambda, 0.7, vocab).distribution;
    CHECK(std::abs(mixed.sum() - 1.0) <= 1e-9);
    CHECK((mixed.array() >= 0.0).all());
  }
}

TEST_CASE("zero-weight and empty terms are skipped") {
  const Corpus corpus = two_sentences();
  TrainingConfig config = tiny_config();
  config.model.vocab_size = corpus.vocabulary.size();
  const Model model(config.model, model_vocabulary(corpus));
  std::mt19937_64 rng(67);
  const TrainingBatch batch = make_batch(corpus, config.batch, rng);
  CHECK(batch.lp_queries.empty());
  CHECK(batch.rc_corruptions.empty());
  ad::Tape tape;
  BoundParameters params(tape, model.parameters(), true);
  const LossBreakdown full = total_loss(model, params, batch, config);
  CHECK(full.metrics.loss_lp == 0.0);
  CHECK(full.metrics.loss_rc == 0.0);
  CHECK(full.total.scalar() == doctest::Approx(full.metrics.loss_mlm));

  TrainingConfig off = config;
  off.weights.mlm = 0.0;
  off.weights.align = 1.0;
  ad::Tape tape2;
  BoundParameters params2(tape2, model.parameters(), true);
  const LossBreakdown no_mlm = total_loss(model, params2, batch, off);
  CHECK(no_mlm.metrics.loss_mlm == 0.0);

  ObjectiveWeights zero{0, 0, 0, 0, 0};
  CHECK_THROWS(zero.validate());
  ObjectiveWeights negative;
  negative.lp = -1.0;
  CHECK_THROWS(negative.validate());
}

TEST_CASE("training with zero steps returns the initialization") {
  const Corpus corpus = two_sentences();
  TrainingConfig config = tiny_config();
  config.steps = 0;
  const TrainResult result = train(config, corpus);
  CHECK(result.metrics.empty());
  ModelConfig model_config = config.model;
  model_config.vocab_size = corpus.vocabulary.size();
  const Model fresh(model_config, model_vocabulary(corpus));
  CHECK(result.model.parameters() == fresh.parameters());
}

TEST_CASE("training is deterministic for a seed") {
  GeneratorSpec spec;
  spec.entities = 6;
  spec.sentences = 2;
  const Corpus corpus = gen_synthetic(spec, 2).corpus;
  TrainingConfig config = tiny_config();
  config.steps = 4;
  auto csv = [&](const TrainingConfig& c) {
    std::ostringstream out;
    write_metrics_csv(train(c, corpus).metrics, out);
    return out.str();
  };
  const std::string first = csv(config);
  CHECK(first == csv(config));
  TrainingConfig other = config;
  other.seed = other.model.seed = 4;
  CHECK(first != csv(other));
}

TEST_CASE("training config parsing") {
  const KeyValueConfig kv = KeyValueConfig::parse_string(
      "steps = 7\nlearning_rate = 0.01\nlambda_lp = 0\nlp_rate = 0.25\nresample = false\nd_model = 16\n");
  const TrainingConfig c = read_training_config(kv);
  CHECK(c.steps == 7);
  CHECK(c.optimizer.learning_rate == 0.01);
  CHECK(c.weights.lp == 0.0);
  CHECK(c.batch.lp_rate == 0.25);
  CHECK_FALSE(c.resample);
  CHECK(c.model.d_model == 16);
  CHECK_THROWS(read_training_config(KeyValueConfig::parse_string("stepz = 7\n")));
}

TEST_CASE("synthetic generator") {
  GeneratorSpec none;
  none.relations = 0;
  none.rules.clear();
  const SyntheticData sentences_only = gen_synthetic(none, 1);
  for (const Record& r : sentences_only.corpus.records) CHECK(std::holds_alternative<SentenceRecord>(r));
  CHECK(sentences_only.heldout.empty());

  GeneratorSpec spec;
  const SyntheticData data = gen_synthetic(spec, 9);
  CHECK_FALSE(data.heldout.empty());
  std::set<std::tuple<std::string, std::string, std::string>> facts;
  for (const Record& r : data.corpus.records)
    if (const auto* t = std::get_if<TripleRecord>(&r)) facts.emplace(t->head, t->relation, t->tail);
  // A brute-force rule engine derives every held-out fact from the kept ones.
  const CompositionRule rule = spec.rules.front();
  for (const TripleRecord& h : data.heldout) {
    CHECK(h.relation == relation_name(rule.result));
    CHECK_FALSE(facts.contains({h.head, h.relation, h.tail}));
    bool derived = false;
    for (int b = 0; b < spec.entities; ++b) {
      derived = derived || (facts.contains({h.head, relation_name(rule.first), entity_name(b)}) &&
                            facts.contains({entity_name(b), relation_name(rule.second), h.tail}));
    }
    CHECK(derived);
  }

  auto bytes = [](const SyntheticData& d) {
    std::ostringstream out;
    write_jsonl(d.corpus, out);
    return out.str();
  };
  CHECK(bytes(gen_synthetic(spec, 9)) == bytes(data));
  CHECK(bytes(gen_synthetic(spec, 10)) != bytes(data));
  CHECK(validate(data.corpus).empty());

  GeneratorSpec bad;
  bad.rules = {{5, 0, 1}};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}
