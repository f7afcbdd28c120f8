#include "cli.hpp"

#include "journeykv/attention.hpp"
#include "journeykv/model.hpp"
#include "journeykv/operators.hpp"
#include "journeykv/repository.hpp"
#include "journeykv/schema.hpp"
#include "journeykv/training.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace jkv::cli {

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  return out;
}

std::vector<TripleRecord> read_triples(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<TripleRecord> out;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    Record r = parse_record(line, number);
    const auto* t = std::get_if<TripleRecord>(&r);
    if (!t) throw std::runtime_error(path + ":" + std::to_string(number) + ": held-out records must be triples");
    out.push_back(*t);
  }
  return out;
}

Corpus read_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  return parse_jsonl(in);
}

struct GenData {
  std::string config;
  std::string out;
  std::uint64_t seed = 0;
};

int gen_data(const GenData& o, std::ostream& out) {
  GeneratorSpec spec;
  if (!o.config.empty()) spec = read_generator_spec(KeyValueConfig::load(o.config));
  SyntheticData data = gen_synthetic(spec, o.seed);
  write_jsonl(data.corpus, o.out);
  std::ofstream held = open_out(o.out + ".heldout");
  for (const TripleRecord& t : data.heldout) held << to_json_line(Record{t}) << "\n";
  out << "records " << data.corpus.records.size() << "\nheldout " << data.heldout.size() << "\n";
  return 0;
}

int validate_corpus(const std::string& path, std::ostream& out) {
  const Corpus corpus = read_corpus(path);
  const std::vector<Violation> violations = validate(corpus);
  for (const Violation& v : violations) out << v.str() << "\n";
  out << violations.size() << " violations\n";
  return violations.empty() ? 0 : 1;
}

struct Train {
  std::string config;
  std::string corpus;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<int> steps;
};

int train_model(const Train& o, std::ostream& out) {
  TrainingConfig config;
  if (!o.config.empty()) config = load_training_config(o.config);
  if (o.seed) config.seed = config.model.seed = *o.seed;
  if (o.steps) config.steps = *o.steps;
  const Corpus corpus = ingest_jsonl(o.corpus);
  TrainResult result = train(config, corpus);
  save_checkpoint(result.model, o.out);
  std::ofstream csv = open_out(o.out + ".metrics.csv");
  write_metrics_csv(result.metrics, csv);
  if (!result.metrics.empty()) out << "final_loss " << fmt(result.metrics.back().total_loss) << "\n";
  out << "checkpoint " << o.out << "\n";
  return 0;
}

struct Eval {
  std::string checkpoint;
  std::string corpus;
  std::string heldout;
  std::string repo;
  int k = 10;
  std::uint64_t seed = 0;
  int rounds = 5;
};

int eval_model(const Eval& o, std::ostream& out) {
  const Model model = load_checkpoint(o.checkpoint);
  const Corpus corpus = ingest_jsonl(o.corpus);
  std::optional<Repository> repo;
  if (!o.repo.empty()) repo = load_repository(o.repo);
  out << "metric,value\n";
  if (!o.heldout.empty()) {
    const std::vector<TripleRecord> heldout = read_triples(o.heldout);
    const LinkEvaluation lp = evaluate_link_prediction(model, corpus, heldout, o.k, repo ? &*repo : nullptr);
    out << "lp_queries," << lp.queries << "\nlp_mrr," << fmt(lp.metrics.mrr) << "\nlp_hits1," << fmt(lp.metrics.hits1)
        << "\nlp_hits" << o.k << "," << fmt(lp.metrics.hits_k) << "\n";
  }
  const RoleEvaluation rc = evaluate_role_consistency(model, corpus, o.seed, o.rounds);
  out << "rc_corruptions," << rc.corruptions << "\nrc_acc," << fmt(rc.accuracy) << "\nrc_chance," << fmt(rc.chance)
      << "\n";
  const std::vector<double> lambdas{0.0, 0.25, 0.5, 1.0};
  for (const PerplexityPoint& p : evaluate_knn_perplexity(model, corpus, lambdas, static_cast<std::size_t>(o.k), 1.0, o.seed)) {
    out << "knn_perplexity_lambda_" << p.lambda << "," << fmt(p.perplexity) << "\n";
  }
  return 0;
}

struct RepoBuild {
  std::string corpus;
  std::string out;
  std::string checkpoint;
  std::size_t centroids = 0;
  std::uint64_t seed = 0;
};

int repo_build(const RepoBuild& o, std::ostream& out) {
  const Corpus corpus = ingest_jsonl(o.corpus);
  std::optional<Model> model;
  if (!o.checkpoint.empty()) {
    model = load_checkpoint(o.checkpoint);
  } else {
    ModelConfig config;
    config.vocab_size = corpus.vocabulary.size();
    config.seed = o.seed;
    model.emplace(config, model_vocabulary(corpus));
  }
  Repository repo = encode_repository(*model, corpus);
  if (!repo.empty()) {
    const std::size_t c = o.centroids > 0
                              ? o.centroids
                              : std::max<std::size_t>(1, static_cast<std::size_t>(std::sqrt(static_cast<double>(repo.size()))));
    repo = build_index(std::move(repo), IndexOptions{c, 25, o.seed});
  }
  persist(repo, o.out);
  out << "items " << repo.size() << "\ncentroids " << (repo.frozen() ? repo.index()->lists.size() : 0) << "\n";
  return 0;
}

struct RepoQuery {
  std::string repo;
  std::string query;
  std::size_t k = 10;
  std::size_t probes = 0;
  std::uint64_t seed = 0;
};

Vector parse_vector(const std::string& text) {
  std::vector<double> values;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    std::size_t used = 0;
    values.push_back(std::stod(item, &used));
    if (item.find_first_not_of(" \t", used) != std::string::npos) throw std::runtime_error("bad query value '" + item + "'");
  }
  return Eigen::Map<const Vector>(values.data(), static_cast<Eigen::Index>(values.size()));
}

int repo_query(const RepoQuery& o, std::ostream& out) {
  const Repository repo = load_repository(o.repo);
  out << "rank,index,score,slot,instance,token\n";
  if (repo.empty()) return 0;
  Vector q;
  if (!o.query.empty()) {
    q = parse_vector(o.query);
  } else {
    std::mt19937_64 rng(o.seed);
    std::normal_distribution<double> normal;
    q.resize(repo.key_dim());
    for (Eigen::Index i = 0; i < q.size(); ++i) q[i] = normal(rng);
  }
  const std::vector<ScoredItem> hits =
      o.probes > 0 && repo.frozen() ? query_approx(repo, q, o.k, o.probes) : query_exact(repo, q, o.k);
  for (std::size_t r = 0; r < hits.size(); ++r) {
    const RepositoryItem& item = repo.item(hits[r].index);
    out << r + 1 << "," << hits[r].index << "," << fmt(hits[r].score) << "," << item.slot.str() << ","
        << item.instance << "," << item.token << "\n";
  }
  return 0;
}

struct RopeOptions {
  int dim = 32;
  int positions = 128;
  int draws = 1000;
  std::uint64_t seed = 0;
};

int rope_check(const RopeOptions& o, std::ostream& out) {
  const Vector freqs = rope_frequencies<double>(o.dim);
  std::mt19937_64 rng(o.seed);
  std::normal_distribution<double> normal;
  std::uniform_int_distribution<int> pos(0, o.positions);
  double worst = 0.0;
  for (int n = 0; n < o.draws; ++n) {
    Vector q(o.dim), k(o.dim);
    for (int i = 0; i < o.dim; ++i) {
      q[i] = normal(rng);
      k[i] = normal(rng);
    }
    const int i = pos(rng), j = pos(rng);
    worst = std::max(worst, rope_equivalence_check(q, k, i, j, freqs).gap);
  }
  out << "draws " << o.draws << "\nmax_gap " << fmt(worst) << "\n";
  if (worst > 1e-9) throw std::runtime_error("journey and rotary scores differ by " + fmt(worst));
  return 0;
}

struct Inspect {
  std::string checkpoint;
  std::string corpus;
  std::string out;
  int layer = 0;
  int head = 0;
};

void write_pgm(const Matrix& w, const std::string& path) {
  std::ofstream out = open_out(path);
  out << "P2\n" << w.cols() << " " << w.rows() << "\n255\n";
  const double top = w.size() > 0 ? w.maxCoeff() : 0.0;
  for (Eigen::Index i = 0; i < w.rows(); ++i) {
    for (Eigen::Index j = 0; j < w.cols(); ++j) {
      const int level = top > 0.0 ? static_cast<int>(std::lround(255.0 * w(i, j) / top)) : 0;
      out << (j ? " " : "") << level;
    }
    out << "\n";
  }
}

void write_attention_csv(const AttentionCapture& a, const std::string& path) {
  std::ofstream out = open_out(path);
  out << "query";
  for (const std::string& k : a.key_labels) out << "," << k;
  out << "\n";
  for (Eigen::Index i = 0; i < a.weights.rows(); ++i) {
    out << a.query_labels.at(static_cast<std::size_t>(i));
    for (Eigen::Index j = 0; j < a.weights.cols(); ++j) out << "," << fmt(a.weights(i, j));
    out << "\n";
  }
}

int inspect_attention(const Inspect& o, std::ostream& out) {
  const Model model = load_checkpoint(o.checkpoint);
  const Corpus corpus = ingest_jsonl(o.corpus);
  ForwardOptions options;
  options.capture_attention = true;
  const ForwardOutput result = forward(model, corpus.instances, corpus.adjacency, options);
  int written = 0;
  for (const AttentionCapture& a : result.attention) {
    if (a.layer != o.layer || a.head != o.head) continue;
    const std::string base = o.out + ".L" + std::to_string(a.layer) + ".H" + std::to_string(a.head) + "." + to_string(a.stream);
    write_attention_csv(a, base + ".csv");
    write_pgm(a.weights, base + ".pgm");
    out << base << ".csv\n" << base << ".pgm\n";
    ++written;
  }
  if (written == 0) {
    throw std::runtime_error("no attention captured at layer " + std::to_string(o.layer) + ", head " +
                             std::to_string(o.head));
  }
  return 0;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Role-transport attention toolkit", "jkv"};
  app.require_subcommand(1);

  GenData gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Write a synthetic corpus and its held-out facts");
  gen_cmd->add_option("--config", gen.config, "Generator spec (key = value)")->check(CLI::ExistingFile);
  gen_cmd->add_option("--out", gen.out, "Corpus JSONL path; held-out facts go to <out>.heldout")->required();
  gen_cmd->add_option("--seed", gen.seed);

  std::string validate_path;
  auto* validate_cmd = app.add_subcommand("validate", "Check a JSONL corpus against the schema invariants");
  validate_cmd->add_option("--corpus", validate_path)->required();

  Train tr;
  auto* train_cmd = app.add_subcommand("train", "Train a model; writes a checkpoint and <out>.metrics.csv");
  train_cmd->add_option("--config", tr.config, "Training config (key = value)")->check(CLI::ExistingFile);
  train_cmd->add_option("--corpus", tr.corpus)->required();
  train_cmd->add_option("--out", tr.out)->required();
  train_cmd->add_option("--seed", tr.seed);
  train_cmd->add_option("--steps", tr.steps)->check(CLI::NonNegativeNumber);

  Eval ev;
  auto* eval_cmd = app.add_subcommand("eval", "Link prediction, role consistency and kNN perplexity");
  eval_cmd->add_option("--checkpoint", ev.checkpoint)->required();
  eval_cmd->add_option("--corpus", ev.corpus)->required();
  eval_cmd->add_option("--heldout", ev.heldout, "Held-out triples (JSONL)");
  eval_cmd->add_option("--repo", ev.repo, "Frozen repository read by cross layers");
  eval_cmd->add_option("--k", ev.k, "Cutoff for hits@k and kNN retrieval")->check(CLI::PositiveNumber);
  eval_cmd->add_option("--seed", ev.seed);

  RepoBuild rb;
  auto* build_cmd = app.add_subcommand("repo-build", "Encode corpus facts into a repository snapshot");
  build_cmd->add_option("--corpus", rb.corpus)->required();
  build_cmd->add_option("--out", rb.out)->required();
  build_cmd->add_option("--checkpoint", rb.checkpoint, "Model used for encoding; fresh weights if absent");
  build_cmd->add_option("--centroids", rb.centroids, "Inverted lists; defaults to sqrt(items)");
  build_cmd->add_option("--seed", rb.seed);

  RepoQuery rq;
  auto* query_cmd = app.add_subcommand("repo-query", "Top-k items for a query vector");
  query_cmd->add_option("--repo", rq.repo)->required();
  query_cmd->add_option("--k", rq.k)->check(CLI::PositiveNumber);
  query_cmd->add_option("--probes", rq.probes, "Inverted lists scanned; 0 runs exact search");
  query_cmd->add_option("--query", rq.query, "Comma-separated query vector; random from --seed if absent");
  query_cmd->add_option("--seed", rq.seed);

  RopeOptions rope;
  auto* rope_cmd = app.add_subcommand("rope-check", "Compare journey scores against rotary scores");
  rope_cmd->add_option("--dim", rope.dim)->check(CLI::PositiveNumber);
  rope_cmd->add_option("--positions", rope.positions)->check(CLI::NonNegativeNumber);
  rope_cmd->add_option("--draws", rope.draws)->check(CLI::PositiveNumber);
  rope_cmd->add_option("--seed", rope.seed);

  Inspect in;
  auto* inspect_cmd = app.add_subcommand("inspect-attention", "Export attention weights as CSV and PGM");
  inspect_cmd->add_option("--checkpoint", in.checkpoint)->required();
  inspect_cmd->add_option("--corpus", in.corpus)->required();
  inspect_cmd->add_option("--out", in.out, "Output prefix")->required();
  inspect_cmd->add_option("--layer", in.layer)->check(CLI::NonNegativeNumber);
  inspect_cmd->add_option("--head", in.head)->check(CLI::NonNegativeNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen_cmd) return gen_data(gen, out);
    if (*validate_cmd) return validate_corpus(validate_path, out);
    if (*train_cmd) return train_model(tr, out);
    if (*eval_cmd) return eval_model(ev, out);
    if (*build_cmd) return repo_build(rb, out);
    if (*query_cmd) return repo_query(rq, out);
    if (*rope_cmd) return rope_check(rope, out);
    if (*inspect_cmd) return inspect_attention(in, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace jkv::cli
