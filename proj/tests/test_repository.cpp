#include "doctest.h"

#include "support.hpp"

#include "journeykv/repository.hpp"

#include <fstream>

using namespace jkv;

namespace {

Repository gaussian_repo(int n, int dim, std::mt19937_64& rng) {
  Repository repo(dim, dim);
  for (int i = 0; i < n; ++i) {
    repo.add(RepositoryItem{test::gaussian(dim, rng), test::gaussian(dim, rng), SlotId::named(i % 2 ? "HEAD" : "TAIL"),
                            "f" + std::to_string(i), "t" + std::to_string(i), i % 3 ? "kb" : "web"});
  }
  return repo;
}

std::vector<ScoredItem> sorted_oracle(const Repository& repo, const Vector& q, std::size_t k) {
  std::vector<ScoredItem> all;
  for (std::size_t i = 0; i < repo.size(); ++i) all.push_back({i, repo.item(i).key.dot(q)});
  std::sort(all.begin(), all.end(),
            [](const ScoredItem& a, const ScoredItem& b) { return a.score > b.score || (a.score == b.score && a.index < b.index); });
  all.resize(std::min(k, all.size()));
  return all;
}

}  // namespace

TEST_CASE("encoding with identity weights stores raw embeddings") {
  Vocabulary vocab;
  vocab.add("A");
  vocab.add("r");
  vocab.add("B");
  const StructuredInstance inst = triple_to_instance(vocab, TripleRecord{"A", "r", "B", "kb"}, "f0");
  std::mt19937_64 rng(41);
  const int d = 4;
  const Matrix emb = test::gaussian(vocab.size(), d, rng);
  OperatorTable table(d);
  for (const char* s : {"HEAD", "RELATION", "TAIL"}) table.set_slot(SlotId::named(s), {RoleOperator::identity(d)});
  const auto items = encode_instance(inst, emb, vocab, Matrix::Identity(d, d), Matrix::Identity(d, d), table);
  REQUIRE(items.size() == 3);
  CHECK(items[0].slot == SlotId::named("HEAD"));
  CHECK(items[1].slot == SlotId::named("RELATION"));
  CHECK(items[2].slot == SlotId::named("TAIL"));
  for (std::size_t i = 0; i < 3; ++i) {
    const Vector x = emb.row(inst.tokens[i].token_id).transpose();
    CHECK(items[i].key == x);
    CHECK(items[i].value == x);
    CHECK(items[i].instance == "f0");
    CHECK(items[i].provenance == "kb");
  }
  CHECK(items[2].token == "B");
}

TEST_CASE("encoding rotates then projects") {
  std::mt19937_64 rng(42);
  const int d = 6;
  Vocabulary vocab;
  for (const char* w : {"the", "cat", "sat"}) vocab.add(w);
  const std::vector<int> ids{vocab.id("the"), vocab.id("cat"), vocab.id("sat")};
  const std::vector<std::string> tags{"DET", "NOUN", "VERB"};
  OperatorTable table(d);
  for (const char* s : {"DET", "NOUN", "VERB"}) table.set_slot(SlotId::named(s), {test::random_operator(OperatorKind::low_rank, d, rng)});
  const Matrix emb = test::gaussian(vocab.size(), d, rng);
  const Matrix wk = test::gaussian(d, d, rng), wv = test::gaussian(d, d, rng);
  for (const StructuredInstance& view : sentence_views("s0", ids, tags, std::nullopt)) {
    const auto items = encode_instance(view, emb, vocab, wk, wv, table);
    for (std::size_t i = 0; i < items.size(); ++i) {
      const InstanceToken& tok = view.tokens[i];
      Vector rotated = emb.row(tok.token_id).transpose();
      if (tok.within_slot_position) rotated = table.within_slot(*tok.within_slot_position).matrix() * rotated;
      rotated = table.slot(tok.slot).matrix() * rotated;
      Vector key = Vector::Zero(d);
      for (int r = 0; r < d; ++r)
        for (int c = 0; c < d; ++c) key[r] += wk(r, c) * rotated[c];
      CHECK(max_abs_diff(items[i].key, key) <= 1e-12);
      CHECK(max_abs_diff(items[i].value, Vector(wv * emb.row(tok.token_id).transpose())) <= 1e-12);
    }
  }
}

TEST_CASE("exact search") {
  Repository repo(3, 1);
  for (int i = 0; i < 3; ++i) repo.add(RepositoryItem{Vector::Unit(3, i), Vector::Zero(1), SlotId::named("S"), "x", "t", ""});
  const auto top = query_exact(repo, Vector::Unit(3, 1), 1);
  REQUIRE(top.size() == 1);
  CHECK(top[0].index == 1);
  CHECK(query_exact(repo, Vector::Unit(3, 0), 10).size() == 3);
  CHECK_THROWS(query_exact(repo, Vector::Zero(2), 1));
  CHECK_THROWS(query_exact(repo, Vector::Zero(3), 0));

  std::mt19937_64 rng(43);
  const Repository random = gaussian_repo(100, 5, rng);
  for (int t = 0; t < 20; ++t) {
    const Vector q = test::gaussian(5, rng);
    CHECK(query_exact(random, q, 5) == sorted_oracle(random, q, 5));
  }
  const auto filtered = query_exact(random, test::gaussian(5, rng), 100, [](const RepositoryItem& it) { return it.provenance == "web"; });
  CHECK(filtered.size() == 34);
  for (const ScoredItem& s : filtered) CHECK(random.item(s.index).provenance == "web");
}

TEST_CASE("index edge cases and full probing") {
  std::mt19937_64 rng(44);
  const Repository repo = gaussian_repo(60, 4, rng);
  CHECK_THROWS_AS(query_approx(repo, test::gaussian(4, rng), 3, 1), RepositoryError);
  CHECK_THROWS_AS(build_index(Repository(4, 4), IndexOptions{1, 5, 0}), RepositoryError);
  CHECK_THROWS_AS(build_index(repo, IndexOptions{61, 5, 0}), RepositoryError);

  const Repository one = build_index(repo, IndexOptions{1, 10, 0});
  REQUIRE(one.index()->lists.size() == 1);
  CHECK(one.index()->lists[0].size() == 60);
  const Repository each = build_index(repo, IndexOptions{60, 10, 0});
  for (const auto& list : each.index()->lists) CHECK(list.size() == 1);

  const Repository indexed = build_index(repo, IndexOptions{7, 25, 3});
  std::size_t covered = 0;
  for (const auto& list : indexed.index()->lists) covered += list.size();
  CHECK(covered == 60);
  for (int t = 0; t < 30; ++t) {
    const Vector q = test::gaussian(4, rng);
    CHECK(query_approx(one, q, 5, 1) == query_exact(one, q, 5));
    CHECK(query_approx(indexed, q, 5, 7) == query_exact(indexed, q, 5));
    const auto approx = query_approx(indexed, q, 5, 2);
    CHECK(recall_at_k(query_exact(indexed, q, 5), approx) <= 1.0);
  }
  // A stored key is found when its own list is probed.
  for (std::size_t i = 0; i < 60; i += 7) {
    const Vector q = indexed.item(i).key * 50.0;
    const auto exact = query_exact(indexed, q, 1);
    CHECK(query_approx(indexed, q, 1, 7)[0] == exact[0]);
  }
  Repository thawed = indexed;
  thawed.add(RepositoryItem{test::gaussian(4, rng), test::gaussian(4, rng), SlotId::named("S"), "new", "t", ""});
  CHECK_FALSE(thawed.frozen());
}

TEST_CASE("recall counts shared indices") {
  const std::vector<ScoredItem> exact{{1, 3.0}, {2, 2.0}, {3, 1.0}, {4, 0.5}};
  const std::vector<ScoredItem> approx{{2, 2.0}, {4, 0.5}, {9, 0.1}};
  CHECK(recall_at_k(exact, approx) == 0.5);
  CHECK(recall_at_k({}, approx) == 1.0);
}

TEST_CASE("persistence round trips and rejects corruption") {
  const auto dir = test::scratch_dir("repo");
  const Repository empty(3, 2);
  persist(empty, dir / "empty.jrkv");
  CHECK(load_repository(dir / "empty.jrkv") == empty);

  std::mt19937_64 rng(45);
  const Repository repo = build_index(gaussian_repo(80, 6, rng), IndexOptions{9, 25, 1});
  persist(repo, dir / "r.jrkv");
  const Repository loaded = load_repository(dir / "r.jrkv");
  CHECK(loaded == repo);
  for (int t = 0; t < 50; ++t) {
    const Vector q = test::gaussian(6, rng);
    CHECK(query_exact(loaded, q, 10) == query_exact(repo, q, 10));
    CHECK(query_approx(loaded, q, 10, 3) == query_approx(repo, q, 10, 3));
  }

  std::string bytes;
  {
    std::ifstream in(dir / "r.jrkv", std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  std::string wrong = bytes;
  wrong[4] = 'X';
  std::ofstream(dir / "magic.jrkv", std::ios::binary) << wrong;
  CHECK_THROWS(load_repository(dir / "magic.jrkv"));
  std::ofstream(dir / "short.jrkv", std::ios::binary) << bytes.substr(0, bytes.size() / 2);
  try {
    load_repository(dir / "short.jrkv");
    FAIL("truncated file loaded");
  } catch (const std::exception& e) {
    CHECK(std::string(e.what()).find("offset") != std::string::npos);
  }
  CHECK_THROWS(load_repository(dir / "missing.jrkv"));
  std::filesystem::remove_all(dir);
}
