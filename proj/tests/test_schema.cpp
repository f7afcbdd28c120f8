#include "doctest.h"

#include "support.hpp"

#include "journeykv/schema.hpp"

#include <fstream>
#include <sstream>

using namespace jkv;

namespace {

bool has_rule(const std::vector<Violation>& found, const std::string& fragment) {
  for (const Violation& v : found)
    if (v.rule.find(fragment) != std::string::npos) return true;
  return false;
}

}  // namespace

TEST_CASE("slot ids parse and print") {
  CHECK(SlotId::parse("POSITION_12") == SlotId::positional(12));
  CHECK(SlotId::parse("HEAD") == SlotId::named("HEAD"));
  CHECK(SlotId::parse("POSITION_0") == SlotId::named("POSITION_0"));
  CHECK(SlotId::parse("POSITION_x") == SlotId::named("POSITION_x"));
  CHECK(SlotId::positional(7).str() == "POSITION_7");
}

TEST_CASE("vocabulary reserves the mask token") {
  Vocabulary v;
  CHECK(v.size() == 1);
  CHECK(v.token(Vocabulary::kMask) == Vocabulary::kMaskToken);
  const int a = v.add("alpha");
  CHECK(v.add("alpha") == a);
  CHECK(v.id("alpha") == a);
  CHECK_FALSE(v.find("beta").has_value());
  CHECK_THROWS_AS(v.id("beta"), std::out_of_range);
}

TEST_CASE("triples map to three slot-labeled tokens and back") {
  Vocabulary v;
  const TripleRecord t{"A", "born_in", "B", "kb"};
  v.add("A");
  v.add("born_in");
  v.add("B");
  const StructuredInstance inst = triple_to_instance(v, t, "f0");
  REQUIRE(inst.tokens.size() == 3);
  CHECK(inst.tokens[0].slot == SlotId::named("HEAD"));
  CHECK(inst.tokens[1].slot == SlotId::named("RELATION"));
  CHECK(inst.tokens[2].slot == SlotId::named("TAIL"));
  CHECK(inst.tokens[2].token_id == v.id("B"));
  CHECK(inst.provenance == "kb");
  CHECK(instance_to_triple(inst, v) == t);
  CHECK(triple_to_instance(v, instance_to_triple(inst, v), "f0") == inst);
}

TEST_CASE("triples sharing an entity are adjacent") {
  const Corpus c = build_corpus({TripleRecord{"A", "r", "B", ""}, TripleRecord{"A", "s", "C", ""},
                                 TripleRecord{"D", "r", "E", ""}});
  CHECK(c.adjacency.at("f0") == std::vector<std::string>{"f1"});
  CHECK(c.adjacency.at("f1") == std::vector<std::string>{"f0"});
  CHECK(c.adjacency.at("f2").empty());
  CHECK(validate(c).empty());
}

TEST_CASE("sentence views of a one-token sentence") {
  const std::vector<int> ids{5};
  const std::vector<std::string> tags{"N"};
  const auto views = sentence_views("s0", ids, tags, std::nullopt);
  REQUIRE(views.size() == 2);
  CHECK(views[0].tokens[0].slot == SlotId::positional(1));
  CHECK(views[1].tokens[0].slot == SlotId::named("NOUN"));
  CHECK(views[1].tokens[0].within_slot_position == 1);
}

TEST_CASE("POS view counts occurrences per tag") {
  const std::vector<int> ids{3, 4, 5};
  const std::vector<std::string> tags{"N", "V", "N"};
  const auto views = sentence_views("s0", ids, tags, std::nullopt);
  const StructuredInstance& pos = views[1];
  CHECK(pos.tokens[0].slot == SlotId::named("NOUN"));
  CHECK(pos.tokens[0].within_slot_position == 1);
  CHECK(pos.tokens[1].slot == SlotId::named("VERB"));
  CHECK(pos.tokens[1].within_slot_position == 1);
  CHECK(pos.tokens[2].slot == SlotId::named("NOUN"));
  CHECK(pos.tokens[2].within_slot_position == 2);
}

TEST_CASE("every sentence token appears in each view and is linked across views") {
  std::mt19937_64 rng(31);
  for (int t = 0; t < 30; ++t) {
    const int n = test::uniform_int(1, 8, rng);
    std::vector<int> ids;
    std::vector<std::string> tags;
    for (int i = 0; i < n; ++i) {
      ids.push_back(test::uniform_int(1, 20, rng));
      tags.push_back(i % 3 == 0 ? "NOUN" : (i % 3 == 1 ? "VERB" : "DET"));
    }
    std::optional<SrlAssignment> srl;
    if (t % 2) srl = SrlAssignment{{"AGENT", {0}}, {"ACTION", std::vector<int>(n > 1 ? 1 : 0, 1)}};
    const auto views = sentence_views("s", ids, tags, srl);
    CHECK(views.size() == (srl ? 3u : 2u));
    for (std::size_t v = 0; v < 2; ++v) {
      CHECK(views[v].tokens.size() == static_cast<std::size_t>(n));
      for (int i = 0; i < n; ++i) CHECK(views[v].tokens[static_cast<std::size_t>(i)].token_id == ids[static_cast<std::size_t>(i)]);
    }
    // Each link resolves to the same surface token and has a partner pointing back.
    std::map<std::string, const StructuredInstance*> by_id;
    for (const auto& v : views) by_id[v.id] = &v;
    for (const auto& v : views) {
      for (const Link& l : v.links) {
        const StructuredInstance& other = *by_id.at(l.other.instance);
        CHECK(other.tokens[static_cast<std::size_t>(l.other.token_index)].token_id ==
              v.tokens[static_cast<std::size_t>(l.token_index)].token_id);
        const Link back{l.other.token_index, {v.id, l.token_index}};
        CHECK(std::find(other.links.begin(), other.links.end(), back) != other.links.end());
      }
    }
    CHECK(views[0].links.size() + views[1].links.size() ==
          2 * static_cast<std::size_t>(n) + (srl ? 2 * views[2].tokens.size() : 0));
    if (srl) CHECK(views[2].links.size() == 2 * views[2].tokens.size());
  }
}

TEST_CASE("sentence views reject misaligned tags and overlapping roles") {
  const std::vector<int> ids{1, 2};
  const std::vector<std::string> one{"N"};
  CHECK_THROWS_AS(sentence_views("s", ids, one, std::nullopt), CorpusError);
  const std::vector<std::string> two{"N", "V"};
  CHECK_THROWS_AS(sentence_views("s", ids, two, SrlAssignment{{"A", {0}}, {"B", {0}}}), CorpusError);
  CHECK_THROWS_AS(sentence_views("s", ids, two, SrlAssignment{{"A", {5}}}), CorpusError);
}

TEST_CASE("validation flags slot, adjacency and link violations") {
  std::mt19937_64 rng(32);
  for (int t = 0; t < 20; ++t) CHECK(validate(test::random_corpus(rng)).empty());

  Corpus c = build_corpus({TripleRecord{"A", "r", "B", ""}, TripleRecord{"B", "r", "C", ""}});
  Corpus bad_slot = c;
  bad_slot.instances[0].tokens[1].slot = SlotId::named("AGENT");
  bad_slot.reindex();
  const auto slot_found = validate(bad_slot);
  CHECK(slot_found.size() == 1);
  CHECK(has_rule(slot_found, "not in schema"));

  Corpus asym = c;
  asym.adjacency["f1"].clear();
  const auto asym_found = validate(asym);
  REQUIRE_FALSE(asym_found.empty());
  bool named_both = false;
  for (const Violation& v : asym_found)
    named_both = named_both || (v.str().find("f0") != std::string::npos && v.str().find("f1") != std::string::npos);
  CHECK(named_both);

  Corpus dangling = c;
  dangling.instances[0].links.push_back({0, {"nowhere", 0}});
  dangling.reindex();
  CHECK(has_rule(validate(dangling), "unknown instance"));

  Corpus out_of_vocab = c;
  out_of_vocab.instances[0].tokens[0].token_id = 999;
  out_of_vocab.reindex();
  CHECK(has_rule(validate(out_of_vocab), "outside vocabulary"));
}

TEST_CASE("JSONL ingestion") {
  const auto dir = test::scratch_dir("schema");
  {
    std::ofstream(dir / "empty.jsonl");
  }
  const Corpus empty = ingest_jsonl(dir / "empty.jsonl");
  CHECK(empty.instances.empty());
  CHECK(empty.records.empty());

  std::istringstream two(R"({"kind":"triple","h":"A","r":"r","t":"B"}
{"kind":"triple","h":"A","r":"s","t":"C"}
)");
  const Corpus pair = parse_jsonl(two);
  std::size_t edges = 0;
  for (const auto& [id, n] : pair.adjacency) edges += n.size();
  CHECK(edges / 2 == 1);

  std::mt19937_64 rng(33);
  for (int t = 0; t < 10; ++t) {
    const Corpus c = test::random_corpus(rng);
    write_jsonl(c, dir / "round.jsonl");
    CHECK(ingest_jsonl(dir / "round.jsonl") == c);
  }

  std::istringstream unknown(R"({"kind":"triple","h":"A","r":"r","t":"B","extra":1})");
  CHECK_THROWS_AS(parse_jsonl(unknown), CorpusError);
  std::istringstream broken("{\"kind\":\"triple\",\n");
  CHECK_THROWS_AS(parse_jsonl(broken), CorpusError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("records survive a JSON line round trip") {
  const std::vector<Record> records{
      TripleRecord{"A", "r", "B", "kb"},
      NaryRecord{"meeting", {{"AGENT", "A"}, {"PLACE", "x"}}, "kb"},
      SentenceRecord{{"the", "cat"}, {"DET", "NOUN"}, SrlAssignment{{"AGENT", {1}}}},
  };
  for (std::size_t i = 0; i < records.size(); ++i) CHECK(parse_record(to_json_line(records[i]), i + 1) == records[i]);
}
