#include "journeykv/schema.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

namespace jkv {

using json = nlohmann::json;

bool SlotSchema::contains(const SlotId& slot) const {
  if (slot.is_positional()) return positional_family;
  return std::find(slots.begin(), slots.end(), slot) != slots.end();
}

std::string to_string(InstanceKind kind) {
  switch (kind) {
    case InstanceKind::triple: return "triple";
    case InstanceKind::nary: return "nary";
    case InstanceKind::sentence_sequence: return "sequence";
    case InstanceKind::sentence_pos: return "pos";
    case InstanceKind::sentence_srl: return "srl";
  }
  return "unknown";
}

bool is_language(InstanceKind kind) {
  return kind == InstanceKind::sentence_sequence || kind == InstanceKind::sentence_pos ||
         kind == InstanceKind::sentence_srl;
}

Vocabulary::Vocabulary() { add(kMaskToken); }

int Vocabulary::add(const std::string& token) {
  auto [it, inserted] = index_.try_emplace(token, static_cast<int>(tokens_.size()));
  if (inserted) tokens_.push_back(token);
  return it->second;
}

std::optional<int> Vocabulary::find(const std::string& token) const {
  auto it = index_.find(token);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

int Vocabulary::id(const std::string& token) const {
  auto found = find(token);
  if (!found) throw std::out_of_range("unknown token '" + token + "'");
  return *found;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size()) throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary");
  return tokens_[static_cast<std::size_t>(id)];
}

void Corpus::reindex() {
  positions_.clear();
  for (std::size_t i = 0; i < instances.size(); ++i) positions_.emplace(instances[i].id, i);
}

std::optional<std::size_t> Corpus::index_of(const std::string& instance_id) const {
  auto it = positions_.find(instance_id);
  if (it == positions_.end()) return std::nullopt;
  return it->second;
}

const StructuredInstance& Corpus::instance(const std::string& instance_id) const {
  auto idx = index_of(instance_id);
  if (!idx) throw std::out_of_range("unknown instance '" + instance_id + "'");
  return instances[*idx];
}

bool Corpus::operator==(const Corpus& other) const {
  return vocabulary == other.vocabulary && entities == other.entities && records == other.records &&
         instances == other.instances && adjacency == other.adjacency;
}

std::string canonical_pos(const std::string& tag) {
  static const std::map<std::string, std::string> kShort = {
      {"N", "NOUN"}, {"V", "VERB"}, {"A", "ADJ"}, {"J", "ADJ"}, {"R", "ADV"},
      {"D", "DET"},  {"P", "ADP"},  {"C", "CONJ"}, {"PR", "PRON"}};
  std::string upper = tag;
  std::transform(upper.begin(), upper.end(), upper.begin(),
                 [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
  auto it = kShort.find(upper);
  return it == kShort.end() ? upper : it->second;
}

namespace {

const SlotSchema& triple_schema() {
  static const SlotSchema schema{"triple",
                                 {SlotId::named("HEAD"), SlotId::named("RELATION"), SlotId::named("TAIL")},
                                 false,
                                 false};
  return schema;
}

int lookup(const Vocabulary& vocab, const std::string& token) {
  auto id = vocab.find(token);
  if (!id) throw CorpusError("unknown vocabulary entry '" + token + "'");
  return *id;
}

}  // namespace

StructuredInstance triple_to_instance(const Vocabulary& vocab, const TripleRecord& triple,
                                      const std::string& instance_id) {
  StructuredInstance inst;
  inst.id = instance_id;
  inst.kind = InstanceKind::triple;
  inst.schema = triple_schema();
  inst.provenance = triple.provenance;
  inst.tokens = {{lookup(vocab, triple.head), SlotId::named("HEAD"), std::nullopt},
                 {lookup(vocab, triple.relation), SlotId::named("RELATION"), std::nullopt},
                 {lookup(vocab, triple.tail), SlotId::named("TAIL"), std::nullopt}};
  return inst;
}

TripleRecord instance_to_triple(const StructuredInstance& instance, const Vocabulary& vocab) {
  if (instance.kind != InstanceKind::triple || instance.tokens.size() != 3) {
    throw CorpusError("instance '" + instance.id + "' is not a triple");
  }
  TripleRecord t;
  for (const InstanceToken& tok : instance.tokens) {
    const std::string& text = vocab.token(tok.token_id);
    if (tok.slot.name == "HEAD") t.head = text;
    else if (tok.slot.name == "RELATION") t.relation = text;
    else if (tok.slot.name == "TAIL") t.tail = text;
    else throw CorpusError("instance '" + instance.id + "' has non-triple slot " + tok.slot.str());
  }
  t.provenance = instance.provenance;
  return t;
}

StructuredInstance nary_to_instance(const Vocabulary& vocab, const NaryRecord& fact,
                                    const std::string& instance_id) {
  StructuredInstance inst;
  inst.id = instance_id;
  inst.kind = InstanceKind::nary;
  inst.provenance = fact.provenance;
  inst.schema.name = "nary:" + fact.predicate;
  inst.schema.slots.push_back(SlotId::named("PREDICATE"));
  inst.tokens.push_back({lookup(vocab, fact.predicate), SlotId::named("PREDICATE"), std::nullopt});
  for (const auto& [role, entity] : fact.args) {
    const SlotId slot = SlotId::named(role);
    if (slot == SlotId::named("PREDICATE")) throw CorpusError("n-ary role may not be named PREDICATE");
    inst.schema.slots.push_back(slot);
    inst.tokens.push_back({lookup(vocab, entity), slot, std::nullopt});
  }
  return inst;
}

std::string fact_instance_id(std::size_t record_index) { return "f" + std::to_string(record_index); }

std::string sentence_instance_id(std::size_t record_index, InstanceKind view) {
  return "s" + std::to_string(record_index) + "/" + to_string(view);
}

std::vector<StructuredInstance> sentence_views(const std::string& sentence_id,
                                               std::span<const int> tokens,
                                               std::span<const std::string> pos_tags,
                                               const std::optional<SrlAssignment>& srl) {
  if (pos_tags.size() != tokens.size()) {
    const std::size_t bad = std::min(pos_tags.size(), tokens.size());
    throw CorpusError("sentence '" + sentence_id + "': POS tags misaligned at index " +
                      std::to_string(bad) + " (" + std::to_string(tokens.size()) + " tokens, " +
                      std::to_string(pos_tags.size()) + " tags)");
  }
  const std::string seq_id = sentence_id + "/" + to_string(InstanceKind::sentence_sequence);
  const std::string pos_id = sentence_id + "/" + to_string(InstanceKind::sentence_pos);
  const std::string srl_id = sentence_id + "/" + to_string(InstanceKind::sentence_srl);

  StructuredInstance seq;
  seq.id = seq_id;
  seq.kind = InstanceKind::sentence_sequence;
  seq.schema = SlotSchema{"sequence", {}, true, false};

  StructuredInstance pos;
  pos.id = pos_id;
  pos.kind = InstanceKind::sentence_pos;
  pos.schema = SlotSchema{"pos", {}, false, true};

  std::map<std::string, int> pos_counts;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    seq.tokens.push_back({tokens[i], SlotId::positional(static_cast<int>(i) + 1), std::nullopt});
    const SlotId tag = SlotId::named(canonical_pos(pos_tags[i]));
    if (!pos.schema.contains(tag)) pos.schema.slots.push_back(tag);
    const int within = ++pos_counts[tag.name];
    pos.tokens.push_back({tokens[i], tag, within});
  }

  // sentence token index -> srl view token index
  std::vector<int> srl_index(tokens.size(), -1);
  StructuredInstance role_view;
  if (srl) {
    role_view.id = srl_id;
    role_view.kind = InstanceKind::sentence_srl;
    role_view.schema = SlotSchema{"srl", {}, false, true};
    for (const auto& [role, covered] : *srl) {
      const SlotId slot = SlotId::named(role);
      role_view.schema.slots.push_back(slot);
      int within = 0;
      for (int idx : covered) {
        if (idx < 0 || static_cast<std::size_t>(idx) >= tokens.size()) {
          throw CorpusError("sentence '" + sentence_id + "': role " + role + " covers index " +
                            std::to_string(idx) + " outside the sentence");
        }
        if (srl_index[static_cast<std::size_t>(idx)] >= 0) {
          throw CorpusError("sentence '" + sentence_id + "': token " + std::to_string(idx) +
                            " assigned to more than one role");
        }
        srl_index[static_cast<std::size_t>(idx)] = static_cast<int>(role_view.tokens.size());
        role_view.tokens.push_back({tokens[static_cast<std::size_t>(idx)], slot, ++within});
      }
    }
  }

  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const int t = static_cast<int>(i);
    seq.links.push_back({t, {pos_id, t}});
    pos.links.push_back({t, {seq_id, t}});
    const int r = srl_index[i];
    if (r >= 0) {
      seq.links.push_back({t, {srl_id, r}});
      pos.links.push_back({t, {srl_id, r}});
      role_view.links.push_back({r, {seq_id, t}});
      role_view.links.push_back({r, {pos_id, t}});
    }
  }
  std::sort(role_view.links.begin(), role_view.links.end(),
            [](const Link& a, const Link& b) { return std::tie(a.token_index, a.other) < std::tie(b.token_index, b.other); });

  std::vector<StructuredInstance> views;
  views.push_back(std::move(seq));
  views.push_back(std::move(pos));
  if (srl) views.push_back(std::move(role_view));
  return views;
}

Adjacency compute_adjacency(std::span<const StructuredInstance> instances,
                            const std::set<int>& entities) {
  std::map<std::string, std::set<std::string>> neighbors;
  std::map<int, std::vector<std::string>> by_entity;
  for (const StructuredInstance& inst : instances) {
    neighbors[inst.id];
    std::set<int> seen;
    for (const InstanceToken& tok : inst.tokens) {
      if (entities.contains(tok.token_id) && seen.insert(tok.token_id).second) {
        by_entity[tok.token_id].push_back(inst.id);
      }
    }
    for (const Link& link : inst.links) {
      if (link.other.instance == inst.id) continue;
      neighbors[inst.id].insert(link.other.instance);
      neighbors[link.other.instance].insert(inst.id);
    }
  }
  for (const auto& [entity, holders] : by_entity) {
    for (std::size_t a = 0; a < holders.size(); ++a) {
      for (std::size_t b = a + 1; b < holders.size(); ++b) {
        neighbors[holders[a]].insert(holders[b]);
        neighbors[holders[b]].insert(holders[a]);
      }
    }
  }
  Adjacency out;
  for (auto& [id, set] : neighbors) out[id] = std::vector<std::string>(set.begin(), set.end());
  return out;
}

Corpus build_corpus(std::vector<Record> records) {
  Corpus corpus;
  Vocabulary& vocab = corpus.vocabulary;
  for (const Record& record : records) {
    if (const auto* t = std::get_if<TripleRecord>(&record)) {
      corpus.entities.insert(vocab.add(t->head));
      vocab.add(t->relation);
      corpus.entities.insert(vocab.add(t->tail));
    } else if (const auto* n = std::get_if<NaryRecord>(&record)) {
      vocab.add(n->predicate);
      for (const auto& [role, entity] : n->args) corpus.entities.insert(vocab.add(entity));
    } else {
      for (const std::string& tok : std::get<SentenceRecord>(record).tokens) vocab.add(tok);
    }
  }
  for (std::size_t i = 0; i < records.size(); ++i) {
    const Record& record = records[i];
    if (const auto* t = std::get_if<TripleRecord>(&record)) {
      corpus.instances.push_back(triple_to_instance(vocab, *t, fact_instance_id(i)));
    } else if (const auto* n = std::get_if<NaryRecord>(&record)) {
      corpus.instances.push_back(nary_to_instance(vocab, *n, fact_instance_id(i)));
    } else {
      const auto& s = std::get<SentenceRecord>(record);
      std::vector<int> ids;
      for (const std::string& tok : s.tokens) ids.push_back(vocab.id(tok));
      const std::string base = "s" + std::to_string(i);
      for (auto& view : sentence_views(base, ids, s.pos, s.srl)) corpus.instances.push_back(std::move(view));
    }
  }
  corpus.records = std::move(records);
  corpus.adjacency = compute_adjacency(corpus.instances, corpus.entities);
  corpus.reindex();
  return corpus;
}

std::string Violation::str() const {
  std::string out = "instance '" + instance + "'";
  if (token_index >= 0) out += " token " + std::to_string(token_index);
  return out + ": " + rule;
}

std::vector<Violation> validate(const Corpus& corpus) {
  std::vector<Violation> out;
  try {
    std::map<std::string, const StructuredInstance*> by_id;
    for (const StructuredInstance& inst : corpus.instances) {
      if (!by_id.emplace(inst.id, &inst).second) out.push_back({inst.id, -1, "duplicate instance id"});
    }
    for (const StructuredInstance& inst : corpus.instances) {
      for (std::size_t t = 0; t < inst.tokens.size(); ++t) {
        const InstanceToken& tok = inst.tokens[t];
        const int ti = static_cast<int>(t);
        if (!inst.schema.contains(tok.slot)) {
          out.push_back({inst.id, ti, "slot " + tok.slot.str() + " not in schema " + inst.schema.name});
        }
        if (tok.within_slot_position.has_value() != inst.schema.allows_within_slot_positions) {
          out.push_back({inst.id, ti,
                         inst.schema.allows_within_slot_positions
                             ? "missing within-slot position"
                             : "within-slot position on a schema that does not allow it"});
        } else if (tok.within_slot_position && *tok.within_slot_position < 1) {
          out.push_back({inst.id, ti, "within-slot position must be >= 1"});
        }
        if (tok.token_id < 0 || tok.token_id >= corpus.vocabulary.size()) {
          out.push_back({inst.id, ti, "token id " + std::to_string(tok.token_id) + " outside vocabulary"});
        }
      }
      for (const Link& link : inst.links) {
        if (link.token_index < 0 || static_cast<std::size_t>(link.token_index) >= inst.tokens.size()) {
          out.push_back({inst.id, link.token_index, "link from a token index outside the instance"});
          continue;
        }
        auto it = by_id.find(link.other.instance);
        if (it == by_id.end()) {
          out.push_back({inst.id, link.token_index, "link to unknown instance '" + link.other.instance + "'"});
        } else if (link.other.token_index < 0 ||
                   static_cast<std::size_t>(link.other.token_index) >= it->second->tokens.size()) {
          out.push_back({inst.id, link.token_index,
                         "link to token " + std::to_string(link.other.token_index) + " outside '" +
                             link.other.instance + "'"});
        }
      }
    }
    for (const auto& [id, neighbors] : corpus.adjacency) {
      if (!by_id.contains(id)) out.push_back({id, -1, "adjacency entry for unknown instance"});
      for (const std::string& n : neighbors) {
        if (!by_id.contains(n)) {
          out.push_back({id, -1, "adjacency names unknown instance '" + n + "'"});
          continue;
        }
        auto back = corpus.adjacency.find(n);
        if (back == corpus.adjacency.end() ||
            std::find(back->second.begin(), back->second.end(), id) == back->second.end()) {
          out.push_back({id, -1, "asymmetric adjacency between '" + id + "' and '" + n + "'"});
        }
      }
    }
    const Adjacency expected = compute_adjacency(corpus.instances, corpus.entities);
    for (const auto& [id, neighbors] : expected) {
      auto it = corpus.adjacency.find(id);
      for (const std::string& n : neighbors) {
        if (it == corpus.adjacency.end() ||
            std::find(it->second.begin(), it->second.end(), n) == it->second.end()) {
          out.push_back({id, -1, "linked instances '" + id + "' and '" + n + "' missing from adjacency"});
        }
      }
    }
  } catch (const std::exception& e) {
    out.push_back({"", -1, std::string("validation aborted: ") + e.what()});
  }
  return out;
}

namespace {

[[noreturn]] void fail(std::size_t line, const std::string& what) {
  throw CorpusError("line " + std::to_string(line) + ": " + what);
}

void require_only(const json& obj, std::initializer_list<const char*> allowed, std::size_t line) {
  for (const auto& [key, _] : obj.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) fail(line, "unknown field '" + key + "'");
  }
}

std::string get_string(const json& obj, const char* key, std::size_t line, bool optional = false) {
  auto it = obj.find(key);
  if (it == obj.end()) {
    if (optional) return {};
    fail(line, std::string("missing field '") + key + "'");
  }
  if (!it->is_string()) fail(line, std::string("field '") + key + "' must be a string");
  return it->get<std::string>();
}

std::vector<std::string> get_strings(const json& obj, const char* key, std::size_t line) {
  auto it = obj.find(key);
  if (it == obj.end()) fail(line, std::string("missing field '") + key + "'");
  if (!it->is_array()) fail(line, std::string("field '") + key + "' must be an array");
  std::vector<std::string> out;
  for (const json& v : *it) {
    if (!v.is_string()) fail(line, std::string("field '") + key + "' must hold strings");
    out.push_back(v.get<std::string>());
  }
  return out;
}

}  // namespace

Record parse_record(const std::string& text, std::size_t line) {
  json obj;
  try {
    obj = json::parse(text);
  } catch (const json::parse_error& e) {
    fail(line, std::string("malformed JSON: ") + e.what());
  }
  if (!obj.is_object()) fail(line, "record must be a JSON object");
  const std::string kind = get_string(obj, "kind", line);
  if (kind == "triple") {
    require_only(obj, {"kind", "h", "r", "t", "provenance"}, line);
    return TripleRecord{get_string(obj, "h", line), get_string(obj, "r", line),
                        get_string(obj, "t", line), get_string(obj, "provenance", line, true)};
  }
  if (kind == "nary") {
    require_only(obj, {"kind", "pred", "args", "provenance"}, line);
    NaryRecord n{get_string(obj, "pred", line), {}, get_string(obj, "provenance", line, true)};
    auto args = obj.find("args");
    if (args == obj.end() || !args->is_object()) fail(line, "field 'args' must be an object");
    for (const auto& [role, entity] : args->items()) {
      if (!entity.is_string()) fail(line, "argument '" + role + "' must be a string");
      n.args.emplace(role, entity.get<std::string>());
    }
    return n;
  }
  if (kind == "sentence") {
    require_only(obj, {"kind", "tokens", "pos", "srl"}, line);
    SentenceRecord s{get_strings(obj, "tokens", line), get_strings(obj, "pos", line), std::nullopt};
    if (s.pos.size() != s.tokens.size()) {
      fail(line, "pos has " + std::to_string(s.pos.size()) + " tags for " +
                     std::to_string(s.tokens.size()) + " tokens");
    }
    if (auto srl = obj.find("srl"); srl != obj.end()) {
      if (!srl->is_object()) fail(line, "field 'srl' must be an object");
      SrlAssignment roles;
      for (const auto& [role, idx] : srl->items()) {
        if (!idx.is_array()) fail(line, "srl role '" + role + "' must map to an index array");
        for (const json& v : idx) {
          if (!v.is_number_integer()) fail(line, "srl role '" + role + "' has a non-integer index");
          roles[role].push_back(v.get<int>());
        }
      }
      s.srl = std::move(roles);
    }
    return s;
  }
  fail(line, "unknown record kind '" + kind + "'");
}

std::string to_json_line(const Record& record) {
  json obj;
  if (const auto* t = std::get_if<TripleRecord>(&record)) {
    obj = {{"kind", "triple"}, {"h", t->head}, {"r", t->relation}, {"t", t->tail}};
    if (!t->provenance.empty()) obj["provenance"] = t->provenance;
  } else if (const auto* n = std::get_if<NaryRecord>(&record)) {
    obj = {{"kind", "nary"}, {"pred", n->predicate}, {"args", json(n->args)}};
    if (!n->provenance.empty()) obj["provenance"] = n->provenance;
  } else {
    const auto& s = std::get<SentenceRecord>(record);
    obj = {{"kind", "sentence"}, {"tokens", s.tokens}, {"pos", s.pos}};
    if (s.srl) obj["srl"] = json(*s.srl);
  }
  return obj.dump();
}

Corpus parse_jsonl(std::istream& in) {
  std::vector<Record> records;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    records.push_back(parse_record(line, number));
  }
  try {
    return build_corpus(std::move(records));
  } catch (const std::exception& e) {
    throw CorpusError(std::string("building corpus: ") + e.what());
  }
}

Corpus ingest_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw CorpusError("cannot open corpus '" + path.string() + "'");
  Corpus corpus = parse_jsonl(in);
  const auto violations = validate(corpus);
  if (!violations.empty()) {
    std::ostringstream msg;
    msg << "corpus '" << path.string() << "' has " << violations.size() << " violation(s):";
    for (const Violation& v : violations) msg << "\n  " << v.str();
    throw CorpusError(msg.str());
  }
  return corpus;
}

void write_jsonl(const Corpus& corpus, std::ostream& out) {
  for (const Record& r : corpus.records) out << to_json_line(r) << '\n';
}

void write_jsonl(const Corpus& corpus, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CorpusError("cannot write '" + path.string() + "'");
  write_jsonl(corpus, out);
}

}  // namespace jkv
