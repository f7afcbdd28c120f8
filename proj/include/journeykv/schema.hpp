#ifndef JOURNEYKV_SCHEMA_HPP
#define JOURNEYKV_SCHEMA_HPP

#include "journeykv/slot.hpp"

#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

namespace jkv {

struct SlotSchema {
  std::string name;
  std::vector<SlotId> slots;
  /// Accepts every POSITION_k slot without listing them.
  bool positional_family = false;
  bool allows_within_slot_positions = false;

  bool contains(const SlotId& slot) const;
  bool operator==(const SlotSchema&) const = default;
};

enum class InstanceKind { triple, nary, sentence_sequence, sentence_pos, sentence_srl };

std::string to_string(InstanceKind kind);
/// Sentence views belong to the language stream; facts to the structured stream.
bool is_language(InstanceKind kind);

struct InstanceToken {
  int token_id = 0;
  SlotId slot;
  std::optional<int> within_slot_position;
  bool operator==(const InstanceToken&) const = default;
};

struct TokenRef {
  std::string instance;
  int token_index = 0;
  auto operator<=>(const TokenRef&) const = default;
};

/// Cross-view identity: token `token_index` here is the same surface token as `other`.
struct Link {
  int token_index = 0;
  TokenRef other;
  bool operator==(const Link&) const = default;
};

struct StructuredInstance {
  std::string id;
  InstanceKind kind = InstanceKind::triple;
  SlotSchema schema;
  std::vector<InstanceToken> tokens;
  std::string provenance;
  std::vector<Link> links;
  bool operator==(const StructuredInstance&) const = default;
};

class Vocabulary {
 public:
  static constexpr int kMask = 0;
  static constexpr const char* kMaskToken = "[MASK]";

  Vocabulary();

  int add(const std::string& token);
  std::optional<int> find(const std::string& token) const;
  /// Throws std::out_of_range naming the token.
  int id(const std::string& token) const;
  const std::string& token(int id) const;
  int size() const { return static_cast<int>(tokens_.size()); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

struct TripleRecord {
  std::string head;
  std::string relation;
  std::string tail;
  std::string provenance;
  bool operator==(const TripleRecord&) const = default;
};

struct NaryRecord {
  std::string predicate;
  std::map<std::string, std::string> args;
  std::string provenance;
  bool operator==(const NaryRecord&) const = default;
};

using SrlAssignment = std::map<std::string, std::vector<int>>;

struct SentenceRecord {
  std::vector<std::string> tokens;
  std::vector<std::string> pos;
  std::optional<SrlAssignment> srl;
  bool operator==(const SentenceRecord&) const = default;
};

using Record = std::variant<TripleRecord, NaryRecord, SentenceRecord>;

/// instance id -> sorted neighbor instance ids.
using Adjacency = std::map<std::string, std::vector<std::string>>;

struct Corpus {
  Vocabulary vocabulary;
  std::set<int> entities;
  std::vector<Record> records;
  std::vector<StructuredInstance> instances;
  Adjacency adjacency;

  std::optional<std::size_t> index_of(const std::string& instance_id) const;
  const StructuredInstance& instance(const std::string& instance_id) const;
  bool operator==(const Corpus& other) const;

  /// Rebuilds the id -> position lookup after `instances` changes.
  void reindex();

 private:
  std::map<std::string, std::size_t> positions_;
};

class CorpusError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Maps common short tags (N, V, ...) to their long form; other tags are upper-cased.
std::string canonical_pos(const std::string& tag);

StructuredInstance triple_to_instance(const Vocabulary& vocab, const TripleRecord& triple,
                                      const std::string& instance_id);
TripleRecord instance_to_triple(const StructuredInstance& instance, const Vocabulary& vocab);
StructuredInstance nary_to_instance(const Vocabulary& vocab, const NaryRecord& fact,
                                    const std::string& instance_id);

/// Emits the sequence view (POSITION_k slots), the POS view (within-slot
/// positions count occurrences of each tag left to right) and, when `srl` is
/// given, the semantic-role view. All cross-view token identities are linked.
std::vector<StructuredInstance> sentence_views(const std::string& sentence_id,
                                               std::span<const int> tokens,
                                               std::span<const std::string> pos_tags,
                                               const std::optional<SrlAssignment>& srl);

/// Instance ids produced for record `index`.
std::string fact_instance_id(std::size_t record_index);
std::string sentence_instance_id(std::size_t record_index, InstanceKind view);

/// Instances are adjacent when they share an entity token or a link joins them.
Adjacency compute_adjacency(std::span<const StructuredInstance> instances,
                            const std::set<int>& entities);

/// Vocabulary, instances and adjacency from records. Does not validate.
Corpus build_corpus(std::vector<Record> records);

struct Violation {
  std::string instance;
  int token_index = -1;
  std::string rule;
  std::string str() const;
};

/// Never throws; an empty result means every invariant holds.
std::vector<Violation> validate(const Corpus& corpus);

Record parse_record(const std::string& line, std::size_t line_number);
std::string to_json_line(const Record& record);

/// Strict JSONL parse and build, without the validation step.
Corpus parse_jsonl(std::istream& in);
/// parse_jsonl + validate; throws CorpusError listing violations.
Corpus ingest_jsonl(const std::filesystem::path& path);
void write_jsonl(const Corpus& corpus, std::ostream& out);
void write_jsonl(const Corpus& corpus, const std::filesystem::path& path);

}  // namespace jkv

#endif  // JOURNEYKV_SCHEMA_HPP
