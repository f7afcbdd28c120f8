#ifndef JOURNEYKV_MODEL_HPP
#define JOURNEYKV_MODEL_HPP

#include "journeykv/attention.hpp"
#include "journeykv/autodiff.hpp"
#include "journeykv/config_file.hpp"
#include "journeykv/operators.hpp"
#include "journeykv/repository.hpp"
#include "journeykv/schema.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace jkv {

enum class Stream { language, structured, cross };

std::string to_string(Stream stream);
Stream parse_stream(const std::string& text);

struct LayerGroupConfig {
  Stream stream = Stream::language;
  ReceptiveField level = ReceptiveField::instance_local;
  int layers = 1;
  bool positional_transport = true;
  JourneyMode journey_mode = JourneyMode::slot_journey;

  bool operator==(const LayerGroupConfig&) const = default;
};

/// "stream:level:layers[:pos|nopos][:slot|instance]", e.g. "cross:global:1:nopos".
/// Cross groups default to nopos.
LayerGroupConfig parse_layer_group(const std::string& text);
std::string to_string(const LayerGroupConfig& group);

/// Structured instance-local x2, structured neighborhood x1, language
/// instance-local x2, cross global x1, language global x1.
std::vector<LayerGroupConfig> default_layer_groups();

struct ModelConfig {
  int d_model = 32;
  int head_count = 2;
  int ff_dim = 64;
  int vocab_size = 0;
  std::vector<LayerGroupConfig> layer_groups = default_layer_groups();
  OperatorKind slot_kind = OperatorKind::rotation;
  OperatorKind relation_kind = OperatorKind::rotation;
  OperatorKind instance_kind = OperatorKind::rotation;
  int low_rank = 2;
  Readout readout = Readout::mean_pool;
  int readout_hidden = 16;
  int retrieval_top_k = 8;
  std::uint64_t seed = 0;

  int head_dim() const { return head_count > 0 ? d_model / head_count : 0; }
  /// Throws ConfigError on inconsistent dimensions or an empty group list.
  void validate() const;
  /// One `key = value` line per field, in a fixed order.
  std::string canonical() const;
  /// FNV-1a over canonical().
  std::uint64_t hash() const;

  bool operator==(const ModelConfig&) const = default;
};

/// Reads the model keys (d_model, head_count, ff_dim, vocab_size, layer_groups,
/// slot_operator, relation_operator, instance_operator, low_rank, readout,
/// readout_hidden, retrieval_top_k, seed). Missing keys keep their defaults.
ModelConfig read_model_config(const KeyValueConfig& config);

/// Slots and relations that own learned operators. Positional slots are
/// served from the RoPE schedule and never listed.
struct ModelVocabulary {
  std::vector<SlotId> slots;
  std::vector<std::string> relations;

  bool operator==(const ModelVocabulary&) const = default;
};

/// Slot used for sequence tokens when positional transport is off.
inline const SlotId kWordSlot = SlotId::named("WORD");

/// Every non-positional slot in the corpus plus WORD; every token used in a
/// RELATION slot.
ModelVocabulary model_vocabulary(const Corpus& corpus);

using TensorMap = std::map<std::string, Matrix>;

class Model {
 public:
  /// Fresh parameters drawn from config.seed.
  Model(ModelConfig config, ModelVocabulary vocabulary);
  /// Adopts `parameters`; names and shapes must match a fresh model exactly.
  Model(ModelConfig config, ModelVocabulary vocabulary, TensorMap parameters);

  const ModelConfig& config() const { return config_; }
  const ModelVocabulary& vocabulary() const { return vocabulary_; }
  const TensorMap& parameters() const { return parameters_; }
  TensorMap& parameters() { return parameters_; }
  const Matrix& tensor(const std::string& name) const;

  /// Index into vocabulary().slots; positional slots share one extra index
  /// for the pair bias.
  int bias_index(const SlotId& slot) const;
  int slot_index(const SlotId& slot) const;
  int relation_index(const std::string& relation) const;
  bool has_cross_group() const;
  /// Tensor-name prefix of the layer whose projections encode repository items.
  std::string repository_layer() const;

  /// Slot and relation operators at d_model, assembled block-diagonally from
  /// the per-head operators, with positional slots on the per-head RoPE schedule.
  OperatorTable operator_table() const;

 private:
  ModelConfig config_;
  ModelVocabulary vocabulary_;
  TensorMap parameters_;
};

/// Name and shape of every tensor in creation order.
std::vector<std::pair<std::string, std::pair<Eigen::Index, Eigen::Index>>> tensor_layout(
    const ModelConfig& config, const ModelVocabulary& vocabulary);

/// Parameters bound to a tape, looked up by tensor name.
class BoundParameters {
 public:
  BoundParameters(ad::Tape& tape, const TensorMap& tensors, bool trainable);

  ad::Var operator[](const std::string& name) const;
  const std::map<std::string, ad::Var>& vars() const { return vars_; }
  ad::Tape& tape() const { return *tape_; }

 private:
  ad::Tape* tape_;
  std::map<std::string, ad::Var> vars_;
};

struct ForwardOptions {
  /// Cross groups read this frozen repository when set; otherwise they attend
  /// over the batch's structured tokens, re-encoded on the fly.
  const Repository* repository = nullptr;
  bool capture_attention = false;
};

struct TokenLocation {
  Stream stream = Stream::language;
  Eigen::Index row = 0;
};

struct AttentionCapture {
  int group = 0;
  int layer = 0;  ///< Global layer index across groups.
  int head = 0;
  Stream stream = Stream::language;
  Matrix weights;
  std::vector<std::string> query_labels;
  std::vector<std::string> key_labels;
};

struct ForwardState {
  ad::Var language;    ///< Final normalized language-stream states, one row per token.
  ad::Var structured;  ///< Final normalized structured-stream states.
  /// locations[i][t] is where token t of batch instance i lives.
  std::vector<std::vector<TokenLocation>> locations;
  std::vector<AttentionCapture> attention;
  /// Raw structured states entering the repository layer (or the last
  /// structured state when there is no cross group).
  ad::Var repository_states;

  ad::Var row(std::size_t instance, int token) const;
  ad::Var rows(std::span<const std::pair<std::size_t, int>> tokens) const;
};

/// Full dual-stream pass over `instances`. `adjacency` may name instances
/// outside the batch; they are ignored.
ForwardState forward(const Model& model, const BoundParameters& params,
                     std::span<const StructuredInstance> instances, const Adjacency& adjacency,
                     const ForwardOptions& options = {});

struct ForwardOutput {
  Matrix language;
  Matrix structured;
  std::vector<std::vector<TokenLocation>> locations;
  std::vector<AttentionCapture> attention;

  Vector token(std::size_t instance, int token) const;
};

/// Constant-tape forward returning plain matrices.
ForwardOutput forward(const Model& model, std::span<const StructuredInstance> instances,
                      const Adjacency& adjacency, const ForwardOptions& options = {});

/// Head-dimension relation operator R_r, differentiable in the bound parameters.
ad::Var relation_operator(const Model& model, const BoundParameters& params, const std::string& relation,
                          int head);

struct CrossQuery {
  SlotId slot;
  std::string instance;
};

/// Position-agnostic cross-attention sublayer: queries come from `hidden`
/// with slot-journey transport only, each retrieves its top-k items by
/// journey score, then attends over them. Returns the sublayer output
/// (before the residual), one row per query.
Matrix cross_attend_position_agnostic(const Model& model, const Matrix& hidden,
                                      std::span<const CrossQuery> queries, const Repository& repo,
                                      const std::string& layer_prefix, std::size_t top_k);

/// Item keys k = W_k R_s LN(h) and values v = W_v LN(h) for the given
/// structured-stream states, using the repository layer's projections.
/// Without a cross group the states pass through unprojected.
struct EncodedItems {
  ad::Var keys;
  ad::Var values;
};
EncodedItems encode_items(const Model& model, const BoundParameters& params, ad::Var states,
                          std::span<const SlotId> slots, const std::string& layer_prefix);

/// Runs the structured stream over every fact in `corpus` and stores one
/// item per token. The result is not frozen.
Repository encode_repository(const Model& model, const Corpus& corpus);

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[9] = "JRCK0001";

void save_checkpoint(const Model& model, const std::filesystem::path& path);
/// Reads any checkpoint; the stored config text is parsed back.
Model load_checkpoint(const std::filesystem::path& path);
/// Rejects a checkpoint whose config hash differs from `expected.hash()`.
Model load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected);

}  // namespace jkv

#endif  // JOURNEYKV_MODEL_HPP
