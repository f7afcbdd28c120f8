#include "journeykv/model.hpp"

#include "journeykv/binary_io.hpp"

#include <algorithm>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

namespace jkv {

std::string to_string(Stream stream) {
  switch (stream) {
    case Stream::language: return "language";
    case Stream::structured: return "structured";
    case Stream::cross: return "cross";
  }
  return "unknown";
}

Stream parse_stream(const std::string& text) {
  if (text == "language") return Stream::language;
  if (text == "structured") return Stream::structured;
  if (text == "cross") return Stream::cross;
  throw std::invalid_argument("unknown stream '" + text + "'");
}

namespace {

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> parts;
  std::string part;
  std::istringstream in(text);
  while (std::getline(in, part, sep)) {
    const auto first = part.find_first_not_of(" \t");
    const auto last = part.find_last_not_of(" \t");
    parts.push_back(first == std::string::npos ? "" : part.substr(first, last - first + 1));
  }
  return parts;
}

}  // namespace

LayerGroupConfig parse_layer_group(const std::string& text) {
  const std::vector<std::string> parts = split(text, ':');
  if (parts.size() < 3) {
    throw ConfigError("layer group '" + text + "' needs stream:level:layers");
  }
  LayerGroupConfig group;
  try {
    group.stream = parse_stream(parts[0]);
    group.level = parse_receptive_field(parts[1]);
  } catch (const std::invalid_argument& e) {
    throw ConfigError("layer group '" + text + "': " + e.what());
  }
  try {
    std::size_t used = 0;
    group.layers = std::stoi(parts[2], &used);
    if (used != parts[2].size()) throw std::invalid_argument("trailing characters");
  } catch (const std::exception&) {
    throw ConfigError("layer group '" + text + "': bad layer count '" + parts[2] + "'");
  }
  group.positional_transport = group.stream != Stream::cross;
  for (std::size_t i = 3; i < parts.size(); ++i) {
    if (parts[i] == "pos") group.positional_transport = true;
    else if (parts[i] == "nopos") group.positional_transport = false;
    else if (parts[i] == "slot") group.journey_mode = JourneyMode::slot_journey;
    else if (parts[i] == "instance") group.journey_mode = JourneyMode::instance_journey;
    else throw ConfigError("layer group '" + text + "': unknown option '" + parts[i] + "'");
  }
  return group;
}

std::string to_string(const LayerGroupConfig& group) {
  return to_string(group.stream) + ":" + to_string(group.level) + ":" + std::to_string(group.layers) +
         (group.positional_transport ? ":pos" : ":nopos") +
         (group.journey_mode == JourneyMode::slot_journey ? ":slot" : ":instance");
}

std::vector<LayerGroupConfig> default_layer_groups() {
  return {
      parse_layer_group("structured:instance_local:2"),
      parse_layer_group("structured:neighborhood:1"),
      parse_layer_group("language:instance_local:2"),
      parse_layer_group("cross:global:1"),
      parse_layer_group("language:global:1"),
  };
}

void ModelConfig::validate() const {
  if (d_model <= 0 || head_count <= 0) throw ConfigError("d_model and head_count must be positive");
  if (d_model % head_count != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by head_count " +
                      std::to_string(head_count));
  }
  if (head_dim() % 2 != 0) throw ConfigError("head_dim must be even, got " + std::to_string(head_dim()));
  if (ff_dim <= 0) throw ConfigError("ff_dim must be positive");
  if (vocab_size <= 0) throw ConfigError("vocab_size must be positive");
  if (layer_groups.empty()) throw ConfigError("at least one layer group is required");
  for (const LayerGroupConfig& g : layer_groups) {
    if (g.layers <= 0) throw ConfigError("layer group '" + to_string(g) + "' has no layers");
  }
  if (low_rank <= 0 || low_rank > head_dim()) throw ConfigError("low_rank must be in [1, head_dim]");
  if (readout_hidden <= 0) throw ConfigError("readout_hidden must be positive");
  if (retrieval_top_k <= 0) throw ConfigError("retrieval_top_k must be positive");
}

std::string ModelConfig::canonical() const {
  std::string groups;
  for (std::size_t i = 0; i < layer_groups.size(); ++i) {
    if (i) groups += ",";
    groups += to_string(layer_groups[i]);
  }
  std::ostringstream out;
  out << "d_model = " << d_model << "\n"
      << "head_count = " << head_count << "\n"
      << "ff_dim = " << ff_dim << "\n"
      << "vocab_size = " << vocab_size << "\n"
      << "layer_groups = " << groups << "\n"
      << "slot_operator = " << to_string(slot_kind) << "\n"
      << "relation_operator = " << to_string(relation_kind) << "\n"
      << "instance_operator = " << to_string(instance_kind) << "\n"
      << "low_rank = " << low_rank << "\n"
      << "readout = " << to_string(readout) << "\n"
      << "readout_hidden = " << readout_hidden << "\n"
      << "retrieval_top_k = " << retrieval_top_k << "\n"
      << "seed = " << seed << "\n";
  return out.str();
}

std::uint64_t ModelConfig::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : canonical()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

ModelConfig read_model_config(const KeyValueConfig& config) {
  ModelConfig m;
  m.d_model = config.get_int("d_model", m.d_model);
  m.head_count = config.get_int("head_count", m.head_count);
  m.ff_dim = config.get_int("ff_dim", m.ff_dim);
  m.vocab_size = config.get_int("vocab_size", m.vocab_size);
  if (config.has("layer_groups")) {
    m.layer_groups.clear();
    for (const std::string& part : split(config.get_string("layer_groups", ""), ',')) {
      if (!part.empty()) m.layer_groups.push_back(parse_layer_group(part));
    }
  }
  try {
    m.slot_kind = parse_operator_kind(config.get_string("slot_operator", to_string(m.slot_kind)));
    m.relation_kind = parse_operator_kind(config.get_string("relation_operator", to_string(m.relation_kind)));
    m.instance_kind = parse_operator_kind(config.get_string("instance_operator", to_string(m.instance_kind)));
    m.readout = parse_readout(config.get_string("readout", to_string(m.readout)));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  m.low_rank = config.get_int("low_rank", m.low_rank);
  m.readout_hidden = config.get_int("readout_hidden", m.readout_hidden);
  m.retrieval_top_k = config.get_int("retrieval_top_k", m.retrieval_top_k);
  m.seed = config.get_u64("seed", m.seed);
  return m;
}

ModelVocabulary model_vocabulary(const Corpus& corpus) {
  std::set<SlotId> slots{kWordSlot};
  std::set<std::string> relations;
  for (const StructuredInstance& inst : corpus.instances) {
    for (const InstanceToken& tok : inst.tokens) {
      if (!tok.slot.is_positional()) slots.insert(tok.slot);
      if (inst.kind == InstanceKind::triple && tok.slot == SlotId::named("RELATION")) {
        relations.insert(corpus.vocabulary.token(tok.token_id));
      }
    }
  }
  return ModelVocabulary{{slots.begin(), slots.end()}, {relations.begin(), relations.end()}};
}

namespace {

std::string layer_prefix(std::size_t group, int layer) {
  return "g" + std::to_string(group) + ".l" + std::to_string(layer) + ".";
}

int operator_params(const ModelConfig& c, OperatorKind kind) {
  return parameter_count(kind, c.head_dim(), c.low_rank);
}

}  // namespace

std::vector<std::pair<std::string, std::pair<Eigen::Index, Eigen::Index>>> tensor_layout(
    const ModelConfig& c, const ModelVocabulary& vocab) {
  std::vector<std::pair<std::string, std::pair<Eigen::Index, Eigen::Index>>> layout;
  auto add = [&](std::string name, Eigen::Index r, Eigen::Index k) {
    layout.emplace_back(std::move(name), std::make_pair(r, k));
  };
  const Eigen::Index d = c.d_model, h = c.head_count;
  add("embed", c.vocab_size, d);
  for (const SlotId& s : vocab.slots) add("op.slot." + s.str(), h, operator_params(c, c.slot_kind));
  for (const std::string& r : vocab.relations) {
    add("op.relation." + r, h, operator_params(c, c.relation_kind));
  }
  const auto bias_slots = static_cast<Eigen::Index>(vocab.slots.size()) + 1;
  for (int head = 0; head < c.head_count; ++head) {
    add("bias.pair.h" + std::to_string(head), bias_slots, bias_slots);
  }
  add("bias.relation", static_cast<Eigen::Index>(vocab.relations.size()), h);
  const Eigen::Index inst_params = h * operator_params(c, c.instance_kind);
  add("readout.w1", c.readout_hidden, d);
  add("readout.b1", 1, c.readout_hidden);
  add("readout.w2", inst_params, c.readout_hidden);
  add("readout.b2", 1, inst_params);
  add("readout.query", 1, d);
  for (std::size_t g = 0; g < c.layer_groups.size(); ++g) {
    for (int l = 0; l < c.layer_groups[g].layers; ++l) {
      const std::string p = layer_prefix(g, l);
      add(p + "ln1.gain", 1, d);
      add(p + "ln1.offset", 1, d);
      if (c.layer_groups[g].stream == Stream::cross) {
        add(p + "lnkv.gain", 1, d);
        add(p + "lnkv.offset", 1, d);
      }
      add(p + "wq", d, d);
      add(p + "wk", d, d);
      add(p + "wv", d, d);
      add(p + "wo", d, d);
      add(p + "ln2.gain", 1, d);
      add(p + "ln2.offset", 1, d);
      add(p + "ff.w1", c.ff_dim, d);
      add(p + "ff.b1", 1, c.ff_dim);
      add(p + "ff.w2", d, c.ff_dim);
      add(p + "ff.b2", 1, d);
    }
  }
  for (const char* stream : {"language", "structured"}) {
    add(std::string("final.") + stream + ".gain", 1, d);
    add(std::string("final.") + stream + ".offset", 1, d);
  }
  return layout;
}

namespace {

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

bool starts_with(const std::string& s, const std::string& prefix) {
  return s.compare(0, prefix.size(), prefix) == 0;
}

Matrix initial_tensor(const ModelConfig& c, const std::string& name, Eigen::Index rows,
                      Eigen::Index cols, std::mt19937_64& rng) {
  auto uniform = [&](double a) {
    std::uniform_real_distribution<double> dist(-a, a);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
    return m;
  };
  if (ends_with(name, ".gain")) return Matrix::Ones(rows, cols);
  if (ends_with(name, ".offset") || starts_with(name, "bias.") || ends_with(name, ".b1") ||
      ends_with(name, ".b2") || name == "readout.w2" || name == "readout.query") {
    return Matrix::Zero(rows, cols);
  }
  if (starts_with(name, "op.")) {
    const bool slot = starts_with(name, "op.slot.");
    const OperatorKind kind = slot ? c.slot_kind : c.relation_kind;
    if (kind == OperatorKind::rotation) {
      if (!slot) return uniform(std::numbers::pi);
      Matrix m(rows, cols);
      const Vector freqs = rope_frequencies(c.head_dim());
      for (Eigen::Index r = 0; r < rows; ++r) m.row(r) = freqs.transpose();
      return m;
    }
    if (kind == OperatorKind::diagonal && slot) return Matrix::Zero(rows, cols);
    return uniform(0.1);
  }
  if (name == "embed") return uniform(1.0 / std::sqrt(static_cast<double>(cols)));
  return uniform(1.0 / std::sqrt(static_cast<double>(cols)));
}

}  // namespace

Model::Model(ModelConfig config, ModelVocabulary vocabulary)
    : config_(std::move(config)), vocabulary_(std::move(vocabulary)) {
  config_.validate();
  std::mt19937_64 rng(config_.seed);
  for (const auto& [name, shape] : tensor_layout(config_, vocabulary_)) {
    parameters_.emplace(name, initial_tensor(config_, name, shape.first, shape.second, rng));
  }
}

Model::Model(ModelConfig config, ModelVocabulary vocabulary, TensorMap parameters)
    : config_(std::move(config)), vocabulary_(std::move(vocabulary)), parameters_(std::move(parameters)) {
  config_.validate();
  const auto layout = tensor_layout(config_, vocabulary_);
  if (layout.size() != parameters_.size()) {
    throw std::invalid_argument("model: expected " + std::to_string(layout.size()) + " tensors, got " +
                                std::to_string(parameters_.size()));
  }
  for (const auto& [name, shape] : layout) {
    auto it = parameters_.find(name);
    if (it == parameters_.end()) throw std::invalid_argument("model: missing tensor '" + name + "'");
    if (it->second.rows() != shape.first || it->second.cols() != shape.second) {
      throw DimensionError("model: tensor '" + name + "' has shape " + shape_string(it->second));
    }
  }
}

const Matrix& Model::tensor(const std::string& name) const {
  auto it = parameters_.find(name);
  if (it == parameters_.end()) throw std::out_of_range("model: unknown tensor '" + name + "'");
  return it->second;
}

int Model::slot_index(const SlotId& slot) const {
  auto it = std::lower_bound(vocabulary_.slots.begin(), vocabulary_.slots.end(), slot);
  if (it == vocabulary_.slots.end() || *it != slot) {
    throw std::out_of_range("model: no operator for slot '" + slot.str() + "'");
  }
  return static_cast<int>(it - vocabulary_.slots.begin());
}

int Model::bias_index(const SlotId& slot) const {
  if (slot.is_positional()) return static_cast<int>(vocabulary_.slots.size());
  return slot_index(slot);
}

int Model::relation_index(const std::string& relation) const {
  auto it = std::lower_bound(vocabulary_.relations.begin(), vocabulary_.relations.end(), relation);
  if (it == vocabulary_.relations.end() || *it != relation) {
    throw std::out_of_range("model: no operator for relation '" + relation + "'");
  }
  return static_cast<int>(it - vocabulary_.relations.begin());
}

bool Model::has_cross_group() const {
  return std::any_of(config_.layer_groups.begin(), config_.layer_groups.end(),
                     [](const LayerGroupConfig& g) { return g.stream == Stream::cross; });
}

std::string Model::repository_layer() const {
  for (std::size_t g = 0; g < config_.layer_groups.size(); ++g) {
    if (config_.layer_groups[g].stream == Stream::cross) return layer_prefix(g, 0);
  }
  return "";
}

namespace {

RoleOperator head_operator(OperatorKind kind, const Matrix& table, int head, int dim, int rank) {
  const Vector row = table.row(head).transpose();
  return operator_from_parameters(kind, row, dim, rank);
}

RoleOperator assemble(const std::vector<RoleOperator>& heads, OperatorKind kind) {
  const int dh = heads.front().dim();
  const int d = dh * static_cast<int>(heads.size());
  switch (kind) {
    case OperatorKind::rotation: {
      Vector angles(d / 2);
      for (std::size_t h = 0; h < heads.size(); ++h) {
        angles.segment(static_cast<Eigen::Index>(h) * dh / 2, dh / 2) = heads[h].angles() * heads[h].step();
      }
      return RoleOperator::rotation(angles, 1.0);
    }
    case OperatorKind::diagonal: {
      Vector logs(d);
      for (std::size_t h = 0; h < heads.size(); ++h) {
        logs.segment(static_cast<Eigen::Index>(h) * dh, dh) = heads[h].log_magnitudes();
      }
      return RoleOperator::diagonal(logs);
    }
    case OperatorKind::low_rank: {
      const Eigen::Index r = heads.front().u().cols();
      const auto hc = static_cast<Eigen::Index>(heads.size());
      Matrix u = Matrix::Zero(d, hc * r), v = Matrix::Zero(d, hc * r);
      for (Eigen::Index h = 0; h < hc; ++h) {
        u.block(h * dh, h * r, dh, r) = heads[static_cast<std::size_t>(h)].u();
        v.block(h * dh, h * r, dh, r) = heads[static_cast<std::size_t>(h)].v();
      }
      return RoleOperator::low_rank(std::move(u), v, kStabilityBound, /*constrain=*/false);
    }
  }
  throw std::logic_error("assemble: unknown operator kind");
}

}  // namespace

OperatorTable Model::operator_table() const {
  const ModelConfig& c = config_;
  const int dh = c.head_dim();
  Vector freqs(c.d_model / 2);
  for (int h = 0; h < c.head_count; ++h) freqs.segment(h * dh / 2, dh / 2) = rope_frequencies(dh);
  OperatorTable table(c.d_model, 1, false, freqs);
  auto build = [&](const Matrix& params, OperatorKind kind) {
    std::vector<RoleOperator> heads;
    for (int h = 0; h < c.head_count; ++h) heads.push_back(head_operator(kind, params, h, dh, c.low_rank));
    return assemble(heads, kind);
  };
  for (const SlotId& s : vocabulary_.slots) {
    table.set_slot(s, {build(tensor("op.slot." + s.str()), c.slot_kind)});
  }
  for (const std::string& r : vocabulary_.relations) {
    table.set_relation(r, {build(tensor("op.relation." + r), c.relation_kind)});
  }
  return table;
}

BoundParameters::BoundParameters(ad::Tape& tape, const TensorMap& tensors, bool trainable) : tape_(&tape) {
  for (const auto& [name, value] : tensors) {
    vars_.emplace(name, trainable ? tape.variable(value) : tape.constant(value));
  }
}

ad::Var BoundParameters::operator[](const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return it->second;
}

ad::Var ForwardState::row(std::size_t instance, int token) const {
  const TokenLocation& loc = locations.at(instance).at(static_cast<std::size_t>(token));
  return ad::slice_rows(loc.stream == Stream::language ? language : structured, loc.row, 1);
}

ad::Var ForwardState::rows(std::span<const std::pair<std::size_t, int>> tokens) const {
  std::vector<ad::Var> parts;
  parts.reserve(tokens.size());
  for (const auto& [inst, tok] : tokens) parts.push_back(row(inst, tok));
  return ad::concat_rows(parts);
}

Vector ForwardOutput::token(std::size_t instance, int token) const {
  const TokenLocation& loc = locations.at(instance).at(static_cast<std::size_t>(token));
  return (loc.stream == Stream::language ? language : structured).row(loc.row).transpose();
}

namespace {

/// Learned operator from one head's parameter row.
ad::Var learned_operator(ad::Var row, OperatorKind kind, int dim, int rank) {
  switch (kind) {
    case OperatorKind::rotation: return ad::rotation_operator(row, 1.0);
    case OperatorKind::diagonal: return ad::diagonal_operator(row, kStabilityBound);
    case OperatorKind::low_rank: {
      ad::Var u = ad::reshape(ad::slice_cols(row, 0, dim * rank), dim, rank);
      ad::Var v = ad::reshape(ad::slice_cols(row, dim * rank, dim * rank), dim, rank);
      return ad::low_rank_operator(u, v, kStabilityBound);
    }
  }
  throw std::logic_error("learned_operator: unknown kind");
}

ad::Var learned_inverse(ad::Var row, ad::Var forward, OperatorKind kind) {
  switch (kind) {
    case OperatorKind::rotation: return ad::transpose(forward);
    case OperatorKind::diagonal: return ad::diagonal_operator(ad::scale(row, -1.0), kStabilityBound);
    case OperatorKind::low_rank: return ad::inverse(forward);
  }
  throw std::logic_error("learned_inverse: unknown kind");
}

/// Identifies the composed operator A = R_slot R_within R_instance of a token.
struct TransportKey {
  int slot = -1;      ///< learned slot index, or -1 for a positional slot
  int position = 0;   ///< RoPE position of a positional slot
  int within = -1;    ///< within-slot position, -1 when absent
  long instance = -1; ///< instance-operator row, -1 when not composed
  auto operator<=>(const TransportKey&) const = default;
};

/// Per-forward memo of head-dimension operators and their inverses.
class Transport {
 public:
  Transport(const Model& model, const BoundParameters& params)
      : model_(model), params_(params), dh_(model.config().head_dim()),
        freqs_(rope_frequencies(model.config().head_dim())) {}

  /// Row i holds the head-concatenated instance parameters of instance row i.
  void set_instance_parameters(ad::Var rows) { instance_rows_ = rows; }

  ad::Var forward(const TransportKey& key, int head) { return get(key, head).first; }
  ad::Var inverse(const TransportKey& key, int head) { return get(key, head).second; }

 private:
  using Pair = std::pair<ad::Var, ad::Var>;

  Pair slot_pair(int slot, int position, int head) {
    if (slot < 0) return rope(position);
    const ModelConfig& c = model_.config();
    const auto& name = model_.vocabulary().slots[static_cast<std::size_t>(slot)];
    ad::Var row = ad::slice_rows(params_["op.slot." + name.str()], head, 1);
    ad::Var fwd = learned_operator(row, c.slot_kind, dh_, c.low_rank);
    return {fwd, learned_inverse(row, fwd, c.slot_kind)};
  }

  Pair rope(int position) {
    auto it = rope_.find(position);
    if (it != rope_.end()) return it->second;
    const Matrix r = rotation_matrix<double>(freqs_, static_cast<double>(position));
    Pair p{params_.tape().constant(r), params_.tape().constant(r.transpose())};
    rope_.emplace(position, p);
    return p;
  }

  Pair instance_pair(long instance, int head) {
    const ModelConfig& c = model_.config();
    const int p = operator_params(c, c.instance_kind);
    ad::Var row = ad::slice_cols(ad::slice_rows(instance_rows_, instance, 1), head * p, p);
    ad::Var fwd = learned_operator(row, c.instance_kind, dh_, c.low_rank);
    return {fwd, learned_inverse(row, fwd, c.instance_kind)};
  }

  const Pair& get(const TransportKey& key, int head) {
    auto found = cache_.find({key, head});
    if (found != cache_.end()) return found->second;
    Pair acc = slot_pair(key.slot, key.position, head);
    if (key.within >= 0) {
      Pair w = rope(key.within);
      acc = {ad::matmul(acc.first, w.first), ad::matmul(w.second, acc.second)};
    }
    if (key.instance >= 0) {
      if (!instance_rows_.valid()) throw std::logic_error("transport: instance operators not prepared");
      Pair e = instance_pair(key.instance, head);
      acc = {ad::matmul(acc.first, e.first), ad::matmul(e.second, acc.second)};
    }
    return cache_.emplace(std::make_pair(key, head), acc).first->second;
  }

  const Model& model_;
  const BoundParameters& params_;
  int dh_;
  Vector freqs_;
  ad::Var instance_rows_;
  std::map<int, Pair> rope_;
  std::map<std::pair<TransportKey, int>, Pair> cache_;
};

/// Transport key for a token under a group's positional and journey settings.
TransportKey transport_key(const Model& model, const SlotId& slot, std::optional<int> within,
                           long instance_row, const LayerGroupConfig& group) {
  TransportKey key;
  if (slot.is_positional()) {
    if (group.positional_transport) key.position = slot.position;
    else key.slot = model.slot_index(kWordSlot);
  } else {
    key.slot = model.slot_index(slot);
  }
  if (group.positional_transport && within) key.within = *within;
  if (group.journey_mode == JourneyMode::instance_journey) key.instance = instance_row;
  return key;
}

Eigen::Index bias_slot(const Model& model, const SlotId& slot, const LayerGroupConfig& group) {
  if (slot.is_positional() && !group.positional_transport) return model.bias_index(kWordSlot);
  return model.bias_index(slot);
}

/// Groups tokens by transport key; returns per-token group ids and the keys.
std::pair<std::vector<Eigen::Index>, std::vector<TransportKey>> group_keys(
    const std::vector<TransportKey>& keys) {
  std::map<TransportKey, Eigen::Index> ids;
  std::vector<TransportKey> unique;
  std::vector<Eigen::Index> group;
  group.reserve(keys.size());
  for (const TransportKey& k : keys) {
    auto [it, inserted] = ids.emplace(k, static_cast<Eigen::Index>(unique.size()));
    if (inserted) unique.push_back(k);
    group.push_back(it->second);
  }
  return {group, unique};
}

struct TokenSide {
  std::vector<TransportKey> keys;
  std::vector<Eigen::Index> bias;
  std::vector<std::string> labels;
};

/// Multi-head journey-transported logits, one Var per head.
std::vector<ad::Var> journey_logits(const Model& model, const BoundParameters& params, Transport& transport,
                                    ad::Var q, ad::Var k,
                                    const TokenSide& queries, const TokenSide& keys) {
  const int dh = model.config().head_dim();
  const auto [qgroup, qkeys] = group_keys(queries.keys);
  const auto [kgroup, kkeys] = group_keys(keys.keys);
  std::vector<ad::Var> logits;
  for (int h = 0; h < model.config().head_count; ++h) {
    std::vector<ad::Var> qmats, kmats;
    for (const TransportKey& key : qkeys) qmats.push_back(transport.forward(key, h));
    for (const TransportKey& key : kkeys) kmats.push_back(transport.inverse(key, h));
    ad::Var qt = ad::rowwise_transform(ad::slice_cols(q, h * dh, dh), qgroup, qmats, false);
    ad::Var kt = ad::rowwise_transform(ad::slice_cols(k, h * dh, dh), kgroup, kmats, true);
    ad::Var s = ad::scale(ad::matmul_nt(qt, kt), 1.0 / std::sqrt(static_cast<double>(dh)));
    ad::Var bias = ad::gather_pairs(params["bias.pair.h" + std::to_string(h)], queries.bias, keys.bias);
    logits.push_back(ad::add(s, bias));
  }
  return logits;
}

struct AttentionContext {
  const Model& model;
  const BoundParameters& params;
  Transport& transport;
  bool capture = false;
  std::vector<AttentionCapture>* captures = nullptr;
};

/// Softmax under `mask` per head, weighted values, output projection.
ad::Var attend_heads(AttentionContext& ctx, const std::string& prefix, const std::vector<ad::Var>& logits,
                     const BoolMatrix& mask, ad::Var v, const TokenSide& queries, const TokenSide& keys,
                     int group, int layer, Stream stream) {
  const int dh = ctx.model.config().head_dim();
  std::vector<ad::Var> heads;
  for (std::size_t h = 0; h < logits.size(); ++h) {
    ad::Var w = ad::masked_softmax_rows(logits[h], mask);
    if (ctx.capture) {
      ctx.captures->push_back(AttentionCapture{group, layer, static_cast<int>(h), stream, w.value(),
                                               queries.labels, keys.labels});
    }
    heads.push_back(ad::matmul(w, ad::slice_cols(v, static_cast<Eigen::Index>(h) * dh, dh)));
  }
  return ad::matmul_nt(ad::concat_cols(heads), ctx.params[prefix + "wo"]);
}

ad::Var feed_forward(const BoundParameters& params, const std::string& prefix, ad::Var x) {
  ad::Var n = ad::layer_norm_rows(x, params[prefix + "ln2.gain"], params[prefix + "ln2.offset"]);
  ad::Var hidden = ad::gelu(ad::add_row(ad::matmul_nt(n, params[prefix + "ff.w1"]), params[prefix + "ff.b1"]));
  return ad::add(x, ad::add_row(ad::matmul_nt(hidden, params[prefix + "ff.w2"]), params[prefix + "ff.b2"]));
}

/// Items a cross layer attends over.
struct CrossItems {
  ad::Var keys;
  ad::Var values;
  TokenSide side;
};

/// Picks each query's top-k items by head-summed logit; ties go to the lower index.
BoolMatrix retrieval_mask(const std::vector<ad::Var>& logits, std::size_t top_k) {
  Matrix total = logits.front().value();
  for (std::size_t h = 1; h < logits.size(); ++h) total += logits[h].value();
  BoolMatrix mask = BoolMatrix::Constant(total.rows(), total.cols(), false);
  const auto n = static_cast<std::size_t>(total.cols());
  const std::size_t keep = std::min(top_k, n);
  std::vector<std::size_t> order(n);
  for (Eigen::Index i = 0; i < total.rows(); ++i) {
    for (std::size_t j = 0; j < n; ++j) order[j] = j;
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(),
                      [&](std::size_t a, std::size_t b) {
                        const double sa = total(i, static_cast<Eigen::Index>(a));
                        const double sb = total(i, static_cast<Eigen::Index>(b));
                        return sa > sb || (sa == sb && a < b);
                      });
    for (std::size_t j = 0; j < keep; ++j) mask(i, static_cast<Eigen::Index>(order[j])) = true;
  }
  return mask;
}

/// Cross-attention sublayer output (before the residual) for LN'd queries.
ad::Var cross_sublayer(AttentionContext& ctx, const std::string& prefix, ad::Var normalized,
                       const TokenSide& queries, const CrossItems& items, std::size_t top_k, int group,
                       int layer) {
  ad::Var q = ad::matmul_nt(normalized, ctx.params[prefix + "wq"]);
  const std::vector<ad::Var> logits =
      journey_logits(ctx.model, ctx.params, ctx.transport, q, items.keys, queries, items.side);
  const BoolMatrix mask = retrieval_mask(logits, top_k);
  return attend_heads(ctx, prefix, logits, mask, items.values, queries, items.side, group, layer, Stream::cross);
}

std::string token_label(const StructuredInstance& inst, std::size_t t) {
  return inst.id + "/" + std::to_string(t) + ":" + inst.tokens[t].slot.str();
}

/// Per-instance readout parameters (instances x head_count * P) from the
/// pooled rows of `x`; `members[i]` lists the rows of instance i.
ad::Var instance_parameters(const Model& model, const BoundParameters& params, ad::Var x,
                            const std::vector<std::vector<Eigen::Index>>& members) {
  const auto n = static_cast<Eigen::Index>(members.size());
  ad::Tape& tape = params.tape();
  ad::Var pooled;
  if (model.config().readout == Readout::mean_pool) {
    Matrix pool = Matrix::Zero(n, x.rows());
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto& rows = members[static_cast<std::size_t>(i)];
      for (Eigen::Index r : rows) pool(i, r) = 1.0 / static_cast<double>(rows.size());
    }
    pooled = ad::matmul(tape.constant(pool), x);
  } else {
    BoolMatrix allowed = BoolMatrix::Constant(n, x.rows(), false);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index r : members[static_cast<std::size_t>(i)]) allowed(i, r) = true;
    ad::Var scores = ad::matmul_nt(x, params["readout.query"]);  // rows x 1
    ad::Var spread = ad::matmul(tape.constant(Matrix::Ones(n, 1)), ad::transpose(scores));
    pooled = ad::matmul(ad::masked_softmax_rows(spread, allowed), x);
  }
  ad::Var hidden = ad::tanh(ad::add_row(ad::matmul_nt(pooled, params["readout.w1"]), params["readout.b1"]));
  return ad::add_row(ad::matmul_nt(hidden, params["readout.w2"]), params["readout.b2"]);
}

struct StreamTokens {
  std::vector<StructuredInstance> instances;
  std::vector<std::size_t> batch_index;  ///< batch position of instances[i]
  std::vector<std::pair<std::size_t, std::size_t>> tokens;  ///< (batch instance, token)
  std::vector<Eigen::Index> token_ids;
};

TokenSide stream_side(const Model& model, std::span<const StructuredInstance> batch, const StreamTokens& s,
                      const LayerGroupConfig& group, bool labels) {
  TokenSide side;
  for (const auto& [inst, t] : s.tokens) {
    const InstanceToken& tok = batch[inst].tokens[t];
    side.keys.push_back(transport_key(model, tok.slot, tok.within_slot_position, static_cast<long>(inst), group));
    side.bias.push_back(bias_slot(model, tok.slot, group));
    if (labels) side.labels.push_back(token_label(batch[inst], t));
  }
  return side;
}

}  // namespace

ad::Var relation_operator(const Model& model, const BoundParameters& params, const std::string& relation,
                          int head) {
  const ModelConfig& c = model.config();
  model.relation_index(relation);
  ad::Var row = ad::slice_rows(params["op.relation." + relation], head, 1);
  return learned_operator(row, c.relation_kind, c.head_dim(), c.low_rank);
}

EncodedItems encode_items(const Model& model, const BoundParameters& params, ad::Var states,
                          std::span<const SlotId> slots, const std::string& prefix) {
  if (prefix.empty()) return EncodedItems{states, states};
  const ModelConfig& c = model.config();
  ad::Var n = ad::layer_norm_rows(states, params[prefix + "lnkv.gain"], params[prefix + "lnkv.offset"]);
  Transport transport(model, params);
  LayerGroupConfig plain;
  plain.positional_transport = true;
  std::vector<TransportKey> keys;
  for (const SlotId& s : slots) keys.push_back(transport_key(model, s, std::nullopt, -1, plain));
  const auto [group, unique] = group_keys(keys);
  std::vector<ad::Var> mats;
  for (const TransportKey& key : unique) {
    std::vector<ad::Var> blocks;
    for (int h = 0; h < c.head_count; ++h) blocks.push_back(transport.forward(key, h));
    mats.push_back(ad::block_diagonal(blocks));
  }
  ad::Var rotated = ad::rowwise_transform(n, group, mats, true);
  return EncodedItems{ad::matmul_nt(rotated, params[prefix + "wk"]), ad::matmul_nt(n, params[prefix + "wv"])};
}

ForwardState forward(const Model& model, const BoundParameters& params,
                     std::span<const StructuredInstance> instances, const Adjacency& adjacency,
                     const ForwardOptions& options) {
  const ModelConfig& c = model.config();
  ad::Tape& tape = params.tape();
  ForwardState state;
  state.locations.resize(instances.size());

  StreamTokens lang, fact;
  std::vector<Eigen::Index> all_ids;
  std::vector<std::vector<Eigen::Index>> members(instances.size());
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const StructuredInstance& inst = instances[i];
    StreamTokens& s = is_language(inst.kind) ? lang : fact;
    s.instances.push_back(inst);
    s.batch_index.push_back(i);
    for (std::size_t t = 0; t < inst.tokens.size(); ++t) {
      const int id = inst.tokens[t].token_id;
      if (id < 0 || id >= c.vocab_size) {
        throw std::out_of_range("forward: token id " + std::to_string(id) + " in '" + inst.id +
                                "' outside vocabulary of " + std::to_string(c.vocab_size));
      }
      state.locations[i].push_back(TokenLocation{is_language(inst.kind) ? Stream::language : Stream::structured,
                                                 static_cast<Eigen::Index>(s.tokens.size())});
      s.tokens.emplace_back(i, t);
      s.token_ids.push_back(id);
      members[i].push_back(static_cast<Eigen::Index>(all_ids.size()));
      all_ids.push_back(id);
    }
  }

  ad::Var embed = params["embed"];
  ad::Var x_lang = lang.tokens.empty() ? tape.constant(Matrix::Zero(0, c.d_model)) : ad::gather_rows(embed, lang.token_ids);
  ad::Var x_fact = fact.tokens.empty() ? tape.constant(Matrix::Zero(0, c.d_model)) : ad::gather_rows(embed, fact.token_ids);

  Transport transport(model, params);
  const bool needs_instances = std::any_of(c.layer_groups.begin(), c.layer_groups.end(), [](const LayerGroupConfig& g) {
    return g.journey_mode == JourneyMode::instance_journey;
  });
  const Repository* repo = options.repository;
  if (model.has_cross_group() && repo && !repo->frozen()) {
    throw RepositoryError("forward: cross-attention needs a frozen repository");
  }
  if (repo && repo->key_dim() != c.d_model) {
    throw DimensionError("forward: repository key dimension " + std::to_string(repo->key_dim()) +
                         " does not match d_model " + std::to_string(c.d_model));
  }
  if (needs_instances && !all_ids.empty()) {
    ad::Var x_all = ad::gather_rows(embed, all_ids);
    std::vector<std::vector<Eigen::Index>> groups = members;
    ad::Var item_rows;
    if (repo && model.has_cross_group()) {
      // Repository instances pool their stored values.
      std::map<std::string, std::vector<Eigen::Index>> by_instance;
      for (std::size_t j = 0; j < repo->size(); ++j) {
        by_instance[repo->item(j).instance].push_back(static_cast<Eigen::Index>(j));
      }
      Matrix values(static_cast<Eigen::Index>(repo->size()), c.d_model);
      for (std::size_t j = 0; j < repo->size(); ++j) values.row(static_cast<Eigen::Index>(j)) = repo->item(j).value.transpose();
      const auto offset = x_all.rows();
      std::vector<ad::Var> parts{x_all, tape.constant(values)};
      x_all = ad::concat_rows(parts);
      for (auto& [_, rows] : by_instance) {
        for (Eigen::Index& r : rows) r += offset;
        groups.push_back(rows);
      }
    }
    transport.set_instance_parameters(instance_parameters(model, params, x_all, groups));
  }

  // Instance rows for repository items, after the batch instances.
  std::map<std::string, long> repo_instance_row;
  if (repo) {
    long next = static_cast<long>(instances.size());
    std::set<std::string> seen;
    for (const RepositoryItem& item : repo->items()) {
      if (seen.insert(item.instance).second) repo_instance_row.emplace(item.instance, 0);
    }
    for (auto& [_, row] : repo_instance_row) row = next++;
  }

  AttentionContext ctx{model, params, transport, options.capture_attention, &state.attention};
  int global_layer = 0;
  bool repository_states_set = false;
  for (std::size_t g = 0; g < c.layer_groups.size(); ++g) {
    const LayerGroupConfig& group = c.layer_groups[g];
    for (int l = 0; l < group.layers; ++l, ++global_layer) {
      const std::string prefix = layer_prefix(g, l);
      if (group.stream == Stream::cross) {
        if (!repository_states_set) {
          state.repository_states = x_fact;
          repository_states_set = true;
        }
        if (lang.tokens.empty()) continue;
        CrossItems items;
        if (repo) {
          if (repo->empty()) continue;
          Matrix keys(static_cast<Eigen::Index>(repo->size()), c.d_model);
          Matrix values(static_cast<Eigen::Index>(repo->size()), repo->value_dim());
          for (std::size_t j = 0; j < repo->size(); ++j) {
            const RepositoryItem& item = repo->item(j);
            keys.row(static_cast<Eigen::Index>(j)) = item.key.transpose();
            values.row(static_cast<Eigen::Index>(j)) = item.value.transpose();
            items.side.keys.push_back(
                transport_key(model, item.slot, std::nullopt, repo_instance_row.at(item.instance), group));
            items.side.bias.push_back(bias_slot(model, item.slot, group));
            if (options.capture_attention) items.side.labels.push_back(item.instance + ":" + item.slot.str());
          }
          items.keys = tape.constant(keys);
          items.values = tape.constant(values);
        } else {
          if (fact.tokens.empty()) continue;
          std::vector<SlotId> slots;
          for (const auto& [inst, t] : fact.tokens) slots.push_back(instances[inst].tokens[t].slot);
          EncodedItems enc = encode_items(model, params, x_fact, slots, prefix);
          items.keys = enc.keys;
          items.values = enc.values;
          items.side = stream_side(model, instances, fact, group, options.capture_attention);
        }
        const TokenSide queries = stream_side(model, instances, lang, group, options.capture_attention);
        ad::Var n = ad::layer_norm_rows(x_lang, params[prefix + "ln1.gain"], params[prefix + "ln1.offset"]);
        ad::Var out = cross_sublayer(ctx, prefix, n, queries, items, static_cast<std::size_t>(c.retrieval_top_k),
                                     static_cast<int>(g), global_layer);
        x_lang = feed_forward(params, prefix, ad::add(x_lang, out));
        continue;
      }

      StreamTokens& s = group.stream == Stream::language ? lang : fact;
      ad::Var& x = group.stream == Stream::language ? x_lang : x_fact;
      if (s.tokens.empty()) continue;
      const TokenSide side = stream_side(model, instances, s, group, options.capture_attention);
      const AttentionMask mask = build_mask(group.level, s.instances, restrict_adjacency(adjacency, s.instances));
      ad::Var n = ad::layer_norm_rows(x, params[prefix + "ln1.gain"], params[prefix + "ln1.offset"]);
      ad::Var q = ad::matmul_nt(n, params[prefix + "wq"]);
      ad::Var k = ad::matmul_nt(n, params[prefix + "wk"]);
      ad::Var v = ad::matmul_nt(n, params[prefix + "wv"]);
      const std::vector<ad::Var> logits = journey_logits(model, params, transport, q, k, side, side);
      ad::Var out = attend_heads(ctx, prefix, logits, mask.allow, v, side, side, static_cast<int>(g), global_layer,
                                 group.stream);
      x = feed_forward(params, prefix, ad::add(x, out));
    }
  }
  if (!repository_states_set) state.repository_states = x_fact;

  auto finish = [&](ad::Var x, const char* stream) {
    if (x.rows() == 0) return x;
    return ad::layer_norm_rows(x, params[std::string("final.") + stream + ".gain"],
                               params[std::string("final.") + stream + ".offset"]);
  };
  state.language = finish(x_lang, "language");
  state.structured = finish(x_fact, "structured");
  return state;
}

ForwardOutput forward(const Model& model, std::span<const StructuredInstance> instances, const Adjacency& adjacency,
                      const ForwardOptions& options) {
  ad::Tape tape;
  BoundParameters params(tape, model.parameters(), false);
  ForwardState state = forward(model, params, instances, adjacency, options);
  return ForwardOutput{state.language.value(), state.structured.value(), std::move(state.locations),
                       std::move(state.attention)};
}

Matrix cross_attend_position_agnostic(const Model& model, const Matrix& hidden, std::span<const CrossQuery> queries,
                                      const Repository& repo, const std::string& prefix, std::size_t top_k) {
  if (!repo.frozen()) throw RepositoryError("cross attention needs a frozen repository");
  if (static_cast<std::size_t>(hidden.rows()) != queries.size()) {
    throw DimensionError("cross attention: " + std::to_string(hidden.rows()) + " hidden rows for " +
                         std::to_string(queries.size()) + " queries");
  }
  if (top_k == 0) throw std::invalid_argument("cross attention: top_k must be at least 1");
  const ModelConfig& c = model.config();
  if (hidden.cols() != c.d_model || repo.key_dim() != c.d_model) {
    throw DimensionError("cross attention: dimensions do not match d_model");
  }
  if (repo.empty()) return Matrix::Zero(hidden.rows(), c.d_model);
  ad::Tape tape;
  BoundParameters params(tape, model.parameters(), false);
  Transport transport(model, params);
  LayerGroupConfig agnostic;
  agnostic.stream = Stream::cross;
  agnostic.positional_transport = false;

  TokenSide qside;
  for (const CrossQuery& q : queries) {
    qside.keys.push_back(transport_key(model, q.slot, std::nullopt, -1, agnostic));
    qside.bias.push_back(bias_slot(model, q.slot, agnostic));
  }
  CrossItems items;
  Matrix keys(static_cast<Eigen::Index>(repo.size()), c.d_model);
  Matrix values(static_cast<Eigen::Index>(repo.size()), repo.value_dim());
  for (std::size_t j = 0; j < repo.size(); ++j) {
    keys.row(static_cast<Eigen::Index>(j)) = repo.item(j).key.transpose();
    values.row(static_cast<Eigen::Index>(j)) = repo.item(j).value.transpose();
    items.side.keys.push_back(transport_key(model, repo.item(j).slot, std::nullopt, -1, agnostic));
    items.side.bias.push_back(bias_slot(model, repo.item(j).slot, agnostic));
  }
  items.keys = tape.constant(keys);
  items.values = tape.constant(values);
  std::vector<AttentionCapture> unused;
  AttentionContext ctx{model, params, transport, false, &unused};
  ad::Var n = ad::layer_norm_rows(tape.constant(hidden), params[prefix + "ln1.gain"], params[prefix + "ln1.offset"]);
  return cross_sublayer(ctx, prefix, n, qside, items, top_k, 0, 0).value();
}

Repository encode_repository(const Model& model, const Corpus& corpus) {
  std::vector<StructuredInstance> facts;
  for (const StructuredInstance& inst : corpus.instances)
    if (!is_language(inst.kind)) facts.push_back(inst);
  const int d = model.config().d_model;
  Repository repo(d, d);
  if (facts.empty()) return repo;
  ad::Tape tape;
  BoundParameters params(tape, model.parameters(), false);
  ForwardState state = forward(model, params, facts, corpus.adjacency);
  std::vector<SlotId> slots;
  for (const StructuredInstance& inst : facts)
    for (const InstanceToken& tok : inst.tokens) slots.push_back(tok.slot);
  const EncodedItems enc = encode_items(model, params, state.repository_states, slots, model.repository_layer());
  Eigen::Index row = 0;
  for (const StructuredInstance& inst : facts) {
    for (const InstanceToken& tok : inst.tokens) {
      RepositoryItem item;
      item.key = enc.keys.value().row(row).transpose();
      item.value = enc.values.value().row(row).transpose();
      item.slot = tok.slot;
      item.instance = inst.id;
      item.token = corpus.vocabulary.token(tok.token_id);
      item.provenance = inst.provenance;
      repo.add(std::move(item));
      ++row;
    }
  }
  return repo;
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  BinaryWriter w;
  w.bytes(kCheckpointMagic, 8);
  w.u64(model.config().hash());
  w.str(model.config().canonical());
  w.u64(model.vocabulary().slots.size());
  for (const SlotId& s : model.vocabulary().slots) w.str(s.str());
  w.u64(model.vocabulary().relations.size());
  for (const std::string& r : model.vocabulary().relations) w.str(r);
  const auto layout = tensor_layout(model.config(), model.vocabulary());
  w.u64(layout.size());
  for (const auto& [name, shape] : layout) {
    const Matrix& m = model.tensor(name);
    w.str(name);
    w.u64(static_cast<std::uint64_t>(m.rows()));
    w.u64(static_cast<std::uint64_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.size(); ++i) w.f64(m.data()[i]);
  }
  write_file_bytes(path.string(), w.buffer());
}

namespace {

Model read_checkpoint(const std::filesystem::path& path, const ModelConfig* expected) {
  BinaryReader r(read_file_bytes(path.string()));
  char magic[8];
  r.bytes(magic, 8, "magic");
  if (std::memcmp(magic, kCheckpointMagic, 8) != 0) {
    if (std::memcmp(magic, kCheckpointMagic, 4) == 0) {
      throw CheckpointError("checkpoint version mismatch: found '" + std::string(magic, 8) + "', expected '" +
                            kCheckpointMagic + "'");
    }
    throw CheckpointError("not a checkpoint file (bad magic bytes)");
  }
  const std::uint64_t hash = r.u64("config hash");
  const std::string text = r.str("config text");
  if (expected && hash != expected->hash()) {
    throw CheckpointError("checkpoint config hash " + std::to_string(hash) + " does not match expected " +
                          std::to_string(expected->hash()));
  }
  KeyValueConfig kv = KeyValueConfig::parse_string(text, path.string());
  ModelConfig config = read_model_config(kv);
  kv.reject_unknown();
  if (config.hash() != hash) throw CheckpointError("checkpoint config text does not match its hash");
  ModelVocabulary vocab;
  const std::uint64_t slots = r.u64("slot count");
  r.expect_available(slots * 8, "slot names");
  for (std::uint64_t i = 0; i < slots; ++i) vocab.slots.push_back(SlotId::parse(r.str("slot name")));
  const std::uint64_t relations = r.u64("relation count");
  r.expect_available(relations * 8, "relation names");
  for (std::uint64_t i = 0; i < relations; ++i) vocab.relations.push_back(r.str("relation name"));
  const std::uint64_t count = r.u64("tensor count");
  r.expect_available(count * 24, "tensor table");
  TensorMap tensors;
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::string name = r.str("tensor name");
    const std::uint64_t rows = r.u64("tensor rows");
    const std::uint64_t cols = r.u64("tensor cols");
    if (cols != 0 && rows > (std::uint64_t{1} << 40) / cols) throw CheckpointError("tensor '" + name + "' is implausibly large");
    r.expect_available(rows * cols * 8, "tensor data");
    Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = r.f64("tensor value");
    if (!tensors.emplace(name, std::move(m)).second) throw CheckpointError("duplicate tensor '" + name + "'");
  }
  if (!r.at_end()) {
    throw CheckpointError("trailing bytes after tensor table at byte offset " + std::to_string(r.offset()));
  }
  try {
    return Model(std::move(config), std::move(vocab), std::move(tensors));
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("checkpoint does not fit its config: ") + e.what());
  }
}

}  // namespace

Model load_checkpoint(const std::filesystem::path& path) { return read_checkpoint(path, nullptr); }

Model load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected) {
  return read_checkpoint(path, &expected);
}

}  // namespace jkv
