#ifndef JOURNEYKV_REPOSITORY_HPP
#define JOURNEYKV_REPOSITORY_HPP

#include "journeykv/numerics.hpp"
#include "journeykv/operators.hpp"
#include "journeykv/schema.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace jkv {

/// Stored tuple (k_j, v_j, s(j), e(j)) plus the surface token and provenance.
struct RepositoryItem {
  Vector key;
  Vector value;
  SlotId slot;
  std::string instance;
  std::string token;
  std::string provenance;

  bool operator==(const RepositoryItem&) const = default;
};

/// Coarse quantizer: centroids over keys with one inverted list per centroid.
struct InvertedIndex {
  Matrix centroids;  ///< c x key_dim
  std::vector<std::vector<std::size_t>> lists;

  bool operator==(const InvertedIndex&) const = default;
};

class RepositoryError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Append-only key-value store, kept outside the language model. Freezing
/// builds the approximate index; adding to a frozen repository unfreezes it
/// and drops the index until the next build.
class Repository {
 public:
  Repository(int key_dim, int value_dim);

  void add(RepositoryItem item);
  void add(std::vector<RepositoryItem> items);

  int key_dim() const { return key_dim_; }
  int value_dim() const { return value_dim_; }
  std::size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }
  bool frozen() const { return index_.has_value(); }
  const std::vector<RepositoryItem>& items() const { return items_; }
  const RepositoryItem& item(std::size_t i) const { return items_.at(i); }
  const std::optional<InvertedIndex>& index() const { return index_; }

  /// Installs an index covering exactly the current items.
  void freeze(InvertedIndex index);

  bool operator==(const Repository&) const = default;

 private:
  int key_dim_;
  int value_dim_;
  std::vector<RepositoryItem> items_;
  std::optional<InvertedIndex> index_;
};

/// k_j = W_k R_{s(j)} x_j and v_j = W_v x_j for every token of `instance`.
/// `embeddings` holds one row per token id.
std::vector<RepositoryItem> encode_instance(const StructuredInstance& instance,
                                            const Matrix& embeddings, const Vocabulary& vocab,
                                            const Matrix& key_weight, const Matrix& value_weight,
                                            const OperatorTable& table);

struct ScoredItem {
  std::size_t index = 0;
  double score = 0.0;
  bool operator==(const ScoredItem&) const = default;
};

using ItemFilter = std::function<bool(const RepositoryItem&)>;

/// Top-k (score descending, ties by insertion order) over precomputed scores.
std::vector<ScoredItem> rank_top_k(std::span<const double> scores, std::span<const std::size_t> ids,
                                   std::size_t top_k);

/// Exact inner-product search. The filter runs before ranking.
std::vector<ScoredItem> query_exact(const Repository& repo, const Vector& q, std::size_t top_k,
                                    const ItemFilter& filter = {});

struct IndexOptions {
  std::size_t centroids = 1;
  int iterations = 25;
  std::uint64_t seed = 0;
};

/// k-means (k-means++ seeding, fixed iteration count) over keys; returns a frozen copy.
Repository build_index(Repository repo, const IndexOptions& options);

/// Scans the `probes` inverted lists whose centroids score highest against q.
std::vector<ScoredItem> query_approx(const Repository& repo, const Vector& q, std::size_t top_k,
                                     std::size_t probes);

/// Fraction of the exact top-k also returned by the approximate search.
double recall_at_k(std::span<const ScoredItem> exact, std::span<const ScoredItem> approx);

inline constexpr char kRepositoryMagic[9] = "JRKV0001";

void persist(const Repository& repo, const std::filesystem::path& path);
Repository load_repository(const std::filesystem::path& path);

}  // namespace jkv

#endif  // JOURNEYKV_REPOSITORY_HPP
