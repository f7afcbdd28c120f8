#include "journeykv/repository.hpp"

#include "journeykv/binary_io.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>
#include <limits>
#include <numeric>
#include <random>

namespace jkv {

std::vector<unsigned char> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_bytes(const std::string& path, const std::vector<unsigned char>& data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write '" + path + "'");
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!out) throw FormatError("write failed for '" + path + "'");
}

Repository::Repository(int key_dim, int value_dim) : key_dim_(key_dim), value_dim_(value_dim) {
  if (key_dim <= 0 || value_dim <= 0) throw DimensionError("Repository: dimensions must be positive");
}

void Repository::add(RepositoryItem item) {
  if (item.key.size() != key_dim_ || item.value.size() != value_dim_) {
    throw DimensionError("Repository::add: item with key " + std::to_string(item.key.size()) +
                         " / value " + std::to_string(item.value.size()) + " into repository " +
                         std::to_string(key_dim_) + " / " + std::to_string(value_dim_));
  }
  if (!all_finite(item.key) || !all_finite(item.value)) {
    throw NumericError("Repository::add: non-finite item for instance '" + item.instance + "'");
  }
  index_.reset();
  items_.push_back(std::move(item));
}

void Repository::add(std::vector<RepositoryItem> items) {
  for (RepositoryItem& item : items) add(std::move(item));
}

void Repository::freeze(InvertedIndex index) {
  std::size_t covered = 0;
  std::vector<bool> seen(items_.size(), false);
  if (index.centroids.rows() != static_cast<Eigen::Index>(index.lists.size()) ||
      index.centroids.cols() != key_dim_) {
    throw RepositoryError("freeze: centroid matrix does not match list count or key dimension");
  }
  for (const auto& list : index.lists) {
    for (std::size_t id : list) {
      if (id >= items_.size() || seen[id]) throw RepositoryError("freeze: index does not partition the items");
      seen[id] = true;
      ++covered;
    }
  }
  if (covered != items_.size()) throw RepositoryError("freeze: index misses items");
  index_ = std::move(index);
}

std::vector<RepositoryItem> encode_instance(const StructuredInstance& instance,
                                            const Matrix& embeddings, const Vocabulary& vocab,
                                            const Matrix& key_weight, const Matrix& value_weight,
                                            const OperatorTable& table) {
  const Eigen::Index d = embeddings.cols();
  if (table.dim() != d || key_weight.cols() != d || value_weight.cols() != d) {
    throw DimensionError("encode_instance: embeddings of width " + std::to_string(d) + ", W_k " +
                         shape_string(key_weight) + ", W_v " + shape_string(value_weight) +
                         ", operators of dimension " + std::to_string(table.dim()));
  }
  std::vector<RepositoryItem> items;
  for (const InstanceToken& tok : instance.tokens) {
    if (tok.token_id < 0 || tok.token_id >= embeddings.rows()) {
      throw std::out_of_range("encode_instance: token id " + std::to_string(tok.token_id) +
                              " has no embedding");
    }
    const Vector x = embeddings.row(tok.token_id).transpose();
    Matrix transport = table.slot(tok.slot).matrix();
    if (tok.within_slot_position) transport = matmul(transport, table.within_slot(*tok.within_slot_position).matrix());
    RepositoryItem item;
    item.key = key_weight * (transport * x);
    item.value = value_weight * x;
    item.slot = tok.slot;
    item.instance = instance.id;
    item.token = tok.token_id < vocab.size() ? vocab.token(tok.token_id) : std::to_string(tok.token_id);
    item.provenance = instance.provenance;
    items.push_back(std::move(item));
  }
  return items;
}

std::vector<ScoredItem> rank_top_k(std::span<const double> scores, std::span<const std::size_t> ids,
                                   std::size_t top_k) {
  std::vector<ScoredItem> all;
  all.reserve(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) all.push_back({ids[i], scores[i]});
  const std::size_t keep = std::min(top_k, all.size());
  auto better = [](const ScoredItem& a, const ScoredItem& b) {
    return a.score > b.score || (a.score == b.score && a.index < b.index);
  };
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(keep), all.end(), better);
  all.resize(keep);
  return all;
}

namespace {

void check_query(const Repository& repo, const Vector& q, std::size_t top_k) {
  if (top_k == 0) throw std::invalid_argument("query: top_k must be at least 1");
  if (q.size() != repo.key_dim()) {
    throw DimensionError("query: vector of size " + std::to_string(q.size()) +
                         " against keys of size " + std::to_string(repo.key_dim()));
  }
}

std::vector<ScoredItem> score_subset(const Repository& repo, const Vector& q,
                                     std::vector<std::size_t> ids, std::size_t top_k) {
  std::sort(ids.begin(), ids.end());
  std::vector<double> scores(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) scores[i] = q.dot(repo.item(ids[i]).key);
  return rank_top_k(scores, ids, top_k);
}

}  // namespace

std::vector<ScoredItem> query_exact(const Repository& repo, const Vector& q, std::size_t top_k,
                                    const ItemFilter& filter) {
  check_query(repo, q, top_k);
  std::vector<std::size_t> ids;
  for (std::size_t i = 0; i < repo.size(); ++i) {
    if (!filter || filter(repo.item(i))) ids.push_back(i);
  }
  return score_subset(repo, q, std::move(ids), top_k);
}

Repository build_index(Repository repo, const IndexOptions& options) {
  const std::size_t n = repo.size();
  const std::size_t c = options.centroids;
  if (n == 0) throw RepositoryError("build_index: repository is empty");
  if (c == 0 || c > n) {
    throw RepositoryError("build_index: " + std::to_string(c) + " centroids for " +
                          std::to_string(n) + " items");
  }
  const int d = repo.key_dim();
  Matrix keys(static_cast<Eigen::Index>(n), d);
  for (std::size_t i = 0; i < n; ++i) keys.row(static_cast<Eigen::Index>(i)) = repo.item(i).key.transpose();

  std::mt19937_64 rng(options.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Matrix centroids(static_cast<Eigen::Index>(c), d);
  std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
  std::vector<bool> chosen(n, false);
  std::size_t first = static_cast<std::size_t>(unit(rng) * static_cast<double>(n));
  first = std::min(first, n - 1);
  for (std::size_t ci = 0; ci < c; ++ci) {
    std::size_t pick = first;
    if (ci > 0) {
      double total = 0.0;
      for (std::size_t i = 0; i < n; ++i) total += chosen[i] ? 0.0 : nearest[i];
      if (total <= 0.0) {
        pick = static_cast<std::size_t>(std::find(chosen.begin(), chosen.end(), false) - chosen.begin());
      } else {
        double target = unit(rng) * total;
        pick = n;
        for (std::size_t i = 0; i < n; ++i) {
          if (chosen[i]) continue;
          pick = i;
          target -= nearest[i];
          if (target < 0.0) break;
        }
      }
    }
    chosen[pick] = true;
    centroids.row(static_cast<Eigen::Index>(ci)) = keys.row(static_cast<Eigen::Index>(pick));
    for (std::size_t i = 0; i < n; ++i) {
      const double dist = (keys.row(static_cast<Eigen::Index>(i)) - centroids.row(static_cast<Eigen::Index>(ci))).squaredNorm();
      nearest[i] = std::min(nearest[i], dist);
    }
  }

  std::vector<std::size_t> assignment(n, 0);
  auto assign = [&] {
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t ci = 0; ci < c; ++ci) {
        const double dist = (keys.row(static_cast<Eigen::Index>(i)) - centroids.row(static_cast<Eigen::Index>(ci))).squaredNorm();
        if (dist < best) {
          best = dist;
          assignment[i] = ci;
        }
      }
    }
  };
  for (int iter = 0; iter < options.iterations; ++iter) {
    assign();
    Matrix sums = Matrix::Zero(static_cast<Eigen::Index>(c), d);
    std::vector<std::size_t> counts(c, 0);
    for (std::size_t i = 0; i < n; ++i) {
      sums.row(static_cast<Eigen::Index>(assignment[i])) += keys.row(static_cast<Eigen::Index>(i));
      ++counts[assignment[i]];
    }
    for (std::size_t ci = 0; ci < c; ++ci) {
      // An empty cluster keeps its previous centroid.
      if (counts[ci] > 0) centroids.row(static_cast<Eigen::Index>(ci)) = sums.row(static_cast<Eigen::Index>(ci)) / static_cast<double>(counts[ci]);
    }
  }
  assign();

  InvertedIndex index;
  index.centroids = std::move(centroids);
  index.lists.resize(c);
  for (std::size_t i = 0; i < n; ++i) index.lists[assignment[i]].push_back(i);
  repo.freeze(std::move(index));
  return repo;
}

std::vector<ScoredItem> query_approx(const Repository& repo, const Vector& q, std::size_t top_k,
                                     std::size_t probes) {
  if (!repo.frozen()) throw RepositoryError("query_approx: repository is not frozen; use exact search");
  check_query(repo, q, top_k);
  if (probes == 0) throw std::invalid_argument("query_approx: probes must be at least 1");
  const InvertedIndex& index = *repo.index();
  const std::size_t c = index.lists.size();
  const Vector centroid_scores = index.centroids * q;
  std::vector<std::size_t> order(c);
  std::iota(order.begin(), order.end(), 0);
  const std::size_t scan = std::min(probes, c);
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(scan), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      const double sa = centroid_scores[static_cast<Eigen::Index>(a)];
                      const double sb = centroid_scores[static_cast<Eigen::Index>(b)];
                      return sa > sb || (sa == sb && a < b);
                    });
  std::vector<std::size_t> ids;
  for (std::size_t p = 0; p < scan; ++p) {
    const auto& list = index.lists[order[p]];
    ids.insert(ids.end(), list.begin(), list.end());
  }
  return score_subset(repo, q, std::move(ids), top_k);
}

double recall_at_k(std::span<const ScoredItem> exact, std::span<const ScoredItem> approx) {
  if (exact.empty()) return 1.0;
  std::size_t hit = 0;
  for (const ScoredItem& e : exact) {
    for (const ScoredItem& a : approx) {
      if (a.index == e.index) {
        ++hit;
        break;
      }
    }
  }
  return static_cast<double>(hit) / static_cast<double>(exact.size());
}

void persist(const Repository& repo, const std::filesystem::path& path) {
  BinaryWriter w;
  w.bytes(kRepositoryMagic, 8);
  w.u64(static_cast<std::uint64_t>(repo.key_dim()));
  w.u64(static_cast<std::uint64_t>(repo.value_dim()));
  w.u64(repo.size());
  w.u64(repo.frozen() ? repo.index()->lists.size() : 0);
  for (const RepositoryItem& item : repo.items()) {
    for (Eigen::Index i = 0; i < item.key.size(); ++i) w.f64(item.key[i]);
    for (Eigen::Index i = 0; i < item.value.size(); ++i) w.f64(item.value[i]);
    w.str(item.slot.str());
    w.str(item.instance);
    w.str(item.token);
    w.str(item.provenance);
  }
  if (repo.frozen()) {
    const InvertedIndex& index = *repo.index();
    for (Eigen::Index r = 0; r < index.centroids.rows(); ++r)
      for (Eigen::Index c = 0; c < index.centroids.cols(); ++c) w.f64(index.centroids(r, c));
    for (const auto& list : index.lists) {
      w.u64(list.size());
      for (std::size_t id : list) w.u64(id);
    }
  }
  write_file_bytes(path.string(), w.buffer());
}

Repository load_repository(const std::filesystem::path& path) {
  BinaryReader r(read_file_bytes(path.string()));
  char magic[8];
  r.bytes(magic, 8, "magic");
  if (std::memcmp(magic, kRepositoryMagic, 8) != 0) {
    if (std::memcmp(magic, kRepositoryMagic, 4) == 0) {
      throw FormatError("repository version mismatch at byte offset 4: found '" +
                        std::string(magic + 4, 4) + "', expected '" + std::string(kRepositoryMagic + 4, 4) + "'");
    }
    throw FormatError("not a repository snapshot (bad magic at byte offset 0), unsupported version");
  }
  const std::uint64_t key_dim = r.u64("key dimension");
  const std::uint64_t value_dim = r.u64("value dimension");
  const std::uint64_t count = r.u64("item count");
  const std::uint64_t centroids = r.u64("centroid count");
  if (key_dim == 0 || value_dim == 0 || key_dim > (1u << 20) || value_dim > (1u << 20)) {
    throw FormatError("implausible dimensions at byte offset 8");
  }
  r.expect_available(count * 8 * (key_dim + value_dim), "items");
  Repository repo(static_cast<int>(key_dim), static_cast<int>(value_dim));
  for (std::uint64_t n = 0; n < count; ++n) {
    RepositoryItem item;
    item.key.resize(static_cast<Eigen::Index>(key_dim));
    item.value.resize(static_cast<Eigen::Index>(value_dim));
    for (auto& v : item.key) v = r.f64("item key");
    for (auto& v : item.value) v = r.f64("item value");
    item.slot = SlotId::parse(r.str("item slot"));
    item.instance = r.str("item instance");
    item.token = r.str("item token");
    item.provenance = r.str("item provenance");
    repo.add(std::move(item));
  }
  if (centroids > 0) {
    r.expect_available(centroids * 8 * key_dim, "centroids");
    InvertedIndex index;
    index.centroids.resize(static_cast<Eigen::Index>(centroids), static_cast<Eigen::Index>(key_dim));
    for (Eigen::Index i = 0; i < index.centroids.rows(); ++i)
      for (Eigen::Index j = 0; j < index.centroids.cols(); ++j) index.centroids(i, j) = r.f64("centroid");
    index.lists.resize(centroids);
    for (auto& list : index.lists) {
      const std::uint64_t len = r.u64("inverted list length");
      r.expect_available(len * 8, "inverted list");
      list.resize(len);
      for (auto& id : list) id = r.u64("inverted list entry");
    }
    const std::size_t offset = r.offset();
    try {
      repo.freeze(std::move(index));
    } catch (const RepositoryError& e) {
      throw FormatError("inconsistent index ending at byte offset " + std::to_string(offset) + ": " + e.what());
    }
  }
  if (!r.at_end()) throw FormatError("trailing bytes after byte offset " + std::to_string(r.offset()));
  return repo;
}

}  // namespace jkv
