#ifndef JKV_TESTS_SUPPORT_HPP
#define JKV_TESTS_SUPPORT_HPP

#include "journeykv/operators.hpp"
#include "journeykv/schema.hpp"

#include <filesystem>
#include <numbers>
#include <random>
#include <unistd.h>
#include <string>
#include <vector>

namespace jkv::test {

inline Vector gaussian(int n, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  Vector v(n);
  for (int i = 0; i < n; ++i) v[i] = normal(rng);
  return v;
}

inline Matrix gaussian(int rows, int cols, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
  return m;
}

inline Vector uniform(int n, double lo, double hi, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(lo, hi);
  Vector v(n);
  for (int i = 0; i < n; ++i) v[i] = u(rng);
  return v;
}

inline int uniform_int(int lo, int hi, std::mt19937_64& rng) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

inline RoleOperator random_operator(OperatorKind kind, int dim, std::mt19937_64& rng) {
  switch (kind) {
    case OperatorKind::rotation:
      return RoleOperator::rotation(uniform(dim / 2, -std::numbers::pi, std::numbers::pi, rng), 1.0);
    case OperatorKind::diagonal:
      return RoleOperator::diagonal(uniform(dim, -1.0, 1.0, rng));
    case OperatorKind::low_rank:
      return RoleOperator::low_rank(gaussian(dim, 2, rng, 0.4), gaussian(dim, 2, rng, 0.4));
  }
  return RoleOperator::identity(dim);
}

/// Small mixed corpus: triples, n-ary facts and sentences over a shared
/// entity pool, at most `max_instances` instances.
inline Corpus random_corpus(std::mt19937_64& rng, int max_instances = 10) {
  static const std::vector<std::string> entities{"ann", "bob", "cat", "dan", "eve", "fay"};
  static const std::vector<std::string> relations{"likes", "knows", "owns"};
  static const std::vector<std::string> fillers{"the", "a", "ran", "saw", "big"};
  std::vector<Record> records;
  int instances = 0;
  auto pick = [&](const std::vector<std::string>& pool) { return pool[static_cast<std::size_t>(uniform_int(0, static_cast<int>(pool.size()) - 1, rng))]; };
  while (true) {
    const int kind = uniform_int(0, 2, rng);
    const int cost = kind == 2 ? 2 : 1;
    if (instances + cost > max_instances) break;
    if (kind == 0) {
      records.emplace_back(TripleRecord{pick(entities), pick(relations), pick(entities), "test"});
    } else if (kind == 1) {
      NaryRecord n;
      n.predicate = "meeting";
      n.args = {{"AGENT", pick(entities)}, {"PATIENT", pick(entities)}, {"PLACE", pick(fillers)}};
      n.provenance = "test";
      records.emplace_back(n);
    } else {
      SentenceRecord s;
      const int len = uniform_int(2, 5, rng);
      for (int i = 0; i < len; ++i) {
        const bool entity = uniform_int(0, 1, rng) == 1;
        s.tokens.push_back(entity ? pick(entities) : pick(fillers));
        s.pos.push_back(entity ? "NOUN" : (i % 2 ? "VERB" : "DET"));
      }
      records.emplace_back(s);
    }
    instances += cost;
    if (uniform_int(0, 9, rng) == 0) break;
  }
  if (records.empty()) records.emplace_back(TripleRecord{"ann", "likes", "bob", "test"});
  return build_corpus(std::move(records));
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("jkv_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace jkv::test

#endif  // JKV_TESTS_SUPPORT_HPP
