#pragma once

// Non-parametric retriever: question embeddings and exact maximum inner
// product search over unit-norm rows.

#include "mwp/corpus.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace mwp::memory {

using Vector = Eigen::VectorXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Token → dense vector. Unknown tokens map to the zero vector.
class Embedder {
public:
  Embedder(std::vector<std::string> tokens, RowMatrix vectors, std::string backend);

  int dim() const noexcept { return static_cast<int>(vectors_.cols()); }
  std::size_t vocabulary_size() const noexcept { return tokens_.size(); }
  const std::string& backend() const noexcept { return backend_; }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }
  const RowMatrix& vectors() const noexcept { return vectors_; }

  Vector token_vector(std::string_view token) const;

  /// Layout: magic "MWPEMB", u32 version, u32 dim, u32 token count, then per
  /// token (u32 byte length, UTF-8 bytes), backend string, then count×dim f64
  /// row-major.
  void save(const std::filesystem::path& path) const;
  static Embedder load(const std::filesystem::path& path);

private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, Eigen::Index> rows_;
  RowMatrix vectors_;
  std::string backend_;
};

/// PPMI over symmetric-window co-occurrence of question tokens, factored by a
/// rank-`dim` SVD; token vectors are U·sqrt(S). The factorization is exact, so
/// `seed` does not change the result. Throws when `dim` exceeds the number of
/// distinct tokens.
Embedder fit_embedder(const Dataset& train, int dim = 32, std::uint64_t seed = 0, int window = 5);

struct QuestionEmbedding {
  Vector vector;          // unit norm
  bool fallback = false;  // mean was zero; `vector` is the first basis vector
};

/// Mean of token vectors (unknowns count as zeros), L2 normalized.
QuestionEmbedding embed_question(const Embedder& e, std::span<const std::string> tokens);

struct RetrievalResult {
  std::string id;
  std::size_t row = 0;
  double score = 0.0;        // inner product with the query
  double probability = 0.0;  // softmax of scores over the returned set
};

struct RetrievalSet {
  std::vector<RetrievalResult> items;  // rank order, scores non-increasing
  bool truncated = false;              // fewer rows available than requested
};

/// Immutable flat index of unit-norm question embeddings.
class MemoryIndex {
public:
  MemoryIndex(std::vector<std::string> ids, RowMatrix rows, std::shared_ptr<const Dataset> store = nullptr);

  int dim() const noexcept { return static_cast<int>(rows_.cols()); }
  std::size_t size() const noexcept { return ids_.size(); }
  const std::vector<std::string>& ids() const noexcept { return ids_; }
  const RowMatrix& rows() const noexcept { return rows_; }

  /// Dataset the rows were built from (may be null for a bare index).
  const Dataset* store() const noexcept { return store_.get(); }
  std::shared_ptr<const Dataset> shared_store() const noexcept { return store_; }
  const Problem& problem(const RetrievalResult& r) const;

  /// Exact top-`k` by inner product over rows whose id is not excluded. Ties
  /// go to the smaller id. `query` must be unit norm.
  RetrievalSet search(const Vector& query, std::size_t k,
                      const std::unordered_set<std::string>& exclude = {}) const;

  /// Layout: magic "MWPIDX", u32 version, u32 dim, u64 rows, then per row
  /// (u32 byte length, id bytes), then rows×dim f64 row-major.
  void save(const std::filesystem::path& path) const;
  static MemoryIndex load(const std::filesystem::path& path, std::shared_ptr<const Dataset> store = nullptr);

private:
  std::vector<std::string> ids_;
  RowMatrix rows_;
  std::shared_ptr<const Dataset> store_;
};

MemoryIndex build_index(const Embedder& e, std::shared_ptr<const Dataset> ds);

}  // namespace mwp::memory
