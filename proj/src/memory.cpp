#include "mwp/memory.hpp"

#include "mwp/binary_io.hpp"
#include "mwp/error.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

namespace mwp::memory {

namespace {
constexpr std::uint32_t kEmbedderVersion = 1;
constexpr std::uint32_t kIndexVersion = 1;
}  // namespace

Embedder::Embedder(std::vector<std::string> tokens, RowMatrix vectors, std::string backend)
    : tokens_(std::move(tokens)), vectors_(std::move(vectors)), backend_(std::move(backend)) {
  if (static_cast<Eigen::Index>(tokens_.size()) != vectors_.rows()) {
    throw DataError("embedder token count does not match vector rows");
  }
  for (std::size_t i = 0; i < tokens_.size(); ++i) rows_.emplace(tokens_[i], static_cast<Eigen::Index>(i));
}

Vector Embedder::token_vector(std::string_view token) const {
  const auto it = rows_.find(std::string(token));
  if (it == rows_.end()) return Vector::Zero(dim());
  return vectors_.row(it->second).transpose();
}

void Embedder::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  io::write_magic(out, "MWPEMB");
  io::write_pod<std::uint32_t>(out, kEmbedderVersion);
  io::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(dim()));
  io::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(tokens_.size()));
  for (const auto& t : tokens_) io::write_string(out, t);
  io::write_string(out, backend_);
  io::write_doubles(out, {vectors_.data(), static_cast<std::size_t>(vectors_.size())});
  if (!out) throw DataError("write error on " + path.string());
}

Embedder Embedder::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  io::expect_magic(in, "MWPEMB", "embedder");
  if (io::read_pod<std::uint32_t>(in) != kEmbedderVersion) throw DataError("unsupported embedder version");
  const auto dim = io::read_pod<std::uint32_t>(in);
  const auto count = io::read_pod<std::uint32_t>(in);
  std::vector<std::string> tokens(count);
  for (auto& t : tokens) t = io::read_string(in);
  std::string backend = io::read_string(in);
  RowMatrix vectors(count, dim);
  io::read_doubles(in, {vectors.data(), static_cast<std::size_t>(vectors.size())});
  return Embedder(std::move(tokens), std::move(vectors), std::move(backend));
}

Embedder fit_embedder(const Dataset& train, int dim, std::uint64_t /*seed*/, int window) {
  if (train.empty()) throw DataError("cannot fit an embedder on an empty dataset");
  if (dim < 1) throw UsageError("embedding dimension must be positive");
  std::map<std::string, Eigen::Index> index;
  for (const auto& p : train) {
    for (const auto& t : p.question) index.emplace(t, 0);
  }
  std::vector<std::string> tokens;
  tokens.reserve(index.size());
  for (auto& [t, i] : index) {
    i = static_cast<Eigen::Index>(tokens.size());
    tokens.push_back(t);
  }
  const auto v = static_cast<Eigen::Index>(tokens.size());
  if (dim > v) {
    throw DataError("embedding dimension " + std::to_string(dim) + " exceeds vocabulary size " + std::to_string(v));
  }

  Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(v, v);
  for (const auto& p : train) {
    const auto n = static_cast<int>(p.question.size());
    for (int i = 0; i < n; ++i) {
      const auto a = index.at(p.question[static_cast<std::size_t>(i)]);
      for (int j = std::max(0, i - window); j <= std::min(n - 1, i + window); ++j) {
        if (j == i) continue;
        counts(a, index.at(p.question[static_cast<std::size_t>(j)])) += 1.0;
      }
    }
  }
  const Eigen::VectorXd marginal = counts.rowwise().sum();
  const double total = marginal.sum();
  Eigen::MatrixXd ppmi = Eigen::MatrixXd::Zero(v, v);
  if (total > 0) {
    for (Eigen::Index i = 0; i < v; ++i) {
      for (Eigen::Index j = 0; j < v; ++j) {
        const double c = counts(i, j);
        if (c <= 0) continue;
        ppmi(i, j) = std::max(0.0, std::log(c * total / (marginal(i) * marginal(j))));
      }
    }
  }

  Eigen::BDCSVD<Eigen::MatrixXd> svd(ppmi, Eigen::ComputeThinV);
  const Eigen::MatrixXd right = svd.matrixV().leftCols(dim);
  const Eigen::VectorXd s = svd.singularValues().head(dim);
  // Rows of A·V·S^{-1/2} equal U·S^{1/2}, and identical co-occurrence rows map
  // to identical vectors.
  Eigen::VectorXd inv_sqrt(dim);
  for (int k = 0; k < dim; ++k) inv_sqrt(k) = s(k) > 1e-12 ? 1.0 / std::sqrt(s(k)) : 0.0;
  RowMatrix vectors = (ppmi * right) * inv_sqrt.asDiagonal();
  return Embedder(std::move(tokens), std::move(vectors), "ppmi-svd");
}

QuestionEmbedding embed_question(const Embedder& e, std::span<const std::string> tokens) {
  if (tokens.empty()) throw DataError("cannot embed an empty question");
  Vector mean = Vector::Zero(e.dim());
  for (const auto& t : tokens) mean += e.token_vector(t);
  mean /= static_cast<double>(tokens.size());
  const double norm = mean.norm();
  if (norm == 0.0 || !std::isfinite(norm)) {
    Vector basis = Vector::Zero(e.dim());
    basis(0) = 1.0;
    return {std::move(basis), true};
  }
  return {mean / norm, false};
}

MemoryIndex::MemoryIndex(std::vector<std::string> ids, RowMatrix rows, std::shared_ptr<const Dataset> store)
    : ids_(std::move(ids)), rows_(std::move(rows)), store_(std::move(store)) {
  if (static_cast<Eigen::Index>(ids_.size()) != rows_.rows()) throw DataError("index id count does not match rows");
  for (Eigen::Index r = 0; r < rows_.rows(); ++r) {
    if (std::abs(rows_.row(r).norm() - 1.0) > 1e-6) {
      throw DataError("index row " + ids_[static_cast<std::size_t>(r)] + " is not unit norm");
    }
  }
}

const Problem& MemoryIndex::problem(const RetrievalResult& r) const {
  if (!store_) throw Error("memory index has no problem store");
  const auto at = store_->find(r.id);
  if (at < 0) throw DataError("retrieved id " + r.id + " missing from the problem store");
  return (*store_)[static_cast<std::size_t>(at)];
}

RetrievalSet MemoryIndex::search(const Vector& query, std::size_t k,
                                 const std::unordered_set<std::string>& exclude) const {
  if (query.size() != rows_.cols()) throw DataError("query dimension does not match the index");
  if (std::abs(query.norm() - 1.0) > 1e-6) throw DataError("query must be unit norm");
  RetrievalSet out;
  if (k == 0) return out;
  const Vector scores = rows_ * query;
  std::vector<std::size_t> candidates;
  candidates.reserve(ids_.size());
  for (std::size_t r = 0; r < ids_.size(); ++r) {
    if (exclude.empty() || !exclude.count(ids_[r])) candidates.push_back(r);
  }
  if (candidates.size() < k) {
    out.truncated = true;
    k = candidates.size();
  }
  const auto better = [&](std::size_t a, std::size_t b) {
    const double sa = scores(static_cast<Eigen::Index>(a));
    const double sb = scores(static_cast<Eigen::Index>(b));
    if (sa != sb) return sa > sb;
    return ids_[a] < ids_[b];
  };
  std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(k), candidates.end(), better);
  if (k == 0) return out;
  const double top = scores(static_cast<Eigen::Index>(candidates.front()));
  double z = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    const auto r = candidates[i];
    const double s = scores(static_cast<Eigen::Index>(r));
    const double w = std::exp(s - top);
    z += w;
    out.items.push_back({ids_[r], r, s, w});
  }
  for (auto& item : out.items) item.probability /= z;
  return out;
}

void MemoryIndex::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  io::write_magic(out, "MWPIDX");
  io::write_pod<std::uint32_t>(out, kIndexVersion);
  io::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(dim()));
  io::write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(ids_.size()));
  for (const auto& id : ids_) io::write_string(out, id);
  io::write_doubles(out, {rows_.data(), static_cast<std::size_t>(rows_.size())});
  if (!out) throw DataError("write error on " + path.string());
}

MemoryIndex MemoryIndex::load(const std::filesystem::path& path, std::shared_ptr<const Dataset> store) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  io::expect_magic(in, "MWPIDX", "memory index");
  if (io::read_pod<std::uint32_t>(in) != kIndexVersion) throw DataError("unsupported memory index version");
  const auto dim = io::read_pod<std::uint32_t>(in);
  const auto rows = io::read_pod<std::uint64_t>(in);
  std::vector<std::string> ids(rows);
  for (auto& id : ids) id = io::read_string(in);
  RowMatrix m(static_cast<Eigen::Index>(rows), dim);
  io::read_doubles(in, {m.data(), static_cast<std::size_t>(m.size())});
  return MemoryIndex(std::move(ids), std::move(m), std::move(store));
}

MemoryIndex build_index(const Embedder& e, std::shared_ptr<const Dataset> ds) {
  if (!ds || ds->empty()) throw DataError("cannot index an empty dataset");
  std::vector<std::string> ids;
  RowMatrix rows(static_cast<Eigen::Index>(ds->size()), e.dim());
  Eigen::Index r = 0;
  for (const auto& p : *ds) {
    ids.push_back(p.id);
    rows.row(r++) = embed_question(e, p.question).vector.transpose();
  }
  return MemoryIndex(std::move(ids), std::move(rows), std::move(ds));
}

}  // namespace mwp::memory
