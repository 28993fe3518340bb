#include "mwp/error.hpp"
#include "mwp/memory.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <random>

namespace mwp::memory {
namespace {

RowMatrix random_unit_rows(std::mt19937_64& rng, Eigen::Index n, Eigen::Index d) {
  std::normal_distribution<double> g;
  RowMatrix m(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) m(i, j) = g(rng);
    m.row(i).normalize();
  }
  return m;
}

std::vector<std::string> row_ids(std::size_t n) {
  std::vector<std::string> ids(n);
  for (std::size_t i = 0; i < n; ++i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "r%05zu", i);
    ids[i] = buf;
  }
  return ids;
}

/// Brute-force ranking: every score, sorted by (score desc, id asc).
std::vector<std::size_t> brute_force(const RowMatrix& rows, const std::vector<std::string>& ids, const Vector& q,
                                     std::size_t k, const std::unordered_set<std::string>& exclude) {
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (!exclude.count(ids[i])) order.push_back(i);
  }
  std::vector<double> s(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    double acc = 0.0;
    for (Eigen::Index j = 0; j < rows.cols(); ++j) acc += rows(static_cast<Eigen::Index>(i), j) * q(j);
    s[i] = acc;
  }
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (s[a] != s[b]) return s[a] > s[b];
    return ids[a] < ids[b];
  });
  order.resize(std::min(k, order.size()));
  return order;
}

TEST(MemorySearch, MatchesBruteForce) {
  std::mt19937_64 rng(3);
  const auto rows = random_unit_rows(rng, 500, 12);
  const auto ids = row_ids(500);
  const MemoryIndex index(ids, rows);
  for (int t = 0; t < 50; ++t) {
    const Vector q = random_unit_rows(rng, 1, 12).row(0).transpose();
    const auto got = index.search(q, 5);
    const auto want = brute_force(rows, ids, q, 5, {});
    ASSERT_EQ(got.items.size(), want.size());
    double psum = 0.0;
    for (std::size_t r = 0; r < want.size(); ++r) {
      EXPECT_EQ(got.items[r].row, want[r]);
      EXPECT_EQ(got.items[r].id, ids[want[r]]);
      EXPECT_NEAR(got.items[r].score, rows.row(static_cast<Eigen::Index>(want[r])).dot(q.transpose()), 1e-12);
      if (r > 0) EXPECT_LE(got.items[r].score, got.items[r - 1].score);
      psum += got.items[r].probability;
    }
    EXPECT_NEAR(psum, 1.0, 1e-9);
    EXPECT_FALSE(got.truncated);
  }
}

TEST(MemorySearch, ProbabilitiesAreSoftmaxOfScores) {
  std::mt19937_64 rng(4);
  const auto rows = random_unit_rows(rng, 40, 6);
  const MemoryIndex index(row_ids(40), rows);
  const Vector q = random_unit_rows(rng, 1, 6).row(0).transpose();
  const auto got = index.search(q, 3);
  double z = 0.0;
  for (const auto& it : got.items) z += std::exp(it.score);
  for (const auto& it : got.items) EXPECT_NEAR(it.probability, std::exp(it.score) / z, 1e-12);
}

TEST(MemorySearch, ExclusionAndTruncation) {
  std::mt19937_64 rng(5);
  const auto rows = random_unit_rows(rng, 20, 4);
  const auto ids = row_ids(20);
  const MemoryIndex index(ids, rows);
  const Vector q = rows.row(7).transpose();
  EXPECT_EQ(index.search(q, 1).items.at(0).id, ids[7]);
  const auto ex = index.search(q, 3, {ids[7]});
  for (const auto& it : ex.items) EXPECT_NE(it.id, ids[7]);
  const auto all = index.search(q, 50, {ids[0]});
  EXPECT_TRUE(all.truncated);
  EXPECT_EQ(all.items.size(), 19u);
  EXPECT_TRUE(index.search(q, 0).items.empty());
}

TEST(MemorySearch, TiesGoToSmallerId) {
  RowMatrix rows(3, 2);
  rows << 1, 0, 1, 0, 0, 1;
  const MemoryIndex index({"b", "a", "c"}, rows);
  Vector q(2);
  q << 1, 0;
  const auto got = index.search(q, 2);
  ASSERT_EQ(got.items.size(), 2u);
  EXPECT_EQ(got.items[0].id, "a");
  EXPECT_EQ(got.items[1].id, "b");
  EXPECT_DOUBLE_EQ(got.items[0].probability, 0.5);
}

TEST(MemorySearch, RejectsBadInputs) {
  RowMatrix rows(1, 2);
  rows << 3, 0;
  EXPECT_THROW(MemoryIndex({"a"}, rows), DataError);
  rows << 1, 0;
  const MemoryIndex index({"a"}, rows);
  Vector q(2);
  q << 2, 0;
  EXPECT_THROW(index.search(q, 1), DataError);
  EXPECT_THROW(index.search(Vector::Ones(3).normalized(), 1), DataError);
}

TEST(MemoryIndexIo, SaveLoadRoundTrip) {
  std::mt19937_64 rng(6);
  const MemoryIndex index(row_ids(30), random_unit_rows(rng, 30, 5));
  const auto p = std::filesystem::temp_directory_path() / "mwp_index.bin";
  index.save(p);
  const MemoryIndex back = MemoryIndex::load(p);
  EXPECT_EQ(back.ids(), index.ids());
  EXPECT_EQ(back.rows(), index.rows());
}

TEST(MemoryEmbedder, FitsDeterministicallyAndEmbedsUnitVectors) {
  const Dataset ds = generate_synthetic(120, 2);
  const Embedder a = fit_embedder(ds, 16, 1, 5);
  const Embedder b = fit_embedder(ds, 16, 99, 5);
  EXPECT_EQ(a.dim(), 16);
  EXPECT_EQ(a.vectors(), b.vectors());
  for (const auto& p : ds) {
    const auto e = embed_question(a, p.question);
    EXPECT_NEAR(e.vector.norm(), 1.0, 1e-6);
    EXPECT_FALSE(e.fallback);
  }
  const std::vector<std::string> unknown = {"qqq", "zzz"};
  const auto fb = embed_question(a, unknown);
  EXPECT_TRUE(fb.fallback);
  EXPECT_NEAR(fb.vector.norm(), 1.0, 1e-12);
  EXPECT_THROW(fit_embedder(ds, 100000), DataError);

  const auto p = std::filesystem::temp_directory_path() / "mwp_emb.bin";
  a.save(p);
  const Embedder back = Embedder::load(p);
  EXPECT_EQ(back.tokens(), a.tokens());
  EXPECT_EQ(back.vectors(), a.vectors());
}

TEST(MemoryEmbedder, MeanPoolingOracle) {
  const Dataset ds = generate_synthetic(60, 8);
  const Embedder e = fit_embedder(ds, 8);
  const auto& q = ds[0].question;
  Vector mean = Vector::Zero(8);
  for (const auto& t : q) mean += e.token_vector(t);
  mean /= static_cast<double>(q.size());
  const Vector want = mean.normalized();
  EXPECT_LT((embed_question(e, q).vector - want).norm(), 1e-12);
}

TEST(MemoryIndexBuild, ExcludingTheQueryProblemReturnsAnother) {
  const auto ds = std::make_shared<const Dataset>(generate_synthetic(200, 3));
  const Embedder e = fit_embedder(*ds, 16);
  const MemoryIndex index = build_index(e, ds);
  ASSERT_EQ(index.size(), ds->size());
  for (Eigen::Index r = 0; r < index.rows().rows(); ++r) EXPECT_NEAR(index.rows().row(r).norm(), 1.0, 1e-6);
  for (const auto& p : *ds) {
    const auto q = embed_question(e, p.question).vector;
    const auto hits = index.search(q, 1, {p.id});
    ASSERT_EQ(hits.items.size(), 1u);
    EXPECT_NE(hits.items[0].id, p.id);
    EXPECT_EQ(index.problem(hits.items[0]).id, hits.items[0].id);
  }
}

}  // namespace
}  // namespace mwp::memory
