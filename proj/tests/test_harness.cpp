#include "mwp/error.hpp"
#include "mwp/harness.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <set>
#include <sstream>

#ifndef MWP_TEST_DATA
#define MWP_TEST_DATA "tests/data"
#endif

namespace mwp::harness {
namespace {

Problem make(const std::string& id, const std::string& equation) {
  Problem p;
  p.id = id;
  p.expression = expr::tokenize(equation);
  p.question = p.expression;
  p.answer = expr::evaluate(expr::parse(p.expression));
  return p;
}

std::vector<std::string> ids_of(const Dataset& ds, const Bucket& b) {
  std::vector<std::string> out;
  for (auto i : b.members) out.push_back(ds[i].id);
  return out;
}

TEST(HarnessBuckets, QuartilesByLength) {
  std::vector<Problem> ps;
  std::string e = "1";
  for (int i = 0; i < 8; ++i) {
    ps.push_back(make("p" + std::to_string(7 - i), e));  // ids run against lengths
    e += " + 1";
  }
  const Dataset ds(ps);
  const auto b = difficulty_buckets(ds);
  EXPECT_EQ(b[0].label, "easy");
  EXPECT_EQ(b[3].label, "hard");
  EXPECT_EQ(ids_of(ds, b[0]), (std::vector<std::string>{"p7", "p6"}));
  EXPECT_EQ(ids_of(ds, b[1]), (std::vector<std::string>{"p5", "p4"}));
  EXPECT_EQ(ids_of(ds, b[2]), (std::vector<std::string>{"p3", "p2"}));
  EXPECT_EQ(ids_of(ds, b[3]), (std::vector<std::string>{"p1", "p0"}));
}

TEST(HarnessBuckets, EqualLengthsSplitByIdAndPartition) {
  std::vector<Problem> ps;
  for (const char* id : {"e", "b", "g", "a", "c", "f", "d"}) ps.push_back(make(id, "2 × 3"));
  const Dataset ds(ps);
  const auto b = difficulty_buckets(ds);
  EXPECT_EQ(ids_of(ds, b[0]), (std::vector<std::string>{"a"}));
  EXPECT_EQ(ids_of(ds, b[1]), (std::vector<std::string>{"b", "c"}));
  EXPECT_EQ(ids_of(ds, b[2]), (std::vector<std::string>{"d", "e"}));
  EXPECT_EQ(ids_of(ds, b[3]), (std::vector<std::string>{"f", "g"}));
  EXPECT_THROW(difficulty_buckets(Dataset(std::vector<Problem>(ps.begin(), ps.begin() + 3))), DataError);
}

TEST(HarnessBuckets, SampleFileMatchesSortOracle) {
  const Dataset ds = load_jsonl(std::string(MWP_TEST_DATA) + "/sample.jsonl");
  ASSERT_EQ(ds.size(), 11u);
  std::vector<std::pair<std::size_t, std::string>> keyed;
  for (const auto& p : ds) keyed.emplace_back(p.expression.size(), p.id);
  std::sort(keyed.begin(), keyed.end());
  const auto b = difficulty_buckets(ds);
  std::size_t at = 0;
  std::set<std::string> seen;
  for (std::size_t q = 0; q < 4; ++q) {
    const std::size_t size = (q + 1) * 11 / 4 - q * 11 / 4;
    ASSERT_EQ(b[q].members.size(), size);
    for (const auto& id : ids_of(ds, b[q])) {
      EXPECT_EQ(id, keyed[at++].second);
      seen.insert(id);
    }
  }
  EXPECT_EQ(seen.size(), ds.size());
  std::size_t lo = ds.size(), hi = 0;
  for (const auto& x : b) {
    lo = std::min(lo, x.members.size());
    hi = std::max(hi, x.members.size());
  }
  EXPECT_LE(hi - lo, 1u);
}

TEST(HarnessArms, SwitchBookkeeping) {
  const auto arms = ablation_arms();
  ASSERT_EQ(arms.size(), 5u);
  EXPECT_EQ(arms[0].name, "full");
  const TrainConfig base;
  for (const auto& arm : arms) {
    const TrainConfig c = apply_arm(arm, base);
    const int off = !c.equation_normalization + !c.copy + !c.memory;
    if (arm.name == "full") EXPECT_EQ(off, 0);
    else if (arm.name == "w/o All") EXPECT_EQ(off, 3);
    else EXPECT_EQ(off, 1) << arm.name;
    if (arm.name == "w/o EN") EXPECT_FALSE(c.equation_normalization);
    if (arm.name == "w/o Copy") EXPECT_FALSE(c.copy);
    if (arm.name == "w/o Memory") EXPECT_FALSE(c.memory);
    EXPECT_EQ(c.seed, base.seed);
  }
}

TEST(HarnessFingerprint, StableAndSensitive) {
  const nlohmann::json a = TrainConfig{};
  TrainConfig other;
  other.seed = 2;
  EXPECT_EQ(fingerprint(a), fingerprint(a));
  EXPECT_EQ(fingerprint(a).size(), 16u);
  EXPECT_NE(fingerprint(a), fingerprint(nlohmann::json(other)));
}

class HarnessEval : public ::testing::Test {
protected:
  static void SetUpTestSuite() {
    const auto all = generate_synthetic(60, 5, 2);
    const auto split = paraphrase_split(all, 8);
    train_ = new Dataset(split.train);
    test_ = new Dataset(split.test);
    TrainConfig cfg;
    cfg.model.d_model = 16;
    cfg.model.n_heads = 2;
    cfg.model.layers_repr = 1;
    cfg.model.layers_analogy = 1;
    cfg.embed_dim = 8;
    cfg.infer.beam = 2;
    cfg.infer.max_len = 6;
    bundle_ = new Bundle(Bundle::prepare(*train_, cfg));
  }
  static void TearDownTestSuite() {
    delete bundle_;
    delete train_;
    delete test_;
  }
  static Dataset* train_;
  static Dataset* test_;
  static Bundle* bundle_;
};

Dataset* HarnessEval::train_ = nullptr;
Dataset* HarnessEval::test_ = nullptr;
Bundle* HarnessEval::bundle_ = nullptr;

TEST_F(HarnessEval, AccuracyMatchesRecordsAndRepeats) {
  const auto r = evaluate(*bundle_, *test_, 1, bundle_->config().infer);
  ASSERT_EQ(r.records.size(), test_->size());
  std::size_t correct = 0;
  for (const auto& rec : r.records) correct += rec.correct.value_or(false) ? 1 : 0;
  EXPECT_EQ(r.correct, correct);
  EXPECT_DOUBLE_EQ(r.accuracy, static_cast<double>(correct) / static_cast<double>(test_->size()));
  EXPECT_TRUE(std::is_sorted(r.records.begin(), r.records.end(),
                             [](const auto& a, const auto& b) { return a.id < b.id; }));
  std::size_t bucketed = 0;
  for (const auto& b : r.buckets) bucketed += b.size;
  EXPECT_EQ(bucketed, test_->size());
  const auto again = evaluate(*bundle_, *test_, 1, bundle_->config().infer);
  auto strip = [](nlohmann::json j) {
    j.erase("seconds");
    return j;
  };
  EXPECT_EQ(strip(to_json(r)), strip(to_json(again)));
  EXPECT_THROW(evaluate(*bundle_, Dataset{}, 1, bundle_->config().infer), DataError);
}

TEST_F(HarnessEval, SweepDeduplicatesAndMatchesSingleRuns) {
  std::ostringstream warn;
  const auto reports = k_sweep(*bundle_, *test_, {0, 1, 1, 2}, bundle_->config().infer, &warn);
  ASSERT_EQ(reports.size(), 3u);
  EXPECT_NE(warn.str().find("duplicate"), std::string::npos);
  for (const auto& r : reports) {
    const auto single = evaluate(*bundle_, *test_, r.k, bundle_->config().infer);
    EXPECT_EQ(single.correct, r.correct);
    ASSERT_EQ(single.records.size(), r.records.size());
    for (std::size_t i = 0; i < r.records.size(); ++i) EXPECT_EQ(single.records[i].id, r.records[i].id);
  }
  const std::string csv = sweep_csv(reports);
  EXPECT_EQ(csv.substr(0, 11), "K,accuracy\n");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
}

}  // namespace
}  // namespace mwp::harness
