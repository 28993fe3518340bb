#pragma once

// Evaluation reports, the K sweep, ablation arms and difficulty buckets.

#include "mwp/bundle.hpp"
#include "mwp/infer.hpp"
#include "mwp/train.hpp"

#include <json.hpp>

#include <array>
#include <ostream>
#include <string>
#include <vector>

namespace mwp::harness {

struct BucketAccuracy {
  std::string label;
  std::size_t size = 0;
  std::size_t correct = 0;
  double accuracy = 0.0;
};

struct EvalReport {
  std::string dataset;
  int k = 0;
  double accuracy = 0.0;
  std::size_t correct = 0;
  std::size_t total = 0;
  std::vector<BucketAccuracy> buckets;
  std::vector<infer::SolveResult> records;  // sorted by id
  std::string config_fingerprint;
  double seconds = 0.0;
};

nlohmann::json to_json(const EvalReport& r);

/// Solves every problem of `test` with K retrievals and scores by value.
EvalReport evaluate(const Bundle& bundle, const Dataset& test, int k, const InferConfig& config,
                    const std::string& tag = "test");

/// One report per distinct K, in first-seen order. Duplicates are dropped
/// with a line on `warnings`.
std::vector<EvalReport> k_sweep(const Bundle& bundle, const Dataset& test, const std::vector<int>& ks,
                                const InferConfig& config, std::ostream* warnings = nullptr,
                                const std::string& tag = "test");

/// "K,accuracy" header and one row per report.
std::string sweep_csv(const std::vector<EvalReport>& reports);

struct Bucket {
  std::string label;  // easy, medium, upper, hard
  std::vector<std::size_t> members;  // indices into the dataset
};

/// Sorts by expression token count (ties by id) and cuts at floor(i·n/4).
std::array<Bucket, 4> difficulty_buckets(const Dataset& test);

struct AblationArm {
  std::string name;
  bool equation_normalization = true;
  bool copy = true;
  bool memory = true;
};

/// full, w/o EN, w/o Copy, w/o Memory, w/o All.
std::vector<AblationArm> ablation_arms();
TrainConfig apply_arm(const AblationArm& arm, TrainConfig base);

struct AblationRow {
  std::string arm;
  int k = 0;
  double accuracy = 0.0;
  int epochs = 0;
};

struct AblateOptions {
  std::filesystem::path out_dir;     // one subdirectory per arm when set
  std::ostream* log = nullptr;
  std::vector<std::string> only;     // arm names; empty runs all
};

/// Trains and evaluates every arm from the same seed. Arms with memory are
/// scored at K = 1, the others at K = 0.
std::vector<AblationRow> ablate(const Dataset& train, const Dataset& test, const TrainConfig& base,
                                const AblateOptions& options = {});

std::string ablation_csv(const std::vector<AblationRow>& rows);

/// FNV-1a of the compact config JSON, as 16 hex digits.
std::string fingerprint(const nlohmann::json& config);

}  // namespace mwp::harness
