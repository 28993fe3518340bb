#pragma once

// Losses, optimizer, and the training loop.

#include "mwp/bundle.hpp"
#include "mwp/config.hpp"
#include "mwp/net.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace mwp::train {

using ad::Index;
using ad::Matrix;

/// Learning rate for 1-based `epoch`: the base rate through
/// `lr_halve_after`, then halved at the first epoch past it and again every
/// `lr_halve_every` epochs (41 → base/2, 46 → base/4 with the defaults).
double learning_rate(const TrainConfig& cfg, int epoch);

struct InductiveLoss {
  ad::Var loss;
  int counted = 0;
  bool all_excluded = false;  // every target was excluded; `loss` is a constant 0
};

/// Mean cross-entropy of `logits` rows against generation ids; -1 targets are skipped.
InductiveLoss inductive_loss(ad::Graph& g, ad::Var logits, std::span<const int> targets);

/// What the copy-augmented head needs besides the logits.
struct CopyInputs {
  ad::Var attention;                     // (heads·T) × T of the final analogy block
  Index first_row = 0;                   // absolute row of the first X_e position
  Index question_begin = 0;              // absolute column of the first X_q position
  std::span<const int> question_outcomes;
  int outcome_count = 0;
  int heads = 1;
};

/// Mean over decoder positions of −log p(target), with p the gated mixture of
/// the generation softmax and the copy distribution. Without `copy` the gate
/// is fixed to 1 and `gate_logits`/`copy` are ignored. Throws DataError when
/// a target cannot be produced.
ad::Var analogical_loss(ad::Graph& g, ad::Var generation_logits, ad::Var gate_logits, const CopyInputs& copy_inputs,
                        std::span<const int> targets, bool copy);

double total_loss(double analogical, double inductive, double lambda);
ad::Var total_loss(ad::Graph& g, ad::Var analogical, ad::Var inductive, double lambda);

/// Adam with bias correction.
class Adam {
public:
  Adam(const ad::ParameterSet& params, double beta1, double beta2, double eps);
  void step(ad::ParameterSet& params, const ad::Gradients& grads, double lr);
  long steps() const noexcept { return t_; }

private:
  double b1_, b2_, eps_;
  long t_ = 0;
  std::vector<ad::Matrix> m_, v_;
};

/// Rescales to at most `max_norm` (no-op when `max_norm` <= 0). Returns the norm before clipping.
double clip_gradients(ad::Gradients& grads, double max_norm);

/// One problem prepared for teacher forcing.
struct Example {
  std::string id;
  net::ProblemInput problem;
  std::vector<int> question_outcomes;
  int outcome_count = 0;
  std::vector<int> targets;  // outcome ids of the gold expression, then EOS
  std::optional<net::ProblemInput> retrieved;
  std::string retrieved_id;
  std::vector<int> retrieved_targets;  // generation ids, -1 when not in V_gen, then EOS
};

/// Encodes `ds` under the bundle's switches. With memory on, every problem
/// gets its top-1 neighbour from the index, excluding itself.
std::vector<Example> build_examples(const Bundle& bundle, const Dataset& ds);

struct ExampleLoss {
  ad::Var total;
  double analogical = 0.0;
  double inductive = 0.0;
  bool inductive_counted = false;
};

ExampleLoss example_loss(ad::Graph& g, const net::Model& m, const Example& ex, const TrainConfig& cfg,
                         std::mt19937_64* dropout_rng = nullptr);

struct EpochMetrics {
  int epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double analogical_loss = 0.0;
  double inductive_loss = 0.0;
  double grad_norm = 0.0;  // mean pre-clip norm over steps
  std::optional<double> train_accuracy;
  std::optional<double> valid_accuracy;
  double seconds = 0.0;
  bool best = false;
};

nlohmann::json to_json(const EpochMetrics& m);

struct TrainOptions {
  const Dataset* valid = nullptr;
  std::filesystem::path out_dir;  // empty: no files are written
  std::ostream* metrics = nullptr;
  /// Called after every epoch; returning false ends training.
  std::function<bool(const EpochMetrics&, const Bundle&)> on_epoch;
};

struct TrainResult {
  std::vector<EpochMetrics> history;
  int best_epoch = 0;
};

/// Trains `bundle.model()` on `train`. Best is chosen by validation accuracy
/// when a validation set is scored, else train accuracy, else lowest loss.
/// With an output directory the bundle files are written once, then
/// `last.ckpt` every epoch and `model.ckpt` whenever the best improves, and
/// metrics go to `metrics.jsonl`. The bundle keeps the last epoch's weights.
TrainResult train(Bundle& bundle, const Dataset& train, const TrainOptions& options = {});

/// Fraction of `ds` solved under the bundle's switches, retrieving with
/// each problem's own id excluded.
double answer_accuracy(const Bundle& bundle, const Dataset& ds, std::size_t limit = 0);

}  // namespace mwp::train
