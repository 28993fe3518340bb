#pragma once

#include "mwp/net.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>

namespace mwp {

/// Decoding settings.
struct InferConfig {
  int beam = 5;
  int max_len = 48;
  /// Mix retrievals with equal weights instead of their retrieval probabilities.
  bool uniform_weights = false;
  /// Decode each retrieval separately and keep the best final sequence
  /// instead of mixing next-token distributions.
  bool per_sequence = false;
};

struct TrainConfig {
  int epochs = 80;
  int batch_size = 12;
  double learning_rate = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double adam_eps = 1e-8;
  double lambda = 1.0;        // weight of the inductive loss
  int lr_halve_after = 40;    // last epoch at the base rate
  int lr_halve_every = 5;
  double clip_norm = 1.0;     // <= 0 disables clipping
  std::uint64_t seed = 1;
  bool equation_normalization = true;
  bool copy = true;
  bool memory = true;
  int embed_dim = 32;
  int embed_window = 5;
  int min_freq = 1;
  int train_accuracy_every = 1;  // 0 disables the per-epoch train accuracy
  int train_accuracy_limit = 0;  // score only the first N training problems (0 = all)
  int valid_every = 1;
  net::ModelConfig model;        // vocab_size and gen_size are filled from the data
  InferConfig infer;

  void validate() const;  // throws UsageError
};

void to_json(nlohmann::json& j, const InferConfig& c);
void from_json(const nlohmann::json& j, InferConfig& c);
void to_json(nlohmann::json& j, const TrainConfig& c);
/// Missing fields keep their defaults; unknown fields are rejected.
void from_json(const nlohmann::json& j, TrainConfig& c);

TrainConfig load_train_config(const std::filesystem::path& path);
void save_train_config(const TrainConfig& c, const std::filesystem::path& path);

}  // namespace mwp
