#pragma once

// Everything a trained solver needs on disk: config, vocabulary, retriever
// and weights, plus the encoding of problems into model inputs.

#include "mwp/config.hpp"
#include "mwp/corpus.hpp"
#include "mwp/memory.hpp"
#include "mwp/net.hpp"

#include <filesystem>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

namespace mwp {

/// Gold expression tokens the model is trained on: normalized against the
/// question when `normalize` is set, verbatim otherwise.
std::vector<std::string> gold_expression(const Problem& p, bool normalize);

/// Vocabulary ids of the question and BOS followed by the expression.
net::ProblemInput encode_problem(const Vocab& vocab, std::span<const std::string> question,
                                 std::span<const std::string> expression);

class Bundle {
public:
  Bundle(TrainConfig config, std::shared_ptr<const Vocab> vocab, memory::Embedder embedder,
         memory::MemoryIndex index, net::Model model);

  /// Vocabulary, embedder and index from `train`, and a freshly initialized
  /// model whose vocabulary sizes and seed come from the data and `config`.
  static Bundle prepare(const Dataset& train, TrainConfig config);

  /// Files: config.json, vocab.json, embedder.bin, memory.bin, memory.jsonl
  /// and the weights under `checkpoint`.
  void save(const std::filesystem::path& dir, const std::string& checkpoint = "model.ckpt") const;
  static Bundle load(const std::filesystem::path& dir, const std::string& checkpoint = "model.ckpt");

  const TrainConfig& config() const noexcept { return config_; }
  const Vocab& vocab() const noexcept { return *vocab_; }
  const memory::Embedder& embedder() const noexcept { return embedder_; }
  const memory::MemoryIndex& index() const noexcept { return index_; }
  const net::Model& model() const noexcept { return model_; }
  net::Model& model() noexcept { return model_; }

  /// Encoded memory problem (expression normalized per the config).
  const net::ProblemInput& memory_input(const std::string& id) const;
  /// Gold expression of a memory problem as the decoder saw it in training.
  const std::vector<std::string>& memory_expression(const std::string& id) const;

private:
  void encode_memory();

  TrainConfig config_;
  std::shared_ptr<const Vocab> vocab_;
  memory::Embedder embedder_;
  memory::MemoryIndex index_;
  net::Model model_;
  std::unordered_map<std::string, net::ProblemInput> memory_inputs_;
  std::unordered_map<std::string, std::vector<std::string>> memory_expressions_;
};

}  // namespace mwp
