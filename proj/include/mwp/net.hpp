#pragma once

// Transformer core: embeddings, the four-segment attention layout, the
// representation and analogy stacks, and the copy-augmented output heads.

#include "mwp/autograd.hpp"
#include "mwp/corpus.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace mwp::net {

using ad::Index;
using ad::Matrix;
using Vector = Eigen::VectorXd;

struct ModelConfig {
  int d_model = 64;
  int n_heads = 4;
  int layers_repr = 2;
  int layers_analogy = 2;
  int max_positions = 192;
  int n_segments = 4;
  int vocab_size = 0;  // |V|, including reserved tokens
  int gen_size = 0;    // |V_gen|
  int ff_mult = 4;
  double dropout = 0.0;
  double init_std = 0.02;
  std::uint64_t seed = 1;

  void validate() const;  // throws UsageError
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Segment ids of the analogy input, in concatenation order.
enum class Segment : int { retrieved_question = 0, retrieved_expression = 1, question = 2, expression = 3 };

/// Lengths of [Z_q, Z_e, X_q, X_e]. Positions run 0..total−1 across all four.
/// With no retrieval (K = 0) the Z lengths are zero.
struct SequenceLayout {
  Index zq = 0;
  Index ze = 0;
  Index xq = 0;
  Index xe = 0;

  Index total() const noexcept { return zq + ze + xq + xe; }
  Index begin(Segment s) const noexcept;
  Index length(Segment s) const noexcept;
  Segment segment_of(Index position) const;
  bool has_memory() const noexcept { return zq + ze > 0; }
};

/// Who may attend to whom. Z_q rows see Z_q; Z_e rows see Z_q and Z_e up to
/// themselves; X_q rows see Z_q, Z_e and X_q; X_e rows see Z_q, Z_e, X_q and
/// X_e up to themselves.
class AttentionMask {
public:
  explicit AttentionMask(const SequenceLayout& layout);

  Index size() const noexcept { return data_.size; }
  bool operator()(Index row, Index col) const { return data_.at(row, col); }
  const ad::MaskData& data() const noexcept { return data_; }

private:
  ad::MaskData data_;
};

AttentionMask build_mask(const SequenceLayout& layout);

/// Parameter indices of one pre-norm transformer block.
struct BlockParams {
  std::size_t ln1_gain, ln1_bias, w_qkv, b_qkv, w_out, b_out;
  std::size_t ln2_gain, ln2_bias, w_ff1, b_ff1, w_ff2, b_ff2;
};

struct StackParams {
  std::size_t segment;   // segment embedding table
  std::size_t position;  // position embedding table
  std::vector<BlockParams> blocks;
  std::size_t final_gain, final_bias;
};

/// All learnable tensors plus the config they were shaped from.
class Model {
public:
  explicit Model(const ModelConfig& config);

  const ModelConfig& config() const noexcept { return config_; }
  ad::ParameterSet& params() noexcept { return params_; }
  const ad::ParameterSet& params() const noexcept { return params_; }

  std::size_t token_embedding() const noexcept { return token_; }
  const StackParams& representation() const noexcept { return repr_; }
  const StackParams& analogy() const noexcept { return analogy_; }
  std::size_t generation_weights() const noexcept { return w_gen_; }  // d × |V_gen|
  std::size_t gate_weights() const noexcept { return w_gate_; }       // d × 1
  std::size_t inductive_weights() const noexcept { return w_ind_; }   // d × |V_gen|

  const Matrix& tensor(std::size_t index) const { return params_[index].value; }

  /// Container: magic "MWPCKPT", u32 version, config JSON string, u32 tensor
  /// count, then per tensor (name, u32 rows, u32 cols, rows×cols f64
  /// row-major). Loading rebuilds the model from the config and rejects any
  /// missing, extra or mis-shaped tensor.
  void save(const std::filesystem::path& path) const;
  static Model load(const std::filesystem::path& path);

private:
  StackParams make_stack(const std::string& prefix, int segments, int layers, std::mt19937_64& rng);

  ModelConfig config_;
  ad::ParameterSet params_;
  std::size_t token_ = 0;
  StackParams repr_;
  StackParams analogy_;
  std::size_t w_gen_ = 0;
  std::size_t w_gate_ = 0;
  std::size_t w_ind_ = 0;
};

/// Token ids of one problem as the stacks consume it: question ids and the
/// expression input, which starts with BOS.
struct ProblemInput {
  std::vector<int> question;
  std::vector<int> expression;
};

/// Output space of the decoder: V_gen first, then question tokens that are
/// not in V_gen. Each question position maps to the outcome it copies.
class CopySpace {
public:
  CopySpace(const Vocab& vocab, std::span<const std::string> question);

  int size() const noexcept { return gen_size_ + static_cast<int>(extra_.size()); }
  int gen_size() const noexcept { return gen_size_; }
  /// Outcome id of a token string, or -1 if it is in neither V_gen nor the question.
  int outcome(std::string_view token) const;
  const std::string& token(int outcome) const;
  /// Vocabulary id fed back to the decoder after emitting `outcome` (UNK for extras).
  int input_id(int outcome) const { return vocab_->id(token(outcome)); }
  const Vocab& vocab() const noexcept { return *vocab_; }
  std::span<const int> question_outcomes() const noexcept { return question_outcomes_; }

private:
  const Vocab* vocab_;
  int gen_size_;
  std::vector<std::string> extra_;
  std::vector<int> question_outcomes_;
};

// --- graph forward ---------------------------------------------------------

/// token + segment + position rows of the representation stack.
ad::Var embed_inputs(ad::Graph& g, const Model& m, std::span<const int> tokens, std::span<const int> segments,
                     Index position_offset = 0);

struct StackOutput {
  ad::Var states;                     // after the final layer norm
  std::vector<ad::Var> hidden;        // residual stream after every block
  ad::Var final_attention;            // (heads·T) × T, last block
};

StackOutput run_stack(ad::Graph& g, const Model& m, const StackParams& stack, ad::Var x, const ad::MaskData& mask,
                      std::mt19937_64* dropout_rng = nullptr);

/// Item memory of one problem: the representation stack over [question,
/// expression] with a bidirectional question and a causal expression.
StackOutput representation_forward(ad::Graph& g, const Model& m, const ProblemInput& p,
                                   std::mt19937_64* dropout_rng = nullptr);

/// Relational memories over [Z_q, Z_e, X_q, X_e]. `retrieved` is null for K = 0.
StackOutput analogy_forward(ad::Graph& g, const Model& m, const StackOutput* retrieved, const StackOutput& problem,
                            const SequenceLayout& layout, std::mt19937_64* dropout_rng = nullptr);

/// Everything the losses and the decoder read from one joint forward pass.
struct JointForward {
  SequenceLayout layout;
  StackOutput problem_items;
  std::optional<StackOutput> retrieved_items;
  StackOutput relational;
  ad::Var generation_logits;  // X_e rows × |V_gen|
  ad::Var gate_logits;        // X_e rows × 1
  ad::Var inductive_logits;   // Z_e rows × |V_gen| (empty without retrieval)
};

JointForward joint_forward(ad::Graph& g, const Model& m, const ProblemInput& problem,
                           const ProblemInput* retrieved, std::mt19937_64* dropout_rng = nullptr);

// --- output heads on plain values ------------------------------------------

/// softmax(W_gᵀ·state) over V_gen.
Vector generation_distribution(const Matrix& w_gen, const Vector& state);

/// Per head: the attention row restricted to question columns, renormalized;
/// weights of positions holding the same outcome summed; heads averaged.
/// `head_rows` is heads × T for one decoder position.
Vector copy_distribution(const Matrix& head_rows, Index question_begin, std::span<const int> question_outcomes,
                         int outcome_count);

/// logistic(W_pᵀ·state).
double gate(const Matrix& w_gate, const Vector& state);

/// p_gen·p_g + (1 − p_gen)·p_c on the outcome space (V_gen ids come first).
Vector output_distribution(double p_gen, const Vector& p_gen_dist, const Vector& p_copy);

/// Cᵀ·state for every row of `states`.
Matrix inductive_logits(const Matrix& w_ind, const Matrix& states);

/// Plain-value snapshot of a joint forward pass.
struct ForwardTrace {
  SequenceLayout layout;
  std::vector<Matrix> hidden;  // analogy residual stream per block
  Matrix attention;            // (heads·T) × T, final analogy block
  Matrix item_zq, item_ze, item_xq, item_xe;
  Matrix rel_zq, rel_ze, rel_xq, rel_xe;
  Matrix generation_logits;
  Matrix gate_logits;
  Matrix inductive_logits;

  /// heads × T attention of the final block for absolute row `position`.
  Matrix attention_row(Index position, int heads) const;
};

ForwardTrace trace_forward(const Model& m, const ProblemInput& problem, const ProblemInput* retrieved);

}  // namespace mwp::net
