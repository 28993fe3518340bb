#pragma once

// Step-wise decoding with cached keys and values. The retrieved item and the
// question are encoded once; every emitted token then costs one row per block.

#include "mwp/net.hpp"

#include <memory>
#include <vector>

namespace mwp::net {

/// Keys and values of every block, one row per consumed position.
struct KVCache {
  std::vector<Matrix> k;
  std::vector<Matrix> v;
};

/// Plain-value runner for one transformer stack.
class StackRunner {
public:
  StackRunner(const Model& m, const StackParams& stack);

  /// Full forward over embedded rows `x` under `mask`; fills `cache` and
  /// returns the final-norm states. `attention`, when given, receives the
  /// last block's (heads·n) × n weights.
  Matrix prefill(const Matrix& x, const ad::MaskData& mask, KVCache& cache, Matrix* attention = nullptr) const;

  struct Step {
    Vector state;      // final-norm state of the new row
    Matrix attention;  // heads × (base + tail) weights of the last block
  };
  /// One new row that sees every row of `base`, every row of `tail`, and
  /// itself. Its keys and values are appended to `tail`.
  Step step(const Eigen::RowVectorXd& x, const KVCache& base, KVCache& tail) const;

private:
  const Model* m_;
  const StackParams* stack_;
};

/// Next-token distributions for one problem under zero or one retrieved item.
class IncrementalDecoder {
public:
  struct State {
    KVCache repr_tail;
    KVCache analogy_tail;
    Index consumed = 0;      // X_e rows so far, BOS included
    Vector distribution;     // over the copy space, for the next token
  };

  /// `question` holds vocabulary ids; `space` must describe the same question
  /// and outlive the decoder. `retrieved` is null for K = 0.
  IncrementalDecoder(const Model& m, std::vector<int> question, const CopySpace& space,
                     const ProblemInput* retrieved, bool copy);

  State start() const;
  const Vector& distribution(const State& s) const { return s.distribution; }
  State advance(const State& s, int outcome) const;
  int eos() const noexcept { return eos_; }
  const SequenceLayout& base_layout() const noexcept { return base_; }

private:
  State consume(State s, int token_id) const;

  const Model* m_;
  const CopySpace* space_;
  bool copy_;
  int eos_;
  SequenceLayout base_;  // [Z_q, Z_e, X_q] lengths, xe = 0
  StackRunner repr_;
  StackRunner analogy_;
  KVCache repr_base_;
  KVCache analogy_base_;
};

/// Same distribution as IncrementalDecoder but from one full forward pass
/// over [Z, X_q, BOS + prefix]. `prefix` holds outcome ids.
Vector full_distribution(const Model& m, const std::vector<int>& question, const CopySpace& space,
                         const ProblemInput* retrieved, const std::vector<int>& prefix, bool copy);

}  // namespace mwp::net
