#pragma once

// Tape-based reverse-mode differentiation over dense row-major matrices.
// A Graph records one forward pass; backward() accumulates parameter
// gradients into a caller-owned Gradients buffer, so independent graphs can
// run against the same ParameterSet.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace mwp::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

struct Parameter {
  std::string name;
  Matrix value;
};

/// Named learnable tensors with stable indices.
class ParameterSet {
public:
  std::size_t add(std::string name, Matrix init);
  std::size_t size() const noexcept { return params_.size(); }
  Parameter& operator[](std::size_t i) { return params_[i]; }
  const Parameter& operator[](std::size_t i) const { return params_[i]; }
  std::ptrdiff_t find(const std::string& name) const;
  auto begin() const noexcept { return params_.begin(); }
  auto end() const noexcept { return params_.end(); }
  std::size_t scalar_count() const;
  bool all_finite() const;

private:
  std::vector<Parameter> params_;
  std::unordered_map<std::string, std::size_t> by_name_;
};

/// One matrix per parameter, same shapes.
class Gradients {
public:
  Gradients() = default;
  explicit Gradients(const ParameterSet& params);

  std::size_t size() const noexcept { return grads_.size(); }
  Matrix& operator[](std::size_t i) { return grads_[i]; }
  const Matrix& operator[](std::size_t i) const { return grads_[i]; }
  void zero();
  void add(const Gradients& other);
  void scale(double s);
  double global_norm() const;
  bool all_finite() const;

private:
  std::vector<Matrix> grads_;
};

/// Handle to a node of a Graph.
struct Var {
  int id = -1;
};

/// Row-major boolean visibility matrix; `at(i, j)` is true iff row i may attend to column j.
struct MaskData {
  Index size = 0;
  std::vector<std::uint8_t> cells;
  bool at(Index i, Index j) const { return cells[static_cast<std::size_t>(i * size + j)] != 0; }
};

class Graph {
public:
  /// With `track = false` nothing is recorded for backward (inference).
  explicit Graph(bool track = true) : track_(track) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var param(const ParameterSet& params, std::size_t index);
  Var constant(Matrix value);

  const Matrix& value(Var v) const;
  bool requires_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].requires_grad; }
  bool tracking() const noexcept { return track_; }

  Var gather_rows(Var table, std::span<const int> rows);
  Var add(Var a, Var b);
  Var add_row(Var a, Var row);  // broadcast a 1×n row over every row of `a`
  Var matmul(Var a, Var b);
  Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
  Var gelu(Var x);
  Var slice_rows(Var x, Index begin, Index count);
  Var concat_rows(std::span<const Var> parts);
  Var dropout(Var x, double rate, std::mt19937_64& rng);

  /// Masked scaled dot-product attention weights. `qkv` is T×3d laid out as
  /// [Q | K | V]; the result stacks the heads: row h·T + i is head h's
  /// distribution for query i. Masked cells are exactly zero.
  Var attention_probs(Var qkv, const MaskData& mask, int heads);
  /// Head-wise P·V over the V block of `qkv`, concatenated to T×d.
  Var attention_mix(Var probs, Var qkv, int heads);

  /// Node with a hand-written backward. `backward(out_grad)` should call
  /// accumulate() on inputs that require gradients.
  using BackwardFn = std::function<void(const Matrix& out_grad)>;
  Var custom(Matrix value, std::span<const Var> inputs, BackwardFn backward);
  void accumulate(Var v, const Matrix& g);
  Matrix& grad(Var v);

  /// Runs backward from a 1×1 node, adding parameter gradients into `out`.
  void backward(Var loss, Gradients& out);

private:
  struct Node {
    Matrix value;
    const Matrix* external = nullptr;  // parameter leaves read the live tensor
    Matrix grad;
    Matrix* grad_target = nullptr;     // parameter leaves write into Gradients
    int param = -1;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var push(Matrix value, bool requires_grad, BackwardFn fn = {});
  bool any_requires(std::span<const Var> inputs) const;

  bool track_;
  std::vector<Node> nodes_;
  std::unordered_map<std::size_t, int> param_leaves_;
};

}  // namespace mwp::ad
