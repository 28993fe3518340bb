#pragma once

// Independent oracles and fixtures shared by the unit and acceptance tests.

#include "mwp/corpus.hpp"
#include "mwp/expr.hpp"
#include "mwp/net.hpp"

#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace mwp::testing {

using expr::Rational;

/// Test-side expression tree, evaluated without the library's parser.
struct OracleTree {
  bool leaf = true;
  int number = 0;
  char op = '+';
  std::shared_ptr<OracleTree> left, right;
};

inline std::shared_ptr<OracleTree> random_tree(std::mt19937_64& rng, int max_depth, int lo = 1, int hi = 20) {
  auto t = std::make_shared<OracleTree>();
  std::uniform_int_distribution<int> num(lo, hi);
  if (max_depth <= 1 || std::uniform_int_distribution<int>(0, 2)(rng) == 0) {
    t->number = num(rng);
    return t;
  }
  static const char ops[] = {'+', '-', '*', '/'};
  t->leaf = false;
  t->op = ops[std::uniform_int_distribution<int>(0, 3)(rng)];
  t->left = random_tree(rng, max_depth - 1, lo, hi);
  t->right = random_tree(rng, max_depth - 1, lo, hi);
  return t;
}

/// Exact value by direct recursion; nullopt on a zero divisor.
inline std::optional<Rational> oracle_value(const OracleTree& t) {
  if (t.leaf) return Rational(t.number);
  const auto a = oracle_value(*t.left);
  const auto b = oracle_value(*t.right);
  if (!a || !b) return std::nullopt;
  switch (t.op) {
    case '+': return *a + *b;
    case '-': return *a - *b;
    case '*': return *a * *b;
    default:
      if (*b == 0) return std::nullopt;
      return *a / *b;
  }
}

/// Fully bracketed ASCII rendering, e.g. "( 3 - ( 4 / 2 ) )".
inline std::string oracle_text(const OracleTree& t) {
  if (t.leaf) return std::to_string(t.number);
  return "( " + oracle_text(*t.left) + " " + std::string(1, t.op) + " " + oracle_text(*t.right) + " )";
}

inline void oracle_numbers(const OracleTree& t, std::vector<std::string>& out) {
  if (t.leaf) {
    out.push_back(std::to_string(t.number));
    return;
  }
  oracle_numbers(*t.left, out);
  oracle_numbers(*t.right, out);
}

/// Tiny vocabulary with numbers 1..9, operators and a few words.
inline Vocab toy_vocab() {
  std::vector<std::string> tokens = {"+", "−", "×", "÷", "(", ")", "how", "many", "apples", "?"};
  for (int i = 1; i <= 9; ++i) tokens.push_back(std::to_string(i));
  std::vector<std::string> gen = {std::string(Vocab::kEosToken), "+", "−", "×", "÷", "(", ")", "1", "2", "3"};
  return Vocab(tokens, gen);
}

inline net::ModelConfig toy_config(const Vocab& v, int d = 16, int heads = 2, int layers = 1, std::uint64_t seed = 7) {
  net::ModelConfig c;
  c.d_model = d;
  c.n_heads = heads;
  c.layers_repr = layers;
  c.layers_analogy = layers;
  c.max_positions = 64;
  c.vocab_size = v.size();
  c.gen_size = v.gen_size();
  c.seed = seed;
  c.init_std = 0.3;  // large enough that attention is far from uniform
  return c;
}

inline std::vector<int> random_ids(std::mt19937_64& rng, int n, int lo, int hi) {
  std::uniform_int_distribution<int> d(lo, hi);
  std::vector<int> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = d(rng);
  return v;
}

/// Problem input with random question ids and BOS + random expression ids.
inline net::ProblemInput random_input(std::mt19937_64& rng, const Vocab& v, int q_len, int e_len) {
  net::ProblemInput p;
  p.question = random_ids(rng, q_len, 4, v.size() - 1);
  p.expression.push_back(Vocab::kBos);
  for (int x : random_ids(rng, e_len, 4, v.size() - 1)) p.expression.push_back(x);
  return p;
}

}  // namespace mwp::testing
