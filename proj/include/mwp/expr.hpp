#pragma once

// Arithmetic expressions over + − × ÷ and brackets: tokens, parsing, exact
// evaluation, and equation normalization.

#include <boost/multiprecision/cpp_int.hpp>

#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace mwp::expr {

using Rational = boost::multiprecision::cpp_rational;
using Tokens = std::vector<std::string>;

enum class Op : unsigned char { add, sub, mul, div };

// Canonical glyphs. Serialized expressions join tokens with single spaces.
inline constexpr std::string_view kPlus = "+";
inline constexpr std::string_view kMinus = "−";
inline constexpr std::string_view kTimes = "×";
inline constexpr std::string_view kDivide = "÷";
inline constexpr std::string_view kOpen = "(";
inline constexpr std::string_view kClose = ")";

inline constexpr int kMaxDepth = 64;

std::string_view glyph(Op op) noexcept;
std::optional<Op> op_from_token(std::string_view token) noexcept;
int precedence(Op op) noexcept;
bool is_commutative(Op op) noexcept;
Rational apply(Op op, const Rational& a, const Rational& b);  // throws DivisionByZero

/// True for tokens that read as a number literal ("18", "3.5", "20%", ".5").
bool is_number_token(std::string_view token) noexcept;

/// Parses "12", "3.5", "-2", "7%", "3/4" into an exact rational. Throws ParseError.
Rational parse_number(std::string_view text);

/// Renders an integer as "292" and anything else as "7/2".
std::string to_string(const Rational& value);
double to_double(const Rational& value);

/// Immutable expression tree. Copies share structure.
class Expr {
public:
  static Expr number(Rational value, std::string token);
  static Expr number(std::string token);  // value parsed from the token
  static Expr binary(Op op, Expr left, Expr right);

  bool is_number() const noexcept;
  const Rational& value() const;        // number nodes only
  const std::string& token() const;     // number nodes only
  Op op() const;                        // binary nodes only
  const Expr& left() const;             // binary nodes only
  const Expr& right() const;            // binary nodes only
  int depth() const noexcept;
  int size() const noexcept;            // node count

  /// Structural equality (same shape, ops and literal tokens).
  friend bool operator==(const Expr& a, const Expr& b);

private:
  struct Node;
  explicit Expr(std::shared_ptr<const Node> node) : node_(std::move(node)) {}
  std::shared_ptr<const Node> node_;
};

/// Splits an equation string into canonical tokens. ASCII "-", "*", "/" map
/// to the canonical glyphs, "[" "]" to round brackets. Throws ParseError.
Tokens tokenize(std::string_view equation);

/// Standard precedence, left associative, no unary operators. Throws ParseError.
Expr parse(std::span<const std::string> tokens);

/// Exact value. Throws DivisionByZero.
Rational evaluate(const Expr& e);

/// Exact value, or nullopt on division by zero.
std::optional<Rational> try_evaluate(const Expr& e);

/// Token form with the minimum brackets precedence and associativity require.
Tokens emit(const Expr& e);

/// Equation normalization: orders the operands of every + and × node by the
/// earliest position any of their numbers takes in `question` (absent numbers
/// sort last, ties by emitted text) and re-emits with minimal brackets.
Tokens normalize(const Expr& e, std::span<const std::string> question);

/// |predicted − gold| ≤ tol·max(1, |gold|); a missing prediction is never equal.
bool answers_equal(const std::optional<Rational>& predicted, const Rational& gold,
                   double tol = 1e-4);

std::string join(std::span<const std::string> tokens);

}  // namespace mwp::expr
