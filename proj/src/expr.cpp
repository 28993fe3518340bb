#include "mwp/expr.hpp"

#include "mwp/error.hpp"

#include <algorithm>
#include <cctype>
#include <limits>

namespace mwp::expr {

struct Expr::Node {
  bool leaf = true;
  Rational value;
  std::string token;
  Op op = Op::add;
  std::optional<Expr> left;
  std::optional<Expr> right;
  int depth = 1;
  int size = 1;
};

std::string_view glyph(Op op) noexcept {
  switch (op) {
    case Op::add: return kPlus;
    case Op::sub: return kMinus;
    case Op::mul: return kTimes;
    case Op::div: return kDivide;
  }
  return kPlus;
}

std::optional<Op> op_from_token(std::string_view token) noexcept {
  if (token == kPlus) return Op::add;
  if (token == kMinus) return Op::sub;
  if (token == kTimes) return Op::mul;
  if (token == kDivide) return Op::div;
  return std::nullopt;
}

int precedence(Op op) noexcept { return (op == Op::add || op == Op::sub) ? 1 : 2; }

bool is_commutative(Op op) noexcept { return op == Op::add || op == Op::mul; }

Rational apply(Op op, const Rational& a, const Rational& b) {
  switch (op) {
    case Op::add: return a + b;
    case Op::sub: return a - b;
    case Op::mul: return a * b;
    case Op::div:
      if (b == 0) throw DivisionByZero();
      return a / b;
  }
  return 0;
}

namespace {

bool all_digits(std::string_view s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c); });
}

// cpp_int reads a leading 0 as an octal prefix, so strip it first.
boost::multiprecision::cpp_int decimal_int(std::string s) {
  const auto nz = s.find_first_not_of('0');
  s = nz == std::string::npos ? "0" : s.substr(nz);
  return boost::multiprecision::cpp_int(s);
}

Rational pow10(std::size_t n) {
  boost::multiprecision::cpp_int p = 1;
  for (std::size_t i = 0; i < n; ++i) p *= 10;
  return Rational(p);
}

// Unsigned decimal with optional fraction part: "12", "3.5", ".5".
std::optional<Rational> parse_decimal(std::string_view s) {
  const auto dot = s.find('.');
  if (dot == std::string_view::npos) {
    if (!all_digits(s)) return std::nullopt;
    return Rational(decimal_int(std::string(s)));
  }
  const auto whole = s.substr(0, dot);
  const auto frac = s.substr(dot + 1);
  if (!all_digits(frac) || (!whole.empty() && !all_digits(whole))) return std::nullopt;
  const auto digits = decimal_int(std::string(whole) + std::string(frac));
  return Rational(digits) / pow10(frac.size());
}

}  // namespace

bool is_number_token(std::string_view token) noexcept {
  if (token.empty()) return false;
  if (token.back() == '%') token.remove_suffix(1);
  if (token.empty()) return false;
  const auto dot = token.find('.');
  if (dot == std::string_view::npos) return all_digits(token);
  const auto whole = token.substr(0, dot);
  const auto frac = token.substr(dot + 1);
  return all_digits(frac) && (whole.empty() || all_digits(whole));
}

Rational parse_number(std::string_view text) {
  std::string_view s = text;
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  bool negative = false;
  if (!s.empty() && (s.front() == '-' || s.front() == '+')) {
    negative = s.front() == '-';
    s.remove_prefix(1);
  }
  bool percent = false;
  if (!s.empty() && s.back() == '%') {
    percent = true;
    s.remove_suffix(1);
  }
  std::optional<Rational> value;
  if (const auto slash = s.find('/'); slash != std::string_view::npos) {
    const auto num = parse_decimal(s.substr(0, slash));
    const auto den = parse_decimal(s.substr(slash + 1));
    if (num && den && *den != 0) value = *num / *den;
  } else {
    value = parse_decimal(s);
  }
  if (!value) throw ParseError("not a number: '" + std::string(text) + "'");
  if (percent) *value /= 100;
  if (negative) *value = -*value;
  return *value;
}

std::string to_string(const Rational& value) {
  if (denominator(value) == 1) return numerator(value).str();
  return numerator(value).str() + "/" + denominator(value).str();
}

double to_double(const Rational& value) { return value.convert_to<double>(); }

Expr Expr::number(Rational value, std::string token) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->token = std::move(token);
  return Expr(std::move(node));
}

Expr Expr::number(std::string token) {
  auto value = parse_number(token);
  return number(std::move(value), std::move(token));
}

Expr Expr::binary(Op op, Expr left, Expr right) {
  auto node = std::make_shared<Node>();
  node->leaf = false;
  node->op = op;
  node->depth = 1 + std::max(left.depth(), right.depth());
  node->size = 1 + left.size() + right.size();
  node->left = std::move(left);
  node->right = std::move(right);
  return Expr(std::move(node));
}

bool Expr::is_number() const noexcept { return node_->leaf; }

const Rational& Expr::value() const {
  if (!node_->leaf) throw Error("value() on an operator node");
  return node_->value;
}

const std::string& Expr::token() const {
  if (!node_->leaf) throw Error("token() on an operator node");
  return node_->token;
}

Op Expr::op() const {
  if (node_->leaf) throw Error("op() on a number node");
  return node_->op;
}

const Expr& Expr::left() const {
  if (node_->leaf) throw Error("left() on a number node");
  return *node_->left;
}

const Expr& Expr::right() const {
  if (node_->leaf) throw Error("right() on a number node");
  return *node_->right;
}

int Expr::depth() const noexcept { return node_->depth; }
int Expr::size() const noexcept { return node_->size; }

bool operator==(const Expr& a, const Expr& b) {
  if (a.node_ == b.node_) return true;
  if (a.is_number() != b.is_number()) return false;
  if (a.is_number()) return a.token() == b.token();
  return a.op() == b.op() && a.left() == b.left() && a.right() == b.right();
}

Tokens tokenize(std::string_view equation) {
  Tokens out;
  std::size_t i = 0;
  const auto n = equation.size();
  auto starts_with = [&](std::string_view g) { return equation.substr(i, g.size()) == g; };
  while (i < n) {
    const auto c = static_cast<unsigned char>(equation[i]);
    if (std::isspace(c)) {
      ++i;
      continue;
    }
    if (std::isdigit(c) || (c == '.' && i + 1 < n && std::isdigit(static_cast<unsigned char>(equation[i + 1])))) {
      const auto start = i;
      while (i < n && std::isdigit(static_cast<unsigned char>(equation[i]))) ++i;
      if (i + 1 < n && equation[i] == '.' && std::isdigit(static_cast<unsigned char>(equation[i + 1]))) {
        ++i;
        while (i < n && std::isdigit(static_cast<unsigned char>(equation[i]))) ++i;
      }
      if (i < n && equation[i] == '%') ++i;
      out.emplace_back(equation.substr(start, i - start));
      continue;
    }
    if (c == '+') { out.emplace_back(kPlus); ++i; continue; }
    if (c == '-') { out.emplace_back(kMinus); ++i; continue; }
    if (c == '*') { out.emplace_back(kTimes); ++i; continue; }
    if (c == '/') { out.emplace_back(kDivide); ++i; continue; }
    if (c == '(' || c == '[') { out.emplace_back(kOpen); ++i; continue; }
    if (c == ')' || c == ']') { out.emplace_back(kClose); ++i; continue; }
    bool matched = false;
    for (auto g : {kMinus, kTimes, kDivide}) {
      if (starts_with(g)) {
        out.emplace_back(g);
        i += g.size();
        matched = true;
        break;
      }
    }
    if (!matched) {
      throw ParseError("unexpected character in expression at offset " + std::to_string(i) + ": '" +
                       std::string(equation.substr(i, 1)) + "'");
    }
  }
  return out;
}

namespace {

class Parser {
public:
  explicit Parser(std::span<const std::string> tokens) : tokens_(tokens) {}

  Expr run() {
    if (tokens_.empty()) throw ParseError("empty expression");
    Expr e = sum(0);
    if (pos_ < tokens_.size()) {
      if (tokens_[pos_] == kClose) throw ParseError("unbalanced brackets: unexpected ')'");
      throw ParseError("unexpected token '" + tokens_[pos_] + "' at position " + std::to_string(pos_));
    }
    if (e.depth() > kMaxDepth) throw ParseError("expression deeper than " + std::to_string(kMaxDepth));
    return e;
  }

private:
  Expr sum(int nesting) {
    Expr lhs = product(nesting);
    while (pos_ < tokens_.size()) {
      const auto op = op_from_token(tokens_[pos_]);
      if (!op || precedence(*op) != 1) break;
      ++pos_;
      lhs = Expr::binary(*op, std::move(lhs), product(nesting));
      check_depth(lhs);
    }
    return lhs;
  }

  Expr product(int nesting) {
    Expr lhs = atom(nesting);
    while (pos_ < tokens_.size()) {
      const auto op = op_from_token(tokens_[pos_]);
      if (!op || precedence(*op) != 2) break;
      ++pos_;
      lhs = Expr::binary(*op, std::move(lhs), atom(nesting));
      check_depth(lhs);
    }
    return lhs;
  }

  Expr atom(int nesting) {
    if (pos_ >= tokens_.size()) {
      if (pos_ > 0 && op_from_token(tokens_[pos_ - 1])) {
        throw ParseError("dangling operator '" + tokens_[pos_ - 1] + "'");
      }
      if (pos_ > 0 && tokens_[pos_ - 1] == kOpen) throw ParseError("unbalanced brackets: missing ')'");
      throw ParseError("unexpected end of expression");
    }
    const std::string& tok = tokens_[pos_];
    if (tok == kOpen) {
      if (nesting + 1 > kMaxDepth) throw ParseError("brackets nested deeper than " + std::to_string(kMaxDepth));
      ++pos_;
      Expr inner = sum(nesting + 1);
      if (pos_ >= tokens_.size() || tokens_[pos_] != kClose) {
        throw ParseError("unbalanced brackets: missing ')'");
      }
      ++pos_;
      return inner;
    }
    if (is_number_token(tok)) {
      ++pos_;
      return Expr::number(tok);
    }
    if (op_from_token(tok)) {
      throw ParseError("dangling operator '" + tok + "' at position " + std::to_string(pos_));
    }
    if (tok == kClose) throw ParseError("unbalanced brackets: unexpected ')'");
    throw ParseError("unexpected token '" + tok + "'");
  }

  static void check_depth(const Expr& e) {
    if (e.depth() > kMaxDepth) throw ParseError("expression deeper than " + std::to_string(kMaxDepth));
  }

  std::span<const std::string> tokens_;
  std::size_t pos_ = 0;
};

// Whether `child` needs brackets as an operand of `parent`.
bool needs_brackets(const Expr& child, Op parent, bool right_operand) {
  if (child.is_number()) return false;
  const int cp = precedence(child.op());
  const int pp = precedence(parent);
  if (cp != pp) return cp < pp;
  return right_operand && (parent == Op::sub || parent == Op::div);
}

void emit_into(const Expr& e, Tokens& out) {
  if (e.is_number()) {
    out.push_back(e.token());
    return;
  }
  auto operand = [&](const Expr& child, bool right) {
    const bool b = needs_brackets(child, e.op(), right);
    if (b) out.emplace_back(kOpen);
    emit_into(child, out);
    if (b) out.emplace_back(kClose);
  };
  operand(e.left(), false);
  out.emplace_back(glyph(e.op()));
  operand(e.right(), true);
}

struct Ordered {
  Expr expr;
  std::size_t key;  // earliest question position of any number in the subtree
};

std::size_t question_position(const Expr& leaf, std::span<const std::string> question) {
  for (std::size_t i = 0; i < question.size(); ++i) {
    if (question[i] == leaf.token()) return i;
  }
  for (std::size_t i = 0; i < question.size(); ++i) {
    if (is_number_token(question[i]) && parse_number(question[i]) == leaf.value()) return i;
  }
  return std::numeric_limits<std::size_t>::max();
}

Ordered order_operands(const Expr& e, std::span<const std::string> question) {
  if (e.is_number()) return {e, question_position(e, question)};
  Ordered l = order_operands(e.left(), question);
  Ordered r = order_operands(e.right(), question);
  if (is_commutative(e.op())) {
    bool swap = r.key < l.key;
    if (r.key == l.key) swap = join(emit(r.expr)) < join(emit(l.expr));
    if (swap) std::swap(l, r);
  }
  return {Expr::binary(e.op(), l.expr, r.expr), std::min(l.key, r.key)};
}

}  // namespace

Expr parse(std::span<const std::string> tokens) { return Parser(tokens).run(); }

Rational evaluate(const Expr& e) {
  if (e.is_number()) return e.value();
  return apply(e.op(), evaluate(e.left()), evaluate(e.right()));
}

std::optional<Rational> try_evaluate(const Expr& e) {
  try {
    return evaluate(e);
  } catch (const DivisionByZero&) {
    return std::nullopt;
  }
}

Tokens emit(const Expr& e) {
  Tokens out;
  emit_into(e, out);
  return out;
}

Tokens normalize(const Expr& e, std::span<const std::string> question) {
  // Minimal emission can re-associate (a + (b − c) → a + b − c), so reorder
  // the reparsed tree until the token form repeats. Ties can make the forms
  // alternate; the smallest form on the cycle is the answer either way.
  std::vector<Tokens> seen{emit(order_operands(e, question).expr)};
  for (int round = 0; round < 64; ++round) {
    Tokens next = emit(order_operands(parse(seen.back()), question).expr);
    const auto hit = std::find(seen.begin(), seen.end(), next);
    if (hit != seen.end()) return *std::min_element(hit, seen.end());
    seen.push_back(std::move(next));
  }
  return seen.back();
}

bool answers_equal(const std::optional<Rational>& predicted, const Rational& gold, double tol) {
  if (!predicted) return false;
  const Rational diff = abs(*predicted - gold);
  const Rational scale = std::max(Rational(1), Rational(abs(gold)));
  return diff <= Rational(tol) * scale;
}

std::string join(std::span<const std::string> tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

}  // namespace mwp::expr
