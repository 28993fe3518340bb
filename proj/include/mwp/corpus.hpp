#pragma once

#include "mwp/expr.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace mwp {

/// One solved math word problem.
struct Problem {
  std::string id;
  std::vector<std::string> question;    // word tokens of the description
  std::vector<std::string> expression;  // expression tokens
  expr::Rational answer;
  std::string template_id;              // synthetic template "family/vN", empty otherwise
};

/// Throws DataError unless the problem is well formed: non-empty question and
/// expression, expression parses, and it evaluates to `answer` (exactly, or
/// within `tol` when `tol > 0`).
void validate(const Problem& p, double tol = 0.0);

enum class Split { unspecified, train, valid, test };

std::string_view to_string(Split s) noexcept;

/// Ordered, immutable collection of problems with unique ids.
class Dataset {
public:
  Dataset() = default;
  explicit Dataset(std::vector<Problem> problems, Split split = Split::unspecified);

  const std::vector<Problem>& problems() const noexcept { return problems_; }
  std::size_t size() const noexcept { return problems_.size(); }
  bool empty() const noexcept { return problems_.empty(); }
  const Problem& operator[](std::size_t i) const { return problems_[i]; }
  auto begin() const noexcept { return problems_.begin(); }
  auto end() const noexcept { return problems_.end(); }
  Split split() const noexcept { return split_; }

  /// Index of the problem with `id`, or -1.
  std::ptrdiff_t find(std::string_view id) const;

private:
  std::vector<Problem> problems_;
  std::unordered_map<std::string, std::size_t> by_id_;
  Split split_ = Split::unspecified;
};

/// Whitespace split; inside a run, numbers ("18", "3.5", "20%") and the
/// operator glyphs + − × ÷ ( ) are tokens of their own, every other non-ASCII
/// code point is a single-character token, and what remains forms word tokens.
std::vector<std::string> tokenize_text(std::string_view text);

struct LoadOptions {
  Split split = Split::unspecified;
  /// 0 demands exact answers; corpora with rounded answers can pass e.g. 1e-4.
  double answer_tol = 0.0;
};

/// Reads records {id, question, equation, answer[, template_id]}, one JSON
/// object per line. A leading "x=" on the equation is dropped. Errors carry
/// the 1-based line number.
Dataset load_jsonl(const std::filesystem::path& path, const LoadOptions& options = {});

/// Writes the same schema: question and equation are space-joined tokens.
void save_jsonl(const Dataset& ds, const std::filesystem::path& path);

/// Token ↔ id table with the decoder's generation subset.
class Vocab {
public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kBos = 2;
  static constexpr int kEos = 3;
  static constexpr std::string_view kPadToken = "<pad>";
  static constexpr std::string_view kUnkToken = "<unk>";
  static constexpr std::string_view kBosToken = "<s>";
  static constexpr std::string_view kEosToken = "</s>";

  /// `tokens` excludes the reserved ones; `generation` lists tokens (a subset
  /// of the table, EOS allowed) the decoder may emit from its vocabulary head.
  Vocab(const std::vector<std::string>& tokens, const std::vector<std::string>& generation);

  int size() const noexcept { return static_cast<int>(tokens_.size()); }
  int id(std::string_view token) const;  // kUnk when absent
  bool contains(std::string_view token) const;
  const std::string& token(int id) const;
  std::vector<int> ids(const std::vector<std::string>& tokens) const;

  int gen_size() const noexcept { return static_cast<int>(generation_.size()); }
  int gen_to_id(int gen_index) const { return generation_.at(static_cast<std::size_t>(gen_index)); }
  int gen_index(int id) const;  // -1 when `id` is not a generation token
  int gen_index(std::string_view token) const;
  const std::string& gen_token(int gen_index) const { return token(gen_to_id(gen_index)); }

  /// Every token beyond the reserved four, in id order.
  std::vector<std::string> plain_tokens() const;
  std::vector<std::string> generation_tokens() const;

  void save(const std::filesystem::path& path) const;  // JSON
  static Vocab load(const std::filesystem::path& path);

private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
  std::vector<int> generation_;
  std::vector<int> gen_of_id_;
};

/// Tokens seen at least `min_freq` times get ids; every expression token is in
/// the generation subset (and in the table regardless of frequency), plus EOS.
Vocab build_vocab(const Dataset& train, int min_freq = 1);

/// Deterministic templated English word problems. Families cover sums,
/// differences, areas, unit prices and scoring rules; each family has several
/// paraphrases. Numbers are drawn from [2, 99], operands appear in the gold
/// expression in question order, and only families with at most `max_ops`
/// operators are used (`max_ops` in [1, 5]). Some gold expressions carry
/// redundant brackets, as hand-written annotations do.
Dataset generate_synthetic(std::size_t n, std::uint64_t seed, int max_ops = 5);

/// Family part of a template id ("sum2/v1" → "sum2").
std::string template_family(std::string_view template_id);

/// Splits a synthetic corpus so the test set uses paraphrases never seen in
/// training: for every family the last paraphrase is held out. Test takes the
/// first `test_size` held-out problems; train gets every other problem.
struct TrainTestSplit {
  Dataset train;
  Dataset test;
};
TrainTestSplit paraphrase_split(const Dataset& ds, std::size_t test_size);

}  // namespace mwp
