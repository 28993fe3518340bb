#include "mwp/corpus.hpp"

#include "mwp/error.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <set>

namespace mwp {

using nlohmann::json;

void validate(const Problem& p, double tol) {
  if (p.question.empty()) throw DataError("problem " + p.id + ": empty question");
  if (p.expression.empty()) throw DataError("problem " + p.id + ": empty expression");
  const auto e = expr::parse(p.expression);
  const auto value = expr::try_evaluate(e);
  if (!value) throw DataError("problem " + p.id + ": expression divides by zero");
  const bool ok = tol > 0.0 ? expr::answers_equal(value, p.answer, tol) : *value == p.answer;
  if (!ok) {
    throw DataError("problem " + p.id + ": expression evaluates to " + expr::to_string(*value) +
                    ", answer is " + expr::to_string(p.answer));
  }
}

std::string_view to_string(Split s) noexcept {
  switch (s) {
    case Split::train: return "train";
    case Split::valid: return "valid";
    case Split::test: return "test";
    case Split::unspecified: break;
  }
  return "unspecified";
}

Dataset::Dataset(std::vector<Problem> problems, Split split) : problems_(std::move(problems)), split_(split) {
  by_id_.reserve(problems_.size());
  for (std::size_t i = 0; i < problems_.size(); ++i) {
    if (!by_id_.emplace(problems_[i].id, i).second) {
      throw DataError("duplicate problem id '" + problems_[i].id + "'");
    }
  }
}

std::ptrdiff_t Dataset::find(std::string_view id) const {
  const auto it = by_id_.find(std::string(id));
  return it == by_id_.end() ? -1 : static_cast<std::ptrdiff_t>(it->second);
}

namespace {

std::size_t utf8_length(unsigned char lead) {
  if (lead < 0x80) return 1;
  if ((lead >> 5) == 0x6) return 2;
  if ((lead >> 4) == 0xE) return 3;
  if ((lead >> 3) == 0x1E) return 4;
  return 1;
}

bool is_digit(char c) { return std::isdigit(static_cast<unsigned char>(c)) != 0; }

// ASCII operators and sentence punctuation become tokens of their own.
bool is_ascii_operator(char c) {
  return c == '+' || c == '(' || c == ')' || c == '.' || c == ',' || c == '?' || c == '!' || c == ';' || c == ':';
}

}  // namespace

std::vector<std::string> tokenize_text(std::string_view text) {
  std::vector<std::string> out;
  std::string word;
  auto flush = [&] {
    if (!word.empty()) out.push_back(std::move(word));
    word.clear();
  };
  std::size_t i = 0;
  const auto n = text.size();
  while (i < n) {
    const char c = text[i];
    const auto uc = static_cast<unsigned char>(c);
    if (uc < 0x80 && std::isspace(uc)) {
      flush();
      ++i;
      continue;
    }
    if (is_digit(c)) {
      flush();
      const auto start = i;
      while (i < n && is_digit(text[i])) ++i;
      if (i + 1 < n && text[i] == '.' && is_digit(text[i + 1])) {
        ++i;
        while (i < n && is_digit(text[i])) ++i;
      }
      if (i < n && text[i] == '%') ++i;
      out.emplace_back(text.substr(start, i - start));
      continue;
    }
    if (is_ascii_operator(c)) {
      flush();
      out.emplace_back(1, c);
      ++i;
      continue;
    }
    if (uc >= 0x80) {
      // Operator glyphs and any other non-ASCII code point stand alone.
      flush();
      const auto len = std::min(utf8_length(uc), n - i);
      out.emplace_back(text.substr(i, len));
      i += len;
      continue;
    }
    word += c;
    ++i;
  }
  flush();
  return out;
}

Dataset load_jsonl(const std::filesystem::path& path, const LoadOptions& options) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<Problem> problems;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); })) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(std::string("malformed JSON: ") + e.what(), line_no);
    }
    try {
      Problem p;
      const auto& id = rec.at("id");
      p.id = id.is_string() ? id.get<std::string>() : id.dump();
      p.question = tokenize_text(rec.at("question").get<std::string>());
      std::string equation = rec.at("equation").get<std::string>();
      auto first = equation.find_first_not_of(" \t");
      if (first != std::string::npos && equation.size() > first + 1 &&
          (equation[first] == 'x' || equation[first] == 'X')) {
        auto eq = equation.find_first_not_of(" \t", first + 1);
        if (eq != std::string::npos && equation[eq] == '=') equation = equation.substr(eq + 1);
      }
      p.expression = expr::tokenize(equation);
      const auto& answer = rec.at("answer");
      p.answer = expr::parse_number(answer.is_string() ? answer.get<std::string>() : answer.dump());
      if (rec.contains("template_id")) p.template_id = rec["template_id"].get<std::string>();
      validate(p, options.answer_tol);
      problems.push_back(std::move(p));
    } catch (const ParseError& e) {
      throw ParseError(e.what(), line_no);
    } catch (const DataError& e) {
      throw ParseError(e.what(), line_no);
    } catch (const json::exception& e) {
      throw ParseError(std::string("bad record: ") + e.what(), line_no);
    }
  }
  if (in.bad()) throw DataError("read error on " + path.string());
  return Dataset(std::move(problems), options.split);
}

void save_jsonl(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& p : ds) {
    json rec = {{"id", p.id},
                {"question", expr::join(p.question)},
                {"equation", expr::join(p.expression)},
                {"answer", expr::to_string(p.answer)}};
    if (!p.template_id.empty()) rec["template_id"] = p.template_id;
    out << rec.dump() << '\n';
  }
  if (!out) throw DataError("write error on " + path.string());
}

Vocab::Vocab(const std::vector<std::string>& tokens, const std::vector<std::string>& generation) {
  for (auto t : {kPadToken, kUnkToken, kBosToken, kEosToken}) {
    ids_.emplace(std::string(t), static_cast<int>(tokens_.size()));
    tokens_.emplace_back(t);
  }
  for (const auto& t : tokens) {
    if (ids_.emplace(t, static_cast<int>(tokens_.size())).second) tokens_.push_back(t);
  }
  gen_of_id_.assign(tokens_.size(), -1);
  for (const auto& t : generation) {
    const auto it = ids_.find(t);
    if (it == ids_.end()) throw DataError("generation token '" + t + "' missing from vocabulary");
    if (gen_of_id_[static_cast<std::size_t>(it->second)] >= 0) continue;
    gen_of_id_[static_cast<std::size_t>(it->second)] = static_cast<int>(generation_.size());
    generation_.push_back(it->second);
  }
}

int Vocab::id(std::string_view token) const {
  const auto it = ids_.find(std::string(token));
  return it == ids_.end() ? kUnk : it->second;
}

bool Vocab::contains(std::string_view token) const { return ids_.count(std::string(token)) > 0; }

const std::string& Vocab::token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }

std::vector<int> Vocab::ids(const std::vector<std::string>& tokens) const {
  std::vector<int> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(id(t));
  return out;
}

int Vocab::gen_index(int id) const {
  if (id < 0 || id >= size()) return -1;
  return gen_of_id_[static_cast<std::size_t>(id)];
}

int Vocab::gen_index(std::string_view token) const {
  const auto it = ids_.find(std::string(token));
  return it == ids_.end() ? -1 : gen_of_id_[static_cast<std::size_t>(it->second)];
}

std::vector<std::string> Vocab::plain_tokens() const { return {tokens_.begin() + 4, tokens_.end()}; }

std::vector<std::string> Vocab::generation_tokens() const {
  std::vector<std::string> out;
  for (int id : generation_) out.push_back(token(id));
  return out;
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << json{{"tokens", plain_tokens()}, {"generation", generation_tokens()}}.dump(1) << '\n';
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    const json j = json::parse(in);
    return Vocab(j.at("tokens").get<std::vector<std::string>>(), j.at("generation").get<std::vector<std::string>>());
  } catch (const json::exception& e) {
    throw DataError("bad vocabulary file " + path.string() + ": " + e.what());
  }
}

Vocab build_vocab(const Dataset& train, int min_freq) {
  if (train.empty()) throw DataError("cannot build a vocabulary from an empty dataset");
  if (min_freq < 1) throw UsageError("min_freq must be positive");
  std::map<std::string, int> freq;
  std::set<std::string> expression_tokens;
  for (const auto& p : train) {
    for (const auto& t : p.question) ++freq[t];
    for (const auto& t : p.expression) {
      ++freq[t];
      expression_tokens.insert(t);
    }
  }
  std::vector<std::string> tokens;
  for (const auto& [t, f] : freq) {
    if (f >= min_freq || expression_tokens.count(t)) tokens.push_back(t);
  }
  std::vector<std::string> generation{std::string(Vocab::kEosToken)};
  generation.insert(generation.end(), expression_tokens.begin(), expression_tokens.end());
  return Vocab(tokens, generation);
}

// ---------------------------------------------------------------------------
// Synthetic corpus

namespace {

struct Family {
  std::string name;
  int ops;
  int slots;
  std::string pattern;  // expression over {0}, {1}, ...
  std::vector<std::string> paraphrases;
  // Draws slot values; returns false to reject the draw.
  std::function<bool(std::mt19937_64&, std::vector<int>&)> draw;
};

int uniform(std::mt19937_64& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

auto free_draw(int slots) {
  return [slots](std::mt19937_64& rng, std::vector<int>& v) {
    v.resize(static_cast<std::size_t>(slots));
    for (auto& x : v) x = uniform(rng, 2, 99);
    return true;
  };
}

const std::vector<Family>& families() {
  static const std::vector<Family> table = [] {
    std::vector<Family> f;
    f.push_back({"sum2", 1, 2, "{0} + {1}",
                 {"Tom has {0} apples and his friend gives him {1} more apples . How many apples does Tom have now ?",
                  "There are {0} red balls and {1} blue balls in a box . How many balls are in the box altogether ?",
                  "A farm has {0} cows and {1} sheep . How many animals does the farm have in total ?",
                  "A library bought {0} storybooks in May and {1} storybooks in June . How many storybooks did it buy in the two months ?"},
                 free_draw(2)});
    f.push_back({"sum3", 2, 3, "{0} + {1} + {2}",
                 {"A shop sold {0} pens on Monday , {1} pens on Tuesday and {2} pens on Wednesday . How many pens were sold in the three days ?",
                  "Amy read {0} pages , Ben read {1} pages and Carl read {2} pages . How many pages did they read altogether ?",
                  "A bus carried {0} people in the morning , {1} people at noon and {2} people in the evening . How many people did the bus carry that day ?"},
                 free_draw(3)});
    f.push_back({"diff", 1, 2, "{0} − {1}",
                 {"Lily had {0} stickers and gave {1} stickers to her sister . How many stickers does Lily have left ?",
                  "A tank holds {0} liters of water and {1} liters leak out . How many liters of water remain in the tank ?",
                  "There were {0} birds on a tree and {1} birds flew away . How many birds are still on the tree ?"},
                 [](std::mt19937_64& rng, std::vector<int>& v) {
                   v = {uniform(rng, 3, 99), 0};
                   v[1] = uniform(rng, 2, v[0] - 1);
                   return true;
                 }});
    f.push_back({"diff2", 2, 3, "{0} − {1} − {2}",
                 {"A train had {0} passengers . At the first stop {1} passengers got off and at the second stop {2} passengers got off . How many passengers are still on the train ?",
                  "Mia had {0} yuan . She spent {1} yuan on a book and {2} yuan on lunch . How much money does Mia have now ?",
                  "A baker made {0} cookies , sold {1} cookies in the morning and {2} cookies in the afternoon . How many cookies are left ?"},
                 [](std::mt19937_64& rng, std::vector<int>& v) {
                   v = {uniform(rng, 6, 99), uniform(rng, 2, 48), uniform(rng, 2, 48)};
                   return v[0] > v[1] + v[2];
                 }});
    f.push_back({"rect_area", 1, 2, "{0} × {1}",
                 {"A rectangle is {0} meters long and {1} meters wide . What is its area in square meters ?",
                  "A garden has a length of {0} meters and a width of {1} meters . How many square meters is the garden ?",
                  "A classroom floor measures {0} meters by {1} meters . What is the area of the floor ?"},
                 free_draw(2)});
    f.push_back({"rect_perimeter", 2, 2, "( {0} + {1} ) × 2",
                 {"A rectangular field is {0} meters long and {1} meters wide . How long is the fence around the field ?",
                  "The length of a rectangle is {0} cm and its width is {1} cm . What is the perimeter of the rectangle ?",
                  "A photo frame is {0} cm long and {1} cm wide . How many cm of ribbon go once around its edge ?"},
                 free_draw(2)});
    f.push_back({"pool", 5, 3, "{0} × {1} + ( {0} + {1} ) × {2} × 2",
                 {"A swimming pool is {0} meters long , {1} meters wide and {2} meters deep . Its walls and bottom are covered with cement . How many square meters of cement are used ?",
                  "A rectangular water pool has a length of {0} meters , a width of {1} meters and a depth of {2} meters . Its bottom and four walls are tiled . How many square meters are tiled ?",
                  "An open box is {0} cm long , {1} cm wide and {2} cm high . How many square cm of cardboard make the box without a lid ?"},
                 [](std::mt19937_64& rng, std::vector<int>& v) {
                   v = {uniform(rng, 10, 99), uniform(rng, 5, 60), uniform(rng, 2, 9)};
                   return true;
                 }});
    f.push_back({"total_cost", 1, 2, "{0} × {1}",
                 {"Each notebook costs {0} yuan . How much do {1} notebooks cost ?",
                  "A pencil box is sold for {0} dollars . What is the cost of {1} pencil boxes ?",
                  "One ticket costs {0} yuan and a class buys {1} tickets . How much does the class pay ?"},
                 free_draw(2)});
    f.push_back({"two_items", 3, 4, "{0} × {1} + {2} × {3}",
                 {"Mom bought {0} kilograms of apples at {1} yuan per kilogram and {2} kilograms of pears at {3} yuan per kilogram . How much did she spend ?",
                  "A school bought {0} desks at {1} dollars each and {2} chairs at {3} dollars each . How much did the school pay in total ?",
                  "Jack buys {0} cakes for {1} yuan each and {2} drinks for {3} yuan each . How much money does Jack spend ?"},
                 free_draw(4)});
    f.push_back({"unit_price", 1, 2, "{0} ÷ {1}",
                 {"A box of pencils costs {0} yuan and holds {1} pencils . How much does each pencil cost ?",
                  "{0} yuan is shared equally among {1} children . How much does each child get ?",
                  "A rope {0} meters long is cut into {1} equal pieces . How long is each piece ?"},
                 [](std::mt19937_64& rng, std::vector<int>& v) {
                   v = {0, uniform(rng, 2, 12)};
                   v[0] = v[1] * uniform(rng, 1, 99 / v[1]);
                   return v[0] >= 2;
                 }});
    f.push_back({"change", 2, 3, "{0} − {1} × {2}",
                 {"Sam had {0} yuan . He bought {1} pens at {2} yuan each . How much money does Sam have left ?",
                  "A farmer had {0} kilograms of rice and sold {1} bags of {2} kilograms each . How many kilograms of rice are left ?",
                  "A hall has {0} seats and {1} rows of {2} seats are taken . How many seats are empty ?"},
                 [](std::mt19937_64& rng, std::vector<int>& v) {
                   v = {uniform(rng, 10, 99), uniform(rng, 2, 9), uniform(rng, 2, 12)};
                   return v[0] > v[1] * v[2];
                 }});
    f.push_back({"average", 3, 3, "( {0} + {1} + {2} ) ÷ 3",
                 {"Three trees are {0} , {1} and {2} meters tall . What is their average height ?",
                  "A student scored {0} , {1} and {2} points in three games . What is the average score per game ?",
                  "Three bags weigh {0} , {1} and {2} kilograms . On average , how heavy is one bag ?"},
                 free_draw(3)});
    f.push_back({"speed", 2, 3, "( {0} + {1} ) × {2}",
                 {"Two cars leave the same place in opposite directions at {0} km per hour and {1} km per hour . How far apart are they after {2} hours ?",
                  "Two cyclists ride away from each other at {0} meters per minute and {1} meters per minute . What distance separates them after {2} minutes ?",
                  "Two boats sail apart from a harbor at {0} km per hour and {1} km per hour . How many km apart are the boats after {2} hours ?"},
                 [](std::mt19937_64& rng, std::vector<int>& v) {
                   v = {uniform(rng, 2, 99), uniform(rng, 2, 99), uniform(rng, 2, 9)};
                   return true;
                 }});
    f.push_back({"scoring", 5, 4, "{0} − ( {0} × {1} − {3} ) ÷ ( {1} + {2} )",
                 {"A quiz has {0} questions . Each correct answer earns {1} points and each wrong answer loses {2} points . Xiao Ming scored {3} points . How many questions did he answer correctly ?",
                  "There are {0} questions in a contest . {1} points are given for a right answer and {2} points are taken off for a wrong one . Wang Lei got {3} points . How many did he get right ?",
                  "In a knowledge test with {0} questions , a correct answer scores {1} points and a wrong answer costs {2} points . Anna ended with {3} points . How many questions did Anna answer correctly ?"},
                 [](std::mt19937_64& rng, std::vector<int>& v) {
                   const int total = uniform(rng, 5, 30);
                   const int gain = uniform(rng, 2, 9);
                   const int loss = uniform(rng, 2, 6);
                   const int correct = uniform(rng, 0, total);
                   const int score = correct * gain - (total - correct) * loss;
                   v = {total, gain, loss, score};
                   return score >= 2 && score <= 99;
                 }});
    f.push_back({"net_score", 3, 4, "{0} × {1} − {2} × {3}",
                 {"A player hits {0} targets worth {1} points each and misses {2} shots costing {3} points each . What is the final score ?",
                  "A team wins {0} games for {1} points each and loses {2} games at a penalty of {3} points each . How many points does the team have ?",
                  "A stall earns {0} yuan on each of {1} sunny days and loses {2} yuan on each of {3} rainy days . What is the net profit ?"},
                 [](std::mt19937_64& rng, std::vector<int>& v) {
                   v = {uniform(rng, 2, 30), uniform(rng, 2, 9), uniform(rng, 2, 9), uniform(rng, 2, 6)};
                   return v[0] * v[1] > v[2] * v[3];
                 }});
    return f;
  }();
  return table;
}

std::string fill(const std::string& pattern, const std::vector<int>& values) {
  std::string out;
  for (std::size_t i = 0; i < pattern.size(); ++i) {
    if (pattern[i] == '{') {
      const auto close = pattern.find('}', i);
      const auto slot = std::stoul(pattern.substr(i + 1, close - i - 1));
      out += std::to_string(values.at(slot));
      i = close;
    } else {
      out += pattern[i];
    }
  }
  return out;
}

// Emits `e` with the minimal brackets plus, with probability `p` per operator
// node, a redundant pair around it.
void emit_noisy(const expr::Expr& e, bool needed, double p, std::mt19937_64& rng, expr::Tokens& out) {
  if (e.is_number()) {
    out.push_back(e.token());
    return;
  }
  const bool wrap = needed || std::bernoulli_distribution(p)(rng);
  if (wrap) out.emplace_back(expr::kOpen);
  const auto child_needs = [&](const expr::Expr& c, bool right) {
    if (c.is_number()) return false;
    const int cp = expr::precedence(c.op());
    const int pp = expr::precedence(e.op());
    if (cp != pp) return cp < pp;
    return right && (e.op() == expr::Op::sub || e.op() == expr::Op::div);
  };
  emit_noisy(e.left(), child_needs(e.left(), false), p, rng, out);
  out.emplace_back(expr::glyph(e.op()));
  emit_noisy(e.right(), child_needs(e.right(), true), p, rng, out);
  if (wrap) out.emplace_back(expr::kClose);
}

}  // namespace

Dataset generate_synthetic(std::size_t n, std::uint64_t seed, int max_ops) {
  if (n < 1) throw UsageError("generate_synthetic needs n >= 1");
  if (max_ops < 1 || max_ops > 5) throw UsageError("max_ops must lie in [1, 5]");
  std::vector<const Family*> usable;
  for (const auto& f : families()) {
    if (f.ops <= max_ops) usable.push_back(&f);
  }
  std::mt19937_64 rng(seed);
  std::vector<Problem> problems;
  problems.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Family& fam = *usable[std::uniform_int_distribution<std::size_t>(0, usable.size() - 1)(rng)];
    const auto variant = std::uniform_int_distribution<std::size_t>(0, fam.paraphrases.size() - 1)(rng);
    std::vector<int> values;
    while (!fam.draw(rng, values)) {
    }
    Problem p;
    p.id = "syn" + std::to_string(seed) + "-" + std::to_string(i);
    p.template_id = fam.name + "/v" + std::to_string(variant);
    p.question = tokenize_text(fill(fam.paraphrases[variant], values));
    const auto gold = expr::parse(expr::tokenize(fill(fam.pattern, values)));
    emit_noisy(gold, false, 0.15, rng, p.expression);
    p.answer = expr::evaluate(gold);
    validate(p);
    problems.push_back(std::move(p));
  }
  return Dataset(std::move(problems));
}

std::string template_family(std::string_view template_id) {
  const auto slash = template_id.rfind('/');
  return std::string(slash == std::string_view::npos ? template_id : template_id.substr(0, slash));
}

TrainTestSplit paraphrase_split(const Dataset& ds, std::size_t test_size) {
  auto variant_of = [](const std::string& tid) -> int {
    const auto pos = tid.rfind("/v");
    if (pos == std::string::npos) return -1;
    try {
      return std::stoi(tid.substr(pos + 2));
    } catch (const std::exception&) {
      return -1;
    }
  };
  std::map<std::string, int> held_out;
  for (const auto& p : ds) {
    const int v = variant_of(p.template_id);
    if (v < 0) throw DataError("problem " + p.id + " has no paraphrase template id");
    auto& best = held_out[template_family(p.template_id)];
    best = std::max(best, v);
  }
  std::vector<Problem> train;
  std::vector<Problem> test;
  for (const auto& p : ds) {
    const bool hidden = variant_of(p.template_id) == held_out[template_family(p.template_id)];
    if (!hidden) {
      train.push_back(p);
    } else if (test.size() < test_size) {
      test.push_back(p);
    }
  }
  if (test.size() < test_size) {
    throw DataError("only " + std::to_string(test.size()) + " held-out paraphrase problems for a test set of " +
                    std::to_string(test_size));
  }
  return {Dataset(std::move(train), Split::train), Dataset(std::move(test), Split::test)};
}

}  // namespace mwp
