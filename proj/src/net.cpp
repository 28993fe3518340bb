#include "mwp/net.hpp"

#include "mwp/binary_io.hpp"
#include "mwp/error.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

namespace mwp::net {

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;

Matrix normal(Index rows, Index cols, double std, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

std::vector<int> iota_ids(Index begin, Index count) {
  std::vector<int> v(static_cast<std::size_t>(count));
  std::iota(v.begin(), v.end(), static_cast<int>(begin));
  return v;
}

}  // namespace

void ModelConfig::validate() const {
  if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0) {
    throw UsageError("d_model must be a positive multiple of n_heads");
  }
  if (layers_repr < 1 || layers_analogy < 1) throw UsageError("layer counts must be positive");
  if (max_positions < 2) throw UsageError("max_positions must be at least 2");
  if (n_segments != 4) throw UsageError("the analogy stack uses exactly 4 segments");
  if (vocab_size < 5) throw UsageError("vocab_size is too small");
  if (gen_size < 1) throw UsageError("gen_size must be positive");
  if (ff_mult < 1) throw UsageError("ff_mult must be positive");
  if (dropout < 0.0 || dropout >= 1.0) throw UsageError("dropout must be in [0, 1)");
  if (!(init_std > 0.0)) throw UsageError("init_std must be positive");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"d_model", c.d_model},       {"n_heads", c.n_heads},
       {"layers_repr", c.layers_repr}, {"layers_analogy", c.layers_analogy},
       {"max_positions", c.max_positions}, {"n_segments", c.n_segments},
       {"vocab_size", c.vocab_size},   {"gen_size", c.gen_size},
       {"ff_mult", c.ff_mult},         {"dropout", c.dropout},
       {"init_std", c.init_std},       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  static const std::set<std::string> known = {"d_model",    "n_heads",  "layers_repr", "layers_analogy",
                                              "max_positions", "n_segments", "vocab_size", "gen_size",
                                              "ff_mult",    "dropout",  "init_std",    "seed"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw UsageError("unknown model config field '" + key + "'");
  }
  const ModelConfig d;
  c.d_model = j.value("d_model", d.d_model);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.layers_repr = j.value("layers_repr", d.layers_repr);
  c.layers_analogy = j.value("layers_analogy", d.layers_analogy);
  c.max_positions = j.value("max_positions", d.max_positions);
  c.n_segments = j.value("n_segments", d.n_segments);
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.gen_size = j.value("gen_size", d.gen_size);
  c.ff_mult = j.value("ff_mult", d.ff_mult);
  c.dropout = j.value("dropout", d.dropout);
  c.init_std = j.value("init_std", d.init_std);
  c.seed = j.value("seed", d.seed);
}

Index SequenceLayout::begin(Segment s) const noexcept {
  switch (s) {
    case Segment::retrieved_question: return 0;
    case Segment::retrieved_expression: return zq;
    case Segment::question: return zq + ze;
    case Segment::expression: return zq + ze + xq;
  }
  return 0;
}

Index SequenceLayout::length(Segment s) const noexcept {
  switch (s) {
    case Segment::retrieved_question: return zq;
    case Segment::retrieved_expression: return ze;
    case Segment::question: return xq;
    case Segment::expression: return xe;
  }
  return 0;
}

Segment SequenceLayout::segment_of(Index position) const {
  if (position < 0 || position >= total()) throw Error("position outside the layout");
  if (position < zq) return Segment::retrieved_question;
  if (position < zq + ze) return Segment::retrieved_expression;
  if (position < zq + ze + xq) return Segment::question;
  return Segment::expression;
}

AttentionMask::AttentionMask(const SequenceLayout& layout) {
  const Index t = layout.total();
  data_.size = t;
  data_.cells.assign(static_cast<std::size_t>(t * t), 0);
  const Index z_end = layout.zq + layout.ze;
  const Index xq_end = z_end + layout.xq;
  for (Index i = 0; i < t; ++i) {
    const Segment s = layout.segment_of(i);
    for (Index j = 0; j < t; ++j) {
      bool visible = false;
      switch (s) {
        case Segment::retrieved_question: visible = j < layout.zq; break;
        case Segment::retrieved_expression: visible = j <= i; break;
        case Segment::question: visible = j < xq_end; break;
        case Segment::expression: visible = j <= i; break;
      }
      data_.cells[static_cast<std::size_t>(i * t + j)] = visible ? 1 : 0;
    }
  }
}

AttentionMask build_mask(const SequenceLayout& layout) { return AttentionMask(layout); }

Model::Model(const ModelConfig& config) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(config_.seed);
  const int d = config_.d_model;
  token_ = params_.add("tok", normal(config_.vocab_size, d, config_.init_std, rng));
  repr_ = make_stack("repr", 2, config_.layers_repr, rng);
  analogy_ = make_stack("analogy", config_.n_segments, config_.layers_analogy, rng);
  w_gen_ = params_.add("head.gen", normal(d, config_.gen_size, config_.init_std, rng));
  w_gate_ = params_.add("head.gate", normal(d, 1, config_.init_std, rng));
  w_ind_ = params_.add("head.inductive", normal(d, config_.gen_size, config_.init_std, rng));
}

StackParams Model::make_stack(const std::string& prefix, int segments, int layers, std::mt19937_64& rng) {
  const Index d = config_.d_model;
  const Index ff = d * config_.ff_mult;
  const double s = config_.init_std;
  StackParams st;
  st.segment = params_.add(prefix + ".seg", normal(segments, d, s, rng));
  st.position = params_.add(prefix + ".pos", normal(config_.max_positions, d, s, rng));
  for (int l = 0; l < layers; ++l) {
    const std::string b = prefix + ".block" + std::to_string(l);
    BlockParams bp{};
    bp.ln1_gain = params_.add(b + ".ln1.g", Matrix::Ones(1, d));
    bp.ln1_bias = params_.add(b + ".ln1.b", Matrix::Zero(1, d));
    bp.w_qkv = params_.add(b + ".qkv.w", normal(d, 3 * d, s, rng));
    bp.b_qkv = params_.add(b + ".qkv.b", Matrix::Zero(1, 3 * d));
    bp.w_out = params_.add(b + ".out.w", normal(d, d, s, rng));
    bp.b_out = params_.add(b + ".out.b", Matrix::Zero(1, d));
    bp.ln2_gain = params_.add(b + ".ln2.g", Matrix::Ones(1, d));
    bp.ln2_bias = params_.add(b + ".ln2.b", Matrix::Zero(1, d));
    bp.w_ff1 = params_.add(b + ".ff1.w", normal(d, ff, s, rng));
    bp.b_ff1 = params_.add(b + ".ff1.b", Matrix::Zero(1, ff));
    bp.w_ff2 = params_.add(b + ".ff2.w", normal(ff, d, s, rng));
    bp.b_ff2 = params_.add(b + ".ff2.b", Matrix::Zero(1, d));
    st.blocks.push_back(bp);
  }
  st.final_gain = params_.add(prefix + ".ln_f.g", Matrix::Ones(1, d));
  st.final_bias = params_.add(prefix + ".ln_f.b", Matrix::Zero(1, d));
  return st;
}

void Model::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  io::write_magic(out, "MWPCKPT");
  io::write_pod<std::uint32_t>(out, kCheckpointVersion);
  io::write_string(out, nlohmann::json(config_).dump());
  io::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(params_.size()));
  for (const auto& p : params_) {
    io::write_string(out, p.name);
    io::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(p.value.rows()));
    io::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(p.value.cols()));
    io::write_doubles(out, {p.value.data(), static_cast<std::size_t>(p.value.size())});
  }
  if (!out) throw DataError("write error on " + path.string());
}

Model Model::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  io::expect_magic(in, "MWPCKPT", "checkpoint");
  const auto version = io::read_pod<std::uint32_t>(in);
  if (version != kCheckpointVersion) {
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  }
  ModelConfig config;
  try {
    config = nlohmann::json::parse(io::read_string(in)).get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("bad checkpoint config: ") + e.what());
  }
  Model m(config);
  const auto count = io::read_pod<std::uint32_t>(in);
  if (count != m.params_.size()) {
    throw DataError("checkpoint has " + std::to_string(count) + " tensors, model expects " +
                    std::to_string(m.params_.size()));
  }
  std::vector<bool> seen(m.params_.size(), false);
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::string name = io::read_string(in);
    const auto rows = io::read_pod<std::uint32_t>(in);
    const auto cols = io::read_pod<std::uint32_t>(in);
    const auto at = m.params_.find(name);
    if (at < 0) throw DataError("checkpoint tensor '" + name + "' is not a model parameter");
    auto& p = m.params_[static_cast<std::size_t>(at)];
    if (seen[static_cast<std::size_t>(at)]) throw DataError("duplicate checkpoint tensor '" + name + "'");
    if (rows != p.value.rows() || cols != p.value.cols()) {
      throw DataError("tensor '" + name + "' has shape " + std::to_string(rows) + "x" + std::to_string(cols) +
                      ", expected " + std::to_string(p.value.rows()) + "x" + std::to_string(p.value.cols()));
    }
    io::read_doubles(in, {p.value.data(), static_cast<std::size_t>(p.value.size())});
    seen[static_cast<std::size_t>(at)] = true;
  }
  return m;
}

CopySpace::CopySpace(const Vocab& vocab, std::span<const std::string> question)
    : vocab_(&vocab), gen_size_(vocab.gen_size()) {
  question_outcomes_.reserve(question.size());
  for (const auto& t : question) {
    int o = vocab.gen_index(t);
    if (o < 0) {
      const auto it = std::find(extra_.begin(), extra_.end(), t);
      o = gen_size_ + static_cast<int>(it - extra_.begin());
      if (it == extra_.end()) extra_.push_back(t);
    }
    question_outcomes_.push_back(o);
  }
}

int CopySpace::outcome(std::string_view token) const {
  const int g = vocab_->gen_index(token);
  if (g >= 0) return g;
  const auto it = std::find(extra_.begin(), extra_.end(), token);
  return it == extra_.end() ? -1 : gen_size_ + static_cast<int>(it - extra_.begin());
}

const std::string& CopySpace::token(int outcome) const {
  if (outcome < 0 || outcome >= size()) throw Error("outcome id out of range");
  if (outcome < gen_size_) return vocab_->gen_token(outcome);
  return extra_[static_cast<std::size_t>(outcome - gen_size_)];
}

ad::Var embed_inputs(ad::Graph& g, const Model& m, std::span<const int> tokens, std::span<const int> segments,
                     Index position_offset) {
  if (tokens.size() != segments.size()) throw Error("token and segment counts differ");
  const auto n = static_cast<Index>(tokens.size());
  if (position_offset + n > m.config().max_positions) {
    throw DataError("sequence of " + std::to_string(position_offset + n) + " positions exceeds max_positions " +
                    std::to_string(m.config().max_positions));
  }
  const auto& st = m.representation();
  const ad::Var tok = g.gather_rows(g.param(m.params(), m.token_embedding()), tokens);
  const ad::Var seg = g.gather_rows(g.param(m.params(), st.segment), segments);
  const auto pos_ids = iota_ids(position_offset, n);
  const ad::Var pos = g.gather_rows(g.param(m.params(), st.position), pos_ids);
  return g.add(g.add(tok, seg), pos);
}

StackOutput run_stack(ad::Graph& g, const Model& m, const StackParams& stack, ad::Var x, const ad::MaskData& mask,
                      std::mt19937_64* dropout_rng) {
  const auto& ps = m.params();
  const int heads = m.config().n_heads;
  const double rate = dropout_rng ? m.config().dropout : 0.0;
  const auto P = [&](std::size_t i) { return g.param(ps, i); };
  const auto drop = [&](ad::Var v) { return rate > 0.0 ? g.dropout(v, rate, *dropout_rng) : v; };
  StackOutput out;
  for (const auto& b : stack.blocks) {
    const ad::Var h1 = g.layer_norm(x, P(b.ln1_gain), P(b.ln1_bias));
    const ad::Var qkv = g.add_row(g.matmul(h1, P(b.w_qkv)), P(b.b_qkv));
    const ad::Var probs = g.attention_probs(qkv, mask, heads);
    const ad::Var mixed = g.attention_mix(probs, qkv, heads);
    const ad::Var attn = g.add_row(g.matmul(mixed, P(b.w_out)), P(b.b_out));
    x = g.add(x, drop(attn));
    const ad::Var h2 = g.layer_norm(x, P(b.ln2_gain), P(b.ln2_bias));
    const ad::Var ff = g.gelu(g.add_row(g.matmul(h2, P(b.w_ff1)), P(b.b_ff1)));
    x = g.add(x, drop(g.add_row(g.matmul(ff, P(b.w_ff2)), P(b.b_ff2))));
    out.hidden.push_back(x);
    out.final_attention = probs;
  }
  out.states = g.layer_norm(x, P(stack.final_gain), P(stack.final_bias));
  return out;
}

StackOutput representation_forward(ad::Graph& g, const Model& m, const ProblemInput& p,
                                   std::mt19937_64* dropout_rng) {
  if (p.question.empty()) throw DataError("empty question");
  if (p.expression.empty()) throw DataError("expression input must start with BOS");
  std::vector<int> tokens(p.question);
  tokens.insert(tokens.end(), p.expression.begin(), p.expression.end());
  std::vector<int> segments(p.question.size(), 0);
  segments.resize(tokens.size(), 1);
  const ad::Var x = embed_inputs(g, m, tokens, segments);
  SequenceLayout layout;
  layout.xq = static_cast<Index>(p.question.size());
  layout.xe = static_cast<Index>(p.expression.size());
  const AttentionMask mask(layout);
  return run_stack(g, m, m.representation(), x, mask.data(), dropout_rng);
}

StackOutput analogy_forward(ad::Graph& g, const Model& m, const StackOutput* retrieved, const StackOutput& problem,
                            const SequenceLayout& layout, std::mt19937_64* dropout_rng) {
  const Index t = layout.total();
  if (t > m.config().max_positions) {
    throw DataError("analogy sequence of " + std::to_string(t) + " positions exceeds max_positions " +
                    std::to_string(m.config().max_positions));
  }
  std::vector<ad::Var> parts;
  if (retrieved) parts.push_back(retrieved->states);
  parts.push_back(problem.states);
  const ad::Var items = g.concat_rows(parts);
  if (g.value(items).rows() != t) throw Error("item memories do not match the layout");
  std::vector<int> segments(static_cast<std::size_t>(t));
  for (Index i = 0; i < t; ++i) segments[static_cast<std::size_t>(i)] = static_cast<int>(layout.segment_of(i));
  const auto& st = m.analogy();
  const ad::Var seg = g.gather_rows(g.param(m.params(), st.segment), segments);
  const auto pos_ids = iota_ids(0, t);
  const ad::Var pos = g.gather_rows(g.param(m.params(), st.position), pos_ids);
  const ad::Var x = g.add(g.add(items, seg), pos);
  const AttentionMask mask(layout);
  return run_stack(g, m, st, x, mask.data(), dropout_rng);
}

JointForward joint_forward(ad::Graph& g, const Model& m, const ProblemInput& problem, const ProblemInput* retrieved,
                           std::mt19937_64* dropout_rng) {
  JointForward f;
  f.problem_items = representation_forward(g, m, problem, dropout_rng);
  if (retrieved) {
    f.retrieved_items = representation_forward(g, m, *retrieved, dropout_rng);
    f.layout.zq = static_cast<Index>(retrieved->question.size());
    f.layout.ze = static_cast<Index>(retrieved->expression.size());
  }
  f.layout.xq = static_cast<Index>(problem.question.size());
  f.layout.xe = static_cast<Index>(problem.expression.size());
  f.relational = analogy_forward(g, m, f.retrieved_items ? &*f.retrieved_items : nullptr, f.problem_items, f.layout,
                                 dropout_rng);
  const auto& ps = m.params();
  const ad::Var xe = g.slice_rows(f.relational.states, f.layout.begin(Segment::expression), f.layout.xe);
  f.generation_logits = g.matmul(xe, g.param(ps, m.generation_weights()));
  f.gate_logits = g.matmul(xe, g.param(ps, m.gate_weights()));
  const ad::Var ze = g.slice_rows(f.relational.states, f.layout.begin(Segment::retrieved_expression), f.layout.ze);
  f.inductive_logits = g.matmul(ze, g.param(ps, m.inductive_weights()));
  return f;
}

Vector generation_distribution(const Matrix& w_gen, const Vector& state) {
  Vector logits = w_gen.transpose() * state;
  logits = (logits.array() - logits.maxCoeff()).exp();
  return logits / logits.sum();
}

Vector copy_distribution(const Matrix& head_rows, Index question_begin, std::span<const int> question_outcomes,
                         int outcome_count) {
  const auto n = static_cast<Index>(question_outcomes.size());
  Vector out = Vector::Zero(outcome_count);
  if (n == 0) return out;
  const auto heads = head_rows.rows();
  for (Index h = 0; h < heads; ++h) {
    const auto row = head_rows.row(h).segment(question_begin, n);
    const double s = row.sum();
    if (!(s > 0.0)) throw NumericalError("copy attention has no mass on the question");
    for (Index i = 0; i < n; ++i) {
      out(question_outcomes[static_cast<std::size_t>(i)]) += row(i) / s;
    }
  }
  return out / static_cast<double>(heads);
}

double gate(const Matrix& w_gate, const Vector& state) {
  const double z = w_gate.col(0).dot(state);
  return 1.0 / (1.0 + std::exp(-z));
}

Vector output_distribution(double p_gen, const Vector& p_gen_dist, const Vector& p_copy) {
  if (p_copy.size() < p_gen_dist.size()) throw Error("copy space smaller than the generation vocabulary");
  Vector out = (1.0 - p_gen) * p_copy;
  out.head(p_gen_dist.size()) += p_gen * p_gen_dist;
  return out;
}

Matrix inductive_logits(const Matrix& w_ind, const Matrix& states) { return states * w_ind; }

Matrix ForwardTrace::attention_row(Index position, int heads) const {
  const Index t = layout.total();
  Matrix rows(heads, t);
  for (int h = 0; h < heads; ++h) rows.row(h) = attention.row(h * t + position);
  return rows;
}

ForwardTrace trace_forward(const Model& m, const ProblemInput& problem, const ProblemInput* retrieved) {
  ad::Graph g(false);
  const JointForward f = joint_forward(g, m, problem, retrieved);
  ForwardTrace tr;
  tr.layout = f.layout;
  for (auto v : f.relational.hidden) tr.hidden.push_back(g.value(v));
  tr.attention = g.value(f.relational.final_attention);
  const Matrix& items_x = g.value(f.problem_items.states);
  tr.item_xq = items_x.topRows(f.layout.xq);
  tr.item_xe = items_x.bottomRows(f.layout.xe);
  if (f.retrieved_items) {
    const Matrix& items_z = g.value(f.retrieved_items->states);
    tr.item_zq = items_z.topRows(f.layout.zq);
    tr.item_ze = items_z.bottomRows(f.layout.ze);
  }
  const Matrix& rel = g.value(f.relational.states);
  tr.rel_zq = rel.middleRows(0, f.layout.zq);
  tr.rel_ze = rel.middleRows(f.layout.begin(Segment::retrieved_expression), f.layout.ze);
  tr.rel_xq = rel.middleRows(f.layout.begin(Segment::question), f.layout.xq);
  tr.rel_xe = rel.middleRows(f.layout.begin(Segment::expression), f.layout.xe);
  tr.generation_logits = g.value(f.generation_logits);
  tr.gate_logits = g.value(f.gate_logits);
  tr.inductive_logits = g.value(f.inductive_logits);
  return tr;
}

}  // namespace mwp::net
