#include "mwp/decoder.hpp"

#include "mwp/error.hpp"

#include <cmath>
#include <limits>

namespace mwp::net {

namespace {

Matrix layer_norm_rows(const Matrix& x, const Matrix& gain, const Matrix& bias) {
  Matrix out(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    const double mean = x.row(i).mean();
    const double var = (x.row(i).array() - mean).square().mean();
    const double inv = 1.0 / std::sqrt(var + 1e-5);
    out.row(i) = ((x.row(i).array() - mean) * inv) * gain.row(0).array() + bias.row(0).array();
  }
  return out;
}

Matrix gelu(const Matrix& x) {
  const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  return x.unaryExpr([inv_sqrt2](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); });
}

Matrix append_row(const Matrix& m, const Eigen::RowVectorXd& row) {
  Matrix out(m.rows() + 1, row.size());
  if (m.rows() > 0) out.topRows(m.rows()) = m;
  out.row(m.rows()) = row;
  return out;
}

}  // namespace

StackRunner::StackRunner(const Model& m, const StackParams& stack) : m_(&m), stack_(&stack) {}

Matrix StackRunner::prefill(const Matrix& x0, const ad::MaskData& mask, KVCache& cache, Matrix* attention) const {
  const auto& cfg = m_->config();
  const Index n = x0.rows();
  const Index d = cfg.d_model;
  const int heads = cfg.n_heads;
  const Index dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  if (mask.size != n) throw Error("prefill: mask does not match rows");
  cache.k.clear();
  cache.v.clear();
  Matrix x = x0;
  for (const auto& b : stack_->blocks) {
    const Matrix h1 = layer_norm_rows(x, m_->tensor(b.ln1_gain), m_->tensor(b.ln1_bias));
    const Matrix qkv = (h1 * m_->tensor(b.w_qkv)).rowwise() + m_->tensor(b.b_qkv).row(0);
    Matrix mixed(n, d);
    Matrix probs = Matrix::Zero(heads * n, n);
    for (int h = 0; h < heads; ++h) {
      const Matrix scores = (qkv.middleCols(h * dh, dh) * qkv.middleCols(d + h * dh, dh).transpose()) * scale;
      for (Index i = 0; i < n; ++i) {
        double top = -std::numeric_limits<double>::infinity();
        for (Index j = 0; j < n; ++j) {
          if (mask.at(i, j)) top = std::max(top, scores(i, j));
        }
        double z = 0.0;
        auto row = probs.row(h * n + i);
        for (Index j = 0; j < n; ++j) {
          if (!mask.at(i, j)) continue;
          row(j) = std::exp(scores(i, j) - top);
          z += row(j);
        }
        row /= z;
      }
      mixed.middleCols(h * dh, dh).noalias() = probs.middleRows(h * n, n) * qkv.middleCols(2 * d + h * dh, dh);
    }
    x += (mixed * m_->tensor(b.w_out)).rowwise() + m_->tensor(b.b_out).row(0);
    const Matrix h2 = layer_norm_rows(x, m_->tensor(b.ln2_gain), m_->tensor(b.ln2_bias));
    const Matrix ff = gelu((h2 * m_->tensor(b.w_ff1)).rowwise() + m_->tensor(b.b_ff1).row(0));
    x += (ff * m_->tensor(b.w_ff2)).rowwise() + m_->tensor(b.b_ff2).row(0);
    cache.k.push_back(qkv.middleCols(d, d));
    cache.v.push_back(qkv.middleCols(2 * d, d));
    if (attention) *attention = std::move(probs);
  }
  return layer_norm_rows(x, m_->tensor(stack_->final_gain), m_->tensor(stack_->final_bias));
}

StackRunner::Step StackRunner::step(const Eigen::RowVectorXd& x0, const KVCache& base, KVCache& tail) const {
  const auto& cfg = m_->config();
  const Index d = cfg.d_model;
  const int heads = cfg.n_heads;
  const Index dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto layers = stack_->blocks.size();
  if (tail.k.empty()) {
    tail.k.assign(layers, Matrix(0, d));
    tail.v.assign(layers, Matrix(0, d));
  }
  Matrix x = x0;
  Step out;
  for (std::size_t l = 0; l < layers; ++l) {
    const auto& b = stack_->blocks[l];
    const Matrix h1 = layer_norm_rows(x, m_->tensor(b.ln1_gain), m_->tensor(b.ln1_bias));
    const Matrix qkv = (h1 * m_->tensor(b.w_qkv)).rowwise() + m_->tensor(b.b_qkv).row(0);
    tail.k[l] = append_row(tail.k[l], qkv.row(0).segment(d, d));
    tail.v[l] = append_row(tail.v[l], qkv.row(0).segment(2 * d, d));
    const Matrix& kb = base.k[l];
    const Matrix& vb = base.v[l];
    const Matrix& kt = tail.k[l];
    const Matrix& vt = tail.v[l];
    const Index nb = kb.rows();
    const Index cols = nb + kt.rows();
    Matrix probs(heads, cols);
    Eigen::RowVectorXd mixed(d);
    for (int h = 0; h < heads; ++h) {
      const auto q = qkv.row(0).segment(h * dh, dh);
      Eigen::RowVectorXd s(cols);
      if (nb > 0) s.head(nb).noalias() = q * kb.middleCols(h * dh, dh).transpose();
      s.tail(kt.rows()).noalias() = q * kt.middleCols(h * dh, dh).transpose();
      s *= scale;
      s = (s.array() - s.maxCoeff()).exp();
      s /= s.sum();
      probs.row(h) = s;
      Eigen::RowVectorXd mh = s.tail(kt.rows()) * vt.middleCols(h * dh, dh);
      if (nb > 0) mh.noalias() += s.head(nb) * vb.middleCols(h * dh, dh);
      mixed.segment(h * dh, dh) = mh;
    }
    x += (mixed * m_->tensor(b.w_out)) + m_->tensor(b.b_out);
    const Matrix h2 = layer_norm_rows(x, m_->tensor(b.ln2_gain), m_->tensor(b.ln2_bias));
    const Matrix ff = gelu((h2 * m_->tensor(b.w_ff1)) + m_->tensor(b.b_ff1));
    x += (ff * m_->tensor(b.w_ff2)) + m_->tensor(b.b_ff2);
    if (l + 1 == layers) out.attention = std::move(probs);
  }
  out.state = layer_norm_rows(x, m_->tensor(stack_->final_gain), m_->tensor(stack_->final_bias)).row(0).transpose();
  return out;
}

IncrementalDecoder::IncrementalDecoder(const Model& m, std::vector<int> question, const CopySpace& space,
                                       const ProblemInput* retrieved, bool copy)
    : m_(&m),
      space_(&space),
      copy_(copy),
      eos_(space.vocab().gen_index(Vocab::kEos)),
      repr_(m, m.representation()),
      analogy_(m, m.analogy()) {
  if (question.empty()) throw DataError("empty question");
  if (static_cast<std::size_t>(space.question_outcomes().size()) != question.size()) {
    throw Error("copy space does not match the question");
  }
  if (eos_ < 0) throw DataError("EOS is not a generation token");
  const auto& tok = m.tensor(m.token_embedding());
  const auto& rs = m.representation();
  const auto& as = m.analogy();
  const Index d = m.config().d_model;

  // Item memories of the retrieved problem: a full pass over [Z_q, Z_e].
  Matrix items_z(0, d);
  if (retrieved) {
    std::vector<int> ids(retrieved->question);
    ids.insert(ids.end(), retrieved->expression.begin(), retrieved->expression.end());
    Matrix x(static_cast<Index>(ids.size()), d);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const int seg = i < retrieved->question.size() ? 0 : 1;
      x.row(static_cast<Index>(i)) =
          tok.row(ids[i]) + m.tensor(rs.segment).row(seg) + m.tensor(rs.position).row(static_cast<Index>(i));
    }
    SequenceLayout lz;
    lz.xq = static_cast<Index>(retrieved->question.size());
    lz.xe = static_cast<Index>(retrieved->expression.size());
    KVCache unused;
    items_z = repr_.prefill(x, AttentionMask(lz).data(), unused);
    base_.zq = lz.xq;
    base_.ze = lz.xe;
  }

  // X_q rows of the representation stack stay cached for the decoded suffix.
  base_.xq = static_cast<Index>(question.size());
  if (base_.xq + 1 > m.config().max_positions) throw DataError("question exceeds max_positions");
  Matrix xq(base_.xq, d);
  for (Index i = 0; i < base_.xq; ++i) {
    xq.row(i) = tok.row(question[static_cast<std::size_t>(i)]) + m.tensor(rs.segment).row(0) +
                m.tensor(rs.position).row(i);
  }
  SequenceLayout lx;
  lx.xq = base_.xq;
  const Matrix items_xq = repr_.prefill(xq, AttentionMask(lx).data(), repr_base_);

  const Index nb = base_.total();
  if (nb + 1 > m.config().max_positions) throw DataError("analogy sequence exceeds max_positions");
  Matrix a(nb, d);
  a.topRows(items_z.rows()) = items_z;
  a.bottomRows(base_.xq) = items_xq;
  for (Index i = 0; i < nb; ++i) {
    a.row(i) += m.tensor(as.segment).row(static_cast<int>(base_.segment_of(i))) + m.tensor(as.position).row(i);
  }
  analogy_.prefill(a, AttentionMask(base_).data(), analogy_base_);
}

IncrementalDecoder::State IncrementalDecoder::start() const { return consume(State{}, Vocab::kBos); }

IncrementalDecoder::State IncrementalDecoder::advance(const State& s, int outcome) const {
  return consume(s, space_->input_id(outcome));
}

IncrementalDecoder::State IncrementalDecoder::consume(State s, int token_id) const {
  const auto& cfg = m_->config();
  const Index t = s.consumed;
  const Index repr_pos = base_.xq + t;
  const Index analogy_pos = base_.total() + t;
  if (analogy_pos >= cfg.max_positions || repr_pos >= cfg.max_positions) {
    throw DataError("decoded sequence exceeds max_positions");
  }
  const auto& rs = m_->representation();
  const auto& as = m_->analogy();
  const Eigen::RowVectorXd xr = m_->tensor(m_->token_embedding()).row(token_id) + m_->tensor(rs.segment).row(1) +
                                m_->tensor(rs.position).row(repr_pos);
  const auto item = repr_.step(xr, repr_base_, s.repr_tail);
  const Eigen::RowVectorXd xa = item.state.transpose() +
                                m_->tensor(as.segment).row(static_cast<int>(Segment::expression)) +
                                m_->tensor(as.position).row(analogy_pos);
  const auto rel = analogy_.step(xa, analogy_base_, s.analogy_tail);
  s.consumed = t + 1;

  const Vector pg = generation_distribution(m_->tensor(m_->generation_weights()), rel.state);
  if (!copy_) {
    s.distribution = Vector::Zero(space_->size());
    s.distribution.head(pg.size()) = pg;
    return s;
  }
  const double p_gen = gate(m_->tensor(m_->gate_weights()), rel.state);
  const Vector pc = copy_distribution(rel.attention, base_.begin(Segment::question), space_->question_outcomes(),
                                      space_->size());
  s.distribution = output_distribution(p_gen, pg, pc);
  return s;
}

Vector full_distribution(const Model& m, const std::vector<int>& question, const CopySpace& space,
                         const ProblemInput* retrieved, const std::vector<int>& prefix, bool copy) {
  ProblemInput x;
  x.question = question;
  x.expression.push_back(Vocab::kBos);
  for (int o : prefix) x.expression.push_back(space.input_id(o));
  const ForwardTrace tr = trace_forward(m, x, retrieved);
  const Index row = tr.layout.xe - 1;
  const Vector state = tr.rel_xe.row(row).transpose();
  const Vector pg = generation_distribution(m.tensor(m.generation_weights()), state);
  if (!copy) {
    Vector out = Vector::Zero(space.size());
    out.head(pg.size()) = pg;
    return out;
  }
  const double p_gen = gate(m.tensor(m.gate_weights()), state);
  const Matrix att = tr.attention_row(tr.layout.begin(Segment::expression) + row, m.config().n_heads);
  const Vector pc = copy_distribution(att, tr.layout.begin(Segment::question), space.question_outcomes(), space.size());
  return output_distribution(p_gen, pg, pc);
}

}  // namespace mwp::net
