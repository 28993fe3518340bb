#include "mwp/binary_io.hpp"
#include "mwp/error.hpp"
#include "mwp/net.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

namespace mwp::net {
namespace {

using testing::random_input;
using testing::toy_config;
using testing::toy_vocab;

Matrix random_matrix(std::mt19937_64& rng, Index r, Index c) {
  std::normal_distribution<double> g;
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  return m;
}

// --- mask ------------------------------------------------------------------

/// Visibility straight from the role table: Z_q→Z_q; Z_e→Z_q, Z_e≤i;
/// X_q→Z, X_q; X_e→Z, X_q, X_e≤i.
bool oracle_visible(Index zq, Index ze, Index xq, Index xe, Index i, Index j) {
  auto role = [&](Index p) { return p < zq ? 0 : p < zq + ze ? 1 : p < zq + ze + xq ? 2 : 3; };
  (void)xe;
  const int ri = role(i), rj = role(j);
  switch (ri) {
    case 0: return rj == 0;
    case 1: return rj == 0 || (rj == 1 && j <= i);
    case 2: return rj <= 2;
    default: return rj <= 2 || (rj == 3 && j <= i);
  }
}

TEST(NetMask, MatchesRoleTable) {
  const std::vector<std::array<Index, 4>> shapes = {{3, 2, 4, 3}, {0, 0, 4, 3}, {1, 1, 1, 1}, {5, 6, 2, 7}};
  for (const auto& s : shapes) {
    const SequenceLayout L{s[0], s[1], s[2], s[3]};
    const AttentionMask m(L);
    ASSERT_EQ(m.size(), L.total());
    for (Index i = 0; i < L.total(); ++i) {
      bool any = false;
      for (Index j = 0; j < L.total(); ++j) {
        EXPECT_EQ(m(i, j), oracle_visible(s[0], s[1], s[2], s[3], i, j)) << i << "," << j;
        any = any || m(i, j);
      }
      EXPECT_TRUE(any);
    }
  }
}

TEST(NetLayout, SegmentBoundaries) {
  const SequenceLayout L{3, 2, 4, 3};
  EXPECT_EQ(L.total(), 12);
  EXPECT_EQ(L.begin(Segment::retrieved_expression), 3);
  EXPECT_EQ(L.begin(Segment::question), 5);
  EXPECT_EQ(L.begin(Segment::expression), 9);
  EXPECT_EQ(L.length(Segment::question), 4);
  EXPECT_EQ(L.segment_of(0), Segment::retrieved_question);
  EXPECT_EQ(L.segment_of(4), Segment::retrieved_expression);
  EXPECT_EQ(L.segment_of(8), Segment::question);
  EXPECT_EQ(L.segment_of(11), Segment::expression);
  EXPECT_TRUE(L.has_memory());
  EXPECT_FALSE((SequenceLayout{0, 0, 2, 2}).has_memory());
}

// --- config and checkpoints -----------------------------------------------

TEST(NetConfig, ValidatesAndRoundTrips) {
  const Vocab v = toy_vocab();
  ModelConfig c = toy_config(v);
  nlohmann::json j = c;
  EXPECT_EQ(j.get<ModelConfig>().d_model, c.d_model);
  j["bogus"] = 1;
  EXPECT_ANY_THROW(j.get<ModelConfig>());
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), UsageError);
  ModelConfig d = ModelConfig{};
  EXPECT_EQ(d.d_model, 64);
  EXPECT_EQ(d.n_heads, 4);
  EXPECT_EQ(d.layers_repr, 2);
  EXPECT_EQ(d.layers_analogy, 2);
}

TEST(NetCheckpoint, RoundTripAndDeterministicInit) {
  const Vocab v = toy_vocab();
  const Model a(toy_config(v));
  const Model b(toy_config(v));
  ASSERT_EQ(a.params().size(), b.params().size());
  for (std::size_t i = 0; i < a.params().size(); ++i) EXPECT_EQ(a.tensor(i), b.tensor(i));
  const auto p = std::filesystem::temp_directory_path() / "mwp_model.ckpt";
  a.save(p);
  const Model c = Model::load(p);
  for (std::size_t i = 0; i < a.params().size(); ++i) {
    EXPECT_EQ(a.params()[i].name, c.params()[i].name);
    EXPECT_EQ(a.tensor(i), c.tensor(i));
  }
  EXPECT_TRUE(a.params().all_finite());
}

TEST(NetCheckpoint, RejectsMisShapedTensor) {
  const Vocab v = toy_vocab();
  const Model a(toy_config(v));
  const auto p = std::filesystem::temp_directory_path() / "mwp_bad.ckpt";
  {
    std::ofstream out(p, std::ios::binary);
    io::write_magic(out, "MWPCKPT");
    io::write_pod<std::uint32_t>(out, 1);
    io::write_string(out, nlohmann::json(a.config()).dump());
    io::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(a.params().size()));
    for (const auto& t : a.params()) {
      Matrix value = t.value;
      if (t.name == "head.gen") value = Matrix::Zero(value.rows(), value.cols() + 1);
      io::write_string(out, t.name);
      io::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(value.rows()));
      io::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(value.cols()));
      io::write_doubles(out, {value.data(), static_cast<std::size_t>(value.size())});
    }
  }
  EXPECT_THROW(Model::load(p), DataError);
  std::ofstream(p, std::ios::binary) << "garbage";
  EXPECT_THROW(Model::load(p), DataError);
}

// --- forward oracle --------------------------------------------------------

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

std::vector<double> layer_norm(const std::vector<double>& x, const Matrix& g, const Matrix& b) {
  const auto n = x.size();
  double mean = 0.0, var = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(n);
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = (x[i] - mean) / std::sqrt(var + 1e-5) * g(0, static_cast<Index>(i)) + b(0, static_cast<Index>(i));
  }
  return out;
}

std::vector<double> affine(const std::vector<double>& x, const Matrix& w, const Matrix& b) {
  std::vector<double> out(static_cast<std::size_t>(w.cols()));
  for (Index c = 0; c < w.cols(); ++c) {
    double s = b(0, c);
    for (Index r = 0; r < w.rows(); ++r) s += x[static_cast<std::size_t>(r)] * w(r, c);
    out[static_cast<std::size_t>(c)] = s;
  }
  return out;
}

/// Scalar-loop forward of one representation stack block plus the final norm.
std::vector<std::vector<double>> oracle_representation(const Model& m, const ProblemInput& p) {
  const auto& st = m.representation();
  const auto& b = st.blocks.at(0);
  const int d = m.config().d_model;
  const int heads = m.config().n_heads;
  const int dh = d / heads;
  std::vector<int> tokens(p.question);
  tokens.insert(tokens.end(), p.expression.begin(), p.expression.end());
  const auto nq = p.question.size();
  const auto t = tokens.size();
  std::vector<std::vector<double>> x(t, std::vector<double>(static_cast<std::size_t>(d)));
  for (std::size_t i = 0; i < t; ++i) {
    for (int c = 0; c < d; ++c) {
      x[i][static_cast<std::size_t>(c)] = m.tensor(m.token_embedding())(tokens[i], c) +
                                          m.tensor(st.segment)(i < nq ? 0 : 1, c) +
                                          m.tensor(st.position)(static_cast<Index>(i), c);
    }
  }
  auto visible = [&](std::size_t i, std::size_t j) { return i < nq ? j < nq : j <= i; };
  std::vector<std::vector<double>> qkv(t);
  for (std::size_t i = 0; i < t; ++i) qkv[i] = affine(layer_norm(x[i], m.tensor(b.ln1_gain), m.tensor(b.ln1_bias)),
                                                    m.tensor(b.w_qkv), m.tensor(b.b_qkv));
  for (std::size_t i = 0; i < t; ++i) {
    std::vector<double> mixed(static_cast<std::size_t>(d), 0.0);
    for (int h = 0; h < heads; ++h) {
      std::vector<double> w(t, 0.0);
      double z = 0.0;
      for (std::size_t j = 0; j < t; ++j) {
        if (!visible(i, j)) continue;
        double s = 0.0;
        for (int c = 0; c < dh; ++c) s += qkv[i][static_cast<std::size_t>(h * dh + c)] * qkv[j][static_cast<std::size_t>(d + h * dh + c)];
        w[j] = std::exp(s / std::sqrt(static_cast<double>(dh)));
        z += w[j];
      }
      for (std::size_t j = 0; j < t; ++j) {
        for (int c = 0; c < dh; ++c) mixed[static_cast<std::size_t>(h * dh + c)] += w[j] / z * qkv[j][static_cast<std::size_t>(2 * d + h * dh + c)];
      }
    }
    const auto attn = affine(mixed, m.tensor(b.w_out), m.tensor(b.b_out));
    for (int c = 0; c < d; ++c) x[i][static_cast<std::size_t>(c)] += attn[static_cast<std::size_t>(c)];
  }
  for (std::size_t i = 0; i < t; ++i) {
    auto hidden = affine(layer_norm(x[i], m.tensor(b.ln2_gain), m.tensor(b.ln2_bias)), m.tensor(b.w_ff1), m.tensor(b.b_ff1));
    for (auto& v : hidden) v = gelu(v);
    const auto ff = affine(hidden, m.tensor(b.w_ff2), m.tensor(b.b_ff2));
    for (int c = 0; c < d; ++c) x[i][static_cast<std::size_t>(c)] += ff[static_cast<std::size_t>(c)];
    x[i] = layer_norm(x[i], m.tensor(st.final_gain), m.tensor(st.final_bias));
  }
  return x;
}

void perturb_biases(Model& m, std::mt19937_64& rng) {
  // Gains and biases start at 1 and 0; randomize them so the oracle sees every term.
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    auto& p = m.params()[i];
    const auto tail = p.name.substr(p.name.size() - 2);
    if (tail == ".b" || tail == ".g") {
      p.value += 0.3 * random_matrix(rng, p.value.rows(), p.value.cols());
    }
  }
}

TEST(NetForward, OneLayerMatchesScalarOracle) {
  const Vocab v = toy_vocab();
  for (int heads : {1, 2}) {
    Model m(toy_config(v, 4, heads, 1, 3));
    std::mt19937_64 rng(4);
    perturb_biases(m, rng);
    ProblemInput p;
    p.question = {v.id("how"), v.id("7")};
    p.expression = {Vocab::kBos};
    ad::Graph g(false);
    const Matrix got = g.value(representation_forward(g, m, p).states);
    const auto want = oracle_representation(m, p);
    ASSERT_EQ(got.rows(), 3);
    for (Index i = 0; i < 3; ++i) {
      for (Index c = 0; c < 4; ++c) EXPECT_NEAR(got(i, c), want[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)], 1e-12);
    }
  }
}

TEST(NetForward, LongerInputMatchesScalarOracle) {
  const Vocab v = toy_vocab();
  Model m(toy_config(v, 8, 2, 1, 5));
  std::mt19937_64 rng(6);
  perturb_biases(m, rng);
  const ProblemInput p = random_input(rng, v, 5, 4);
  ad::Graph g(false);
  const Matrix got = g.value(representation_forward(g, m, p).states);
  const auto want = oracle_representation(m, p);
  for (Index i = 0; i < got.rows(); ++i) {
    for (Index c = 0; c < got.cols(); ++c) EXPECT_NEAR(got(i, c), want[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)], 1e-12);
  }
}

TEST(NetForward, TraceShapesAndAttentionRows) {
  const Vocab v = toy_vocab();
  const Model m(toy_config(v, 16, 2, 2));
  std::mt19937_64 rng(8);
  for (int t = 0; t < 10; ++t) {
    const ProblemInput x = random_input(rng, v, 4, 3);
    const ProblemInput z = random_input(rng, v, 3, 2);
    for (const ProblemInput* r : {&z, static_cast<const ProblemInput*>(nullptr)}) {
      const ForwardTrace tr = trace_forward(m, x, r);
      const Index total = tr.layout.total();
      EXPECT_EQ(tr.layout.xq, 4);
      EXPECT_EQ(tr.layout.xe, 4);
      EXPECT_EQ(tr.generation_logits.rows(), 4);
      EXPECT_EQ(tr.generation_logits.cols(), v.gen_size());
      EXPECT_EQ(tr.inductive_logits.rows(), r ? 3 : 0);
      EXPECT_EQ(tr.rel_zq.rows(), r ? 3 : 0);
      EXPECT_EQ(tr.hidden.size(), 2u);
      const AttentionMask mask(tr.layout);
      for (Index row = 0; row < 2 * total; ++row) {
        const Index i = row % total;
        EXPECT_NEAR(tr.attention.row(row).sum(), 1.0, 1e-5);
        for (Index j = 0; j < total; ++j) {
          if (!mask(i, j)) EXPECT_EQ(tr.attention(row, j), 0.0);
          EXPECT_GE(tr.attention(row, j), 0.0);
        }
      }
    }
  }
}

TEST(NetForward, RejectsOverlongSequences) {
  const Vocab v = toy_vocab();
  ModelConfig c = toy_config(v);
  c.max_positions = 8;
  const Model m(c);
  std::mt19937_64 rng(1);
  const ProblemInput x = random_input(rng, v, 4, 3);
  const ProblemInput z = random_input(rng, v, 3, 2);
  EXPECT_NO_THROW(trace_forward(m, x, nullptr));
  EXPECT_THROW(trace_forward(m, x, &z), DataError);
}

TEST(NetForward, DeterministicBitwise) {
  const Vocab v = toy_vocab();
  const Model m(toy_config(v));
  std::mt19937_64 rng(9);
  const ProblemInput x = random_input(rng, v, 5, 4);
  const ProblemInput z = random_input(rng, v, 4, 3);
  const ForwardTrace a = trace_forward(m, x, &z);
  const ForwardTrace b = trace_forward(m, x, &z);
  EXPECT_EQ(a.generation_logits, b.generation_logits);
  EXPECT_EQ(a.attention, b.attention);
  EXPECT_EQ(a.inductive_logits, b.inductive_logits);
}

// --- causality and isolation -------------------------------------------------

TEST(NetCausality, FutureExpressionTokensDoNotLeak) {
  const Vocab v = toy_vocab();
  const Model m(toy_config(v, 16, 2, 2));
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 10; ++trial) {
    const ProblemInput x = random_input(rng, v, 5, 5);
    const ProblemInput z = random_input(rng, v, 4, 4);
    const ForwardTrace base = trace_forward(m, x, &z);
    for (Index t = 0; t + 1 < static_cast<Index>(x.expression.size()); ++t) {
      ProblemInput x2 = x;
      for (std::size_t k = static_cast<std::size_t>(t) + 1; k < x2.expression.size(); ++k) {
        x2.expression[k] = 4 + (x2.expression[k] + 3) % (v.size() - 4);
      }
      const ForwardTrace pert = trace_forward(m, x2, &z);
      for (Index r = 0; r <= t; ++r) {
        EXPECT_EQ(base.generation_logits.row(r), pert.generation_logits.row(r)) << "t=" << t << " r=" << r;
        EXPECT_EQ(base.gate_logits.row(r), pert.gate_logits.row(r));
      }
      EXPECT_EQ(base.inductive_logits, pert.inductive_logits);
    }
    // The inductive head reads the retrieved expression causally as well.
    for (Index t = 0; t + 1 < static_cast<Index>(z.expression.size()); ++t) {
      ProblemInput z2 = z;
      for (std::size_t k = static_cast<std::size_t>(t) + 1; k < z2.expression.size(); ++k) {
        z2.expression[k] = 4 + (z2.expression[k] + 5) % (v.size() - 4);
      }
      const ForwardTrace pert = trace_forward(m, x, &z2);
      for (Index r = 0; r <= t && r < base.inductive_logits.rows(); ++r) {
        EXPECT_EQ(base.inductive_logits.row(r), pert.inductive_logits.row(r)) << "t=" << t << " r=" << r;
      }
    }
  }
}

TEST(NetIsolation, RetrievedStatesIgnoreTheProblem) {
  const Vocab v = toy_vocab();
  const Model m(toy_config(v, 16, 2, 2));
  std::mt19937_64 rng(11);
  const ProblemInput z = random_input(rng, v, 4, 3);
  const ForwardTrace base = trace_forward(m, random_input(rng, v, 5, 4), &z);
  for (int trial = 0; trial < 10; ++trial) {
    const ForwardTrace other = trace_forward(m, random_input(rng, v, 5, 4), &z);
    EXPECT_EQ(base.rel_zq, other.rel_zq);
    EXPECT_EQ(base.rel_ze, other.rel_ze);
    EXPECT_EQ(base.inductive_logits, other.inductive_logits);
  }
}

// --- heads -----------------------------------------------------------------

TEST(NetHeads, GenerationDistributionOracle) {
  std::mt19937_64 rng(12);
  const Matrix w = random_matrix(rng, 6, 5);
  const Vector s = random_matrix(rng, 6, 1).col(0);
  const Vector p = generation_distribution(w, s);
  double z = 0.0;
  std::vector<double> e(5);
  for (int k = 0; k < 5; ++k) {
    double logit = 0.0;
    for (int i = 0; i < 6; ++i) logit += w(i, k) * s(i);
    e[static_cast<std::size_t>(k)] = std::exp(logit);
    z += e[static_cast<std::size_t>(k)];
  }
  for (int k = 0; k < 5; ++k) EXPECT_NEAR(p(k), e[static_cast<std::size_t>(k)] / z, 1e-6);
  EXPECT_NEAR(p.sum(), 1.0, 1e-12);
  const Vector u = generation_distribution(Matrix::Zero(6, 5), s);
  for (int k = 0; k < 5; ++k) EXPECT_DOUBLE_EQ(u(k), 0.2);
}

TEST(NetHeads, GenerationShiftInvariance) {
  // Adding c to every logit: W_g ← W_g + a·1ᵀ with a·s = c.
  std::mt19937_64 rng(13);
  const Matrix w = random_matrix(rng, 4, 3);
  Vector s = Vector::Zero(4);
  s(0) = 1.0;
  Matrix shifted = w;
  shifted.row(0).array() += 2.5;
  EXPECT_LT((generation_distribution(w, s) - generation_distribution(shifted, s)).norm(), 1e-12);
}

TEST(NetHeads, CopyDistributionOracle) {
  std::mt19937_64 rng(14);
  std::uniform_real_distribution<double> u(0.01, 1.0);
  const Index qb = 3, n = 4, total = 9;
  const std::vector<int> outcomes = {5, 2, 5, 6};
  for (int trial = 0; trial < 20; ++trial) {
    Matrix rows(2, total);
    for (Index i = 0; i < rows.size(); ++i) rows.data()[i] = u(rng);
    for (Index h = 0; h < 2; ++h) rows.row(h) /= rows.row(h).sum();
    const Vector got = copy_distribution(rows, qb, outcomes, 8);
    Vector want = Vector::Zero(8);
    for (Index h = 0; h < 2; ++h) {
      double s = 0.0;
      for (Index i = 0; i < n; ++i) s += rows(h, qb + i);
      for (Index i = 0; i < n; ++i) want(outcomes[static_cast<std::size_t>(i)]) += rows(h, qb + i) / s / 2.0;
    }
    EXPECT_LT((got - want).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_NEAR(got.sum(), 1.0, 1e-12);
    for (int o : {0, 1, 3, 4, 7}) EXPECT_EQ(got(o), 0.0);
  }
}

TEST(NetHeads, CopyDistributionExamples) {
  Matrix one = Matrix::Zero(1, 5);
  one(0, 3) = 1.0;
  const Vector c = copy_distribution(one, 0, std::vector<int>{0, 1, 2, 3, 4}, 5);
  EXPECT_EQ(c(3), 1.0);
  EXPECT_EQ(c.sum(), 1.0);

  Matrix two(1, 4);
  two << 0.2, 0.3, 0.1, 0.4;
  const Vector d = copy_distribution(two, 0, std::vector<int>{1, 1, 0, 2}, 3);
  EXPECT_NEAR(d(1), 0.5, 1e-15);
}

TEST(NetHeads, GateOracleAndBounds) {
  std::mt19937_64 rng(15);
  const Matrix w = random_matrix(rng, 5, 1);
  const Vector s = random_matrix(rng, 5, 1).col(0);
  double z = 0.0;
  for (int i = 0; i < 5; ++i) z += w(i, 0) * s(i);
  EXPECT_NEAR(gate(w, s), 1.0 / (1.0 + std::exp(-z)), 1e-15);
  EXPECT_EQ(gate(Matrix::Zero(5, 1), s), 0.5);
  double prev = 0.0;
  for (double k : {-20.0, -2.0, 0.0, 2.0, 20.0}) {
    const double p = gate(w * k, s);
    EXPECT_GT(p, 0.0);
    EXPECT_LT(p, 1.0);
    if (z > 0) EXPECT_GT(p, prev);
    prev = p;
  }
}

TEST(NetHeads, OutputDistributionMixture) {
  Vector pg(3);
  pg << 0.5, 0.3, 0.2;
  Vector pc(4);
  pc << 0.0, 0.6, 0.0, 0.4;  // outcome 1 shared with V_gen, outcome 3 question-only
  const Vector at1 = output_distribution(1.0, pg, pc);
  EXPECT_EQ(at1.head(3), pg);
  EXPECT_EQ(at1(3), 0.0);
  EXPECT_EQ(output_distribution(0.0, pg, pc), pc);
  const Vector mix = output_distribution(0.3, pg, pc);
  EXPECT_NEAR(mix(0), 0.15, 1e-15);
  EXPECT_NEAR(mix(1), 0.09 + 0.42, 1e-15);
  EXPECT_NEAR(mix(2), 0.06, 1e-15);
  EXPECT_NEAR(mix(3), 0.28, 1e-15);
  EXPECT_NEAR(mix.sum(), 1.0, 1e-15);
}

TEST(NetHeads, InductiveLogitsOracle) {
  std::mt19937_64 rng(16);
  const Matrix c = random_matrix(rng, 4, 3);
  Matrix s = random_matrix(rng, 2, 4);
  const Matrix got = inductive_logits(c, s);
  for (Index r = 0; r < 2; ++r) {
    for (Index k = 0; k < 3; ++k) {
      double want = 0.0;
      for (Index i = 0; i < 4; ++i) want += s(r, i) * c(i, k);
      EXPECT_NEAR(got(r, k), want, 1e-14);
    }
  }
  s.row(1) = s.row(0);
  const Matrix same = inductive_logits(c, s);
  EXPECT_EQ(same.row(0), same.row(1));
  EXPECT_EQ(inductive_logits(Matrix::Zero(4, 3), s), Matrix::Zero(2, 3));
}

TEST(NetCopySpace, GenerationFirstThenQuestionExtras) {
  const Vocab v = toy_vocab();
  const std::vector<std::string> q = {"how", "many", "7", "2", "7", "?"};
  const CopySpace s(v, q);
  EXPECT_EQ(s.gen_size(), v.gen_size());
  EXPECT_EQ(s.outcome("2"), v.gen_index("2"));
  const int seven = s.outcome("7");
  EXPECT_GE(seven, s.gen_size());
  EXPECT_EQ(s.token(seven), "7");
  EXPECT_EQ(s.size(), v.gen_size() + 4);  // how, many, 7, ?
  EXPECT_EQ(s.question_outcomes()[2], s.question_outcomes()[4]);
  EXPECT_EQ(s.outcome("banana"), -1);
  EXPECT_EQ(s.input_id(seven), v.id("7"));
}

}  // namespace
}  // namespace mwp::net
