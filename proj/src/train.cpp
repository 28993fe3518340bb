#include "mwp/train.hpp"

#include "mwp/error.hpp"
#include "mwp/infer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

namespace mwp::train {

double learning_rate(const TrainConfig& cfg, int epoch) {
  if (epoch <= cfg.lr_halve_after) return cfg.learning_rate;
  const int halvings = (epoch - cfg.lr_halve_after - 1) / cfg.lr_halve_every + 1;
  return std::ldexp(cfg.learning_rate, -halvings);
}

InductiveLoss inductive_loss(ad::Graph& g, ad::Var logits, std::span<const int> targets) {
  const Matrix& z = g.value(logits);
  if (z.rows() != static_cast<Index>(targets.size())) throw Error("inductive_loss: one target per row expected");
  InductiveLoss out;
  std::vector<int> rows;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] >= z.cols()) throw DataError("inductive target outside V_gen");
    if (targets[i] >= 0) rows.push_back(static_cast<int>(i));
  }
  out.counted = static_cast<int>(rows.size());
  if (rows.empty()) {
    out.all_excluded = true;
    out.loss = g.constant(Matrix::Zero(1, 1));
    return out;
  }
  Matrix probs(z.rows(), z.cols());
  double total = 0.0;
  for (int r : rows) {
    const double top = z.row(r).maxCoeff();
    const auto e = (z.row(r).array() - top).exp();
    const double sum = e.sum();
    probs.row(r) = e / sum;
    total += top + std::log(sum) - z(r, targets[static_cast<std::size_t>(r)]);
  }
  const double n = static_cast<double>(rows.size());
  std::vector<int> tg(targets.begin(), targets.end());
  const ad::Var in[] = {logits};
  out.loss = g.custom(Matrix::Constant(1, 1, total / n), in,
                      [&g, logits, probs = std::move(probs), rows = std::move(rows), tg = std::move(tg), n](const Matrix& go) {
                        Matrix& gl = g.grad(logits);
                        const double s = go(0, 0) / n;
                        for (int r : rows) {
                          gl.row(r) += s * probs.row(r);
                          gl(r, tg[static_cast<std::size_t>(r)]) -= s;
                        }
                      });
  return out;
}

ad::Var analogical_loss(ad::Graph& g, ad::Var generation_logits, ad::Var gate_logits, const CopyInputs& ci,
                        std::span<const int> targets, bool copy) {
  const Matrix& z = g.value(generation_logits);
  const Index n = z.rows();
  const Index gen = z.cols();
  if (n != static_cast<Index>(targets.size())) throw Error("analogical_loss: one target per row expected");
  if (n == 0) throw DataError("analogical_loss: no decoder positions");
  const auto nq = static_cast<Index>(ci.question_outcomes.size());
  const int heads = ci.heads;

  Matrix pg(n, gen);
  Eigen::VectorXd pgen = Eigen::VectorXd::Ones(n);
  Eigen::VectorXd pc = Eigen::VectorXd::Zero(n);
  Eigen::VectorXd p(n);
  Matrix sums(n, heads);
  Matrix hits(n, heads);
  double total = 0.0;
  const Matrix* att = copy ? &g.value(ci.attention) : nullptr;
  const Index t_all = att ? att->cols() : 0;
  for (Index t = 0; t < n; ++t) {
    const int y = targets[static_cast<std::size_t>(t)];
    if (y < 0 || y >= std::max<Index>(gen, ci.outcome_count)) {
      throw DataError("target outcome " + std::to_string(y) + " at position " + std::to_string(t) +
                      " is outside V_gen and the question");
    }
    const double top = z.row(t).maxCoeff();
    const auto e = (z.row(t).array() - top).exp();
    pg.row(t) = e / e.sum();
    const double from_gen = y < gen ? pg(t, y) : 0.0;
    if (!copy) {
      if (y >= gen) {
        throw DataError("target outcome " + std::to_string(y) + " at position " + std::to_string(t) +
                        " is not in V_gen and copying is disabled");
      }
      p(t) = from_gen;
    } else {
      const bool in_question =
          std::find(ci.question_outcomes.begin(), ci.question_outcomes.end(), y) != ci.question_outcomes.end();
      if (y >= gen && !in_question) {
        throw DataError("target outcome " + std::to_string(y) + " at position " + std::to_string(t) +
                        " is neither in V_gen nor in the question");
      }
      pgen(t) = 1.0 / (1.0 + std::exp(-g.value(gate_logits)(t, 0)));
      double c = 0.0;
      for (int h = 0; h < heads; ++h) {
        const auto row = att->row(h * t_all + ci.first_row + t).segment(ci.question_begin, nq);
        double s = 0.0;
        double hit = 0.0;
        for (Index i = 0; i < nq; ++i) {
          s += row(i);
          if (ci.question_outcomes[static_cast<std::size_t>(i)] == y) hit += row(i);
        }
        sums(t, h) = s;
        hits(t, h) = hit;
        c += hit / s;
      }
      pc(t) = c / heads;
      p(t) = pgen(t) * from_gen + (1.0 - pgen(t)) * pc(t);
    }
    if (!(p(t) > 0.0) || !std::isfinite(p(t))) {
      throw NumericalError("target probability is zero at position " + std::to_string(t) + " (infinite loss)");
    }
    total -= std::log(p(t));
  }

  std::vector<ad::Var> in{generation_logits};
  if (copy) {
    in.push_back(gate_logits);
    in.push_back(ci.attention);
  }
  std::vector<int> tg(targets.begin(), targets.end());
  std::vector<int> qo(ci.question_outcomes.begin(), ci.question_outcomes.end());
  return g.custom(
      Matrix::Constant(1, 1, total / static_cast<double>(n)), in,
      [&g, generation_logits, gate_logits, attention = ci.attention, first = ci.first_row, qb = ci.question_begin,
       heads, copy, gen, n, t_all, pg = std::move(pg), pgen = std::move(pgen), pc = std::move(pc), p = std::move(p),
       sums = std::move(sums), hits = std::move(hits), tg = std::move(tg), qo = std::move(qo)](const Matrix& go) {
        const double scale = go(0, 0) / static_cast<double>(n);
        const auto nq2 = static_cast<Index>(qo.size());
        for (Index t = 0; t < n; ++t) {
          const int y = tg[static_cast<std::size_t>(t)];
          const double coef = -scale / p(t);  // dL/dp
          if (y < gen && g.requires_grad(generation_logits)) {
            auto row = g.grad(generation_logits).row(t);
            const double a = coef * pgen(t) * pg(t, y);
            row -= a * pg.row(t);
            row(y) += a;
          }
          if (!copy) continue;
          const double from_gen = y < gen ? pg(t, y) : 0.0;
          if (g.requires_grad(gate_logits)) {
            g.grad(gate_logits)(t, 0) += coef * pgen(t) * (1.0 - pgen(t)) * (from_gen - pc(t));
          }
          if (!g.requires_grad(attention)) continue;
          Matrix& ga = g.grad(attention);
          const double w = coef * (1.0 - pgen(t)) / heads;
          for (int h = 0; h < heads; ++h) {
            const double s = sums(t, h);
            const double base = -hits(t, h) / (s * s);
            auto row = ga.row(h * t_all + first + t);
            for (Index i = 0; i < nq2; ++i) {
              row(qb + i) += w * (base + (qo[static_cast<std::size_t>(i)] == y ? 1.0 / s : 0.0));
            }
          }
        }
      });
}

double total_loss(double analogical, double inductive, double lambda) { return analogical + lambda * inductive; }

ad::Var total_loss(ad::Graph& g, ad::Var analogical, ad::Var inductive, double lambda) {
  const double a = g.value(analogical)(0, 0);
  const double i = g.value(inductive)(0, 0);
  const ad::Var in[] = {analogical, inductive};
  return g.custom(Matrix::Constant(1, 1, total_loss(a, i, lambda)), in,
                  [&g, analogical, inductive, lambda](const Matrix& go) {
                    g.accumulate(analogical, go);
                    g.accumulate(inductive, lambda * go);
                  });
}

Adam::Adam(const ad::ParameterSet& params, double beta1, double beta2, double eps) : b1_(beta1), b2_(beta2), eps_(eps) {
  for (const auto& p : params) {
    m_.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
    v_.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
  }
}

void Adam::step(ad::ParameterSet& params, const ad::Gradients& grads, double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Matrix& gr = grads[i];
    m_[i] = b1_ * m_[i] + (1.0 - b1_) * gr;
    v_[i] = b2_ * v_[i] + (1.0 - b2_) * gr.cwiseProduct(gr);
    params[i].value.array() -= lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
  }
}

double clip_gradients(ad::Gradients& grads, double max_norm) {
  const double norm = grads.global_norm();
  if (max_norm > 0.0 && norm > max_norm) grads.scale(max_norm / norm);
  return norm;
}

std::vector<Example> build_examples(const Bundle& bundle, const Dataset& ds) {
  const auto& cfg = bundle.config();
  const auto& vocab = bundle.vocab();
  const int eos = vocab.gen_index(Vocab::kEos);
  std::vector<Example> out;
  out.reserve(ds.size());
  for (const auto& p : ds) {
    Example ex;
    ex.id = p.id;
    const auto gold = gold_expression(p, cfg.equation_normalization);
    ex.problem = encode_problem(vocab, p.question, gold);
    const net::CopySpace space(vocab, p.question);
    ex.question_outcomes.assign(space.question_outcomes().begin(), space.question_outcomes().end());
    ex.outcome_count = space.size();
    for (const auto& t : gold) {
      const int o = space.outcome(t);
      if (o < 0) {
        throw DataError("problem " + p.id + ": expression token '" + t + "' is neither in V_gen nor in the question");
      }
      if (!cfg.copy && o >= space.gen_size()) {
        throw DataError("problem " + p.id + ": expression token '" + t + "' is not in V_gen and copying is disabled");
      }
      ex.targets.push_back(o);
    }
    ex.targets.push_back(eos);
    if (cfg.memory) {
      const auto q = memory::embed_question(bundle.embedder(), p.question);
      const auto hit = bundle.index().search(q.vector, 1, {p.id});
      if (hit.items.empty()) throw DataError("memory holds no problem other than " + p.id);
      ex.retrieved_id = hit.items.front().id;
      if (ex.retrieved_id == p.id) throw Error("retrieval returned the problem itself");
      ex.retrieved = bundle.memory_input(ex.retrieved_id);
      for (const auto& t : bundle.memory_expression(ex.retrieved_id)) ex.retrieved_targets.push_back(vocab.gen_index(t));
      ex.retrieved_targets.push_back(eos);
    }
    out.push_back(std::move(ex));
  }
  return out;
}

ExampleLoss example_loss(ad::Graph& g, const net::Model& m, const Example& ex, const TrainConfig& cfg,
                         std::mt19937_64* dropout_rng) {
  const net::ProblemInput* z = cfg.memory && ex.retrieved ? &*ex.retrieved : nullptr;
  const net::JointForward f = net::joint_forward(g, m, ex.problem, z, dropout_rng);
  CopyInputs ci;
  ci.attention = f.relational.final_attention;
  ci.first_row = f.layout.begin(net::Segment::expression);
  ci.question_begin = f.layout.begin(net::Segment::question);
  ci.question_outcomes = ex.question_outcomes;
  ci.outcome_count = ex.outcome_count;
  ci.heads = m.config().n_heads;
  const ad::Var a = analogical_loss(g, f.generation_logits, f.gate_logits, ci, ex.targets, cfg.copy);
  ExampleLoss out;
  out.analogical = g.value(a)(0, 0);
  if (!z) {
    out.total = a;
    return out;
  }
  const InductiveLoss ind = inductive_loss(g, f.inductive_logits, ex.retrieved_targets);
  out.inductive = g.value(ind.loss)(0, 0);
  out.inductive_counted = !ind.all_excluded;
  out.total = total_loss(g, a, ind.loss, cfg.lambda);
  return out;
}

nlohmann::json to_json(const EpochMetrics& m) {
  const auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"epoch", m.epoch},
          {"lr", m.lr},
          {"loss", m.loss},
          {"analogical_loss", m.analogical_loss},
          {"inductive_loss", m.inductive_loss},
          {"grad_norm", m.grad_norm},
          {"train_accuracy", opt(m.train_accuracy)},
          {"valid_accuracy", opt(m.valid_accuracy)},
          {"seconds", m.seconds},
          {"best", m.best}};
}

double answer_accuracy(const Bundle& bundle, const Dataset& ds, std::size_t limit) {
  if (ds.empty()) throw DataError("empty dataset");
  const infer::Solver solver(bundle, bundle.config().infer);
  const int k = bundle.config().memory ? 1 : 0;
  const std::size_t n = limit == 0 ? ds.size() : std::min(limit, ds.size());
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = solver.solve(ds[i], k, {ds[i].id});
    if (r.correct.value_or(false)) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

TrainResult train(Bundle& bundle, const Dataset& train_ds, const TrainOptions& options) {
  const TrainConfig& cfg = bundle.config();
  cfg.validate();
  if (train_ds.empty()) throw DataError("empty training set");
  const auto examples = build_examples(bundle, train_ds);

  std::ofstream metrics_file;
  if (!options.out_dir.empty()) {
    bundle.save(options.out_dir, "last.ckpt");
    metrics_file.open(options.out_dir / "metrics.jsonl");
    if (!metrics_file) throw DataError("cannot write " + (options.out_dir / "metrics.jsonl").string());
  }

  net::Model& model = bundle.model();
  Adam adam(model.params(), cfg.beta1, cfg.beta2, cfg.adam_eps);
  ad::Gradients grads(model.params());
  std::mt19937_64 order_rng(cfg.seed);
  std::mt19937_64 dropout_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  TrainResult result;
  double best_score = -std::numeric_limits<double>::infinity();
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    EpochMetrics em;
    em.epoch = epoch;
    em.lr = learning_rate(cfg, epoch);
    std::shuffle(order.begin(), order.end(), order_rng);
    double loss_sum = 0.0;
    double ana_sum = 0.0;
    double ind_sum = 0.0;
    int ind_count = 0;
    double norm_sum = 0.0;
    int steps = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      grads.zero();
      for (std::size_t i = start; i < stop; ++i) {
        const Example& ex = examples[order[i]];
        ad::Graph g(true);
        const ExampleLoss l = example_loss(g, model, ex, cfg, cfg.model.dropout > 0.0 ? &dropout_rng : nullptr);
        const double v = g.value(l.total)(0, 0);
        if (!std::isfinite(v)) {
          throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) + " on problem " + ex.id);
        }
        g.backward(l.total, grads);
        loss_sum += v;
        ana_sum += l.analogical;
        if (l.inductive_counted) {
          ind_sum += l.inductive;
          ++ind_count;
        }
      }
      grads.scale(1.0 / static_cast<double>(stop - start));
      if (!grads.all_finite()) throw NumericalError("non-finite gradient at epoch " + std::to_string(epoch));
      norm_sum += clip_gradients(grads, cfg.clip_norm);
      ++steps;
      adam.step(model.params(), grads, em.lr);
    }
    if (!model.params().all_finite()) throw NumericalError("non-finite parameters after epoch " + std::to_string(epoch));
    const auto n = static_cast<double>(examples.size());
    em.loss = loss_sum / n;
    em.analogical_loss = ana_sum / n;
    em.inductive_loss = ind_count > 0 ? ind_sum / ind_count : 0.0;
    em.grad_norm = norm_sum / steps;
    if (cfg.train_accuracy_every > 0 && epoch % cfg.train_accuracy_every == 0) {
      em.train_accuracy = answer_accuracy(bundle, train_ds, static_cast<std::size_t>(cfg.train_accuracy_limit));
    }
    if (options.valid && !options.valid->empty() && cfg.valid_every > 0 && epoch % cfg.valid_every == 0) {
      em.valid_accuracy = answer_accuracy(bundle, *options.valid);
    }
    const double score = em.valid_accuracy ? *em.valid_accuracy
                         : options.valid && cfg.valid_every > 0 ? -std::numeric_limits<double>::infinity()
                         : em.train_accuracy ? *em.train_accuracy
                                             : -em.loss;
    em.best = score > best_score;
    if (em.best) {
      best_score = score;
      result.best_epoch = epoch;
    }
    em.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    if (!options.out_dir.empty()) {
      model.save(options.out_dir / "last.ckpt");
      if (em.best) model.save(options.out_dir / "model.ckpt");
      metrics_file << to_json(em).dump() << "\n" << std::flush;
    }
    if (options.metrics) *options.metrics << to_json(em).dump() << "\n" << std::flush;
    result.history.push_back(em);
    if (options.on_epoch && !options.on_epoch(em, bundle)) break;
  }
  return result;
}

}  // namespace mwp::train
