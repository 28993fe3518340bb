#include "mwp/autograd.hpp"

#include "mwp/error.hpp"

#include <cmath>
#include <limits>

namespace mwp::ad {

std::size_t ParameterSet::add(std::string name, Matrix init) {
  const auto index = params_.size();
  if (!by_name_.emplace(name, index).second) throw Error("duplicate parameter name " + name);
  params_.push_back({std::move(name), std::move(init)});
  return index;
}

std::ptrdiff_t ParameterSet::find(const std::string& name) const {
  const auto it = by_name_.find(name);
  return it == by_name_.end() ? -1 : static_cast<std::ptrdiff_t>(it->second);
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

bool ParameterSet::all_finite() const {
  for (const auto& p : params_) {
    if (!p.value.allFinite()) return false;
  }
  return true;
}

Gradients::Gradients(const ParameterSet& params) {
  grads_.reserve(params.size());
  for (const auto& p : params) grads_.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
}

void Gradients::zero() {
  for (auto& g : grads_) g.setZero();
}

void Gradients::add(const Gradients& other) {
  for (std::size_t i = 0; i < grads_.size(); ++i) grads_[i] += other.grads_[i];
}

void Gradients::scale(double s) {
  for (auto& g : grads_) g *= s;
}

double Gradients::global_norm() const {
  double sq = 0.0;
  for (const auto& g : grads_) sq += g.squaredNorm();
  return std::sqrt(sq);
}

bool Gradients::all_finite() const {
  for (const auto& g : grads_) {
    if (!g.allFinite()) return false;
  }
  return true;
}

Var Graph::push(Matrix value, bool requires_grad, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = track_ && requires_grad;
  if (n.requires_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size() - 1)};
}

bool Graph::any_requires(std::span<const Var> inputs) const {
  for (auto v : inputs) {
    if (nodes_[static_cast<std::size_t>(v.id)].requires_grad) return true;
  }
  return false;
}

Var Graph::param(const ParameterSet& params, std::size_t index) {
  if (const auto it = param_leaves_.find(index); it != param_leaves_.end()) return Var{it->second};
  Node n;
  n.external = &params[index].value;
  n.param = static_cast<int>(index);
  n.requires_grad = track_;
  nodes_.push_back(std::move(n));
  const int id = static_cast<int>(nodes_.size() - 1);
  param_leaves_.emplace(index, id);
  return Var{id};
}

Var Graph::constant(Matrix value) { return push(std::move(value), false); }

const Matrix& Graph::value(Var v) const {
  const Node& n = nodes_[static_cast<std::size_t>(v.id)];
  return n.external ? *n.external : n.value;
}

Matrix& Graph::grad(Var v) {
  Node& n = nodes_[static_cast<std::size_t>(v.id)];
  if (n.grad_target) return *n.grad_target;
  if (n.grad.size() == 0) {
    const Matrix& val = value(v);
    n.grad = Matrix::Zero(val.rows(), val.cols());
  }
  return n.grad;
}

void Graph::accumulate(Var v, const Matrix& g) {
  if (!requires_grad(v)) return;
  grad(v) += g;
}

Var Graph::custom(Matrix value, std::span<const Var> inputs, BackwardFn backward) {
  return push(std::move(value), any_requires(inputs), std::move(backward));
}

void Graph::backward(Var loss, Gradients& out) {
  if (!track_) throw Error("backward() on an untracked graph");
  const Matrix& lv = value(loss);
  if (lv.rows() != 1 || lv.cols() != 1) throw Error("backward() needs a scalar");
  for (auto& n : nodes_) {
    if (n.param >= 0) n.grad_target = &out[static_cast<std::size_t>(n.param)];
  }
  if (!requires_grad(loss)) return;
  grad(loss).setConstant(1.0);
  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad || !n.backward || n.grad.size() == 0) continue;
    n.backward(n.grad);
  }
}

Var Graph::gather_rows(Var table, std::span<const int> rows) {
  const Matrix& t = value(table);
  Matrix out(static_cast<Index>(rows.size()), t.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= t.rows()) throw Error("gather_rows: row out of range");
    out.row(static_cast<Index>(i)) = t.row(rows[i]);
  }
  std::vector<int> idx(rows.begin(), rows.end());
  return push(std::move(out), requires_grad(table), [this, table, idx = std::move(idx)](const Matrix& g) {
    Matrix& gt = grad(table);
    for (std::size_t i = 0; i < idx.size(); ++i) gt.row(idx[i]) += g.row(static_cast<Index>(i));
  });
}

Var Graph::add(Var a, Var b) {
  const Matrix& va = value(a);
  const Matrix& vb = value(b);
  if (va.rows() != vb.rows() || va.cols() != vb.cols()) throw Error("add: shape mismatch");
  const Var in[] = {a, b};
  return push(va + vb, any_requires(in), [this, a, b](const Matrix& g) {
    accumulate(a, g);
    accumulate(b, g);
  });
}

Var Graph::add_row(Var a, Var row) {
  const Matrix& va = value(a);
  const Matrix& vr = value(row);
  if (vr.rows() != 1 || vr.cols() != va.cols()) throw Error("add_row: shape mismatch");
  Matrix out = va.rowwise() + vr.row(0);
  const Var in[] = {a, row};
  return push(std::move(out), any_requires(in), [this, a, row](const Matrix& g) {
    accumulate(a, g);
    if (requires_grad(row)) grad(row) += g.colwise().sum();
  });
}

Var Graph::matmul(Var a, Var b) {
  const Matrix& va = value(a);
  const Matrix& vb = value(b);
  if (va.cols() != vb.rows()) throw Error("matmul: shape mismatch");
  Matrix out = va * vb;
  const Var in[] = {a, b};
  return push(std::move(out), any_requires(in), [this, a, b](const Matrix& g) {
    if (requires_grad(a)) grad(a).noalias() += g * value(b).transpose();
    if (requires_grad(b)) grad(b).noalias() += value(a).transpose() * g;
  });
}

Var Graph::layer_norm(Var x, Var gain, Var bias, double eps) {
  const Matrix& vx = value(x);
  const Matrix& vg = value(gain);
  const Matrix& vb = value(bias);
  const Index n = vx.rows();
  const Index d = vx.cols();
  Matrix xhat(n, d);
  Eigen::VectorXd inv_std(n);
  for (Index i = 0; i < n; ++i) {
    const double mean = vx.row(i).mean();
    const double var = (vx.row(i).array() - mean).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (vx.row(i).array() - mean) * inv_std(i);
  }
  Matrix out = (xhat.array().rowwise() * vg.row(0).array()).rowwise() + vb.row(0).array();
  const Var in[] = {x, gain, bias};
  return push(std::move(out), any_requires(in),
              [this, x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](const Matrix& g) {
                if (requires_grad(gain)) grad(gain) += (g.array() * xhat.array()).colwise().sum().matrix();
                if (requires_grad(bias)) grad(bias) += g.colwise().sum();
                if (!requires_grad(x)) return;
                const auto& vg2 = value(gain);
                Matrix& gx = grad(x);
                const auto d2 = static_cast<double>(xhat.cols());
                for (Index i = 0; i < xhat.rows(); ++i) {
                  const Eigen::RowVectorXd dxhat = g.row(i).array() * vg2.row(0).array();
                  const double m1 = dxhat.sum() / d2;
                  const double m2 = dxhat.dot(xhat.row(i)) / d2;
                  gx.row(i) += (inv_std(i) * (dxhat.array() - m1 - xhat.row(i).array() * m2)).matrix();
                }
              });
}

Var Graph::gelu(Var x) {
  const Matrix& vx = value(x);
  const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  Matrix out = vx.unaryExpr([inv_sqrt2](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); });
  return push(std::move(out), requires_grad(x), [this, x, inv_sqrt2](const Matrix& g) {
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * M_PI);
    const Matrix d = value(x).unaryExpr([&](double v) {
      return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
    });
    grad(x).array() += g.array() * d.array();
  });
}

Var Graph::slice_rows(Var x, Index begin, Index count) {
  const Matrix& vx = value(x);
  if (begin < 0 || count < 0 || begin + count > vx.rows()) throw Error("slice_rows: out of range");
  return push(vx.middleRows(begin, count), requires_grad(x), [this, x, begin, count](const Matrix& g) {
    grad(x).middleRows(begin, count) += g;
  });
}

Var Graph::concat_rows(std::span<const Var> parts) {
  Index rows = 0;
  Index cols = -1;
  for (auto p : parts) {
    const Matrix& v = value(p);
    if (v.rows() == 0) continue;
    if (cols >= 0 && v.cols() != cols) throw Error("concat_rows: column mismatch");
    cols = v.cols();
    rows += v.rows();
  }
  if (cols < 0) cols = parts.empty() ? 0 : value(parts.front()).cols();
  Matrix out(rows, cols);
  Index at = 0;
  for (auto p : parts) {
    const Matrix& v = value(p);
    if (v.rows() == 0) continue;
    out.middleRows(at, v.rows()) = v;
    at += v.rows();
  }
  std::vector<Var> in(parts.begin(), parts.end());
  return push(std::move(out), any_requires(parts), [this, in = std::move(in)](const Matrix& g) {
    Index at2 = 0;
    for (auto p : in) {
      const Index r = value(p).rows();
      if (r == 0) continue;
      if (requires_grad(p)) grad(p) += g.middleRows(at2, r);
      at2 += r;
    }
  });
}

Var Graph::dropout(Var x, double rate, std::mt19937_64& rng) {
  if (rate <= 0.0 || !track_) return x;
  const Matrix& vx = value(x);
  std::bernoulli_distribution keep(1.0 - rate);
  Matrix mask(vx.rows(), vx.cols());
  for (Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(rng) ? 1.0 / (1.0 - rate) : 0.0;
  Matrix out = vx.cwiseProduct(mask);
  return push(std::move(out), requires_grad(x), [this, x, mask = std::move(mask)](const Matrix& g) {
    grad(x) += g.cwiseProduct(mask);
  });
}

Var Graph::attention_probs(Var qkv, const MaskData& mask, int heads) {
  const Matrix& v = value(qkv);
  const Index t = v.rows();
  const Index d = v.cols() / 3;
  if (v.cols() != 3 * d || d % heads != 0) throw Error("attention_probs: bad qkv shape");
  if (mask.size != t) throw Error("attention_probs: mask does not match sequence length");
  const Index dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Matrix probs = Matrix::Zero(heads * t, t);
  for (int h = 0; h < heads; ++h) {
    const Matrix scores = (v.middleCols(h * dh, dh) * v.middleCols(d + h * dh, dh).transpose()) * scale;
    for (Index i = 0; i < t; ++i) {
      double top = -std::numeric_limits<double>::infinity();
      for (Index j = 0; j < t; ++j) {
        if (mask.at(i, j)) top = std::max(top, scores(i, j));
      }
      if (!std::isfinite(top)) throw Error("attention row with no visible column");
      double z = 0.0;
      auto row = probs.row(h * t + i);
      for (Index j = 0; j < t; ++j) {
        if (!mask.at(i, j)) continue;
        row(j) = std::exp(scores(i, j) - top);
        z += row(j);
      }
      row /= z;
    }
  }
  const Var self{static_cast<int>(nodes_.size())};
  return push(std::move(probs), requires_grad(qkv), [this, self, qkv, heads, t, d, dh, scale](const Matrix& g) {
    const Matrix& p = value(self);
    const Matrix& vq = value(qkv);
    Matrix& gq = grad(qkv);
    for (int h = 0; h < heads; ++h) {
      const auto ph = p.middleRows(h * t, t);
      const auto gh = g.middleRows(h * t, t);
      Matrix ds = ph.cwiseProduct(gh);
      const Eigen::VectorXd dots = ds.rowwise().sum();
      ds -= (ph.array().colwise() * dots.array()).matrix();
      ds *= scale;
      gq.middleCols(h * dh, dh).noalias() += ds * vq.middleCols(d + h * dh, dh);
      gq.middleCols(d + h * dh, dh).noalias() += ds.transpose() * vq.middleCols(h * dh, dh);
    }
  });
}

Var Graph::attention_mix(Var probs, Var qkv, int heads) {
  const Matrix& p = value(probs);
  const Matrix& v = value(qkv);
  const Index t = v.rows();
  const Index d = v.cols() / 3;
  if (p.rows() != heads * t || p.cols() != t || d % heads != 0) throw Error("attention_mix: shape mismatch");
  const Index dh = d / heads;
  Matrix out(t, d);
  for (int h = 0; h < heads; ++h) {
    out.middleCols(h * dh, dh).noalias() = p.middleRows(h * t, t) * v.middleCols(2 * d + h * dh, dh);
  }
  const Var in[] = {probs, qkv};
  return push(std::move(out), any_requires(in), [this, probs, qkv, heads, t, d, dh](const Matrix& g) {
    const Matrix& pv = value(probs);
    const Matrix& vq = value(qkv);
    for (int h = 0; h < heads; ++h) {
      const auto gh = g.middleCols(h * dh, dh);
      if (requires_grad(probs)) {
        grad(probs).middleRows(h * t, t).noalias() += gh * vq.middleCols(2 * d + h * dh, dh).transpose();
      }
      if (requires_grad(qkv)) {
        grad(qkv).middleCols(2 * d + h * dh, dh).noalias() += pv.middleRows(h * t, t).transpose() * gh;
      }
    }
  });
}

}  // namespace mwp::ad
