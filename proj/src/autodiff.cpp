#include "mpt/autodiff.hpp"

#include <cmath>
#include <limits>
#include <memory>
#include <numbers>

namespace mpt {

template <typename Scalar>
std::mt19937_64& Tape<Scalar>::rng() {
  if (rng_ == nullptr) throw ConfigError("training-mode tape has no random generator");
  return *rng_;
}

template <typename Scalar>
Var<Scalar> Tape<Scalar>::constant(Mat value) {
  return push(std::move(value), {}, nullptr, "constant");
}

template <typename Scalar>
Var<Scalar> Tape<Scalar>::input(Mat value) {
  if (!value.allFinite()) throw NumericError("non-finite input");
  Node n;
  n.value = std::move(value);
  n.needs_grad = record_;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

template <typename Scalar>
Var<Scalar> Tape<Scalar>::param(ParamSet<Scalar>& params, std::size_t index) {
  if (param_owner_ != &params) {
    param_owner_ = &params;
    param_nodes_.assign(params.size(), -1);
  }
  if (param_nodes_.size() < params.size()) param_nodes_.resize(params.size(), -1);
  if (param_nodes_[index] >= 0) return {this, param_nodes_[index]};
  Node n;
  n.value = params[index].value;
  n.needs_grad = record_;
  if (record_) {
    ParamSet<Scalar>* owner = &params;
    n.backward = [owner, index](Tape& tape, int self) {
      const auto& g = tape.grad_of(self);
      if (g.size() != 0) (*owner)[index].grad += g;
    };
  }
  nodes_.push_back(std::move(n));
  param_nodes_[index] = static_cast<int>(nodes_.size() - 1);
  return {this, param_nodes_[index]};
}

template <typename Scalar>
Var<Scalar> Tape<Scalar>::push(Mat value, std::initializer_list<Var<Scalar>> parents, Backward backward,
                               const char* op) {
  return push(std::move(value), std::vector<Var<Scalar>>(parents), std::move(backward), op);
}

template <typename Scalar>
Var<Scalar> Tape<Scalar>::push(Mat value, const std::vector<Var<Scalar>>& parents, Backward backward, const char* op) {
  if (!value.allFinite()) throw NumericError(std::string("non-finite values produced by ") + op);
  Node n;
  n.value = std::move(value);
  if (record_) {
    for (const auto& p : parents) n.needs_grad = n.needs_grad || needs_grad(p);
  }
  if (n.needs_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

template <typename Scalar>
typename Tape<Scalar>::Mat Tape<Scalar>::grad(Var<Scalar> v) const {
  const auto& n = nodes_[static_cast<std::size_t>(v.id)];
  if (n.grad.size() == 0) return Mat::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

template <typename Scalar>
void Tape<Scalar>::accumulate(Var<Scalar> v, const Mat& g) {
  auto& n = nodes_[static_cast<std::size_t>(v.id)];
  if (!n.needs_grad) return;
  if (n.grad.size() == 0)
    n.grad = g;
  else
    n.grad += g;
}

template <typename Scalar>
void Tape<Scalar>::backward(Var<Scalar> loss) {
  if (!record_) throw ConfigError("backward on a non-recording tape");
  if (value(loss).size() != 1) throw ShapeError("backward needs a scalar loss, got " + shape_str(value(loss)));
  for (auto& n : nodes_) n.grad.resize(0, 0);
  accumulate(loss, Mat::Constant(1, 1, Scalar(1)));
  for (int i = loss.id; i >= 0; --i) {
    auto& n = nodes_[static_cast<std::size_t>(i)];
    if (n.needs_grad && n.backward && n.grad.size() != 0) n.backward(*this, i);
  }
}

// ---------------------------------------------------------------------------

namespace {

template <typename Scalar>
void require_same_tape(Var<Scalar> a, Var<Scalar> b) {
  if (a.tape != b.tape) throw ConfigError("operands live on different tapes");
}

}  // namespace

template <typename Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b) {
  require_same_tape(a, b);
  if (a.cols() != b.rows()) throw ShapeError("matmul " + shape_str(a.value()) + " by " + shape_str(b.value()));
  Matrix<Scalar> out = a.value() * b.value();
  const int ia = a.id, ib = b.id;
  return a.tape->push(
      std::move(out), {a, b},
      [ia, ib](Tape<Scalar>& t, int self) {
        const auto& g = t.grad_of(self);
        if (t.needs_grad_of(ia)) t.accumulate(ia, g * t.value_of(ib).transpose());
        if (t.needs_grad_of(ib)) t.accumulate(ib, t.value_of(ia).transpose() * g);
      },
      "matmul");
}

template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b) {
  require_same_tape(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError("add " + shape_str(a.value()) + " and " + shape_str(b.value()));
  Matrix<Scalar> out = a.value() + b.value();
  const int ia = a.id, ib = b.id;
  return a.tape->push(
      std::move(out), {a, b},
      [ia, ib](Tape<Scalar>& t, int self) {
        const Matrix<Scalar> g = t.grad_of(self);
        t.accumulate(ia, g);
        t.accumulate(ib, g);
      },
      "add");
}

template <typename Scalar>
Var<Scalar> multiply(Var<Scalar> a, Var<Scalar> b) {
  require_same_tape(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError("multiply " + shape_str(a.value()) + " and " + shape_str(b.value()));
  Matrix<Scalar> out = a.value().cwiseProduct(b.value());
  const int ia = a.id, ib = b.id;
  return a.tape->push(
      std::move(out), {a, b},
      [ia, ib](Tape<Scalar>& t, int self) {
        const Matrix<Scalar> g = t.grad_of(self);
        if (t.needs_grad_of(ia)) t.accumulate(ia, g.cwiseProduct(t.value_of(ib)));
        if (t.needs_grad_of(ib)) t.accumulate(ib, g.cwiseProduct(t.value_of(ia)));
      },
      "multiply");
}

template <typename Scalar>
Var<Scalar> add_row(Var<Scalar> a, Var<Scalar> row) {
  require_same_tape(a, row);
  if (row.rows() != 1 || row.cols() != a.cols())
    throw ShapeError("add_row " + shape_str(a.value()) + " and " + shape_str(row.value()));
  Matrix<Scalar> out = a.value().rowwise() + row.value().row(0);
  const int ia = a.id, ir = row.id;
  return a.tape->push(
      std::move(out), {a, row},
      [ia, ir](Tape<Scalar>& t, int self) {
        const Matrix<Scalar> g = t.grad_of(self);
        t.accumulate(ia, g);
        if (t.needs_grad_of(ir)) t.accumulate(ir, g.colwise().sum());
      },
      "add_row");
}

template <typename Scalar>
Var<Scalar> scale(Var<Scalar> a, Scalar s) {
  Matrix<Scalar> out = a.value() * s;
  const int ia = a.id;
  return a.tape->push(
      std::move(out), {a}, [ia, s](Tape<Scalar>& t, int self) { t.accumulate(ia, t.grad_of(self) * s); }, "scale");
}

template <typename Scalar>
Var<Scalar> gelu(Var<Scalar> x) {
  const Scalar inv_sqrt2 = Scalar(1) / std::sqrt(Scalar(2));
  const Matrix<Scalar>& xv = x.value();
  Matrix<Scalar> out = xv.unaryExpr([inv_sqrt2](Scalar v) { return Scalar(0.5) * v * (Scalar(1) + std::erf(v * inv_sqrt2)); });
  const int ix = x.id;
  return x.tape->push(
      std::move(out), {x},
      [ix, inv_sqrt2](Tape<Scalar>& t, int self) {
        const Scalar inv_sqrt_2pi = Scalar(1) / std::sqrt(Scalar(2) * std::numbers::pi_v<Scalar>);
        Matrix<Scalar> d = t.value_of(ix).unaryExpr([&](Scalar v) {
          return Scalar(0.5) * (Scalar(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(Scalar(-0.5) * v * v);
        });
        t.accumulate(ix, t.grad_of(self).cwiseProduct(d));
      },
      "gelu");
}

template <typename Scalar>
Var<Scalar> dropout(Var<Scalar> x, Scalar rate) {
  if (rate < 0 || rate >= 1) throw ConfigError("dropout rate must lie in [0, 1)");
  if (!x.tape->training() || rate == 0) return x;
  std::bernoulli_distribution keep(1.0 - static_cast<double>(rate));
  auto& rng = x.tape->rng();
  const Scalar inv_keep = Scalar(1) / (Scalar(1) - rate);
  auto mask = std::make_shared<Matrix<Scalar>>(x.rows(), x.cols());
  for (Index j = 0; j < mask->cols(); ++j)
    for (Index i = 0; i < mask->rows(); ++i) (*mask)(i, j) = keep(rng) ? inv_keep : Scalar(0);
  Matrix<Scalar> out = x.value().cwiseProduct(*mask);
  const int ix = x.id;
  return x.tape->push(
      std::move(out), {x}, [ix, mask](Tape<Scalar>& t, int self) { t.accumulate(ix, t.grad_of(self).cwiseProduct(*mask)); },
      "dropout");
}

template <typename Scalar>
Var<Scalar> concat_rows(const std::vector<Var<Scalar>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows of nothing");
  const Index cols = parts.front().cols();
  Index rows = 0;
  for (const auto& p : parts) {
    require_same_tape(parts.front(), p);
    if (p.cols() != cols) throw ShapeError("concat_rows column mismatch " + shape_str(p.value()));
    rows += p.rows();
  }
  Matrix<Scalar> out(rows, cols);
  std::vector<std::pair<int, Index>> pieces;
  Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    pieces.emplace_back(p.id, r);
    r += p.rows();
  }
  return parts.front().tape->push(
      std::move(out), parts,
      [pieces](Tape<Scalar>& t, int self) {
        const auto& g = t.grad_of(self);
        for (const auto& [id, start] : pieces)
          if (t.needs_grad_of(id)) t.accumulate(id, g.middleRows(start, t.value_of(id).rows()));
      },
      "concat_rows");
}

template <typename Scalar>
Var<Scalar> slice_rows(Var<Scalar> x, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > x.rows())
    throw ShapeError("slice_rows [" + std::to_string(start) + ", " + std::to_string(start + count) + ") of " +
                     shape_str(x.value()));
  Matrix<Scalar> out = x.value().middleRows(start, count);
  const int ix = x.id;
  return x.tape->push(
      std::move(out), {x},
      [ix, start, count](Tape<Scalar>& t, int self) {
        Matrix<Scalar> g = Matrix<Scalar>::Zero(t.value_of(ix).rows(), t.value_of(ix).cols());
        g.middleRows(start, count) = t.grad_of(self);
        t.accumulate(ix, g);
      },
      "slice_rows");
}

template <typename Scalar>
Var<Scalar> sum(Var<Scalar> x) {
  Matrix<Scalar> out = Matrix<Scalar>::Constant(1, 1, x.value().sum());
  const int ix = x.id;
  return x.tape->push(
      std::move(out), {x},
      [ix](Tape<Scalar>& t, int self) {
        const auto& v = t.value_of(ix);
        t.accumulate(ix, Matrix<Scalar>::Constant(v.rows(), v.cols(), t.grad_of(self)(0, 0)));
      },
      "sum");
}

template <typename Scalar>
Var<Scalar> linear(Var<Scalar> x, Var<Scalar> weights, Var<Scalar> bias) {
  require_same_tape(x, weights);
  require_same_tape(x, bias);
  if (x.cols() != weights.rows())
    throw ShapeError("linear input " + shape_str(x.value()) + " against weights " + shape_str(weights.value()));
  if (bias.rows() != 1 || bias.cols() != weights.cols())
    throw ShapeError("linear bias " + shape_str(bias.value()) + " against weights " + shape_str(weights.value()));
  Matrix<Scalar> out = x.value() * weights.value();
  out.rowwise() += bias.value().row(0);
  const int ix = x.id, iw = weights.id, ib = bias.id;
  return x.tape->push(
      std::move(out), {x, weights, bias},
      [ix, iw, ib](Tape<Scalar>& t, int self) {
        const auto& g = t.grad_of(self);
        if (t.needs_grad_of(ix)) t.accumulate(ix, g * t.value_of(iw).transpose());
        if (t.needs_grad_of(iw)) t.accumulate(iw, t.value_of(ix).transpose() * g);
        if (t.needs_grad_of(ib)) t.accumulate(ib, g.colwise().sum());
      },
      "linear");
}

template <typename Scalar>
Var<Scalar> layer_norm(Var<Scalar> x, Var<Scalar> gain, Var<Scalar> shift, Scalar eps) {
  if (eps <= 0) throw ConfigError("layer_norm eps must be positive");
  const Index n = x.rows(), d = x.cols();
  if (gain.rows() != 1 || gain.cols() != d || shift.rows() != 1 || shift.cols() != d)
    throw ShapeError("layer_norm affine parameters do not match " + shape_str(x.value()));
  auto xhat = std::make_shared<Matrix<Scalar>>(n, d);
  auto inv_std = std::make_shared<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(n);
  const auto& xv = x.value();
  for (Index i = 0; i < n; ++i) {
    const Scalar mu = xv.row(i).mean();
    const Scalar var = (xv.row(i).array() - mu).square().mean();
    (*inv_std)(i) = Scalar(1) / std::sqrt(var + eps);
    xhat->row(i) = (xv.row(i).array() - mu) * (*inv_std)(i);
  }
  Matrix<Scalar> out = (xhat->array().rowwise() * gain.value().row(0).array()).rowwise() + shift.value().row(0).array();
  const int ix = x.id, ig = gain.id, is = shift.id;
  return x.tape->push(
      std::move(out), {x, gain, shift},
      [ix, ig, is, xhat, inv_std, d](Tape<Scalar>& t, int self) {
        const auto& g = t.grad_of(self);
        if (t.needs_grad_of(ig)) t.accumulate(ig, g.cwiseProduct(*xhat).colwise().sum());
        if (t.needs_grad_of(is)) t.accumulate(is, g.colwise().sum());
        if (t.needs_grad_of(ix)) {
          Matrix<Scalar> dxhat = g.array().rowwise() * t.value_of(ig).row(0).array();
          Matrix<Scalar> dx(dxhat.rows(), d);
          for (Index i = 0; i < dxhat.rows(); ++i) {
            const Scalar m1 = dxhat.row(i).mean();
            const Scalar m2 = dxhat.row(i).cwiseProduct(xhat->row(i)).mean();
            dx.row(i) = (dxhat.row(i).array() - m1 - xhat->row(i).array() * m2) * (*inv_std)(i);
          }
          t.accumulate(ix, dx);
        }
      },
      "layer_norm");
}

template <typename Scalar>
Var<Scalar> attention(Var<Scalar> q, Var<Scalar> k, Var<Scalar> v, int heads, const BoolMatrix* mask,
                      Matrix<Scalar>* weights_out) {
  require_same_tape(q, k);
  require_same_tape(q, v);
  const Index D = q.cols(), nq = q.rows(), nk = k.rows();
  if (heads < 1 || D % heads != 0)
    throw ConfigError("embedding width " + std::to_string(D) + " is not divisible by " + std::to_string(heads) + " heads");
  if (k.cols() != D || v.cols() != D || v.rows() != nk)
    throw ShapeError("attention q " + shape_str(q.value()) + ", k " + shape_str(k.value()) + ", v " +
                     shape_str(v.value()));
  if (nk == 0) throw AttentionError("attention over zero keys");
  if (mask != nullptr && (mask->rows() != nq || mask->cols() != nk))
    throw ShapeError("attention mask " + shape_str(*mask) + " for " + shape_str(nq, nk) + " scores");
  if (mask != nullptr)
    for (Index i = 0; i < nq; ++i)
      if (!mask->row(i).any()) throw AttentionError("query row " + std::to_string(i) + " has every key masked");

  const Index dh = D / heads;
  const Scalar scale_factor = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
  // probs[h] is nq x nk
  auto probs = std::make_shared<std::vector<Matrix<Scalar>>>(static_cast<std::size_t>(heads));
  Matrix<Scalar> out(nq, D);
  const auto& qv = q.value();
  const auto& kv = k.value();
  const auto& vv = v.value();
  for (int h = 0; h < heads; ++h) {
    Matrix<Scalar> s = (qv.middleCols(h * dh, dh) * kv.middleCols(h * dh, dh).transpose()) * scale_factor;
    for (Index i = 0; i < nq; ++i) {
      Scalar mx = -std::numeric_limits<Scalar>::infinity();
      for (Index j = 0; j < nk; ++j)
        if (mask == nullptr || (*mask)(i, j)) mx = std::max(mx, s(i, j));
      Scalar z = 0;
      for (Index j = 0; j < nk; ++j) {
        const Scalar e = (mask == nullptr || (*mask)(i, j)) ? std::exp(s(i, j) - mx) : Scalar(0);
        s(i, j) = e;
        z += e;
      }
      s.row(i) /= z;
    }
    out.middleCols(h * dh, dh) = s * vv.middleCols(h * dh, dh);
    (*probs)[static_cast<std::size_t>(h)] = std::move(s);
  }
  if (weights_out != nullptr) {
    weights_out->resize(nq * heads, nk);
    for (int h = 0; h < heads; ++h) weights_out->middleRows(h * nq, nq) = (*probs)[static_cast<std::size_t>(h)];
  }
  const int iq = q.id, ik = k.id, iv = v.id;
  return q.tape->push(
      std::move(out), {q, k, v},
      [iq, ik, iv, heads, dh, scale_factor, probs](Tape<Scalar>& t, int self) {
        const auto& g = t.grad_of(self);
        const auto& qv = t.value_of(iq);
        const auto& kv = t.value_of(ik);
        const auto& vv = t.value_of(iv);
        Matrix<Scalar> dq = Matrix<Scalar>::Zero(qv.rows(), qv.cols());
        Matrix<Scalar> dk = Matrix<Scalar>::Zero(kv.rows(), kv.cols());
        Matrix<Scalar> dv = Matrix<Scalar>::Zero(vv.rows(), vv.cols());
        for (int h = 0; h < heads; ++h) {
          const auto& p = (*probs)[static_cast<std::size_t>(h)];
          const auto go = g.middleCols(h * dh, dh);
          dv.middleCols(h * dh, dh) = p.transpose() * go;
          Matrix<Scalar> dp = go * vv.middleCols(h * dh, dh).transpose();
          Eigen::Matrix<Scalar, Eigen::Dynamic, 1> rs = dp.cwiseProduct(p).rowwise().sum();
          Matrix<Scalar> ds = p.cwiseProduct(dp.colwise() - rs) * scale_factor;
          dq.middleCols(h * dh, dh) = ds * kv.middleCols(h * dh, dh);
          dk.middleCols(h * dh, dh) = ds.transpose() * qv.middleCols(h * dh, dh);
        }
        t.accumulate(iq, dq);
        t.accumulate(ik, dk);
        t.accumulate(iv, dv);
      },
      "attention");
}

template <typename Scalar>
Var<Scalar> cross_entropy_sum(Var<Scalar> logits, const std::vector<int>& targets) {
  const auto& z = logits.value();
  if (static_cast<Index>(targets.size()) != z.rows())
    throw ShapeError("cross entropy targets " + std::to_string(targets.size()) + " for logits " + shape_str(z));
  auto probs = std::make_shared<Matrix<Scalar>>(z.rows(), z.cols());
  Scalar total = 0;
  for (Index i = 0; i < z.rows(); ++i) {
    const int y = targets[static_cast<std::size_t>(i)];
    if (y < 0 || y >= z.cols()) throw DataError("target class " + std::to_string(y) + " out of range");
    const Scalar mx = z.row(i).maxCoeff();
    const auto e = (z.row(i).array() - mx).exp();
    const Scalar s = e.sum();
    probs->row(i) = e / s;
    total += std::log(s) + mx - z(i, y);
  }
  const int il = logits.id;
  auto tg = std::make_shared<std::vector<int>>(targets);
  return logits.tape->push(
      Matrix<Scalar>::Constant(1, 1, total), {logits},
      [il, probs, tg](Tape<Scalar>& t, int self) {
        Matrix<Scalar> d = *probs;
        for (Index i = 0; i < d.rows(); ++i) d(i, (*tg)[static_cast<std::size_t>(i)]) -= Scalar(1);
        t.accumulate(il, d * t.grad_of(self)(0, 0));
      },
      "cross_entropy");
}

#define MPT_INSTANTIATE(S)                                                                                  \
  template class Tape<S>;                                                                                   \
  template Var<S> matmul(Var<S>, Var<S>);                                                                   \
  template Var<S> add(Var<S>, Var<S>);                                                                      \
  template Var<S> multiply(Var<S>, Var<S>);                                                                 \
  template Var<S> add_row(Var<S>, Var<S>);                                                                  \
  template Var<S> scale(Var<S>, S);                                                                         \
  template Var<S> gelu(Var<S>);                                                                             \
  template Var<S> dropout(Var<S>, S);                                                                       \
  template Var<S> concat_rows(const std::vector<Var<S>>&);                                                  \
  template Var<S> slice_rows(Var<S>, Index, Index);                                                         \
  template Var<S> sum(Var<S>);                                                                              \
  template Var<S> linear(Var<S>, Var<S>, Var<S>);                                                           \
  template Var<S> layer_norm(Var<S>, Var<S>, Var<S>, S);                                                    \
  template Var<S> attention(Var<S>, Var<S>, Var<S>, int, const BoolMatrix*, Matrix<S>*);                    \
  template Var<S> cross_entropy_sum(Var<S>, const std::vector<int>&);

MPT_INSTANTIATE(float)
MPT_INSTANTIATE(double)

#undef MPT_INSTANTIATE

}  // namespace mpt
