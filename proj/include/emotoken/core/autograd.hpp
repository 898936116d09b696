#pragma once

// Reverse-mode automatic differentiation over dense Eigen matrices.
//
// A Tape records every operation of one forward pass. Values are 2-D
// row-major matrices; scalars are 1x1. Calling backward() on a scalar node
// propagates gradients to every node that needs them and accumulates the
// result into any Parameter used as a leaf.

#include "emotoken/core/types.hpp"

#include <cmath>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <vector>

namespace emotoken {

template <typename S>
struct Parameter {
  std::string name;
  Mat<S> value;
  mutable Mat<S> grad;  // written through tapes that reference a const model
  Mat<S> adam_m;
  Mat<S> adam_v;
  bool frozen = false;

  Parameter() = default;
  Parameter(std::string n, Mat<S> v) : name(std::move(n)), value(std::move(v)) {
    grad = Mat<S>::Zero(value.rows(), value.cols());
  }

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

namespace ag {

template <typename S>
class Tape;

template <typename S>
struct Var {
  Tape<S>* tape = nullptr;
  int id = -1;

  const Mat<S>& value() const { return tape->value(id); }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  S scalar() const { return value()(0, 0); }
};

template <typename S>
class Tape {
 public:
  using Backward = std::function<void(Tape&, int)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<S> constant(Mat<S> v) { return push(std::move(v), false, nullptr); }

  /// Leaf that receives a gradient; used for inputs under test.
  Var<S> variable(Mat<S> v) { return push(std::move(v), true, nullptr); }

  /// Variable whose value lives elsewhere; the referent must outlive the tape.
  Var<S> variable_ref(const Mat<S>& v) {
    Node n;
    n.ref = &v;
    n.needs_grad = grad_enabled_;
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size() - 1)};
  }

  /// Leaf bound to a parameter. Frozen parameters, and every parameter on a
  /// tape with gradients disabled, behave as constants.
  Var<S> param(const Parameter<S>& p) {
    Node n;
    n.ref = &p.value;
    n.needs_grad = grad_enabled_ && !p.frozen;
    n.param = n.needs_grad ? &p : nullptr;
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size() - 1)};
  }

  bool grad_enabled() const { return grad_enabled_; }

  Var<S> push(Mat<S> v, bool needs_grad, Backward backward) {
    needs_grad = needs_grad && grad_enabled_;
    Node n;
    n.value = std::move(v);
    n.needs_grad = needs_grad;
    if (needs_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size() - 1)};
  }

  const Mat<S>& value(int id) const {
    const Node& n = nodes_[id];
    return n.ref ? *n.ref : n.value;
  }

  bool needs_grad(int id) const { return nodes_[id].needs_grad; }

  const Mat<S>& grad(int id) const { return nodes_[id].grad; }

  bool has_grad(int id) const { return nodes_[id].has_grad; }

  /// Gradient of the last backward() root with respect to v (zero if v did
  /// not contribute).
  Mat<S> gradient(Var<S> v) const {
    const Node& n = nodes_[v.id];
    if (n.has_grad) return n.grad;
    const Mat<S>& val = value(v.id);
    return Mat<S>::Zero(val.rows(), val.cols());
  }

  template <typename Expr>
  void accumulate(int id, const Expr& g) {
    Node& n = nodes_[id];
    if (!n.needs_grad) return;
    if (!n.has_grad) {
      n.grad = g;
      n.has_grad = true;
    } else {
      n.grad += g;
    }
  }

  void backward(Var<S> root) {
    if (value(root.id).size() != 1) throw DimensionError("backward: root must be a scalar");
    if (!nodes_[root.id].needs_grad) return;
    accumulate(root.id, Mat<S>::Ones(1, 1));
    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.has_grad) continue;
      if (n.backward) n.backward(*this, i);
      if (n.param) n.param->grad += n.grad;
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat<S> value;
    const Mat<S>* ref = nullptr;
    Mat<S> grad;
    bool needs_grad = false;
    bool has_grad = false;
    Backward backward;
    const Parameter<S>* param = nullptr;
  };
  std::vector<Node> nodes_;
  bool grad_enabled_ = true;
};

namespace detail {

template <typename S>
bool any_grad(std::initializer_list<Var<S>> vars) {
  for (const auto& v : vars)
    if (v.tape->needs_grad(v.id)) return true;
  return false;
}

template <typename S>
void require_same_shape(const Var<S>& a, const Var<S>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError(std::string(op) + ": shape mismatch");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <typename S>
Var<S> matmul(Var<S> a, Var<S> b) {
  if (a.cols() != b.rows()) throw DimensionError("matmul: inner dimensions differ");
  Tape<S>& t = *a.tape;
  Mat<S> out;
  out.noalias() = a.value() * b.value();
  int ia = a.id, ib = b.id;
  return t.push(std::move(out), detail::any_grad({a, b}), [ia, ib](Tape<S>& t, int self) {
    const Mat<S>& g = t.grad(self);
    if (t.needs_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
    if (t.needs_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
  });
}

/// a * b^T
template <typename S>
Var<S> matmul_nt(Var<S> a, Var<S> b) {
  if (a.cols() != b.cols()) throw DimensionError("matmul_nt: inner dimensions differ");
  Tape<S>& t = *a.tape;
  Mat<S> out;
  out.noalias() = a.value() * b.value().transpose();
  int ia = a.id, ib = b.id;
  return t.push(std::move(out), detail::any_grad({a, b}), [ia, ib](Tape<S>& t, int self) {
    const Mat<S>& g = t.grad(self);
    if (t.needs_grad(ia)) t.accumulate(ia, g * t.value(ib));
    if (t.needs_grad(ib)) t.accumulate(ib, g.transpose() * t.value(ia));
  });
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  detail::require_same_shape(a, b, "add");
  Tape<S>& t = *a.tape;
  int ia = a.id, ib = b.id;
  return t.push(a.value() + b.value(), detail::any_grad({a, b}), [ia, ib](Tape<S>& t, int self) {
    t.accumulate(ia, t.grad(self));
    t.accumulate(ib, t.grad(self));
  });
}

template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
  detail::require_same_shape(a, b, "sub");
  Tape<S>& t = *a.tape;
  int ia = a.id, ib = b.id;
  return t.push(a.value() - b.value(), detail::any_grad({a, b}), [ia, ib](Tape<S>& t, int self) {
    t.accumulate(ia, t.grad(self));
    t.accumulate(ib, -t.grad(self));
  });
}

template <typename S>
Var<S> mul(Var<S> a, Var<S> b) {
  detail::require_same_shape(a, b, "mul");
  Tape<S>& t = *a.tape;
  int ia = a.id, ib = b.id;
  Mat<S> out = a.value().cwiseProduct(b.value());
  return t.push(std::move(out), detail::any_grad({a, b}), [ia, ib](Tape<S>& t, int self) {
    if (t.needs_grad(ia)) t.accumulate(ia, t.grad(self).cwiseProduct(t.value(ib)));
    if (t.needs_grad(ib)) t.accumulate(ib, t.grad(self).cwiseProduct(t.value(ia)));
  });
}

template <typename S>
Var<S> scale(Var<S> a, S s) {
  Tape<S>& t = *a.tape;
  int ia = a.id;
  return t.push(a.value() * s, detail::any_grad({a}),
                [ia, s](Tape<S>& t, int self) { t.accumulate(ia, t.grad(self) * s); });
}

template <typename S>
Var<S> add_scalar(Var<S> a, S s) {
  Tape<S>& t = *a.tape;
  int ia = a.id;
  Mat<S> out = a.value().array() + s;
  return t.push(std::move(out), detail::any_grad({a}),
                [ia](Tape<S>& t, int self) { t.accumulate(ia, t.grad(self)); });
}

/// Adds a 1xC row to every row of a.
template <typename S>
Var<S> add_row(Var<S> a, Var<S> row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw DimensionError("add_row: bad row shape");
  Tape<S>& t = *a.tape;
  int ia = a.id, ir = row.id;
  Mat<S> out = a.value().rowwise() + row.value().row(0);
  return t.push(std::move(out), detail::any_grad({a, row}), [ia, ir](Tape<S>& t, int self) {
    t.accumulate(ia, t.grad(self));
    if (t.needs_grad(ir)) t.accumulate(ir, t.grad(self).colwise().sum());
  });
}

template <typename S>
Var<S> square(Var<S> a) {
  Tape<S>& t = *a.tape;
  int ia = a.id;
  Mat<S> out = a.value().array().square();
  return t.push(std::move(out), detail::any_grad({a}), [ia](Tape<S>& t, int self) {
    t.accumulate(ia, (t.grad(self).array() * t.value(ia).array() * S(2)).matrix());
  });
}

template <typename S>
Var<S> relu(Var<S> a) {
  Tape<S>& t = *a.tape;
  int ia = a.id;
  Mat<S> out = a.value().cwiseMax(S(0));
  return t.push(std::move(out), detail::any_grad({a}), [ia](Tape<S>& t, int self) {
    t.accumulate(ia, (t.value(ia).array() > S(0)).select(t.grad(self), S(0)));
  });
}

template <typename S>
Var<S> leaky_relu(Var<S> a, S slope = S(0.2)) {
  Tape<S>& t = *a.tape;
  int ia = a.id;
  Mat<S> out = (a.value().array() > S(0)).select(a.value(), a.value() * slope);
  return t.push(std::move(out), detail::any_grad({a}), [ia, slope](Tape<S>& t, int self) {
    t.accumulate(ia, (t.value(ia).array() > S(0)).select(t.grad(self), t.grad(self) * slope));
  });
}

template <typename S>
Var<S> tanh(Var<S> a) {
  Tape<S>& t = *a.tape;
  int ia = a.id;
  Mat<S> out = a.value().array().tanh();
  Mat<S> saved = out;
  return t.push(std::move(out), detail::any_grad({a}), [ia, saved](Tape<S>& t, int self) {
    t.accumulate(ia, (t.grad(self).array() * (S(1) - saved.array().square())).matrix());
  });
}

template <typename S>
Var<S> sigmoid(Var<S> a) {
  Tape<S>& t = *a.tape;
  int ia = a.id;
  Mat<S> out = (S(1) / (S(1) + (-a.value().array()).exp())).matrix();
  Mat<S> saved = out;
  return t.push(std::move(out), detail::any_grad({a}), [ia, saved](Tape<S>& t, int self) {
    t.accumulate(ia, (t.grad(self).array() * saved.array() * (S(1) - saved.array())).matrix());
  });
}

/// GELU, tanh approximation.
template <typename S>
Var<S> gelu(Var<S> a) {
  Tape<S>& t = *a.tape;
  int ia = a.id;
  const S c = S(0.7978845608028654);  // sqrt(2/pi)
  const S k = S(0.044715);
  const auto& x = a.value().array();
  Mat<S> th = (c * (x + k * x.cube())).tanh().matrix();
  Mat<S> out = (S(0.5) * x * (S(1) + th.array())).matrix();
  return t.push(std::move(out), detail::any_grad({a}), [ia, th, c, k](Tape<S>& t, int self) {
    const auto& x = t.value(ia).array();
    auto dth = (S(1) - th.array().square()) * c * (S(1) + S(3) * k * x.square());
    auto d = S(0.5) * (S(1) + th.array()) + S(0.5) * x * dth;
    t.accumulate(ia, (t.grad(self).array() * d).matrix());
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename S>
Var<S> sum(Var<S> a) {
  Tape<S>& t = *a.tape;
  int ia = a.id;
  Mat<S> out(1, 1);
  out(0, 0) = a.value().sum();
  return t.push(std::move(out), detail::any_grad({a}), [ia](Tape<S>& t, int self) {
    const Mat<S>& v = t.value(ia);
    t.accumulate(ia, Mat<S>::Constant(v.rows(), v.cols(), t.grad(self)(0, 0)));
  });
}

template <typename S>
Var<S> mean(Var<S> a) {
  return scale(sum(a), S(1) / static_cast<S>(a.value().size()));
}

/// Sum of squared entries divided by the row count: the mean over positions
/// of each row's squared L2 norm.
template <typename S>
Var<S> mean_row_sq_norm(Var<S> a) {
  return scale(sum(square(a)), S(1) / static_cast<S>(a.rows()));
}

/// Mean over rows, giving a 1xC row.
template <typename S>
Var<S> mean_rows(Var<S> a) {
  Tape<S>& t = *a.tape;
  int ia = a.id;
  Mat<S> out = a.value().colwise().mean();
  const S inv = S(1) / static_cast<S>(a.rows());
  return t.push(std::move(out), detail::any_grad({a}), [ia, inv](Tape<S>& t, int self) {
    const Mat<S>& v = t.value(ia);
    Mat<S> g = t.grad(self).replicate(v.rows(), 1) * inv;
    t.accumulate(ia, g);
  });
}

/// Repeats a 1xC row n times.
template <typename S>
Var<S> tile_rows(Var<S> row, Index n) {
  if (row.rows() != 1) throw DimensionError("tile_rows: expects a single row");
  Tape<S>& t = *row.tape;
  int ir = row.id;
  Mat<S> out = row.value().replicate(n, 1);
  return t.push(std::move(out), detail::any_grad({row}), [ir](Tape<S>& t, int self) {
    t.accumulate(ir, t.grad(self).colwise().sum());
  });
}

// ---------------------------------------------------------------------------
// Normalization and probabilities

/// Row-wise softmax. `mask`, when non-empty, is added to the scores first;
/// entries of -inf exclude a column. Every row must keep one finite entry.
template <typename S>
Var<S> softmax_rows(Var<S> a, const Mat<S>& mask = Mat<S>()) {
  Tape<S>& t = *a.tape;
  int ia = a.id;
  Mat<S> z = a.value();
  if (mask.size() != 0) {
    if (mask.rows() != z.rows() || mask.cols() != z.cols())
      throw DimensionError("softmax_rows: mask shape mismatch");
    z += mask;
  }
  for (Index r = 0; r < z.rows(); ++r) {
    S m = z.row(r).maxCoeff();
    z.row(r) = (z.row(r).array() - m).exp();
    z.row(r) /= z.row(r).sum();
  }
  Mat<S> saved = z;
  return t.push(std::move(z), detail::any_grad({a}), [ia, saved](Tape<S>& t, int self) {
    const Mat<S>& g = t.grad(self);
    Vec<S> dot = (g.cwiseProduct(saved)).rowwise().sum();
    Mat<S> d = saved.cwiseProduct(g - dot.replicate(1, g.cols()));
    t.accumulate(ia, d);
  });
}

/// Mean cross-entropy of row-wise softmax(logits) against integer targets.
template <typename S>
Var<S> cross_entropy(Var<S> logits, const std::vector<int>& targets) {
  if (static_cast<Index>(targets.size()) != logits.rows())
    throw DimensionError("cross_entropy: one target per row required");
  Tape<S>& t = *logits.tape;
  int il = logits.id;
  const Mat<S>& z = logits.value();
  Mat<S> prob(z.rows(), z.cols());
  S total = 0;
  for (Index r = 0; r < z.rows(); ++r) {
    int y = targets[r];
    if (y < 0 || y >= z.cols()) throw RangeError("cross_entropy: target out of range");
    S m = z.row(r).maxCoeff();
    prob.row(r) = (z.row(r).array() - m).exp();
    S denom = prob.row(r).sum();
    prob.row(r) /= denom;
    total += -(z(r, y) - m - std::log(denom));
  }
  Mat<S> out(1, 1);
  out(0, 0) = total / static_cast<S>(z.rows());
  return t.push(std::move(out), detail::any_grad({logits}),
                [il, prob, targets](Tape<S>& t, int self) {
                  Mat<S> d = prob;
                  for (Index r = 0; r < d.rows(); ++r) d(r, targets[r]) -= S(1);
                  d *= t.grad(self)(0, 0) / static_cast<S>(d.rows());
                  t.accumulate(il, d);
                });
}

template <typename S>
Var<S> layer_norm(Var<S> x, Var<S> gamma, Var<S> beta, S eps = S(1e-5)) {
  const Index c = x.cols();
  if (gamma.cols() != c || beta.cols() != c) throw DimensionError("layer_norm: bad affine shape");
  Tape<S>& t = *x.tape;
  int ix = x.id, ig = gamma.id, ib = beta.id;
  const Mat<S>& v = x.value();
  Vec<S> mu = v.rowwise().mean();
  Mat<S> xc = v - mu.replicate(1, c);
  Vec<S> rstd = ((xc.array().square().rowwise().sum() / static_cast<S>(c)) + eps).rsqrt();
  Mat<S> xhat = xc.array().colwise() * rstd.array();
  Mat<S> out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() +
               beta.value().row(0).array();
  return t.push(std::move(out), detail::any_grad({x, gamma, beta}),
                [ix, ig, ib, xhat, rstd, c](Tape<S>& t, int self) {
                  const Mat<S>& g = t.grad(self);
                  if (t.needs_grad(ig)) t.accumulate(ig, g.cwiseProduct(xhat).colwise().sum());
                  if (t.needs_grad(ib)) t.accumulate(ib, g.colwise().sum());
                  if (t.needs_grad(ix)) {
                    Mat<S> gx = g.array().rowwise() * t.value(ig).row(0).array();
                    Vec<S> m1 = gx.rowwise().mean();
                    Vec<S> m2 = gx.cwiseProduct(xhat).rowwise().mean();
                    Mat<S> d = gx - m1.replicate(1, c) - xhat.cwiseProduct(m2.replicate(1, c));
                    d = d.array().colwise() * rstd.array();
                    t.accumulate(ix, d);
                  }
                });
}

// ---------------------------------------------------------------------------
// Structural

template <typename S>
Var<S> concat_cols(const std::vector<Var<S>>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  Tape<S>& t = *parts.front().tape;
  const Index r = parts.front().rows();
  Index c = 0;
  bool needs = false;
  for (const auto& p : parts) {
    if (p.rows() != r) throw DimensionError("concat_cols: row counts differ");
    c += p.cols();
    needs = needs || t.needs_grad(p.id);
  }
  Mat<S> out(r, c);
  std::vector<std::pair<int, Index>> layout;
  Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    layout.emplace_back(p.id, at);
    at += p.cols();
  }
  return t.push(std::move(out), needs, [layout](Tape<S>& t, int self) {
    const Mat<S>& g = t.grad(self);
    for (auto [id, start] : layout)
      if (t.needs_grad(id)) t.accumulate(id, g.middleCols(start, t.value(id).cols()));
  });
}

template <typename S>
Var<S> concat_rows(const std::vector<Var<S>>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  Tape<S>& t = *parts.front().tape;
  const Index c = parts.front().cols();
  Index r = 0;
  bool needs = false;
  for (const auto& p : parts) {
    if (p.cols() != c) throw DimensionError("concat_rows: column counts differ");
    r += p.rows();
    needs = needs || t.needs_grad(p.id);
  }
  Mat<S> out(r, c);
  std::vector<std::pair<int, Index>> layout;
  Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    layout.emplace_back(p.id, at);
    at += p.rows();
  }
  return t.push(std::move(out), needs, [layout](Tape<S>& t, int self) {
    const Mat<S>& g = t.grad(self);
    for (auto [id, start] : layout)
      if (t.needs_grad(id)) t.accumulate(id, g.middleRows(start, t.value(id).rows()));
  });
}

template <typename S>
Var<S> slice_rows(Var<S> a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw DimensionError("slice_rows: out of bounds");
  Tape<S>& t = *a.tape;
  int ia = a.id;
  Mat<S> out = a.value().middleRows(start, count);
  return t.push(std::move(out), detail::any_grad({a}), [ia, start, count](Tape<S>& t, int self) {
    const Mat<S>& v = t.value(ia);
    Mat<S> d = Mat<S>::Zero(v.rows(), v.cols());
    d.middleRows(start, count) = t.grad(self);
    t.accumulate(ia, d);
  });
}

template <typename S>
Var<S> slice_cols(Var<S> a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw DimensionError("slice_cols: out of bounds");
  Tape<S>& t = *a.tape;
  int ia = a.id;
  Mat<S> out = a.value().middleCols(start, count);
  return t.push(std::move(out), detail::any_grad({a}), [ia, start, count](Tape<S>& t, int self) {
    const Mat<S>& v = t.value(ia);
    Mat<S> d = Mat<S>::Zero(v.rows(), v.cols());
    d.middleCols(start, count) = t.grad(self);
    t.accumulate(ia, d);
  });
}

/// out.row(r) = table.row(index[r]); gradients scatter-add back.
template <typename S>
Var<S> gather_rows(Var<S> table, const std::vector<int>& index) {
  Tape<S>& t = *table.tape;
  const Mat<S>& v = table.value();
  Mat<S> out(static_cast<Index>(index.size()), v.cols());
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] < 0 || index[r] >= v.rows()) throw RangeError("gather_rows: index out of range");
    out.row(static_cast<Index>(r)) = v.row(index[r]);
  }
  int it = table.id;
  return t.push(std::move(out), detail::any_grad({table}), [it, index](Tape<S>& t, int self) {
    const Mat<S>& v = t.value(it);
    const Mat<S>& g = t.grad(self);
    Mat<S> d = Mat<S>::Zero(v.rows(), v.cols());
    for (std::size_t r = 0; r < index.size(); ++r) d.row(index[r]) += g.row(static_cast<Index>(r));
    t.accumulate(it, d);
  });
}

/// Reinterprets the row-major data of `a` with a new shape.
template <typename S>
Var<S> reshape(Var<S> a, Index rows, Index cols) {
  if (rows * cols != a.value().size()) throw DimensionError("reshape: size mismatch");
  Tape<S>& t = *a.tape;
  int ia = a.id;
  Mat<S> out = Eigen::Map<const Mat<S>>(a.value().data(), rows, cols);
  return t.push(std::move(out), detail::any_grad({a}), [ia](Tape<S>& t, int self) {
    const Mat<S>& v = t.value(ia);
    t.accumulate(ia, Eigen::Map<const Mat<S>>(t.grad(self).data(), v.rows(), v.cols()));
  });
}

/// Value of `a`, no gradient.
template <typename S>
Var<S> stop_gradient(Var<S> a) {
  return a.tape->constant(a.value());
}

/// Forward value of `quantized`, backward gradient copied to `input` unchanged.
template <typename S>
Var<S> straight_through(Var<S> input, Var<S> quantized) {
  detail::require_same_shape(input, quantized, "straight_through");
  Tape<S>& t = *input.tape;
  int ii = input.id;
  return t.push(quantized.value(), detail::any_grad({input}),
                [ii](Tape<S>& t, int self) { t.accumulate(ii, t.grad(self)); });
}

// ---------------------------------------------------------------------------
// Attention

/// Multi-head scaled dot-product attention. q [n, d], k and v [m, d]; heads
/// split the columns evenly. `mask` [n, m] is added to the scores (-inf
/// excludes a key). Per-head weight matrices are copied to `weights` if given.
template <typename S>
Var<S> attention(Var<S> q, Var<S> k, Var<S> v, int heads, const Mat<S>& mask = Mat<S>(),
                 std::vector<Mat<S>>* weights = nullptr) {
  const Index n = q.rows(), m = k.rows(), d = q.cols();
  if (k.cols() != d || v.cols() != d || v.rows() != m) throw DimensionError("attention: q/k/v shapes disagree");
  if (heads < 1 || d % heads != 0) throw DimensionError("attention: width not divisible by head count");
  if (m < 1) throw DimensionError("attention: no keys");
  if (mask.size() != 0 && (mask.rows() != n || mask.cols() != m)) throw DimensionError("attention: mask shape");
  Tape<S>& t = *q.tape;
  const Index dh = d / heads;
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));
  const Mat<S>& Q = q.value();
  const Mat<S>& K = k.value();
  const Mat<S>& V = v.value();
  Mat<S> out(n, d);
  auto probs = std::make_shared<std::vector<Mat<S>>>(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Mat<S>& P = (*probs)[static_cast<std::size_t>(h)];
    P.noalias() = Q.middleCols(h * dh, dh) * K.middleCols(h * dh, dh).transpose();
    P *= scale;
    if (mask.size() != 0) P += mask;
    for (Index r = 0; r < n; ++r) {
      const S mx = P.row(r).maxCoeff();
      P.row(r) = (P.row(r).array() - mx).exp();
      P.row(r) /= P.row(r).sum();
    }
    out.middleCols(h * dh, dh).noalias() = P * V.middleCols(h * dh, dh);
  }
  if (weights) *weights = *probs;
  const int iq = q.id, ik = k.id, iv = v.id;
  return t.push(std::move(out), detail::any_grad({q, k, v}), [iq, ik, iv, heads, dh, scale, probs](Tape<S>& t, int self) {
    const Mat<S>& G = t.grad(self);
    const Mat<S>& Q = t.value(iq);
    const Mat<S>& K = t.value(ik);
    const Mat<S>& V = t.value(iv);
    Mat<S> dq = Mat<S>::Zero(Q.rows(), Q.cols());
    Mat<S> dk = Mat<S>::Zero(K.rows(), K.cols());
    Mat<S> dv = Mat<S>::Zero(V.rows(), V.cols());
    for (int h = 0; h < heads; ++h) {
      const Mat<S>& P = (*probs)[static_cast<std::size_t>(h)];
      const auto g = G.middleCols(h * dh, dh);
      dv.middleCols(h * dh, dh).noalias() = P.transpose() * g;
      Mat<S> dp;
      dp.noalias() = g * V.middleCols(h * dh, dh).transpose();
      Vec<S> dot = dp.cwiseProduct(P).rowwise().sum();
      Mat<S> ds = P.cwiseProduct(dp - dot.replicate(1, dp.cols())) * scale;
      dq.middleCols(h * dh, dh).noalias() = ds * K.middleCols(h * dh, dh);
      dk.middleCols(h * dh, dh).noalias() = ds.transpose() * Q.middleCols(h * dh, dh);
    }
    if (t.needs_grad(iq)) t.accumulate(iq, dq);
    if (t.needs_grad(ik)) t.accumulate(ik, dk);
    if (t.needs_grad(iv)) t.accumulate(iv, dv);
  });
}

// ---------------------------------------------------------------------------
// Images. Feature maps are stored as [batch * height * width, channels].

struct ConvGeometry {
  int batch = 1;
  int height = 0;
  int width = 0;
  int kernel = 3;
  int stride = 1;
  int pad = 1;

  int out_height() const { return (height + 2 * pad - kernel) / stride + 1; }
  int out_width() const { return (width + 2 * pad - kernel) / stride + 1; }
};

namespace detail {

template <typename S>
Mat<S> im2col(const Mat<S>& x, const ConvGeometry& g) {
  const Index cin = x.cols();
  const int ho = g.out_height(), wo = g.out_width();
  Mat<S> cols = Mat<S>::Zero(static_cast<Index>(g.batch) * ho * wo, g.kernel * g.kernel * cin);
  for (int b = 0; b < g.batch; ++b)
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        const Index row = (static_cast<Index>(b) * ho + oy) * wo + ox;
        for (int ky = 0; ky < g.kernel; ++ky) {
          const int iy = oy * g.stride + ky - g.pad;
          if (iy < 0 || iy >= g.height) continue;
          for (int kx = 0; kx < g.kernel; ++kx) {
            const int ix = ox * g.stride + kx - g.pad;
            if (ix < 0 || ix >= g.width) continue;
            cols.row(row).segment((ky * g.kernel + kx) * cin, cin) =
                x.row((static_cast<Index>(b) * g.height + iy) * g.width + ix);
          }
        }
      }
  return cols;
}

template <typename S>
Mat<S> col2im(const Mat<S>& cols, const ConvGeometry& g, Index cin) {
  const int ho = g.out_height(), wo = g.out_width();
  Mat<S> x = Mat<S>::Zero(static_cast<Index>(g.batch) * g.height * g.width, cin);
  for (int b = 0; b < g.batch; ++b)
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        const Index row = (static_cast<Index>(b) * ho + oy) * wo + ox;
        for (int ky = 0; ky < g.kernel; ++ky) {
          const int iy = oy * g.stride + ky - g.pad;
          if (iy < 0 || iy >= g.height) continue;
          for (int kx = 0; kx < g.kernel; ++kx) {
            const int ix = ox * g.stride + kx - g.pad;
            if (ix < 0 || ix >= g.width) continue;
            x.row((static_cast<Index>(b) * g.height + iy) * g.width + ix) +=
                cols.row(row).segment((ky * g.kernel + kx) * cin, cin);
          }
        }
      }
  return x;
}

}  // namespace detail

/// 2-D convolution. `weight` is [kernel*kernel*in_channels, out_channels].
template <typename S>
Var<S> conv2d(Var<S> x, Var<S> weight, Var<S> bias, const ConvGeometry& g) {
  const Index cin = x.cols();
  if (x.rows() != static_cast<Index>(g.batch) * g.height * g.width)
    throw DimensionError("conv2d: input rows do not match geometry");
  if (weight.rows() != g.kernel * g.kernel * cin) throw DimensionError("conv2d: weight shape mismatch");
  Tape<S>& t = *x.tape;
  Mat<S> cols = detail::im2col(x.value(), g);
  Mat<S> out;
  out.noalias() = cols * weight.value();
  out.rowwise() += bias.value().row(0);
  int ix = x.id, iw = weight.id, ib = bias.id;
  return t.push(std::move(out), detail::any_grad({x, weight, bias}),
                [ix, iw, ib, cols = std::move(cols), g, cin](Tape<S>& t, int self) {
                  const Mat<S>& gr = t.grad(self);
                  if (t.needs_grad(iw)) t.accumulate(iw, cols.transpose() * gr);
                  if (t.needs_grad(ib)) t.accumulate(ib, gr.colwise().sum());
                  if (t.needs_grad(ix)) {
                    Mat<S> dcols;
                    dcols.noalias() = gr * t.value(iw).transpose();
                    t.accumulate(ix, detail::col2im(dcols, g, cin));
                  }
                });
}

/// Nearest-neighbour 2x upsampling of a [batch*h*w, c] map.
template <typename S>
Var<S> upsample2x(Var<S> x, int batch, int height, int width) {
  if (x.rows() != static_cast<Index>(batch) * height * width) throw DimensionError("upsample2x: geometry");
  Tape<S>& t = *x.tape;
  const Index c = x.cols();
  const int h2 = height * 2, w2 = width * 2;
  Mat<S> out(static_cast<Index>(batch) * h2 * w2, c);
  for (int b = 0; b < batch; ++b)
    for (int y = 0; y < h2; ++y)
      for (int xx = 0; xx < w2; ++xx)
        out.row((static_cast<Index>(b) * h2 + y) * w2 + xx) =
            x.value().row((static_cast<Index>(b) * height + y / 2) * width + xx / 2);
  int ix = x.id;
  return t.push(std::move(out), detail::any_grad({x}), [ix, batch, height, width](Tape<S>& t, int self) {
    const Mat<S>& g = t.grad(self);
    const int h2 = height * 2, w2 = width * 2;
    Mat<S> d = Mat<S>::Zero(static_cast<Index>(batch) * height * width, g.cols());
    for (int b = 0; b < batch; ++b)
      for (int y = 0; y < h2; ++y)
        for (int xx = 0; xx < w2; ++xx)
          d.row((static_cast<Index>(b) * height + y / 2) * width + xx / 2) +=
              g.row((static_cast<Index>(b) * h2 + y) * w2 + xx);
    t.accumulate(ix, d);
  });
}

// Operator sugar for the common cases.
template <typename S>
Var<S> operator+(Var<S> a, Var<S> b) {
  return add(a, b);
}
template <typename S>
Var<S> operator-(Var<S> a, Var<S> b) {
  return sub(a, b);
}

}  // namespace ag
}  // namespace emotoken
