#pragma once

#include <cmath>
#include <functional>
#include <initializer_list>
#include <numbers>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cdp/errors.hpp"

// Reverse-mode automatic differentiation over dense row-major matrices.
//
// Every value in a Graph is a 2-D matrix; vectors are [1, n] and scalars [1, 1].
// No operation broadcasts implicitly: row-broadcasting ops carry "rowwise" in
// their name and every shape rule is checked.
namespace cdp::ad {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// A trainable (or frozen) value living outside any Graph.
template <typename Scalar>
struct Tensor {
  Matrix<Scalar> value;
  bool requires_grad = true;

  Eigen::Index rows() const { return value.rows(); }
  Eigen::Index cols() const { return value.cols(); }
  Eigen::Index size() const { return value.size(); }
};

template <typename Scalar>
class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the Graph lives.
template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Graph<Scalar>* graph, int id) : graph_(graph), id_(id) {}

  const Matrix<Scalar>& value() const { return graph_->value(id_); }
  const Matrix<Scalar>& grad() const { return graph_->grad(id_); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  bool requires_grad() const { return graph_->requires_grad(id_); }

  Graph<Scalar>& graph() const { return *graph_; }
  int id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

 private:
  Graph<Scalar>* graph_ = nullptr;
  int id_ = -1;
};

inline std::string shape_string(Eigen::Index rows, Eigen::Index cols) {
  return "[" + std::to_string(rows) + ", " + std::to_string(cols) + "]";
}

/// Tape of operations recorded in topological (creation) order.
template <typename Scalar>
class Graph {
 public:
  using Mat = Matrix<Scalar>;
  using BackwardFn = std::function<void(Graph&, int self)>;

  /// With record_backward = false no backward closures or saved activations
  /// are kept (inference).
  explicit Graph(bool record_backward = true) : record_(record_backward) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<Scalar> constant(Mat value) { return push(std::move(value), nullptr, false); }
  Var<Scalar> leaf(Mat value) { return push(std::move(value), nullptr, record_); }
  Var<Scalar> parameter(const Tensor<Scalar>& t) { return push(Mat(), &t.value, record_ && t.requires_grad); }

  const Mat& value(int id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    return n.external ? *n.external : n.own;
  }
  const Mat& grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  std::size_t size() const { return nodes_.size(); }
  bool recording() const { return record_; }

  /// Appends an op result. The closure runs during backward() when the node
  /// requires grad; it reads grad(self) and accumulates into its parents.
  Var<Scalar> record(Mat value, std::initializer_list<Var<Scalar>> parents, BackwardFn fn) {
    return record(std::move(value), std::span<const Var<Scalar>>(parents.begin(), parents.size()), std::move(fn));
  }
  Var<Scalar> record(Mat value, std::span<const Var<Scalar>> parents, BackwardFn fn) {
    bool any = false;
    for (const auto& p : parents) any = any || requires_grad(p.id());
    const bool rg = record_ && any;
#ifndef NDEBUG
    if (!value.allFinite()) throw Error("autodiff.non_finite", "non-finite value produced by an op");
#endif
    Var<Scalar> v = push(std::move(value), nullptr, rg);
    if (rg) nodes_.back().backward = std::move(fn);
    return v;
  }

  template <typename Derived>
  void accumulate(int id, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  /// Populates grad() of every requires-grad node reachable from loss. Nodes
  /// that receive no gradient end with zeros.
  void backward(Var<Scalar> loss) {
    const Mat& lv = value(loss.id());
    if (lv.rows() != 1 || lv.cols() != 1) {
      throw NonScalarLoss("backward: loss must be [1, 1], got " + shape_string(lv.rows(), lv.cols()));
    }
    for (auto& n : nodes_) n.grad.resize(0, 0);
    if (nodes_[static_cast<std::size_t>(loss.id())].requires_grad) {
      nodes_[static_cast<std::size_t>(loss.id())].grad = Mat::Ones(1, 1);
    }
    for (int id = loss.id(); id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (!n.requires_grad || n.grad.size() == 0 || !n.backward) continue;
      n.backward(*this, id);
    }
    for (std::size_t id = 0; id < nodes_.size(); ++id) {
      Node& n = nodes_[id];
      if (n.requires_grad && n.grad.size() == 0) {
        const Mat& v = value(static_cast<int>(id));
        n.grad = Mat::Zero(v.rows(), v.cols());
      }
    }
  }

 private:
  struct Node {
    Mat own;
    const Mat* external = nullptr;
    Mat grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var<Scalar> push(Mat value, const Mat* external, bool requires_grad) {
    Node n;
    n.own = std::move(value);
    n.external = external;
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var<Scalar>(this, static_cast<int>(nodes_.size() - 1));
  }

  bool record_;
  std::vector<Node> nodes_;
};

namespace detail {

template <typename Scalar>
[[noreturn]] void shape_error(const char* op, const Var<Scalar>& a, const Var<Scalar>& b) {
  throw ShapeMismatch(std::string(op) + ": incompatible shapes " + shape_string(a.rows(), a.cols()) + " and " +
                      shape_string(b.rows(), b.cols()));
}

template <typename Scalar>
void require_same_shape(const char* op, const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_error(op, a, b);
}

template <typename Scalar>
Graph<Scalar>& same_graph(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (&a.graph() != &b.graph()) throw ShapeMismatch("operands belong to different graphs");
  return a.graph();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  auto& g = detail::same_graph(a, b);
  if (a.cols() != b.rows()) detail::shape_error("matmul", a, b);
  Matrix<Scalar> out = a.value() * b.value();
  return g.record(std::move(out), {a, b}, [ia = a.id(), ib = b.id()](Graph<Scalar>& gr, int self) {
    const auto& go = gr.grad(self);
    if (gr.requires_grad(ia)) gr.accumulate(ia, go * gr.value(ib).transpose());
    if (gr.requires_grad(ib)) gr.accumulate(ib, gr.value(ia).transpose() * go);
  });
}

template <typename Scalar>
Var<Scalar> transpose(const Var<Scalar>& a) {
  Matrix<Scalar> out = a.value().transpose();
  return a.graph().record(std::move(out), {a}, [ia = a.id()](Graph<Scalar>& gr, int self) {
    gr.accumulate(ia, gr.grad(self).transpose());
  });
}

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  auto& g = detail::same_graph(a, b);
  detail::require_same_shape("add", a, b);
  Matrix<Scalar> out = a.value() + b.value();
  return g.record(std::move(out), {a, b}, [ia = a.id(), ib = b.id()](Graph<Scalar>& gr, int self) {
    gr.accumulate(ia, gr.grad(self));
    gr.accumulate(ib, gr.grad(self));
  });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  auto& g = detail::same_graph(a, b);
  detail::require_same_shape("sub", a, b);
  Matrix<Scalar> out = a.value() - b.value();
  return g.record(std::move(out), {a, b}, [ia = a.id(), ib = b.id()](Graph<Scalar>& gr, int self) {
    gr.accumulate(ia, gr.grad(self));
    gr.accumulate(ib, -gr.grad(self));
  });
}

/// Elementwise product.
template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  auto& g = detail::same_graph(a, b);
  detail::require_same_shape("mul", a, b);
  Matrix<Scalar> out = a.value().cwiseProduct(b.value());
  return g.record(std::move(out), {a, b}, [ia = a.id(), ib = b.id()](Graph<Scalar>& gr, int self) {
    const auto& go = gr.grad(self);
    if (gr.requires_grad(ia)) gr.accumulate(ia, go.cwiseProduct(gr.value(ib)));
    if (gr.requires_grad(ib)) gr.accumulate(ib, go.cwiseProduct(gr.value(ia)));
  });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar s) {
  Matrix<Scalar> out = a.value() * s;
  return a.graph().record(std::move(out), {a}, [ia = a.id(), s](Graph<Scalar>& gr, int self) {
    gr.accumulate(ia, gr.grad(self) * s);
  });
}

template <typename Scalar>
Var<Scalar> operator+(const Var<Scalar>& a, const Var<Scalar>& b) { return add(a, b); }
template <typename Scalar>
Var<Scalar> operator-(const Var<Scalar>& a, const Var<Scalar>& b) { return sub(a, b); }

/// a[m, n] + row[1, n] added to every row.
template <typename Scalar>
Var<Scalar> add_rowwise(const Var<Scalar>& a, const Var<Scalar>& row) {
  auto& g = detail::same_graph(a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) detail::shape_error("add_rowwise", a, row);
  Matrix<Scalar> out = a.value().rowwise() + row.value().row(0);
  return g.record(std::move(out), {a, row}, [ia = a.id(), ir = row.id()](Graph<Scalar>& gr, int self) {
    gr.accumulate(ia, gr.grad(self));
    if (gr.requires_grad(ir)) gr.accumulate(ir, gr.grad(self).colwise().sum());
  });
}

/// a[m, n] scaled columnwise by row[1, n].
template <typename Scalar>
Var<Scalar> mul_rowwise(const Var<Scalar>& a, const Var<Scalar>& row) {
  auto& g = detail::same_graph(a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) detail::shape_error("mul_rowwise", a, row);
  Matrix<Scalar> out = a.value() * row.value().row(0).asDiagonal();
  return g.record(std::move(out), {a, row}, [ia = a.id(), ir = row.id()](Graph<Scalar>& gr, int self) {
    const auto& go = gr.grad(self);
    if (gr.requires_grad(ia)) gr.accumulate(ia, go * gr.value(ir).row(0).asDiagonal());
    if (gr.requires_grad(ir)) gr.accumulate(ir, go.cwiseProduct(gr.value(ia)).colwise().sum());
  });
}

// ---------------------------------------------------------------------------
// Nonlinearities

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& a) {
  Matrix<Scalar> out = a.value().cwiseMax(Scalar(0));
  return a.graph().record(std::move(out), {a}, [ia = a.id()](Graph<Scalar>& gr, int self) {
    const auto& x = gr.value(ia);
    gr.accumulate(ia, (x.array() > Scalar(0)).select(gr.grad(self), Scalar(0)));
  });
}

/// GELU, tanh approximation.
template <typename Scalar>
Var<Scalar> gelu(const Var<Scalar>& a) {
  constexpr Scalar c = Scalar(0.7978845608028654);  // sqrt(2/pi)
  constexpr Scalar k = Scalar(0.044715);
  const auto& x = a.value();
  Matrix<Scalar> t = (c * (x.array() + k * x.array().cube())).tanh().matrix();
  Matrix<Scalar> out = (Scalar(0.5) * x.array() * (Scalar(1) + t.array())).matrix();
  if (!a.graph().recording()) return a.graph().record(std::move(out), {a}, {});
  return a.graph().record(std::move(out), {a}, [ia = a.id(), t = std::move(t), c, k](Graph<Scalar>& gr, int self) {
    const auto x = gr.value(ia).array();
    const auto d = Scalar(0.5) * (Scalar(1) + t.array()) +
                   Scalar(0.5) * x * (Scalar(1) - t.array().square()) * c * (Scalar(1) + Scalar(3) * k * x.square());
    gr.accumulate(ia, (gr.grad(self).array() * d).matrix());
  });
}

namespace detail {

template <typename Scalar>
void softmax_rows_inplace(Matrix<Scalar>& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    row.array() -= row.maxCoeff();
    row = row.array().exp().matrix();
    row /= row.sum();
  }
}

}  // namespace detail

/// Softmax along axis 1 (within each row) or axis 0 (within each column).
template <typename Scalar>
Var<Scalar> softmax(const Var<Scalar>& a, int axis) {
  if (axis != 0 && axis != 1) throw ShapeMismatch("softmax: axis must be 0 or 1, got " + std::to_string(axis));
  Matrix<Scalar> y;
  if (axis == 1) {
    y = a.value();
    detail::softmax_rows_inplace(y);
  } else {
    y = a.value().transpose();
    detail::softmax_rows_inplace(y);
    y.transposeInPlace();
  }
  return a.graph().record(y, {a}, [ia = a.id(), axis](Graph<Scalar>& gr, int self) {
    const auto& go = gr.grad(self);
    // The saved output is this node's value.
    const auto& yv = gr.value(self);
    Matrix<Scalar> gy = go.cwiseProduct(yv);
    if (axis == 1) {
      Eigen::Matrix<Scalar, Eigen::Dynamic, 1> s = gy.rowwise().sum();
      gr.accumulate(ia, gy - yv.cwiseProduct(s.replicate(1, yv.cols())));
    } else {
      Eigen::Matrix<Scalar, 1, Eigen::Dynamic> s = gy.colwise().sum();
      gr.accumulate(ia, gy - yv.cwiseProduct(s.replicate(yv.rows(), 1)));
    }
  });
}

/// Row-wise normalization to zero mean and unit (population) variance. No
/// affine part; compose with mul_rowwise / add_rowwise.
template <typename Scalar>
Var<Scalar> layer_norm(const Var<Scalar>& a, Scalar eps = Scalar(1e-5)) {
  const auto& x = a.value();
  const Eigen::Index n = x.cols();
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_std(x.rows());
  Matrix<Scalar> xhat(x.rows(), n);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Scalar mu = x.row(r).mean();
    const auto centered = (x.row(r).array() - mu);
    const Scalar var = centered.square().sum() / Scalar(n);
    inv_std(r) = Scalar(1) / std::sqrt(var + eps);
    xhat.row(r) = (centered * inv_std(r)).matrix();
  }
  return a.graph().record(xhat, {a}, [ia = a.id(), inv_std = std::move(inv_std)](Graph<Scalar>& gr, int self) {
    const auto& go = gr.grad(self);
    const auto& xh = gr.value(self);
    const Scalar n = Scalar(xh.cols());
    Matrix<Scalar> dx(xh.rows(), xh.cols());
    for (Eigen::Index r = 0; r < xh.rows(); ++r) {
      const Scalar mg = go.row(r).sum() / n;
      const Scalar mgx = go.row(r).dot(xh.row(r)) / n;
      dx.row(r) = inv_std(r) * (go.row(r).array() - mg - xh.row(r).array() * mgx).matrix();
    }
    gr.accumulate(ia, dx);
  });
}

// ---------------------------------------------------------------------------
// Structure

/// Concatenation along axis 0 (stack rows) or axis 1 (stack columns).
template <typename Scalar>
Var<Scalar> concat(std::span<const Var<Scalar>> parts, int axis) {
  if (parts.empty()) throw ShapeMismatch("concat: no inputs");
  if (axis != 0 && axis != 1) throw ShapeMismatch("concat: axis must be 0 or 1");
  auto& g = parts.front().graph();
  Eigen::Index rows = 0, cols = 0;
  for (const auto& p : parts) {
    detail::same_graph(parts.front(), p);
    if (axis == 0) {
      if (p.cols() != parts.front().cols()) detail::shape_error("concat(axis=0)", parts.front(), p);
      rows += p.rows();
      cols = p.cols();
    } else {
      if (p.rows() != parts.front().rows()) detail::shape_error("concat(axis=1)", parts.front(), p);
      cols += p.cols();
      rows = p.rows();
    }
  }
  Matrix<Scalar> out(rows, cols);
  std::vector<int> ids;
  std::vector<Eigen::Index> offsets;
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    if (axis == 0) {
      out.middleRows(off, p.rows()) = p.value();
      offsets.push_back(off);
      off += p.rows();
    } else {
      out.middleCols(off, p.cols()) = p.value();
      offsets.push_back(off);
      off += p.cols();
    }
    ids.push_back(p.id());
  }
  return g.record(std::move(out), parts, [ids, offsets, axis](Graph<Scalar>& gr, int self) {
    const auto& go = gr.grad(self);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (!gr.requires_grad(ids[i])) continue;
      const auto& v = gr.value(ids[i]);
      if (axis == 0) {
        gr.accumulate(ids[i], go.middleRows(offsets[i], v.rows()));
      } else {
        gr.accumulate(ids[i], go.middleCols(offsets[i], v.cols()));
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> concat(std::initializer_list<Var<Scalar>> parts, int axis) {
  return concat(std::span<const Var<Scalar>>(parts.begin(), parts.size()), axis);
}

/// Contiguous slice [start, start + length) along axis.
template <typename Scalar>
Var<Scalar> slice(const Var<Scalar>& a, int axis, Eigen::Index start, Eigen::Index length) {
  const Eigen::Index extent = axis == 0 ? a.rows() : a.cols();
  if ((axis != 0 && axis != 1) || start < 0 || length < 0 || start + length > extent) {
    throw ShapeMismatch("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                        ") along axis " + std::to_string(axis) + " out of bounds for " +
                        shape_string(a.rows(), a.cols()));
  }
  Matrix<Scalar> out = axis == 0 ? Matrix<Scalar>(a.value().middleRows(start, length))
                                 : Matrix<Scalar>(a.value().middleCols(start, length));
  return a.graph().record(std::move(out), {a}, [ia = a.id(), axis, start](Graph<Scalar>& gr, int self) {
    const auto& v = gr.value(ia);
    Matrix<Scalar> d = Matrix<Scalar>::Zero(v.rows(), v.cols());
    const auto& go = gr.grad(self);
    if (axis == 0) {
      d.middleRows(start, go.rows()) = go;
    } else {
      d.middleCols(start, go.cols()) = go;
    }
    gr.accumulate(ia, d);
  });
}

/// Gathers rows of table[V, d] by index; also used as a row permutation.
template <typename Scalar>
Var<Scalar> embedding_lookup(const Var<Scalar>& table, std::vector<int> indices) {
  const auto& t = table.value();
  Matrix<Scalar> out(static_cast<Eigen::Index>(indices.size()), t.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || indices[i] >= t.rows()) {
      throw ShapeMismatch("embedding_lookup: index " + std::to_string(indices[i]) + " out of range for table " +
                          shape_string(t.rows(), t.cols()));
    }
    out.row(static_cast<Eigen::Index>(i)) = t.row(indices[i]);
  }
  return table.graph().record(std::move(out), {table},
                              [it = table.id(), indices = std::move(indices)](Graph<Scalar>& gr, int self) {
                                const auto& v = gr.value(it);
                                const auto& go = gr.grad(self);
                                Matrix<Scalar> d = Matrix<Scalar>::Zero(v.rows(), v.cols());
                                for (std::size_t i = 0; i < indices.size(); ++i) {
                                  d.row(indices[i]) += go.row(static_cast<Eigen::Index>(i));
                                }
                                gr.accumulate(it, d);
                              });
}

/// [T, d] -> [times * T, d], the whole block repeated.
template <typename Scalar>
Var<Scalar> tile_rows(const Var<Scalar>& a, Eigen::Index times) {
  if (times < 1) throw ShapeMismatch("tile_rows: times must be >= 1");
  Matrix<Scalar> out = a.value().replicate(times, 1);
  return a.graph().record(std::move(out), {a}, [ia = a.id(), times](Graph<Scalar>& gr, int self) {
    const auto& go = gr.grad(self);
    const Eigen::Index rows = go.rows() / times;
    Matrix<Scalar> d = go.topRows(rows);
    for (Eigen::Index k = 1; k < times; ++k) d += go.middleRows(k * rows, rows);
    gr.accumulate(ia, d);
  });
}

/// [B, d] -> [B * times, d], each row repeated `times` times consecutively.
template <typename Scalar>
Var<Scalar> repeat_rows(const Var<Scalar>& a, Eigen::Index times) {
  if (times < 1) throw ShapeMismatch("repeat_rows: times must be >= 1");
  const auto& v = a.value();
  Matrix<Scalar> out(v.rows() * times, v.cols());
  for (Eigen::Index r = 0; r < v.rows(); ++r) out.middleRows(r * times, times) = v.row(r).replicate(times, 1);
  return a.graph().record(std::move(out), {a}, [ia = a.id(), times](Graph<Scalar>& gr, int self) {
    const auto& go = gr.grad(self);
    Matrix<Scalar> d(go.rows() / times, go.cols());
    for (Eigen::Index r = 0; r < d.rows(); ++r) d.row(r) = go.middleRows(r * times, times).colwise().sum();
    gr.accumulate(ia, d);
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& a) {
  Matrix<Scalar> out(1, 1);
  out(0, 0) = a.value().mean();
  return a.graph().record(std::move(out), {a}, [ia = a.id()](Graph<Scalar>& gr, int self) {
    const auto& v = gr.value(ia);
    gr.accumulate(ia, Matrix<Scalar>::Constant(v.rows(), v.cols(), gr.grad(self)(0, 0) / Scalar(v.size())));
  });
}

template <typename Scalar>
Var<Scalar> sum_sq(const Var<Scalar>& a) {
  Matrix<Scalar> out(1, 1);
  out(0, 0) = a.value().squaredNorm();
  return a.graph().record(std::move(out), {a}, [ia = a.id()](Graph<Scalar>& gr, int self) {
    gr.accumulate(ia, gr.value(ia) * (Scalar(2) * gr.grad(self)(0, 0)));
  });
}

// ---------------------------------------------------------------------------
// Attention

/// Multi-head scaled dot-product attention over `batch` independent sequences
/// stacked along rows: q is [batch * Tq, d], k and v are [batch * Tk, d]. Head h
/// uses columns [h * d / heads, (h + 1) * d / heads). Returns [batch * Tq, d].
template <typename Scalar>
Var<Scalar> attention(const Var<Scalar>& q, const Var<Scalar>& k, const Var<Scalar>& v, int heads, int batch) {
  auto& g = detail::same_graph(q, k);
  detail::same_graph(q, v);
  detail::require_same_shape("attention(k, v)", k, v);
  if (q.cols() != k.cols()) detail::shape_error("attention(q, k)", q, k);
  if (heads < 1 || q.cols() % heads != 0) {
    throw ShapeMismatch("attention: width " + std::to_string(q.cols()) + " not divisible by " +
                        std::to_string(heads) + " heads");
  }
  if (batch < 1 || q.rows() % batch != 0 || k.rows() % batch != 0) {
    throw ShapeMismatch("attention: rows " + shape_string(q.rows(), k.rows()) + " not divisible by batch " +
                        std::to_string(batch));
  }
  const Eigen::Index tq = q.rows() / batch, tk = k.rows() / batch, dh = q.cols() / heads;
  const Scalar inv_sqrt = Scalar(1) / std::sqrt(Scalar(dh));
  const bool keep = g.recording() && (q.requires_grad() || k.requires_grad() || v.requires_grad());

  Matrix<Scalar> out(q.rows(), q.cols());
  std::vector<Matrix<Scalar>> probs;
  if (keep) probs.reserve(static_cast<std::size_t>(batch * heads));
  Matrix<Scalar> p;
  for (int b = 0; b < batch; ++b) {
    for (int h = 0; h < heads; ++h) {
      const auto qb = q.value().block(b * tq, h * dh, tq, dh);
      const auto kb = k.value().block(b * tk, h * dh, tk, dh);
      const auto vb = v.value().block(b * tk, h * dh, tk, dh);
      p.noalias() = (qb * kb.transpose()) * inv_sqrt;
      detail::softmax_rows_inplace(p);
      out.block(b * tq, h * dh, tq, dh).noalias() = p * vb;
      if (keep) probs.push_back(p);
    }
  }
  if (!keep) return g.record(std::move(out), {q, k, v}, {});
  return g.record(std::move(out), {q, k, v},
                  [iq = q.id(), ik = k.id(), iv = v.id(), probs = std::move(probs), heads, batch, tq, tk, dh,
                   inv_sqrt](Graph<Scalar>& gr, int self) {
                    const auto& go = gr.grad(self);
                    const auto& qv = gr.value(iq);
                    const auto& kv = gr.value(ik);
                    const auto& vv = gr.value(iv);
                    Matrix<Scalar> dq = Matrix<Scalar>::Zero(qv.rows(), qv.cols());
                    Matrix<Scalar> dk = Matrix<Scalar>::Zero(kv.rows(), kv.cols());
                    Matrix<Scalar> dv = Matrix<Scalar>::Zero(vv.rows(), vv.cols());
                    Matrix<Scalar> dp, ds;
                    for (int b = 0; b < batch; ++b) {
                      for (int h = 0; h < heads; ++h) {
                        const auto& pb = probs[static_cast<std::size_t>(b * heads + h)];
                        const auto gob = go.block(b * tq, h * dh, tq, dh);
                        const auto qb = qv.block(b * tq, h * dh, tq, dh);
                        const auto kb = kv.block(b * tk, h * dh, tk, dh);
                        const auto vb = vv.block(b * tk, h * dh, tk, dh);
                        dv.block(b * tk, h * dh, tk, dh).noalias() = pb.transpose() * gob;
                        dp.noalias() = gob * vb.transpose();
                        ds = pb.cwiseProduct(dp);
                        Eigen::Matrix<Scalar, Eigen::Dynamic, 1> rs = ds.rowwise().sum();
                        ds -= pb.cwiseProduct(rs.replicate(1, pb.cols()));
                        dq.block(b * tq, h * dh, tq, dh).noalias() = (ds * kb) * inv_sqrt;
                        dk.block(b * tk, h * dh, tk, dh).noalias() = (ds.transpose() * qb) * inv_sqrt;
                      }
                    }
                    gr.accumulate(iq, dq);
                    gr.accumulate(ik, dk);
                    gr.accumulate(iv, dv);
                  });
}

// ---------------------------------------------------------------------------
// Optimization

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename Scalar>
struct AdamState {
  std::vector<Matrix<Scalar>> m;
  std::vector<Matrix<Scalar>> v;
  long step = 0;
};

/// One bias-corrected Adam update of every requires-grad tensor.
template <typename Scalar>
void adam_step(std::span<Tensor<Scalar>> params, std::span<const Matrix<Scalar>> grads, AdamState<Scalar>& state,
               const AdamConfig& cfg) {
  if (params.size() != grads.size()) throw ShapeMismatch("adam_step: parameter and gradient counts differ");
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.push_back(Matrix<Scalar>::Zero(p.rows(), p.cols()));
      state.v.push_back(Matrix<Scalar>::Zero(p.rows(), p.cols()));
    }
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  const auto b1 = static_cast<Scalar>(cfg.beta1), b2 = static_cast<Scalar>(cfg.beta2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].requires_grad) continue;
    const auto& gi = grads[i];
    if (gi.rows() != params[i].rows() || gi.cols() != params[i].cols()) {
      throw ShapeMismatch("adam_step: gradient " + shape_string(gi.rows(), gi.cols()) + " vs parameter " +
                          shape_string(params[i].rows(), params[i].cols()));
    }
    state.m[i] = b1 * state.m[i] + (Scalar(1) - b1) * gi;
    state.v[i] = b2 * state.v[i] + (Scalar(1) - b2) * gi.cwiseAbs2();
    const auto step_size = static_cast<Scalar>(cfg.lr / bc1);
    const auto denom_scale = static_cast<Scalar>(1.0 / std::sqrt(bc2));
    params[i].value.array() -=
        step_size * state.m[i].array() / (state.v[i].array().sqrt() * denom_scale + static_cast<Scalar>(cfg.eps));
  }
}

/// Rescales grads in place so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
template <typename Scalar>
double clip_grad_norm(std::span<Matrix<Scalar>> grads, double max_norm) {
  double total = 0.0;
  for (const auto& g : grads) total += static_cast<double>(g.squaredNorm());
  total = std::sqrt(total);
  if (total > max_norm && total > 0.0) {
    const auto s = static_cast<Scalar>(max_norm / total);
    for (auto& g : grads) g *= s;
  }
  return total;
}

}  // namespace cdp::ad
