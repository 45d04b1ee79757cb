#pragma once

#include <atomic>
#include <cmath>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mdmt/tensor.hpp"

namespace mdmt {

enum class OpKind {
  leaf,
  matmul,
  add,
  elementwise_mul,
  relu,
  sigmoid,
  softmax_lastdim,
  layernorm_lastdim,
  scalar_scale,
  sum,
  concat_lastdim,
  gather_rows,
  bce_mean,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::leaf: return "leaf";
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::elementwise_mul: return "elementwise_mul";
    case OpKind::relu: return "relu";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::softmax_lastdim: return "softmax_lastdim";
    case OpKind::layernorm_lastdim: return "layernorm_lastdim";
    case OpKind::scalar_scale: return "scalar_scale";
    case OpKind::sum: return "sum";
    case OpKind::concat_lastdim: return "concat_lastdim";
    case OpKind::gather_rows: return "gather_rows";
    case OpKind::bce_mean: return "bce_mean";
  }
  return "?";
}

constexpr double kLayerNormEps = 1e-5;
constexpr double kBceClamp = 1e-7;

// Records a single training step's computation. Node ids are topological by
// construction (an op's inputs always precede it). One tape per step; a
// fresh step means a fresh tape.
template <typename S>
class Tape {
 public:
  struct Node {
    OpKind op = OpKind::leaf;
    std::vector<int> in;
    MatrixX<S> value;
    int rank = 2;
    std::vector<int> gather;  // gather_rows: looked-up row indices
    MatrixX<S> aux;           // bce_mean: labels
  };

  Tape() : id_(next_tape_id()) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  uint64_t id() const { return id_; }
  size_t size() const { return nodes_.size(); }
  const Node& node(int i) const { return nodes_[static_cast<size_t>(i)]; }

  // Registers a tensor as a named leaf (a trainable parameter). Gradients
  // are only retrievable for watched tensors; everything else entering ops
  // is treated as a constant.
  int watch(Tensor<S>& t) {
    if (t.node >= 0 && t.tape_id == id_) return t.node;
    t.node = alloc_leaf(t);
    t.tape_id = id_;
    return t.node;
  }

  int alloc_leaf(const Tensor<S>& t) {
    Node n;
    n.op = OpKind::leaf;
    n.value = t.values;
    n.rank = t.rank;
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  int record(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

 private:
  static uint64_t next_tape_id() {
    static std::atomic<uint64_t> counter{1};
    return counter.fetch_add(1);
  }

  uint64_t id_;
  std::vector<Node> nodes_;
};

// node_id -> gradient tensor, shape-identical to the node's value. Carries
// the originating tape's id so consumers can reject stale node handles.
template <typename S>
class GradientMap {
 public:
  void set(int node, Tensor<S> g) { grads_[node] = std::move(g); }

  uint64_t tape_id() const { return tape_id_; }
  void set_tape_id(uint64_t id) { tape_id_ = id; }

  bool contains(int node) const { return grads_.count(node) > 0; }

  const Tensor<S>& at(int node) const {
    auto it = grads_.find(node);
    if (it == grads_.end()) {
      throw ShapeError("no gradient recorded for node " + std::to_string(node));
    }
    return it->second;
  }

  size_t size() const { return grads_.size(); }

  auto begin() const { return grads_.begin(); }
  auto end() const { return grads_.end(); }

 private:
  uint64_t tape_id_ = 0;
  std::unordered_map<int, Tensor<S>> grads_;
};

namespace detail {

template <typename S>
int input_id(Tape<S>* tp, const Tensor<S>& t) {
  if (t.node >= 0 && t.tape_id == tp->id()) return t.node;
  return tp->alloc_leaf(t);
}

template <typename S>
Tensor<S> finish(Tape<S>* tp, OpKind op, std::vector<int> in, MatrixX<S> value,
                 int rank, std::vector<int> gather = {}, MatrixX<S> aux = {}) {
  if (!value.allFinite()) {
    throw NumericError(std::string("non-finite output from primitive '") + op_name(op) + "'");
  }
  Tensor<S> out;
  out.values = std::move(value);
  out.rank = rank;
  if (tp != nullptr) {
    typename Tape<S>::Node n;
    n.op = op;
    n.in = std::move(in);
    n.value = out.values;
    n.rank = rank;
    n.gather = std::move(gather);
    n.aux = std::move(aux);
    out.node = tp->record(std::move(n));
    out.tape_id = tp->id();
  }
  return out;
}

template <typename S>
[[noreturn]] void shape_fail(OpKind op, const Tensor<S>& a, const Tensor<S>& b) {
  throw ShapeError(std::string("shape mismatch in primitive '") + op_name(op) + "': " +
                   shape_str(a) + " vs " + shape_str(b));
}

}  // namespace detail

// --- primitives -----------------------------------------------------------
// All primitives take the active tape as first argument; pass nullptr for
// untracked (no-grad) evaluation.

template <typename S>
Tensor<S> matmul(Tape<S>* tp, const Tensor<S>& a, const Tensor<S>& b) {
  if (b.rank != 2 || a.cols() != b.rows()) detail::shape_fail(OpKind::matmul, a, b);
  std::vector<int> in;
  if (tp) in = {detail::input_id(tp, a), detail::input_id(tp, b)};
  MatrixX<S> v = a.values * b.values;
  return detail::finish(tp, OpKind::matmul, std::move(in), std::move(v), a.rank);
}

// Same-shape addition, plus the one broadcast the model needs:
// (rows, cols) + rank-1 bias of length cols.
template <typename S>
Tensor<S> add(Tape<S>* tp, const Tensor<S>& a, const Tensor<S>& b) {
  MatrixX<S> v;
  if (a.same_shape(b)) {
    v = a.values + b.values;
  } else if (a.rank == 2 && b.rank == 1 && b.cols() == a.cols()) {
    v = a.values.rowwise() + b.values.row(0);
  } else {
    detail::shape_fail(OpKind::add, a, b);
  }
  std::vector<int> in;
  if (tp) in = {detail::input_id(tp, a), detail::input_id(tp, b)};
  return detail::finish(tp, OpKind::add, std::move(in), std::move(v), a.rank);
}

// Hadamard product. Same shapes, or one operand with a single column
// broadcast across the other's columns (row count must match).
template <typename S>
Tensor<S> elementwise_mul(Tape<S>* tp, const Tensor<S>& a, const Tensor<S>& b) {
  MatrixX<S> v;
  int rank = a.rank;
  if (a.same_shape(b)) {
    v = a.values.array() * b.values.array();
  } else if (a.rows() == b.rows() && b.cols() == 1) {
    v = a.values.array().colwise() * b.values.col(0).array();
  } else if (a.rows() == b.rows() && a.cols() == 1) {
    v = b.values.array().colwise() * a.values.col(0).array();
    rank = b.rank;
  } else {
    detail::shape_fail(OpKind::elementwise_mul, a, b);
  }
  std::vector<int> in;
  if (tp) in = {detail::input_id(tp, a), detail::input_id(tp, b)};
  return detail::finish(tp, OpKind::elementwise_mul, std::move(in), std::move(v), rank);
}

template <typename S>
Tensor<S> relu(Tape<S>* tp, const Tensor<S>& x) {
  std::vector<int> in;
  if (tp) in = {detail::input_id(tp, x)};
  MatrixX<S> v = x.values.cwiseMax(S(0));
  return detail::finish(tp, OpKind::relu, std::move(in), std::move(v), x.rank);
}

template <typename S>
Tensor<S> sigmoid(Tape<S>* tp, const Tensor<S>& x) {
  std::vector<int> in;
  if (tp) in = {detail::input_id(tp, x)};
  // 0.5*(1+tanh(x/2)) is the overflow-free form of the logistic.
  MatrixX<S> v = (S(0.5) * ((x.values.array() * S(0.5)).tanh() + S(1))).matrix();
  return detail::finish(tp, OpKind::sigmoid, std::move(in), std::move(v), x.rank);
}

template <typename S>
Tensor<S> softmax_lastdim(Tape<S>* tp, const Tensor<S>& x) {
  std::vector<int> in;
  if (tp) in = {detail::input_id(tp, x)};
  MatrixX<S> v = x.values;
  for (Eigen::Index r = 0; r < v.rows(); ++r) {
    auto row = v.row(r).array();
    const S m = row.maxCoeff();
    v.row(r) = (row - m).exp();
    v.row(r) /= v.row(r).sum();
  }
  return detail::finish(tp, OpKind::softmax_lastdim, std::move(in), std::move(v), x.rank);
}

// LayerNorm over the last dimension, epsilon 1e-5, no learnable affine (the
// surrounding affine layers already provide scale and shift freedom).
template <typename S>
Tensor<S> layernorm_lastdim(Tape<S>* tp, const Tensor<S>& x) {
  std::vector<int> in;
  if (tp) in = {detail::input_id(tp, x)};
  const S n = static_cast<S>(x.cols());
  MatrixX<S> v = x.values;
  for (Eigen::Index r = 0; r < v.rows(); ++r) {
    auto row = v.row(r).array();
    const S mu = row.sum() / n;
    const S var = (row - mu).square().sum() / n;
    const S inv = S(1) / std::sqrt(var + static_cast<S>(kLayerNormEps));
    v.row(r) = (row - mu) * inv;
  }
  return detail::finish(tp, OpKind::layernorm_lastdim, std::move(in), std::move(v), x.rank);
}

// x scaled by a traced scalar s (shape [1]).
template <typename S>
Tensor<S> scalar_scale(Tape<S>* tp, const Tensor<S>& x, const Tensor<S>& s) {
  if (s.size() != 1) detail::shape_fail(OpKind::scalar_scale, x, s);
  std::vector<int> in;
  if (tp) in = {detail::input_id(tp, x), detail::input_id(tp, s)};
  MatrixX<S> v = x.values * s.values(0, 0);
  return detail::finish(tp, OpKind::scalar_scale, std::move(in), std::move(v), x.rank);
}

// Sum of all entries, producing a scalar (shape [1]).
template <typename S>
Tensor<S> sum_all(Tape<S>* tp, const Tensor<S>& x) {
  std::vector<int> in;
  if (tp) in = {detail::input_id(tp, x)};
  MatrixX<S> v(1, 1);
  v(0, 0) = x.values.sum();
  return detail::finish(tp, OpKind::sum, std::move(in), std::move(v), 1);
}

template <typename S>
Tensor<S> concat_lastdim(Tape<S>* tp, std::span<const Tensor<S>> parts) {
  if (parts.empty()) throw ShapeError("concat_lastdim with no inputs");
  const Eigen::Index rows = parts[0].rows();
  const int rank = parts[0].rank;
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows || p.rank != rank) detail::shape_fail(OpKind::concat_lastdim, parts[0], p);
    cols += p.cols();
  }
  MatrixX<S> v(rows, cols);
  Eigen::Index at = 0;
  std::vector<int> in;
  for (const auto& p : parts) {
    v.block(0, at, rows, p.cols()) = p.values;
    at += p.cols();
    if (tp) in.push_back(detail::input_id(tp, p));
  }
  return detail::finish(tp, OpKind::concat_lastdim, std::move(in), std::move(v), rank);
}

template <typename S>
Tensor<S> concat_lastdim(Tape<S>* tp, const std::vector<Tensor<S>>& parts) {
  return concat_lastdim(tp, std::span<const Tensor<S>>(parts.data(), parts.size()));
}

// Row lookup into a (vocab, dim) table; the backward pass scatter-adds into
// the looked-up rows, so untouched rows keep zero gradient.
template <typename S>
Tensor<S> gather_rows(Tape<S>* tp, const Tensor<S>& table, const std::vector<int>& rows) {
  if (table.rank != 2) {
    throw ShapeError("gather_rows expects a rank-2 table, got " + shape_str(table));
  }
  MatrixX<S> v(static_cast<Eigen::Index>(rows.size()), table.cols());
  for (size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= table.rows()) {
      throw ShapeError("gather_rows index " + std::to_string(rows[i]) +
                       " out of bounds for table " + shape_str(table));
    }
    v.row(static_cast<Eigen::Index>(i)) = table.values.row(rows[i]);
  }
  std::vector<int> in;
  if (tp) in = {detail::input_id(tp, table)};
  return detail::finish(tp, OpKind::gather_rows, std::move(in), std::move(v), 2, rows);
}

// Mean over rows of the summed per-column binary cross entropy:
//   L = (1/B) * sum_{i,t} -[y*log(p) + (1-y)*log(1-p)]
// with p clamped to [1e-7, 1-1e-7]. Labels are a constant; gradients flow to
// the predictions only.
template <typename S>
Tensor<S> bce_mean(Tape<S>* tp, const Tensor<S>& pred, const Tensor<S>& labels) {
  if (!pred.same_shape(labels)) detail::shape_fail(OpKind::bce_mean, pred, labels);
  if (pred.rows() == 0) throw ShapeError("bce_mean on empty batch");
  const S lo = static_cast<S>(kBceClamp);
  const S hi = S(1) - static_cast<S>(kBceClamp);
  double total = 0.0;
  for (Eigen::Index r = 0; r < pred.rows(); ++r) {
    for (Eigen::Index c = 0; c < pred.cols(); ++c) {
      const S y = labels.values(r, c);
      if (y != S(0) && y != S(1)) {
        throw ShapeError("bce_mean label not in {0,1} at (" + std::to_string(r) + "," +
                         std::to_string(c) + ")");
      }
      S p = pred.values(r, c);
      p = p < lo ? lo : (p > hi ? hi : p);
      total += -(double(y) * std::log(double(p)) + (1.0 - double(y)) * std::log(1.0 - double(p)));
    }
  }
  MatrixX<S> v(1, 1);
  v(0, 0) = static_cast<S>(total / static_cast<double>(pred.rows()));
  std::vector<int> in;
  if (tp) in = {detail::input_id(tp, pred)};
  return detail::finish(tp, OpKind::bce_mean, std::move(in), std::move(v), 1, {}, labels.values);
}

// Dispatcher over the public primitive set, used by the gradient checker to
// treat every kind uniformly.
template <typename S>
Tensor<S> apply_primitive(Tape<S>* tp, OpKind kind, std::span<const Tensor<S>> inputs) {
  auto want = [&](size_t n) {
    if (inputs.size() != n) {
      throw ShapeError(std::string("primitive '") + op_name(kind) + "' expects " +
                       std::to_string(n) + " inputs, got " + std::to_string(inputs.size()));
    }
  };
  switch (kind) {
    case OpKind::matmul: want(2); return matmul(tp, inputs[0], inputs[1]);
    case OpKind::add: want(2); return add(tp, inputs[0], inputs[1]);
    case OpKind::elementwise_mul: want(2); return elementwise_mul(tp, inputs[0], inputs[1]);
    case OpKind::relu: want(1); return relu(tp, inputs[0]);
    case OpKind::sigmoid: want(1); return sigmoid(tp, inputs[0]);
    case OpKind::softmax_lastdim: want(1); return softmax_lastdim(tp, inputs[0]);
    case OpKind::layernorm_lastdim: want(1); return layernorm_lastdim(tp, inputs[0]);
    case OpKind::scalar_scale: want(2); return scalar_scale(tp, inputs[0], inputs[1]);
    case OpKind::sum: want(1); return sum_all(tp, inputs[0]);
    case OpKind::concat_lastdim: return concat_lastdim(tp, inputs);
    default:
      throw ShapeError(std::string("apply_primitive: '") + op_name(kind) +
                       "' is not a public primitive");
  }
}

// Test fixture: scales the input-gradients computed by every node of `kind`,
// letting the gradient checker prove it catches a broken backward rule.
struct BackwardHook {
  OpKind kind;
  double scale;
};

// Reverse-mode sweep from a scalar loss. Returns gradients for every leaf
// node on the tape; leaves the loss does not reach get zeros.
template <typename S>
GradientMap<S> backward(const Tape<S>& tape, const Tensor<S>& loss,
                        const BackwardHook* hook = nullptr) {
  if (loss.node < 0 || loss.tape_id != tape.id() ||
      loss.node >= static_cast<int>(tape.size())) {
    throw ShapeError("backward: loss tensor is not on the active tape");
  }
  if (!loss.is_scalar_shape()) {
    throw ShapeError("backward: loss must be a scalar (shape [1]), got " + shape_str(loss));
  }

  std::vector<MatrixX<S>> grads(tape.size());
  auto accum = [&](int id, const MatrixX<S>& g) {
    if (grads[id].size() == 0) {
      grads[id] = g;
    } else {
      grads[id] += g;
    }
  };

  grads[loss.node] = MatrixX<S>::Ones(1, 1);

  for (int id = loss.node; id >= 0; --id) {
    const auto& n = tape.node(id);
    if (grads[id].size() == 0 || n.op == OpKind::leaf) continue;
    MatrixX<S> g = grads[id];
    if (hook != nullptr && hook->kind == n.op) g *= static_cast<S>(hook->scale);
    const auto& in = n.in;
    const auto& val = [&](int k) -> const MatrixX<S>& { return tape.node(in[k]).value; };

    switch (n.op) {
      case OpKind::matmul:
        accum(in[0], g * val(1).transpose());
        accum(in[1], val(0).transpose() * g);
        break;
      case OpKind::add: {
        accum(in[0], g);
        const auto& b = val(1);
        if (b.rows() == g.rows() && b.cols() == g.cols()) {
          accum(in[1], g);
        } else {
          accum(in[1], g.colwise().sum());
        }
        break;
      }
      case OpKind::elementwise_mul: {
        const auto& a = val(0);
        const auto& b = val(1);
        if (a.rows() == b.rows() && a.cols() == b.cols()) {
          accum(in[0], (g.array() * b.array()).matrix());
          accum(in[1], (g.array() * a.array()).matrix());
        } else if (b.cols() == 1) {
          accum(in[0], (g.array().colwise() * b.col(0).array()).matrix());
          accum(in[1], (g.array() * a.array()).rowwise().sum().matrix());
        } else {
          accum(in[1], (g.array().colwise() * a.col(0).array()).matrix());
          accum(in[0], (g.array() * b.array()).rowwise().sum().matrix());
        }
        break;
      }
      case OpKind::relu: {
        MatrixX<S> mask = (val(0).array() > S(0)).template cast<S>().matrix();
        accum(in[0], (g.array() * mask.array()).matrix());
        break;
      }
      case OpKind::sigmoid: {
        const auto& y = n.value;
        accum(in[0], (g.array() * y.array() * (S(1) - y.array())).matrix());
        break;
      }
      case OpKind::softmax_lastdim: {
        const auto& y = n.value;
        MatrixX<S> dx(y.rows(), y.cols());
        for (Eigen::Index r = 0; r < y.rows(); ++r) {
          const S dot = (g.row(r).array() * y.row(r).array()).sum();
          dx.row(r) = (y.row(r).array() * (g.row(r).array() - dot)).matrix();
        }
        accum(in[0], dx);
        break;
      }
      case OpKind::layernorm_lastdim: {
        const auto& x = val(0);
        const auto& y = n.value;  // normalized output
        const S cols = static_cast<S>(x.cols());
        MatrixX<S> dx(x.rows(), x.cols());
        for (Eigen::Index r = 0; r < x.rows(); ++r) {
          auto xr = x.row(r).array();
          const S mu = xr.sum() / cols;
          const S var = (xr - mu).square().sum() / cols;
          const S inv = S(1) / std::sqrt(var + static_cast<S>(kLayerNormEps));
          const S gmean = g.row(r).sum() / cols;
          const S gymean = (g.row(r).array() * y.row(r).array()).sum() / cols;
          dx.row(r) = (inv * (g.row(r).array() - gmean - y.row(r).array() * gymean)).matrix();
        }
        accum(in[0], dx);
        break;
      }
      case OpKind::scalar_scale: {
        const S s0 = val(1)(0, 0);
        accum(in[0], (g * s0).eval());
        MatrixX<S> ds(1, 1);
        ds(0, 0) = (g.array() * val(0).array()).sum();
        accum(in[1], ds);
        break;
      }
      case OpKind::sum: {
        accum(in[0], MatrixX<S>::Constant(val(0).rows(), val(0).cols(), g(0, 0)));
        break;
      }
      case OpKind::concat_lastdim: {
        Eigen::Index at = 0;
        for (size_t k = 0; k < in.size(); ++k) {
          const Eigen::Index w = val(static_cast<int>(k)).cols();
          accum(in[k], g.block(0, at, g.rows(), w));
          at += w;
        }
        break;
      }
      case OpKind::gather_rows: {
        MatrixX<S> dt = MatrixX<S>::Zero(val(0).rows(), val(0).cols());
        for (size_t i = 0; i < n.gather.size(); ++i) {
          dt.row(n.gather[i]) += g.row(static_cast<Eigen::Index>(i));
        }
        accum(in[0], dt);
        break;
      }
      case OpKind::bce_mean: {
        const auto& p_raw = val(0);
        const auto& y = n.aux;
        const S lo = static_cast<S>(kBceClamp);
        const S hi = S(1) - static_cast<S>(kBceClamp);
        const S inv_b = S(1) / static_cast<S>(p_raw.rows());
        MatrixX<S> dp(p_raw.rows(), p_raw.cols());
        for (Eigen::Index r = 0; r < p_raw.rows(); ++r) {
          for (Eigen::Index c = 0; c < p_raw.cols(); ++c) {
            S p = p_raw(r, c);
            p = p < lo ? lo : (p > hi ? hi : p);
            dp(r, c) = g(0, 0) * inv_b * (p - y(r, c)) / (p * (S(1) - p));
          }
        }
        accum(in[0], dp);
        break;
      }
      case OpKind::leaf:
        break;
    }
  }

  GradientMap<S> out;
  out.set_tape_id(tape.id());
  for (int id = 0; id < static_cast<int>(tape.size()); ++id) {
    const auto& n = tape.node(id);
    if (n.op != OpKind::leaf) continue;
    Tensor<S> g;
    g.rank = n.rank;
    g.values = grads[id].size() == 0 ? MatrixX<S>::Zero(n.value.rows(), n.value.cols())
                                     : grads[id];
    out.set(id, std::move(g));
  }
  return out;
}

}  // namespace mdmt
