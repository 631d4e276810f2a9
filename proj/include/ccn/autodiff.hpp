#pragma once

// Reverse-mode differentiation over a tape of dense tensor ops.
//
// A Graph records nodes in construction order, which is a topological order
// (parents are always created before children). forward() evaluates every
// node from its parents; backward() sweeps the tape in reverse from a scalar
// root. Leaves are named inputs, constants, whole parameters and single rows
// gathered from a parameter table.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ccn/error.hpp"
#include "ccn/tensor.hpp"

namespace ccn {

/// A named learnable array owned by a model.
struct Parameter {
  std::string name;
  Tensor value;
};

using NodeId = std::size_t;
using Bindings = std::map<std::string, Tensor, std::less<>>;

enum class Op : std::uint8_t {
  kInput,
  kConstant,
  kParam,
  kGather,
  kAdd,
  kSub,
  kMul,
  kMatMul,
  kExp,
  kLog,
  kSigmoid,
  kSoftplus,
  kRelu,
  kCosDiff,
  kSoftmax,
  kAffine,
  kConcat,
  kStack,
  kSlice,
  kSum,
  kAddBias,
  kAttention,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::kInput: return "input";
    case Op::kConstant: return "constant";
    case Op::kParam: return "param";
    case Op::kGather: return "gather";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kMatMul: return "matmul";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kSigmoid: return "sigmoid";
    case Op::kSoftplus: return "softplus";
    case Op::kRelu: return "relu";
    case Op::kCosDiff: return "cos_diff";
    case Op::kSoftmax: return "softmax";
    case Op::kAffine: return "affine";
    case Op::kConcat: return "concat";
    case Op::kStack: return "stack";
    case Op::kSlice: return "slice";
    case Op::kSum: return "sum";
    case Op::kAddBias: return "add_bias";
    case Op::kAttention: return "attention";
  }
  return "?";
}

struct Node {
  Op op = Op::kConstant;
  std::vector<NodeId> parents;
  Tensor value;

  // Op attributes; which ones are meaningful depends on `op`.
  std::string name;             // input binding name, or a debug label
  const Parameter* param = nullptr;  // kParam, kGather
  std::size_t row = 0;          // kGather row; kSlice first row
  std::size_t col = 0;          // kSlice first col
  std::size_t nrows = 0;        // kSlice extent
  std::size_t ncols = 0;
  double scale = 1.0;           // kAffine
  double shift = 0.0;
  bool trans_a = false;         // kMatMul
  bool trans_b = false;
  std::size_t heads = 1;        // kAttention
};

namespace detail {

/// Projected query, keys, values and per-head softmax weights
/// (weights[h * n + j]) of one attention evaluation.
struct AttentionState {
  Tensor q;
  Tensor k;
  Tensor v;
  std::vector<double> weights;
};

inline AttentionState attention_state(const Tensor& x, const Tensor& seq, const Tensor& wq,
                                      const Tensor& wk, const Tensor& wv, std::size_t heads) {
  const std::size_t rows = seq.rows;
  const std::size_t d = wq.cols;
  const std::size_t dh = d / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  AttentionState st{Tensor(d, 1), Tensor(rows, d), Tensor(rows, d),
                    std::vector<double>(heads * rows)};
  gemm_acc(wq, true, x, false, st.q);
  gemm_acc(seq, false, wk, false, st.k);
  gemm_acc(seq, false, wv, false, st.v);
  for (std::size_t h = 0; h < heads; ++h) {
    double* w = st.weights.data() + h * rows;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < rows; ++j) {
      double s = 0.0;
      for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) s += st.k[j * d + c] * st.q[c];
      w[j] = s * inv;
      mx = std::max(mx, w[j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < rows; ++j) {
      w[j] = std::exp(w[j] - mx);
      z += w[j];
    }
    for (std::size_t j = 0; j < rows; ++j) w[j] /= z;
  }
  return st;
}

}  // namespace detail

/// Gradients of every node. Nodes the root does not depend on hold no
/// buffer and read back as zeros.
class GradStore {
 public:
  GradStore(std::vector<Tensor> grads, std::vector<std::pair<std::size_t, std::size_t>> shapes)
      : grads_(std::move(grads)), shapes_(std::move(shapes)) {}

  Tensor of(NodeId id) const {
    const Tensor* t = find(id);
    if (t != nullptr) return *t;
    const auto [r, c] = shapes_.at(id);
    return Tensor(r, c);
  }

  /// The gradient buffer, or nullptr when the node received no gradient.
  const Tensor* find(NodeId id) const {
    const Tensor& t = grads_.at(id);
    return t.data.empty() ? nullptr : &t;
  }

  std::size_t size() const { return grads_.size(); }

 private:
  std::vector<Tensor> grads_;
  std::vector<std::pair<std::size_t, std::size_t>> shapes_;
};

class Graph {
 public:
  // ---- leaves -----------------------------------------------------------

  NodeId input(std::string name) {
    Node n;
    n.op = Op::kInput;
    n.name = std::move(name);
    return push(std::move(n));
  }

  NodeId constant(Tensor v) {
    Node n;
    n.op = Op::kConstant;
    n.value = std::move(v);
    return push(std::move(n));
  }

  NodeId scalar(double v) { return constant(Tensor::scalar(v)); }

  /// Shared all-zero constant of the given shape.
  NodeId zeros(std::size_t rows, std::size_t cols) {
    auto key = std::make_pair(rows, cols);
    if (auto it = zeros_.find(key); it != zeros_.end()) return it->second;
    NodeId id = constant(Tensor(rows, cols));
    zeros_.emplace(key, id);
    return id;
  }

  /// The whole parameter as a leaf. Repeated calls return the same node.
  NodeId param(const Parameter& p) {
    if (auto it = params_.find(&p); it != params_.end()) return it->second;
    Node n;
    n.op = Op::kParam;
    n.param = &p;
    NodeId id = push(std::move(n));
    params_.emplace(&p, id);
    return id;
  }

  /// Row `row` of a parameter table, as a column vector. Memoized per row.
  NodeId gather(const Parameter& table, std::size_t row) {
    auto key = std::make_pair(&table, row);
    if (auto it = gathers_.find(key); it != gathers_.end()) return it->second;
    Node n;
    n.op = Op::kGather;
    n.param = &table;
    n.row = row;
    NodeId id = push(std::move(n));
    gathers_.emplace(key, id);
    return id;
  }

  // ---- ops --------------------------------------------------------------

  NodeId add(NodeId a, NodeId b) { return binary(Op::kAdd, a, b); }
  NodeId sub(NodeId a, NodeId b) { return binary(Op::kSub, a, b); }
  /// Elementwise product; either side may be a 1x1 scalar that broadcasts.
  NodeId mul(NodeId a, NodeId b) { return binary(Op::kMul, a, b); }
  NodeId cos_diff(NodeId a, NodeId b) { return binary(Op::kCosDiff, a, b); }
  /// Multi-head target attention as one tape op. `query` is din x 1,
  /// `sequence` n x din, the projections din x d with head i owning columns
  /// [i*d/h, (i+1)*d/h). Per head: softmax over rows j of
  /// (W_Q^T query)_h . (S W_K)_{j,h} / sqrt(d/h), then the weighted sum of
  /// (S W_V)_{j,h}. Result d x 1.
  NodeId attention(NodeId query, NodeId sequence, NodeId wq, NodeId wk, NodeId wv,
                   std::size_t heads) {
    Node n;
    n.op = Op::kAttention;
    n.parents = {query, sequence, wq, wk, wv};
    n.heads = heads;
    return push(std::move(n));
  }

  /// Adds the c x 1 column `bias` to every row of the r x c matrix `a`.
  NodeId add_bias(NodeId a, NodeId bias) { return binary(Op::kAddBias, a, bias); }

  NodeId matmul(NodeId a, NodeId b, bool trans_a = false, bool trans_b = false) {
    Node n;
    n.op = Op::kMatMul;
    n.parents = {a, b};
    n.trans_a = trans_a;
    n.trans_b = trans_b;
    return push(std::move(n));
  }

  NodeId exp(NodeId a) { return unary(Op::kExp, a); }
  NodeId log(NodeId a) { return unary(Op::kLog, a); }
  NodeId sigmoid(NodeId a) { return unary(Op::kSigmoid, a); }
  NodeId softplus(NodeId a) { return unary(Op::kSoftplus, a); }
  NodeId relu(NodeId a) { return unary(Op::kRelu, a); }
  /// Softmax over all entries of a column vector.
  NodeId softmax(NodeId a) { return unary(Op::kSoftmax, a); }
  NodeId sum(NodeId a) { return unary(Op::kSum, a); }

  /// scale * a + shift, elementwise.
  NodeId affine(NodeId a, double scale, double shift = 0.0) {
    Node n;
    n.op = Op::kAffine;
    n.parents = {a};
    n.scale = scale;
    n.shift = shift;
    return push(std::move(n));
  }
  NodeId scale(NodeId a, double s) { return affine(a, s, 0.0); }

  /// log(sigmoid(a)), computed as -softplus(-a).
  NodeId log_sigmoid(NodeId a) { return scale(softplus(scale(a, -1.0)), -1.0); }

  /// Vertical concatenation; all parts must share a column count.
  NodeId concat(std::vector<NodeId> parts) {
    if (parts.size() == 1) return parts.front();
    Node n;
    n.op = Op::kConcat;
    n.parents = std::move(parts);
    return push(std::move(n));
  }

  /// Stacks k column vectors of length n into a k x n matrix (one per row).
  NodeId stack(std::vector<NodeId> rows) {
    Node n;
    n.op = Op::kStack;
    n.parents = std::move(rows);
    return push(std::move(n));
  }

  NodeId slice(NodeId a, std::size_t row, std::size_t nrows, std::size_t col,
               std::size_t ncols) {
    Node n;
    n.op = Op::kSlice;
    n.parents = {a};
    n.row = row;
    n.nrows = nrows;
    n.col = col;
    n.ncols = ncols;
    return push(std::move(n));
  }

  /// Rows [row, row + nrows) of a column vector.
  NodeId slice_rows(NodeId a, std::size_t row, std::size_t nrows) {
    return slice(a, row, nrows, 0, 1);
  }

  /// Attaches a label used in error messages.
  NodeId label(NodeId id, std::string text) {
    if (nodes_[id].op != Op::kInput) nodes_[id].name = std::move(text);
    return id;
  }

  // ---- evaluation -------------------------------------------------------

  std::size_t size() const { return nodes_.size(); }
  void reserve(std::size_t nodes) { nodes_.reserve(nodes); }
  const Node& node(NodeId id) const { return nodes_.at(id); }
  bool evaluated() const { return evaluated_; }

  const Tensor& value(NodeId id) const {
    if (!evaluated_) throw GraphError("value() before forward()");
    return nodes_.at(id).value;
  }

  /// Evaluates every node in tape order and returns the value of `root`.
  const Tensor& forward(NodeId root, const Bindings& inputs = {}) {
    if (root >= nodes_.size()) throw GraphError("root node out of range");
    evaluated_ = false;
    for (NodeId i = 0; i < nodes_.size(); ++i) eval_node(i, inputs);
    evaluated_ = true;
    return nodes_[root].value;
  }

  /// Evaluates the tape up to and including the last node.
  const Tensor& forward(const Bindings& inputs = {}) {
    if (nodes_.empty()) throw GraphError("forward() on empty graph");
    return forward(nodes_.size() - 1, inputs);
  }

  /// d(root)/d(node) for every node. Root must be a scalar.
  GradStore backward(NodeId root) const {
    if (!evaluated_) throw GraphError("backward() before forward()");
    if (root >= nodes_.size()) throw GraphError("root node out of range");
    const Tensor& rv = nodes_[root].value;
    if (rv.rows != 1 || rv.cols != 1) {
      throw GraphError("backward() from non-scalar root " + describe(root) + " " +
                       rv.shape_str());
    }
    std::vector<Tensor> g(nodes_.size());
    g[root] = Tensor(1, 1);
    g[root].data[0] = 1.0;
    for (NodeId i = root + 1; i-- > 0;) {
      if (!g[i].data.empty()) backprop_node(i, g);
    }
    std::vector<std::pair<std::size_t, std::size_t>> shapes;
    shapes.reserve(nodes_.size());
    for (const Node& n : nodes_) shapes.emplace_back(n.value.rows, n.value.cols);
    return GradStore(std::move(g), std::move(shapes));
  }

  /// Sign pattern of every relu input; two probes with equal signatures sit
  /// on the same smooth piece of the function.
  std::vector<bool> relu_signature() const {
    std::vector<bool> sig;
    for (const Node& n : nodes_) {
      if (n.op != Op::kRelu) continue;
      for (double v : nodes_[n.parents[0]].value.data) sig.push_back(v > 0.0);
    }
    return sig;
  }

  std::string describe(NodeId id) const {
    const Node& n = nodes_[id];
    std::string s = "node #" + std::to_string(id) + " (" + op_name(n.op);
    if (!n.name.empty()) s += " '" + n.name + "'";
    return s + ")";
  }

 private:
  NodeId push(Node n) {
    for (NodeId p : n.parents) {
      if (p >= nodes_.size()) throw GraphError("parent node does not exist");
    }
    nodes_.push_back(std::move(n));
    evaluated_ = false;
    return nodes_.size() - 1;
  }

  NodeId unary(Op op, NodeId a) {
    Node n;
    n.op = op;
    n.parents = {a};
    return push(std::move(n));
  }

  NodeId binary(Op op, NodeId a, NodeId b) {
    Node n;
    n.op = op;
    n.parents = {a, b};
    return push(std::move(n));
  }

  [[noreturn]] void shape_fail(NodeId id, const std::string& what) const {
    throw ShapeError("shape mismatch at " + describe(id) + ": " + what);
  }

  void eval_node(NodeId id, const Bindings& inputs) {
    Node& n = nodes_[id];
    auto in = [&](std::size_t k) -> const Tensor& { return nodes_[n.parents[k]].value; };
    Tensor& out = n.value;
    switch (n.op) {
      case Op::kInput: {
        auto it = inputs.find(n.name);
        if (it == inputs.end()) throw GraphError("unbound input '" + n.name + "'");
        out = it->second;
        return;
      }
      case Op::kConstant:
        return;
      case Op::kParam:
        out = n.param->value;
        return;
      case Op::kGather: {
        const Tensor& t = n.param->value;
        if (n.row >= t.rows) shape_fail(id, "row " + std::to_string(n.row) + " out of range");
        out = Tensor(t.cols, 1);
        std::copy_n(t.data.data() + n.row * t.cols, t.cols, out.data.data());
        return;
      }
      case Op::kAdd:
      case Op::kSub:
      case Op::kCosDiff: {
        const Tensor& a = in(0);
        const Tensor& b = in(1);
        if (!a.same_shape(b)) shape_fail(id, a.shape_str() + " vs " + b.shape_str());
        out = Tensor(a.rows, a.cols);
        for (std::size_t i = 0; i < a.size(); ++i) {
          out[i] = n.op == Op::kAdd   ? a[i] + b[i]
                   : n.op == Op::kSub ? a[i] - b[i]
                                      : std::cos(a[i] - b[i]);
        }
        return;
      }
      case Op::kAttention: {
        const Tensor& x = in(0);
        const Tensor& seq = in(1);
        const Tensor& wq = in(2);
        if (x.cols != 1 || seq.cols != x.rows || wq.rows != x.rows || !wq.same_shape(in(3)) ||
            !wq.same_shape(in(4)) || seq.rows == 0 || n.heads == 0 || wq.cols % n.heads != 0) {
          shape_fail(id, "query " + x.shape_str() + ", sequence " + seq.shape_str() +
                             ", projections " + wq.shape_str() + ", heads " +
                             std::to_string(n.heads));
        }
        const detail::AttentionState st = detail::attention_state(x, seq, wq, in(3), in(4), n.heads);
        out = Tensor(wq.cols, 1);
        const std::size_t d = wq.cols;
        const std::size_t dh = d / n.heads;
        for (std::size_t h = 0; h < n.heads; ++h) {
          for (std::size_t j = 0; j < seq.rows; ++j) {
            const double a = st.weights[h * seq.rows + j];
            for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) out[c] += a * st.v[j * d + c];
          }
        }
        return;
      }
      case Op::kAddBias: {
        const Tensor& a = in(0);
        const Tensor& b = in(1);
        if (b.rows != a.cols || b.cols != 1) {
          shape_fail(id, a.shape_str() + " + bias " + b.shape_str());
        }
        out = a;
        for (std::size_t r = 0; r < a.rows; ++r) {
          for (std::size_t c = 0; c < a.cols; ++c) out[r * a.cols + c] += b[c];
        }
        return;
      }
      case Op::kMul: {
        const Tensor& a = in(0);
        const Tensor& b = in(1);
        if (a.same_shape(b)) {
          out = Tensor(a.rows, a.cols);
          for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
        } else if (a.size() == 1) {
          out = Tensor(b.rows, b.cols);
          for (std::size_t i = 0; i < b.size(); ++i) out[i] = a[0] * b[i];
        } else if (b.size() == 1) {
          out = Tensor(a.rows, a.cols);
          for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[0];
        } else {
          shape_fail(id, a.shape_str() + " vs " + b.shape_str());
        }
        return;
      }
      case Op::kMatMul: {
        const Tensor& a = in(0);
        const Tensor& b = in(1);
        const std::size_t m = n.trans_a ? a.cols : a.rows;
        const std::size_t k = n.trans_a ? a.rows : a.cols;
        const std::size_t kb = n.trans_b ? b.cols : b.rows;
        const std::size_t c = n.trans_b ? b.rows : b.cols;
        if (k != kb) shape_fail(id, a.shape_str() + " x " + b.shape_str());
        out = Tensor(m, c);
        gemm_acc(a, n.trans_a, b, n.trans_b, out);
        return;
      }
      case Op::kExp:
      case Op::kLog:
      case Op::kSigmoid:
      case Op::kSoftplus:
      case Op::kRelu:
      case Op::kAffine: {
        const Tensor& a = in(0);
        out = Tensor(a.rows, a.cols);
        for (std::size_t i = 0; i < a.size(); ++i) out[i] = unary_value(n, a[i]);
        return;
      }
      case Op::kSoftmax: {
        const Tensor& a = in(0);
        if (a.cols != 1 || a.rows == 0) shape_fail(id, "softmax expects a nonempty column, got " + a.shape_str());
        out = Tensor(a.rows, 1);
        const double mx = *std::max_element(a.data.begin(), a.data.end());
        double z = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) {
          out[i] = std::exp(a[i] - mx);
          z += out[i];
        }
        for (double& v : out.data) v /= z;
        return;
      }
      case Op::kConcat: {
        std::size_t rows = 0;
        const std::size_t cols = in(0).cols;
        for (std::size_t k = 0; k < n.parents.size(); ++k) {
          if (in(k).cols != cols) shape_fail(id, "concat column mismatch");
          rows += in(k).rows;
        }
        out = Tensor(rows, cols);
        auto dst = out.data.begin();
        for (std::size_t k = 0; k < n.parents.size(); ++k) {
          dst = std::copy(in(k).data.begin(), in(k).data.end(), dst);
        }
        return;
      }
      case Op::kStack: {
        if (n.parents.empty()) shape_fail(id, "stack of zero rows");
        const std::size_t width = in(0).size();
        out = Tensor(n.parents.size(), width);
        for (std::size_t k = 0; k < n.parents.size(); ++k) {
          const Tensor& r = in(k);
          if (r.cols != 1 || r.rows != width) shape_fail(id, "stack row " + std::to_string(k) + " is " + r.shape_str());
          std::copy(r.data.begin(), r.data.end(), out.data.begin() + k * width);
        }
        return;
      }
      case Op::kSlice: {
        const Tensor& a = in(0);
        if (n.row + n.nrows > a.rows || n.col + n.ncols > a.cols) {
          shape_fail(id, "slice out of range of " + a.shape_str());
        }
        out = Tensor(n.nrows, n.ncols);
        for (std::size_t r = 0; r < n.nrows; ++r) {
          for (std::size_t c = 0; c < n.ncols; ++c) out(r, c) = a(n.row + r, n.col + c);
        }
        return;
      }
      case Op::kSum: {
        double s = 0.0;
        for (double v : in(0).data) s += v;
        out = Tensor::scalar(s);
        return;
      }
    }
  }

  static double unary_value(const Node& n, double x) {
    switch (n.op) {
      case Op::kExp: return std::exp(x);
      case Op::kLog: return std::log(x);
      case Op::kSigmoid: return sigmoid_value(x);
      case Op::kSoftplus: return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
      case Op::kRelu: return x > 0.0 ? x : 0.0;
      case Op::kAffine: return n.scale * x + n.shift;
      default: return x;
    }
  }

 public:
  static double sigmoid_value(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  }

 private:
  void backprop_node(NodeId id, std::vector<Tensor>& g) const {
    const Node& n = nodes_[id];
    const Tensor& go = g[id];
    auto in = [&](std::size_t k) -> const Tensor& { return nodes_[n.parents[k]].value; };
    auto gin = [&](std::size_t k) -> Tensor& {
      Tensor& t = g[n.parents[k]];
      if (t.data.empty()) {
        const Tensor& v = nodes_[n.parents[k]].value;
        t = Tensor(v.rows, v.cols);
      }
      return t;
    };
    switch (n.op) {
      case Op::kInput:
      case Op::kConstant:
      case Op::kParam:
      case Op::kGather:
        return;
      case Op::kAdd:
        for (std::size_t i = 0; i < go.size(); ++i) gin(0)[i] += go[i];
        for (std::size_t i = 0; i < go.size(); ++i) gin(1)[i] += go[i];
        return;
      case Op::kSub:
        for (std::size_t i = 0; i < go.size(); ++i) gin(0)[i] += go[i];
        for (std::size_t i = 0; i < go.size(); ++i) gin(1)[i] -= go[i];
        return;
      case Op::kAttention: {
        const Tensor& x = in(0);
        const Tensor& seq = in(1);
        const Tensor& wq = in(2);
        const Tensor& wk = in(3);
        const Tensor& wv = in(4);
        const detail::AttentionState st = detail::attention_state(x, seq, wq, wk, wv, n.heads);
        const std::size_t rows = seq.rows;
        const std::size_t d = wq.cols;
        const std::size_t dh = d / n.heads;
        const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
        Tensor dq(d, 1);
        Tensor dk(rows, d);
        Tensor dv(rows, d);
        std::vector<double> da(rows);
        for (std::size_t h = 0; h < n.heads; ++h) {
          const double* a = st.weights.data() + h * rows;
          double dot = 0.0;
          for (std::size_t j = 0; j < rows; ++j) {
            double s = 0.0;
            for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) {
              s += st.v[j * d + c] * go[c];
              dv[j * d + c] += a[j] * go[c];
            }
            da[j] = s;
            dot += a[j] * s;
          }
          for (std::size_t j = 0; j < rows; ++j) {
            const double dl = a[j] * (da[j] - dot) * inv;
            for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) {
              dq[c] += dl * st.k[j * d + c];
              dk[j * d + c] += dl * st.q[c];
            }
          }
        }
        gemm_acc(wq, false, dq, false, gin(0));   // dx = W_Q dq
        gemm_acc(x, false, dq, true, gin(2));     // dW_Q = x dq^T
        gemm_acc(dk, false, wk, true, gin(1));    // dS = dK W_K^T + dV W_V^T
        gemm_acc(dv, false, wv, true, gin(1));
        gemm_acc(seq, true, dk, false, gin(3));   // dW_K = S^T dK
        gemm_acc(seq, true, dv, false, gin(4));   // dW_V = S^T dV
        return;
      }
      case Op::kAddBias: {
        Tensor& gb = gin(1);
        for (std::size_t i = 0; i < go.size(); ++i) gin(0)[i] += go[i];
        for (std::size_t r = 0; r < go.rows; ++r) {
          for (std::size_t c = 0; c < go.cols; ++c) gb[c] += go[r * go.cols + c];
        }
        return;
      }
      case Op::kCosDiff: {
        const Tensor& a = in(0);
        const Tensor& b = in(1);
        for (std::size_t i = 0; i < go.size(); ++i) {
          const double d = -std::sin(a[i] - b[i]) * go[i];
          gin(0)[i] += d;
          gin(1)[i] -= d;
        }
        return;
      }
      case Op::kMul: {
        const Tensor& a = in(0);
        const Tensor& b = in(1);
        if (a.same_shape(b)) {
          for (std::size_t i = 0; i < go.size(); ++i) {
            gin(0)[i] += go[i] * b[i];
            gin(1)[i] += go[i] * a[i];
          }
        } else if (a.size() == 1) {
          double s = 0.0;
          for (std::size_t i = 0; i < go.size(); ++i) {
            s += go[i] * b[i];
            gin(1)[i] += go[i] * a[0];
          }
          gin(0)[0] += s;
        } else {
          double s = 0.0;
          for (std::size_t i = 0; i < go.size(); ++i) {
            s += go[i] * a[i];
            gin(0)[i] += go[i] * b[0];
          }
          gin(1)[0] += s;
        }
        return;
      }
      case Op::kMatMul: {
        const Tensor& a = in(0);
        const Tensor& b = in(1);
        // C = A' B' with A' = op(A), B' = op(B).
        if (!n.trans_a) {
          gemm_acc(go, false, b, !n.trans_b, gin(0));
        } else {
          gemm_acc(b, n.trans_b, go, true, gin(0));
        }
        if (!n.trans_b) {
          gemm_acc(a, !n.trans_a, go, false, gin(1));
        } else {
          gemm_acc(go, true, a, n.trans_a, gin(1));
        }
        return;
      }
      case Op::kExp:
        for (std::size_t i = 0; i < go.size(); ++i) gin(0)[i] += go[i] * n.value[i];
        return;
      case Op::kLog:
        for (std::size_t i = 0; i < go.size(); ++i) gin(0)[i] += go[i] / in(0)[i];
        return;
      case Op::kSigmoid:
        for (std::size_t i = 0; i < go.size(); ++i) {
          const double y = n.value[i];
          gin(0)[i] += go[i] * y * (1.0 - y);
        }
        return;
      case Op::kSoftplus:
        for (std::size_t i = 0; i < go.size(); ++i) gin(0)[i] += go[i] * sigmoid_value(in(0)[i]);
        return;
      case Op::kRelu:
        for (std::size_t i = 0; i < go.size(); ++i) {
          if (in(0)[i] > 0.0) gin(0)[i] += go[i];
        }
        return;
      case Op::kAffine:
        for (std::size_t i = 0; i < go.size(); ++i) gin(0)[i] += go[i] * n.scale;
        return;
      case Op::kSoftmax: {
        double dot = 0.0;
        for (std::size_t i = 0; i < go.size(); ++i) dot += go[i] * n.value[i];
        for (std::size_t i = 0; i < go.size(); ++i) gin(0)[i] += n.value[i] * (go[i] - dot);
        return;
      }
      case Op::kConcat: {
        std::size_t off = 0;
        for (std::size_t k = 0; k < n.parents.size(); ++k) {
          Tensor& gk = gin(k);
          for (std::size_t i = 0; i < gk.size(); ++i) gk[i] += go[off + i];
          off += gk.size();
        }
        return;
      }
      case Op::kStack: {
        const std::size_t width = go.cols;
        for (std::size_t k = 0; k < n.parents.size(); ++k) {
          Tensor& gk = gin(k);
          for (std::size_t i = 0; i < width; ++i) gk[i] += go[k * width + i];
        }
        return;
      }
      case Op::kSlice: {
        Tensor& ga = gin(0);
        for (std::size_t r = 0; r < n.nrows; ++r) {
          for (std::size_t c = 0; c < n.ncols; ++c) ga(n.row + r, n.col + c) += go(r, c);
        }
        return;
      }
      case Op::kSum:
        for (double& v : gin(0).data) v += go[0];
        return;
    }
  }

  struct PairHash {
    template <class A, class B>
    std::size_t operator()(const std::pair<A, B>& p) const {
      return std::hash<A>{}(p.first) * 1000003u ^ std::hash<B>{}(p.second);
    }
  };

  std::vector<Node> nodes_;
  bool evaluated_ = false;
  std::unordered_map<const Parameter*, NodeId> params_;
  std::unordered_map<std::pair<const Parameter*, std::size_t>, NodeId, PairHash> gathers_;
  std::unordered_map<std::pair<std::size_t, std::size_t>, NodeId, PairHash> zeros_;
};

/// Gradient of one parameter: either a dense array or a set of touched rows.
struct ParamGrad {
  const Parameter* param = nullptr;
  bool dense = false;
  Tensor full;                                   // when dense
  std::map<std::size_t, std::vector<double>> rows;  // when sparse
};

/// Parameter gradients, in first-use order.
class ParamGrads {
 public:
  ParamGrad& slot(const Parameter* p) {
    auto [it, inserted] = index_.emplace(p, grads_.size());
    if (inserted) {
      grads_.emplace_back();
      grads_.back().param = p;
    }
    return grads_[it->second];
  }

  const ParamGrad* find(const Parameter* p) const {
    auto it = index_.find(p);
    return it == index_.end() ? nullptr : &grads_[it->second];
  }

  std::vector<ParamGrad>& all() { return grads_; }
  const std::vector<ParamGrad>& all() const { return grads_; }

  /// Gradient entry (r, c) of `p`, zero when untouched.
  double at(const Parameter* p, std::size_t r, std::size_t c) const {
    const ParamGrad* pg = find(p);
    if (pg == nullptr) return 0.0;
    if (pg->dense) return pg->full(r, c);
    auto it = pg->rows.find(r);
    return it == pg->rows.end() ? 0.0 : it->second[c];
  }

 private:
  std::unordered_map<const Parameter*, std::size_t> index_;
  std::vector<ParamGrad> grads_;
};

/// Folds leaf gradients into per-parameter buffers. A parameter that is used
/// whole anywhere in the graph gets a dense buffer; otherwise only the rows
/// gathered by the graph appear.
inline ParamGrads collect_param_grads(const Graph& graph, const GradStore& grads) {
  ParamGrads out;
  for (NodeId i = 0; i < graph.size(); ++i) {
    const Node& n = graph.node(i);
    if (n.op != Op::kParam && n.op != Op::kGather) continue;
    ParamGrad& pg = out.slot(n.param);
    if (n.op == Op::kParam && !pg.dense) {
      pg.dense = true;
      pg.full = Tensor(n.param->value.rows, n.param->value.cols);
      for (auto& [r, v] : pg.rows) {
        std::copy(v.begin(), v.end(), pg.full.data.begin() + r * pg.full.cols);
      }
      pg.rows.clear();
    }
  }
  for (NodeId i = 0; i < graph.size(); ++i) {
    const Node& n = graph.node(i);
    const Tensor* gp = grads.find(i);
    if (gp == nullptr) continue;
    const Tensor& g = *gp;
    if (n.op == Op::kParam) {
      ParamGrad& pg = out.slot(n.param);
      for (std::size_t k = 0; k < g.size(); ++k) pg.full[k] += g[k];
    } else if (n.op == Op::kGather) {
      ParamGrad& pg = out.slot(n.param);
      if (pg.dense) {
        double* dst = pg.full.data.data() + n.row * pg.full.cols;
        for (std::size_t k = 0; k < g.size(); ++k) dst[k] += g[k];
      } else {
        auto& dst = pg.rows[n.row];
        if (dst.empty()) dst.assign(g.size(), 0.0);
        for (std::size_t k = 0; k < g.size(); ++k) dst[k] += g[k];
      }
    }
  }
  return out;
}

}  // namespace ccn
