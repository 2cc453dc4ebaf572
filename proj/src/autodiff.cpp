#include "kgmod/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace kgmod::autodiff {

namespace {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

constexpr double kLayerNormEps = 1e-5;
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

}  // namespace

Tensor::Tensor(std::vector<std::size_t> s, std::vector<double> d, bool rg)
    : shape(std::move(s)), data(std::move(d)), requires_grad(rg) {
  if (shape_product(shape) != data.size()) {
    throw ShapeError("tensor shape " + shape_str() + " does not match data size " +
                     std::to_string(data.size()));
  }
  for (std::size_t dim : shape) {
    if (dim == 0) throw ShapeError("tensor extents must be positive");
  }
}

Tensor Tensor::zeros(std::vector<std::size_t> shape, bool requires_grad) {
  std::vector<double> d(shape_product(shape), 0.0);
  return Tensor(std::move(shape), std::move(d), requires_grad);
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return Tensor({1}, {v}, requires_grad);
}

Tensor Tensor::vec(std::vector<double> v, bool requires_grad) {
  const std::size_t n = v.size();
  return Tensor({n}, std::move(v), requires_grad);
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> v,
                      bool requires_grad) {
  return Tensor({rows, cols}, std::move(v), requires_grad);
}

std::size_t Tensor::rows() const {
  if (rank() == 2) return shape[0];
  if (rank() == 1) return 1;
  throw ShapeError("rows() needs rank 1 or 2, got " + shape_str());
}

std::size_t Tensor::cols() const {
  if (rank() == 2) return shape[1];
  if (rank() == 1) return shape[0];
  throw ShapeError("cols() needs rank 1 or 2, got " + shape_str());
}

double& Tensor::at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
double Tensor::at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

bool Tensor::all_finite() const {
  return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
}

void Tensor::fill(double v) { std::fill(data.begin(), data.end(), v); }

std::string Tensor::shape_str() const {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  s += ")";
  return s;
}

const char* op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::matmul: return "matmul";
    case Op::add: return "add";
    case Op::mul: return "mul";
    case Op::relu: return "relu";
    case Op::gelu: return "gelu";
    case Op::embedding_lookup: return "embedding_lookup";
    case Op::layer_norm: return "layer_norm";
    case Op::softmax: return "softmax";
    case Op::cross_entropy_with_logits: return "cross_entropy_with_logits";
    case Op::mse: return "mse";
    case Op::l2_norm: return "l2_norm";
    case Op::concat_rows: return "concat_rows";
    case Op::slice_rows: return "slice_rows";
    case Op::scale: return "scale";
  }
  return "?";
}

double log_sum_exp(std::span<const double> row) {
  double mx = row[0];
  for (double v : row) mx = std::max(mx, v);
  double s = 0.0;
  for (double v : row) s += std::exp(v - mx);
  return mx + std::log(s);
}

void softmax_row(std::span<const double> in, std::span<double> out) {
  double mx = in[0];
  for (double v : in) mx = std::max(mx, v);
  double s = 0.0;
  for (std::size_t i = 0; i < in.size(); ++i) {
    out[i] = std::exp(in[i] - mx);
    s += out[i];
  }
  for (std::size_t i = 0; i < in.size(); ++i) out[i] /= s;
}

double gelu_scalar(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

NodeId Graph::push(Node n) {
  check_finite(n);
  nodes_.push_back(std::move(n));
  has_grads_ = false;
  return nodes_.size() - 1;
}

const Graph::Node& Graph::node(NodeId id) const {
  if (id >= nodes_.size()) throw ShapeError("node id out of range");
  return nodes_[id];
}

void Graph::check_finite(const Node& n) const {
  if (!n.value.all_finite()) {
    throw NumericError(std::string("non-finite output of ") + op_name(n.op));
  }
}

NodeId Graph::leaf(Tensor t) {
  Node n;
  n.op = Op::leaf;
  n.requires_grad = t.requires_grad;
  n.value = std::move(t);
  return push(std::move(n));
}

NodeId Graph::matmul(NodeId a, NodeId b, bool trans_a, bool trans_b) {
  const Tensor& A = node(a).value;
  const Tensor& B = node(b).value;
  if (A.rank() != 2 || B.rank() != 2) {
    throw ShapeError("matmul needs rank-2 operands, got " + A.shape_str() + " and " +
                     B.shape_str());
  }
  const std::size_t m = trans_a ? A.shape[1] : A.shape[0];
  const std::size_t k = trans_a ? A.shape[0] : A.shape[1];
  const std::size_t kb = trans_b ? B.shape[1] : B.shape[0];
  const std::size_t p = trans_b ? B.shape[0] : B.shape[1];
  if (k != kb) {
    throw ShapeError(std::string("matmul inner extents differ: ") + A.shape_str() +
                     (trans_a ? "^T" : "") + " * " + B.shape_str() + (trans_b ? "^T" : ""));
  }
  Node n;
  n.op = Op::matmul;
  n.inputs = {a, b};
  n.trans_a = trans_a;
  n.trans_b = trans_b;
  n.requires_grad = node(a).requires_grad || node(b).requires_grad;
  n.value = Tensor::zeros({m, p});
  auto ai = [&](std::size_t i, std::size_t kk) {
    return trans_a ? A.data[kk * A.shape[1] + i] : A.data[i * A.shape[1] + kk];
  };
  auto bi = [&](std::size_t kk, std::size_t j) {
    return trans_b ? B.data[j * B.shape[1] + kk] : B.data[kk * B.shape[1] + j];
  };
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = ai(i, kk);
      if (av == 0.0) continue;
      for (std::size_t j = 0; j < p; ++j) {
        n.value.data[i * p + j] += av * bi(kk, j);
      }
    }
  }
  return push(std::move(n));
}

namespace {
// add/mul shape rule: identical shapes, or rank-2 lhs with rank-1 rhs
// broadcast across rows.
enum class EwMode { same, row_broadcast };
}  // namespace

static EwMode elementwise_mode(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape == b.shape) return EwMode::same;
  if (a.rank() == 2 && b.rank() == 1 && a.shape[1] == b.shape[0]) {
    return EwMode::row_broadcast;
  }
  throw ShapeError(std::string(what) + " shapes do not conform: " + a.shape_str() +
                   " vs " + b.shape_str());
}

NodeId Graph::add(NodeId a, NodeId b) {
  const Tensor& A = node(a).value;
  const Tensor& B = node(b).value;
  const EwMode mode = elementwise_mode(A, B, "add");
  Node n;
  n.op = Op::add;
  n.inputs = {a, b};
  n.requires_grad = node(a).requires_grad || node(b).requires_grad;
  n.value = A;
  n.value.requires_grad = false;
  if (mode == EwMode::same) {
    for (std::size_t i = 0; i < A.size(); ++i) n.value.data[i] += B.data[i];
  } else {
    const std::size_t cols = A.shape[1];
    for (std::size_t i = 0; i < A.size(); ++i) n.value.data[i] += B.data[i % cols];
  }
  return push(std::move(n));
}

NodeId Graph::mul(NodeId a, NodeId b) {
  const Tensor& A = node(a).value;
  const Tensor& B = node(b).value;
  const EwMode mode = elementwise_mode(A, B, "mul");
  Node n;
  n.op = Op::mul;
  n.inputs = {a, b};
  n.requires_grad = node(a).requires_grad || node(b).requires_grad;
  n.value = A;
  n.value.requires_grad = false;
  if (mode == EwMode::same) {
    for (std::size_t i = 0; i < A.size(); ++i) n.value.data[i] *= B.data[i];
  } else {
    const std::size_t cols = A.shape[1];
    for (std::size_t i = 0; i < A.size(); ++i) n.value.data[i] *= B.data[i % cols];
  }
  return push(std::move(n));
}

NodeId Graph::relu(NodeId x) {
  Node n;
  n.op = Op::relu;
  n.inputs = {x};
  n.requires_grad = node(x).requires_grad;
  n.value = node(x).value;
  n.value.requires_grad = false;
  for (double& v : n.value.data) v = std::max(0.0, v);
  return push(std::move(n));
}

NodeId Graph::gelu(NodeId x) {
  Node n;
  n.op = Op::gelu;
  n.inputs = {x};
  n.requires_grad = node(x).requires_grad;
  n.value = node(x).value;
  n.value.requires_grad = false;
  for (double& v : n.value.data) v = gelu_scalar(v);
  return push(std::move(n));
}

NodeId Graph::embedding_lookup(NodeId table, std::vector<std::size_t> rows) {
  const Tensor& T = node(table).value;
  if (T.rank() != 2) throw ShapeError("embedding_lookup table must be rank 2");
  if (rows.empty()) throw ShapeError("embedding_lookup needs at least one row");
  const std::size_t d = T.shape[1];
  for (std::size_t r : rows) {
    if (r >= T.shape[0]) {
      throw ShapeError("embedding_lookup row " + std::to_string(r) +
                       " out of range for table " + T.shape_str());
    }
  }
  Node n;
  n.op = Op::embedding_lookup;
  n.inputs = {table};
  n.requires_grad = node(table).requires_grad;
  n.value = Tensor::zeros({rows.size(), d});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(T.data.begin() + static_cast<long>(rows[i] * d), d,
                n.value.data.begin() + static_cast<long>(i * d));
  }
  n.rows = std::move(rows);
  return push(std::move(n));
}

NodeId Graph::layer_norm(NodeId x) {
  const Tensor& X = node(x).value;
  if (X.rank() != 2) throw ShapeError("layer_norm needs rank 2, got " + X.shape_str());
  const std::size_t rows = X.shape[0], cols = X.shape[1];
  Node n;
  n.op = Op::layer_norm;
  n.inputs = {x};
  n.requires_grad = node(x).requires_grad;
  n.value = Tensor::zeros({rows, cols});
  n.cache.resize(rows);  // inverse stddev per row
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = X.data.data() + r * cols;
    double* out = n.value.data.data() + r * cols;
    double mean = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mean += in[c];
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (in[c] - mean) * (in[c] - mean);
    var /= static_cast<double>(cols);
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    n.cache[r] = inv;
    for (std::size_t c = 0; c < cols; ++c) out[c] = (in[c] - mean) * inv;
  }
  return push(std::move(n));
}

NodeId Graph::softmax(NodeId x) {
  const Tensor& X = node(x).value;
  if (X.rank() != 1 && X.rank() != 2) {
    throw ShapeError("softmax needs rank 1 or 2, got " + X.shape_str());
  }
  const std::size_t rows = X.rows(), cols = X.cols();
  Node n;
  n.op = Op::softmax;
  n.inputs = {x};
  n.requires_grad = node(x).requires_grad;
  n.value = X;
  n.value.requires_grad = false;
  for (std::size_t r = 0; r < rows; ++r) {
    softmax_row({X.data.data() + r * cols, cols}, {n.value.data.data() + r * cols, cols});
  }
  return push(std::move(n));
}

NodeId Graph::cross_entropy_with_logits(NodeId logits, std::vector<long> targets) {
  const Tensor& L = node(logits).value;
  if (L.rank() != 2) throw ShapeError("cross_entropy_with_logits needs rank-2 logits");
  const std::size_t rows = L.shape[0], cols = L.shape[1];
  if (targets.size() != rows) {
    throw ShapeError("cross_entropy_with_logits: " + std::to_string(targets.size()) +
                     " targets for " + std::to_string(rows) + " rows");
  }
  std::size_t active = 0;
  for (long t : targets) {
    if (t < -1 || t >= static_cast<long>(cols)) {
      throw ShapeError("cross_entropy_with_logits target " + std::to_string(t) +
                       " out of range for " + std::to_string(cols) + " classes");
    }
    if (t >= 0) ++active;
  }
  if (active == 0) throw ShapeError("cross_entropy_with_logits: no active targets");
  Node n;
  n.op = Op::cross_entropy_with_logits;
  n.inputs = {logits};
  n.requires_grad = node(logits).requires_grad;
  n.cache.resize(rows * cols);  // per-row softmax, reused in backward
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    softmax_row({L.data.data() + r * cols, cols}, {n.cache.data() + r * cols, cols});
    if (targets[r] >= 0) {
      const double lse = log_sum_exp({L.data.data() + r * cols, cols});
      total += lse - L.data[r * cols + static_cast<std::size_t>(targets[r])];
    }
  }
  n.targets = std::move(targets);
  n.factor = static_cast<double>(active);
  n.value = Tensor::scalar(total / static_cast<double>(active));
  return push(std::move(n));
}

NodeId Graph::mse(NodeId pred, NodeId target) {
  const Tensor& P = node(pred).value;
  const Tensor& T = node(target).value;
  if (!P.same_shape(T)) {
    throw ShapeError("mse shapes differ: " + P.shape_str() + " vs " + T.shape_str());
  }
  Node n;
  n.op = Op::mse;
  n.inputs = {pred, target};
  n.requires_grad = node(pred).requires_grad || node(target).requires_grad;
  double s = 0.0;
  for (std::size_t i = 0; i < P.size(); ++i) {
    const double d = P.data[i] - T.data[i];
    s += d * d;
  }
  n.value = Tensor::scalar(s / static_cast<double>(P.size()));
  return push(std::move(n));
}

NodeId Graph::l2_norm(NodeId x) {
  const Tensor& X = node(x).value;
  Node n;
  n.op = Op::l2_norm;
  n.inputs = {x};
  n.requires_grad = node(x).requires_grad;
  double s = 0.0;
  for (double v : X.data) s += v * v;
  n.value = Tensor::scalar(std::sqrt(s));
  return push(std::move(n));
}

NodeId Graph::concat_rows(std::vector<NodeId> parts) {
  if (parts.empty()) throw ShapeError("concat_rows needs at least one input");
  std::size_t rows = 0;
  std::size_t cols = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const Tensor& P = node(parts[i]).value;
    if (P.rank() != 2) throw ShapeError("concat_rows inputs must be rank 2");
    if (i == 0) {
      cols = P.shape[1];
    } else if (P.shape[1] != cols) {
      throw ShapeError("concat_rows column extents differ: " + std::to_string(cols) +
                       " vs " + std::to_string(P.shape[1]));
    }
    rows += P.shape[0];
  }
  Node n;
  n.op = Op::concat_rows;
  n.value = Tensor::zeros({rows, cols});
  std::size_t at = 0;
  for (NodeId p : parts) {
    const Tensor& P = node(p).value;
    std::copy(P.data.begin(), P.data.end(), n.value.data.begin() + static_cast<long>(at));
    at += P.data.size();
    n.requires_grad = n.requires_grad || node(p).requires_grad;
  }
  n.inputs = std::move(parts);
  return push(std::move(n));
}

NodeId Graph::slice_rows(NodeId x, std::size_t begin, std::size_t end) {
  const Tensor& X = node(x).value;
  if (X.rank() != 2) throw ShapeError("slice_rows needs rank 2, got " + X.shape_str());
  if (begin >= end || end > X.shape[0]) {
    throw ShapeError("slice_rows range [" + std::to_string(begin) + ", " +
                     std::to_string(end) + ") invalid for " + X.shape_str());
  }
  const std::size_t cols = X.shape[1];
  Node n;
  n.op = Op::slice_rows;
  n.inputs = {x};
  n.requires_grad = node(x).requires_grad;
  n.begin = begin;
  n.end = end;
  n.value = Tensor::zeros({end - begin, cols});
  std::copy(X.data.begin() + static_cast<long>(begin * cols),
            X.data.begin() + static_cast<long>(end * cols), n.value.data.begin());
  return push(std::move(n));
}

NodeId Graph::scale(NodeId x, double factor) {
  if (!std::isfinite(factor)) throw NumericError("scale factor must be finite");
  Node n;
  n.op = Op::scale;
  n.inputs = {x};
  n.requires_grad = node(x).requires_grad;
  n.factor = factor;
  n.value = node(x).value;
  n.value.requires_grad = false;
  for (double& v : n.value.data) v *= factor;
  return push(std::move(n));
}

const Tensor& Graph::value(NodeId id) const { return node(id).value; }

bool Graph::requires_grad(NodeId id) const { return node(id).requires_grad; }

void Graph::backward(NodeId loss) {
  const Node& ln = node(loss);
  if (!ln.value.is_scalar()) {
    throw ShapeError("backward needs a scalar loss, got " + ln.value.shape_str());
  }
  grads_.assign(nodes_.size(), {});
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    grads_[i].assign(nodes_[i].value.size(), 0.0);
  }
  grads_[loss][0] = 1.0;
  for (std::size_t i = loss + 1; i-- > 0;) {
    backprop_node(i);
  }
  for (auto& g : grads_) {
    for (double v : g) {
      if (!std::isfinite(v)) throw NumericError("non-finite gradient");
    }
  }
  has_grads_ = true;
}

const std::vector<double>& Graph::grad(NodeId id) const {
  if (!has_grads_) throw Error("grad() before backward()");
  if (id >= grads_.size()) throw ShapeError("node id out of range");
  return grads_[id];
}

Tensor Graph::grad_tensor(NodeId id) const {
  Tensor t = node(id).value;
  t.requires_grad = false;
  t.data = grad(id);
  return t;
}

void Graph::backprop_node(NodeId id) {
  const Node& n = nodes_[id];
  if (n.op == Op::leaf) return;
  if (!n.requires_grad) return;  // no grad-enabled leaf below this node
  const std::vector<double>& g = grads_[id];
  bool any = false;
  for (double v : g) {
    if (v != 0.0) {
      any = true;
      break;
    }
  }
  if (!any) return;

  const auto wants_grad = [&](std::size_t slot) {
    return nodes_[n.inputs[slot]].requires_grad;
  };

  switch (n.op) {
    case Op::matmul: {
      const Tensor& A = nodes_[n.inputs[0]].value;
      const Tensor& B = nodes_[n.inputs[1]].value;
      std::vector<double>& ga = grads_[n.inputs[0]];
      std::vector<double>& gb = grads_[n.inputs[1]];
      const std::size_t m = n.value.shape[0], p = n.value.shape[1];
      const std::size_t k = n.trans_a ? A.shape[0] : A.shape[1];
      auto a_at = [&](std::size_t i, std::size_t kk) {
        return n.trans_a ? A.data[kk * A.shape[1] + i] : A.data[i * A.shape[1] + kk];
      };
      auto b_at = [&](std::size_t kk, std::size_t j) {
        return n.trans_b ? B.data[j * B.shape[1] + kk] : B.data[kk * B.shape[1] + j];
      };
      if (wants_grad(0)) {
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < p; ++j) {
            const double go = g[i * p + j];
            if (go == 0.0) continue;
            if (n.trans_a) {
              for (std::size_t kk = 0; kk < k; ++kk) {
                ga[kk * A.shape[1] + i] += go * b_at(kk, j);
              }
            } else {
              double* row = ga.data() + i * A.shape[1];
              for (std::size_t kk = 0; kk < k; ++kk) row[kk] += go * b_at(kk, j);
            }
          }
        }
      }
      if (wants_grad(1)) {
        for (std::size_t i = 0; i < m; ++i) {
          const double* grow = g.data() + i * p;
          for (std::size_t kk = 0; kk < k; ++kk) {
            const double av = a_at(i, kk);
            if (av == 0.0) continue;
            if (n.trans_b) {
              for (std::size_t j = 0; j < p; ++j) {
                gb[j * B.shape[1] + kk] += av * grow[j];
              }
            } else {
              double* row = gb.data() + kk * B.shape[1];
              for (std::size_t j = 0; j < p; ++j) row[j] += av * grow[j];
            }
          }
        }
      }
      break;
    }
    case Op::add: {
      std::vector<double>& ga = grads_[n.inputs[0]];
      std::vector<double>& gb = grads_[n.inputs[1]];
      const Tensor& A = nodes_[n.inputs[0]].value;
      const Tensor& B = nodes_[n.inputs[1]].value;
      if (wants_grad(0)) {
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (wants_grad(1)) {
        if (A.shape == B.shape) {
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        } else {
          const std::size_t cols = A.shape[1];
          for (std::size_t i = 0; i < g.size(); ++i) gb[i % cols] += g[i];
        }
      }
      break;
    }
    case Op::mul: {
      std::vector<double>& ga = grads_[n.inputs[0]];
      std::vector<double>& gb = grads_[n.inputs[1]];
      const Tensor& A = nodes_[n.inputs[0]].value;
      const Tensor& B = nodes_[n.inputs[1]].value;
      if (A.shape == B.shape) {
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (wants_grad(0)) ga[i] += g[i] * B.data[i];
          if (wants_grad(1)) gb[i] += g[i] * A.data[i];
        }
      } else {
        const std::size_t cols = A.shape[1];
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (wants_grad(0)) ga[i] += g[i] * B.data[i % cols];
          if (wants_grad(1)) gb[i % cols] += g[i] * A.data[i];
        }
      }
      break;
    }
    case Op::relu: {
      std::vector<double>& gx = grads_[n.inputs[0]];
      const Tensor& X = nodes_[n.inputs[0]].value;
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (X.data[i] > 0.0) gx[i] += g[i];
      }
      break;
    }
    case Op::gelu: {
      std::vector<double>& gx = grads_[n.inputs[0]];
      const Tensor& X = nodes_[n.inputs[0]].value;
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double x = X.data[i];
        const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
        gx[i] += g[i] * (cdf + x * pdf);
      }
      break;
    }
    case Op::embedding_lookup: {
      std::vector<double>& gt = grads_[n.inputs[0]];
      const std::size_t d = n.value.shape[1];
      for (std::size_t i = 0; i < n.rows.size(); ++i) {
        const std::size_t r = n.rows[i];
        for (std::size_t c = 0; c < d; ++c) gt[r * d + c] += g[i * d + c];
      }
      break;
    }
    case Op::layer_norm: {
      std::vector<double>& gx = grads_[n.inputs[0]];
      const std::size_t rows = n.value.shape[0], cols = n.value.shape[1];
      for (std::size_t r = 0; r < rows; ++r) {
        const double inv = n.cache[r];
        const double* y = n.value.data.data() + r * cols;
        const double* gr = g.data() + r * cols;
        double mean_g = 0.0, mean_gy = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
          mean_g += gr[c];
          mean_gy += gr[c] * y[c];
        }
        mean_g /= static_cast<double>(cols);
        mean_gy /= static_cast<double>(cols);
        for (std::size_t c = 0; c < cols; ++c) {
          gx[r * cols + c] += inv * (gr[c] - mean_g - y[c] * mean_gy);
        }
      }
      break;
    }
    case Op::softmax: {
      std::vector<double>& gx = grads_[n.inputs[0]];
      const std::size_t rows = n.value.rows(), cols = n.value.cols();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* y = n.value.data.data() + r * cols;
        const double* gr = g.data() + r * cols;
        double dot = 0.0;
        for (std::size_t c = 0; c < cols; ++c) dot += gr[c] * y[c];
        for (std::size_t c = 0; c < cols; ++c) {
          gx[r * cols + c] += y[c] * (gr[c] - dot);
        }
      }
      break;
    }
    case Op::cross_entropy_with_logits: {
      std::vector<double>& gl = grads_[n.inputs[0]];
      const Tensor& L = nodes_[n.inputs[0]].value;
      const std::size_t rows = L.shape[0], cols = L.shape[1];
      const double scale = g[0] / n.factor;  // factor caches the active count
      for (std::size_t r = 0; r < rows; ++r) {
        const long t = n.targets[r];
        if (t < 0) continue;
        const double* probs = n.cache.data() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) {
          double v = probs[c];
          if (static_cast<long>(c) == t) v -= 1.0;
          gl[r * cols + c] += scale * v;
        }
      }
      break;
    }
    case Op::mse: {
      std::vector<double>& gp = grads_[n.inputs[0]];
      std::vector<double>& gt = grads_[n.inputs[1]];
      const Tensor& P = nodes_[n.inputs[0]].value;
      const Tensor& T = nodes_[n.inputs[1]].value;
      const double scale = 2.0 * g[0] / static_cast<double>(P.size());
      for (std::size_t i = 0; i < P.size(); ++i) {
        const double d = scale * (P.data[i] - T.data[i]);
        gp[i] += d;
        gt[i] -= d;
      }
      break;
    }
    case Op::l2_norm: {
      std::vector<double>& gx = grads_[n.inputs[0]];
      const Tensor& X = nodes_[n.inputs[0]].value;
      const double norm = n.value.data[0];
      if (norm > 0.0) {
        const double scale = g[0] / norm;
        for (std::size_t i = 0; i < X.size(); ++i) gx[i] += scale * X.data[i];
      }
      break;
    }
    case Op::concat_rows: {
      std::size_t at = 0;
      for (NodeId p : n.inputs) {
        std::vector<double>& gp = grads_[p];
        for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[at + i];
        at += gp.size();
      }
      break;
    }
    case Op::slice_rows: {
      std::vector<double>& gx = grads_[n.inputs[0]];
      const std::size_t cols = n.value.shape[1];
      const std::size_t off = n.begin * cols;
      for (std::size_t i = 0; i < g.size(); ++i) gx[off + i] += g[i];
      break;
    }
    case Op::scale: {
      std::vector<double>& gx = grads_[n.inputs[0]];
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * n.factor;
      break;
    }
    case Op::leaf:
      break;
  }
}

std::string Graph::debug_dump() const {
  std::ostringstream out;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const Node& n = nodes_[i];
    out << i << "\t" << op_name(n.op) << "\t" << n.value.shape_str();
    if (!n.inputs.empty()) {
      out << "\t<-";
      for (NodeId in : n.inputs) out << " " << in;
    }
    out << "\n";
  }
  return out.str();
}

}  // namespace kgmod::autodiff
