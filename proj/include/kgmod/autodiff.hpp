#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kgmod/common.hpp"

namespace kgmod::autodiff {

// Dense row-major f64 tensor. Rank 1 is a vector, rank 2 a matrix; reductions
// produce shape {1}.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;
  bool requires_grad = false;

  Tensor() = default;
  Tensor(std::vector<std::size_t> s, std::vector<double> d, bool rg = false);

  static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor vec(std::vector<double> v, bool requires_grad = false);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v,
                       bool requires_grad = false);

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  bool is_scalar() const { return size() == 1 && rank() <= 1; }
  // rank-2 accessors (rank-1 behaves as a single row)
  std::size_t rows() const;
  std::size_t cols() const;
  double& at(std::size_t r, std::size_t c);
  double at(std::size_t r, std::size_t c) const;

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  bool all_finite() const;
  void fill(double v);
  std::string shape_str() const;
};

enum class Op : std::uint8_t {
  leaf,
  matmul,
  add,
  mul,
  relu,
  gelu,
  embedding_lookup,
  layer_norm,
  softmax,
  cross_entropy_with_logits,
  mse,
  l2_norm,
  concat_rows,
  slice_rows,
  scale,
};

const char* op_name(Op op);

using NodeId = std::size_t;

// Eager tape: each op computes its forward value on append; backward walks the
// tape once in reverse. Node ids are append indices, so inputs always precede
// their consumers.
class Graph {
 public:
  NodeId leaf(Tensor t);

  // matmul with optional operand transposition (an attribute, not a new kind;
  // it is what lets attention and weight-tied logits stay inside this op set)
  NodeId matmul(NodeId a, NodeId b, bool trans_a = false, bool trans_b = false);
  // same-shape elementwise; rank-1 second operand broadcasts across rows
  NodeId add(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId relu(NodeId x);
  NodeId gelu(NodeId x);
  NodeId embedding_lookup(NodeId table, std::vector<std::size_t> rows);
  NodeId layer_norm(NodeId x);  // per row, epsilon 1e-5, no affine
  NodeId softmax(NodeId x);     // per row
  // targets per row; -1 marks a position excluded from the loss
  NodeId cross_entropy_with_logits(NodeId logits, std::vector<long> targets);
  NodeId mse(NodeId pred, NodeId target);
  NodeId l2_norm(NodeId x);
  NodeId concat_rows(std::vector<NodeId> parts);
  NodeId slice_rows(NodeId x, std::size_t begin, std::size_t end);
  NodeId scale(NodeId x, double factor);

  const Tensor& value(NodeId id) const;
  bool requires_grad(NodeId id) const;
  std::size_t node_count() const { return nodes_.size(); }

  // Populates per-node gradient buffers. loss must be scalar-shaped.
  void backward(NodeId loss);
  // Gradient of the last backward() w.r.t. node id; zeros if the node did not
  // participate. Only valid after backward().
  const std::vector<double>& grad(NodeId id) const;
  Tensor grad_tensor(NodeId id) const;

  std::string debug_dump() const;

 private:
  struct Node {
    Op op = Op::leaf;
    std::vector<NodeId> inputs;
    Tensor value;
    bool requires_grad = false;
    // attributes
    bool trans_a = false, trans_b = false;
    double factor = 1.0;
    std::size_t begin = 0, end = 0;
    std::vector<std::size_t> rows;
    std::vector<long> targets;
    std::vector<double> cache;  // op-specific forward stats for backward
  };

  NodeId push(Node n);
  const Node& node(NodeId id) const;
  void check_finite(const Node& n) const;
  void backprop_node(NodeId id);

  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
  bool has_grads_ = false;
};

// Numerically stable helpers shared with forward-only code paths.
double log_sum_exp(std::span<const double> row);
void softmax_row(std::span<const double> in, std::span<double> out);
double gelu_scalar(double x);

}  // namespace kgmod::autodiff
