#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "xaidiag/tensor.hpp"

namespace xaidiag {

enum class BackpropMode {
  kStandard,
  // ReLU nodes only pass non-negative upstream gradients.
  kGuided,
};

enum class OpKind {
  kLeaf,
  kEmbeddingLookup,
  kMatMul,
  kAdd,
  kAddRowBias,
  kMul,
  kScale,
  kRelu,
  kSigmoid,
  kTanh,
  kSoftmaxRows,
  kLayerNormRows,
  kUnfold,
  kMaxRows,
  kMeanRows,
  kConcat,
  kConcatCols,
  kSliceCols,
  kRow,
  kStackRows,
  kReshape,
  kSum,
  kPick,
  kCrossEntropy,
};

/// Handle to a node in a Graph.
struct Var {
  std::size_t id = 0;
};

/// Tape of dense tensor operations supporting one or more reverse passes.
///
/// Nodes are appended in evaluation order, so node ids are a topological
/// order. Every operation records its forward values; `backward` replays the
/// tape in reverse. Tensors are rank 1 (`[n]`) or rank 2 (`[rows x cols]`).
///
/// FLOP convention (forward and backward, accumulated in one counter):
///   - a multiply-accumulate counts 2; a dense m x k by k x n product is 2mkn
///   - elementwise add, multiply, scale: 1 per element
///   - ReLU comparison, sigmoid, tanh: 1 per element
///   - softmax: 3 per element (exp, sum, divide)
///   - layer norm: 8 per element
///   - max over rows: 1 comparison per element beyond the first row
///   - lookups, slicing, concatenation and reshapes are free
/// Backward work is counted only for inputs that need a gradient.
class Graph {
 public:
  explicit Graph(BackpropMode mode = BackpropMode::kStandard) : mode_(mode) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  BackpropMode mode() const noexcept { return mode_; }
  void set_mode(BackpropMode mode) noexcept { mode_ = mode; }

  // Leaves.
  // Binds an external tensor without copying. When the tensor requires a
  // gradient, `backward` accumulates into its grad buffer; the tensor must
  // outlive the graph.
  Var variable(Tensor& tensor);
  // Read-only view of an external tensor; never receives gradients.
  Var input(const Tensor& tensor);
  // Owned copy.
  Var constant(Tensor tensor);

  Var embedding_lookup(Var table, std::span<const std::size_t> ids);
  // a: [m x k] or [k]; b: [k x n] (or [n x k] when transpose_b). A rank 1
  // left operand yields a rank 1 result.
  Var matmul(Var a, Var b, bool transpose_b = false);
  Var add(Var a, Var b);
  // x: [m x n] or [n], bias: [n].
  Var add_row_bias(Var x, Var bias);
  Var mul(Var a, Var b);
  Var scale(Var x, double factor);
  Var relu(Var x);
  Var sigmoid(Var x);
  Var tanh(Var x);
  Var softmax_rows(Var x);
  Var layer_norm_rows(Var x, Var gain, Var bias, double eps = 1e-5);
  // x: [L x d] -> [(L - window + 1) x (window * d)], row p = x[p..p+window).
  Var unfold(Var x, std::size_t window);
  // Column-wise max over rows: [m x n] -> [n].
  Var max_rows(Var x);
  Var mean_rows(Var x);
  // Concatenation of rank 1 vectors.
  Var concat(std::span<const Var> parts);
  // Concatenation along columns of rank 2 tensors with equal row counts.
  Var concat_cols(std::span<const Var> parts);
  Var slice_cols(Var x, std::size_t start, std::size_t length);
  // Row i of a rank 2 tensor as a rank 1 vector.
  Var row(Var x, std::size_t index);
  // Stack rank 1 vectors of equal length into a matrix.
  Var stack_rows(std::span<const Var> rows);
  Var reshape(Var x, Shape shape);
  Var sum(Var x);
  // Element `index` of a rank 1 tensor as a one-element tensor.
  Var pick(Var x, std::size_t index);
  // Softmax cross-entropy of rank 1 logits against `label`; one-element result.
  Var cross_entropy(Var logits, std::size_t label);

  std::span<const double> value(Var v) const;
  const Shape& shape(Var v) const { return nodes_[v.id].shape; }
  Tensor tensor(Var v) const;
  double scalar(Var v) const;

  // Gradient of the last backward output w.r.t. v (zeros if v was not reached).
  std::span<const double> grad(Var v) const;

  // Reverse pass from a one-element output. Resets previous node gradients,
  // so several backward passes may be run on one tape.
  void backward(Var output);

  std::uint64_t flops() const noexcept { return flops_; }
  std::size_t node_count() const noexcept { return nodes_.size(); }
  OpKind op(Var v) const { return nodes_[v.id].op; }

 private:
  struct Node {
    OpKind op = OpKind::kLeaf;
    std::vector<std::size_t> inputs;
    Shape shape;
    std::vector<double> value;
    const Tensor* external = nullptr;
    Tensor* sink = nullptr;
    bool needs_grad = false;
    std::vector<double> grad;
    // Op attributes: lookup ids or argmax positions, integer parameters and
    // saved intermediates.
    std::vector<std::size_t> indices;
    std::size_t attr0 = 0;
    std::size_t attr1 = 0;
    double scalar = 0.0;
    std::vector<double> aux;
  };

  Node& push(OpKind op, std::vector<std::size_t> inputs, Shape shape);
  const double* data(std::size_t id) const;
  std::vector<double>& grad_buffer(std::size_t id);
  bool needs(std::size_t id) const { return nodes_[id].needs_grad; }
  void backward_node(std::size_t id);

  BackpropMode mode_;
  std::vector<Node> nodes_;
  std::uint64_t flops_ = 0;
};

/// Inverted dropout applied through a constant mask; identity when `rng` is
/// null or rate is zero (evaluation mode).
Var dropout(Graph& g, Var x, double rate, std::mt19937_64* rng);

}  // namespace xaidiag
