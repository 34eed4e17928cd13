#include "xaidiag/graph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include <Eigen/Core>

#include "xaidiag/error.hpp"

namespace xaidiag {

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMajor>;
using ConstMatrixMap = Eigen::Map<const RowMajor>;

Eigen::Index to_index(std::size_t n) { return static_cast<Eigen::Index>(n); }

std::size_t rows_of(const Shape& s) { return s.size() == 2 ? s[0] : 1; }
std::size_t cols_of(const Shape& s) { return s.empty() ? 1 : s.back(); }

void require(bool condition, ErrorCode code, const char* what) {
  if (!condition) throw Error(code, what);
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Graph::Node& Graph::push(OpKind op, std::vector<std::size_t> inputs, Shape shape) {
  Node node;
  node.op = op;
  node.needs_grad = std::any_of(inputs.begin(), inputs.end(),
                                [this](std::size_t id) { return nodes_[id].needs_grad; });
  node.inputs = std::move(inputs);
  node.value.assign(shape_size(shape), 0.0);
  node.shape = std::move(shape);
  nodes_.push_back(std::move(node));
  return nodes_.back();
}

const double* Graph::data(std::size_t id) const {
  const Node& n = nodes_[id];
  return n.external != nullptr ? n.external->data().data() : n.value.data();
}

std::span<const double> Graph::value(Var v) const {
  const Node& n = nodes_[v.id];
  if (n.external != nullptr) return n.external->data();
  return n.value;
}

Tensor Graph::tensor(Var v) const {
  auto values = value(v);
  return Tensor(nodes_[v.id].shape, std::vector<double>(values.begin(), values.end()));
}

double Graph::scalar(Var v) const {
  auto values = value(v);
  require(values.size() == 1, ErrorCode::kNotScalar, "scalar() on a multi-element node");
  return values[0];
}

std::span<const double> Graph::grad(Var v) const { return nodes_[v.id].grad; }

std::vector<double>& Graph::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(shape_size(n.shape), 0.0);
  return n.grad;
}

Var Graph::variable(Tensor& tensor) {
  Node& n = push(OpKind::kLeaf, {}, tensor.shape());
  n.value.clear();
  n.external = &tensor;
  n.needs_grad = tensor.requires_grad();
  if (n.needs_grad) n.sink = &tensor;
  return {nodes_.size() - 1};
}

Var Graph::input(const Tensor& tensor) {
  Node& n = push(OpKind::kLeaf, {}, tensor.shape());
  n.value.clear();
  n.external = &tensor;
  return {nodes_.size() - 1};
}

Var Graph::constant(Tensor tensor) {
  Node& n = push(OpKind::kLeaf, {}, tensor.shape());
  n.value.assign(tensor.data().begin(), tensor.data().end());
  return {nodes_.size() - 1};
}

Var Graph::embedding_lookup(Var table, std::span<const std::size_t> ids) {
  const Shape& ts = nodes_[table.id].shape;
  require(ts.size() == 2, ErrorCode::kShapeMismatch, "embedding table must be rank 2");
  const std::size_t vocab = ts[0];
  const std::size_t dim = ts[1];
  for (std::size_t id : ids) {
    if (id >= vocab) {
      throw Error(ErrorCode::kIndexOutOfVocab,
                  "token id " + std::to_string(id) + " >= vocab size " + std::to_string(vocab));
    }
  }
  Node& n = push(OpKind::kEmbeddingLookup, {table.id}, {ids.size(), dim});
  n.indices.assign(ids.begin(), ids.end());
  const double* t = data(table.id);
  for (std::size_t j = 0; j < ids.size(); ++j) {
    std::copy_n(t + ids[j] * dim, dim, nodes_.back().value.data() + j * dim);
  }
  return {nodes_.size() - 1};
}

Var Graph::matmul(Var a, Var b, bool transpose_b) {
  const Shape& as = nodes_[a.id].shape;
  const Shape& bs = nodes_[b.id].shape;
  require(bs.size() == 2 && !as.empty(), ErrorCode::kShapeMismatch, "matmul operand ranks");
  const std::size_t m = rows_of(as);
  const std::size_t k = cols_of(as);
  const std::size_t bk = transpose_b ? bs[1] : bs[0];
  const std::size_t n = transpose_b ? bs[0] : bs[1];
  require(k == bk, ErrorCode::kShapeMismatch, "matmul inner dimensions differ");
  Shape out_shape = as.size() == 1 ? Shape{n} : Shape{m, n};
  Node& node = push(OpKind::kMatMul, {a.id, b.id}, std::move(out_shape));
  node.attr0 = transpose_b ? 1 : 0;
  MatrixMap out(node.value.data(), to_index(m), to_index(n));
  ConstMatrixMap pa(data(a.id), to_index(m), to_index(k));
  if (!transpose_b) {
    out.noalias() = pa * ConstMatrixMap(data(b.id), to_index(k), to_index(n));
  } else {
    out.noalias() = pa * ConstMatrixMap(data(b.id), to_index(n), to_index(k)).transpose();
  }
  flops_ += 2 * m * k * n;
  return {nodes_.size() - 1};
}

Var Graph::add(Var a, Var b) {
  require(nodes_[a.id].shape == nodes_[b.id].shape, ErrorCode::kShapeMismatch, "add shapes");
  Node& n = push(OpKind::kAdd, {a.id, b.id}, nodes_[a.id].shape);
  const double* pa = data(a.id);
  const double* pb = data(b.id);
  for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = pa[i] + pb[i];
  flops_ += n.value.size();
  return {nodes_.size() - 1};
}

Var Graph::add_row_bias(Var x, Var bias) {
  const Shape xs = nodes_[x.id].shape;
  const Shape& bs = nodes_[bias.id].shape;
  require(bs.size() == 1 && bs[0] == cols_of(xs), ErrorCode::kShapeMismatch, "bias width");
  Node& n = push(OpKind::kAddRowBias, {x.id, bias.id}, xs);
  const double* px = data(x.id);
  const double* pb = data(bias.id);
  const std::size_t cols = cols_of(xs);
  for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = px[i] + pb[i % cols];
  flops_ += n.value.size();
  return {nodes_.size() - 1};
}

Var Graph::mul(Var a, Var b) {
  require(nodes_[a.id].shape == nodes_[b.id].shape, ErrorCode::kShapeMismatch, "mul shapes");
  Node& n = push(OpKind::kMul, {a.id, b.id}, nodes_[a.id].shape);
  const double* pa = data(a.id);
  const double* pb = data(b.id);
  for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = pa[i] * pb[i];
  flops_ += n.value.size();
  return {nodes_.size() - 1};
}

Var Graph::scale(Var x, double factor) {
  Node& n = push(OpKind::kScale, {x.id}, nodes_[x.id].shape);
  n.scalar = factor;
  const double* px = data(x.id);
  for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = px[i] * factor;
  flops_ += n.value.size();
  return {nodes_.size() - 1};
}

Var Graph::relu(Var x) {
  Node& n = push(OpKind::kRelu, {x.id}, nodes_[x.id].shape);
  const double* px = data(x.id);
  for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = px[i] > 0.0 ? px[i] : 0.0;
  flops_ += n.value.size();
  return {nodes_.size() - 1};
}

Var Graph::sigmoid(Var x) {
  Node& n = push(OpKind::kSigmoid, {x.id}, nodes_[x.id].shape);
  const double* px = data(x.id);
  for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = stable_sigmoid(px[i]);
  flops_ += n.value.size();
  return {nodes_.size() - 1};
}

Var Graph::tanh(Var x) {
  Node& n = push(OpKind::kTanh, {x.id}, nodes_[x.id].shape);
  const double* px = data(x.id);
  for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = std::tanh(px[i]);
  flops_ += n.value.size();
  return {nodes_.size() - 1};
}

Var Graph::softmax_rows(Var x) {
  const Shape xs = nodes_[x.id].shape;
  Node& n = push(OpKind::kSoftmaxRows, {x.id}, xs);
  const double* px = data(x.id);
  const std::size_t rows = rows_of(xs);
  const std::size_t cols = cols_of(xs);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = px + r * cols;
    double* out = n.value.data() + r * cols;
    const double mx = *std::max_element(in, in + cols);
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      out[c] = std::exp(in[c] - mx);
      total += out[c];
    }
    for (std::size_t c = 0; c < cols; ++c) out[c] /= total;
  }
  flops_ += 3 * n.value.size();
  return {nodes_.size() - 1};
}

Var Graph::layer_norm_rows(Var x, Var gain, Var bias, double eps) {
  const Shape xs = nodes_[x.id].shape;
  const std::size_t rows = rows_of(xs);
  const std::size_t cols = cols_of(xs);
  require(shape_size(nodes_[gain.id].shape) == cols && shape_size(nodes_[bias.id].shape) == cols,
          ErrorCode::kShapeMismatch, "layer norm parameter width");
  Node& n = push(OpKind::kLayerNormRows, {x.id, gain.id, bias.id}, xs);
  n.scalar = eps;
  // aux: normalized values (rows * cols) followed by per-row inverse std.
  n.aux.assign(rows * cols + rows, 0.0);
  const double* px = data(x.id);
  const double* pg = data(gain.id);
  const double* pb = data(bias.id);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = px + r * cols;
    double mean = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mean += in[c];
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (in[c] - mean) * (in[c] - mean);
    var /= static_cast<double>(cols);
    const double inv_std = 1.0 / std::sqrt(var + eps);
    n.aux[rows * cols + r] = inv_std;
    for (std::size_t c = 0; c < cols; ++c) {
      const double xhat = (in[c] - mean) * inv_std;
      n.aux[r * cols + c] = xhat;
      n.value[r * cols + c] = pg[c] * xhat + pb[c];
    }
  }
  flops_ += 8 * n.value.size();
  return {nodes_.size() - 1};
}

Var Graph::unfold(Var x, std::size_t window) {
  const Shape xs = nodes_[x.id].shape;
  require(xs.size() == 2 && window >= 1, ErrorCode::kShapeMismatch, "unfold needs [L x d]");
  const std::size_t length = xs[0];
  const std::size_t dim = xs[1];
  if (length < window) {
    throw Error(ErrorCode::kSequenceTooShort, "sequence length " + std::to_string(length) +
                                                  " < window " + std::to_string(window));
  }
  const std::size_t positions = length - window + 1;
  Node& n = push(OpKind::kUnfold, {x.id}, {positions, window * dim});
  n.attr0 = window;
  const double* px = data(x.id);
  for (std::size_t p = 0; p < positions; ++p) {
    std::copy_n(px + p * dim, window * dim, n.value.data() + p * window * dim);
  }
  return {nodes_.size() - 1};
}

Var Graph::max_rows(Var x) {
  const Shape xs = nodes_[x.id].shape;
  const std::size_t rows = rows_of(xs);
  const std::size_t cols = cols_of(xs);
  require(rows >= 1, ErrorCode::kShapeMismatch, "max over zero rows");
  Node& n = push(OpKind::kMaxRows, {x.id}, {cols});
  n.indices.assign(cols, 0);
  const double* px = data(x.id);
  for (std::size_t c = 0; c < cols; ++c) {
    double best = px[c];
    std::size_t arg = 0;
    for (std::size_t r = 1; r < rows; ++r) {
      if (px[r * cols + c] > best) {
        best = px[r * cols + c];
        arg = r;
      }
    }
    n.value[c] = best;
    n.indices[c] = arg;
  }
  flops_ += (rows - 1) * cols;
  return {nodes_.size() - 1};
}

Var Graph::mean_rows(Var x) {
  const Shape xs = nodes_[x.id].shape;
  const std::size_t rows = rows_of(xs);
  const std::size_t cols = cols_of(xs);
  require(rows >= 1, ErrorCode::kShapeMismatch, "mean over zero rows");
  Node& n = push(OpKind::kMeanRows, {x.id}, {cols});
  const double* px = data(x.id);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) n.value[c] += px[r * cols + c];
  }
  for (double& v : n.value) v /= static_cast<double>(rows);
  flops_ += rows * cols;
  return {nodes_.size() - 1};
}

Var Graph::concat(std::span<const Var> parts) {
  std::vector<std::size_t> ids;
  std::size_t total = 0;
  for (Var p : parts) {
    require(nodes_[p.id].shape.size() == 1, ErrorCode::kShapeMismatch, "concat needs rank 1");
    ids.push_back(p.id);
    total += nodes_[p.id].shape[0];
  }
  push(OpKind::kConcat, std::move(ids), {total});
  std::size_t offset = 0;
  for (Var p : parts) {
    const std::size_t len = nodes_[p.id].shape[0];
    std::copy_n(data(p.id), len, nodes_.back().value.data() + offset);
    offset += len;
  }
  return {nodes_.size() - 1};
}

Var Graph::concat_cols(std::span<const Var> parts) {
  require(!parts.empty(), ErrorCode::kShapeMismatch, "concat_cols of nothing");
  const std::size_t rows = nodes_[parts[0].id].shape.size() == 2 ? nodes_[parts[0].id].shape[0] : 0;
  std::vector<std::size_t> ids;
  std::size_t total = 0;
  for (Var p : parts) {
    const Shape& s = nodes_[p.id].shape;
    require(s.size() == 2 && s[0] == rows, ErrorCode::kShapeMismatch, "concat_cols row counts");
    ids.push_back(p.id);
    total += s[1];
  }
  push(OpKind::kConcatCols, std::move(ids), {rows, total});
  std::size_t offset = 0;
  for (Var p : parts) {
    const std::size_t w = nodes_[p.id].shape[1];
    const double* src = data(p.id);
    double* dst = nodes_.back().value.data();
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(src + r * w, w, dst + r * total + offset);
    offset += w;
  }
  return {nodes_.size() - 1};
}

Var Graph::slice_cols(Var x, std::size_t start, std::size_t length) {
  const Shape xs = nodes_[x.id].shape;
  const std::size_t rows = rows_of(xs);
  const std::size_t cols = cols_of(xs);
  require(start + length <= cols, ErrorCode::kShapeMismatch, "slice out of range");
  Shape out = xs.size() == 1 ? Shape{length} : Shape{rows, length};
  Node& n = push(OpKind::kSliceCols, {x.id}, std::move(out));
  n.attr0 = start;
  n.attr1 = length;
  const double* px = data(x.id);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(px + r * cols + start, length, n.value.data() + r * length);
  }
  return {nodes_.size() - 1};
}

Var Graph::row(Var x, std::size_t index) {
  const Shape xs = nodes_[x.id].shape;
  require(xs.size() == 2 && index < xs[0], ErrorCode::kShapeMismatch, "row index");
  Node& n = push(OpKind::kRow, {x.id}, {xs[1]});
  n.attr0 = index;
  std::copy_n(data(x.id) + index * xs[1], xs[1], n.value.data());
  return {nodes_.size() - 1};
}

Var Graph::stack_rows(std::span<const Var> rows) {
  require(!rows.empty(), ErrorCode::kShapeMismatch, "stack of nothing");
  const Shape& first = nodes_[rows[0].id].shape;
  require(first.size() == 1, ErrorCode::kShapeMismatch, "stack needs rank 1");
  const std::size_t width = first[0];
  std::vector<std::size_t> ids;
  for (Var r : rows) {
    require(nodes_[r.id].shape == Shape{width}, ErrorCode::kShapeMismatch, "stack widths");
    ids.push_back(r.id);
  }
  push(OpKind::kStackRows, std::move(ids), {rows.size(), width});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(data(rows[i].id), width, nodes_.back().value.data() + i * width);
  }
  return {nodes_.size() - 1};
}

Var Graph::reshape(Var x, Shape shape) {
  require(shape_size(shape) == shape_size(nodes_[x.id].shape), ErrorCode::kShapeMismatch,
          "reshape size");
  Node& n = push(OpKind::kReshape, {x.id}, std::move(shape));
  std::copy_n(data(x.id), n.value.size(), n.value.data());
  return {nodes_.size() - 1};
}

Var Graph::sum(Var x) {
  const std::size_t count = shape_size(nodes_[x.id].shape);
  Node& n = push(OpKind::kSum, {x.id}, {1});
  const double* px = data(x.id);
  double total = 0.0;
  for (std::size_t i = 0; i < count; ++i) total += px[i];
  n.value[0] = total;
  flops_ += count;
  return {nodes_.size() - 1};
}

Var Graph::pick(Var x, std::size_t index) {
  require(index < shape_size(nodes_[x.id].shape), ErrorCode::kShapeMismatch, "pick index");
  Node& n = push(OpKind::kPick, {x.id}, {1});
  n.attr0 = index;
  n.value[0] = data(x.id)[index];
  return {nodes_.size() - 1};
}

Var Graph::cross_entropy(Var logits, std::size_t label) {
  const Shape& ls = nodes_[logits.id].shape;
  require(ls.size() == 1 && label < ls[0], ErrorCode::kShapeMismatch, "cross entropy label");
  const std::size_t k = ls[0];
  Node& n = push(OpKind::kCrossEntropy, {logits.id}, {1});
  n.attr0 = label;
  n.aux.assign(k, 0.0);
  const double* z = data(logits.id);
  const double mx = *std::max_element(z, z + k);
  double total = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    n.aux[i] = std::exp(z[i] - mx);
    total += n.aux[i];
  }
  for (double& p : n.aux) p /= total;
  n.value[0] = (mx + std::log(total)) - z[label];
  flops_ += 3 * k;
  return {nodes_.size() - 1};
}

void Graph::backward(Var output) {
  if (shape_size(nodes_[output.id].shape) != 1) {
    throw Error(ErrorCode::kNotScalar, "backward needs a one-element output");
  }
  for (Node& n : nodes_) n.grad.clear();
  if (!nodes_[output.id].needs_grad) return;
  grad_buffer(output.id)[0] = 1.0;
  for (std::size_t id = output.id + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.needs_grad || n.grad.empty()) continue;
    if (n.op == OpKind::kLeaf) {
      if (n.sink != nullptr) {
        auto sink = n.sink->mutable_grad();
        for (std::size_t i = 0; i < sink.size(); ++i) sink[i] += n.grad[i];
      }
      continue;
    }
    backward_node(id);
  }
}

void Graph::backward_node(std::size_t id) {
  const Node& n = nodes_[id];
  const std::vector<double>& g = n.grad;
  const std::size_t count = g.size();

  switch (n.op) {
    case OpKind::kLeaf:
      break;

    case OpKind::kEmbeddingLookup: {
      const std::size_t t = n.inputs[0];
      if (!needs(t)) break;
      const std::size_t dim = nodes_[t].shape[1];
      auto& gt = grad_buffer(t);
      for (std::size_t j = 0; j < n.indices.size(); ++j) {
        const std::size_t row = n.indices[j];
        for (std::size_t c = 0; c < dim; ++c) gt[row * dim + c] += g[j * dim + c];
      }
      flops_ += count;
      break;
    }

    case OpKind::kMatMul: {
      const std::size_t a = n.inputs[0];
      const std::size_t b = n.inputs[1];
      const bool tb = n.attr0 == 1;
      const Shape& as = nodes_[a].shape;
      const Shape& bs = nodes_[b].shape;
      const std::size_t m = rows_of(as);
      const std::size_t k = cols_of(as);
      const std::size_t nn = tb ? bs[0] : bs[1];
      ConstMatrixMap ma(data(a), to_index(m), to_index(k));
      ConstMatrixMap mg(g.data(), to_index(m), to_index(nn));
      if (needs(a)) {
        MatrixMap ga(grad_buffer(a).data(), to_index(m), to_index(k));
        if (!tb) {
          ga.noalias() += mg * ConstMatrixMap(data(b), to_index(k), to_index(nn)).transpose();
        } else {
          ga.noalias() += mg * ConstMatrixMap(data(b), to_index(nn), to_index(k));
        }
        flops_ += 2 * m * k * nn;
      }
      if (needs(b)) {
        if (!tb) {
          MatrixMap gb(grad_buffer(b).data(), to_index(k), to_index(nn));
          gb.noalias() += ma.transpose() * mg;
        } else {
          MatrixMap gb(grad_buffer(b).data(), to_index(nn), to_index(k));
          gb.noalias() += mg.transpose() * ma;
        }
        flops_ += 2 * m * k * nn;
      }
      break;
    }

    case OpKind::kAdd: {
      for (std::size_t in : n.inputs) {
        if (!needs(in)) continue;
        auto& gi = grad_buffer(in);
        for (std::size_t i = 0; i < count; ++i) gi[i] += g[i];
        flops_ += count;
      }
      break;
    }

    case OpKind::kAddRowBias: {
      const std::size_t x = n.inputs[0];
      const std::size_t b = n.inputs[1];
      if (needs(x)) {
        auto& gx = grad_buffer(x);
        for (std::size_t i = 0; i < count; ++i) gx[i] += g[i];
        flops_ += count;
      }
      if (needs(b)) {
        auto& gb = grad_buffer(b);
        const std::size_t cols = gb.size();
        for (std::size_t i = 0; i < count; ++i) gb[i % cols] += g[i];
        flops_ += count;
      }
      break;
    }

    case OpKind::kMul: {
      const std::size_t a = n.inputs[0];
      const std::size_t b = n.inputs[1];
      const double* pa = data(a);
      const double* pb = data(b);
      if (needs(a)) {
        auto& ga = grad_buffer(a);
        for (std::size_t i = 0; i < count; ++i) ga[i] += g[i] * pb[i];
        flops_ += 2 * count;
      }
      if (needs(b)) {
        auto& gb = grad_buffer(b);
        for (std::size_t i = 0; i < count; ++i) gb[i] += g[i] * pa[i];
        flops_ += 2 * count;
      }
      break;
    }

    case OpKind::kScale: {
      const std::size_t x = n.inputs[0];
      if (!needs(x)) break;
      auto& gx = grad_buffer(x);
      for (std::size_t i = 0; i < count; ++i) gx[i] += g[i] * n.scalar;
      flops_ += 2 * count;
      break;
    }

    case OpKind::kRelu: {
      const std::size_t x = n.inputs[0];
      if (!needs(x)) break;
      auto& gx = grad_buffer(x);
      const double* px = data(x);
      const bool guided = mode_ == BackpropMode::kGuided;
      for (std::size_t i = 0; i < count; ++i) {
        double upstream = g[i];
        if (guided && upstream < 0.0) upstream = 0.0;
        if (px[i] > 0.0) gx[i] += upstream;
      }
      flops_ += count;
      break;
    }

    case OpKind::kSigmoid: {
      const std::size_t x = n.inputs[0];
      if (!needs(x)) break;
      auto& gx = grad_buffer(x);
      for (std::size_t i = 0; i < count; ++i) {
        const double y = n.value[i];
        gx[i] += g[i] * y * (1.0 - y);
      }
      flops_ += 3 * count;
      break;
    }

    case OpKind::kTanh: {
      const std::size_t x = n.inputs[0];
      if (!needs(x)) break;
      auto& gx = grad_buffer(x);
      for (std::size_t i = 0; i < count; ++i) {
        const double y = n.value[i];
        gx[i] += g[i] * (1.0 - y * y);
      }
      flops_ += 3 * count;
      break;
    }

    case OpKind::kSoftmaxRows: {
      const std::size_t x = n.inputs[0];
      if (!needs(x)) break;
      auto& gx = grad_buffer(x);
      const std::size_t rows = rows_of(n.shape);
      const std::size_t cols = cols_of(n.shape);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* y = n.value.data() + r * cols;
        const double* gr = g.data() + r * cols;
        double dot = 0.0;
        for (std::size_t c = 0; c < cols; ++c) dot += gr[c] * y[c];
        for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += y[c] * (gr[c] - dot);
      }
      flops_ += 4 * count;
      break;
    }

    case OpKind::kLayerNormRows: {
      const std::size_t x = n.inputs[0];
      const std::size_t gain = n.inputs[1];
      const std::size_t bias = n.inputs[2];
      const std::size_t rows = rows_of(n.shape);
      const std::size_t cols = cols_of(n.shape);
      const double* pg = data(gain);
      if (needs(gain)) {
        auto& gg = grad_buffer(gain);
        for (std::size_t i = 0; i < count; ++i) gg[i % cols] += g[i] * n.aux[i];
        flops_ += 2 * count;
      }
      if (needs(bias)) {
        auto& gb = grad_buffer(bias);
        for (std::size_t i = 0; i < count; ++i) gb[i % cols] += g[i];
        flops_ += count;
      }
      if (needs(x)) {
        auto& gx = grad_buffer(x);
        const double inv_cols = 1.0 / static_cast<double>(cols);
        for (std::size_t r = 0; r < rows; ++r) {
          const double inv_std = n.aux[rows * cols + r];
          double sum_d = 0.0;
          double sum_dx = 0.0;
          for (std::size_t c = 0; c < cols; ++c) {
            const double d = g[r * cols + c] * pg[c];
            sum_d += d;
            sum_dx += d * n.aux[r * cols + c];
          }
          for (std::size_t c = 0; c < cols; ++c) {
            const double d = g[r * cols + c] * pg[c];
            const double xhat = n.aux[r * cols + c];
            gx[r * cols + c] += inv_std * (d - inv_cols * sum_d - xhat * inv_cols * sum_dx);
          }
        }
        flops_ += 10 * count;
      }
      break;
    }

    case OpKind::kUnfold: {
      const std::size_t x = n.inputs[0];
      if (!needs(x)) break;
      auto& gx = grad_buffer(x);
      const std::size_t dim = nodes_[x].shape[1];
      const std::size_t width = n.attr0 * dim;
      const std::size_t positions = n.shape[0];
      for (std::size_t p = 0; p < positions; ++p) {
        for (std::size_t q = 0; q < width; ++q) gx[p * dim + q] += g[p * width + q];
      }
      flops_ += count;
      break;
    }

    case OpKind::kMaxRows: {
      const std::size_t x = n.inputs[0];
      if (!needs(x)) break;
      auto& gx = grad_buffer(x);
      const std::size_t cols = count;
      for (std::size_t c = 0; c < cols; ++c) gx[n.indices[c] * cols + c] += g[c];
      break;
    }

    case OpKind::kMeanRows: {
      const std::size_t x = n.inputs[0];
      if (!needs(x)) break;
      auto& gx = grad_buffer(x);
      const std::size_t cols = count;
      const std::size_t rows = gx.size() / cols;
      const double inv = 1.0 / static_cast<double>(rows);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i % cols] * inv;
      flops_ += gx.size();
      break;
    }

    case OpKind::kConcat: {
      std::size_t offset = 0;
      for (std::size_t in : n.inputs) {
        const std::size_t len = nodes_[in].shape[0];
        if (needs(in)) {
          auto& gi = grad_buffer(in);
          for (std::size_t i = 0; i < len; ++i) gi[i] += g[offset + i];
        }
        offset += len;
      }
      break;
    }

    case OpKind::kConcatCols: {
      const std::size_t rows = n.shape[0];
      const std::size_t total = n.shape[1];
      std::size_t offset = 0;
      for (std::size_t in : n.inputs) {
        const std::size_t w = nodes_[in].shape[1];
        if (needs(in)) {
          auto& gi = grad_buffer(in);
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < w; ++c) gi[r * w + c] += g[r * total + offset + c];
          }
        }
        offset += w;
      }
      break;
    }

    case OpKind::kSliceCols: {
      const std::size_t x = n.inputs[0];
      if (!needs(x)) break;
      auto& gx = grad_buffer(x);
      const std::size_t cols = cols_of(nodes_[x].shape);
      const std::size_t rows = rows_of(nodes_[x].shape);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < n.attr1; ++c) gx[r * cols + n.attr0 + c] += g[r * n.attr1 + c];
      }
      break;
    }

    case OpKind::kRow: {
      const std::size_t x = n.inputs[0];
      if (!needs(x)) break;
      auto& gx = grad_buffer(x);
      for (std::size_t c = 0; c < count; ++c) gx[n.attr0 * count + c] += g[c];
      break;
    }

    case OpKind::kStackRows: {
      const std::size_t width = n.shape[1];
      for (std::size_t i = 0; i < n.inputs.size(); ++i) {
        const std::size_t in = n.inputs[i];
        if (!needs(in)) continue;
        auto& gi = grad_buffer(in);
        for (std::size_t c = 0; c < width; ++c) gi[c] += g[i * width + c];
      }
      break;
    }

    case OpKind::kReshape: {
      const std::size_t x = n.inputs[0];
      if (!needs(x)) break;
      auto& gx = grad_buffer(x);
      for (std::size_t i = 0; i < count; ++i) gx[i] += g[i];
      break;
    }

    case OpKind::kSum: {
      const std::size_t x = n.inputs[0];
      if (!needs(x)) break;
      auto& gx = grad_buffer(x);
      for (double& v : gx) v += g[0];
      flops_ += gx.size();
      break;
    }

    case OpKind::kPick: {
      const std::size_t x = n.inputs[0];
      if (!needs(x)) break;
      grad_buffer(x)[n.attr0] += g[0];
      break;
    }

    case OpKind::kCrossEntropy: {
      const std::size_t z = n.inputs[0];
      if (!needs(z)) break;
      auto& gz = grad_buffer(z);
      for (std::size_t i = 0; i < n.aux.size(); ++i) {
        gz[i] += g[0] * (n.aux[i] - (i == n.attr0 ? 1.0 : 0.0));
      }
      flops_ += 2 * n.aux.size();
      break;
    }
  }
}

Var dropout(Graph& g, Var x, double rate, std::mt19937_64* rng) {
  if (rng == nullptr || rate <= 0.0) return x;
  const Shape shape = g.shape(x);
  Tensor mask(shape);
  std::bernoulli_distribution keep(1.0 - rate);
  const double factor = 1.0 / (1.0 - rate);
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = keep(*rng) ? factor : 0.0;
  return g.mul(x, g.constant(std::move(mask)));
}

}  // namespace xaidiag
