#include "xaidiag/layers.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "xaidiag/error.hpp"

namespace xaidiag {

Var conv1d_maxpool(Graph& g, Var x, std::span<const ConvKernel> kernels) {
  const std::size_t length = g.shape(x).at(0);
  std::size_t widest = 0;
  for (const ConvKernel& k : kernels) widest = std::max(widest, k.window);
  if (length < widest) {
    throw Error(ErrorCode::kSequenceTooShort, "sequence length " + std::to_string(length) +
                                                  " < widest window " + std::to_string(widest));
  }
  std::vector<Var> pooled;
  pooled.reserve(kernels.size());
  for (const ConvKernel& k : kernels) {
    Var windows = g.unfold(x, k.window);
    Var response = g.relu(g.add_row_bias(g.matmul(windows, k.weight), k.bias));
    pooled.push_back(g.max_rows(response));
  }
  return g.concat(pooled);
}

namespace {

struct DirectionResult {
  std::vector<Var> states;  // indexed by position
};

DirectionResult run_direction(Graph& g, Var x, const LstmDirection& p, bool reverse) {
  const std::size_t length = g.shape(x).at(0);
  const std::size_t hidden = g.shape(p.w_recurrent).at(0);
  Var projected = g.add_row_bias(g.matmul(x, p.w_input), p.bias);
  Var h = g.constant(Tensor({hidden}));
  Var c = g.constant(Tensor({hidden}));
  DirectionResult result;
  result.states.resize(length);
  for (std::size_t step = 0; step < length; ++step) {
    const std::size_t t = reverse ? length - 1 - step : step;
    Var gates = g.add(g.row(projected, t), g.matmul(h, p.w_recurrent));
    Var in_gate = g.sigmoid(g.slice_cols(gates, 0, hidden));
    Var forget_gate = g.sigmoid(g.slice_cols(gates, hidden, hidden));
    Var candidate = g.tanh(g.slice_cols(gates, 2 * hidden, hidden));
    Var out_gate = g.sigmoid(g.slice_cols(gates, 3 * hidden, hidden));
    c = g.add(g.mul(forget_gate, c), g.mul(in_gate, candidate));
    h = g.mul(out_gate, g.tanh(c));
    result.states[t] = h;
  }
  return result;
}

}  // namespace

LstmOutput lstm_forward(Graph& g, Var x, std::span<const LstmLayer> layers) {
  const std::size_t length = g.shape(x).at(0);
  if (length == 0) throw Error(ErrorCode::kSequenceTooShort, "LSTM over an empty sequence");
  if (layers.empty()) throw Error(ErrorCode::kShapeMismatch, "LSTM needs at least one layer");
  Var current = x;
  LstmOutput out{};
  for (const LstmLayer& layer : layers) {
    DirectionResult fwd = run_direction(g, current, layer.forward, false);
    Var fwd_rows = g.stack_rows(fwd.states);
    if (layer.backward) {
      DirectionResult bwd = run_direction(g, current, *layer.backward, true);
      Var bwd_rows = g.stack_rows(bwd.states);
      const Var cols[] = {fwd_rows, bwd_rows};
      current = g.concat_cols(cols);
      const Var ends[] = {fwd.states.back(), bwd.states.front()};
      out.final = g.concat(ends);
    } else {
      current = fwd_rows;
      out.final = fwd.states.back();
    }
  }
  out.outputs = current;
  return out;
}

AttentionOutput self_attention_block(Graph& g, Var x, const AttentionParams& p,
                                     std::size_t heads) {
  const Shape xs = g.shape(x);
  const std::size_t dim = xs.at(1);
  if (heads == 0 || dim % heads != 0) {
    throw Error(ErrorCode::kHeadMismatch,
                "model width " + std::to_string(dim) + " not divisible by " +
                    std::to_string(heads) + " heads");
  }
  const std::size_t head_dim = dim / heads;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(head_dim));

  Var q = g.add_row_bias(g.matmul(x, p.w_query), p.b_query);
  Var k = g.add_row_bias(g.matmul(x, p.w_key), p.b_key);
  Var v = g.add_row_bias(g.matmul(x, p.w_value), p.b_value);

  AttentionOutput out;
  std::vector<Var> contexts;
  for (std::size_t h = 0; h < heads; ++h) {
    Var qh = g.slice_cols(q, h * head_dim, head_dim);
    Var kh = g.slice_cols(k, h * head_dim, head_dim);
    Var vh = g.slice_cols(v, h * head_dim, head_dim);
    Var weights = g.softmax_rows(g.scale(g.matmul(qh, kh, /*transpose_b=*/true), inv_scale));
    out.attention.push_back(weights);
    contexts.push_back(g.matmul(weights, vh));
  }
  Var context = g.concat_cols(contexts);
  Var attended = g.add_row_bias(g.matmul(context, p.w_out), p.b_out);
  Var h1 = g.layer_norm_rows(g.add(x, attended), p.norm1_gain, p.norm1_bias);
  Var ff = g.relu(g.add_row_bias(g.matmul(h1, p.w_ff1), p.b_ff1));
  ff = g.add_row_bias(g.matmul(ff, p.w_ff2), p.b_ff2);
  out.output = g.layer_norm_rows(g.add(h1, ff), p.norm2_gain, p.norm2_bias);
  return out;
}

Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                              double eps) {
  if (!(eps > 0.0)) throw Error(ErrorCode::kBadConfig, "finite difference step must be positive");
  Tensor grad(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double original = probe[i];
    probe[i] = original + eps;
    const double up = f(probe);
    probe[i] = original - eps;
    const double down = f(probe);
    probe[i] = original;
    grad[i] = (up - down) / (2.0 * eps);
  }
  return grad;
}

}  // namespace xaidiag
