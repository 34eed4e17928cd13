#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "xaidiag/graph.hpp"

namespace xaidiag {

struct ConvKernel {
  std::size_t window = 1;
  Var weight;  // [(window * d) x channels]
  Var bias;    // [channels]
};

/// Convolutions over token windows, ReLU, then a global max over positions.
/// Returns the concatenation over kernels, [sum of channels].
Var conv1d_maxpool(Graph& g, Var x, std::span<const ConvKernel> kernels);

struct LstmDirection {
  Var w_input;      // [d_in x 4h], gate order: input, forget, candidate, output
  Var w_recurrent;  // [h x 4h]
  Var bias;         // [4h]
};

struct LstmLayer {
  LstmDirection forward;
  std::optional<LstmDirection> backward;  // present for bidirectional layers
};

struct LstmOutput {
  Var outputs;  // [L x h] or [L x 2h]
  Var final;    // last forward state, then first backward state when bidirectional
};

LstmOutput lstm_forward(Graph& g, Var x, std::span<const LstmLayer> layers);

struct AttentionParams {
  Var w_query, b_query;
  Var w_key, b_key;
  Var w_value, b_value;
  Var w_out, b_out;
  Var norm1_gain, norm1_bias;
  Var w_ff1, b_ff1;  // [d x ff], [ff]
  Var w_ff2, b_ff2;  // [ff x d], [d]
  Var norm2_gain, norm2_bias;
};

struct AttentionOutput {
  Var output;                   // [L x d]
  std::vector<Var> attention;   // per head, [L x L], rows sum to one
};

/// Post-norm transformer encoder block: multi-head scaled dot-product
/// attention and a ReLU feed-forward layer, each wrapped in a residual
/// connection followed by layer normalization.
AttentionOutput self_attention_block(Graph& g, Var x, const AttentionParams& p,
                                     std::size_t heads);

/// Central finite differences of a scalar function, one coordinate at a time.
Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                              double eps);

}  // namespace xaidiag
