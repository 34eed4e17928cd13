#include "xaidiag/models.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "xaidiag/error.hpp"
#include "xaidiag/layers.hpp"

namespace xaidiag {

using nlohmann::json;

std::string_view to_string(Architecture arch) {
  switch (arch) {
    case Architecture::kCnn: return "cnn";
    case Architecture::kLstm: return "lstm";
    case Architecture::kTransformer: return "transformer";
    case Architecture::kBagOfEmbeddings: return "bag";
  }
  return "unknown";
}

Architecture architecture_from_string(std::string_view name) {
  for (Architecture a : {Architecture::kCnn, Architecture::kLstm, Architecture::kTransformer,
                         Architecture::kBagOfEmbeddings}) {
    if (to_string(a) == name) return a;
  }
  throw Error(ErrorCode::kBadConfig, "unknown architecture '" + std::string(name) + "'");
}

ModelConfig ModelConfig::defaults(Architecture arch, std::size_t vocab_size,
                                  std::size_t num_classes) {
  ModelConfig c;
  c.architecture = arch;
  c.vocab_size = vocab_size;
  c.num_classes = num_classes;
  switch (arch) {
    case Architecture::kCnn:
      c.embed_dim = 32;
      c.learning_rate = 3e-3;
      break;
    case Architecture::kLstm:
      c.embed_dim = 32;
      c.hidden = 32;
      c.dropout = 0.05;
      c.learning_rate = 3e-3;
      break;
    case Architecture::kTransformer:
      c.embed_dim = 64;
      c.learning_rate = 1e-3;
      c.dropout = 0.0;
      c.patience = 3;
      break;
    case Architecture::kBagOfEmbeddings:
      c.embed_dim = 16;
      c.learning_rate = 1e-2;
      c.dropout = 0.0;
      break;
  }
  return c;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorCode::kBadConfig, what); };
  if (vocab_size <= kReservedTokens) fail("vocab_size must exceed the reserved tokens");
  if (embed_dim == 0) fail("embed_dim must be positive");
  if (num_classes < 2) fail("num_classes must be >= 2");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must be in [0, 1)");
  if (!(learning_rate > 0.0)) fail("learning_rate must be positive");
  if (batch_size == 0 || max_epochs == 0) fail("batch_size and max_epochs must be positive");
  switch (architecture) {
    case Architecture::kCnn:
      if (windows.empty() || channels == 0) fail("CNN needs windows and channels");
      for (std::size_t w : windows) {
        if (w == 0) fail("CNN window sizes must be positive");
      }
      break;
    case Architecture::kLstm:
      if (lstm_layers == 0 || hidden == 0) fail("LSTM needs layers and hidden size");
      for (std::size_t s : linear_sizes) {
        if (s == 0) fail("LSTM linear sizes must be positive");
      }
      break;
    case Architecture::kTransformer:
      if (transformer_layers == 0 || ffn_dim == 0 || max_positions == 0) {
        fail("transformer needs layers, ffn_dim and max_positions");
      }
      if (heads == 0 || embed_dim % heads != 0) {
        throw Error(ErrorCode::kHeadMismatch, "embed_dim must be divisible by heads");
      }
      break;
    case Architecture::kBagOfEmbeddings:
      break;
  }
}

json to_json(const ModelConfig& c) {
  return json{{"architecture", std::string(to_string(c.architecture))},
              {"vocab_size", c.vocab_size},
              {"embed_dim", c.embed_dim},
              {"num_classes", c.num_classes},
              {"windows", c.windows},
              {"channels", c.channels},
              {"lstm_layers", c.lstm_layers},
              {"hidden", c.hidden},
              {"bidirectional", c.bidirectional},
              {"linear_sizes", c.linear_sizes},
              {"transformer_layers", c.transformer_layers},
              {"heads", c.heads},
              {"ffn_dim", c.ffn_dim},
              {"max_positions", c.max_positions},
              {"dropout", c.dropout},
              {"learning_rate", c.learning_rate},
              {"batch_size", c.batch_size},
              {"max_epochs", c.max_epochs},
              {"patience", c.patience}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  try {
    c.architecture = architecture_from_string(j.at("architecture").get<std::string>());
    c = ModelConfig::defaults(c.architecture, j.value("vocab_size", std::size_t{0}),
                              j.value("num_classes", std::size_t{2}));
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.windows = j.value("windows", c.windows);
    c.channels = j.value("channels", c.channels);
    c.lstm_layers = j.value("lstm_layers", c.lstm_layers);
    c.hidden = j.value("hidden", c.hidden);
    c.bidirectional = j.value("bidirectional", c.bidirectional);
    c.linear_sizes = j.value("linear_sizes", c.linear_sizes);
    c.transformer_layers = j.value("transformer_layers", c.transformer_layers);
    c.heads = j.value("heads", c.heads);
    c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
    c.max_positions = j.value("max_positions", c.max_positions);
    c.dropout = j.value("dropout", c.dropout);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.patience = j.value("patience", c.patience);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kBadConfig, std::string("model config: ") + e.what());
  }
  return c;
}

std::vector<double> ActivationSummary::flattened() const {
  std::vector<double> out;
  for (const auto& layer : layers) out.insert(out.end(), layer.begin(), layer.end());
  return out;
}

bool ActivationSummary::same_shape(const ActivationSummary& other) const {
  if (layers.size() != other.layers.size()) return false;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    if (layers[l].size() != other.layers[l].size()) return false;
  }
  return true;
}

double activation_distance(const ActivationSummary& a, const ActivationSummary& b,
                           ActivationDistance mode) {
  if (!a.same_shape(b)) throw Error(ErrorCode::kShapeMismatch, "activation summary shapes");
  double total = 0.0;
  std::size_t count = 0;
  double layer_mean_sum = 0.0;
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    double layer_total = 0.0;
    for (std::size_t i = 0; i < a.layers[l].size(); ++i) {
      layer_total += std::abs(a.layers[l][i] - b.layers[l][i]);
    }
    total += layer_total;
    count += a.layers[l].size();
    if (!a.layers[l].empty()) layer_mean_sum += layer_total / static_cast<double>(a.layers[l].size());
  }
  if (mode == ActivationDistance::kGlobalMean) {
    return count == 0 ? 0.0 : total / static_cast<double>(count);
  }
  return a.layers.empty() ? 0.0 : layer_mean_sum / static_cast<double>(a.layers.size());
}

// ---------------------------------------------------------------------------
// Architectures

namespace {

void fill_xavier(Tensor& t, std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  for (double& v : t.data()) v = dist(rng);
}

void fill_matrix(Tensor& t, std::mt19937_64& rng) { fill_xavier(t, t.shape()[0], t.shape()[1], rng); }

void fill_normal(Tensor& t, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t.data()) v = dist(rng);
}

void fill_ones(Tensor& t) { std::fill(t.data().begin(), t.data().end(), 1.0); }

void fill_embedding(Tensor& table, std::mt19937_64& rng) {
  fill_normal(table, 1.0, rng);
  const std::size_t dim = table.shape()[1];
  for (std::size_t row : {kPadId, kMaskId}) {
    std::fill_n(table.data().begin() + static_cast<std::ptrdiff_t>(row * dim), dim, 0.0);
  }
}

Var linear(Graph& g, Var x, Var w, Var b) { return g.add_row_bias(g.matmul(x, w), b); }

class BagModel final : public Model {
 public:
  BagModel(const ModelConfig& config, std::mt19937_64& rng) : Model(config) {
    fill_embedding(declare("embedding", {config.vocab_size, config.embed_dim}), rng);
    fill_matrix(declare("out.weight", {config.embed_dim, config.num_classes}), rng);
    declare("out.bias", {config.num_classes});
  }

  std::unique_ptr<Model> clone() const override { return std::make_unique<BagModel>(*this); }

  ForwardResult forward(Graph& g, std::span<const Var> p, Var x,
                        std::mt19937_64* /*dropout_rng*/) const override {
    const double length = static_cast<double>(g.shape(x).at(0));
    Var pooled = g.scale(g.mean_rows(x), length);
    Var logits = linear(g, pooled, p[1], p[2]);
    return {logits, {pooled, logits}};
  }
};

class CnnModel final : public Model {
 public:
  CnnModel(const ModelConfig& config, std::mt19937_64& rng) : Model(config) {
    fill_embedding(declare("embedding", {config.vocab_size, config.embed_dim}), rng);
    for (std::size_t w : config.windows) {
      const std::string name = "conv" + std::to_string(w);
      fill_xavier(declare(name + ".weight", {w * config.embed_dim, config.channels}),
                  w * config.embed_dim, config.channels, rng);
      declare(name + ".bias", {config.channels});
    }
    const std::size_t pooled = config.channels * config.windows.size();
    fill_matrix(declare("out.weight", {pooled, config.num_classes}), rng);
    declare("out.bias", {config.num_classes});
  }

  std::unique_ptr<Model> clone() const override { return std::make_unique<CnnModel>(*this); }

  ForwardResult forward(Graph& g, std::span<const Var> p, Var x,
                        std::mt19937_64* dropout_rng) const override {
    const std::size_t widest = *std::max_element(config_.windows.begin(), config_.windows.end());
    const std::size_t length = g.shape(x).at(0);
    const std::size_t dim = config_.embed_dim;
    if (length < widest) {
      // Zero rows, as with a PAD token, keep short inputs valid for every window.
      Var parts[] = {g.reshape(x, {length * dim}),
                     g.constant(Tensor({(widest - length) * dim}))};
      x = g.reshape(g.concat(parts), {widest, dim});
    }
    x = dropout(g, x, config_.dropout, dropout_rng);
    std::vector<ConvKernel> kernels;
    for (std::size_t i = 0; i < config_.windows.size(); ++i) {
      kernels.push_back({config_.windows[i], p[1 + 2 * i], p[2 + 2 * i]});
    }
    Var pooled = conv1d_maxpool(g, x, kernels);
    Var hidden = dropout(g, pooled, config_.dropout, dropout_rng);
    const std::size_t out = 1 + 2 * config_.windows.size();
    Var logits = linear(g, hidden, p[out], p[out + 1]);
    return {logits, {pooled, logits}};
  }
};

class LstmModel final : public Model {
 public:
  LstmModel(const ModelConfig& config, std::mt19937_64& rng) : Model(config) {
    fill_embedding(declare("embedding", {config.vocab_size, config.embed_dim}), rng);
    const std::size_t h = config.hidden;
    const std::size_t directions = config.bidirectional ? 2 : 1;
    std::size_t input = config.embed_dim;
    for (std::size_t l = 0; l < config.lstm_layers; ++l) {
      for (std::size_t d = 0; d < directions; ++d) {
        const std::string name = "lstm" + std::to_string(l) + (d == 0 ? ".fwd" : ".bwd");
        fill_xavier(declare(name + ".w_input", {input, 4 * h}), input, h, rng);
        fill_xavier(declare(name + ".w_recurrent", {h, 4 * h}), h, h, rng);
        declare(name + ".bias", {4 * h});
      }
      input = h * directions;
    }
    for (std::size_t i = 0; i < config.linear_sizes.size(); ++i) {
      const std::string name = "linear" + std::to_string(i);
      fill_matrix(declare(name + ".weight", {input, config.linear_sizes[i]}), rng);
      declare(name + ".bias", {config.linear_sizes[i]});
      input = config.linear_sizes[i];
    }
    fill_matrix(declare("out.weight", {input, config.num_classes}), rng);
    declare("out.bias", {config.num_classes});
  }

  std::unique_ptr<Model> clone() const override { return std::make_unique<LstmModel>(*this); }

  ForwardResult forward(Graph& g, std::span<const Var> p, Var x,
                        std::mt19937_64* dropout_rng) const override {
    std::size_t next = 1;
    std::vector<LstmLayer> layers;
    for (std::size_t l = 0; l < config_.lstm_layers; ++l) {
      LstmLayer layer;
      layer.forward = {p[next], p[next + 1], p[next + 2]};
      next += 3;
      if (config_.bidirectional) {
        layer.backward = LstmDirection{p[next], p[next + 1], p[next + 2]};
        next += 3;
      }
      layers.push_back(layer);
    }
    LstmOutput recurrent = lstm_forward(g, x, layers);
    Var h = recurrent.final;
    for (std::size_t i = 0; i < config_.linear_sizes.size(); ++i) {
      h = g.relu(linear(g, h, p[next], p[next + 1]));
      next += 2;
    }
    h = dropout(g, h, config_.dropout, dropout_rng);
    Var logits = linear(g, h, p[next], p[next + 1]);
    return {logits, {recurrent.final}};
  }
};

class TransformerModel final : public Model {
 public:
  TransformerModel(const ModelConfig& config, std::mt19937_64& rng) : Model(config) {
    const std::size_t d = config.embed_dim;
    fill_embedding(declare("embedding", {config.vocab_size, d}), rng);
    fill_normal(declare("positions", {config.max_positions, d}), 0.1, rng);
    for (std::size_t l = 0; l < config.transformer_layers; ++l) {
      const std::string name = "block" + std::to_string(l);
      for (const char* proj : {".query", ".key", ".value", ".attn_out"}) {
        fill_matrix(declare(name + proj + ".weight", {d, d}), rng);
        declare(name + proj + ".bias", {d});
      }
      fill_ones(declare(name + ".norm1.gain", {d}));
      declare(name + ".norm1.bias", {d});
      fill_matrix(declare(name + ".ff1.weight", {d, config.ffn_dim}), rng);
      declare(name + ".ff1.bias", {config.ffn_dim});
      fill_matrix(declare(name + ".ff2.weight", {config.ffn_dim, d}), rng);
      declare(name + ".ff2.bias", {d});
      fill_ones(declare(name + ".norm2.gain", {d}));
      declare(name + ".norm2.bias", {d});
    }
    fill_matrix(declare("out.weight", {d, config.num_classes}), rng);
    declare("out.bias", {config.num_classes});
  }

  std::unique_ptr<Model> clone() const override {
    return std::make_unique<TransformerModel>(*this);
  }

  ForwardResult forward(Graph& g, std::span<const Var> p, Var x,
                        std::mt19937_64* dropout_rng) const override {
    const std::size_t length = g.shape(x).at(0);
    if (length > config_.max_positions) {
      throw Error(ErrorCode::kShapeMismatch, "sequence length " + std::to_string(length) +
                                                 " exceeds max_positions " +
                                                 std::to_string(config_.max_positions));
    }
    std::vector<std::size_t> positions(length);
    std::iota(positions.begin(), positions.end(), 0);
    x = g.add(x, g.embedding_lookup(p[1], positions));
    x = dropout(g, x, config_.dropout, dropout_rng);
    ForwardResult result;
    std::size_t next = 2;
    for (std::size_t l = 0; l < config_.transformer_layers; ++l) {
      AttentionParams ap{p[next],      p[next + 1],  p[next + 2],  p[next + 3],
                         p[next + 4],  p[next + 5],  p[next + 6],  p[next + 7],
                         p[next + 8],  p[next + 9],  p[next + 10], p[next + 11],
                         p[next + 12], p[next + 13], p[next + 14], p[next + 15]};
      next += 16;
      x = self_attention_block(g, x, ap, config_.heads).output;
      result.activations.push_back(g.mean_rows(x));
    }
    Var first = g.row(x, 0);
    result.activations.push_back(first);
    first = dropout(g, first, config_.dropout, dropout_rng);
    result.logits = linear(g, first, p[next], p[next + 1]);
    return result;
  }
};

}  // namespace

Tensor& Model::declare(std::string name, Shape shape) {
  names_.push_back(std::move(name));
  params_.emplace_back(std::move(shape));
  return params_.back();
}

std::unique_ptr<Model> Model::create(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  switch (config.architecture) {
    case Architecture::kCnn: return std::make_unique<CnnModel>(config, rng);
    case Architecture::kLstm: return std::make_unique<LstmModel>(config, rng);
    case Architecture::kTransformer: return std::make_unique<TransformerModel>(config, rng);
    case Architecture::kBagOfEmbeddings: return std::make_unique<BagModel>(config, rng);
  }
  throw Error(ErrorCode::kBadConfig, "unknown architecture");
}

std::unique_ptr<Model> init_random(const ModelConfig& config, std::uint64_t seed) {
  return Model::create(config, seed);
}

std::vector<Var> Model::bind(Graph& g) const {
  std::vector<Var> vars;
  vars.reserve(params_.size());
  for (const Tensor& t : params_) vars.push_back(g.input(t));
  return vars;
}

std::vector<Var> Model::bind_trainable(Graph& g) {
  std::vector<Var> vars;
  vars.reserve(params_.size());
  for (Tensor& t : params_) vars.push_back(g.variable(t));
  return vars;
}

Tensor Model::embed(std::span<const std::size_t> ids) const {
  const Tensor& table = embedding_table();
  const std::size_t vocab = table.shape()[0];
  const std::size_t dim = table.shape()[1];
  Tensor out({ids.size(), dim});
  for (std::size_t j = 0; j < ids.size(); ++j) {
    if (ids[j] >= vocab) {
      throw Error(ErrorCode::kIndexOutOfVocab, "token id " + std::to_string(ids[j]));
    }
    std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>(ids[j] * dim), dim,
                out.data().begin() + static_cast<std::ptrdiff_t>(j * dim));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Inference

std::size_t argmax(std::span<const double> values) {
  return static_cast<std::size_t>(std::max_element(values.begin(), values.end()) -
                                  values.begin());
}

namespace {

std::vector<double> softmax(std::span<const double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    total += out[i];
  }
  for (double& v : out) v /= total;
  return out;
}

Prediction collect(const Graph& g, const ForwardResult& fr) {
  Prediction out;
  auto logits = g.value(fr.logits);
  out.logits.assign(logits.begin(), logits.end());
  out.probs = softmax(out.logits);
  out.label = argmax(out.logits);
  for (Var a : fr.activations) {
    auto v = g.value(a);
    out.activations.layers.emplace_back(v.begin(), v.end());
  }
  return out;
}

}  // namespace

Prediction predict(const Model& model, std::span<const std::size_t> ids) {
  if (ids.empty()) throw Error(ErrorCode::kEmptyInstance, "cannot predict an empty instance");
  Graph g;
  std::vector<Var> params = model.bind(g);
  Var emb = g.embedding_lookup(params[0], ids);
  return collect(g, model.forward(g, params, emb, nullptr));
}

Prediction predict_embeddings(const Model& model, const Tensor& embeddings,
                              std::uint64_t* flops) {
  if (embeddings.rows() == 0 || embeddings.rank() != 2) {
    throw Error(ErrorCode::kEmptyInstance, "cannot predict an empty instance");
  }
  Graph g;
  std::vector<Var> params = model.bind(g);
  Var emb = g.input(embeddings);
  Prediction out = collect(g, model.forward(g, params, emb, nullptr));
  if (flops != nullptr) *flops += g.flops();
  return out;
}

double macro_f1(std::span<const std::size_t> preds, std::span<const std::size_t> golds,
                std::size_t num_classes) {
  if (preds.size() != golds.size()) {
    throw Error(ErrorCode::kLengthMismatch, "predictions and gold labels differ in length");
  }
  if (preds.empty()) throw Error(ErrorCode::kLengthMismatch, "macro F1 of nothing");
  if (num_classes == 0) {
    num_classes = 1 + std::max(*std::max_element(preds.begin(), preds.end()),
                               *std::max_element(golds.begin(), golds.end()));
  }
  std::vector<double> tp(num_classes), fp(num_classes), fn(num_classes);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] == golds[i]) {
      tp[preds[i]] += 1;
    } else {
      fp[preds[i]] += 1;
      fn[golds[i]] += 1;
    }
  }
  double total = 0.0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (tp[c] == 0) continue;
    const double precision = tp[c] / (tp[c] + fp[c]);
    const double recall = tp[c] / (tp[c] + fn[c]);
    total += 2.0 * precision * recall / (precision + recall);
  }
  return total / static_cast<double>(num_classes);
}

double evaluate_macro_f1(const Model& model, const std::vector<Instance>& instances) {
  std::vector<std::size_t> preds;
  std::vector<std::size_t> golds;
  for (const Instance& inst : instances) {
    preds.push_back(predict(model, inst.token_ids).label);
    golds.push_back(inst.label);
  }
  return macro_f1(preds, golds, model.config().num_classes);
}

// ---------------------------------------------------------------------------
// Training

TrainResult train_model(const ModelConfig& config, const std::vector<Instance>& train,
                        const std::vector<Instance>& dev, std::uint64_t seed) {
  config.validate();
  if (train.empty() || dev.empty()) {
    throw Error(ErrorCode::kBadConfig, "training needs non-empty train and dev sets");
  }
  for (const auto* part : {&train, &dev}) {
    for (const Instance& inst : *part) {
      if (inst.label >= config.num_classes) {
        throw Error(ErrorCode::kUnknownLabel, "label " + std::to_string(inst.label) +
                                                  " outside class count for " + inst.id);
      }
    }
  }

  TrainResult result;
  result.model = Model::create(config, seed);
  Model& model = *result.model;
  auto& params = model.parameters();
  for (Tensor& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }

  constexpr double kBeta1 = 0.9;
  constexpr double kBeta2 = 0.999;
  constexpr double kEps = 1e-8;
  std::vector<std::vector<double>> m1(params.size());
  std::vector<std::vector<double>> m2(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    m1[i].assign(params[i].size(), 0.0);
    m2[i].assign(params[i].size(), 0.0);
  }
  std::uint64_t step = 0;

  std::mt19937_64 rng(seed ^ 0xD1B54A32D192ED03ULL);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  std::vector<Tensor> best = params;
  double best_f1 = -1.0;

  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t stop = std::min(order.size(), start + config.batch_size);
      const double inv_batch = 1.0 / static_cast<double>(stop - start);
      for (std::size_t k = start; k < stop; ++k) {
        const Instance& inst = train[order[k]];
        if (inst.token_ids.empty()) {
          throw Error(ErrorCode::kEmptyInstance, "empty training instance " + inst.id);
        }
        Graph g;
        std::vector<Var> vars = model.bind_trainable(g);
        Var emb = g.embedding_lookup(vars[0], inst.token_ids);
        ForwardResult fr = model.forward(g, vars, emb, &rng);
        Var loss = g.scale(g.cross_entropy(fr.logits, inst.label), inv_batch);
        if (!std::isfinite(g.scalar(loss))) {
          throw Error(ErrorCode::kDiverged, "non-finite loss at epoch " + std::to_string(epoch));
        }
        g.backward(loss);
      }
      ++step;
      const double correction1 = 1.0 - std::pow(kBeta1, static_cast<double>(step));
      const double correction2 = 1.0 - std::pow(kBeta2, static_cast<double>(step));
      for (std::size_t i = 0; i < params.size(); ++i) {
        auto grad = params[i].mutable_grad();
        auto data = params[i].data();
        for (std::size_t k = 0; k < data.size(); ++k) {
          m1[i][k] = kBeta1 * m1[i][k] + (1.0 - kBeta1) * grad[k];
          m2[i][k] = kBeta2 * m2[i][k] + (1.0 - kBeta2) * grad[k] * grad[k];
          data[k] -= config.learning_rate * (m1[i][k] / correction1) /
                     (std::sqrt(m2[i][k] / correction2) + kEps);
          grad[k] = 0.0;
        }
      }
    }
    const double f1 = evaluate_macro_f1(model, dev);
    result.dev_f1_history.push_back(f1);
    result.epochs_run = epoch;
    if (f1 > best_f1) {
      best_f1 = f1;
      best = params;
      result.best_epoch = epoch;
    } else if (epoch - result.best_epoch >= config.patience) {
      break;
    }
  }

  for (std::size_t i = 0; i < params.size(); ++i) {
    params[i] = std::move(best[i]);
    params[i].set_requires_grad(false);
    params[i].clear_grad();
  }
  result.best_dev_f1 = best_f1;
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'X', 'A', 'I', 'D', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

void write_u64(std::ostream& out, std::uint64_t v) {
  char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(bytes, 8);
}

void write_u32(std::ostream& out, std::uint32_t v) {
  char bytes[4];
  for (int i = 0; i < 4; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(bytes, 4);
}

std::uint64_t read_uint(std::istream& in, int width) {
  unsigned char bytes[8] = {};
  in.read(reinterpret_cast<char*>(bytes), width);
  if (!in) throw Error(ErrorCode::kParseError, "truncated checkpoint");
  std::uint64_t v = 0;
  for (int i = width - 1; i >= 0; --i) v = (v << 8) | bytes[i];
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Model& model,
                     const json& metadata) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  json header{{"config", to_json(model.config())}, {"metadata", metadata}};
  json shapes = json::array();
  for (std::size_t i = 0; i < model.parameters().size(); ++i) {
    shapes.push_back({{"name", model.parameter_names()[i]},
                      {"shape", model.parameters()[i].shape()}});
  }
  header["parameters"] = std::move(shapes);
  const std::string text = header.dump();
  out.write(kMagic, sizeof(kMagic));
  write_u32(out, kCheckpointVersion);
  write_u64(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  write_u64(out, model.parameters().size());
  for (const Tensor& t : model.parameters()) {
    write_u64(out, t.size());
    for (double v : t.data()) write_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  if (!out) throw Error(ErrorCode::kIo, "failed writing " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kMissingCheckpoint, path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || !std::equal(magic, magic + 8, kMagic)) {
    throw Error(ErrorCode::kParseError, "not a checkpoint: " + path.string());
  }
  const auto version = read_uint(in, 4);
  if (version != kCheckpointVersion) {
    throw Error(ErrorCode::kParseError, "unsupported checkpoint version " + std::to_string(version));
  }
  const auto header_len = read_uint(in, 8);
  std::string text(header_len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw Error(ErrorCode::kParseError, "truncated checkpoint header");
  json header;
  try {
    header = json::parse(text);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::kParseError, std::string("checkpoint header: ") + e.what());
  }
  Checkpoint ckpt;
  ckpt.model = Model::create(model_config_from_json(header.at("config")), 0);
  ckpt.metadata = header.value("metadata", json::object());
  auto& params = ckpt.model->parameters();
  const auto blocks = read_uint(in, 8);
  if (blocks != params.size()) throw Error(ErrorCode::kParseError, "parameter block count");
  for (Tensor& t : params) {
    const auto count = read_uint(in, 8);
    if (count != t.size()) throw Error(ErrorCode::kParseError, "parameter block size");
    for (double& v : t.data()) v = std::bit_cast<double>(read_uint(in, 8));
  }
  return ckpt;
}

}  // namespace xaidiag
