#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "xaidiag/data.hpp"
#include "xaidiag/graph.hpp"
#include "xaidiag/tensor.hpp"

namespace xaidiag {

enum class Architecture {
  kCnn,
  kLstm,
  kTransformer,
  // Sum of token embeddings followed by one linear layer. Exact closed forms
  // exist for every explainer on it, which makes it the reference fixture.
  kBagOfEmbeddings,
};

std::string_view to_string(Architecture arch);
Architecture architecture_from_string(std::string_view name);

struct ModelConfig {
  Architecture architecture = Architecture::kCnn;
  std::size_t vocab_size = 0;
  std::size_t embed_dim = 32;
  std::size_t num_classes = 2;

  // CNN
  std::vector<std::size_t> windows{2, 3, 4};
  std::size_t channels = 16;

  // LSTM
  std::size_t lstm_layers = 1;
  std::size_t hidden = 32;
  bool bidirectional = true;
  std::vector<std::size_t> linear_sizes{32, 16};

  // Transformer
  std::size_t transformer_layers = 2;
  std::size_t heads = 4;
  std::size_t ffn_dim = 128;
  std::size_t max_positions = 64;

  // Training
  double dropout = 0.05;
  double learning_rate = 1e-3;
  std::size_t batch_size = 16;
  std::size_t max_epochs = 30;
  std::size_t patience = 5;

  /// Desk-scale defaults per architecture.
  static ModelConfig defaults(Architecture arch, std::size_t vocab_size, std::size_t num_classes);

  /// Throws BadConfig on non-positive extents, dropout outside [0, 1) or
  /// fewer than two classes.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

/// Fixed-size per-layer activation vectors; sizes depend only on the config.
struct ActivationSummary {
  std::vector<std::vector<double>> layers;

  std::vector<double> flattened() const;
  bool same_shape(const ActivationSummary& other) const;
  bool operator==(const ActivationSummary&) const = default;
};

enum class ActivationDistance {
  // Mean |difference| within each layer, then the mean over layers.
  kPerLayerMean,
  // Mean |difference| over the concatenation of all layers.
  kGlobalMean,
};

double activation_distance(const ActivationSummary& a, const ActivationSummary& b,
                           ActivationDistance mode = ActivationDistance::kPerLayerMean);

struct ForwardResult {
  Var logits;
  std::vector<Var> activations;
};

class Model {
 public:
  virtual ~Model() = default;

  /// Parameters drawn from the architecture's initializer; used both as the
  /// training start and for random-init models.
  static std::unique_ptr<Model> create(const ModelConfig& config, std::uint64_t seed);

  virtual std::unique_ptr<Model> clone() const = 0;

  /// Builds the network on top of embedding rows `[L x d]`. `params` must
  /// come from `bind` or `bind_trainable` on the same graph. A non-null
  /// `dropout_rng` enables training-mode dropout.
  virtual ForwardResult forward(Graph& g, std::span<const Var> params, Var embeddings,
                                std::mt19937_64* dropout_rng) const = 0;

  const ModelConfig& config() const noexcept { return config_; }
  std::vector<Tensor>& parameters() noexcept { return params_; }
  const std::vector<Tensor>& parameters() const noexcept { return params_; }
  const std::vector<std::string>& parameter_names() const noexcept { return names_; }
  const Tensor& embedding_table() const { return params_.front(); }

  std::vector<Var> bind(Graph& g) const;
  std::vector<Var> bind_trainable(Graph& g);

  /// Embedding rows for `ids` as a standalone `[L x d]` tensor.
  Tensor embed(std::span<const std::size_t> ids) const;

 protected:
  explicit Model(ModelConfig config) : config_(std::move(config)) {}
  Model(const Model&) = default;

  Tensor& declare(std::string name, Shape shape);

  ModelConfig config_;
  std::vector<Tensor> params_;
  std::vector<std::string> names_;
};

struct Prediction {
  std::vector<double> logits;
  std::vector<double> probs;
  ActivationSummary activations;
  std::size_t label = 0;
};

/// Evaluation-mode forward pass. Throws EmptyInstance on an empty sequence.
Prediction predict(const Model& model, std::span<const std::size_t> ids);
/// Forward pass from precomputed embedding rows; adds the pass's FLOPs to
/// `flops` when non-null.
Prediction predict_embeddings(const Model& model, const Tensor& embeddings,
                              std::uint64_t* flops = nullptr);

std::size_t argmax(std::span<const double> values);

/// Unweighted mean of per-class F1 over `num_classes` classes (inferred from
/// the labels when zero). A class with no true positives scores 0.
double macro_f1(std::span<const std::size_t> preds, std::span<const std::size_t> golds,
                std::size_t num_classes = 0);

double evaluate_macro_f1(const Model& model, const std::vector<Instance>& instances);

struct TrainResult {
  std::unique_ptr<Model> model;
  std::size_t best_epoch = 0;  // 1-based; 0 means the initial parameters
  std::size_t epochs_run = 0;
  double best_dev_f1 = 0.0;
  std::vector<double> dev_f1_history;
};

/// Adam training with early stopping on dev macro-F1. Returns the snapshot
/// with the best dev score; bit-reproducible for fixed inputs and seed.
/// Throws Diverged when the loss turns non-finite.
TrainResult train_model(const ModelConfig& config, const std::vector<Instance>& train,
                        const std::vector<Instance>& dev, std::uint64_t seed);

std::unique_ptr<Model> init_random(const ModelConfig& config, std::uint64_t seed);

/// Binary checkpoint: magic "XAIDCKPT", u32 version, u64 header length, JSON
/// header (config plus caller metadata), u64 block count, then per parameter
/// a u64 element count and row-major little-endian f64 values in declaration
/// order.
void save_checkpoint(const std::filesystem::path& path, const Model& model,
                     const nlohmann::json& metadata = nlohmann::json::object());

struct Checkpoint {
  std::unique_ptr<Model> model;
  nlohmann::json metadata;
};

Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace xaidiag
