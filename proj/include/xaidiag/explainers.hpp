#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "xaidiag/data.hpp"
#include "xaidiag/models.hpp"

namespace xaidiag {

/// Per-class, per-token attribution scores for one instance under one
/// explainer and one model. Rows are classes, columns are tokens.
struct SaliencyMap {
  std::string instance_id;
  std::string explainer;
  std::string model_id;
  std::vector<std::vector<double>> scores;
  // Every class row is produced, so consumers pick the gold or predicted row
  // themselves; the field records that choice as "all".
  std::string target_class_used = "all";
  std::uint64_t flops = 0;
  std::string corpus_hash;

  std::size_t num_classes() const noexcept { return scores.size(); }
  std::size_t num_tokens() const noexcept { return scores.empty() ? 0 : scores.front().size(); }
  bool operator==(const SaliencyMap&) const = default;
};

enum class ExplainerKind {
  kSaliency,
  kInputXGrad,
  kGuidedBp,
  kOcclusion,
  kShapSampl,
  kLime,
  kRandom,
  // Copies the gold rationale into every class row; an upper-bound fixture.
  kGoldMask,
};
enum class Aggregation { kMean, kL2, kNone };
// Which model output a perturbation explainer queries.
enum class ModelOutput { kLogit, kProbability };

struct ExplainerSpec {
  ExplainerKind kind = ExplainerKind::kRandom;
  Aggregation aggregation = Aggregation::kNone;
  std::size_t shapley_samples = 100;
  std::size_t lime_samples = 500;
  double lime_kernel_width = 0.75;
  double lime_ridge = 1e-3;
  ModelOutput shapley_output = ModelOutput::kLogit;
  ModelOutput lime_output = ModelOutput::kProbability;
  std::uint64_t seed = 0;

  /// Stable identifier such as "saliency_l2", "shap_sampl" or "random".
  std::string id() const;
  /// Throws BadConfig for aggregation on a non-gradient kind, a missing
  /// aggregation on a gradient kind, or non-positive sample counts.
  void validate() const;

  static ExplainerSpec from_id(std::string_view id, std::uint64_t seed = 0);
};

/// The nine technique variants followed by the random baseline.
std::vector<std::string> default_explainer_ids();

bool is_gradient_kind(ExplainerKind kind);

/// Seed of the per-instance RNG stream, so results do not depend on the order
/// in which instances are processed.
std::uint64_t instance_seed(std::uint64_t seed, std::string_view instance_id);

enum class GradVariant { kSaliency, kInputXGrad, kGuidedBp };

/// Per-token embedding-space gradient rows `[L][d]` of logit `target_class`.
std::vector<std::vector<double>> grad_saliency(const Model& model,
                                               std::span<const std::size_t> ids,
                                               std::size_t target_class, GradVariant variant,
                                               std::uint64_t* flops = nullptr);

/// Gradient rows for every class from one forward pass, `[class][L][d]`.
std::vector<std::vector<std::vector<double>>> grad_saliency_all(
    const Model& model, std::span<const std::size_t> ids, GradVariant variant,
    std::uint64_t* flops = nullptr);

/// Reduces each row to its arithmetic mean (kMean) or Euclidean norm (kL2).
std::vector<double> aggregate(const std::vector<std::vector<double>>& rows, Aggregation mode);

/// Outputs for every class given a keep-mask over tokens (1 = present,
/// 0 = removed).
using CoalitionValue = std::function<std::vector<double>(std::span<const std::uint8_t> keep)>;

/// Coalition values of `model` on `ids`, where a removed token's embedding row
/// is replaced by zeros. Forward-pass FLOPs are added to `flops`.
CoalitionValue model_coalition_value(const Model& model, std::span<const std::size_t> ids,
                                     ModelOutput output, std::uint64_t* flops = nullptr);

/// score[c][j] = f(all)[c] - f(all but j)[c]; L + 1 evaluations.
std::vector<std::vector<double>> occlusion(const CoalitionValue& f, std::size_t num_tokens);
std::vector<double> occlusion(const Model& model, std::span<const std::size_t> ids,
                              std::size_t target_class, std::uint64_t* flops = nullptr);

/// Mean marginal contribution of every token over the given token orders.
/// With all L! orders this is the exact Shapley value.
std::vector<std::vector<double>> shapley_from_permutations(
    const CoalitionValue& f, std::size_t num_tokens,
    const std::vector<std::vector<std::size_t>>& permutations);

/// Permutation-sampling Shapley estimate over `samples` uniform random orders.
std::vector<std::vector<double>> shapley_sampling(const CoalitionValue& f, std::size_t num_tokens,
                                                  std::size_t samples, std::uint64_t seed);
std::vector<double> shapley_sampling(const Model& model, std::span<const std::size_t> ids,
                                     std::size_t target_class, std::size_t samples,
                                     std::uint64_t seed, std::uint64_t* flops = nullptr);

struct LimeOptions {
  std::size_t samples = 500;
  double kernel_width = 0.75;
  double ridge = 1e-3;
};

/// Weighted ridge regression of f on random keep-masks (keep probability 0.5,
/// the all-ones mask always first) with weights
/// exp(-(1 - cos(mask, 1))^2 / width^2). The intercept is not penalized.
/// Returns the token coefficients per class. Throws BadConfig when samples
/// < L + 2 and SingularFit when the normal equations cannot be solved.
std::vector<std::vector<double>> lime(const CoalitionValue& f, std::size_t num_tokens,
                                      const LimeOptions& options, std::uint64_t seed);
std::vector<double> lime(const Model& model, std::span<const std::size_t> ids,
                         std::size_t target_class, const LimeOptions& options,
                         std::uint64_t seed, std::uint64_t* flops = nullptr);

/// I.i.d. uniform [0, 1) scores, `[classes][L]`.
std::vector<std::vector<double>> random_saliency(std::size_t num_tokens, std::size_t num_classes,
                                                 std::uint64_t seed);

/// Full map for every class of `model`.
SaliencyMap explain(const Model& model, const Instance& instance, const ExplainerSpec& spec,
                    std::string model_id = {});

nlohmann::json to_json(const SaliencyMap& map);
SaliencyMap saliency_map_from_json(const nlohmann::json& j);

void write_saliency_jsonl(const std::filesystem::path& path, const std::vector<SaliencyMap>& maps);
std::vector<SaliencyMap> read_saliency_jsonl(const std::filesystem::path& path);

}  // namespace xaidiag
