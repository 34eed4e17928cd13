#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "xaidiag/data.hpp"
#include "xaidiag/explainers.hpp"
#include "xaidiag/models.hpp"

namespace xaidiag {

// ---------------------------------------------------------------------------
// Human agreement

struct HumanAgreement {
  double map = 0.0;
  std::size_t scored = 0;
  // Instances without a positive rationale token, left out of the mean.
  std::size_t skipped = 0;
};

/// Mean over instances of the average precision of the gold-class saliency
/// row against the gold rationale. Maps are matched by instance id; an
/// instance without a map throws LengthMismatch. Throws NoPositives when no
/// instance has a rationale.
HumanAgreement human_agreement(const std::vector<SaliencyMap>& maps,
                               const std::vector<Instance>& instances);

// ---------------------------------------------------------------------------
// Confidence indication

/// Features for predicting confidence from one map. With two classes:
/// {sum_j s[k][j] - s[other][j]}. Otherwise the per-token differences to every
/// other class are reduced to (max, min, mean) and each is summed over tokens.
std::vector<double> saliency_distance(const std::vector<std::vector<double>>& scores,
                                      std::size_t predicted);

struct ConfidenceResult {
  double mae = 0.0;
  double max_error = 0.0;
  // All confidences equal; the errors are those of predicting that constant.
  bool degenerate = false;
};

struct ConfidenceOptions {
  std::size_t folds = 5;
  bool upsample = false;
  double l2 = 1e-6;
  std::uint64_t seed = 0;
};

/// Decile bin of a confidence in [0, 1]; 1.0 falls into the last bin.
std::size_t confidence_decile(double confidence);

/// Training indices after resampling (with replacement) every non-empty
/// decile bin up to the size of the largest one. The original indices come
/// first, in order, so a balanced input is returned unchanged.
std::vector<std::size_t> upsample_deciles(std::span<const std::size_t> indices,
                                          std::span<const double> confidences,
                                          std::mt19937_64& rng);

/// Cross-validated logistic regression from saliency-distance features to
/// the predicted-class confidence. Features are standardized with training
/// fold statistics. Throws BadConfig with fewer than 50 instances.
ConfidenceResult confidence_indication(const std::vector<std::vector<double>>& features,
                                       std::span<const double> confidences,
                                       const ConfidenceOptions& options = {});

// ---------------------------------------------------------------------------
// Faithfulness

enum class FaithfulnessVariant {
  // Area under macro-F1 against the masking threshold; lower is better.
  kTable,
  // Area under the drop from the unmasked score; higher is better.
  kEquation,
};

struct ThresholdCurve {
  std::array<double, 11> thresholds{0, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100};
  std::array<double, 11> performance{};
  double auc = 0.0;
};

/// Number of tokens masked at threshold `percent` for a length-L instance:
/// ceil(percent / 100 * L).
std::size_t masked_count(std::size_t percent, std::size_t length);

/// Token ids with the `count` most salient positions replaced by MASK; ties
/// go to the lower index.
std::vector<std::size_t> mask_most_salient(std::span<const std::size_t> ids,
                                           std::span<const double> saliency, std::size_t count);

/// Masks each instance by its gold-class saliency row at every threshold and
/// records the model's macro-F1.
ThresholdCurve faithfulness(const Model& model, const std::vector<Instance>& instances,
                            const std::vector<SaliencyMap>& maps,
                            FaithfulnessVariant variant = FaithfulnessVariant::kTable);

// ---------------------------------------------------------------------------
// Consistency

struct ConsistencyResult {
  double rho = 0.0;
  double p = 1.0;
  std::size_t groups_used = 0;      // model pairs (RC) or 1 (DC)
  std::size_t groups_excluded = 0;  // pairs with a constant distance series
  std::size_t points = 0;           // instances (RC) or instance pairs (DC)
  std::vector<double> per_pair_rho;
};

enum class RcPairing {
  kMeanOverPairs,
  // Scaled distances of all pairs pooled into one correlation.
  kPooled,
};

/// Mean absolute difference of two equal-length saliency rows.
double mean_abs_difference(std::span<const double> a, std::span<const double> b);

/// `activations[m][i]` and `saliency[m][i]` (gold-class row) for model m and
/// instance i. Every unordered pair of models contributes one Spearman
/// correlation, over instances, between min-max scaled activation distances
/// and saliency distances. Throws ConstantSeries when every pair is
/// degenerate.
ConsistencyResult rationale_consistency(
    const std::vector<std::vector<ActivationSummary>>& activations,
    const std::vector<std::vector<std::vector<double>>>& saliency,
    ActivationDistance distance = ActivationDistance::kPerLayerMean,
    RcPairing pairing = RcPairing::kMeanOverPairs);

enum class DcClassPolicy {
  // Each instance contributes its own gold-class row.
  kOwnGold,
  // Both instances of pair (i, j) use class y_i.
  kPaperLiteral,
};

struct PairSelection {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  // Fewer pairs existed than were requested; all of them were used.
  bool too_few = false;
};

double jaccard(std::span<const std::size_t> a, std::span<const std::size_t> b);

/// The `n_overlap` pairs with the highest token-set Jaccard overlap (ties by
/// index) plus `n_random` pairs drawn uniformly without replacement from the
/// rest.
PairSelection select_pairs(const std::vector<Instance>& instances, std::size_t n_overlap,
                           std::size_t n_random, std::uint64_t seed);

struct DcOptions {
  std::size_t n_overlap = 2000;
  std::size_t n_random = 2000;
  std::uint64_t seed = 0;
  DcClassPolicy policy = DcClassPolicy::kOwnGold;
  ActivationDistance distance = ActivationDistance::kPerLayerMean;
};

/// Spearman correlation over instance pairs between activation distances and
/// distances of sum-normalized saliency rows compared position by position up
/// to the shorter length. `maps[i]` belongs to `instances[i]`.
ConsistencyResult dataset_consistency(const std::vector<Instance>& instances,
                                      const std::vector<ActivationSummary>& activations,
                                      const std::vector<SaliencyMap>& maps,
                                      const DcOptions& options = {});

// ---------------------------------------------------------------------------
// Reports

struct PropertyColumn {
  const char* key;
  bool higher_is_better;
  // Part of the mean over the five diagnostic properties.
  bool in_mean;
};

/// Normalized report columns; the table variant of faithfulness is assumed.
std::vector<PropertyColumn> property_columns(
    FaithfulnessVariant variant = FaithfulnessVariant::kTable);

struct PropertyReport {
  std::string dataset;
  std::string architecture;
  std::string explainer;
  std::size_t k = 0;
  std::map<std::string, double> raw;
  std::map<std::string, double> normalized;
  std::vector<std::string> notes;

  bool operator==(const PropertyReport&) const = default;
};

enum class NormScope {
  // Min-max within each (dataset, architecture) block.
  kPerBlock,
  // Min-max within each dataset across architectures.
  kGlobal,
};

/// Fills `normalized` for every column in `property_columns(variant)` that
/// the reports carry, plus "mean" over the diagnostic-property columns.
/// Lower-is-better columns are flipped so that 1 is always best; a constant
/// column maps to 0.5 and is noted. Throws BadConfig with fewer than two
/// explainers in a group.
void normalize_report(std::vector<PropertyReport>& reports, NormScope scope = NormScope::kPerBlock,
                      FaithfulnessVariant variant = FaithfulnessVariant::kTable);

nlohmann::json to_json(const PropertyReport& report);
PropertyReport property_report_from_json(const nlohmann::json& j);

/// Flat CSV with one row per report: identifiers, then raw_* and norm_*
/// columns in the order of `property_columns`.
std::string reports_to_csv(const std::vector<PropertyReport>& reports,
                           FaithfulnessVariant variant = FaithfulnessVariant::kTable);

struct LabeledCurve {
  std::string dataset;
  std::string architecture;
  std::string explainer;
  std::string model_id;
  ThresholdCurve curve;
};

std::string curves_to_csv(const std::vector<LabeledCurve>& curves);

}  // namespace xaidiag
