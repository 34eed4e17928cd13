#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "xaidiag/data.hpp"
#include "xaidiag/diagnostics.hpp"
#include "xaidiag/explainers.hpp"
#include "xaidiag/models.hpp"

namespace xaidiag {

struct DatasetConfig {
  std::string name = "synth";
  // Synthetic planted-keyword corpus, used when no path is given.
  std::size_t synth_n = 1000;
  std::size_t synth_classes = 2;
  std::size_t synth_vocab = 200;
  std::uint64_t synth_seed = 7;
  // A single JSONL file split 80/10/10 with `split_seed`, or three pre-split files.
  std::optional<std::filesystem::path> path;
  std::optional<std::filesystem::path> train_path;
  std::optional<std::filesystem::path> dev_path;
  std::optional<std::filesystem::path> test_path;
  std::size_t num_classes = 2;
  std::uint64_t split_seed = 1;
  std::size_t min_freq = 1;
};

struct RunConfig {
  DatasetConfig dataset;
  std::vector<Architecture> architectures{Architecture::kCnn, Architecture::kLstm,
                                          Architecture::kTransformer};
  std::vector<std::string> explainers = default_explainer_ids();
  std::size_t k = 5;
  std::uint64_t seed = 0;
  std::filesystem::path out = "out";
  // Per-architecture overrides merged onto `ModelConfig::defaults`.
  nlohmann::json model_overrides = nlohmann::json::object();

  std::size_t shapley_samples = 100;
  std::size_t lime_samples = 500;
  double lime_kernel_width = 0.75;
  double lime_ridge = 1e-3;

  std::size_t dc_overlap_pairs = 2000;
  std::size_t dc_random_pairs = 2000;
  DcClassPolicy dc_class_policy = DcClassPolicy::kOwnGold;
  FaithfulnessVariant faithfulness_variant = FaithfulnessVariant::kTable;
  NormScope norm_scope = NormScope::kPerBlock;
  RcPairing rc_pairing = RcPairing::kMeanOverPairs;
  ActivationDistance activation_distance = ActivationDistance::kPerLayerMean;

  // Worker threads; 0 uses the hardware concurrency.
  std::size_t threads = 0;

  /// Throws BadConfig when no architecture or explainer is listed, K < 2, or
  /// an explainer id is unknown.
  void validate() const;

  ModelConfig model_config(Architecture arch, std::size_t vocab_size,
                           std::size_t num_classes) const;
  ExplainerSpec explainer_spec(const std::string& id) const;
};

RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RunConfig& config);
RunConfig load_run_config(const std::filesystem::path& path);

Corpus load_corpus(const DatasetConfig& config);

/// Runs `fn(i)` for i in [0, n) on up to `threads` workers. The first
/// exception thrown by any task is rethrown after all workers stop.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

/// Writes through a temporary file and a rename, so readers never see a
/// partial file.
void write_file_atomic(const std::filesystem::path& path, const std::string& content);

std::string model_id(bool trained, std::size_t index);
std::filesystem::path checkpoint_path(const RunConfig& config, Architecture arch,
                                      const std::string& model_id);
std::filesystem::path saliency_path(const RunConfig& config, Architecture arch,
                                    const std::string& explainer);

/// Trains K models and draws K random-init models per architecture. Writes
/// checkpoints and `metrics.json`, and returns the metrics.
nlohmann::json cmd_train(const RunConfig& config);

/// Explains the test split with every model of every architecture; one JSONL
/// file per (architecture, explainer).
void cmd_explain(const RunConfig& config);

/// Computes all properties, writes `report.json`, `report.csv` and
/// `curves.csv`, and returns the report document.
nlohmann::json cmd_evaluate(const RunConfig& config);

/// Renders one spider chart per report block plus `summary.csv`.
void cmd_report(const RunConfig& config);

struct SpiderSeries {
  std::string label;
  std::vector<double> values;  // one per axis, in [0, 1]
};

/// Standalone SVG radar chart; byte-identical output for identical input.
std::string render_spider_svg(const std::string& title, const std::vector<std::string>& axes,
                              const std::vector<SpiderSeries>& series);

/// Command-line entry point; returns the process exit code.
int cli_main(int argc, const char* const* argv);

}  // namespace xaidiag
