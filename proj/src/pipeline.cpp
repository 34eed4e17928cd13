#include "xaidiag/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <ctime>
#include <exception>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>
#include <unordered_map>

#include "xaidiag/error.hpp"

namespace xaidiag {

using nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Configuration

namespace {

template <typename Enum>
Enum parse_choice(const std::string& value, const std::vector<std::pair<std::string, Enum>>& table,
                  const char* what) {
  for (const auto& [name, e] : table) {
    if (name == value) return e;
  }
  throw Error(ErrorCode::kBadConfig, std::string("unknown ") + what + " '" + value + "'");
}

template <typename Enum>
std::string choice_name(Enum e, const std::vector<std::pair<std::string, Enum>>& table) {
  for (const auto& [name, v] : table) {
    if (v == e) return name;
  }
  return "unknown";
}

const std::vector<std::pair<std::string, DcClassPolicy>> kDcPolicies{
    {"own-gold", DcClassPolicy::kOwnGold}, {"paper-literal", DcClassPolicy::kPaperLiteral}};
const std::vector<std::pair<std::string, FaithfulnessVariant>> kFaithfulnessVariants{
    {"table", FaithfulnessVariant::kTable}, {"equation", FaithfulnessVariant::kEquation}};
const std::vector<std::pair<std::string, NormScope>> kNormScopes{
    {"per-block", NormScope::kPerBlock}, {"global", NormScope::kGlobal}};
const std::vector<std::pair<std::string, RcPairing>> kRcPairings{
    {"mean", RcPairing::kMeanOverPairs}, {"pooled", RcPairing::kPooled}};
const std::vector<std::pair<std::string, ActivationDistance>> kActivationDistances{
    {"per-layer-mean", ActivationDistance::kPerLayerMean},
    {"global-mean", ActivationDistance::kGlobalMean}};

std::optional<fs::path> optional_path(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return fs::path(j.at(key).get<std::string>());
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  return splitmix64(splitmix64(splitmix64(seed ^ a) ^ b) ^ c);
}

}  // namespace

void RunConfig::validate() const {
  if (architectures.empty()) throw Error(ErrorCode::kBadConfig, "no architectures listed");
  if (explainers.empty()) throw Error(ErrorCode::kBadConfig, "no explainers listed");
  if (k < 2) throw Error(ErrorCode::kBadConfig, "K must be >= 2");
  for (const std::string& id : explainers) explainer_spec(id);
}

ModelConfig RunConfig::model_config(Architecture arch, std::size_t vocab_size,
                                    std::size_t num_classes) const {
  json merged = to_json(ModelConfig::defaults(arch, vocab_size, num_classes));
  const std::string name(to_string(arch));
  if (model_overrides.contains(name)) {
    for (const auto& [key, value] : model_overrides.at(name).items()) merged[key] = value;
  }
  merged["architecture"] = name;
  merged["vocab_size"] = vocab_size;
  merged["num_classes"] = num_classes;
  ModelConfig config = model_config_from_json(merged);
  config.validate();
  return config;
}

ExplainerSpec RunConfig::explainer_spec(const std::string& id) const {
  ExplainerSpec spec = ExplainerSpec::from_id(id, seed);
  spec.shapley_samples = shapley_samples;
  spec.lime_samples = lime_samples;
  spec.lime_kernel_width = lime_kernel_width;
  spec.lime_ridge = lime_ridge;
  spec.validate();
  return spec;
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  try {
    if (j.contains("dataset")) {
      const json& d = j.at("dataset");
      DatasetConfig& ds = c.dataset;
      ds.name = d.value("name", ds.name);
      if (d.contains("synthetic")) {
        const json& s = d.at("synthetic");
        ds.synth_n = s.value("n", ds.synth_n);
        ds.synth_classes = s.value("classes", ds.synth_classes);
        ds.synth_vocab = s.value("vocab_size", ds.synth_vocab);
        ds.synth_seed = s.value("seed", ds.synth_seed);
      }
      ds.path = optional_path(d, "path");
      ds.train_path = optional_path(d, "train");
      ds.dev_path = optional_path(d, "dev");
      ds.test_path = optional_path(d, "test");
      ds.num_classes = d.value("num_classes", ds.num_classes);
      ds.split_seed = d.value("split_seed", ds.split_seed);
      ds.min_freq = d.value("min_freq", ds.min_freq);
    }
    if (j.contains("architectures")) {
      c.architectures.clear();
      for (const auto& a : j.at("architectures")) {
        c.architectures.push_back(architecture_from_string(a.get<std::string>()));
      }
    }
    c.explainers = j.value("explainers", c.explainers);
    c.k = j.value("K", c.k);
    c.seed = j.value("seed", c.seed);
    if (j.contains("out")) c.out = j.at("out").get<std::string>();
    c.model_overrides = j.value("model_overrides", c.model_overrides);
    c.shapley_samples = j.value("shapley_samples", c.shapley_samples);
    c.lime_samples = j.value("lime_samples", c.lime_samples);
    c.lime_kernel_width = j.value("lime_kernel_width", c.lime_kernel_width);
    c.lime_ridge = j.value("lime_ridge", c.lime_ridge);
    c.dc_overlap_pairs = j.value("dc_overlap_pairs", c.dc_overlap_pairs);
    c.dc_random_pairs = j.value("dc_random_pairs", c.dc_random_pairs);
    c.dc_class_policy = parse_choice(j.value("dc_class_policy", std::string("own-gold")),
                                     kDcPolicies, "dc_class_policy");
    c.faithfulness_variant =
        parse_choice(j.value("faithfulness_variant", std::string("table")),
                     kFaithfulnessVariants, "faithfulness_variant");
    c.norm_scope =
        parse_choice(j.value("norm_scope", std::string("per-block")), kNormScopes, "norm_scope");
    c.rc_pairing = parse_choice(j.value("rc_pairing", std::string("mean")), kRcPairings,
                                "rc_pairing");
    c.activation_distance =
        parse_choice(j.value("activation_distance", std::string("per-layer-mean")),
                     kActivationDistances, "activation_distance");
    c.threads = j.value("threads", c.threads);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kBadConfig, std::string("run config: ") + e.what());
  }
  return c;
}

json to_json(const RunConfig& c) {
  auto path_or_null = [](const std::optional<fs::path>& p) -> json {
    return p ? json(p->string()) : json(nullptr);
  };
  json archs = json::array();
  for (Architecture a : c.architectures) archs.push_back(std::string(to_string(a)));
  const DatasetConfig& d = c.dataset;
  return json{
      {"dataset",
       {{"name", d.name},
        {"synthetic",
         {{"n", d.synth_n},
          {"classes", d.synth_classes},
          {"vocab_size", d.synth_vocab},
          {"seed", d.synth_seed}}},
        {"path", path_or_null(d.path)},
        {"train", path_or_null(d.train_path)},
        {"dev", path_or_null(d.dev_path)},
        {"test", path_or_null(d.test_path)},
        {"num_classes", d.num_classes},
        {"split_seed", d.split_seed},
        {"min_freq", d.min_freq}}},
      {"architectures", archs},
      {"explainers", c.explainers},
      {"K", c.k},
      {"seed", c.seed},
      {"out", c.out.string()},
      {"model_overrides", c.model_overrides},
      {"shapley_samples", c.shapley_samples},
      {"lime_samples", c.lime_samples},
      {"lime_kernel_width", c.lime_kernel_width},
      {"lime_ridge", c.lime_ridge},
      {"dc_overlap_pairs", c.dc_overlap_pairs},
      {"dc_random_pairs", c.dc_random_pairs},
      {"dc_class_policy", choice_name(c.dc_class_policy, kDcPolicies)},
      {"faithfulness_variant", choice_name(c.faithfulness_variant, kFaithfulnessVariants)},
      {"norm_scope", choice_name(c.norm_scope, kNormScopes)},
      {"rc_pairing", choice_name(c.rc_pairing, kRcPairings)},
      {"activation_distance", choice_name(c.activation_distance, kActivationDistances)},
      {"threads", c.threads}};
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot read config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::kParseError, "config " + path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

Corpus load_corpus(const DatasetConfig& config) {
  if (config.train_path || config.dev_path || config.test_path) {
    if (!config.train_path || !config.dev_path || !config.test_path) {
      throw Error(ErrorCode::kBadConfig, "train, dev and test paths must be given together");
    }
    Splits splits{load_jsonl(*config.train_path, config.num_classes),
                  load_jsonl(*config.dev_path, config.num_classes),
                  load_jsonl(*config.test_path, config.num_classes)};
    return make_corpus(config.name, std::move(splits), config.num_classes, config.min_freq);
  }
  if (config.path) {
    Splits splits = split(load_jsonl(*config.path, config.num_classes), {0.8, 0.1, 0.1},
                          config.split_seed);
    return make_corpus(config.name, std::move(splits), config.num_classes, config.min_freq);
  }
  Corpus corpus = synth_keyword_corpus(config.synth_n, config.synth_classes, config.synth_vocab,
                                       config.synth_seed);
  corpus.name = config.name;
  return corpus;
}

// ---------------------------------------------------------------------------
// Utilities

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> workers;
  workers.reserve(threads);
  for (std::size_t w = 0; w < threads; ++w) {
    workers.emplace_back([&] {
      while (!failed.load()) {
        const std::size_t i = next.fetch_add(1);
        if (i >= n) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!error) error = std::current_exception();
          failed = true;
        }
      }
    });
  }
  for (auto& t : workers) t.join();
  if (error) std::rethrow_exception(error);
}

void write_file_atomic(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error(ErrorCode::kIo, "cannot write " + tmp.string());
    out << content;
    if (!out) throw Error(ErrorCode::kIo, "failed writing " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string model_id(bool trained, std::size_t index) {
  return (trained ? "trained_" : "random_") + std::to_string(index);
}

fs::path checkpoint_path(const RunConfig& config, Architecture arch, const std::string& id) {
  return config.out / "models" / std::string(to_string(arch)) / (id + ".ckpt");
}

fs::path saliency_path(const RunConfig& config, Architecture arch, const std::string& explainer) {
  return config.out / "saliency" / std::string(to_string(arch)) / (explainer + ".jsonl");
}

namespace {

void log_line(const std::string& text) {
  static std::mutex mutex;
  std::lock_guard<std::mutex> lock(mutex);
  std::cerr << text << '\n';
}

std::string fixed(double v, int digits = 4) {
  std::ostringstream out;
  out.setf(std::ios::fixed);
  out.precision(digits);
  out << v;
  return out.str();
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

// Sample standard deviation (n - 1 denominator).
MeanStd mean_std(const std::vector<double>& values) {
  MeanStd out;
  if (values.empty()) return out;
  for (double v : values) out.mean += v;
  out.mean /= static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - out.mean) * (v - out.mean);
    out.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return out;
}

struct LoadedBundle {
  std::vector<std::string> ids;  // trained first, then random
  std::vector<std::unique_ptr<Model>> models;
  std::size_t k = 0;
};

LoadedBundle load_bundle(const RunConfig& config, Architecture arch, const std::string& hash) {
  LoadedBundle bundle;
  bundle.k = config.k;
  for (bool trained : {true, false}) {
    for (std::size_t i = 0; i < config.k; ++i) {
      const std::string id = model_id(trained, i);
      const fs::path path = checkpoint_path(config, arch, id);
      if (!fs::exists(path)) throw Error(ErrorCode::kMissingCheckpoint, path.string());
      Checkpoint ckpt = load_checkpoint(path);
      if (ckpt.metadata.value("corpus_hash", std::string()) != hash) {
        throw Error(ErrorCode::kCorpusHashMismatch, path.string() + " was built from another corpus");
      }
      bundle.ids.push_back(id);
      bundle.models.push_back(std::move(ckpt.model));
    }
  }
  return bundle;
}

}  // namespace

// ---------------------------------------------------------------------------
// Commands

json cmd_train(const RunConfig& config) {
  config.validate();
  const Corpus corpus = load_corpus(config.dataset);
  const std::string hash = corpus_hash(corpus);
  const Splits& s = corpus.splits;
  json metrics{{"corpus_hash", hash}, {"dataset", corpus.name}, {"architectures", json::object()}};

  for (std::size_t a = 0; a < config.architectures.size(); ++a) {
    const Architecture arch = config.architectures[a];
    const ModelConfig model_config =
        config.model_config(arch, corpus.vocab.size(), corpus.num_classes());
    const auto arch_code = static_cast<std::uint64_t>(arch) + 1;
    std::vector<json> trained(config.k);
    std::vector<json> random(config.k);

    parallel_for(config.k, config.threads, [&](std::size_t i) {
      const std::uint64_t seed = derive_seed(config.seed, arch_code, 1, i);
      const auto start = std::chrono::steady_clock::now();
      TrainResult result = train_model(model_config, s.train, s.dev, seed);
      const double seconds =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      const std::string id = model_id(true, i);
      const double test_f1 = evaluate_macro_f1(*result.model, s.test);
      trained[i] = json{{"model_id", id},
                        {"seed", seed},
                        {"dev_f1", result.best_dev_f1},
                        {"test_f1", test_f1},
                        {"best_epoch", result.best_epoch},
                        {"epochs_run", result.epochs_run}};
      const fs::path path = checkpoint_path(config, arch, id);
      fs::create_directories(path.parent_path());
      save_checkpoint(path.string() + ".tmp", *result.model,
                      {{"corpus_hash", hash}, {"model_id", id}, {"seed", seed}, {"trained", true}});
      fs::rename(path.string() + ".tmp", path);
      log_line("[train] " + std::string(to_string(arch)) + " " + id + " dev_f1=" +
               fixed(result.best_dev_f1) + " test_f1=" + fixed(test_f1) + " epochs=" +
               std::to_string(result.epochs_run) + " (" + fixed(seconds, 1) + "s)");
    });
    for (std::size_t i = 0; i < config.k; ++i) {
      const std::uint64_t seed = derive_seed(config.seed, arch_code, 2, i);
      auto model = init_random(model_config, seed);
      const std::string id = model_id(false, i);
      random[i] = json{{"model_id", id},
                       {"seed", seed},
                       {"dev_f1", evaluate_macro_f1(*model, s.dev)},
                       {"test_f1", evaluate_macro_f1(*model, s.test)}};
      const fs::path path = checkpoint_path(config, arch, id);
      save_checkpoint(path.string() + ".tmp", *model,
                      {{"corpus_hash", hash}, {"model_id", id}, {"seed", seed}, {"trained", false}});
      fs::rename(path.string() + ".tmp", path);
    }

    json summary = json::object();
    for (const auto& [group, rows] : {std::pair{"trained", &trained}, std::pair{"random", &random}}) {
      for (const char* field : {"dev_f1", "test_f1"}) {
        std::vector<double> values;
        for (const json& row : *rows) values.push_back(row.at(field).get<double>());
        const MeanStd ms = mean_std(values);
        summary[std::string(group) + "_" + field + "_mean"] = ms.mean;
        summary[std::string(group) + "_" + field + "_std"] = ms.std;
      }
    }
    metrics["architectures"][std::string(to_string(arch))] = {
        {"config", to_json(model_config)},
        {"trained", trained},
        {"random", random},
        {"summary", summary}};
  }
  write_file_atomic(config.out / "metrics.json", metrics.dump(2) + "\n");
  return metrics;
}

void cmd_explain(const RunConfig& config) {
  config.validate();
  const Corpus corpus = load_corpus(config.dataset);
  const std::string hash = corpus_hash(corpus);
  const auto& test = corpus.splits.test;

  for (Architecture arch : config.architectures) {
    const LoadedBundle bundle = load_bundle(config, arch, hash);
    for (const std::string& explainer : config.explainers) {
      const ExplainerSpec spec = config.explainer_spec(explainer);
      const auto start = std::chrono::steady_clock::now();
      const std::size_t jobs = bundle.models.size() * test.size();
      std::vector<SaliencyMap> maps(jobs);
      parallel_for(jobs, config.threads, [&](std::size_t job) {
        const std::size_t m = job / test.size();
        const std::size_t i = job % test.size();
        maps[job] = explain(*bundle.models[m], test[i], spec, bundle.ids[m]);
        maps[job].corpus_hash = hash;
      });
      const fs::path path = saliency_path(config, arch, explainer);
      fs::create_directories(path.parent_path());
      write_saliency_jsonl(path.string() + ".tmp", maps);
      fs::rename(path.string() + ".tmp", path);
      log_line("[explain] " + std::string(to_string(arch)) + " " + explainer + " " +
               std::to_string(maps.size()) + " maps (" +
               fixed(std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
                         .count(),
                     1) +
               "s)");
    }
  }
}

namespace {

// Maps of one explainer file, grouped per model id and aligned with `test`.
std::map<std::string, std::vector<SaliencyMap>> group_maps(std::vector<SaliencyMap> maps,
                                                           const std::vector<Instance>& test,
                                                           const std::string& hash,
                                                           const fs::path& source) {
  std::unordered_map<std::string, std::size_t> position;
  for (std::size_t i = 0; i < test.size(); ++i) position.emplace(test[i].id, i);
  std::map<std::string, std::vector<SaliencyMap>> grouped;
  std::map<std::string, std::size_t> filled;
  for (SaliencyMap& m : maps) {
    if (m.corpus_hash != hash) {
      throw Error(ErrorCode::kCorpusHashMismatch, source.string() + " was built from another corpus");
    }
    auto it = position.find(m.instance_id);
    if (it == position.end()) {
      throw Error(ErrorCode::kLengthMismatch, source.string() + ": unknown instance " + m.instance_id);
    }
    auto& slot = grouped[m.model_id];
    if (slot.empty()) slot.resize(test.size());
    ++filled[m.model_id];
    slot[it->second] = std::move(m);
  }
  for (const auto& [id, count] : filled) {
    if (count != test.size()) {
      throw Error(ErrorCode::kLengthMismatch, source.string() + ": model " + id +
                                                  " does not cover the test split");
    }
  }
  return grouped;
}

double mean_of(const std::vector<double>& values) { return mean_std(values).mean; }

}  // namespace

json cmd_evaluate(const RunConfig& config) {
  config.validate();
  const Corpus corpus = load_corpus(config.dataset);
  const std::string hash = corpus_hash(corpus);
  const auto& test = corpus.splits.test;
  const std::size_t n = test.size();

  std::vector<PropertyReport> reports;
  std::vector<LabeledCurve> curves;

  for (std::size_t a = 0; a < config.architectures.size(); ++a) {
    const Architecture arch = config.architectures[a];
    const std::string arch_name(to_string(arch));
    const LoadedBundle bundle = load_bundle(config, arch, hash);
    const std::size_t models = bundle.models.size();

    std::vector<std::vector<Prediction>> preds(models, std::vector<Prediction>(n));
    parallel_for(models * n, config.threads, [&](std::size_t job) {
      preds[job / n][job % n] = predict(*bundle.models[job / n], test[job % n].token_ids);
    });
    std::vector<std::vector<ActivationSummary>> activations(models);
    for (std::size_t m = 0; m < models; ++m) {
      for (const Prediction& p : preds[m]) activations[m].push_back(p.activations);
    }

    std::vector<PropertyReport> block(config.explainers.size());
    std::vector<std::vector<LabeledCurve>> block_curves(config.explainers.size());
    parallel_for(config.explainers.size(), config.threads, [&](std::size_t e) {
      const std::string& explainer = config.explainers[e];
      const fs::path source = saliency_path(config, arch, explainer);
      if (!fs::exists(source)) {
        throw Error(ErrorCode::kIo, "missing saliency file " + source.string());
      }
      auto grouped = group_maps(read_saliency_jsonl(source), test, hash, source);
      for (const std::string& id : bundle.ids) {
        if (!grouped.count(id)) {
          throw Error(ErrorCode::kLengthMismatch, source.string() + " lacks model " + id);
        }
      }

      PropertyReport& r = block[e];
      r.dataset = corpus.name;
      r.architecture = arch_name;
      r.explainer = explainer;
      r.k = bundle.k;

      std::vector<double> ha, ha_random, ci, ci_max, ci_up, f_auc, dc_rho, dc_p, flops;
      for (std::size_t m = 0; m < models; ++m) {
        const bool trained = m < bundle.k;
        const auto& maps = grouped.at(bundle.ids[m]);
        const double map_score = human_agreement(maps, test).map;
        if (!trained) {
          ha_random.push_back(map_score);
          continue;
        }
        ha.push_back(map_score);
        for (const SaliencyMap& sm : maps) flops.push_back(static_cast<double>(sm.flops));

        std::vector<std::vector<double>> features;
        std::vector<double> confidence;
        for (std::size_t i = 0; i < n; ++i) {
          features.push_back(saliency_distance(maps[i].scores, preds[m][i].label));
          confidence.push_back(preds[m][i].probs[preds[m][i].label]);
        }
        ConfidenceOptions ci_options;
        ci_options.seed = derive_seed(config.seed, 11, m, 0);
        const ConfidenceResult plain = confidence_indication(features, confidence, ci_options);
        ci_options.upsample = true;
        const ConfidenceResult upsampled = confidence_indication(features, confidence, ci_options);
        if (plain.degenerate) r.notes.push_back(bundle.ids[m] + ": constant confidences");
        ci.push_back(plain.mae);
        ci_max.push_back(plain.max_error);
        ci_up.push_back(upsampled.mae);

        const ThresholdCurve curve =
            faithfulness(*bundle.models[m], test, maps, config.faithfulness_variant);
        f_auc.push_back(curve.auc);
        block_curves[e].push_back({corpus.name, arch_name, explainer, bundle.ids[m], curve});

        DcOptions dc_options;
        dc_options.n_overlap = config.dc_overlap_pairs;
        dc_options.n_random = config.dc_random_pairs;
        dc_options.seed = derive_seed(config.seed, 13, 0, 0);
        dc_options.policy = config.dc_class_policy;
        dc_options.distance = config.activation_distance;
        try {
          const ConsistencyResult dc =
              dataset_consistency(test, activations[m], maps, dc_options);
          dc_rho.push_back(dc.rho);
          dc_p.push_back(dc.p);
          r.raw["DC_pairs"] = static_cast<double>(dc.points);
        } catch (const Error& err) {
          r.notes.push_back(bundle.ids[m] + ": dataset consistency skipped: " + err.what());
        }
      }

      std::vector<std::vector<std::vector<double>>> gold_rows(models);
      for (std::size_t m = 0; m < models; ++m) {
        const auto& maps = grouped.at(bundle.ids[m]);
        for (std::size_t i = 0; i < n; ++i) gold_rows[m].push_back(maps[i].scores[test[i].label]);
      }
      try {
        const ConsistencyResult rc = rationale_consistency(
            activations, gold_rows, config.activation_distance, config.rc_pairing);
        r.raw["RC_rho"] = rc.rho;
        r.raw["RC_p"] = rc.p;
        r.raw["RC_pairs_used"] = static_cast<double>(rc.groups_used);
        r.raw["RC_pairs_excluded"] = static_cast<double>(rc.groups_excluded);
      } catch (const Error& err) {
        r.notes.push_back(std::string("rationale consistency skipped: ") + err.what());
      }

      r.raw["HA_map"] = mean_of(ha);
      r.raw["HA_map_randominit"] = mean_of(ha_random);
      r.raw["CI_mae"] = mean_of(ci);
      r.raw["CI_max_error"] = mean_of(ci_max);
      r.raw["CI_mae_upsampled"] = mean_of(ci_up);
      r.raw["F_auc_tp"] = mean_of(f_auc);
      if (!dc_rho.empty()) {
        r.raw["DC_rho"] = mean_of(dc_rho);
        r.raw["DC_p"] = mean_of(dc_p);
      }
      r.raw["flops_mean"] = mean_of(flops);
      log_line("[evaluate] " + arch_name + " " + explainer + " HA=" + fixed(r.raw["HA_map"]) +
               " CI=" + fixed(r.raw["CI_mae"]) + " F=" + fixed(r.raw["F_auc_tp"]) +
               " RC=" + (r.raw.count("RC_rho") ? fixed(r.raw["RC_rho"]) : std::string("n/a")) +
               " DC=" + (r.raw.count("DC_rho") ? fixed(r.raw["DC_rho"]) : std::string("n/a")));
    });
    for (auto& r : block) reports.push_back(std::move(r));
    for (auto& c : block_curves) curves.insert(curves.end(), c.begin(), c.end());
  }

  normalize_report(reports, config.norm_scope, config.faithfulness_variant);

  json echoed = to_json(config);
  echoed.erase("out");
  echoed.erase("threads");
  json report_list = json::array();
  for (const PropertyReport& r : reports) report_list.push_back(to_json(r));

  const std::time_t now = std::time(nullptr);
  char stamp[32];
  std::strftime(stamp, sizeof(stamp), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
  json doc{{"generated_at", stamp},
           {"corpus_hash", hash},
           {"dataset", corpus.name},
           {"test_instances", n},
           {"config", echoed},
           {"reports", report_list}};
  write_file_atomic(config.out / "report.json", doc.dump(2) + "\n");
  write_file_atomic(config.out / "report.csv", reports_to_csv(reports, config.faithfulness_variant));
  write_file_atomic(config.out / "curves.csv", curves_to_csv(curves));
  return doc;
}

void cmd_report(const RunConfig& config) {
  const fs::path source = config.out / "report.json";
  std::ifstream in(source);
  if (!in) throw Error(ErrorCode::kIo, "cannot read " + source.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::kParseError, source.string() + ": " + e.what());
  }
  std::vector<PropertyReport> reports;
  for (const json& r : doc.at("reports")) reports.push_back(property_report_from_json(r));

  const std::vector<std::pair<std::string, std::string>> axes{
      {"HA", "HA_map"}, {"CI", "CI_mae"}, {"F", "F_auc_tp"}, {"RC", "RC_rho"}, {"DC", "DC_rho"}};
  std::vector<std::string> axis_labels;
  for (const auto& [label, key] : axes) axis_labels.push_back(label);

  std::map<std::pair<std::string, std::string>, std::vector<const PropertyReport*>> blocks;
  std::vector<std::pair<std::string, std::string>> order;
  for (const PropertyReport& r : reports) {
    const auto key = std::make_pair(r.dataset, r.architecture);
    if (!blocks.count(key)) order.push_back(key);
    blocks[key].push_back(&r);
  }

  std::ostringstream summary;
  summary << "dataset,architecture,explainer";
  for (const auto& [label, key] : axes) summary << ',' << label;
  summary << ",mean,flops_mean\n";
  summary.setf(std::ios::fixed);
  summary.precision(4);
  for (const auto& key : order) {
    std::vector<SpiderSeries> series;
    for (const PropertyReport* r : blocks[key]) {
      SpiderSeries s{r->explainer, {}};
      summary << r->dataset << ',' << r->architecture << ',' << r->explainer;
      for (const auto& [label, column] : axes) {
        auto it = r->normalized.find(column);
        const double v = it == r->normalized.end() || !std::isfinite(it->second) ? 0.0 : it->second;
        s.values.push_back(v);
        summary << ',' << v;
      }
      auto mean = r->normalized.find("mean");
      auto flops = r->raw.find("flops_mean");
      summary << ',' << (mean == r->normalized.end() ? 0.0 : mean->second) << ','
              << (flops == r->raw.end() ? 0.0 : flops->second) << '\n';
      series.push_back(std::move(s));
    }
    const std::string title = key.first + " / " + key.second;
    write_file_atomic(config.out / "figures" / (key.first + "_" + key.second + ".svg"),
                      render_spider_svg(title, axis_labels, series));
  }
  write_file_atomic(config.out / "summary.csv", summary.str());
}

// ---------------------------------------------------------------------------
// SVG

namespace {

std::string xml_escape(const std::string& text) {
  std::string out;
  for (char ch : text) {
    switch (ch) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += ch;
    }
  }
  return out;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", std::abs(v) < 0.005 ? 0.0 : v);
  return buf;
}

constexpr const char* kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

}  // namespace

std::string render_spider_svg(const std::string& title, const std::vector<std::string>& axes,
                              const std::vector<SpiderSeries>& series) {
  constexpr double kCx = 260.0;
  constexpr double kCy = 280.0;
  constexpr double kRadius = 180.0;
  constexpr double kPi = 3.14159265358979323846;
  const std::size_t n = axes.size();
  auto point = [&](std::size_t axis, double value) {
    const double angle = -kPi / 2.0 + 2.0 * kPi * static_cast<double>(axis) / static_cast<double>(n);
    return std::make_pair(kCx + kRadius * value * std::cos(angle),
                          kCy + kRadius * value * std::sin(angle));
  };
  auto polygon = [&](const std::vector<double>& values) {
    std::string pts;
    for (std::size_t k = 0; k < n; ++k) {
      const auto [x, y] = point(k, std::clamp(values[k], 0.0, 1.0));
      if (!pts.empty()) pts += ' ';
      pts += num(x) + "," + num(y);
    }
    return pts;
  };

  std::ostringstream svg;
  const std::size_t legend_height = 40 + 20 * series.size();
  const std::size_t height = std::max<std::size_t>(540, legend_height);
  svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"780\" height=\"" << height
      << "\" viewBox=\"0 0 780 " << height << "\" font-family=\"sans-serif\">\n"
      << "  <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "  <text x=\"" << num(kCx) << "\" y=\"30\" text-anchor=\"middle\" font-size=\"18\">"
      << xml_escape(title) << "</text>\n";
  for (double ring : {0.25, 0.5, 0.75, 1.0}) {
    svg << "  <polygon class=\"grid\" points=\"" << polygon(std::vector<double>(n, ring))
        << "\" fill=\"none\" stroke=\"#cccccc\" stroke-width=\"1\"/>\n";
  }
  for (std::size_t k = 0; k < n; ++k) {
    const auto [x, y] = point(k, 1.0);
    const auto [lx, ly] = point(k, 1.12);
    svg << "  <line class=\"axis\" x1=\"" << num(kCx) << "\" y1=\"" << num(kCy) << "\" x2=\""
        << num(x) << "\" y2=\"" << num(y) << "\" stroke=\"#999999\" stroke-width=\"1\"/>\n"
        << "  <text x=\"" << num(lx) << "\" y=\"" << num(ly + 5.0)
        << "\" text-anchor=\"middle\" font-size=\"14\">" << xml_escape(axes[k]) << "</text>\n";
  }
  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* color = kPalette[s % std::size(kPalette)];
    svg << "  <polygon class=\"series\" data-label=\"" << xml_escape(series[s].label)
        << "\" points=\"" << polygon(series[s].values) << "\" fill=\"" << color
        << "\" fill-opacity=\"0.08\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
  }
  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* color = kPalette[s % std::size(kPalette)];
    const double y = 60.0 + 20.0 * static_cast<double>(s);
    svg << "  <rect x=\"520\" y=\"" << num(y - 10.0) << "\" width=\"12\" height=\"12\" fill=\""
        << color << "\"/>\n"
        << "  <text x=\"540\" y=\"" << num(y) << "\" font-size=\"13\">"
        << xml_escape(series[s].label) << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace xaidiag
