#include "xaidiag/explainers.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <Eigen/Dense>

#include "xaidiag/error.hpp"

namespace xaidiag {

using nlohmann::json;

namespace {

constexpr std::string_view kind_name(ExplainerKind kind) {
  switch (kind) {
    case ExplainerKind::kSaliency: return "saliency";
    case ExplainerKind::kInputXGrad: return "input_x_grad";
    case ExplainerKind::kGuidedBp: return "guided_bp";
    case ExplainerKind::kOcclusion: return "occlusion";
    case ExplainerKind::kShapSampl: return "shap_sampl";
    case ExplainerKind::kLime: return "lime";
    case ExplainerKind::kRandom: return "random";
    case ExplainerKind::kGoldMask: return "gold_mask";
  }
  return "unknown";
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001B3ULL;
  }
  return h;
}

std::vector<double> pick_row(const std::vector<std::vector<double>>& rows, std::size_t c) {
  if (c >= rows.size()) throw Error(ErrorCode::kShapeMismatch, "target class out of range");
  return rows[c];
}

}  // namespace

bool is_gradient_kind(ExplainerKind kind) {
  return kind == ExplainerKind::kSaliency || kind == ExplainerKind::kInputXGrad ||
         kind == ExplainerKind::kGuidedBp;
}

std::string ExplainerSpec::id() const {
  std::string out(kind_name(kind));
  if (aggregation == Aggregation::kMean) out += "_mean";
  if (aggregation == Aggregation::kL2) out += "_l2";
  return out;
}

void ExplainerSpec::validate() const {
  if (is_gradient_kind(kind) == (aggregation == Aggregation::kNone)) {
    throw Error(ErrorCode::kBadConfig,
                "aggregation is required for gradient explainers and invalid otherwise");
  }
  if (shapley_samples == 0 || lime_samples == 0) {
    throw Error(ErrorCode::kBadConfig, "sample counts must be positive");
  }
  if (!(lime_kernel_width > 0.0) || !(lime_ridge >= 0.0)) {
    throw Error(ErrorCode::kBadConfig, "LIME kernel width must be positive, ridge non-negative");
  }
}

ExplainerSpec ExplainerSpec::from_id(std::string_view id, std::uint64_t seed) {
  ExplainerSpec spec;
  spec.seed = seed;
  std::string_view base = id;
  if (id.ends_with("_mean")) {
    spec.aggregation = Aggregation::kMean;
    base = id.substr(0, id.size() - 5);
  } else if (id.ends_with("_l2")) {
    spec.aggregation = Aggregation::kL2;
    base = id.substr(0, id.size() - 3);
  }
  for (ExplainerKind kind :
       {ExplainerKind::kSaliency, ExplainerKind::kInputXGrad, ExplainerKind::kGuidedBp,
        ExplainerKind::kOcclusion, ExplainerKind::kShapSampl, ExplainerKind::kLime,
        ExplainerKind::kRandom, ExplainerKind::kGoldMask}) {
    if (kind_name(kind) == base) {
      spec.kind = kind;
      spec.validate();
      return spec;
    }
  }
  throw Error(ErrorCode::kBadConfig, "unknown explainer '" + std::string(id) + "'");
}

std::vector<std::string> default_explainer_ids() {
  return {"saliency_mean",  "saliency_l2", "input_x_grad_mean", "input_x_grad_l2",
          "guided_bp_mean", "guided_bp_l2", "occlusion",        "shap_sampl",
          "lime",           "random"};
}

std::uint64_t instance_seed(std::uint64_t seed, std::string_view instance_id) {
  return splitmix64(seed ^ splitmix64(fnv1a(instance_id)));
}

// ---------------------------------------------------------------------------
// Gradients

std::vector<std::vector<std::vector<double>>> grad_saliency_all(const Model& model,
                                                                std::span<const std::size_t> ids,
                                                                GradVariant variant,
                                                                std::uint64_t* flops) {
  if (ids.empty()) throw Error(ErrorCode::kEmptyInstance, "cannot explain an empty instance");
  Tensor emb = model.embed(ids);
  emb.set_requires_grad(true);
  Graph g(variant == GradVariant::kGuidedBp ? BackpropMode::kGuided : BackpropMode::kStandard);
  std::vector<Var> params = model.bind(g);
  Var x = g.variable(emb);
  ForwardResult fr = model.forward(g, params, x, nullptr);

  const std::size_t classes = model.config().num_classes;
  const std::size_t length = emb.rows();
  const std::size_t dim = emb.cols();
  std::vector<std::vector<std::vector<double>>> out(classes);
  for (std::size_t c = 0; c < classes; ++c) {
    g.backward(g.pick(fr.logits, c));
    auto grad = g.grad(x);
    auto& rows = out[c];
    rows.assign(length, std::vector<double>(dim));
    for (std::size_t j = 0; j < length; ++j) {
      for (std::size_t k = 0; k < dim; ++k) {
        double v = grad[j * dim + k];
        if (variant == GradVariant::kInputXGrad) v *= emb.at(j, k);
        rows[j][k] = v;
      }
    }
  }
  if (flops != nullptr) {
    *flops += g.flops();
    if (variant == GradVariant::kInputXGrad) *flops += classes * length * dim;
  }
  return out;
}

std::vector<std::vector<double>> grad_saliency(const Model& model,
                                               std::span<const std::size_t> ids,
                                               std::size_t target_class, GradVariant variant,
                                               std::uint64_t* flops) {
  auto all = grad_saliency_all(model, ids, variant, flops);
  if (target_class >= all.size()) {
    throw Error(ErrorCode::kShapeMismatch, "target class out of range");
  }
  return std::move(all[target_class]);
}

std::vector<double> aggregate(const std::vector<std::vector<double>>& rows, Aggregation mode) {
  std::vector<double> out;
  out.reserve(rows.size());
  for (const auto& row : rows) {
    if (row.empty()) throw Error(ErrorCode::kShapeMismatch, "cannot aggregate an empty row");
    if (mode == Aggregation::kMean) {
      out.push_back(std::accumulate(row.begin(), row.end(), 0.0) /
                    static_cast<double>(row.size()));
    } else if (mode == Aggregation::kL2) {
      double sq = 0.0;
      for (double v : row) sq += v * v;
      out.push_back(std::sqrt(sq));
    } else {
      throw Error(ErrorCode::kBadConfig, "aggregation mode NONE cannot reduce rows");
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Perturbation explainers

CoalitionValue model_coalition_value(const Model& model, std::span<const std::size_t> ids,
                                     ModelOutput output, std::uint64_t* flops) {
  if (ids.empty()) throw Error(ErrorCode::kEmptyInstance, "cannot explain an empty instance");
  return [&model, base = model.embed(ids), output, flops](std::span<const std::uint8_t> keep) {
    if (keep.size() != base.rows()) {
      throw Error(ErrorCode::kLengthMismatch, "keep-mask length differs from token count");
    }
    Tensor emb = base;
    const std::size_t dim = emb.cols();
    for (std::size_t j = 0; j < keep.size(); ++j) {
      if (keep[j] == 0) {
        std::fill_n(emb.data().begin() + static_cast<std::ptrdiff_t>(j * dim), dim, 0.0);
      }
    }
    Prediction p = predict_embeddings(model, emb, flops);
    return output == ModelOutput::kLogit ? p.logits : p.probs;
  };
}

std::vector<std::vector<double>> occlusion(const CoalitionValue& f, std::size_t num_tokens) {
  std::vector<std::uint8_t> keep(num_tokens, 1);
  const std::vector<double> full = f(keep);
  std::vector<std::vector<double>> out(full.size(), std::vector<double>(num_tokens));
  for (std::size_t j = 0; j < num_tokens; ++j) {
    keep[j] = 0;
    const std::vector<double> masked = f(keep);
    keep[j] = 1;
    for (std::size_t c = 0; c < full.size(); ++c) out[c][j] = full[c] - masked[c];
  }
  return out;
}

std::vector<double> occlusion(const Model& model, std::span<const std::size_t> ids,
                              std::size_t target_class, std::uint64_t* flops) {
  auto f = model_coalition_value(model, ids, ModelOutput::kLogit, flops);
  return pick_row(occlusion(f, ids.size()), target_class);
}

std::vector<std::vector<double>> shapley_from_permutations(
    const CoalitionValue& f, std::size_t num_tokens,
    const std::vector<std::vector<std::size_t>>& permutations) {
  if (permutations.empty()) throw Error(ErrorCode::kBadConfig, "no permutations given");
  std::vector<std::uint8_t> keep(num_tokens, 0);
  const std::vector<double> empty = f(keep);
  std::fill(keep.begin(), keep.end(), 1);
  const std::vector<double> full = f(keep);
  const std::size_t classes = empty.size();

  std::vector<std::vector<double>> phi(classes, std::vector<double>(num_tokens, 0.0));
  std::vector<double> previous;
  std::vector<double> current;
  for (const auto& order : permutations) {
    if (order.size() != num_tokens) {
      throw Error(ErrorCode::kLengthMismatch, "permutation length differs from token count");
    }
    std::fill(keep.begin(), keep.end(), 0);
    previous = empty;
    for (std::size_t step = 0; step < num_tokens; ++step) {
      const std::size_t j = order[step];
      keep[j] = 1;
      current = step + 1 == num_tokens ? full : f(keep);
      for (std::size_t c = 0; c < classes; ++c) phi[c][j] += current[c] - previous[c];
      std::swap(previous, current);
    }
  }
  const double inv = 1.0 / static_cast<double>(permutations.size());
  for (auto& row : phi) {
    for (double& v : row) v *= inv;
  }
  return phi;
}

std::vector<std::vector<double>> shapley_sampling(const CoalitionValue& f, std::size_t num_tokens,
                                                  std::size_t samples, std::uint64_t seed) {
  if (samples == 0) throw Error(ErrorCode::kBadConfig, "shapley samples must be positive");
  std::mt19937_64 rng(seed);
  std::vector<std::vector<std::size_t>> orders(samples, std::vector<std::size_t>(num_tokens));
  for (auto& order : orders) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
  }
  return shapley_from_permutations(f, num_tokens, orders);
}

std::vector<double> shapley_sampling(const Model& model, std::span<const std::size_t> ids,
                                     std::size_t target_class, std::size_t samples,
                                     std::uint64_t seed, std::uint64_t* flops) {
  auto f = model_coalition_value(model, ids, ModelOutput::kLogit, flops);
  return pick_row(shapley_sampling(f, ids.size(), samples, seed), target_class);
}

std::vector<std::vector<double>> lime(const CoalitionValue& f, std::size_t num_tokens,
                                      const LimeOptions& options, std::uint64_t seed) {
  const std::size_t n = options.samples;
  if (num_tokens == 0) throw Error(ErrorCode::kEmptyInstance, "cannot explain an empty instance");
  if (n < num_tokens + 2) {
    throw Error(ErrorCode::kBadConfig, "LIME needs at least L + 2 perturbations");
  }
  if (!(options.kernel_width > 0.0)) throw Error(ErrorCode::kBadConfig, "kernel width");

  std::mt19937_64 rng(seed);
  std::bernoulli_distribution coin(0.5);
  const auto cols = static_cast<Eigen::Index>(num_tokens + 1);
  Eigen::MatrixXd design(static_cast<Eigen::Index>(n), cols);
  Eigen::VectorXd weights(static_cast<Eigen::Index>(n));
  Eigen::MatrixXd targets;
  std::vector<std::uint8_t> keep(num_tokens);
  const double width2 = options.kernel_width * options.kernel_width;

  for (std::size_t s = 0; s < n; ++s) {
    std::size_t kept = 0;
    for (std::size_t j = 0; j < num_tokens; ++j) {
      keep[j] = s == 0 ? 1 : static_cast<std::uint8_t>(coin(rng));
      kept += keep[j];
    }
    const auto row = static_cast<Eigen::Index>(s);
    design(row, 0) = 1.0;
    for (std::size_t j = 0; j < num_tokens; ++j) {
      design(row, static_cast<Eigen::Index>(j + 1)) = keep[j];
    }
    // cos(mask, 1) = |mask| / (sqrt(|mask|) sqrt(L)); the empty mask has no
    // direction and is treated as orthogonal.
    const double cosine =
        kept == 0 ? 0.0 : std::sqrt(static_cast<double>(kept) / static_cast<double>(num_tokens));
    const double distance = 1.0 - cosine;
    weights(row) = std::exp(-distance * distance / width2);

    const std::vector<double> y = f(keep);
    if (s == 0) targets.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(y.size()));
    for (std::size_t c = 0; c < y.size(); ++c) targets(row, static_cast<Eigen::Index>(c)) = y[c];
  }

  Eigen::MatrixXd gram = design.transpose() * weights.asDiagonal() * design;
  for (Eigen::Index j = 1; j < cols; ++j) gram(j, j) += options.ridge;
  const Eigen::MatrixXd rhs = design.transpose() * weights.asDiagonal() * targets;
  Eigen::LDLT<Eigen::MatrixXd> solver(gram);
  const double scale = gram.diagonal().cwiseAbs().maxCoeff();
  if (solver.info() != Eigen::Success || !solver.isPositive() ||
      solver.vectorD().minCoeff() <= 1e-12 * scale) {
    throw Error(ErrorCode::kSingularFit, "LIME normal equations are singular");
  }
  const Eigen::MatrixXd beta = solver.solve(rhs);
  if (!beta.allFinite()) throw Error(ErrorCode::kSingularFit, "LIME solution is not finite");

  std::vector<std::vector<double>> out(static_cast<std::size_t>(beta.cols()),
                                       std::vector<double>(num_tokens));
  for (Eigen::Index c = 0; c < beta.cols(); ++c) {
    for (std::size_t j = 0; j < num_tokens; ++j) {
      out[static_cast<std::size_t>(c)][j] = beta(static_cast<Eigen::Index>(j + 1), c);
    }
  }
  return out;
}

std::vector<double> lime(const Model& model, std::span<const std::size_t> ids,
                         std::size_t target_class, const LimeOptions& options,
                         std::uint64_t seed, std::uint64_t* flops) {
  auto f = model_coalition_value(model, ids, ModelOutput::kProbability, flops);
  return pick_row(lime(f, ids.size(), options, seed), target_class);
}

std::vector<std::vector<double>> random_saliency(std::size_t num_tokens, std::size_t num_classes,
                                                 std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  std::vector<std::vector<double>> out(num_classes, std::vector<double>(num_tokens));
  for (auto& row : out) {
    for (double& v : row) v = dist(rng);
  }
  return out;
}

SaliencyMap explain(const Model& model, const Instance& instance, const ExplainerSpec& spec,
                    std::string model_id) {
  spec.validate();
  const auto& ids = instance.token_ids;
  if (ids.empty()) throw Error(ErrorCode::kEmptyInstance, "cannot explain " + instance.id);
  SaliencyMap map;
  map.instance_id = instance.id;
  map.explainer = spec.id();
  // The model id enters the stream so stochastic explainers, including the
  // random baseline, draw independently for every model.
  const std::uint64_t seed = instance_seed(spec.seed ^ fnv1a(model_id), instance.id);
  map.model_id = std::move(model_id);
  std::uint64_t* flops = &map.flops;

  switch (spec.kind) {
    case ExplainerKind::kSaliency:
    case ExplainerKind::kInputXGrad:
    case ExplainerKind::kGuidedBp: {
      const GradVariant variant = spec.kind == ExplainerKind::kSaliency     ? GradVariant::kSaliency
                                  : spec.kind == ExplainerKind::kInputXGrad ? GradVariant::kInputXGrad
                                                                            : GradVariant::kGuidedBp;
      for (const auto& rows : grad_saliency_all(model, ids, variant, flops)) {
        map.scores.push_back(aggregate(rows, spec.aggregation));
        map.flops += rows.size() * (rows.empty() ? 0 : rows.front().size());
      }
      break;
    }
    case ExplainerKind::kOcclusion:
      map.scores = occlusion(model_coalition_value(model, ids, ModelOutput::kLogit, flops),
                             ids.size());
      break;
    case ExplainerKind::kShapSampl:
      map.scores = shapley_sampling(model_coalition_value(model, ids, spec.shapley_output, flops),
                                    ids.size(), spec.shapley_samples, seed);
      break;
    case ExplainerKind::kLime:
      map.scores = lime(model_coalition_value(model, ids, spec.lime_output, flops), ids.size(),
                        {spec.lime_samples, spec.lime_kernel_width, spec.lime_ridge}, seed);
      break;
    case ExplainerKind::kRandom:
      map.scores = random_saliency(ids.size(), model.config().num_classes, seed);
      break;
    case ExplainerKind::kGoldMask:
      if (instance.rationale.size() != ids.size()) {
        throw Error(ErrorCode::kLengthMismatch, "rationale length differs for " + instance.id);
      }
      map.scores.assign(model.config().num_classes,
                        std::vector<double>(instance.rationale.begin(), instance.rationale.end()));
      break;
  }
  return map;
}

// ---------------------------------------------------------------------------
// Serialization

json to_json(const SaliencyMap& map) {
  return json{{"instance_id", map.instance_id}, {"explainer", map.explainer},
              {"model_id", map.model_id},       {"scores", map.scores},
              {"flops", map.flops},             {"target_class_used", map.target_class_used},
              {"corpus_hash", map.corpus_hash}};
}

SaliencyMap saliency_map_from_json(const json& j) {
  SaliencyMap map;
  map.instance_id = j.at("instance_id").get<std::string>();
  map.explainer = j.at("explainer").get<std::string>();
  map.model_id = j.at("model_id").get<std::string>();
  map.scores = j.at("scores").get<std::vector<std::vector<double>>>();
  map.flops = j.at("flops").get<std::uint64_t>();
  map.target_class_used = j.value("target_class_used", std::string("all"));
  map.corpus_hash = j.value("corpus_hash", std::string());
  for (const auto& row : map.scores) {
    if (row.size() != map.num_tokens()) {
      throw Error(ErrorCode::kLengthMismatch, "ragged saliency rows for " + map.instance_id);
    }
    for (double v : row) {
      if (!std::isfinite(v)) throw Error(ErrorCode::kNonFinite, "saliency for " + map.instance_id);
    }
  }
  return map;
}

void write_saliency_jsonl(const std::filesystem::path& path, const std::vector<SaliencyMap>& maps) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  for (const SaliencyMap& map : maps) out << to_json(map).dump() << '\n';
  if (!out) throw Error(ErrorCode::kIo, "failed writing " + path.string());
}

std::vector<SaliencyMap> read_saliency_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot read " + path.string());
  std::vector<SaliencyMap> maps;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      maps.push_back(saliency_map_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw Error(ErrorCode::kParseError,
                  path.string() + " line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return maps;
}

}  // namespace xaidiag
