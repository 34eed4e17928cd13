#include "xaidiag/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iterator>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_map>

#include "xaidiag/error.hpp"
#include "xaidiag/stats.hpp"

namespace xaidiag {

using nlohmann::json;

namespace {

std::unordered_map<std::string, const SaliencyMap*> index_maps(
    const std::vector<SaliencyMap>& maps) {
  std::unordered_map<std::string, const SaliencyMap*> index;
  for (const SaliencyMap& m : maps) index.emplace(m.instance_id, &m);
  return index;
}

const SaliencyMap& find_map(const std::unordered_map<std::string, const SaliencyMap*>& index,
                            const Instance& inst) {
  auto it = index.find(inst.id);
  if (it == index.end()) {
    throw Error(ErrorCode::kLengthMismatch, "no saliency map for instance " + inst.id);
  }
  const SaliencyMap& m = *it->second;
  if (m.num_tokens() != inst.size()) {
    throw Error(ErrorCode::kLengthMismatch, "saliency length differs for instance " + inst.id);
  }
  if (inst.label >= m.num_classes()) {
    throw Error(ErrorCode::kUnknownLabel, "saliency map lacks the gold class of " + inst.id);
  }
  return m;
}

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------
// Human agreement

HumanAgreement human_agreement(const std::vector<SaliencyMap>& maps,
                               const std::vector<Instance>& instances) {
  const auto index = index_maps(maps);
  HumanAgreement out;
  double total = 0.0;
  for (const Instance& inst : instances) {
    const SaliencyMap& m = find_map(index, inst);
    if (std::none_of(inst.rationale.begin(), inst.rationale.end(),
                     [](std::uint8_t r) { return r != 0; })) {
      ++out.skipped;
      continue;
    }
    total += average_precision(inst.rationale, m.scores[inst.label]);
    ++out.scored;
  }
  if (out.scored == 0) throw Error(ErrorCode::kNoPositives, "no instance has a gold rationale");
  out.map = total / static_cast<double>(out.scored);
  return out;
}

// ---------------------------------------------------------------------------
// Confidence indication

std::vector<double> saliency_distance(const std::vector<std::vector<double>>& scores,
                                      std::size_t predicted) {
  const std::size_t classes = scores.size();
  if (classes < 2) throw Error(ErrorCode::kShapeMismatch, "saliency distance needs two classes");
  if (predicted >= classes) throw Error(ErrorCode::kShapeMismatch, "predicted class out of range");
  const std::size_t length = scores.front().size();
  const auto& own = scores[predicted];
  if (classes == 2) {
    const auto& other = scores[1 - predicted];
    double total = 0.0;
    for (std::size_t j = 0; j < length; ++j) total += own[j] - other[j];
    return {total};
  }
  std::vector<double> out(3, 0.0);
  for (std::size_t j = 0; j < length; ++j) {
    double hi = -std::numeric_limits<double>::infinity();
    double lo = std::numeric_limits<double>::infinity();
    double sum = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
      if (c == predicted) continue;
      const double d = own[j] - scores[c][j];
      hi = std::max(hi, d);
      lo = std::min(lo, d);
      sum += d;
    }
    out[0] += hi;
    out[1] += lo;
    out[2] += sum / static_cast<double>(classes - 1);
  }
  return out;
}

std::size_t confidence_decile(double confidence) {
  const double clamped = std::clamp(confidence, 0.0, 1.0);
  return std::min<std::size_t>(9, static_cast<std::size_t>(clamped * 10.0));
}

std::vector<std::size_t> upsample_deciles(std::span<const std::size_t> indices,
                                          std::span<const double> confidences,
                                          std::mt19937_64& rng) {
  std::array<std::vector<std::size_t>, 10> bins;
  for (std::size_t i : indices) bins[confidence_decile(confidences[i])].push_back(i);
  std::size_t largest = 0;
  for (const auto& bin : bins) largest = std::max(largest, bin.size());
  std::vector<std::size_t> out(indices.begin(), indices.end());
  for (const auto& bin : bins) {
    if (bin.empty()) continue;
    std::uniform_int_distribution<std::size_t> pick(0, bin.size() - 1);
    for (std::size_t extra = bin.size(); extra < largest; ++extra) out.push_back(bin[pick(rng)]);
  }
  return out;
}

ConfidenceResult confidence_indication(const std::vector<std::vector<double>>& features,
                                       std::span<const double> confidences,
                                       const ConfidenceOptions& options) {
  const std::size_t n = features.size();
  if (confidences.size() != n) {
    throw Error(ErrorCode::kLengthMismatch, "features and confidences differ in length");
  }
  if (n < 50) throw Error(ErrorCode::kBadConfig, "confidence indication needs >= 50 instances");
  if (options.folds < 2) throw Error(ErrorCode::kBadConfig, "confidence indication needs >= 2 folds");

  ConfidenceResult out;
  if (std::all_of(confidences.begin(), confidences.end(),
                  [&](double c) { return c == confidences[0]; })) {
    out.degenerate = true;
    return out;
  }

  std::mt19937_64 rng(options.seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t dim = features.front().size();

  for (std::size_t fold = 0; fold < options.folds; ++fold) {
    const std::size_t begin = fold * n / options.folds;
    const std::size_t end = (fold + 1) * n / options.folds;
    std::vector<std::size_t> train;
    for (std::size_t i = 0; i < n; ++i) {
      if (i < begin || i >= end) train.push_back(order[i]);
    }
    if (options.upsample) train = upsample_deciles(train, confidences, rng);

    std::vector<double> mean(dim, 0.0);
    std::vector<double> scale(dim, 0.0);
    for (std::size_t i : train) {
      for (std::size_t k = 0; k < dim; ++k) mean[k] += features[i][k];
    }
    for (double& m : mean) m /= static_cast<double>(train.size());
    for (std::size_t i : train) {
      for (std::size_t k = 0; k < dim; ++k) {
        const double d = features[i][k] - mean[k];
        scale[k] += d * d;
      }
    }
    for (double& s : scale) {
      s = std::sqrt(s / static_cast<double>(train.size()));
      if (!(s > 0.0)) s = 1.0;
    }
    auto standardize = [&](const std::vector<double>& f) {
      std::vector<double> z(dim);
      for (std::size_t k = 0; k < dim; ++k) z[k] = (f[k] - mean[k]) / scale[k];
      return z;
    };

    std::vector<std::vector<double>> x;
    std::vector<double> y;
    x.reserve(train.size());
    for (std::size_t i : train) {
      x.push_back(standardize(features[i]));
      y.push_back(confidences[i]);
    }
    const LogisticModel model = logistic_fit(x, y, options.l2);

    double abs_total = 0.0;
    double worst = 0.0;
    for (std::size_t r = begin; r < end; ++r) {
      const std::size_t i = order[r];
      const double err = std::abs(model.predict(standardize(features[i])) - confidences[i]);
      abs_total += err;
      worst = std::max(worst, err);
    }
    out.mae += abs_total / static_cast<double>(end - begin);
    out.max_error += worst;
  }
  out.mae /= static_cast<double>(options.folds);
  out.max_error /= static_cast<double>(options.folds);
  return out;
}

// ---------------------------------------------------------------------------
// Faithfulness

std::size_t masked_count(std::size_t percent, std::size_t length) {
  return (percent * length + 99) / 100;
}

std::vector<std::size_t> mask_most_salient(std::span<const std::size_t> ids,
                                           std::span<const double> saliency, std::size_t count) {
  if (ids.size() != saliency.size()) {
    throw Error(ErrorCode::kLengthMismatch, "saliency length differs from token count");
  }
  std::vector<std::size_t> order(ids.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return saliency[a] > saliency[b]; });
  std::vector<std::size_t> out(ids.begin(), ids.end());
  for (std::size_t r = 0; r < std::min(count, out.size()); ++r) out[order[r]] = kMaskId;
  return out;
}

ThresholdCurve faithfulness(const Model& model, const std::vector<Instance>& instances,
                            const std::vector<SaliencyMap>& maps, FaithfulnessVariant variant) {
  if (instances.empty()) throw Error(ErrorCode::kBadConfig, "faithfulness needs instances");
  const auto index = index_maps(maps);
  std::vector<const SaliencyMap*> aligned;
  std::vector<std::size_t> golds;
  for (const Instance& inst : instances) {
    aligned.push_back(&find_map(index, inst));
    golds.push_back(inst.label);
  }
  ThresholdCurve curve;
  std::vector<std::size_t> preds(instances.size());
  for (std::size_t t = 0; t < curve.thresholds.size(); ++t) {
    const auto percent = static_cast<std::size_t>(curve.thresholds[t]);
    for (std::size_t i = 0; i < instances.size(); ++i) {
      const Instance& inst = instances[i];
      const auto& row = aligned[i]->scores[inst.label];
      const auto masked =
          mask_most_salient(inst.token_ids, row, masked_count(percent, inst.size()));
      preds[i] = predict(model, masked).label;
    }
    curve.performance[t] = macro_f1(preds, golds, model.config().num_classes);
  }
  if (variant == FaithfulnessVariant::kTable) {
    curve.auc = auc_trapezoid(curve.thresholds, curve.performance);
  } else {
    std::array<double, 11> drop{};
    for (std::size_t t = 0; t < drop.size(); ++t) {
      drop[t] = curve.performance[0] - curve.performance[t];
    }
    curve.auc = auc_trapezoid(curve.thresholds, drop);
  }
  return curve;
}

// ---------------------------------------------------------------------------
// Consistency

double mean_abs_difference(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.empty()) {
    throw Error(ErrorCode::kLengthMismatch, "saliency rows differ in length");
  }
  double total = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) total += std::abs(a[j] - b[j]);
  return total / static_cast<double>(a.size());
}

ConsistencyResult rationale_consistency(
    const std::vector<std::vector<ActivationSummary>>& activations,
    const std::vector<std::vector<std::vector<double>>>& saliency, ActivationDistance distance,
    RcPairing pairing) {
  const std::size_t models = activations.size();
  if (models < 2 || saliency.size() != models) {
    throw Error(ErrorCode::kBadConfig, "rationale consistency needs >= 2 aligned models");
  }
  const std::size_t n = activations.front().size();
  for (std::size_t m = 0; m < models; ++m) {
    if (activations[m].size() != n || saliency[m].size() != n) {
      throw Error(ErrorCode::kLengthMismatch, "models cover different instance counts");
    }
  }

  ConsistencyResult out;
  out.points = n;
  std::vector<double> pooled_act;
  std::vector<double> pooled_sal;
  double rho_total = 0.0;
  double p_total = 0.0;
  std::vector<double> act(n);
  std::vector<double> sal(n);
  for (std::size_t a = 0; a < models; ++a) {
    for (std::size_t b = a + 1; b < models; ++b) {
      for (std::size_t i = 0; i < n; ++i) {
        act[i] = activation_distance(activations[a][i], activations[b][i], distance);
        sal[i] = mean_abs_difference(saliency[a][i], saliency[b][i]);
      }
      const ScaledValues act_scaled = minmax_scale(act);
      const ScaledValues sal_scaled = minmax_scale(sal);
      if (act_scaled.constant || sal_scaled.constant) {
        ++out.groups_excluded;
        continue;
      }
      ++out.groups_used;
      if (pairing == RcPairing::kPooled) {
        pooled_act.insert(pooled_act.end(), act_scaled.values.begin(), act_scaled.values.end());
        pooled_sal.insert(pooled_sal.end(), sal_scaled.values.begin(), sal_scaled.values.end());
        continue;
      }
      const Correlation c = spearman(act_scaled.values, sal_scaled.values);
      out.per_pair_rho.push_back(c.rho);
      rho_total += c.rho;
      p_total += c.p;
    }
  }
  if (out.groups_used == 0) {
    throw Error(ErrorCode::kConstantSeries, "every model pair has a constant distance series");
  }
  if (pairing == RcPairing::kPooled) {
    const Correlation c = spearman(pooled_act, pooled_sal);
    out.rho = c.rho;
    out.p = c.p;
    out.points = pooled_act.size();
  } else {
    out.rho = rho_total / static_cast<double>(out.groups_used);
    out.p = p_total / static_cast<double>(out.groups_used);
  }
  return out;
}

double jaccard(std::span<const std::size_t> a, std::span<const std::size_t> b) {
  const std::set<std::size_t> sa(a.begin(), a.end());
  const std::set<std::size_t> sb(b.begin(), b.end());
  std::size_t common = 0;
  for (std::size_t v : sa) common += sb.count(v);
  const std::size_t uni = sa.size() + sb.size() - common;
  return uni == 0 ? 1.0 : static_cast<double>(common) / static_cast<double>(uni);
}

PairSelection select_pairs(const std::vector<Instance>& instances, std::size_t n_overlap,
                           std::size_t n_random, std::uint64_t seed) {
  const std::size_t n = instances.size();
  if (n < 2) throw Error(ErrorCode::kTooFewPairs, "dataset consistency needs >= 2 instances");
  std::vector<std::vector<std::size_t>> sets(n);
  for (std::size_t i = 0; i < n; ++i) {
    sets[i] = instances[i].token_ids;
    std::sort(sets[i].begin(), sets[i].end());
    sets[i].erase(std::unique(sets[i].begin(), sets[i].end()), sets[i].end());
  }
  struct Scored {
    double overlap;
    std::size_t i;
    std::size_t j;
  };
  std::vector<Scored> all;
  all.reserve(n * (n - 1) / 2);
  std::vector<std::size_t> common;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      common.clear();
      std::set_intersection(sets[i].begin(), sets[i].end(), sets[j].begin(), sets[j].end(),
                            std::back_inserter(common));
      const std::size_t uni = sets[i].size() + sets[j].size() - common.size();
      const double overlap =
          uni == 0 ? 1.0 : static_cast<double>(common.size()) / static_cast<double>(uni);
      all.push_back({overlap, i, j});
    }
  }
  std::stable_sort(all.begin(), all.end(),
                   [](const Scored& a, const Scored& b) { return a.overlap > b.overlap; });

  PairSelection out;
  out.too_few = all.size() < n_overlap + n_random;
  const std::size_t top = std::min(n_overlap, all.size());
  for (std::size_t r = 0; r < top; ++r) out.pairs.emplace_back(all[r].i, all[r].j);

  std::vector<std::size_t> rest(all.size() - top);
  std::iota(rest.begin(), rest.end(), top);
  const std::size_t draws = std::min(n_random, rest.size());
  std::mt19937_64 rng(seed);
  for (std::size_t r = 0; r < draws; ++r) {
    std::uniform_int_distribution<std::size_t> pick(r, rest.size() - 1);
    std::swap(rest[r], rest[pick(rng)]);
    out.pairs.emplace_back(all[rest[r]].i, all[rest[r]].j);
  }
  return out;
}

namespace {

std::vector<double> sum_normalized(const std::vector<double>& row) {
  double total = 0.0;
  for (double v : row) total += std::abs(v);
  std::vector<double> out(row);
  if (total > 0.0) {
    for (double& v : out) v /= total;
  }
  return out;
}

}  // namespace

ConsistencyResult dataset_consistency(const std::vector<Instance>& instances,
                                      const std::vector<ActivationSummary>& activations,
                                      const std::vector<SaliencyMap>& maps,
                                      const DcOptions& options) {
  const std::size_t n = instances.size();
  if (activations.size() != n || maps.size() != n) {
    throw Error(ErrorCode::kLengthMismatch, "instances, activations and maps must align");
  }
  const PairSelection selection =
      select_pairs(instances, options.n_overlap, options.n_random, options.seed);
  if (selection.pairs.size() < 3) {
    throw Error(ErrorCode::kTooFewPairs, "dataset consistency needs >= 3 instance pairs");
  }

  // Normalized rows per (instance, class), built on first use.
  std::vector<std::vector<std::vector<double>>> normalized(n);
  auto row = [&](std::size_t i, std::size_t c) -> const std::vector<double>& {
    if (maps[i].instance_id != instances[i].id) {
      throw Error(ErrorCode::kLengthMismatch, "map order differs from instance order");
    }
    if (c >= maps[i].num_classes()) {
      throw Error(ErrorCode::kUnknownLabel, "saliency map lacks class for " + instances[i].id);
    }
    if (normalized[i].empty()) normalized[i].resize(maps[i].num_classes());
    auto& cached = normalized[i][c];
    if (cached.empty()) cached = sum_normalized(maps[i].scores[c]);
    return cached;
  };

  std::vector<double> act;
  std::vector<double> sal;
  for (const auto& [i, j] : selection.pairs) {
    act.push_back(activation_distance(activations[i], activations[j], options.distance));
    const std::size_t ci = instances[i].label;
    const std::size_t cj = options.policy == DcClassPolicy::kOwnGold ? instances[j].label : ci;
    const auto& ri = row(i, ci);
    const auto& rj = row(j, cj);
    const std::size_t len = std::min(ri.size(), rj.size());
    sal.push_back(mean_abs_difference(std::span(ri).first(len), std::span(rj).first(len)));
  }
  const ScaledValues act_scaled = minmax_scale(act);
  const ScaledValues sal_scaled = minmax_scale(sal);
  const Correlation c = spearman(act_scaled.values, sal_scaled.values);
  ConsistencyResult out;
  out.rho = c.rho;
  out.p = c.p;
  out.groups_used = 1;
  out.points = selection.pairs.size();
  return out;
}

// ---------------------------------------------------------------------------
// Reports

std::vector<PropertyColumn> property_columns(FaithfulnessVariant variant) {
  return {{"HA_map", true, true},
          {"HA_map_randominit", true, false},
          {"CI_mae", false, true},
          {"CI_mae_upsampled", false, false},
          {"F_auc_tp", variant == FaithfulnessVariant::kEquation, true},
          {"RC_rho", true, true},
          {"DC_rho", true, true},
          {"flops_mean", false, false}};
}

void normalize_report(std::vector<PropertyReport>& reports, NormScope scope,
                      FaithfulnessVariant variant) {
  std::map<std::pair<std::string, std::string>, std::vector<PropertyReport*>> groups;
  for (PropertyReport& r : reports) {
    r.normalized.clear();
    const std::string arch = scope == NormScope::kPerBlock ? r.architecture : std::string();
    groups[{r.dataset, arch}].push_back(&r);
  }
  const auto columns = property_columns(variant);
  for (auto& [key, members] : groups) {
    std::set<std::string> explainers;
    for (const PropertyReport* r : members) explainers.insert(r->explainer);
    if (explainers.size() < 2) {
      throw Error(ErrorCode::kBadConfig, "normalization needs >= 2 explainers per group");
    }
    for (const PropertyColumn& col : columns) {
      std::vector<PropertyReport*> present;
      std::vector<double> values;
      for (PropertyReport* r : members) {
        auto it = r->raw.find(col.key);
        if (it == r->raw.end() || !std::isfinite(it->second)) continue;
        present.push_back(r);
        values.push_back(it->second);
      }
      if (present.empty()) continue;
      const ScaledValues scaled = minmax_scale(values);
      for (std::size_t i = 0; i < present.size(); ++i) {
        const double v = scaled.values[i];
        present[i]->normalized[col.key] = col.higher_is_better || scaled.constant ? v : 1.0 - v;
        if (scaled.constant) {
          present[i]->notes.push_back(std::string("constant column ") + col.key + " set to 0.5");
        }
      }
    }
  }
  for (PropertyReport& r : reports) {
    double total = 0.0;
    std::size_t count = 0;
    for (const PropertyColumn& col : columns) {
      auto it = r.normalized.find(col.key);
      if (!col.in_mean || it == r.normalized.end()) continue;
      total += it->second;
      ++count;
    }
    if (count > 0) r.normalized["mean"] = total / static_cast<double>(count);
  }
}

json to_json(const PropertyReport& report) {
  auto numbers = [](const std::map<std::string, double>& values) {
    json out = json::object();
    for (const auto& [k, v] : values) {
      if (std::isfinite(v)) {
        out[k] = v;
      } else {
        out[k] = nullptr;
      }
    }
    return out;
  };
  return json{{"dataset", report.dataset},
              {"architecture", report.architecture},
              {"explainer", report.explainer},
              {"K", report.k},
              {"raw", numbers(report.raw)},
              {"normalized", numbers(report.normalized)},
              {"notes", report.notes}};
}

PropertyReport property_report_from_json(const json& j) {
  PropertyReport r;
  try {
    r.dataset = j.at("dataset").get<std::string>();
    r.architecture = j.at("architecture").get<std::string>();
    r.explainer = j.at("explainer").get<std::string>();
    r.k = j.value("K", std::size_t{0});
    for (const char* field : {"raw", "normalized"}) {
      auto& target = std::string(field) == "raw" ? r.raw : r.normalized;
      for (const auto& [k, v] : j.at(field).items()) {
        target[k] = v.is_null() ? std::nan("") : v.get<double>();
      }
    }
    r.notes = j.value("notes", std::vector<std::string>{});
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kParseError, std::string("property report: ") + e.what());
  }
  return r;
}

std::string reports_to_csv(const std::vector<PropertyReport>& reports,
                           FaithfulnessVariant variant) {
  const auto columns = property_columns(variant);
  std::ostringstream out;
  out << "dataset,architecture,explainer,K";
  for (const auto& col : columns) out << ",raw_" << col.key;
  for (const char* extra : {"RC_p", "DC_p"}) out << ",raw_" << extra;
  for (const auto& col : columns) out << ",norm_" << col.key;
  out << ",norm_mean\n";
  auto cell = [](const std::map<std::string, double>& values, const std::string& key) {
    auto it = values.find(key);
    return it == values.end() ? std::string() : format_number(it->second);
  };
  for (const PropertyReport& r : reports) {
    out << r.dataset << ',' << r.architecture << ',' << r.explainer << ',' << r.k;
    for (const auto& col : columns) out << ',' << cell(r.raw, col.key);
    for (const char* extra : {"RC_p", "DC_p"}) out << ',' << cell(r.raw, extra);
    for (const auto& col : columns) out << ',' << cell(r.normalized, col.key);
    out << ',' << cell(r.normalized, "mean") << '\n';
  }
  return out.str();
}

std::string curves_to_csv(const std::vector<LabeledCurve>& curves) {
  std::ostringstream out;
  out << "dataset,architecture,explainer,model_id,threshold,performance\n";
  for (const LabeledCurve& c : curves) {
    for (std::size_t t = 0; t < c.curve.thresholds.size(); ++t) {
      out << c.dataset << ',' << c.architecture << ',' << c.explainer << ',' << c.model_id << ','
          << format_number(c.curve.thresholds[t]) << ','
          << format_number(c.curve.performance[t]) << '\n';
    }
  }
  return out.str();
}

}  // namespace xaidiag
