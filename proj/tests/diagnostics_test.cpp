#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "support.hpp"
#include "xaidiag/diagnostics.hpp"
#include "xaidiag/error.hpp"

using namespace xaidiag;
using testing::make_instance;

namespace {

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("no error thrown");
  return ErrorCode::kIo;
}

SaliencyMap map_for(const Instance& inst, std::vector<std::vector<double>> scores,
                    std::string model = "m") {
  SaliencyMap m;
  m.instance_id = inst.id;
  m.explainer = "fixture";
  m.model_id = std::move(model);
  m.scores = std::move(scores);
  return m;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST_CASE("human agreement averages per-instance AP of the gold row") {
  const Instance a = make_instance("a", {3, 4, 5, 6}, 1, {0, 1, 1, 0});
  const Instance b = make_instance("b", {3, 4}, 0, {1, 0});
  const Instance c = make_instance("c", {3, 4}, 0, {0, 0});
  std::vector<SaliencyMap> maps{
      // Gold row of a ranks the rationale 2nd and 3rd: AP 7/12.
      map_for(a, {{0, 0, 0, 0}, {0.9, 0.8, 0.7, 0.1}}),
      map_for(b, {{1.0, 0.0}, {0.0, 1.0}}),
      map_for(c, {{1.0, 0.0}, {0.0, 1.0}}),
  };
  const HumanAgreement ha = human_agreement(maps, {a, b, c});
  CHECK(ha.scored == 2);
  CHECK(ha.skipped == 1);
  CHECK(ha.map == doctest::Approx((7.0 / 12.0 + 1.0) / 2.0).epsilon(1e-14));

  CHECK(code_of([&] { human_agreement(maps, {c}); }) == ErrorCode::kNoPositives);
  const Instance d = make_instance("d", {3}, 0, {1});
  CHECK(code_of([&] { human_agreement(maps, {d}); }) == ErrorCode::kLengthMismatch);
}

TEST_CASE("saliency distance features") {
  CHECK(saliency_distance({{1, 2}, {0, 5}}, 0) == std::vector<double>{-2});
  CHECK(saliency_distance({{1, 2}, {0, 5}}, 1) == std::vector<double>{2});
  // Token 0 differences to the other classes: {1, -1}; token 1: {2, 4}.
  const auto three = saliency_distance({{1, 5}, {0, 3}, {2, 1}}, 0);
  REQUIRE(three.size() == 3);
  CHECK(three[0] == doctest::Approx(1 + 4));
  CHECK(three[1] == doctest::Approx(-1 + 2));
  CHECK(three[2] == doctest::Approx(0 + 3));
}

TEST_CASE("confidence deciles and up-sampling") {
  CHECK(confidence_decile(0.0) == 0);
  CHECK(confidence_decile(0.0999) == 0);
  CHECK(confidence_decile(0.1) == 1);
  CHECK(confidence_decile(0.95) == 9);
  CHECK(confidence_decile(1.0) == 9);

  std::vector<double> balanced;
  for (int k = 0; k < 10; ++k) {
    for (int r = 0; r < 4; ++r) balanced.push_back(0.05 + 0.1 * k);
  }
  std::vector<std::size_t> idx(balanced.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(1);
  CHECK(upsample_deciles(idx, balanced, rng) == idx);

  const std::vector<double> skewed{0.95, 0.96, 0.97, 0.98, 0.55, 0.15};
  const std::vector<std::size_t> all{0, 1, 2, 3, 4, 5};
  const auto up = upsample_deciles(all, skewed, rng);
  CHECK(std::equal(all.begin(), all.end(), up.begin()));
  std::map<std::size_t, std::size_t> bins;
  for (std::size_t i : up) ++bins[confidence_decile(skewed[i])];
  CHECK(bins.size() == 3);
  for (const auto& [bin, count] : bins) CHECK(count == 4);
}

TEST_CASE("confidence indication") {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n01;
  std::vector<std::vector<double>> features;
  std::vector<double> conf;
  for (int i = 0; i < 200; ++i) {
    const double sd = n01(rng);
    features.push_back({sd});
    conf.push_back(sigmoid(2.0 * sd + 0.5));
  }
  const ConfidenceResult r = confidence_indication(features, conf);
  CHECK(r.mae <= 0.01);
  CHECK(r.max_error >= r.mae);
  CHECK_FALSE(r.degenerate);
  ConfidenceOptions up;
  up.upsample = true;
  CHECK(confidence_indication(features, conf, up).mae <= 0.01);

  const std::vector<double> flat(200, 0.7);
  const ConfidenceResult d = confidence_indication(features, flat);
  CHECK(d.degenerate);
  CHECK(d.mae == doctest::Approx(0.0));

  features.resize(40);
  conf.resize(40);
  CHECK(code_of([&] { confidence_indication(features, conf); }) == ErrorCode::kBadConfig);
}

TEST_CASE("masking helpers") {
  CHECK(masked_count(0, 7) == 0);
  CHECK(masked_count(10, 7) == 1);
  CHECK(masked_count(50, 7) == 4);
  CHECK(masked_count(100, 7) == 7);
  CHECK(masked_count(20, 10) == 2);
  const std::vector<std::size_t> ids{10, 11, 12, 13};
  const std::vector<double> sal{0.5, 0.9, 0.5, 0.1};
  CHECK(mask_most_salient(ids, sal, 2) == std::vector<std::size_t>{kMaskId, kMaskId, 12, 13});
  CHECK(mask_most_salient(ids, sal, 0) == ids);
}

TEST_CASE("faithfulness endpoints and variants") {
  const Corpus corpus = synth_keyword_corpus(300, 2, 60, 5);
  const ModelConfig config =
      ModelConfig::defaults(Architecture::kBagOfEmbeddings, corpus.vocab.size(), 2);
  const TrainResult trained = train_model(config, corpus.splits.train, corpus.splits.dev, 3);
  const auto& test = corpus.splits.test;

  std::vector<SaliencyMap> gold, random;
  for (const Instance& inst : test) {
    gold.push_back(explain(*trained.model, inst, ExplainerSpec::from_id("gold_mask"), "m"));
    random.push_back(explain(*trained.model, inst, ExplainerSpec::from_id("random", 1), "m"));
  }
  const ThresholdCurve g = faithfulness(*trained.model, test, gold);
  const ThresholdCurve r = faithfulness(*trained.model, test, random);
  CHECK(g.performance[0] == evaluate_macro_f1(*trained.model, test));
  CHECK(r.performance[0] == g.performance[0]);
  CHECK(r.performance[10] == g.performance[10]);
  CHECK(g.auc < r.auc);

  const ThresholdCurve eq = faithfulness(*trained.model, test, gold, FaithfulnessVariant::kEquation);
  CHECK(eq.auc == doctest::Approx(g.performance[0] - g.auc).epsilon(1e-12));

  double expected = 0.0;
  for (std::size_t t = 1; t < 11; ++t) expected += 0.5 * (g.performance[t - 1] + g.performance[t]);
  CHECK(g.auc == doctest::Approx(expected / 10.0).epsilon(1e-12));
}

TEST_CASE("rationale consistency") {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u01;
  const std::size_t models = 3, n = 60;
  std::vector<std::vector<ActivationSummary>> acts(models);
  std::vector<std::vector<std::vector<double>>> aligned(models), noise(models);
  for (std::size_t m = 0; m < models; ++m) {
    for (std::size_t i = 0; i < n; ++i) {
      const double a = u01(rng), b = u01(rng);
      acts[m].push_back(ActivationSummary{{{a, b}}});
      // Saliency distance equals activation distance for every model pair.
      aligned[m].push_back({a, b});
      noise[m].push_back({u01(rng), u01(rng)});
    }
  }
  const ConsistencyResult exact = rationale_consistency(acts, aligned);
  CHECK(exact.rho == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(exact.groups_used == 3);
  CHECK(exact.points == n);
  CHECK(exact.per_pair_rho.size() == 3);
  CHECK(rationale_consistency(acts, aligned, ActivationDistance::kPerLayerMean, RcPairing::kPooled)
            .rho == doctest::Approx(1.0));
  CHECK(std::abs(rationale_consistency(acts, noise).rho) < 0.3);

  // Identical saliency across two models leaves that pair constant.
  auto partial = aligned;
  partial[1] = partial[0];
  const ConsistencyResult excluded = rationale_consistency(acts, partial);
  CHECK(excluded.groups_excluded == 1);
  CHECK(excluded.groups_used == 2);

  auto constant = aligned;
  constant[1] = constant[0];
  constant[2] = constant[0];
  CHECK(code_of([&] { rationale_consistency(acts, constant); }) == ErrorCode::kConstantSeries);
}

TEST_CASE("pair selection") {
  CHECK(jaccard(std::vector<std::size_t>{1, 2, 3}, std::vector<std::size_t>{2, 3, 4, 4}) ==
        doctest::Approx(0.5));
  std::vector<Instance> inst;
  for (std::size_t i = 0; i < 30; ++i) {
    inst.push_back(make_instance(std::to_string(i), {i % 3 + 3, i % 5 + 10, 20}, i % 2));
  }
  const PairSelection s = select_pairs(inst, 10, 20, 4);
  CHECK(s.pairs.size() == 30);
  CHECK_FALSE(s.too_few);
  std::set<std::pair<std::size_t, std::size_t>> unique(s.pairs.begin(), s.pairs.end());
  CHECK(unique.size() == 30);
  // Pairs sharing both varying tokens have Jaccard 1 and come first.
  for (std::size_t k = 0; k < 10; ++k) {
    const auto [i, j] = s.pairs[k];
    CHECK(i < j);
    CHECK(jaccard(inst[i].token_ids, inst[j].token_ids) == 1.0);
  }
  CHECK(select_pairs(inst, 10, 20, 4).pairs == s.pairs);
  const PairSelection all = select_pairs(inst, 400, 400, 4);
  CHECK(all.too_few);
  CHECK(all.pairs.size() == 30 * 29 / 2);
}

TEST_CASE("dataset consistency on a two-cluster corpus") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u01;
  std::vector<Instance> inst;
  std::vector<ActivationSummary> acts;
  std::vector<SaliencyMap> maps;
  for (std::size_t i = 0; i < 80; ++i) {
    const std::size_t cluster = i % 2;
    const std::size_t base = cluster == 0 ? 3 : 30;
    inst.push_back(make_instance(std::to_string(i), {base + i % 4, base + 4 + i % 3, base + 8},
                                 cluster));
    const double w = (cluster == 0 ? 0.1 : 0.6) + 0.3 * u01(rng);
    acts.push_back(ActivationSummary{{{w}}});
    maps.push_back(map_for(inst.back(), {{1 - w, w, 0}, {1 - w, w, 0}}));
  }
  DcOptions options;
  options.n_overlap = 300;
  options.n_random = 300;
  const ConsistencyResult r = dataset_consistency(inst, acts, maps, options);
  CHECK(r.rho == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(r.points == 600);
  options.policy = DcClassPolicy::kPaperLiteral;
  CHECK(dataset_consistency(inst, acts, maps, options).rho == doctest::Approx(1.0));

  std::vector<Instance> two(inst.begin(), inst.begin() + 2);
  std::vector<ActivationSummary> two_acts(acts.begin(), acts.begin() + 2);
  std::vector<SaliencyMap> two_maps(maps.begin(), maps.begin() + 2);
  CHECK(code_of([&] { dataset_consistency(two, two_acts, two_maps, options); }) ==
        ErrorCode::kTooFewPairs);
}

TEST_CASE("report normalization") {
  auto report = [](std::string arch, std::string explainer, double ha, double ci, double f) {
    PropertyReport r;
    r.dataset = "d";
    r.architecture = std::move(arch);
    r.explainer = std::move(explainer);
    r.k = 3;
    r.raw = {{"HA_map", ha}, {"CI_mae", ci}, {"F_auc_tp", f}, {"RC_rho", 0.2}};
    return r;
  };
  std::vector<PropertyReport> reports{report("cnn", "a", 0.2, 0.1, 0.5),
                                      report("cnn", "b", 0.6, 0.3, 0.7),
                                      report("cnn", "c", 0.4, 0.2, 0.9),
                                      report("lstm", "a", 0.9, 0.1, 0.1),
                                      report("lstm", "b", 0.3, 0.5, 0.2)};
  auto per_block = reports;
  normalize_report(per_block);
  CHECK(per_block[0].normalized.at("HA_map") == 0.0);
  CHECK(per_block[1].normalized.at("HA_map") == 1.0);
  CHECK(per_block[2].normalized.at("HA_map") == doctest::Approx(0.5));
  // Lower is better for CI and table-variant faithfulness.
  CHECK(per_block[0].normalized.at("CI_mae") == 1.0);
  CHECK(per_block[2].normalized.at("F_auc_tp") == 0.0);
  CHECK(per_block[0].normalized.at("RC_rho") == 0.5);
  CHECK_FALSE(per_block[0].notes.empty());
  // Mean over the diagnostic columns present: HA, CI, F, RC.
  CHECK(per_block[2].normalized.at("mean") == doctest::Approx((0.5 + 0.5 + 0.0 + 0.5) / 4.0));
  CHECK(per_block[3].normalized.at("HA_map") == 1.0);

  auto global = reports;
  normalize_report(global, NormScope::kGlobal);
  CHECK(global[0].normalized.at("HA_map") == doctest::Approx(0.0));
  CHECK(global[3].normalized.at("HA_map") == doctest::Approx(1.0));
  CHECK(global[1].normalized.at("HA_map") == doctest::Approx(4.0 / 7.0));

  auto equation = reports;
  normalize_report(equation, NormScope::kPerBlock, FaithfulnessVariant::kEquation);
  CHECK(equation[2].normalized.at("F_auc_tp") == 1.0);

  std::vector<PropertyReport> lonely{report("cnn", "a", 0.2, 0.1, 0.5)};
  CHECK(code_of([&] { normalize_report(lonely); }) == ErrorCode::kBadConfig);

  for (const PropertyReport& r : per_block) CHECK(property_report_from_json(to_json(r)) == r);
  const std::string csv = reports_to_csv(per_block);
  CHECK(csv.rfind("dataset,architecture,explainer,K,", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 6);
}

TEST_CASE("curve csv") {
  LabeledCurve c{"d", "cnn", "lime", "trained_0", {}};
  c.curve.performance.fill(0.5);
  const std::string csv = curves_to_csv({c});
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 12);
}
