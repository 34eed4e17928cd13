#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>

#include "support.hpp"
#include "xaidiag/error.hpp"
#include "xaidiag/explainers.hpp"

using namespace xaidiag;
namespace fs = std::filesystem;

namespace {

ModelConfig small_config(Architecture arch) {
  ModelConfig c = ModelConfig::defaults(arch, 30, 2);
  c.embed_dim = 8;
  c.channels = 4;
  c.hidden = 5;
  c.linear_sizes = {6};
  c.ffn_dim = 12;
  c.heads = 2;
  return c;
}

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("no error thrown");
  return ErrorCode::kIo;
}

double factorial(std::size_t n) {
  double f = 1.0;
  for (std::size_t i = 2; i <= n; ++i) f *= static_cast<double>(i);
  return f;
}

// Shapley values from the full coalition table.
std::vector<std::vector<double>> exact_shapley(const CoalitionValue& f, std::size_t n) {
  const std::size_t subsets = std::size_t{1} << n;
  std::vector<std::vector<double>> table(subsets);
  for (std::size_t s = 0; s < subsets; ++s) {
    std::vector<std::uint8_t> keep(n);
    for (std::size_t j = 0; j < n; ++j) keep[j] = (s >> j) & 1U;
    table[s] = f(keep);
  }
  const std::size_t classes = table[0].size();
  std::vector<std::vector<double>> phi(classes, std::vector<double>(n, 0.0));
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t s = 0; s < subsets; ++s) {
      if ((s >> j) & 1U) continue;
      const auto size = static_cast<std::size_t>(__builtin_popcountll(s));
      const double weight = factorial(size) * factorial(n - size - 1) / factorial(n);
      for (std::size_t c = 0; c < classes; ++c) {
        phi[c][j] += weight * (table[s | (std::size_t{1} << j)][c] - table[s][c]);
      }
    }
  }
  return phi;
}

std::vector<std::vector<std::size_t>> all_permutations(std::size_t n) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), 0);
  std::vector<std::vector<std::size_t>> out;
  do {
    out.push_back(p);
  } while (std::next_permutation(p.begin(), p.end()));
  return out;
}

// A nonlinear two-output game with interactions.
CoalitionValue toy_game(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01;
  std::vector<double> w(n), v(n);
  for (std::size_t j = 0; j < n; ++j) {
    w[j] = n01(rng);
    v[j] = n01(rng);
  }
  return [w, v](std::span<const std::uint8_t> keep) {
    double a = 0.0, b = 0.0;
    for (std::size_t j = 0; j < keep.size(); ++j) {
      a += w[j] * keep[j];
      b += v[j] * keep[j];
    }
    return std::vector<double>{std::tanh(a) * b, a * a - std::sin(b)};
  };
}

}  // namespace

TEST_CASE("explainer ids") {
  const auto ids = default_explainer_ids();
  CHECK(ids.size() == 10);
  CHECK(ids.back() == "random");
  for (const std::string& id : ids) {
    const ExplainerSpec spec = ExplainerSpec::from_id(id, 4);
    CHECK(spec.id() == id);
    CHECK(spec.seed == 4);
    spec.validate();
  }
  CHECK(ExplainerSpec::from_id("gold_mask").kind == ExplainerKind::kGoldMask);
  CHECK(code_of([] { ExplainerSpec::from_id("integrated_gradients"); }) == ErrorCode::kBadConfig);
  ExplainerSpec bad = ExplainerSpec::from_id("occlusion");
  bad.aggregation = Aggregation::kL2;
  CHECK(code_of([&] { bad.validate(); }) == ErrorCode::kBadConfig);
  bad = ExplainerSpec::from_id("lime");
  bad.lime_samples = 0;
  CHECK(code_of([&] { bad.validate(); }) == ErrorCode::kBadConfig);
}

TEST_CASE("aggregation") {
  const std::vector<std::vector<double>> rows{{3, 4}, {-1, 1}};
  CHECK(aggregate(rows, Aggregation::kL2) == std::vector<double>{5, std::sqrt(2.0)});
  CHECK(aggregate(rows, Aggregation::kMean) == std::vector<double>{3.5, 0});
}

TEST_CASE("full permutation enumeration equals exact shapley") {
  for (std::size_t n : {1u, 2u, 4u, 6u}) {
    const CoalitionValue f = toy_game(n, n);
    const auto exact = exact_shapley(f, n);
    const auto perm = shapley_from_permutations(f, n, all_permutations(n));
    const std::vector<std::uint8_t> none(n, 0), all(n, 1);
    for (std::size_t c = 0; c < 2; ++c) {
      double total = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        CHECK(std::abs(perm[c][j] - exact[c][j]) <= 1e-9);
        total += perm[c][j];
      }
      CHECK(std::abs(total - (f(all)[c] - f(none)[c])) <= 1e-9);
    }
  }
}

TEST_CASE("sampled shapley is efficient and converges") {
  const std::size_t n = 6;
  const CoalitionValue f = toy_game(n, 9);
  const auto exact = exact_shapley(f, n);
  const auto sampled = shapley_sampling(f, n, 20000, 3);
  const std::vector<std::uint8_t> none(n, 0), all(n, 1);
  for (std::size_t c = 0; c < 2; ++c) {
    // Each sampled order telescopes, so efficiency holds for any sample count.
    const double total = std::accumulate(sampled[c].begin(), sampled[c].end(), 0.0);
    CHECK(total == doctest::Approx(f(all)[c] - f(none)[c]).epsilon(1e-9));
    for (std::size_t j = 0; j < n; ++j) CHECK(std::abs(sampled[c][j] - exact[c][j]) < 0.05);
  }
  CHECK(shapley_sampling(f, n, 50, 3) == shapley_sampling(f, n, 50, 3));
  CHECK(shapley_sampling(f, n, 50, 3) != shapley_sampling(f, n, 50, 4));
}

TEST_CASE("occlusion uses L + 1 evaluations") {
  std::size_t calls = 0;
  const CoalitionValue base = toy_game(5, 2);
  const CoalitionValue counted = [&](std::span<const std::uint8_t> keep) {
    ++calls;
    return base(keep);
  };
  const auto scores = occlusion(counted, 5);
  CHECK(calls == 6);
  std::vector<std::uint8_t> keep(5, 1);
  const auto full = base(keep);
  keep[3] = 0;
  CHECK(scores[1][3] == doctest::Approx(full[1] - base(keep)[1]));
}

TEST_CASE("lime recovers mask-linear coefficients") {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n01;
  for (std::size_t n : {3u, 10u, 20u}) {
    std::vector<double> w(n), v(n);
    for (std::size_t j = 0; j < n; ++j) {
      w[j] = n01(rng);
      v[j] = n01(rng);
    }
    const CoalitionValue f = [&](std::span<const std::uint8_t> keep) {
      double a = 0.7, b = -0.2;
      for (std::size_t j = 0; j < n; ++j) {
        a += w[j] * keep[j];
        b += v[j] * keep[j];
      }
      return std::vector<double>{a, b};
    };
    const auto coef = lime(f, n, {1000, 0.75, 1e-3}, 5);
    for (std::size_t j = 0; j < n; ++j) {
      CHECK(std::abs(coef[0][j] - w[j]) <= 1e-2);
      CHECK(std::abs(coef[1][j] - v[j]) <= 1e-2);
    }
  }
  const CoalitionValue flat = [](std::span<const std::uint8_t>) { return std::vector<double>{1.0}; };
  CHECK(code_of([&] { lime(flat, 10, {11, 0.75, 1e-3}, 1); }) == ErrorCode::kBadConfig);
}

TEST_CASE("lime reports an unsolvable fit") {
  const CoalitionValue f = [](std::span<const std::uint8_t> keep) {
    return std::vector<double>{static_cast<double>(keep[0])};
  };
  // Without a penalty, a single token cannot be separated from the intercept
  // when every drawn mask keeps it, which happens for some seeds.
  std::size_t singular = 0;
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    try {
      lime(f, 1, {3, 0.75, 0.0}, seed);
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::kSingularFit);
      ++singular;
    }
  }
  CHECK(singular > 0);
  CHECK(singular < 40);
}

TEST_CASE("bag-of-embeddings closed forms") {
  const auto model = Model::create(small_config(Architecture::kBagOfEmbeddings), 6);
  const std::vector<std::size_t> ids{4, 9, 13, 4, 20};
  const std::size_t n = ids.size();
  const Tensor& table = model->parameters()[0];
  const Tensor& w = model->parameters()[1];
  // Token j contributes e_j . W_c to logit c, independently of the others.
  std::vector<std::vector<double>> contribution(2, std::vector<double>(n, 0.0));
  for (std::size_t c = 0; c < 2; ++c) {
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t k = 0; k < 8; ++k) contribution[c][j] += table.at(ids[j], k) * w.at(k, c);
    }
  }

  const CoalitionValue f = model_coalition_value(*model, ids, ModelOutput::kLogit);
  const auto occ = occlusion(f, n);
  const auto shap = shapley_sampling(f, n, 7, 1);
  const auto coef = lime(f, n, {200, 0.75, 0.0}, 1);
  const auto grads = grad_saliency_all(*model, ids, GradVariant::kInputXGrad);
  const auto plain = grad_saliency_all(*model, ids, GradVariant::kSaliency);
  const auto guided = grad_saliency_all(*model, ids, GradVariant::kGuidedBp);
  for (std::size_t c = 0; c < 2; ++c) {
    const auto ixg = aggregate(grads[c], Aggregation::kMean);
    double w_norm = 0.0;
    for (std::size_t k = 0; k < 8; ++k) w_norm += w.at(k, c) * w.at(k, c);
    for (std::size_t j = 0; j < n; ++j) {
      CHECK(occ[c][j] == doctest::Approx(contribution[c][j]).epsilon(1e-12));
      CHECK(shap[c][j] == doctest::Approx(contribution[c][j]).epsilon(1e-12));
      CHECK(coef[c][j] == doctest::Approx(contribution[c][j]).epsilon(1e-8));
      CHECK(ixg[j] == doctest::Approx(contribution[c][j] / 8.0).epsilon(1e-12));
      CHECK(aggregate(plain[c], Aggregation::kL2)[j] == doctest::Approx(std::sqrt(w_norm)));
    }
    CHECK(guided[c] == plain[c]);
  }
}

TEST_CASE("single-class gradient helpers agree with the all-class pass") {
  const auto model = Model::create(small_config(Architecture::kCnn), 2);
  const std::vector<std::size_t> ids{3, 8, 5, 11, 7};
  const auto all = grad_saliency_all(*model, ids, GradVariant::kGuidedBp);
  for (std::size_t c = 0; c < 2; ++c) {
    const auto one = grad_saliency(*model, ids, c, GradVariant::kGuidedBp);
    for (std::size_t j = 0; j < ids.size(); ++j) {
      for (std::size_t k = 0; k < 8; ++k) CHECK(one[j][k] == doctest::Approx(all[c][j][k]));
    }
    const auto occ_all = occlusion(model_coalition_value(*model, ids, ModelOutput::kLogit), 5);
    CHECK(occlusion(*model, ids, c) == occ_all[c]);
  }
}

TEST_CASE("explain produces every class row and is order independent") {
  const Corpus corpus = synth_keyword_corpus(60, 2, 30, 3);
  ModelConfig config = small_config(Architecture::kCnn);
  config.vocab_size = corpus.vocab.size();
  const auto model = Model::create(config, 4);
  const Instance& a = corpus.splits.train[0];
  const Instance& b = corpus.splits.train[1];

  std::map<std::string, double> mean_flops;
  for (std::string id : default_explainer_ids()) {
    ExplainerSpec spec = ExplainerSpec::from_id(id, 11);
    spec.lime_samples = 60;
    spec.shapley_samples = 10;
    const SaliencyMap first = explain(*model, a, spec, "trained_0");
    CHECK(first.num_classes() == 2);
    CHECK(first.num_tokens() == a.size());
    CHECK(first.explainer == id);
    CHECK(first.instance_id == a.id);
    CHECK(first.model_id == "trained_0");
    CHECK(first.target_class_used == "all");
    explain(*model, b, spec, "trained_0");
    CHECK(explain(*model, a, spec, "trained_0") == first);
    mean_flops[id] = static_cast<double>(first.flops);
  }
  CHECK(mean_flops["saliency_l2"] < mean_flops["occlusion"]);
  CHECK(mean_flops["occlusion"] < mean_flops["shap_sampl"]);
  CHECK(mean_flops["random"] == 0.0);

  ExplainerSpec random = ExplainerSpec::from_id("random", 11);
  CHECK(explain(*model, a, random, "random_0").scores != explain(*model, a, random, "random_1").scores);

  const SaliencyMap gold = explain(*model, a, ExplainerSpec::from_id("gold_mask"), "m");
  for (const auto& row : gold.scores) {
    for (std::size_t j = 0; j < a.size(); ++j) CHECK(row[j] == a.rationale[j]);
  }
}

TEST_CASE("random saliency") {
  const auto r = random_saliency(7, 3, 5);
  CHECK(r.size() == 3);
  for (const auto& row : r) {
    CHECK(row.size() == 7);
    for (double v : row) {
      CHECK(v >= 0.0);
      CHECK(v < 1.0);
    }
  }
  CHECK(random_saliency(7, 3, 5) == r);
  CHECK(instance_seed(1, "a") == instance_seed(1, "a"));
  CHECK(instance_seed(1, "a") != instance_seed(1, "b"));
  CHECK(instance_seed(1, "a") != instance_seed(2, "a"));
}

TEST_CASE("saliency jsonl round trip and validation") {
  const fs::path dir = fs::temp_directory_path() / "xaidiag_explainers_test";
  fs::create_directories(dir);
  SaliencyMap m{"i1", "lime", "trained_0", {{0.25, -1.5}, {3.0, 1e-300}}, "all", 123, "abc"};
  SaliencyMap m2 = m;
  m2.instance_id = "i2";
  write_saliency_jsonl(dir / "maps.jsonl", {m, m2});
  const auto back = read_saliency_jsonl(dir / "maps.jsonl");
  REQUIRE(back.size() == 2);
  CHECK(back[0] == m);
  CHECK(back[1] == m2);

  std::ofstream(dir / "ragged.jsonl")
      << R"({"instance_id":"x","explainer":"lime","model_id":"m","scores":[[1,2],[3]],"flops":0,"corpus_hash":"h"})"
      << "\n";
  CHECK(code_of([&] { read_saliency_jsonl(dir / "ragged.jsonl"); }) == ErrorCode::kLengthMismatch);
  std::ofstream(dir / "broken.jsonl") << "{\n";
  CHECK(code_of([&] { read_saliency_jsonl(dir / "broken.jsonl"); }) == ErrorCode::kParseError);
}
