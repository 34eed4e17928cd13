#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <regex>
#include <sstream>

#include "xaidiag/error.hpp"
#include "xaidiag/pipeline.hpp"

using namespace xaidiag;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "xaidiag_cli_test";

int run(std::vector<std::string> args) {
  args.insert(args.begin(), "xaidiag");
  std::vector<const char*> argv;
  for (const std::string& a : args) argv.push_back(a.c_str());
  return cli_main(static_cast<int>(argv.size()), argv.data());
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path write_config(const std::string& name, const json& j) {
  fs::create_directories(kRoot);
  const fs::path path = kRoot / name;
  std::ofstream(path) << j.dump(2);
  return path;
}

json small_config(const fs::path& out) {
  return {{"dataset", {{"name", "toy"}, {"synthetic", {{"n", 500}, {"vocab_size", 80}, {"seed", 2}}}}},
          {"architectures", {"cnn", "bag"}},
          {"explainers", {"saliency_l2", "occlusion", "shap_sampl", "gold_mask", "random"}},
          {"K", 2},
          {"seed", 3},
          {"out", out.string()},
          {"shapley_samples", 10},
          {"dc_overlap_pairs", 200},
          {"dc_random_pairs", 200},
          {"threads", 2}};
}

// Minimal well-formedness check: balanced, properly nested tags and quoted
// attributes.
bool well_formed_xml(const std::string& text) {
  std::vector<std::string> stack;
  std::size_t pos = 0;
  const std::regex open_tag(R"(^<([A-Za-z][\w:-]*)(\s+[\w:-]+="[^"<]*")*\s*(/?)>)");
  const std::regex close_tag(R"(^</([A-Za-z][\w:-]*)\s*>)");
  while ((pos = text.find('<', pos)) != std::string::npos) {
    const std::string rest = text.substr(pos, text.find('>', pos) - pos + 1);
    std::smatch m;
    if (rest.rfind("<?", 0) == 0) {
      if (rest.size() < 4 || rest[rest.size() - 2] != '?') return false;
    } else if (std::regex_search(rest, m, close_tag)) {
      if (stack.empty() || stack.back() != m[1]) return false;
      stack.pop_back();
    } else if (std::regex_search(rest, m, open_tag)) {
      if (m[3] != "/") stack.push_back(m[1]);
    } else {
      return false;
    }
    pos += rest.size();
  }
  return stack.empty();
}

}  // namespace

TEST_CASE("usage errors exit with 1") {
  CHECK(run({}) == 1);
  CHECK(run({"fly"}) == 1);
  CHECK(run({"train"}) == 1);
  CHECK(run({"train", "--config", "x.json", "--norm-scope", "sideways"}) == 1);
  CHECK(run({"evaluate", "--config", "x.json", "--dc-class-policy", "mine"}) == 1);
  CHECK(run({"train", "--help"}) == 0);
}

TEST_CASE("runtime errors exit with 2") {
  CHECK(run({"train", "--config", (kRoot / "missing.json").string()}) == 2);
  const fs::path bad = write_config("bad.json", {{"K", 1}});
  CHECK(run({"train", "--config", bad.string()}) == 2);
  const fs::path empty_out = kRoot / "empty";
  fs::remove_all(empty_out);
  const fs::path cfg = write_config("nothing.json", small_config(empty_out));
  CHECK(run({"explain", "--config", cfg.string()}) == 2);
}

TEST_CASE("config parsing") {
  const RunConfig c = run_config_from_json(
      {{"architectures", {"lstm"}},
       {"K", 3},
       {"dc_class_policy", "paper-literal"},
       {"faithfulness_variant", "equation"},
       {"norm_scope", "global"},
       {"model_overrides", {{"lstm", {{"hidden", 7}}}}}});
  CHECK(c.k == 3);
  CHECK(c.dc_class_policy == DcClassPolicy::kPaperLiteral);
  CHECK(c.faithfulness_variant == FaithfulnessVariant::kEquation);
  CHECK(c.norm_scope == NormScope::kGlobal);
  CHECK(c.model_config(Architecture::kLstm, 50, 2).hidden == 7);
  CHECK(run_config_from_json(to_json(c)).k == 3);
  CHECK(to_json(run_config_from_json(to_json(c))) == to_json(c));
  try {
    run_config_from_json({{"norm_scope", "sideways"}});
    FAIL("expected BadConfig");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kBadConfig);
  }
}

TEST_CASE("end-to-end pipeline") {
  const fs::path out = kRoot / "run";
  fs::remove_all(out);
  const json config_json = small_config(out);
  const fs::path cfg = write_config("small.json", config_json);
  const RunConfig config = run_config_from_json(config_json);
  const std::size_t test_size = load_corpus(config.dataset).splits.test.size();

  REQUIRE(run({"train", "--config", cfg.string()}) == 0);
  for (const char* arch : {"cnn", "bag"}) {
    std::size_t files = 0;
    for (const auto& entry : fs::directory_iterator(out / "models" / arch)) {
      CHECK(entry.path().extension() == ".ckpt");
      ++files;
    }
    CHECK(files == 4);
  }
  const json metrics = json::parse(slurp(out / "metrics.json"));
  for (const char* arch : {"cnn", "bag"}) {
    const json& block = metrics.at("architectures").at(arch);
    CHECK(block.at("trained").size() == 2);
    CHECK(block.at("random").size() == 2);
    const double hand = (block.at("trained")[0].at("test_f1").get<double>() +
                         block.at("trained")[1].at("test_f1").get<double>()) /
                        2.0;
    CHECK(block.at("summary").at("trained_test_f1_mean").get<double>() == doctest::Approx(hand));
  }
  const std::string metrics_bytes = slurp(out / "metrics.json");
  REQUIRE(run({"train", "--config", cfg.string()}) == 0);
  CHECK(slurp(out / "metrics.json") == metrics_bytes);

  REQUIRE(run({"explain", "--config", cfg.string()}) == 0);
  std::map<std::string, double> flops;
  for (const std::string& explainer : config.explainers) {
    const auto maps = read_saliency_jsonl(saliency_path(config, Architecture::kCnn, explainer));
    CHECK(maps.size() == 4 * test_size);
    double total = 0.0;
    for (const SaliencyMap& m : maps) {
      CHECK(m.corpus_hash == metrics.at("corpus_hash"));
      total += static_cast<double>(m.flops);
    }
    flops[explainer] = total / static_cast<double>(maps.size());
  }
  CHECK(flops["saliency_l2"] < flops["occlusion"]);
  CHECK(flops["occlusion"] < flops["shap_sampl"]);

  REQUIRE(run({"evaluate", "--config", cfg.string()}) == 0);
  const json report = json::parse(slurp(out / "report.json"));
  std::map<std::string, std::vector<json>> blocks;
  for (const json& r : report.at("reports")) blocks[r.at("architecture")].push_back(r);
  CHECK(blocks.size() == 2);
  for (const auto& [arch, rows] : blocks) {
    CAPTURE(arch);
    bool has_random = false;
    std::map<std::string, std::pair<double, double>> range;
    for (const json& r : rows) {
      has_random |= r.at("explainer") == "random";
      if (r.at("explainer") == "gold_mask") {
        CHECK(r.at("raw").at("HA_map").get<double>() == 1.0);
      }
      for (const auto& [key, value] : r.at("normalized").items()) {
        const double v = value.get<double>();
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        auto [it, fresh] = range.try_emplace(key, v, v);
        it->second.first = std::min(it->second.first, v);
        it->second.second = std::max(it->second.second, v);
      }
    }
    CHECK(has_random);
    for (const auto& [key, lohi] : range) {
      if (key == "mean" || lohi.first == lohi.second) continue;
      CAPTURE(key);
      CHECK(lohi.first == 0.0);
      CHECK(lohi.second == 1.0);
    }
  }
  CHECK(fs::exists(out / "report.csv"));
  CHECK(fs::exists(out / "curves.csv"));

  REQUIRE(run({"report", "--config", cfg.string()}) == 0);
  const std::string svg = slurp(out / "figures" / "toy_cnn.svg");
  CHECK(well_formed_xml(svg));
  std::size_t axes = 0;
  for (std::size_t p = 0; (p = svg.find("class=\"axis\"", p)) != std::string::npos; ++p) ++axes;
  CHECK(axes == 5);
  std::size_t polygons = 0;
  for (std::size_t p = 0; (p = svg.find("class=\"series\"", p)) != std::string::npos; ++p) {
    ++polygons;
  }
  CHECK(polygons == config.explainers.size());
  REQUIRE(run({"report", "--config", cfg.string()}) == 0);
  CHECK(slurp(out / "figures" / "toy_cnn.svg") == svg);
  CHECK(fs::exists(out / "summary.csv"));

  SUBCASE("evaluate refuses mixed corpora") {
    const fs::path target = saliency_path(config, Architecture::kBagOfEmbeddings, "random");
    auto maps = read_saliency_jsonl(target);
    maps.back().corpus_hash = "0000000000000000";
    write_saliency_jsonl(target, maps);
    CHECK(run({"evaluate", "--config", cfg.string()}) == 2);
    try {
      cmd_evaluate(config);
      FAIL("expected CorpusHashMismatch");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::kCorpusHashMismatch);
    }
  }
  SUBCASE("flag overrides reach the report") {
    REQUIRE(run({"evaluate", "--config", cfg.string(), "--faithfulness-variant", "equation",
                 "--norm-scope", "global", "--dc-class-policy", "paper-literal"}) == 0);
    const json alt = json::parse(slurp(out / "report.json"));
    CHECK(alt.at("config").at("faithfulness_variant") == "equation");
    CHECK(alt.at("config").at("norm_scope") == "global");
    CHECK(alt.at("config").at("dc_class_policy") == "paper-literal");
  }
}

TEST_CASE("spider chart geometry") {
  const std::vector<std::string> axes{"HA", "CI", "F", "RC", "DC"};
  const std::string svg = render_spider_svg("t", axes, {{"full", {1, 1, 1, 1, 1}}});
  CHECK(well_formed_xml(svg));
  // The outer grid ring and an all-ones series share their vertices.
  const std::regex grid(R"re(class="grid" points="([^"]*)")re");
  const std::regex series(R"re(class="series" data-label="full" points="([^"]*)")re");
  std::smatch g, s;
  std::string last_ring;
  for (auto it = std::sregex_iterator(svg.begin(), svg.end(), grid); it != std::sregex_iterator();
       ++it) {
    last_ring = (*it)[1];
  }
  REQUIRE(std::regex_search(svg, s, series));
  CHECK(s[1] == last_ring);
  CHECK(render_spider_svg("t", axes, {{"full", {1, 1, 1, 1, 1}}}) == svg);
  CHECK(well_formed_xml(render_spider_svg("a < b & \"c\"", axes, {{"x<y", {0, 0.5, 1, 0, 0}}})));
}

TEST_CASE("parallel_for rethrows task failures") {
  std::vector<int> hits(50, 0);
  parallel_for(50, 4, [&](std::size_t i) { hits[i] += 1; });
  CHECK(std::all_of(hits.begin(), hits.end(), [](int h) { return h == 1; }));
  CHECK_THROWS_AS(parallel_for(10, 3,
                               [](std::size_t i) {
                                 if (i == 7) throw Error(ErrorCode::kIo, "boom");
                               }),
                  Error);
}
