#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "xaidiag/data.hpp"
#include "xaidiag/error.hpp"

using namespace xaidiag;
namespace fs = std::filesystem;

namespace {

fs::path write_temp(const std::string& name, const std::string& content) {
  const fs::path dir = fs::temp_directory_path() / "xaidiag_data_test";
  fs::create_directories(dir);
  const fs::path path = dir / name;
  std::ofstream(path) << content;
  return path;
}

ErrorCode load_error(const std::string& content, std::optional<std::size_t> classes = 2) {
  try {
    load_jsonl(write_temp("bad.jsonl", content), classes);
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("no error thrown");
  return ErrorCode::kIo;
}

}  // namespace

TEST_CASE("tokenize lowercases and strips punctuation") {
  CHECK(tokenize("Hello, World!  It's -- fine.") ==
        std::vector<std::string>{"hello", "world", "it's", "fine"});
  CHECK(tokenize("   ").empty());
}

TEST_CASE("jsonl round trip") {
  const fs::path path = write_temp(
      "ok.jsonl",
      R"({"id":"a","tokens":["good","movie"],"label":1,"rationale":[1,0]})"
      "\n\n"
      R"({"tokens":["bad"],"label":0,"rationale":[1]})"
      "\n");
  std::vector<Instance> loaded = load_jsonl(path, 2);
  REQUIRE(loaded.size() == 2);
  CHECK(loaded[0].id == "a");
  CHECK(loaded[1].id == "1");
  CHECK(loaded[0].rationale == std::vector<std::uint8_t>{1, 0});

  const fs::path copy = write_temp("copy.jsonl", "");
  write_jsonl(copy, loaded);
  CHECK(load_jsonl(copy) == loaded);
}

TEST_CASE("jsonl validation") {
  CHECK(load_error("{not json}\n") == ErrorCode::kParseError);
  CHECK(load_error(R"({"tokens":["a"],"label":0})") == ErrorCode::kParseError);
  CHECK(load_error(R"({"tokens":["a"],"label":0,"rationale":[2]})") == ErrorCode::kParseError);
  CHECK(load_error(R"({"tokens":["a","b"],"label":0,"rationale":[1]})") ==
        ErrorCode::kLengthMismatch);
  CHECK(load_error(R"({"tokens":["a"],"label":5,"rationale":[1]})") == ErrorCode::kUnknownLabel);
  try {
    load_jsonl("/nonexistent/file.jsonl");
    FAIL("expected Io");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kIo);
  }
}

TEST_CASE("vocabulary order and id assignment") {
  std::vector<Instance> train(2);
  train[0].tokens = {"b", "a", "b", "c"};
  train[1].tokens = {"a", "b", "d"};
  const Vocab vocab = build_vocab(train, 2);
  REQUIRE(vocab.size() == kReservedTokens + 2);
  CHECK(vocab.token(kReservedTokens) == "b");
  CHECK(vocab.token(kReservedTokens + 1) == "a");
  CHECK(vocab.index_of("d") == kUnkId);

  assign_ids(train, vocab);
  CHECK(train[1].token_ids ==
        std::vector<std::size_t>{kReservedTokens + 1, kReservedTokens, kUnkId});
}

TEST_CASE("split sizes, stratification and determinism") {
  std::vector<Instance> all(103);
  for (std::size_t i = 0; i < all.size(); ++i) {
    all[i].id = std::to_string(i);
    all[i].label = i % 3 == 0 ? 1 : 0;
  }
  const Splits s = split(all, {0.8, 0.1, 0.1}, 4);
  CHECK(s.train.size() + s.dev.size() + s.test.size() == 103);
  CHECK(s.train.size() == 83);
  CHECK(s.dev.size() == 10);
  CHECK(s.test.size() == 10);

  std::set<std::string> ids;
  for (const auto* part : {&s.train, &s.dev, &s.test}) {
    for (const Instance& inst : *part) ids.insert(inst.id);
  }
  CHECK(ids.size() == 103);

  // 35 of 103 are class 1; every split holds its share to within one.
  auto positives = [](const std::vector<Instance>& v) {
    return std::count_if(v.begin(), v.end(), [](const Instance& i) { return i.label == 1; });
  };
  CHECK(std::abs(static_cast<double>(positives(s.test)) - 10.0 * 35.0 / 103.0) <= 1.0);
  CHECK(std::abs(static_cast<double>(positives(s.dev)) - 10.0 * 35.0 / 103.0) <= 1.0);

  const Splits again = split(all, {0.8, 0.1, 0.1}, 4);
  CHECK(again.test == s.test);
  CHECK(split(all, {0.8, 0.1, 0.1}, 5).test != s.test);

  try {
    split(all, {0.5, 0.4, 0.2}, 1);
    FAIL("expected BadRatios");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kBadRatios);
  }
}

TEST_CASE("synthetic keyword corpus") {
  const Corpus c = synth_keyword_corpus(400, 3, 150, 9);
  CHECK(c.num_classes() == 3);
  CHECK(c.splits.train.size() + c.splits.dev.size() + c.splits.test.size() == 400);
  CHECK(c.vocab.size() <= 150 + kReservedTokens);

  std::map<std::size_t, std::size_t> per_class;
  for (const auto* part : {&c.splits.train, &c.splits.dev, &c.splits.test}) {
    for (const Instance& inst : *part) {
      ++per_class[inst.label];
      const std::string prefix = "kw" + std::to_string(inst.label) + "_";
      std::size_t keywords = 0;
      for (std::size_t j = 0; j < inst.size(); ++j) {
        const bool is_keyword = inst.tokens[j].rfind(prefix, 0) == 0;
        CHECK(inst.rationale[j] == (is_keyword ? 1 : 0));
        CHECK((inst.tokens[j].rfind("kw", 0) != 0 || is_keyword));
        keywords += is_keyword;
        CHECK(inst.token_ids[j] == c.vocab.index_of(inst.tokens[j]));
      }
      CHECK(keywords >= 1);
      CHECK(keywords <= 3);
      CHECK(inst.size() >= 9);
      CHECK(inst.size() <= 23);
    }
  }
  CHECK(per_class.size() == 3);

  const Corpus same = synth_keyword_corpus(400, 3, 150, 9);
  CHECK(corpus_hash(same) == corpus_hash(c));
  CHECK(corpus_hash(synth_keyword_corpus(400, 3, 150, 10)) != corpus_hash(c));
}

TEST_CASE("corpus hash reacts to a single rationale flip") {
  Corpus c = synth_keyword_corpus(100, 2, 60, 1);
  const std::string before = corpus_hash(c);
  c.splits.test[0].rationale[0] ^= 1;
  CHECK(corpus_hash(c) != before);
}

TEST_CASE("make_corpus builds the vocabulary from train only") {
  Splits s;
  s.train.resize(1);
  s.train[0].tokens = {"x", "y"};
  s.train[0].rationale = {1, 0};
  s.test.resize(1);
  s.test[0].tokens = {"x", "z"};
  s.test[0].rationale = {0, 1};
  const Corpus c = make_corpus("toy", s, 2);
  CHECK(c.name == "toy");
  CHECK(c.splits.test[0].token_ids[1] == kUnkId);
  CHECK(c.num_classes() == 2);
}
