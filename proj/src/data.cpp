#include "xaidiag/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "xaidiag/error.hpp"

namespace xaidiag {

using nlohmann::json;

// Reserved entries are not indexed, so corpus text can never map onto them.
Vocab::Vocab() : tokens_{"<pad>", "<unk>", "<mask>"} {}

std::size_t Vocab::add(const std::string& token) {
  auto [it, inserted] = index_.try_emplace(token, tokens_.size());
  if (inserted) tokens_.push_back(token);
  return it->second;
}

std::size_t Vocab::index_of(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnkId : it->second;
}

namespace {

std::string line_error(std::size_t line, const std::string& what) {
  return "line " + std::to_string(line) + ": " + what;
}

}  // namespace

std::vector<Instance> load_jsonl(const std::filesystem::path& path,
                                 std::optional<std::size_t> num_classes) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  std::vector<Instance> out;
  std::string text;
  std::size_t line_no = 0;
  while (std::getline(in, text)) {
    ++line_no;
    if (std::all_of(text.begin(), text.end(), [](unsigned char c) { return std::isspace(c); })) {
      continue;
    }
    json obj;
    try {
      obj = json::parse(text);
    } catch (const json::parse_error& e) {
      throw Error(ErrorCode::kParseError, line_error(line_no, e.what()));
    }
    if (!obj.is_object() || !obj.contains("tokens") || !obj.contains("label") ||
        !obj.contains("rationale") || !obj["tokens"].is_array() || !obj["rationale"].is_array()) {
      throw Error(ErrorCode::kParseError,
                  line_error(line_no, "expected object with tokens, label, rationale"));
    }
    Instance inst;
    for (const auto& tok : obj["tokens"]) {
      if (!tok.is_string()) throw Error(ErrorCode::kParseError, line_error(line_no, "token"));
      inst.tokens.push_back(tok.get<std::string>());
    }
    for (const auto& r : obj["rationale"]) {
      if (!r.is_number_integer() || (r.get<int>() != 0 && r.get<int>() != 1)) {
        throw Error(ErrorCode::kParseError, line_error(line_no, "rationale values must be 0 or 1"));
      }
      inst.rationale.push_back(static_cast<std::uint8_t>(r.get<int>()));
    }
    if (inst.rationale.size() != inst.tokens.size()) {
      throw Error(ErrorCode::kLengthMismatch,
                  line_error(line_no, std::to_string(inst.rationale.size()) +
                                          " rationale entries for " +
                                          std::to_string(inst.tokens.size()) + " tokens"));
    }
    const json& label = obj["label"];
    if (!label.is_number_integer() || label.get<long long>() < 0 ||
        (num_classes && static_cast<std::size_t>(label.get<long long>()) >= *num_classes)) {
      throw Error(ErrorCode::kUnknownLabel, line_error(line_no, label.dump()));
    }
    inst.label = static_cast<std::size_t>(label.get<long long>());
    if (obj.contains("id") && obj["id"].is_string()) {
      inst.id = obj["id"].get<std::string>();
    } else {
      inst.id = std::to_string(out.size());
    }
    out.push_back(std::move(inst));
  }
  return out;
}

void write_jsonl(const std::filesystem::path& path, const std::vector<Instance>& instances) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  for (const Instance& inst : instances) {
    json obj;
    obj["id"] = inst.id;
    obj["tokens"] = inst.tokens;
    obj["label"] = inst.label;
    json rationale = json::array();
    for (std::uint8_t r : inst.rationale) rationale.push_back(static_cast<int>(r));
    obj["rationale"] = std::move(rationale);
    out << obj.dump() << '\n';
  }
}

namespace {

// Decodes one UTF-8 code point starting at text[pos]; advances pos.
// Malformed bytes decode as themselves.
char32_t next_code_point(std::string_view text, std::size_t& pos) {
  const auto byte = [&](std::size_t i) { return static_cast<unsigned char>(text[i]); };
  const unsigned char lead = byte(pos);
  std::size_t extra = 0;
  char32_t cp = lead;
  if (lead >= 0xF0) {
    extra = 3;
    cp = lead & 0x07;
  } else if (lead >= 0xE0) {
    extra = 2;
    cp = lead & 0x0F;
  } else if (lead >= 0xC0) {
    extra = 1;
    cp = lead & 0x1F;
  }
  if (pos + extra >= text.size()) {
    ++pos;
    return lead;
  }
  for (std::size_t i = 1; i <= extra; ++i) {
    if ((byte(pos + i) & 0xC0) != 0x80) {
      ++pos;
      return lead;
    }
    cp = (cp << 6) | (byte(pos + i) & 0x3F);
  }
  pos += extra + 1;
  return cp;
}

bool is_unicode_space(char32_t cp) {
  switch (cp) {
    case 0x09: case 0x0A: case 0x0B: case 0x0C: case 0x0D: case 0x20:
    case 0x85: case 0xA0: case 0x1680: case 0x2028: case 0x2029:
    case 0x202F: case 0x205F: case 0x3000:
      return true;
    default:
      return cp >= 0x2000 && cp <= 0x200A;
  }
}

bool is_ascii_punct(char c) {
  const auto u = static_cast<unsigned char>(c);
  return u < 0x80 && std::ispunct(u);
}

}  // namespace

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string current;
  auto flush = [&] {
    std::size_t begin = 0;
    std::size_t end = current.size();
    while (begin < end && is_ascii_punct(current[begin])) ++begin;
    while (end > begin && is_ascii_punct(current[end - 1])) --end;
    if (end > begin) out.push_back(current.substr(begin, end - begin));
    current.clear();
  };
  std::size_t pos = 0;
  while (pos < text.size()) {
    const std::size_t start = pos;
    const char32_t cp = next_code_point(text, pos);
    if (is_unicode_space(cp)) {
      flush();
      continue;
    }
    for (std::size_t i = start; i < pos; ++i) {
      const auto u = static_cast<unsigned char>(text[i]);
      current.push_back(u < 0x80 ? static_cast<char>(std::tolower(u)) : text[i]);
    }
  }
  flush();
  return out;
}

Vocab build_vocab(const std::vector<Instance>& train, std::size_t min_freq) {
  if (min_freq == 0) throw Error(ErrorCode::kBadConfig, "min_freq must be >= 1");
  std::map<std::string, std::size_t> counts;
  for (const Instance& inst : train) {
    for (const std::string& tok : inst.tokens) ++counts[tok];
  }
  std::vector<std::pair<std::string, std::size_t>> entries(counts.begin(), counts.end());
  std::stable_sort(entries.begin(), entries.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocab vocab;
  for (const auto& [tok, count] : entries) {
    if (count >= min_freq) vocab.add(tok);
  }
  return vocab;
}

void assign_ids(std::vector<Instance>& instances, const Vocab& vocab) {
  for (Instance& inst : instances) {
    inst.token_ids.clear();
    for (const std::string& tok : inst.tokens) inst.token_ids.push_back(vocab.index_of(tok));
  }
}

Splits split(std::vector<Instance> instances, const std::array<double, 3>& ratios,
             std::uint64_t seed) {
  const double total = ratios[0] + ratios[1] + ratios[2];
  if (std::any_of(ratios.begin(), ratios.end(), [](double r) { return r < 0.0; }) ||
      std::abs(total - 1.0) > 1e-9) {
    throw Error(ErrorCode::kBadRatios, "split ratios must be non-negative and sum to 1");
  }
  const std::size_t n = instances.size();

  // Largest-remainder sizes.
  std::array<std::size_t, 3> sizes{};
  std::array<double, 3> remainders{};
  std::size_t assigned = 0;
  for (std::size_t s = 0; s < 3; ++s) {
    const double exact = ratios[s] * static_cast<double>(n);
    sizes[s] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    remainders[s] = exact - static_cast<double>(sizes[s]);
    assigned += sizes[s];
  }
  while (assigned < n) {
    std::size_t best = 0;
    for (std::size_t s = 1; s < 3; ++s) {
      if (remainders[s] > remainders[best]) best = s;
    }
    ++sizes[best];
    remainders[best] = -1.0;
    ++assigned;
  }

  // Interleave classes by within-class quantile so every contiguous chunk is
  // stratified to within one instance per class.
  std::mt19937_64 rng(seed);
  std::map<std::size_t, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < n; ++i) by_class[instances[i].label].push_back(i);
  struct Keyed {
    double key;
    std::size_t label;
    std::size_t index;
  };
  std::vector<Keyed> order;
  order.reserve(n);
  for (auto& [label, members] : by_class) {
    std::shuffle(members.begin(), members.end(), rng);
    for (std::size_t r = 0; r < members.size(); ++r) {
      const double key = (static_cast<double>(r) + 0.5) / static_cast<double>(members.size());
      order.push_back({key, label, members[r]});
    }
  }
  std::sort(order.begin(), order.end(), [](const Keyed& a, const Keyed& b) {
    return a.key != b.key ? a.key < b.key : a.label < b.label;
  });

  Splits out;
  std::vector<Instance>* targets[] = {&out.train, &out.dev, &out.test};
  std::size_t cursor = 0;
  for (std::size_t s = 0; s < 3; ++s) {
    for (std::size_t i = 0; i < sizes[s]; ++i) {
      targets[s]->push_back(std::move(instances[order[cursor++].index]));
    }
  }
  return out;
}

Corpus make_corpus(std::string name, Splits splits, std::size_t num_classes,
                   std::size_t min_freq) {
  Corpus corpus;
  corpus.name = std::move(name);
  corpus.vocab = build_vocab(splits.train, min_freq);
  assign_ids(splits.train, corpus.vocab);
  assign_ids(splits.dev, corpus.vocab);
  assign_ids(splits.test, corpus.vocab);
  corpus.splits = std::move(splits);
  for (std::size_t c = 0; c < num_classes; ++c) {
    corpus.class_names.push_back("class" + std::to_string(c));
  }
  return corpus;
}

Corpus synth_keyword_corpus(std::size_t n, std::size_t classes, std::size_t vocab_size,
                            std::uint64_t seed) {
  if (classes < 2) throw Error(ErrorCode::kBadConfig, "synthetic corpus needs >= 2 classes");
  if (vocab_size <= classes + 10) {
    throw Error(ErrorCode::kBadConfig, "synthetic vocab_size must exceed classes + 10");
  }
  const std::size_t keywords_per_class =
      std::clamp<std::size_t>((vocab_size - 10) / (2 * classes), 1, 3);
  const std::size_t fillers = vocab_size - keywords_per_class * classes;

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> filler_len(8, 20);
  std::uniform_int_distribution<std::size_t> planted_len(1, 3);
  std::uniform_int_distribution<std::size_t> filler_tok(0, fillers - 1);
  std::uniform_int_distribution<std::size_t> keyword_tok(0, keywords_per_class - 1);

  std::vector<Instance> instances;
  instances.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Instance inst;
    inst.id = "synth-" + std::to_string(i);
    inst.label = i % classes;
    const std::size_t n_fill = filler_len(rng);
    for (std::size_t j = 0; j < n_fill; ++j) {
      inst.tokens.push_back("w" + std::to_string(filler_tok(rng)));
      inst.rationale.push_back(0);
    }
    const std::size_t n_plant = planted_len(rng);
    for (std::size_t j = 0; j < n_plant; ++j) {
      std::uniform_int_distribution<std::size_t> where(0, inst.tokens.size());
      const std::size_t pos = where(rng);
      const std::string keyword =
          "kw" + std::to_string(inst.label) + "_" + std::to_string(keyword_tok(rng));
      inst.tokens.insert(inst.tokens.begin() + static_cast<std::ptrdiff_t>(pos), keyword);
      inst.rationale.insert(inst.rationale.begin() + static_cast<std::ptrdiff_t>(pos), 1);
    }
    instances.push_back(std::move(inst));
  }
  Splits splits = split(std::move(instances), {0.8, 0.1, 0.1}, seed ^ 0x9E3779B97F4A7C15ULL);
  return make_corpus("synthetic", std::move(splits), classes);
}

std::string corpus_hash(const Corpus& corpus) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](std::string_view bytes) {
    for (unsigned char c : bytes) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    h ^= 0xff;
    h *= 0x100000001b3ULL;
  };
  feed(corpus.name);
  for (const auto* part : {&corpus.splits.train, &corpus.splits.dev, &corpus.splits.test}) {
    feed("split");
    for (const Instance& inst : *part) {
      feed(inst.id);
      for (const std::string& tok : inst.tokens) feed(tok);
      feed(std::to_string(inst.label));
      std::string mask(inst.rationale.begin(), inst.rationale.end());
      feed(mask);
    }
  }
  std::ostringstream hex;
  hex << std::hex;
  hex.width(16);
  hex.fill('0');
  hex << h;
  return hex.str();
}

}  // namespace xaidiag
