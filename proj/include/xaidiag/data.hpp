#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace xaidiag {

inline constexpr std::size_t kPadId = 0;
inline constexpr std::size_t kUnkId = 1;
inline constexpr std::size_t kMaskId = 2;
inline constexpr std::size_t kReservedTokens = 3;

struct Instance {
  std::string id;
  std::vector<std::string> tokens;
  std::vector<std::size_t> token_ids;
  std::size_t label = 0;
  std::vector<std::uint8_t> rationale;

  std::size_t size() const noexcept { return tokens.size(); }
  bool operator==(const Instance&) const = default;
};

class Vocab {
 public:
  Vocab();

  // Appends a token if absent and returns its index.
  std::size_t add(const std::string& token);
  // Index of `token`, or kUnkId.
  std::size_t index_of(std::string_view token) const;
  const std::string& token(std::size_t index) const { return tokens_.at(index); }
  std::size_t size() const noexcept { return tokens_.size(); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct Splits {
  std::vector<Instance> train;
  std::vector<Instance> dev;
  std::vector<Instance> test;
};

struct Corpus {
  std::string name;
  Splits splits;
  Vocab vocab;
  std::vector<std::string> class_names;

  std::size_t num_classes() const noexcept { return class_names.size(); }
};

/// Reads `{"tokens":[...], "label":int, "rationale":[0|1], "id"?:string}` lines.
/// Blank lines are skipped; token ids are left empty until `assign_ids`.
/// When `num_classes` is given, labels outside [0, num_classes) are rejected.
std::vector<Instance> load_jsonl(const std::filesystem::path& path,
                                 std::optional<std::size_t> num_classes = std::nullopt);
void write_jsonl(const std::filesystem::path& path, const std::vector<Instance>& instances);

/// Lowercases ASCII, splits on Unicode whitespace and strips punctuation from
/// both ends of each token. Tokens that are pure punctuation are dropped.
std::vector<std::string> tokenize(std::string_view text);

/// Tokens with frequency >= min_freq ordered by frequency (desc) then token
/// (asc); indices start after the reserved PAD, UNK and MASK entries.
Vocab build_vocab(const std::vector<Instance>& train, std::size_t min_freq);

void assign_ids(std::vector<Instance>& instances, const Vocab& vocab);

/// Label-stratified, seed-deterministic split into train/dev/test.
Splits split(std::vector<Instance> instances, const std::array<double, 3>& ratios,
             std::uint64_t seed);

/// Synthetic corpus where each instance holds 8-20 uniform filler tokens and
/// 1-3 planted keywords of its class; the rationale marks exactly the
/// keywords. `vocab_size` counts distinct corpus tokens (keywords + fillers).
Corpus synth_keyword_corpus(std::size_t n, std::size_t classes, std::size_t vocab_size,
                            std::uint64_t seed);

/// Builds a corpus from pre-split instance lists (vocab from train, min_freq 1).
Corpus make_corpus(std::string name, Splits splits, std::size_t num_classes,
                   std::size_t min_freq = 1);

/// FNV-1a digest of every split's ids, tokens, labels and rationales, hex encoded.
std::string corpus_hash(const Corpus& corpus);

}  // namespace xaidiag
