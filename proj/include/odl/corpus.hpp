#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace odl {

using TokenId = std::uint32_t;

inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kBosId = 1;
inline constexpr TokenId kEosId = 2;
inline constexpr TokenId kUnkId = 3;
inline constexpr TokenId kReservedIds = 4;

struct Utterance {
  std::vector<TokenId> tokens;
  std::optional<std::string> raw_text;

  bool operator==(const Utterance&) const = default;
};

// One dialogue turn (Q_t, A_t). Padding pairs carry indices -2, -1, 0.
struct UtterancePair {
  Utterance q;
  Utterance a;
  int index = 0;
};

struct Dialogue {
  std::vector<UtterancePair> pairs;

  bool padded() const { return !pairs.empty() && pairs.front().index == -2; }
  // Largest (real) turn index.
  int turns() const { return pairs.empty() ? 0 : pairs.back().index; }
  const UtterancePair& pair(int index) const;
  bool has_index(int index) const;
};

struct Corpus {
  std::vector<Dialogue> dialogues;
  std::size_t skipped_empty = 0;

  std::size_t size() const { return dialogues.size(); }
  bool empty() const { return dialogues.empty(); }
};

class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> tokens);

  std::size_t size() const { return tokens_.size() + kReservedIds; }
  TokenId id(std::string_view token) const;  // UNK when absent
  bool contains(std::string_view token) const { return ids_.count(std::string(token)) > 0; }
  std::string token(TokenId id) const;
  // Non-reserved tokens in id order (position = id - 4).
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::string to_json() const;
  static Vocabulary from_json(const std::string& text);
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
};

struct PaddingSpec {
  TokenId pad_word_id = kPadId;
  std::size_t n = 1;
};

// Lowercases ASCII letters and splits on whitespace.
std::vector<std::string> tokenize(std::string_view text);

Corpus parse_corpus(const std::string& text);
Corpus load_corpus(const std::filesystem::path& path);
std::string corpus_to_jsonl(const Corpus& corpus, const Vocabulary* vocab = nullptr);
void save_corpus(const std::filesystem::path& path, const Corpus& corpus,
                 const Vocabulary* vocab = nullptr);

// Drops pairs whose Q or A word count falls outside [min_words, max_words],
// then renumbers the surviving pairs 1..t. Dialogues left empty are dropped.
Corpus filter_by_length(const Corpus& corpus, std::size_t min_words,
                        std::size_t max_words = std::numeric_limits<std::size_t>::max());

PaddingSpec compute_padding_spec(const Corpus& corpus);
Dialogue apply_padding(const Dialogue& dialogue, const PaddingSpec& spec);
Corpus apply_padding(const Corpus& corpus, const PaddingSpec& spec);

Vocabulary build_vocab(const Corpus& corpus, std::size_t min_count = 1);
Utterance encode(const Vocabulary& vocab, std::string_view text);
Corpus encode_corpus(const Vocabulary& vocab, const Corpus& corpus);
std::string decode(const Vocabulary& vocab, const std::vector<TokenId>& tokens);

// Reads the corpus, builds or applies a vocabulary, encodes and pads it.
struct PreparedCorpus {
  Corpus corpus;  // encoded and padded
  Vocabulary vocab;
  PaddingSpec padding;
};
PreparedCorpus prepare_corpus(const Corpus& raw, std::size_t min_count = 1);
PreparedCorpus prepare_corpus(const Corpus& raw, const Vocabulary& vocab);

}  // namespace odl
