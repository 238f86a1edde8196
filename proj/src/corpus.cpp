#include "odl/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <sstream>

#include "json.hpp"
#include "odl/error.hpp"
#include "odl/log.hpp"
#include "odl/numerics/checkpoint.hpp"

namespace odl {

using nlohmann::json;

const UtterancePair& Dialogue::pair(int index) const {
  if (!has_index(index)) {
    throw Error("turn index " + std::to_string(index) + " not present in dialogue");
  }
  return pairs[static_cast<std::size_t>(index - pairs.front().index)];
}

bool Dialogue::has_index(int index) const {
  return !pairs.empty() && index >= pairs.front().index && index <= pairs.back().index;
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

// --- Vocabulary ---------------------------------------------------------

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    auto [it, fresh] = ids_.emplace(tokens_[i], static_cast<TokenId>(i + kReservedIds));
    if (!fresh) throw ParseError("vocabulary: duplicate token '" + tokens_[i] + "'");
  }
}

TokenId Vocabulary::id(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  return it == ids_.end() ? kUnkId : it->second;
}

std::string Vocabulary::token(TokenId id) const {
  switch (id) {
    case kPadId: return "<pad>";
    case kBosId: return "<bos>";
    case kEosId: return "<eos>";
    case kUnkId: return "<unk>";
    default: break;
  }
  if (id >= size()) throw Error("token id " + std::to_string(id) + " outside vocabulary");
  return tokens_[id - kReservedIds];
}

std::string Vocabulary::to_json() const {
  std::string s = "{\"tokens\": [";
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (i) s += ", ";
    s += json(tokens_[i]).dump();
  }
  return s + "]}\n";
}

Vocabulary Vocabulary::from_json(const std::string& text) {
  try {
    auto doc = json::parse(text);
    return Vocabulary(doc.at("tokens").get<std::vector<std::string>>());
  } catch (const json::exception& e) {
    throw ParseError(std::string("vocabulary: ") + e.what());
  }
}

void Vocabulary::save(const std::filesystem::path& path) const {
  nn::write_file_atomic(path, to_json());
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  return from_json(nn::read_file(path));
}

// --- Corpus I/O ---------------------------------------------------------

Corpus parse_corpus(const std::string& text) {
  Corpus corpus;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); })) continue;
    auto fail = [&](const std::string& why) -> ParseError {
      return ParseError("corpus line " + std::to_string(line_no) + ": " + why);
    };
    json doc;
    try {
      doc = json::parse(line);
    } catch (const json::exception& e) {
      throw fail(e.what());
    }
    if (!doc.is_object() || !doc.contains("pairs") || !doc["pairs"].is_array()) {
      throw fail("expected an object with a \"pairs\" array");
    }
    Dialogue d;
    int index = 1;
    for (const auto& rec : doc["pairs"]) {
      if (!rec.is_object()) throw fail("pair record is not an object");
      for (const char* key : {"q", "a"}) {
        if (!rec.contains(key)) throw fail(std::string("pair record missing \"") + key + "\" field");
        if (!rec[key].is_string()) throw fail(std::string("field \"") + key + "\" is not a string");
      }
      UtterancePair p;
      p.q.raw_text = rec["q"].get<std::string>();
      p.a.raw_text = rec["a"].get<std::string>();
      p.index = index++;
      d.pairs.push_back(std::move(p));
    }
    if (d.pairs.empty()) {
      ++corpus.skipped_empty;
      warn("corpus line " + std::to_string(line_no) + ": empty dialogue skipped");
      continue;
    }
    corpus.dialogues.push_back(std::move(d));
  }
  return corpus;
}

Corpus load_corpus(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error("corpus file not found: " + path.string());
  return parse_corpus(nn::read_file(path));
}

namespace {

std::string utterance_text(const Utterance& u, const Vocabulary* vocab) {
  if (u.raw_text) return *u.raw_text;
  if (!vocab) throw Error("utterance has no text and no vocabulary was given");
  return decode(*vocab, u.tokens);
}

std::size_t word_count(const Utterance& u) {
  if (u.raw_text) return tokenize(*u.raw_text).size();
  return u.tokens.size();
}

}  // namespace

std::string corpus_to_jsonl(const Corpus& corpus, const Vocabulary* vocab) {
  std::string out;
  for (const auto& d : corpus.dialogues) {
    out += "{\"pairs\": [";
    bool first = true;
    for (const auto& p : d.pairs) {
      if (p.index <= 0) continue;
      if (!first) out += ", ";
      first = false;
      out += "{\"q\": " + json(utterance_text(p.q, vocab)).dump() +
             ", \"a\": " + json(utterance_text(p.a, vocab)).dump() + "}";
    }
    out += "]}\n";
  }
  return out;
}

void save_corpus(const std::filesystem::path& path, const Corpus& corpus, const Vocabulary* vocab) {
  nn::write_file_atomic(path, corpus_to_jsonl(corpus, vocab));
}

// --- Transformations ----------------------------------------------------

Corpus filter_by_length(const Corpus& corpus, std::size_t min_words, std::size_t max_words) {
  if (min_words > max_words) throw ConfigError("filter_by_length: min_words > max_words");
  Corpus out;
  out.skipped_empty = corpus.skipped_empty;
  auto ok = [&](const Utterance& u) {
    const std::size_t n = word_count(u);
    return n >= min_words && n <= max_words;
  };
  for (const auto& d : corpus.dialogues) {
    if (d.padded()) throw ConfigError("filter_by_length expects an unpadded corpus");
    Dialogue kept;
    for (const auto& p : d.pairs) {
      if (!ok(p.q) || !ok(p.a)) continue;
      UtterancePair q = p;
      q.index = static_cast<int>(kept.pairs.size()) + 1;
      kept.pairs.push_back(std::move(q));
    }
    if (!kept.pairs.empty()) out.dialogues.push_back(std::move(kept));
  }
  return out;
}

PaddingSpec compute_padding_spec(const Corpus& corpus) {
  std::size_t total = 0, count = 0;
  for (const auto& d : corpus.dialogues) {
    for (const auto& p : d.pairs) {
      if (p.index <= 0) continue;
      total += p.q.tokens.size() + p.a.tokens.size();
      count += 2;
    }
  }
  if (count == 0) throw Error("compute_padding_spec: corpus has no utterances");
  PaddingSpec spec;
  spec.n = std::max<std::size_t>(1, (total + count - 1) / count);
  return spec;
}

Dialogue apply_padding(const Dialogue& dialogue, const PaddingSpec& spec) {
  if (dialogue.padded()) throw ConfigError("dialogue is already padded");
  if (spec.n == 0) throw ConfigError("padding length must be at least 1");
  Dialogue out;
  out.pairs.reserve(dialogue.pairs.size() + 3);
  for (int idx = -2; idx <= 0; ++idx) {
    UtterancePair p;
    p.q.tokens.assign(spec.n, spec.pad_word_id);
    p.a.tokens.assign(spec.n, spec.pad_word_id);
    p.index = idx;
    out.pairs.push_back(std::move(p));
  }
  out.pairs.insert(out.pairs.end(), dialogue.pairs.begin(), dialogue.pairs.end());
  return out;
}

Corpus apply_padding(const Corpus& corpus, const PaddingSpec& spec) {
  Corpus out;
  out.skipped_empty = corpus.skipped_empty;
  out.dialogues.reserve(corpus.dialogues.size());
  for (const auto& d : corpus.dialogues) out.dialogues.push_back(apply_padding(d, spec));
  return out;
}

Vocabulary build_vocab(const Corpus& corpus, std::size_t min_count) {
  std::map<std::string, std::size_t> freq;
  for (const auto& d : corpus.dialogues) {
    for (const auto& p : d.pairs) {
      for (const Utterance* u : {&p.q, &p.a}) {
        if (!u->raw_text) continue;
        for (auto& tok : tokenize(*u->raw_text)) ++freq[tok];
      }
    }
  }
  std::vector<std::pair<std::string, std::size_t>> items(freq.begin(), freq.end());
  std::stable_sort(items.begin(), items.end(),
                   [](const auto& x, const auto& y) { return x.second > y.second; });
  std::vector<std::string> tokens;
  for (auto& [tok, n] : items) {
    if (n >= min_count) tokens.push_back(tok);
  }
  return Vocabulary(std::move(tokens));
}

Utterance encode(const Vocabulary& vocab, std::string_view text) {
  Utterance u;
  u.raw_text = std::string(text);
  for (const auto& tok : tokenize(text)) u.tokens.push_back(vocab.id(tok));
  if (u.tokens.empty()) {
    warn("empty utterance encoded as <unk>");
    u.tokens.push_back(kUnkId);
  }
  return u;
}

Corpus encode_corpus(const Vocabulary& vocab, const Corpus& corpus) {
  Corpus out = corpus;
  for (auto& d : out.dialogues) {
    for (auto& p : d.pairs) {
      if (p.index <= 0) continue;
      for (Utterance* u : {&p.q, &p.a}) {
        if (u->raw_text) *u = encode(vocab, *u->raw_text);
      }
    }
  }
  return out;
}

std::string decode(const Vocabulary& vocab, const std::vector<TokenId>& tokens) {
  std::string s;
  for (TokenId t : tokens) {
    if (!s.empty()) s += ' ';
    s += vocab.token(t);
  }
  return s;
}

PreparedCorpus prepare_corpus(const Corpus& raw, const Vocabulary& vocab) {
  PreparedCorpus out;
  out.vocab = vocab;
  Corpus encoded = encode_corpus(vocab, raw);
  out.padding = compute_padding_spec(encoded);
  out.corpus = apply_padding(encoded, out.padding);
  return out;
}

PreparedCorpus prepare_corpus(const Corpus& raw, std::size_t min_count) {
  return prepare_corpus(raw, build_vocab(raw, min_count));
}

}  // namespace odl
