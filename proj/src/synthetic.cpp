#include "odl/synthetic.hpp"

#include <algorithm>

#include "odl/error.hpp"
#include "odl/rng.hpp"

namespace odl {

void SyntheticSpec::validate() const {
  if (!(strength >= 0.0 && strength <= 1.0)) throw ConfigError("synthetic strength must lie in [0, 1]");
  if (topics == 0 || vocab_size < topics) throw ConfigError("synthetic vocabulary smaller than topic count");
  if (topics < static_cast<std::size_t>(std::max(max_turns, 1))) {
    throw ConfigError("synthetic topic count must be at least max_turns");
  }
  if (min_turns < 1 || max_turns < min_turns) throw ConfigError("bad synthetic turn range");
  if (min_utterance < 1 || max_utterance < min_utterance) {
    throw ConfigError("bad synthetic utterance length range");
  }
}

std::string synthetic_word(std::size_t w) { return "w" + std::to_string(w); }

std::size_t synthetic_topic(const SyntheticSpec& spec, const SyntheticRegime& regime, int turn) {
  const long topic = regime.offset + regime.direction * static_cast<long>(turn);
  if (topic < 0 || topic >= static_cast<long>(spec.topics)) throw Error("synthetic turn outside the topic line");
  return static_cast<std::size_t>(topic);
}

namespace {

std::string utterance(const SyntheticSpec& spec, std::size_t topic, Rng& rng) {
  const std::size_t lo = topic * spec.vocab_size / spec.topics;
  const std::size_t hi = (topic + 1) * spec.vocab_size / spec.topics;
  const int len = static_cast<int>(rng.uniform_int(spec.min_utterance, spec.max_utterance));
  std::string out;
  for (int i = 0; i < len; ++i) {
    std::size_t w;
    if (rng.bernoulli(spec.strength)) {
      w = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(lo), static_cast<std::int64_t>(hi) - 1));
    } else {
      w = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(spec.vocab_size) - 1));
    }
    if (i) out += ' ';
    out += synthetic_word(w);
  }
  return out;
}

}  // namespace

SyntheticCorpus gen_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng = Rng(spec.seed).split("corpus-synth");
  SyntheticCorpus out;
  for (std::size_t d = 0; d < spec.dialogues; ++d) {
    const int turns = static_cast<int>(rng.uniform_int(spec.min_turns, spec.max_turns));
    const int n_topics = static_cast<int>(spec.topics);
    SyntheticRegime regime;
    regime.direction = rng.bernoulli(0.5) ? 1 : -1;
    regime.offset = regime.direction > 0 ? static_cast<int>(rng.uniform_int(-1, n_topics - 1 - turns))
                                         : static_cast<int>(rng.uniform_int(turns, n_topics));
    Dialogue dialogue;
    for (int k = 1; k <= turns; ++k) {
      const auto topic = synthetic_topic(spec, regime, k);
      UtterancePair p;
      p.index = k;
      p.q.raw_text = utterance(spec, topic, rng);
      p.a.raw_text = utterance(spec, topic, rng);
      dialogue.pairs.push_back(std::move(p));
    }
    out.corpus.dialogues.push_back(std::move(dialogue));
    out.regimes.push_back(regime);
  }
  return out;
}

Corpus gen_synthetic_corpus(const SyntheticSpec& spec) { return gen_synthetic(spec).corpus; }

}  // namespace odl
