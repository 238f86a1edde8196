#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "odl/corpus.hpp"

namespace odl {

// Topic-line dialogues. Content words "w0".."w{V-1}" fall into `topics`
// contiguous buckets (word w is in bucket w * topics / V). A dialogue of L
// turns picks a direction d in {+1, -1} and an offset o, uniform over the
// values keeping every topic o + d * k (k = 1..L) inside [0, topics). Every
// token of Q_k and A_k comes from bucket o + d * k with probability
// `strength`, otherwise uniformly from all V words.
struct SyntheticSpec {
  std::size_t vocab_size = 32;
  std::size_t topics = 16;
  int min_turns = 4;
  int max_turns = 8;
  int min_utterance = 2;
  int max_utterance = 3;
  double strength = 1.0;
  std::size_t dialogues = 2000;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SyntheticRegime {
  int offset = 0;
  int direction = 1;
};

struct SyntheticCorpus {
  Corpus corpus;  // raw text, unpadded
  std::vector<SyntheticRegime> regimes;
};

SyntheticCorpus gen_synthetic(const SyntheticSpec& spec);
Corpus gen_synthetic_corpus(const SyntheticSpec& spec);

std::string synthetic_word(std::size_t w);
std::size_t synthetic_topic(const SyntheticSpec& spec, const SyntheticRegime& regime, int turn);

}  // namespace odl
