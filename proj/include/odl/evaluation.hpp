#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "odl/adversarial.hpp"
#include "odl/generator.hpp"
#include "odl/ssn.hpp"
#include "odl/synthetic.hpp"

namespace odl {

// --- synthetic oracle --------------------------------------------------------

// Exact posterior classifier for unpadded synthetic dialogues: marginalizes the
// dialogue length, direction, offset and the triple's turn indices under the
// generating distributions, and compares the two labels' likelihoods of the
// three presented pairs' words.
class SyntheticOracle {
 public:
  explicit SyntheticOracle(const SyntheticSpec& spec);

  // log P(words | misordered) - log P(words | ordered).
  double log_odds(const Dialogue& raw, const Triple& triple) const;
  // Ties are broken with a fair coin.
  OrderLabel classify(const Dialogue& raw, const Triple& triple, Rng& rng) const;

 private:
  std::vector<double> topic_log_likelihoods(const Utterance& u) const;

  SyntheticSpec spec_;
};

// Balanced triples over the real turns 1..L of an unpadded corpus (first half
// ordered).
std::vector<TargetExample> sample_real_turn_triples(const Corpus& raw, std::size_t count, Rng& rng);

double oracle_accuracy(const SyntheticOracle& oracle, const Corpus& raw,
                       const std::vector<TargetExample>& examples, Rng& rng);

// --- intrinsic protocol ------------------------------------------------------

// Fraction of items whose thresholded score (p >= 0.5 means misordered)
// matches the label.
double threshold_accuracy(const std::vector<double>& scores, const std::vector<OrderLabel>& labels);

class OrderClassifier {
 public:
  virtual ~OrderClassifier() = default;
  virtual void fit(const Corpus& padded, const std::vector<TargetExample>& examples, Rng& rng) = 0;
  // Probability that the example's target is misordered.
  virtual double predict(const Corpus& padded, const TargetExample& example, Rng& rng) = 0;
};

using ClassifierFactory = std::function<std::unique_ptr<OrderClassifier>(std::uint64_t seed)>;

struct IntrinsicConfig {
  int runs = 5;
  std::size_t train_n = 4000;
  std::size_t test_n = 1000;
  // Share of dialogues (taken from the end) held out for testing.
  double test_fraction = 0.2;
  std::uint64_t seed = 0;
  std::string label;
  int threads = 1;
};

struct IntrinsicReport {
  std::string label;
  std::vector<double> accuracies;
  double mean = 0.0;
  double stdev = 0.0;
  std::size_t test_n = 0;
};

// Splits the padded corpus by dialogue, draws one balanced training pool and
// one balanced test set, then trains a fresh classifier per run (seeded from
// config.seed and the run index) and records its test accuracy.
IntrinsicReport intrinsic_eval(const ClassifierFactory& factory, const Corpus& padded,
                               const IntrinsicConfig& config);

struct SsnClassifierConfig {
  SSNConfig ssn;
  PretrainConfig train;
  nn::OptimizerConfig optimizer;
  int eval_m = 1;
};

class SsnClassifier : public OrderClassifier {
 public:
  SsnClassifier(const SsnClassifierConfig& config, std::uint64_t seed);
  void fit(const Corpus& padded, const std::vector<TargetExample>& examples, Rng& rng) override;
  double predict(const Corpus& padded, const TargetExample& example, Rng& rng) override;
  const SSNModel& model() const { return model_; }

 private:
  SsnClassifierConfig config_;
  SSNModel model_;
};

// --- hierarchical history baseline --------------------------------------------

struct HierConfig {
  SSNConfig triple;  // embedding, pair and reasoning sizes; MLP hidden size
  std::size_t utterance_hidden = 32;
  std::size_t turn_hidden = 32;

  void validate() const;
};

struct HierWeights {
  SSNWeights<float> triple;  // embedding, pair and reasoning encoders only
  nn::LstmWeights<float> utterance, turn;
  nn::Var<float> w1, b1, w2, b2;
};

// Target triple encoded as in the SSN, the history before turn t encoded by an
// utterance-level LSTM (per utterance) then a turn-level LSTM over the
// utterance states in dialogue order, and an MLP over both.
// Parameters: embedding, pair.*, reason.*, hier.utt, hier.turn, mlp.*.
class HierBaseline {
 public:
  explicit HierBaseline(const HierConfig& config);
  const HierConfig& config() const { return config_; }
  nn::ParameterSet<float>& params() { return params_; }
  const nn::ParameterSet<float>& params() const { return params_; }
  void init(Rng& rng, double range = 0.08) { params_.init_uniform(rng, range); }

  HierWeights bind(nn::Tape<float>& tape);
  HierWeights bind(nn::Tape<float>& tape) const;

 private:
  HierConfig config_;
  nn::ParameterSet<float> params_;
};

// Final turn-level state over Q and A of every pair with index < t.
nn::Var<float> history_embedding(const HierWeights& w, const Dialogue& dialogue, int t);
nn::Var<float> hier_logit(const HierWeights& w, const HierConfig& config, const Dialogue& padded,
                          const Triple& target);

// Probability that `target` is misordered; needs at least one history pair.
double baseline_score(const HierBaseline& baseline, const Dialogue& padded, const Triple& target);

struct HierClassifierConfig {
  HierConfig model;
  PretrainConfig train;  // steps and batch
  nn::OptimizerConfig optimizer;
};

class HierClassifier : public OrderClassifier {
 public:
  HierClassifier(const HierClassifierConfig& config, std::uint64_t seed);
  void fit(const Corpus& padded, const std::vector<TargetExample>& examples, Rng& rng) override;
  double predict(const Corpus& padded, const TargetExample& example, Rng& rng) override;

 private:
  HierClassifierConfig config_;
  HierBaseline model_;
};

// --- generation metrics ------------------------------------------------------

// Probability that `response` at the context's turn is human.
using HumanJudge = std::function<double(const DialogueContext&, const Utterance&)>;

// p* of the response under a frozen SSN.
HumanJudge ssn_judge(const SSNModel& ssn, ReferenceStrategy strategy, const SamplerConfig& sampler,
                     Rng& rng);

// Fraction of generated responses (n per context) the judge scores >= 0.5.
double adver_suc(const Generator& generator, const HumanJudge& judge,
                 std::span<const DialogueContext> contexts, int n, DecodeMode mode, Rng& rng);

// Distinct n-grams over all utterances / total n-grams; 0 when no utterance
// has n tokens.
template <typename Token>
double distinct_n(const std::vector<std::vector<Token>>& utterances, int n);

// --- metric export -------------------------------------------------------------

struct MetricRow {
  std::string metric;
  std::string strategy;
  double mean = 0.0;
  double stdev = 0.0;
  int runs = 0;
  std::size_t n = 0;
};

MetricRow to_metric_row(const IntrinsicReport& report, const std::string& metric = "accuracy");

void write_metrics_csv(std::ostream& out, const std::vector<MetricRow>& rows);
nlohmann::json metrics_to_json(const std::vector<MetricRow>& rows);

}  // namespace odl
