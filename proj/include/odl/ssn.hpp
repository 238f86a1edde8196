#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "odl/corpus.hpp"
#include "odl/numerics/lstm.hpp"
#include "odl/numerics/optimizer.hpp"
#include "odl/sampling.hpp"

namespace odl {

enum class EncodingMode { kPair, kUtteranceOnly };

std::string to_string(EncodingMode mode);
EncodingMode parse_encoding_mode(std::string_view name);

struct SSNConfig {
  std::size_t vocab_size = 0;
  std::size_t embed_dim = 128;
  std::size_t pair_hidden = 256;
  std::size_t reason_hidden = 1024;
  std::size_t mlp_hidden = 512;
  EncodingMode mode = EncodingMode::kPair;
  // false: the MLP sees the target triple embedding alone.
  bool use_references = true;

  static SSNConfig open_domain(std::size_t vocab_size);
  static SSNConfig task_oriented(std::size_t vocab_size);
  static SSNConfig toy(std::size_t vocab_size);

  void validate() const;
  std::size_t pair_dim() const { return 2 * pair_hidden; }
  std::size_t triple_dim() const { return 2 * reason_hidden; }
  std::size_t mlp_input() const { return (use_references ? 3 : 1) * triple_dim(); }

  nlohmann::json to_json() const;
  static SSNConfig from_json(const nlohmann::json& j);
  bool operator==(const SSNConfig&) const = default;
};

template <typename T>
struct SSNWeights {
  nn::Var<T> embedding;
  nn::LstmWeights<T> pair_fwd, pair_bwd, reason_fwd, reason_bwd;
  nn::Var<T> w1, b1, w2, b2;
};

// Parameters:
//   embedding       (V, E)
//   pair.fwd/bwd    LSTM, input E, hidden P
//   reason.fwd/bwd  LSTM, input 2P, hidden R
//   mlp.w1 (M, 6R or 2R), mlp.b1 (M), mlp.w2 (1, M), mlp.b2 (1)
template <typename T>
class SSNNet {
 public:
  SSNNet() = default;
  explicit SSNNet(const SSNConfig& config);

  const SSNConfig& config() const { return config_; }
  nn::ParameterSet<T>& params() { return params_; }
  const nn::ParameterSet<T>& params() const { return params_; }

  void init(Rng& rng, double range = 0.08) { params_.init_uniform(rng, range); }

  // Trainable binding; the const overload records frozen weights.
  SSNWeights<T> bind(nn::Tape<T>& tape);
  SSNWeights<T> bind(nn::Tape<T>& tape) const;

  template <typename U>
  SSNNet<U> cast() const {
    SSNNet<U> out;
    out.config_ = config_;
    out.params_ = params_.template cast<U>();
    return out;
  }

 private:
  template <typename>
  friend class SSNNet;
  SSNConfig config_;
  nn::ParameterSet<T> params_;
};

using SSNModel = SSNNet<float>;

// Pair embedding U = [backward state at the first token; forward state at the last].
// In utterance-only mode `a` is ignored.
template <typename T>
nn::Var<T> encode_pair(const SSNWeights<T>& w, const SSNConfig& config,
                       const Utterance& q, const Utterance& a);

// Triple embedding: max-pooled backward and forward states of a 3-step bi-LSTM.
template <typename T>
nn::Var<T> encode_triple(const SSNWeights<T>& w, const nn::Var<T>& u1, const nn::Var<T>& u2,
                         const nn::Var<T>& u3);

// Pre-sigmoid MLP output over [T; T'; T''] (or T alone without references).
template <typename T>
nn::Var<T> mlp_logit(const SSNWeights<T>& w, const nn::Var<T>& target, const nn::Var<T>* ref1,
                     const nn::Var<T>* ref2);

// A padded dialogue seen at turn t, optionally with Q_t and/or A_t replaced.
struct TurnView {
  const Dialogue* dialogue = nullptr;
  int t = 0;
  const Utterance* q_t = nullptr;
  const Utterance* a_t = nullptr;

  const Utterance& q(int index) const;
  const Utterance& a(int index) const;
};

// Values of pair and triple embeddings that do not involve turn t. Valid for
// one frozen model and one dialogue prefix; shared across candidates for t.
template <typename T>
struct HistoryCache {
  std::map<int, nn::Tensor<T>> pairs;
  std::map<std::array<int, 3>, nn::Tensor<T>> triples;
};

// Scores triples of one TurnView on one tape. Pair embeddings are computed
// once per tape.
template <typename T>
class Scorer {
 public:
  Scorer(nn::Tape<T>& tape, const SSNWeights<T>& weights, const SSNConfig& config, TurnView view,
         HistoryCache<T>* cache = nullptr);

  nn::Var<T> pair(int index);
  nn::Var<T> triple(const Triple& triple);
  nn::Var<T> logit(const Triple& target, const Triple* ref1, const Triple* ref2);
  nn::Var<T> logit(const Triple& target, const std::pair<Triple, Triple>& refs) {
    return logit(target, &refs.first, &refs.second);
  }

  const SSNConfig& config() const { return config_; }
  const TurnView& view() const { return view_; }

 private:
  nn::Tape<T>& tape_;
  const SSNWeights<T>& w_;
  const SSNConfig& config_;
  TurnView view_;
  HistoryCache<T>* cache_;
  std::map<int, nn::Var<T>> pairs_;
};

inline constexpr double kProbClamp = 1e-7;

// Two-sided binary cross entropy with p clamped to [1e-7, 1 - 1e-7].
double bce_loss(double p, OrderLabel y);

// Differentiable mean over m reference draws of BCE(score(target, refs_i), y).
template <typename T>
nn::Var<T> mc_loss(Scorer<T>& scorer, const Triple& target, ReferenceStrategy strategy, int m,
                   Rng& rng);

// Differentiable p*: mean of scores over n_target misordered targets
// containing t, each with m reference draws.
template <typename T>
nn::Var<T> p_star(Scorer<T>& scorer, ReferenceStrategy strategy, const SamplerConfig& config,
                  Rng& rng);

// Probability that `target` is misordered, given one reference pair.
double score(const SSNModel& model, const Dialogue& dialogue, const Triple& target,
             const Triple* ref1, const Triple* ref2);

double mc_loss_value(const SSNModel& model, const Dialogue& dialogue, const Triple& target,
                     ReferenceStrategy strategy, int m, Rng& rng);

// Inference-only p* at turn view.t. `cache` may carry history embeddings
// across calls that share the same model and dialogue prefix.
double estimate_p_star(const SSNModel& model, const TurnView& view, ReferenceStrategy strategy,
                       const SamplerConfig& config, Rng& rng,
                       HistoryCache<float>* cache = nullptr);

// Mean of m scores for one target (m = 1 without references).
double predict(const SSNModel& model, const Dialogue& dialogue, const Triple& target,
               ReferenceStrategy strategy, int m, Rng& rng);

struct TargetExample {
  std::size_t dialogue = 0;
  Triple target;
};

// Balanced targets: the first half of `count` ordered, the rest misordered.
// Each draws a dialogue uniformly and a target containing its last turn.
std::vector<TargetExample> sample_target_examples(const Corpus& corpus, std::size_t count,
                                                  Rng& rng);

struct PretrainConfig {
  int steps = 2000;
  int batch = 32;
  int m = 4;
  ReferenceStrategy strategy = ReferenceStrategy::kOneEach;
};

struct PretrainResult {
  std::vector<double> loss_curve;  // mean batch mc_loss per step
};

// One optimizer step on the batch-mean mc_loss. Returns that mean.
double ssn_train_step(SSNModel& model, const Corpus& corpus,
                      const std::vector<TargetExample>& batch, ReferenceStrategy strategy, int m,
                      nn::Optimizer<float>& optimizer, Rng& rng);

// Each step draws a fresh balanced batch from the corpus.
PretrainResult pretrain_ssn(SSNModel& model, const Corpus& corpus, const PretrainConfig& config,
                            nn::Optimizer<float>& optimizer, Rng& rng);

// Each step draws a batch (with replacement) from a fixed example pool.
PretrainResult train_ssn_on_examples(SSNModel& model, const Corpus& corpus,
                                     const std::vector<TargetExample>& pool,
                                     const PretrainConfig& config,
                                     nn::Optimizer<float>& optimizer, Rng& rng);

// Fraction of examples whose predicted label (p >= 0.5 means misordered) is right.
double ssn_accuracy(const SSNModel& model, const Corpus& corpus,
                    const std::vector<TargetExample>& examples, ReferenceStrategy strategy, int m,
                    Rng& rng);

nlohmann::json ssn_checkpoint_config(const SSNConfig& config);
void save_ssn(const std::filesystem::path& path, const SSNModel& model);
// `expected_mode`, when given, must match the stored mode.
SSNModel load_ssn(const std::filesystem::path& path,
                  std::optional<EncodingMode> expected_mode = std::nullopt);

}  // namespace odl
