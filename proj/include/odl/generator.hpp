#pragma once

#include <functional>
#include <optional>
#include <utility>
#include <vector>

#include "json.hpp"

#include "odl/corpus.hpp"
#include "odl/numerics/lstm.hpp"
#include "odl/numerics/optimizer.hpp"
#include "odl/rng.hpp"

namespace odl {

enum class AttentionKind { kBilinear, kAdditive };

std::string to_string(AttentionKind kind);
AttentionKind parse_attention(std::string_view name);

struct GenConfig {
  std::size_t vocab_size = 0;
  std::size_t embed_dim = 32;
  std::size_t encoder_hidden = 64;
  std::size_t decoder_hidden = 64;
  std::size_t max_decode_len = 20;
  int rollouts = 4;
  AttentionKind attention = AttentionKind::kBilinear;

  static GenConfig toy(std::size_t vocab_size);
  void validate() const;
  nlohmann::json to_json() const;
  static GenConfig from_json(const nlohmann::json& j);
  bool operator==(const GenConfig&) const = default;
};

template <typename T>
struct GenWeights {
  nn::Var<T> embedding;
  nn::LstmWeights<T> encoder, decoder;
  nn::Var<T> bridge_w, bridge_b;
  nn::Var<T> attn_w;                      // bilinear (He, Hd)
  nn::Var<T> attn_w1, attn_w2, attn_v;    // additive (Hd, Hd), (Hd, He), (1, Hd)
  nn::Var<T> combine_w, combine_b;        // (Hd, Hd + He), (Hd)
  nn::Var<T> out_w, out_b;                // (V, Hd), (V)
};

// Parameter names: embedding, enc.*, dec.*, bridge.{w,b}, attn.w or
// attn.{w1,w2,v}, combine.{w,b}, out.{w,b}.
template <typename T>
class GeneratorNet {
 public:
  GeneratorNet() = default;
  explicit GeneratorNet(const GenConfig& config);

  const GenConfig& config() const { return config_; }
  nn::ParameterSet<T>& params() { return params_; }
  const nn::ParameterSet<T>& params() const { return params_; }
  void init(Rng& rng, double range = 0.08) { params_.init_uniform(rng, range); }

  GenWeights<T> bind(nn::Tape<T>& tape);
  GenWeights<T> bind(nn::Tape<T>& tape) const;

  template <typename U>
  GeneratorNet<U> cast() const {
    GeneratorNet<U> out;
    out.config_ = config_;
    out.params_ = params_.template cast<U>();
    return out;
  }

 private:
  template <typename>
  friend class GeneratorNet;
  GenConfig config_;
  nn::ParameterSet<T> params_;
};

using Generator = GeneratorNet<float>;

// The two utterances preceding A_t: A_{t-1} (padding at t = 1) and Q_t.
struct GenHistory {
  Utterance previous;
  Utterance query;
};

GenHistory history_at(const Dialogue& padded, int t);

template <typename T>
struct EncodedHistory {
  std::vector<nn::Var<T>> states;  // one per history token
  nn::Var<T> memory;               // (n, He)
  nn::Var<T> memory_t;             // (He, n)
  std::vector<nn::Var<T>> keys;    // additive form: attn.w2 * state
  nn::LstmState<T> initial;        // decoder start state from the bridge
};

template <typename T>
EncodedHistory<T> encode_history(const GenWeights<T>& w, const GenConfig& config,
                                 nn::Tape<T>& tape, const GenHistory& history);

template <typename T>
struct DecoderOutput {
  nn::LstmState<T> state;
  nn::Var<T> log_probs;  // (V)
};

// One decoder step: feed `prev`, attend, project to log-probabilities.
template <typename T>
DecoderOutput<T> decoder_step(const GenWeights<T>& w, const GenConfig& config,
                              const EncodedHistory<T>& context, const nn::LstmState<T>& state,
                              TokenId prev);

// Teacher-forced log-probabilities of `tokens` (the EOS, when wanted, is part of
// `tokens`), starting from BOS.
template <typename T>
std::vector<nn::Var<T>> token_log_probs(const GenWeights<T>& w, const GenConfig& config,
                                        const EncodedHistory<T>& context,
                                        const std::vector<TokenId>& tokens);

struct GenerationSample {
  std::vector<TokenId> tokens;  // includes a final EOS when one was produced
  std::vector<double> log_probs;
  std::vector<double> rewards;

  // Tokens without the final EOS; an empty response becomes a single UNK.
  Utterance response() const;
};

enum class DecodeMode { kGreedy, kSample };

// Sampling needs `rng`. Stops at EOS or after max_decode_len tokens.
GenerationSample decode(const Generator& generator, const GenHistory& history, DecodeMode mode,
                        Rng* rng = nullptr);

// Mean per-token cross entropy of gold + EOS under teacher forcing.
double mle_loss(const Generator& generator, const GenHistory& history, const Utterance& gold);
// Adds the gradient of the mean per-token loss, scaled by `weight`, into
// the parameter gradients. Returns the loss.
double accumulate_mle_grad(Generator& generator, const GenHistory& history, const Utterance& gold,
                           float weight = 1.0f);
double mle_step(Generator& generator, const GenHistory& history, const Utterance& gold,
                nn::Optimizer<float>& optimizer);
// One step on the batch mean.
double mle_batch_step(Generator& generator,
                      const std::vector<std::pair<GenHistory, Utterance>>& batch,
                      nn::Optimizer<float>& optimizer);

using RewardFn = std::function<double(const Utterance&)>;

// Step i's reward averages reward_fn over `rollouts` sampled completions of
// tokens[0..i]; the last step scores the sample itself.
std::vector<double> mc_step_rewards(const Generator& generator, const GenHistory& history,
                                    const GenerationSample& sample, const RewardFn& reward_fn,
                                    int rollouts, Rng& rng);

// Exponential moving average of mean rewards; the first update sets it.
struct RewardBaseline {
  double value = 0.0;
  double decay = 0.99;
  bool initialized = false;

  void update(double mean_reward);
};

// Adds the gradient of -sum_i (r_i - baseline) log p_i, scaled by `weight`.
void accumulate_reinforce_grad(Generator& generator, const GenHistory& history,
                               const GenerationSample& sample, double baseline,
                               float weight = 1.0f);

// One REINFORCE step on the batch mean, then the baseline moves toward the
// batch's mean reward (an unset baseline starts at it). Returns that mean.
double reinforce_step(Generator& generator,
                      const std::vector<std::pair<GenHistory, GenerationSample>>& batch,
                      RewardBaseline& baseline, nn::Optimizer<float>& optimizer);

void save_generator(const std::filesystem::path& path, const Generator& generator);
Generator load_generator(const std::filesystem::path& path);

}  // namespace odl
