#include "odl/generator.hpp"

#include <algorithm>
#include <cmath>

#include "odl/error.hpp"
#include "odl/numerics/checkpoint.hpp"

namespace odl {

using nlohmann::json;

std::string to_string(AttentionKind kind) {
  return kind == AttentionKind::kBilinear ? "bilinear" : "additive";
}

AttentionKind parse_attention(std::string_view name) {
  if (name == "bilinear") return AttentionKind::kBilinear;
  if (name == "additive") return AttentionKind::kAdditive;
  throw ConfigError("unknown attention '" + std::string(name) + "'");
}

GenConfig GenConfig::toy(std::size_t vocab_size) {
  GenConfig c;
  c.vocab_size = vocab_size;
  return c;
}

void GenConfig::validate() const {
  if (vocab_size <= kReservedIds || embed_dim == 0 || encoder_hidden == 0 || decoder_hidden == 0) {
    throw ConfigError("generator dimensions must be positive");
  }
  if (max_decode_len < 1) throw ConfigError("max_decode_len must be at least 1");
  if (rollouts < 1) throw ConfigError("rollouts must be at least 1");
}

json GenConfig::to_json() const {
  return json{{"vocab_size", vocab_size},         {"embed_dim", embed_dim},
              {"encoder_hidden", encoder_hidden}, {"decoder_hidden", decoder_hidden},
              {"max_decode_len", max_decode_len}, {"rollouts", rollouts},
              {"attention", to_string(attention)}};
}

GenConfig GenConfig::from_json(const json& j) {
  GenConfig c;
  try {
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.encoder_hidden = j.value("encoder_hidden", c.encoder_hidden);
    c.decoder_hidden = j.value("decoder_hidden", c.decoder_hidden);
    c.max_decode_len = j.value("max_decode_len", c.max_decode_len);
    c.rollouts = j.value("rollouts", c.rollouts);
    c.attention = parse_attention(j.value("attention", std::string("bilinear")));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad generator config: ") + e.what());
  }
  c.validate();
  return c;
}

template <typename T>
GeneratorNet<T>::GeneratorNet(const GenConfig& config) : config_(config) {
  config.validate();
  const std::size_t V = config.vocab_size, E = config.embed_dim;
  const std::size_t He = config.encoder_hidden, Hd = config.decoder_hidden;
  params_.add("embedding", nn::Shape{V, E});
  nn::add_lstm_params(params_, "enc", {E, He});
  nn::add_lstm_params(params_, "dec", {E, Hd});
  params_.add("bridge.w", nn::Shape{Hd, He});
  params_.add("bridge.b", nn::Shape{Hd});
  if (config.attention == AttentionKind::kBilinear) {
    params_.add("attn.w", nn::Shape{He, Hd});
  } else {
    params_.add("attn.w1", nn::Shape{Hd, Hd});
    params_.add("attn.w2", nn::Shape{Hd, He});
    params_.add("attn.v", nn::Shape{1, Hd});
  }
  params_.add("combine.w", nn::Shape{Hd, Hd + He});
  params_.add("combine.b", nn::Shape{Hd});
  params_.add("out.w", nn::Shape{V, Hd});
  params_.add("out.b", nn::Shape{V});
}

namespace {

template <typename T, typename PS>
GenWeights<T> bind_gen(nn::Tape<T>& tape, PS& params, AttentionKind attention) {
  GenWeights<T> w;
  w.embedding = tape.param(params.get("embedding"));
  w.encoder = nn::bind_lstm(tape, params, "enc");
  w.decoder = nn::bind_lstm(tape, params, "dec");
  w.bridge_w = tape.param(params.get("bridge.w"));
  w.bridge_b = tape.param(params.get("bridge.b"));
  if (attention == AttentionKind::kBilinear) {
    w.attn_w = tape.param(params.get("attn.w"));
  } else {
    w.attn_w1 = tape.param(params.get("attn.w1"));
    w.attn_w2 = tape.param(params.get("attn.w2"));
    w.attn_v = tape.param(params.get("attn.v"));
  }
  w.combine_w = tape.param(params.get("combine.w"));
  w.combine_b = tape.param(params.get("combine.b"));
  w.out_w = tape.param(params.get("out.w"));
  w.out_b = tape.param(params.get("out.b"));
  return w;
}

}  // namespace

template <typename T>
GenWeights<T> GeneratorNet<T>::bind(nn::Tape<T>& tape) {
  return bind_gen(tape, params_, config_.attention);
}

template <typename T>
GenWeights<T> GeneratorNet<T>::bind(nn::Tape<T>& tape) const {
  return bind_gen(tape, params_, config_.attention);
}

GenHistory history_at(const Dialogue& padded, int t) {
  if (!padded.padded()) throw Error("history_at: dialogue is not padded");
  if (t < 1) throw Error("history_at: t must be at least 1");
  return GenHistory{padded.pair(t - 1).a, padded.pair(t).q};
}

template <typename T>
EncodedHistory<T> encode_history(const GenWeights<T>& w, const GenConfig& config,
                                 nn::Tape<T>& tape, const GenHistory& history) {
  if (history.previous.tokens.empty() && history.query.tokens.empty()) {
    throw ShapeError("encode_history: empty history");
  }
  EncodedHistory<T> ctx;
  nn::LstmState<T> s = nn::zero_state(tape, config.encoder_hidden);
  for (const auto* u : {&history.previous, &history.query}) {
    for (TokenId id : u->tokens) {
      s = nn::lstm_cell(nn::embedding(w.embedding, id), s, w.encoder);
      ctx.states.push_back(s.h);
    }
  }
  ctx.memory = nn::stack<T>(ctx.states);
  ctx.memory_t = nn::transpose(ctx.memory);
  if (config.attention == AttentionKind::kAdditive) {
    for (const auto& h : ctx.states) ctx.keys.push_back(nn::matmul(w.attn_w2, h));
  }
  ctx.initial.h = nn::tanh(nn::linear(w.bridge_w, w.bridge_b, s.h));
  ctx.initial.c = tape.constant(nn::Tensor<T>(nn::Shape{config.decoder_hidden}));
  return ctx;
}

template <typename T>
DecoderOutput<T> decoder_step(const GenWeights<T>& w, const GenConfig& config,
                              const EncodedHistory<T>& context, const nn::LstmState<T>& state,
                              TokenId prev) {
  DecoderOutput<T> out;
  out.state = nn::lstm_cell(nn::embedding(w.embedding, prev), state, w.decoder);
  const nn::Var<T>& h = out.state.h;
  nn::Var<T> scores;
  if (config.attention == AttentionKind::kBilinear) {
    scores = nn::matmul(context.memory, nn::matmul(w.attn_w, h));
  } else {
    const nn::Var<T> q = nn::matmul(w.attn_w1, h);
    std::vector<nn::Var<T>> parts;
    parts.reserve(context.keys.size());
    for (const auto& k : context.keys) parts.push_back(nn::matmul(w.attn_v, nn::tanh(nn::add(q, k))));
    scores = nn::concat<T>(parts);
  }
  const nn::Var<T> ctx = nn::matmul(context.memory_t, nn::softmax(scores));
  const nn::Var<T> both[] = {h, ctx};
  const nn::Var<T> combined = nn::tanh(nn::linear(w.combine_w, w.combine_b, nn::concat<T>(both)));
  out.log_probs = nn::log_softmax(nn::linear(w.out_w, w.out_b, combined));
  return out;
}

template <typename T>
std::vector<nn::Var<T>> token_log_probs(const GenWeights<T>& w, const GenConfig& config,
                                        const EncodedHistory<T>& context,
                                        const std::vector<TokenId>& tokens) {
  std::vector<nn::Var<T>> out;
  out.reserve(tokens.size());
  nn::LstmState<T> state = context.initial;
  TokenId prev = kBosId;
  for (TokenId tok : tokens) {
    auto step = decoder_step(w, config, context, state, prev);
    out.push_back(nn::pick(step.log_probs, tok));
    state = step.state;
    prev = tok;
  }
  return out;
}

Utterance GenerationSample::response() const {
  Utterance u;
  u.tokens = tokens;
  if (!u.tokens.empty() && u.tokens.back() == kEosId) u.tokens.pop_back();
  if (u.tokens.empty()) u.tokens.push_back(kUnkId);
  return u;
}

namespace {

TokenId choose(const nn::Tensor<float>& log_probs, DecodeMode mode, Rng* rng) {
  const auto& lp = log_probs.data;
  if (mode == DecodeMode::kGreedy) {
    return static_cast<TokenId>(std::max_element(lp.begin(), lp.end()) - lp.begin());
  }
  if (!rng) throw ConfigError("decode: sampling needs an rng");
  const double u = rng->uniform();
  double acc = 0;
  for (std::size_t i = 0; i < lp.size(); ++i) {
    acc += std::exp(static_cast<double>(lp[i]));
    if (u < acc) return static_cast<TokenId>(i);
  }
  // Rounding left the cumulative sum just below 1: take the last likely token.
  for (std::size_t i = lp.size(); i-- > 0;) {
    if (std::isfinite(lp[i]) && lp[i] > -30.0f) return static_cast<TokenId>(i);
  }
  return static_cast<TokenId>(lp.size() - 1);
}

// Continues decoding from `state` after `prev` until EOS or `budget` tokens.
void continue_decoding(const GenWeights<float>& w, const GenConfig& config,
                       const EncodedHistory<float>& ctx, nn::LstmState<float> state, TokenId prev,
                       std::size_t budget, DecodeMode mode, Rng* rng, GenerationSample& out) {
  for (std::size_t i = 0; i < budget; ++i) {
    auto step = decoder_step(w, config, ctx, state, prev);
    const TokenId tok = choose(step.log_probs.value(), mode, rng);
    out.tokens.push_back(tok);
    out.log_probs.push_back(step.log_probs.value().data[tok]);
    if (tok == kEosId) break;
    state = step.state;
    prev = tok;
  }
}

}  // namespace

GenerationSample decode(const Generator& generator, const GenHistory& history, DecodeMode mode,
                        Rng* rng) {
  nn::Tape<float> tape(false);
  auto w = generator.bind(tape);
  const auto& cfg = generator.config();
  auto ctx = encode_history(w, cfg, tape, history);
  GenerationSample out;
  continue_decoding(w, cfg, ctx, ctx.initial, kBosId, cfg.max_decode_len, mode, rng, out);
  return out;
}

namespace {

std::vector<TokenId> with_eos(const Utterance& gold, std::size_t max_len) {
  if (gold.tokens.empty()) throw ConfigError("MLE target is empty");
  std::vector<TokenId> tokens = gold.tokens;
  if (tokens.size() >= max_len) tokens.resize(max_len);
  else tokens.push_back(kEosId);
  return tokens;
}

template <typename G>
nn::Var<float> mean_nll(nn::Tape<float>& tape, G& generator, const GenHistory& history,
                        const Utterance& gold) {
  auto w = generator.bind(tape);
  const auto& cfg = generator.config();
  auto ctx = encode_history(w, cfg, tape, history);
  auto lps = token_log_probs(w, cfg, ctx, with_eos(gold, cfg.max_decode_len));
  return nn::scale(nn::mean<float>(lps), -1.0f);
}

}  // namespace

double mle_loss(const Generator& generator, const GenHistory& history, const Utterance& gold) {
  nn::Tape<float> tape(false);
  return mean_nll(tape, generator, history, gold).item();
}

double accumulate_mle_grad(Generator& generator, const GenHistory& history, const Utterance& gold,
                           float weight) {
  nn::Tape<float> tape;
  auto loss = mean_nll(tape, generator, history, gold);
  tape.backward(nn::scale(loss, weight));
  return loss.item();
}

double mle_step(Generator& generator, const GenHistory& history, const Utterance& gold,
                nn::Optimizer<float>& optimizer) {
  const double loss = accumulate_mle_grad(generator, history, gold);
  optimizer.step(generator.params());
  return loss;
}

double mle_batch_step(Generator& generator,
                      const std::vector<std::pair<GenHistory, Utterance>>& batch,
                      nn::Optimizer<float>& optimizer) {
  if (batch.empty()) throw ConfigError("mle_batch_step: empty batch");
  const float inv = 1.0f / static_cast<float>(batch.size());
  double total = 0;
  for (const auto& [h, gold] : batch) total += accumulate_mle_grad(generator, h, gold, inv);
  optimizer.step(generator.params());
  return total / static_cast<double>(batch.size());
}

std::vector<double> mc_step_rewards(const Generator& generator, const GenHistory& history,
                                    const GenerationSample& sample, const RewardFn& reward_fn,
                                    int rollouts, Rng& rng) {
  if (rollouts < 1) throw ConfigError("mc_step_rewards: rollouts must be at least 1");
  const std::size_t n = sample.tokens.size();
  std::vector<double> rewards(n, 0.0);
  if (n == 0) return rewards;
  nn::Tape<float> tape(false);
  auto w = generator.bind(tape);
  const auto& cfg = generator.config();
  auto ctx = encode_history(w, cfg, tape, history);

  nn::LstmState<float> state = ctx.initial;
  TokenId prev = kBosId;
  for (std::size_t i = 0; i + 1 < n; ++i) {
    state = decoder_step(w, cfg, ctx, state, prev).state;
    prev = sample.tokens[i];
    double total = 0;
    for (int r = 0; r < rollouts; ++r) {
      GenerationSample done;
      done.tokens.assign(sample.tokens.begin(), sample.tokens.begin() + static_cast<long>(i) + 1);
      const std::size_t budget = cfg.max_decode_len > i + 1 ? cfg.max_decode_len - i - 1 : 0;
      continue_decoding(w, cfg, ctx, state, prev, budget, DecodeMode::kSample, &rng, done);
      total += reward_fn(done.response());
    }
    rewards[i] = total / rollouts;
  }
  rewards[n - 1] = reward_fn(sample.response());
  return rewards;
}

void RewardBaseline::update(double mean_reward) {
  if (!initialized) {
    value = mean_reward;
    initialized = true;
    return;
  }
  value = decay * value + (1.0 - decay) * mean_reward;
}

void accumulate_reinforce_grad(Generator& generator, const GenHistory& history,
                               const GenerationSample& sample, double baseline, float weight) {
  if (sample.rewards.size() != sample.tokens.size()) {
    throw ConfigError("reinforce: sample rewards not filled");
  }
  if (sample.tokens.empty()) return;
  nn::Tape<float> tape;
  auto w = generator.bind(tape);
  const auto& cfg = generator.config();
  auto ctx = encode_history(w, cfg, tape, history);
  auto lps = token_log_probs(w, cfg, ctx, sample.tokens);
  std::vector<nn::Var<float>> terms;
  terms.reserve(lps.size());
  for (std::size_t i = 0; i < lps.size(); ++i) {
    const auto adv = static_cast<float>(-(sample.rewards[i] - baseline)) * weight;
    terms.push_back(nn::scale(lps[i], adv));
  }
  const nn::Var<float> loss = nn::sum(nn::concat<float>(terms));
  tape.backward(loss);
}

double reinforce_step(Generator& generator,
                      const std::vector<std::pair<GenHistory, GenerationSample>>& batch,
                      RewardBaseline& baseline, nn::Optimizer<float>& optimizer) {
  if (batch.empty()) throw ConfigError("reinforce_step: empty batch");
  double total = 0;
  std::size_t count = 0;
  for (const auto& [h, s] : batch) {
    for (double r : s.rewards) total += r;
    count += s.rewards.size();
  }
  const double mean_reward = count ? total / static_cast<double>(count) : 0.0;
  const bool first = !baseline.initialized;
  if (first) baseline.update(mean_reward);
  const float inv = 1.0f / static_cast<float>(batch.size());
  for (const auto& [h, s] : batch) accumulate_reinforce_grad(generator, h, s, baseline.value, inv);
  optimizer.step(generator.params());
  if (!first) baseline.update(mean_reward);
  return mean_reward;
}

void save_generator(const std::filesystem::path& path, const Generator& generator) {
  nn::save_checkpoint(path, generator.params(),
                      json{{"model", "generator"}, {"generator", generator.config().to_json()}});
}

Generator load_generator(const std::filesystem::path& path) {
  auto ck = nn::load_checkpoint(path);
  if (ck.config.value("model", std::string()) != "generator" || !ck.config.contains("generator")) {
    throw ConfigError(path.string() + ": not a generator checkpoint");
  }
  Generator g(GenConfig::from_json(ck.config.at("generator")));
  nn::assign_parameters(g.params(), ck.params);
  return g;
}

#define ODL_INSTANTIATE_GEN(T)                                                                   \
  template class GeneratorNet<T>;                                                                \
  template EncodedHistory<T> encode_history(const GenWeights<T>&, const GenConfig&, nn::Tape<T>&, \
                                            const GenHistory&);                                  \
  template DecoderOutput<T> decoder_step(const GenWeights<T>&, const GenConfig&,                 \
                                         const EncodedHistory<T>&, const nn::LstmState<T>&,      \
                                         TokenId);                                               \
  template std::vector<nn::Var<T>> token_log_probs(const GenWeights<T>&, const GenConfig&,       \
                                                   const EncodedHistory<T>&,                     \
                                                   const std::vector<TokenId>&);

ODL_INSTANTIATE_GEN(float)
ODL_INSTANTIATE_GEN(double)

}  // namespace odl
