#include "odl/ssn.hpp"

#include <algorithm>
#include <cmath>

#include "odl/error.hpp"
#include "odl/numerics/checkpoint.hpp"

namespace odl {

using nlohmann::json;
namespace nn = odl::nn;

std::string to_string(EncodingMode mode) {
  return mode == EncodingMode::kPair ? "pair" : "utterance-only";
}

EncodingMode parse_encoding_mode(std::string_view name) {
  if (name == "pair") return EncodingMode::kPair;
  if (name == "utterance-only") return EncodingMode::kUtteranceOnly;
  throw ConfigError("unknown encoding mode '" + std::string(name) + "'");
}

// --- config ---------------------------------------------------------------

SSNConfig SSNConfig::open_domain(std::size_t vocab_size) {
  SSNConfig c;
  c.vocab_size = vocab_size;
  return c;
}

SSNConfig SSNConfig::task_oriented(std::size_t vocab_size) {
  SSNConfig c;
  c.vocab_size = vocab_size;
  c.embed_dim = 80;
  c.pair_hidden = 128;
  c.reason_hidden = 512;
  c.mlp_hidden = 128;
  c.mode = EncodingMode::kUtteranceOnly;
  return c;
}

SSNConfig SSNConfig::toy(std::size_t vocab_size) {
  SSNConfig c;
  c.vocab_size = vocab_size;
  c.embed_dim = 32;
  c.pair_hidden = 64;
  c.reason_hidden = 128;
  c.mlp_hidden = 64;
  return c;
}

void SSNConfig::validate() const {
  if (vocab_size == 0 || embed_dim == 0 || pair_hidden == 0 || reason_hidden == 0 ||
      mlp_hidden == 0) {
    throw ConfigError("SSN dimensions must be positive");
  }
}

json SSNConfig::to_json() const {
  return json{{"vocab_size", vocab_size},       {"embed_dim", embed_dim},
              {"pair_hidden", pair_hidden},     {"reason_hidden", reason_hidden},
              {"mlp_hidden", mlp_hidden},       {"mode", odl::to_string(mode)},
              {"use_references", use_references}};
}

SSNConfig SSNConfig::from_json(const json& j) {
  SSNConfig c;
  try {
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.pair_hidden = j.value("pair_hidden", c.pair_hidden);
    c.reason_hidden = j.value("reason_hidden", c.reason_hidden);
    c.mlp_hidden = j.value("mlp_hidden", c.mlp_hidden);
    c.mode = parse_encoding_mode(j.value("mode", std::string("pair")));
    c.use_references = j.value("use_references", true);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad SSN config: ") + e.what());
  }
  c.validate();
  return c;
}

// --- model ----------------------------------------------------------------

template <typename T>
SSNNet<T>::SSNNet(const SSNConfig& config) : config_(config) {
  config.validate();
  params_.add("embedding", nn::Shape{config.vocab_size, config.embed_dim});
  nn::add_lstm_params(params_, "pair.fwd", {config.embed_dim, config.pair_hidden});
  nn::add_lstm_params(params_, "pair.bwd", {config.embed_dim, config.pair_hidden});
  nn::add_lstm_params(params_, "reason.fwd", {config.pair_dim(), config.reason_hidden});
  nn::add_lstm_params(params_, "reason.bwd", {config.pair_dim(), config.reason_hidden});
  params_.add("mlp.w1", nn::Shape{config.mlp_hidden, config.mlp_input()});
  params_.add("mlp.b1", nn::Shape{config.mlp_hidden});
  params_.add("mlp.w2", nn::Shape{1, config.mlp_hidden});
  params_.add("mlp.b2", nn::Shape{1});
}

namespace {

template <typename T, typename PS>
SSNWeights<T> bind_weights(nn::Tape<T>& tape, PS& params) {
  SSNWeights<T> w;
  w.embedding = tape.param(params.get("embedding"));
  w.pair_fwd = nn::bind_lstm(tape, params, "pair.fwd");
  w.pair_bwd = nn::bind_lstm(tape, params, "pair.bwd");
  w.reason_fwd = nn::bind_lstm(tape, params, "reason.fwd");
  w.reason_bwd = nn::bind_lstm(tape, params, "reason.bwd");
  w.w1 = tape.param(params.get("mlp.w1"));
  w.b1 = tape.param(params.get("mlp.b1"));
  w.w2 = tape.param(params.get("mlp.w2"));
  w.b2 = tape.param(params.get("mlp.b2"));
  return w;
}

}  // namespace

template <typename T>
SSNWeights<T> SSNNet<T>::bind(nn::Tape<T>& tape) {
  return bind_weights(tape, params_);
}

template <typename T>
SSNWeights<T> SSNNet<T>::bind(nn::Tape<T>& tape) const {
  return bind_weights(tape, params_);
}

template <typename T>
nn::Var<T> encode_pair(const SSNWeights<T>& w, const SSNConfig& config,
                       const Utterance& q, const Utterance& a) {
  const bool with_a = config.mode == EncodingMode::kPair;
  if (q.tokens.empty() || (with_a && a.tokens.empty())) {
    throw ShapeError("encode_pair: empty utterance");
  }
  std::vector<nn::Var<T>> seq;
  seq.reserve(q.tokens.size() + (with_a ? a.tokens.size() : 0));
  for (TokenId id : q.tokens) seq.push_back(nn::embedding(w.embedding, id));
  if (with_a) {
    for (TokenId id : a.tokens) seq.push_back(nn::embedding(w.embedding, id));
  }
  auto out = nn::bilstm<T>(seq, w.pair_fwd, w.pair_bwd);
  const nn::Var<T> parts[] = {out.backward.front(), out.forward.back()};
  return nn::concat<T>(parts);
}

template <typename T>
nn::Var<T> encode_triple(const SSNWeights<T>& w, const nn::Var<T>& u1, const nn::Var<T>& u2,
                         const nn::Var<T>& u3) {
  if (u1.size() != u2.size() || u1.size() != u3.size()) {
    throw ShapeError("encode_triple: pair embeddings differ in size");
  }
  const nn::Var<T> seq[] = {u1, u2, u3};
  auto out = nn::bilstm<T>(seq, w.reason_fwd, w.reason_bwd);
  const nn::Var<T> parts[] = {nn::max_pool<T>(out.backward), nn::max_pool<T>(out.forward)};
  return nn::concat<T>(parts);
}

template <typename T>
nn::Var<T> mlp_logit(const SSNWeights<T>& w, const nn::Var<T>& target, const nn::Var<T>* ref1,
                     const nn::Var<T>* ref2) {
  nn::Var<T> x = target;
  if (ref1 || ref2) {
    if (!ref1 || !ref2) throw ShapeError("mlp_logit: references come in pairs");
    const nn::Var<T> parts[] = {target, *ref1, *ref2};
    x = nn::concat<T>(parts);
  }
  nn::Var<T> h = nn::tanh(nn::linear(w.w1, w.b1, x));
  return nn::linear(w.w2, w.b2, h);
}

// --- scoring ----------------------------------------------------------------

const Utterance& TurnView::q(int index) const {
  if (index > t) throw Error("turn index " + std::to_string(index) + " is after turn " + std::to_string(t));
  if (index == t && q_t) return *q_t;
  return dialogue->pair(index).q;
}

const Utterance& TurnView::a(int index) const {
  if (index > t) throw Error("turn index " + std::to_string(index) + " is after turn " + std::to_string(t));
  if (index == t && a_t) return *a_t;
  return dialogue->pair(index).a;
}

template <typename T>
Scorer<T>::Scorer(nn::Tape<T>& tape, const SSNWeights<T>& weights, const SSNConfig& config,
                  TurnView view, HistoryCache<T>* cache)
    : tape_(tape), w_(weights), config_(config), view_(view), cache_(cache) {
  if (!view_.dialogue) throw Error("Scorer: no dialogue");
}

template <typename T>
nn::Var<T> Scorer<T>::pair(int index) {
  auto it = pairs_.find(index);
  if (it != pairs_.end()) return it->second;
  nn::Var<T> u;
  if (index <= 0) {
    // Padding pairs share one encoding when their contents agree.
    for (const auto& [other, var] : pairs_) {
      if (other > 0) break;
      if (view_.q(other) == view_.q(index) && view_.a(other) == view_.a(index)) {
        pairs_.emplace(index, var);
        return var;
      }
    }
  }
  const bool cacheable = cache_ && index != view_.t;
  if (cacheable && cache_->pairs.count(index)) {
    u = tape_.constant(cache_->pairs.at(index));
  } else {
    u = encode_pair(w_, config_, view_.q(index), view_.a(index));
    if (cacheable) cache_->pairs.emplace(index, u.value());
  }
  pairs_.emplace(index, u);
  return u;
}

template <typename T>
nn::Var<T> Scorer<T>::triple(const Triple& tr) {
  const bool cacheable = cache_ && !tr.contains(view_.t);
  if (cacheable) {
    auto it = cache_->triples.find(tr.indices);
    if (it != cache_->triples.end()) return tape_.constant(it->second);
  }
  nn::Var<T> out = encode_triple(w_, pair(tr.indices[0]), pair(tr.indices[1]), pair(tr.indices[2]));
  if (cacheable) cache_->triples.emplace(tr.indices, out.value());
  return out;
}

template <typename T>
nn::Var<T> Scorer<T>::logit(const Triple& target, const Triple* ref1, const Triple* ref2) {
  nn::Var<T> tv = triple(target);
  if (!config_.use_references) return mlp_logit<T>(w_, tv, nullptr, nullptr);
  if (!ref1 || !ref2) throw Error("Scorer: model expects two references");
  nn::Var<T> r1 = triple(*ref1), r2 = triple(*ref2);
  return mlp_logit(w_, tv, &r1, &r2);
}

double bce_loss(double p, OrderLabel y) {
  if (!(p > 0.0 && p < 1.0)) throw NumericError("bce_loss: probability outside (0, 1)");
  p = std::clamp(p, kProbClamp, 1.0 - kProbClamp);
  const double yv = label_value(y);
  return -(yv * std::log(p) + (1.0 - yv) * std::log(1.0 - p));
}

namespace {

int target_turn(const Triple& target) {
  return *std::max_element(target.indices.begin(), target.indices.end());
}

}  // namespace

template <typename T>
nn::Var<T> mc_loss(Scorer<T>& scorer, const Triple& target, ReferenceStrategy strategy, int m,
                   Rng& rng) {
  if (m < 1) throw ConfigError("mc_loss: m must be at least 1");
  const T y = static_cast<T>(label_value(target.label));
  if (!scorer.config().use_references) {
    return nn::bce_with_logit(scorer.logit(target, nullptr, nullptr), y);
  }
  const int t = target_turn(target);
  std::vector<nn::Var<T>> terms;
  terms.reserve(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) {
    auto refs = sample_references(t, strategy, rng);
    terms.push_back(nn::bce_with_logit(scorer.logit(target, refs), y));
  }
  return nn::mean<T>(terms);
}

template <typename T>
nn::Var<T> p_star(Scorer<T>& scorer, ReferenceStrategy strategy, const SamplerConfig& config,
                  Rng& rng) {
  validate(config);
  const int t = scorer.view().t;
  const bool refs = scorer.config().use_references;
  std::vector<nn::Var<T>> scores;
  for (int k = 0; k < config.n_target; ++k) {
    const Triple target = sample_target_triple(t, OrderLabel::kMisordered, rng);
    if (!refs) {
      scores.push_back(nn::sigmoid(scorer.logit(target, nullptr, nullptr)));
      continue;
    }
    for (int i = 0; i < config.m; ++i) {
      auto r = sample_references(t, strategy, rng);
      scores.push_back(nn::sigmoid(scorer.logit(target, r)));
    }
  }
  return nn::mean<T>(scores);
}

namespace {

TurnView full_view(const Dialogue& dialogue) {
  if (!dialogue.padded()) throw Error("dialogue is not padded");
  return TurnView{&dialogue, dialogue.turns(), nullptr, nullptr};
}

}  // namespace

double score(const SSNModel& model, const Dialogue& dialogue, const Triple& target,
             const Triple* ref1, const Triple* ref2) {
  nn::Tape<float> tape(false);
  auto w = model.bind(tape);
  Scorer<float> s(tape, w, model.config(), full_view(dialogue));
  return nn::sigmoid(s.logit(target, ref1, ref2)).item();
}

double mc_loss_value(const SSNModel& model, const Dialogue& dialogue, const Triple& target,
                     ReferenceStrategy strategy, int m, Rng& rng) {
  nn::Tape<float> tape(false);
  auto w = model.bind(tape);
  Scorer<float> s(tape, w, model.config(), full_view(dialogue));
  return mc_loss(s, target, strategy, m, rng).item();
}

double estimate_p_star(const SSNModel& model, const TurnView& view, ReferenceStrategy strategy,
                       const SamplerConfig& config, Rng& rng, HistoryCache<float>* cache) {
  if (!view.dialogue || !view.dialogue->padded()) throw Error("estimate_p_star: history not padded");
  if (view.t < 1) throw Error("estimate_p_star: t must be at least 1");
  nn::Tape<float> tape(false);
  auto w = model.bind(tape);
  Scorer<float> s(tape, w, model.config(), view, cache);
  return p_star(s, strategy, config, rng).item();
}

double predict(const SSNModel& model, const Dialogue& dialogue, const Triple& target,
               ReferenceStrategy strategy, int m, Rng& rng) {
  nn::Tape<float> tape(false);
  auto w = model.bind(tape);
  Scorer<float> s(tape, w, model.config(), full_view(dialogue));
  if (!model.config().use_references) return nn::sigmoid(s.logit(target, nullptr, nullptr)).item();
  const int t = target_turn(target);
  double total = 0;
  for (int i = 0; i < m; ++i) {
    auto refs = sample_references(t, strategy, rng);
    total += nn::sigmoid(s.logit(target, refs)).item();
  }
  return total / m;
}

// --- training ---------------------------------------------------------------

std::vector<TargetExample> sample_target_examples(const Corpus& corpus, std::size_t count,
                                                  Rng& rng) {
  if (corpus.empty()) throw Error("sample_target_examples: empty corpus");
  std::vector<TargetExample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const auto label = i < count / 2 ? OrderLabel::kOrdered : OrderLabel::kMisordered;
    const auto d = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(corpus.size()) - 1));
    const int turns = corpus.dialogues[d].turns();
    if (turns < 1) throw Error("sample_target_examples: dialogue without turns");
    out.push_back({d, sample_target_triple(turns, label, rng)});
  }
  return out;
}

double ssn_train_step(SSNModel& model, const Corpus& corpus,
                      const std::vector<TargetExample>& batch, ReferenceStrategy strategy, int m,
                      nn::Optimizer<float>& optimizer, Rng& rng) {
  if (batch.empty()) throw ConfigError("ssn_train_step: empty batch");
  const float inv = 1.0f / static_cast<float>(batch.size());
  double total = 0;
  for (const auto& ex : batch) {
    const Dialogue& d = corpus.dialogues.at(ex.dialogue);
    nn::Tape<float> tape;
    auto w = model.bind(tape);
    Scorer<float> s(tape, w, model.config(), full_view(d));
    auto loss = mc_loss(s, ex.target, strategy, m, rng);
    total += loss.item();
    tape.backward(nn::scale(loss, inv));
  }
  optimizer.step(model.params());
  return total / static_cast<double>(batch.size());
}

PretrainResult pretrain_ssn(SSNModel& model, const Corpus& corpus, const PretrainConfig& config,
                            nn::Optimizer<float>& optimizer, Rng& rng) {
  PretrainResult result;
  for (int step = 0; step < config.steps; ++step) {
    auto batch = sample_target_examples(corpus, static_cast<std::size_t>(config.batch), rng);
    result.loss_curve.push_back(
        ssn_train_step(model, corpus, batch, config.strategy, config.m, optimizer, rng));
  }
  return result;
}

PretrainResult train_ssn_on_examples(SSNModel& model, const Corpus& corpus,
                                     const std::vector<TargetExample>& pool,
                                     const PretrainConfig& config,
                                     nn::Optimizer<float>& optimizer, Rng& rng) {
  if (pool.empty()) throw ConfigError("train_ssn_on_examples: empty pool");
  PretrainResult result;
  std::vector<TargetExample> batch;
  for (int step = 0; step < config.steps; ++step) {
    batch.clear();
    for (int i = 0; i < config.batch; ++i) {
      batch.push_back(pool[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(pool.size()) - 1))]);
    }
    result.loss_curve.push_back(
        ssn_train_step(model, corpus, batch, config.strategy, config.m, optimizer, rng));
  }
  return result;
}

double ssn_accuracy(const SSNModel& model, const Corpus& corpus,
                    const std::vector<TargetExample>& examples, ReferenceStrategy strategy, int m,
                    Rng& rng) {
  if (examples.empty()) return 0.0;
  std::size_t correct = 0;
  for (const auto& ex : examples) {
    const double p = predict(model, corpus.dialogues.at(ex.dialogue), ex.target, strategy, m, rng);
    const auto guess = p >= 0.5 ? OrderLabel::kMisordered : OrderLabel::kOrdered;
    correct += guess == ex.target.label ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(examples.size());
}

// --- checkpoints ------------------------------------------------------------

json ssn_checkpoint_config(const SSNConfig& config) {
  return json{{"model", "ssn"}, {"ssn", config.to_json()}};
}

void save_ssn(const std::filesystem::path& path, const SSNModel& model) {
  nn::save_checkpoint(path, model.params(), ssn_checkpoint_config(model.config()));
}

SSNModel load_ssn(const std::filesystem::path& path, std::optional<EncodingMode> expected_mode) {
  auto ck = nn::load_checkpoint(path);
  if (ck.config.value("model", std::string()) != "ssn" || !ck.config.contains("ssn")) {
    throw ConfigError(path.string() + ": not an SSN checkpoint");
  }
  const auto config = SSNConfig::from_json(ck.config.at("ssn"));
  if (expected_mode && *expected_mode != config.mode) {
    throw ConfigError(path.string() + ": checkpoint mode '" + to_string(config.mode) +
                      "' does not match requested mode '" + to_string(*expected_mode) + "'");
  }
  SSNModel model(config);
  nn::assign_parameters(model.params(), ck.params);
  return model;
}

#define ODL_INSTANTIATE_SSN(T)                                                                  \
  template class SSNNet<T>;                                                                     \
  template class Scorer<T>;                                                                     \
  template nn::Var<T> encode_pair(const SSNWeights<T>&, const SSNConfig&, const Utterance&,      \
                                  const Utterance&);                                            \
  template nn::Var<T> encode_triple(const SSNWeights<T>&, const nn::Var<T>&, const nn::Var<T>&, \
                                    const nn::Var<T>&);                                         \
  template nn::Var<T> mlp_logit(const SSNWeights<T>&, const nn::Var<T>&, const nn::Var<T>*,     \
                                const nn::Var<T>*);                                             \
  template nn::Var<T> mc_loss(Scorer<T>&, const Triple&, ReferenceStrategy, int, Rng&);         \
  template nn::Var<T> p_star(Scorer<T>&, ReferenceStrategy, const SamplerConfig&, Rng&);

ODL_INSTANTIATE_SSN(float)
ODL_INSTANTIATE_SSN(double)

}  // namespace odl
