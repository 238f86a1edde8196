#include "odl/adversarial.hpp"

#include <cmath>
#include <memory>

#include "odl/error.hpp"

namespace odl {

using nlohmann::json;

void AdvConfig::validate() const {
  if (g_steps < 1 || ssn_steps < 1 || batch < 1) {
    throw ConfigError("adversarial step counts and batch must be at least 1");
  }
  if (rounds < 0) throw ConfigError("rounds must be non-negative");
  if (!(teacher_forcing >= 0.0 && teacher_forcing <= 1.0)) {
    throw ConfigError("teacher_forcing must lie in [0, 1]");
  }
  odl::validate(sampler);
}

json AdvConfig::to_json() const {
  return json{{"g_steps", g_steps},
              {"ssn_steps", ssn_steps},
              {"rounds", rounds},
              {"batch", batch},
              {"teacher_forcing", teacher_forcing},
              {"strategy", to_string(strategy)},
              {"m", sampler.m},
              {"n_target", sampler.n_target}};
}

AdvConfig AdvConfig::from_json(const json& j) {
  AdvConfig c;
  try {
    c.g_steps = j.value("g_steps", c.g_steps);
    c.ssn_steps = j.value("ssn_steps", c.ssn_steps);
    c.rounds = j.value("rounds", c.rounds);
    c.batch = j.value("batch", c.batch);
    c.teacher_forcing = j.value("teacher_forcing", c.teacher_forcing);
    if (j.contains("strategy")) c.strategy = parse_strategy(j.at("strategy").get<std::string>());
    c.sampler.m = j.value("m", c.sampler.m);
    c.sampler.n_target = j.value("n_target", c.sampler.n_target);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad adversarial config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string to_string(FilterRule rule) {
  return rule == FilterRule::kSampledBand ? "sampled-band" : "fixed-band";
}

FilterRule parse_filter_rule(std::string_view name) {
  if (name == "sampled-band") return FilterRule::kSampledBand;
  if (name == "fixed-band") return FilterRule::kFixedBand;
  throw ConfigError("unknown filter rule '" + std::string(name) + "'");
}

void FilterConfig::validate() const {
  if (!(threshold_low >= 0.0 && threshold_low <= threshold_high && threshold_high <= 1.0)) {
    throw ConfigError("filter thresholds need 0 <= low <= high <= 1");
  }
}

json FilterConfig::to_json() const {
  return json{{"threshold_low", threshold_low},
              {"threshold_high", threshold_high},
              {"rule", to_string(rule)}};
}

FilterConfig FilterConfig::from_json(const json& j) {
  FilterConfig c;
  try {
    c.threshold_low = j.value("threshold_low", c.threshold_low);
    c.threshold_high = j.value("threshold_high", c.threshold_high);
    if (j.contains("rule")) c.rule = parse_filter_rule(j.at("rule").get<std::string>());
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad filter config: ") + e.what());
  }
  c.validate();
  return c;
}

std::vector<DialogueContext> last_turn_contexts(const Corpus& padded) {
  std::vector<DialogueContext> out;
  out.reserve(padded.size());
  for (const auto& d : padded.dialogues) {
    if (!d.padded()) throw Error("contexts need a padded corpus");
    out.push_back({&d, d.turns()});
  }
  return out;
}

std::vector<DialogueContext> sample_contexts(const Corpus& padded, std::size_t count, Rng& rng) {
  if (padded.empty()) throw Error("sample_contexts: empty corpus");
  std::vector<DialogueContext> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const auto& d = padded.dialogues[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(padded.size()) - 1))];
    if (!d.padded()) throw Error("contexts need a padded corpus");
    out.push_back({&d, d.turns()});
  }
  return out;
}

TurnView item_view(const SSNConfig& config, const ExperienceItem& item) {
  TurnView view{item.context.dialogue, item.context.t, nullptr, nullptr};
  if (config.mode == EncodingMode::kUtteranceOnly) {
    view.q_t = &item.utterance;
  } else {
    view.a_t = &item.utterance;
  }
  return view;
}

ExperienceBatch real_batch(const SSNConfig& config, std::span<const DialogueContext> contexts) {
  ExperienceBatch batch;
  for (const auto& c : contexts) {
    const auto& pair = c.dialogue->pair(c.t);
    const auto& u = config.mode == EncodingMode::kUtteranceOnly ? pair.q : pair.a;
    batch.items.push_back({c, u, Provenance::kReal, std::nullopt});
  }
  return batch;
}

ExperienceBatch generated_batch(const Generator& generator,
                                std::span<const DialogueContext> contexts, Rng& rng) {
  ExperienceBatch batch;
  for (const auto& c : contexts) {
    auto s = decode(generator, history_at(*c.dialogue, c.t), DecodeMode::kSample, &rng);
    batch.items.push_back({c, s.response(), Provenance::kSimulated, std::nullopt});
  }
  return batch;
}

double adversarial_objective(std::span<const double> p_real, std::span<const double> p_generated) {
  if (p_real.empty() || p_generated.empty()) throw ConfigError("adversarial objective: empty batch");
  auto clamp = [](double p) { return std::min(std::max(p, kProbClamp), 1.0 - kProbClamp); };
  double real = 0, gen = 0;
  for (double p : p_real) real += std::log(clamp(p));
  for (double p : p_generated) gen += std::log1p(-clamp(p));
  return real / static_cast<double>(p_real.size()) + gen / static_cast<double>(p_generated.size());
}

namespace {

double mean(const std::vector<double>& xs) {
  double s = 0;
  for (double x : xs) s += x;
  return xs.empty() ? 0.0 : s / static_cast<double>(xs.size());
}

// Accumulates the gradient of -(1/n) log p* (real) or -(1/n) log(1 - p*)
// (generated) for each item; returns the unclamped p* values.
std::vector<double> accumulate_ssn_grads(SSNModel& ssn, const ExperienceBatch& batch, bool real,
                                         ReferenceStrategy strategy, const SamplerConfig& sampler,
                                         Rng& rng) {
  const float lo = static_cast<float>(kProbClamp), hi = 1.0f - lo;
  const float weight = -1.0f / static_cast<float>(batch.items.size());
  std::vector<double> ps;
  for (const auto& item : batch.items) {
    if (!item.context.dialogue) throw ConfigError("experience item without a dialogue");
    nn::Tape<float> tape;
    auto w = ssn.bind(tape);
    Scorer<float> s(tape, w, ssn.config(), item_view(ssn.config(), item));
    auto p = p_star(s, strategy, sampler, rng);
    ps.push_back(p.item());
    auto c = nn::clamp(p, lo, hi);
    tape.backward(nn::scale(real ? nn::log(c) : nn::log1m(c), weight));
  }
  return ps;
}

SsnUpdate ssn_update(SSNModel& ssn, const ExperienceBatch& real, const ExperienceBatch& generated,
                     ReferenceStrategy strategy, const SamplerConfig& sampler,
                     nn::Optimizer<float>& optimizer, Rng& rng) {
  if (real.items.empty() || generated.items.empty()) {
    throw ConfigError("ssn update: batches must be non-empty");
  }
  ssn.params().zero_grad();
  auto pr = accumulate_ssn_grads(ssn, real, true, strategy, sampler, rng);
  auto pg = accumulate_ssn_grads(ssn, generated, false, strategy, sampler, rng);
  optimizer.step(ssn.params());
  return SsnUpdate{adversarial_objective(pr, pg), mean(pr), mean(pg)};
}

}  // namespace

SsnUpdate ssn_update_open(SSNModel& ssn, const ExperienceBatch& real,
                          const ExperienceBatch& generated, ReferenceStrategy strategy,
                          const SamplerConfig& sampler, nn::Optimizer<float>& optimizer, Rng& rng) {
  return ssn_update(ssn, real, generated, strategy, sampler, optimizer, rng);
}

SsnUpdate ssn_update_task(SSNModel& ssn, const ExperienceBatch& real, const ExperienceBatch& sim,
                          ReferenceStrategy strategy, const SamplerConfig& sampler,
                          nn::Optimizer<float>& optimizer, Rng& rng) {
  if (ssn.config().mode != EncodingMode::kUtteranceOnly) {
    throw ConfigError("ssn_update_task needs an utterance-only SSN");
  }
  if (real.items.size() != sim.items.size()) {
    throw ConfigError("ssn_update_task: real and simulated batches differ in size");
  }
  return ssn_update(ssn, real, sim, strategy, sampler, optimizer, rng);
}

RewardFn p_star_reward(const SSNModel& ssn, const DialogueContext& context,
                       ReferenceStrategy strategy, const SamplerConfig& sampler, Rng& rng) {
  auto cache = std::make_shared<HistoryCache<float>>();
  return [&ssn, context, strategy, sampler, &rng, cache](const Utterance& response) {
    TurnView view{context.dialogue, context.t, nullptr, &response};
    return estimate_p_star(ssn, view, strategy, sampler, rng, cache.get());
  };
}

double g_update(Generator& generator, const SSNModel& ssn,
                std::span<const DialogueContext> contexts, const AdvConfig& config,
                RewardBaseline& baseline, nn::Optimizer<float>& optimizer, Rng& rng) {
  if (contexts.empty()) throw ConfigError("g_update: no contexts");
  std::vector<std::pair<GenHistory, GenerationSample>> batch;
  for (const auto& c : contexts) {
    auto h = history_at(*c.dialogue, c.t);
    auto s = decode(generator, h, DecodeMode::kSample, &rng);
    auto reward = p_star_reward(ssn, c, config.strategy, config.sampler, rng);
    s.rewards = mc_step_rewards(generator, h, s, reward, generator.config().rollouts, rng);
    batch.emplace_back(std::move(h), std::move(s));
  }
  const double mean_reward = reinforce_step(generator, batch, baseline, optimizer);
  if (config.teacher_forcing > 0.0 && rng.bernoulli(config.teacher_forcing)) {
    std::vector<std::pair<GenHistory, Utterance>> gold;
    for (std::size_t i = 0; i < contexts.size(); ++i) {
      const auto& a = contexts[i].dialogue->pair(contexts[i].t).a;
      if (!a.tokens.empty()) gold.emplace_back(batch[i].first, a);
    }
    if (!gold.empty()) mle_batch_step(generator, gold, optimizer);
  }
  return mean_reward;
}

json RoundLog::to_json() const {
  return json{{"round", round},
              {"ssn_obj", ssn_obj},
              {"g_reward", g_reward},
              {"p_star_real", p_star_real},
              {"p_star_gen", p_star_gen}};
}

std::vector<RoundLog> train_open_domain(Generator& generator, SSNModel& ssn, const Corpus& padded,
                                        const AdvConfig& config, AdversarialState& state, Rng& rng,
                                        std::ostream* log) {
  config.validate();
  std::vector<RoundLog> out;
  if (config.rounds == 0) return out;
  Rng sampler_rng = rng.split("sampler");
  Rng rollout_rng = rng.split("rollouts");
  const auto b = static_cast<std::size_t>(config.batch);
  for (int round = 1; round <= config.rounds; ++round) {
    RoundLog entry;
    entry.round = round;
    for (int i = 0; i < config.ssn_steps; ++i) {
      auto contexts = sample_contexts(padded, b, rng);
      auto real = real_batch(ssn.config(), contexts);
      auto gen = generated_batch(generator, contexts, rollout_rng);
      auto upd = ssn_update_open(ssn, real, gen, config.strategy, config.sampler,
                                 state.ssn_optimizer, sampler_rng);
      entry.ssn_obj += upd.objective / config.ssn_steps;
      entry.p_star_real += upd.p_star_real / config.ssn_steps;
      entry.p_star_gen += upd.p_star_gen / config.ssn_steps;
    }
    for (int i = 0; i < config.g_steps; ++i) {
      auto contexts = sample_contexts(padded, b, rng);
      entry.g_reward += g_update(generator, ssn, contexts, config, state.baseline,
                                 state.g_optimizer, rollout_rng) /
                        config.g_steps;
    }
    for (double v : {entry.ssn_obj, entry.g_reward, entry.p_star_real, entry.p_star_gen}) {
      if (!std::isfinite(v)) {
        throw NumericError("adversarial round " + std::to_string(round) +
                           " produced a non-finite metric: " + entry.to_json().dump());
      }
    }
    if (log) *log << entry.to_json().dump() << '\n' << std::flush;
    out.push_back(entry);
  }
  return out;
}

double draw_threshold(const FilterConfig& config, Rng& rng) {
  config.validate();
  if (config.rule == FilterRule::kFixedBand) return config.threshold_high;
  if (config.threshold_low == config.threshold_high) return config.threshold_low;
  return rng.uniform(config.threshold_low, config.threshold_high);
}

bool accepts(double p_star, double tau) {
  return p_star >= tau;
}

ExperienceBatch filter_experiences(const SSNModel& ssn, ExperienceBatch& batch,
                                   const FilterConfig& config, ReferenceStrategy strategy,
                                   const SamplerConfig& sampler, Rng& rng) {
  for (const auto& item : batch.items) {
    if (item.provenance != Provenance::kSimulated) {
      throw ConfigError("filter_experiences: batch must hold simulated items only");
    }
  }
  const double tau = draw_threshold(config, rng);
  ExperienceBatch accepted;
  for (auto& item : batch.items) {
    item.score = estimate_p_star(ssn, item_view(ssn.config(), item), strategy, sampler, rng);
    if (accepts(*item.score, tau)) accepted.items.push_back(item);
  }
  return accepted;
}

}  // namespace odl
