#pragma once

#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <vector>

#include "json.hpp"

#include "odl/generator.hpp"
#include "odl/ssn.hpp"

namespace odl {

struct AdvConfig {
  int g_steps = 1;
  int ssn_steps = 1;
  int rounds = 20;
  int batch = 16;
  // Probability of a teacher-forced MLE step after each REINFORCE step.
  double teacher_forcing = 0.5;
  ReferenceStrategy strategy = ReferenceStrategy::kOneEach;
  SamplerConfig sampler{.m = 2, .n_target = 2};

  void validate() const;
  nlohmann::json to_json() const;
  static AdvConfig from_json(const nlohmann::json& j);
};

enum class FilterRule {
  kSampledBand,  // tau ~ U[low, high] per batch, accept iff p* >= tau
  kFixedBand,    // accept iff p* >= high; the band is a dead zone
};

std::string to_string(FilterRule rule);
FilterRule parse_filter_rule(std::string_view name);

struct FilterConfig {
  double threshold_low = 0.45;
  double threshold_high = 0.55;
  FilterRule rule = FilterRule::kSampledBand;

  void validate() const;
  nlohmann::json to_json() const;
  static FilterConfig from_json(const nlohmann::json& j);
};

// A turn of a padded dialogue.
struct DialogueContext {
  const Dialogue* dialogue = nullptr;
  int t = 0;
};

// (dialogue, last turn) for every dialogue of a padded corpus.
std::vector<DialogueContext> last_turn_contexts(const Corpus& padded);
std::vector<DialogueContext> sample_contexts(const Corpus& padded, std::size_t count, Rng& rng);

enum class Provenance { kReal, kSimulated };

// `utterance` stands in for A_t (pair mode) or Q_t (utterance-only mode).
struct ExperienceItem {
  DialogueContext context;
  Utterance utterance;
  Provenance provenance = Provenance::kReal;
  std::optional<double> score;
};

struct ExperienceBatch {
  std::vector<ExperienceItem> items;
};

// The turn view with the item's utterance placed where `config` reads it.
TurnView item_view(const SSNConfig& config, const ExperienceItem& item);

// Real A_t (or Q_t in utterance-only mode) of each context.
ExperienceBatch real_batch(const SSNConfig& config, std::span<const DialogueContext> contexts);
// One sampled response of `generator` per context.
ExperienceBatch generated_batch(const Generator& generator,
                                std::span<const DialogueContext> contexts, Rng& rng);

// mean log p*(real) + mean log(1 - p*(generated)), p* clamped to
// [1e-7, 1 - 1e-7].
double adversarial_objective(std::span<const double> p_real, std::span<const double> p_generated);

struct SsnUpdate {
  double objective = 0.0;
  double p_star_real = 0.0;  // batch means before the step
  double p_star_gen = 0.0;
};

// One ascent step on the objective above. p* is drawn afresh for every item;
// real items are scored first, in order, then generated ones.
SsnUpdate ssn_update_open(SSNModel& ssn, const ExperienceBatch& real,
                          const ExperienceBatch& generated, ReferenceStrategy strategy,
                          const SamplerConfig& sampler, nn::Optimizer<float>& optimizer, Rng& rng);

// Batch-mean objective over b real and b simulated user utterances; the SSN
// must be in utterance-only mode.
SsnUpdate ssn_update_task(SSNModel& ssn, const ExperienceBatch& real, const ExperienceBatch& sim,
                          ReferenceStrategy strategy, const SamplerConfig& sampler,
                          nn::Optimizer<float>& optimizer, Rng& rng);

// Reward R = p* of the response placed at A_t.
RewardFn p_star_reward(const SSNModel& ssn, const DialogueContext& context,
                       ReferenceStrategy strategy, const SamplerConfig& sampler, Rng& rng);

// Samples a response per context, scores every step with Monte Carlo
// rollouts against the SSN and takes one REINFORCE step; with probability
// config.teacher_forcing an MLE step on the real responses follows.
// Returns the mean step reward.
double g_update(Generator& generator, const SSNModel& ssn,
                std::span<const DialogueContext> contexts, const AdvConfig& config,
                RewardBaseline& baseline, nn::Optimizer<float>& optimizer, Rng& rng);

struct RoundLog {
  int round = 0;
  double ssn_obj = 0.0;
  double g_reward = 0.0;
  double p_star_real = 0.0;
  double p_star_gen = 0.0;

  nlohmann::json to_json() const;
};

struct AdversarialState {
  nn::Optimizer<float> g_optimizer;
  nn::Optimizer<float> ssn_optimizer;
  RewardBaseline baseline;
};

// Alternates ssn_steps SSN updates with g_steps generator updates per round,
// each on `batch` last-turn contexts drawn from the padded corpus. Each log
// line is also written to `log` when given. Non-finite metrics throw
// NumericError.
std::vector<RoundLog> train_open_domain(Generator& generator, SSNModel& ssn, const Corpus& padded,
                                        const AdvConfig& config, AdversarialState& state, Rng& rng,
                                        std::ostream* log = nullptr);

double draw_threshold(const FilterConfig& config, Rng& rng);
bool accepts(double p_star, double tau);

// Scores every simulated item (recorded on the item) and returns the accepted
// ones under one threshold for the whole batch.
ExperienceBatch filter_experiences(const SSNModel& ssn, ExperienceBatch& batch,
                                   const FilterConfig& config, ReferenceStrategy strategy,
                                   const SamplerConfig& sampler, Rng& rng);

}  // namespace odl
