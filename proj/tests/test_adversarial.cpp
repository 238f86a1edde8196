#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <sstream>

#include "odl/adversarial.hpp"
#include "odl/error.hpp"
#include "odl/synthetic.hpp"

using namespace odl;

namespace {

PreparedCorpus small_corpus(std::size_t dialogues, std::uint64_t seed = 3) {
  SyntheticSpec spec;
  spec.dialogues = dialogues;
  spec.seed = seed;
  return prepare_corpus(gen_synthetic_corpus(spec), 1);
}

SSNConfig tiny(std::size_t vocab, EncodingMode mode = EncodingMode::kPair) {
  SSNConfig c;
  c.vocab_size = vocab;
  c.embed_dim = 8;
  c.pair_hidden = 16;
  c.reason_hidden = 16;
  c.mlp_hidden = 16;
  c.mode = mode;
  return c;
}

GenConfig tiny_gen(std::size_t vocab) {
  GenConfig c;
  c.vocab_size = vocab;
  c.embed_dim = 8;
  c.encoder_hidden = 16;
  c.decoder_hidden = 16;
  c.max_decode_len = 4;
  c.rollouts = 2;
  return c;
}

// Zero weights and output bias logit(p): every score equals p.
SSNModel constant_ssn(std::size_t vocab, double p, EncodingMode mode = EncodingMode::kPair) {
  SSNModel m(tiny(vocab, mode));
  m.params().get("mlp.b2").value.data[0] = static_cast<float>(std::log(p / (1.0 - p)));
  return m;
}

const SamplerConfig kSampler{.m = 2, .n_target = 2};

}  // namespace

TEST_CASE("objective arithmetic") {
  const double one[] = {1.0}, zero[] = {0.0}, half[] = {0.5};
  CHECK(adversarial_objective(one, zero) == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(adversarial_objective(half, half) == doctest::Approx(2 * std::log(0.5)));
  CHECK(adversarial_objective(half, half) == doctest::Approx(-1.386).epsilon(1e-3));
  const double ones[] = {1.0, 1.0}, zeros[] = {0.0, 0.0};
  CHECK(std::abs(adversarial_objective(ones, zeros)) < 1e-6);

  const double real[] = {0.9, 0.6}, sim[] = {0.2, 0.3};
  const double hand = 0.5 * ((std::log(0.9) + std::log(1 - 0.2)) + (std::log(0.6) + std::log(1 - 0.3)));
  CHECK(std::abs(adversarial_objective(real, sim) - hand) < 1e-12);

  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const auto b1 = static_cast<std::size_t>(rng.uniform_int(1, 5));
    const auto b2 = static_cast<std::size_t>(rng.uniform_int(1, 5));
    std::vector<double> r1(b1), s1(b1), r2(b2), s2(b2);
    for (auto* v : {&r1, &s1, &r2, &s2}) {
      for (auto& x : *v) x = rng.uniform();
    }
    std::vector<double> r = r1, s = s1;
    r.insert(r.end(), r2.begin(), r2.end());
    s.insert(s.end(), s2.begin(), s2.end());
    const double whole = adversarial_objective(r, s);
    const double parts = (static_cast<double>(b1) * adversarial_objective(r1, s1) +
                          static_cast<double>(b2) * adversarial_objective(r2, s2)) /
                         static_cast<double>(b1 + b2);
    CHECK(std::abs(whole - parts) < 1e-12);
    CHECK(whole <= 0.0);
  }
  CHECK_THROWS_AS(adversarial_objective({}, one), ConfigError);
}

TEST_CASE("ssn_update_task matches the hand-computed batch objective") {
  auto prep = small_corpus(20);
  const auto V = prep.vocab.size();
  auto contexts = last_turn_contexts(prep.corpus);
  const std::vector<DialogueContext> two(contexts.begin(), contexts.begin() + 2);

  SSNModel ssn(tiny(V, EncodingMode::kUtteranceOnly));
  Rng init(2);
  ssn.init(init, 0.3);
  auto real = real_batch(ssn.config(), two);
  ExperienceBatch sim;
  for (const auto& c : two) sim.items.push_back({c, Utterance{{5, 6}, std::nullopt}, Provenance::kSimulated, {}});

  const SSNModel frozen = ssn;
  Rng oracle_rng(11);
  std::vector<double> pr, ps;
  for (const auto& item : real.items) {
    pr.push_back(estimate_p_star(frozen, item_view(frozen.config(), item), ReferenceStrategy::kOneEach, kSampler, oracle_rng));
  }
  for (const auto& item : sim.items) {
    ps.push_back(estimate_p_star(frozen, item_view(frozen.config(), item), ReferenceStrategy::kOneEach, kSampler, oracle_rng));
  }
  const double hand = 0.5 * (std::log(pr[0]) + std::log(1 - ps[0]) + std::log(pr[1]) + std::log(1 - ps[1]));

  nn::Optimizer<float> opt;
  Rng rng(11);
  auto upd = ssn_update_task(ssn, real, sim, ReferenceStrategy::kOneEach, kSampler, opt, rng);
  CHECK(std::abs(upd.objective - hand) < 1e-6);
  CHECK_FALSE(ssn.params().same_values(frozen.params()));

  auto constant = constant_ssn(V, 0.5, EncodingMode::kUtteranceOnly);
  const std::vector<DialogueContext> one(contexts.begin(), contexts.begin() + 1);
  auto r1 = real_batch(constant.config(), one);
  ExperienceBatch s1{{sim.items[0]}};
  CHECK(ssn_update_task(constant, r1, s1, ReferenceStrategy::kOneEach, kSampler, opt, rng).objective ==
        doctest::Approx(-1.386).epsilon(1e-3));

  CHECK_THROWS_AS(ssn_update_task(ssn, real, s1, ReferenceStrategy::kOneEach, kSampler, opt, rng), ConfigError);
  SSNModel pair_mode(tiny(V));
  CHECK_THROWS_AS(ssn_update_task(pair_mode, real, sim, ReferenceStrategy::kOneEach, kSampler, opt, rng), ConfigError);
}

TEST_CASE("utterances replace A_t in pair mode and Q_t in utterance-only mode") {
  auto prep = small_corpus(5);
  auto c = last_turn_contexts(prep.corpus).front();
  ExperienceItem item{c, Utterance{{7}, std::nullopt}, Provenance::kSimulated, {}};
  auto pv = item_view(tiny(prep.vocab.size()), item);
  CHECK(pv.a(c.t).tokens == std::vector<TokenId>{7});
  CHECK(pv.q(c.t) == c.dialogue->pair(c.t).q);
  auto uv = item_view(tiny(prep.vocab.size(), EncodingMode::kUtteranceOnly), item);
  CHECK(uv.q(c.t).tokens == std::vector<TokenId>{7});
  auto rb = real_batch(tiny(prep.vocab.size()), std::span(&c, 1));
  CHECK(rb.items[0].utterance == c.dialogue->pair(c.t).a);
}

TEST_CASE("SSN updates separate real from untrained-generator responses") {
  auto prep = small_corpus(300);
  const auto V = prep.vocab.size();
  SSNModel ssn(tiny(V));
  Rng rng(4);
  ssn.init(rng);
  Generator g(tiny_gen(V));
  g.init(rng);
  const Generator g_before = g;
  nn::Optimizer<float> opt(nn::OptimizerConfig{.learning_rate = 3e-3});
  for (int step = 0; step < 200; ++step) {
    auto contexts = sample_contexts(prep.corpus, 8, rng);
    auto real = real_batch(ssn.config(), contexts);
    auto gen = generated_batch(g, contexts, rng);
    auto upd = ssn_update_open(ssn, real, gen, ReferenceStrategy::kOneEach, kSampler, opt, rng);
    REQUIRE(upd.objective <= 0.0);
  }
  CHECK(g.params().same_values(g_before.params()));
  auto contexts = sample_contexts(prep.corpus, 100, rng);
  auto real = real_batch(ssn.config(), contexts);
  auto gen = generated_batch(g, contexts, rng);
  double pr = 0, pg = 0;
  for (std::size_t i = 0; i < contexts.size(); ++i) {
    pr += estimate_p_star(ssn, item_view(ssn.config(), real.items[i]), ReferenceStrategy::kOneEach, kSampler, rng);
    pg += estimate_p_star(ssn, item_view(ssn.config(), gen.items[i]), ReferenceStrategy::kOneEach, kSampler, rng);
  }
  CHECK((pr - pg) / static_cast<double>(contexts.size()) > 0.2);
}

TEST_CASE("g_update against a constant SSN") {
  auto prep = small_corpus(30);
  const auto V = prep.vocab.size();
  const auto ssn = constant_ssn(V, 0.5);
  const SSNModel ssn_before = ssn;
  Generator g(tiny_gen(V));
  Rng rng(5);
  g.init(rng, 0.3);
  const Generator before = g;
  AdvConfig cfg;
  cfg.teacher_forcing = 0.0;
  cfg.sampler = kSampler;
  RewardBaseline baseline;
  nn::Optimizer<float> opt;
  auto contexts = sample_contexts(prep.corpus, 4, rng);
  const double r = g_update(g, ssn, contexts, cfg, baseline, opt, rng);
  CHECK(r == doctest::Approx(0.5).epsilon(1e-6));
  CHECK(baseline.value == doctest::Approx(0.5).epsilon(1e-6));
  // Every advantage is zero, so the update is zero.
  CHECK(g.params().same_values(before.params()));
  CHECK(ssn.params().same_values(ssn_before.params()));

  auto varied = constant_ssn(V, 0.8);
  for (int i = 0; i < 3; ++i) {
    const double reward = g_update(g, varied, contexts, cfg, baseline, opt, rng);
    CHECK(reward >= 0.0);
    CHECK(reward <= 1.0);
  }
  cfg.teacher_forcing = 1.0;
  const Generator before_tf = g;
  g_update(g, varied, contexts, cfg, baseline, opt, rng);
  CHECK_FALSE(g.params().same_values(before_tf.params()));
}

TEST_CASE("train_open_domain bookkeeping") {
  auto prep = small_corpus(30);
  const auto V = prep.vocab.size();
  SSNModel ssn(tiny(V));
  Generator g(tiny_gen(V));
  Rng rng(6);
  ssn.init(rng);
  g.init(rng);
  const SSNModel ssn0 = ssn;
  const Generator g0 = g;
  AdvConfig cfg;
  cfg.rounds = 0;
  cfg.batch = 2;
  cfg.sampler = kSampler;
  AdversarialState state;
  CHECK(train_open_domain(g, ssn, prep.corpus, cfg, state, rng).empty());
  CHECK(ssn.params().same_values(ssn0.params()));
  CHECK(g.params().same_values(g0.params()));

  cfg.rounds = 3;
  std::ostringstream log;
  auto rounds = train_open_domain(g, ssn, prep.corpus, cfg, state, rng, &log);
  REQUIRE(rounds.size() == 3);
  std::istringstream lines(log.str());
  std::string line;
  int n = 0;
  while (std::getline(lines, line)) {
    auto j = nlohmann::json::parse(line);
    CHECK(j.at("round").get<int>() == ++n);
    for (const char* key : {"ssn_obj", "g_reward", "p_star_real", "p_star_gen"}) CHECK(j.contains(key));
    CHECK(j.at("ssn_obj").get<double>() <= 0.0);
  }
  CHECK(n == 3);
  CHECK_FALSE(ssn.params().same_values(ssn0.params()));
  CHECK_FALSE(g.params().same_values(g0.params()));

  cfg.batch = 0;
  CHECK_THROWS_AS(train_open_domain(g, ssn, prep.corpus, cfg, state, rng), ConfigError);
}

TEST_CASE("alternation leaves the other model bit-unchanged") {
  auto prep = small_corpus(30);
  const auto V = prep.vocab.size();
  SSNModel ssn(tiny(V));
  Generator g(tiny_gen(V));
  Rng rng(7);
  ssn.init(rng);
  g.init(rng);
  nn::Optimizer<float> so, go;
  auto contexts = sample_contexts(prep.corpus, 4, rng);

  const Generator g0 = g;
  ssn_update_open(ssn, real_batch(ssn.config(), contexts), generated_batch(g, contexts, rng),
                  ReferenceStrategy::kOneEach, kSampler, so, rng);
  CHECK(g.params().same_values(g0.params()));

  const SSNModel s0 = ssn;
  AdvConfig cfg;
  cfg.sampler = kSampler;
  RewardBaseline b;
  g_update(g, ssn, contexts, cfg, b, go, rng);
  CHECK(ssn.params().same_values(s0.params()));
}

TEST_CASE("experience filter") {
  auto prep = small_corpus(10);
  const auto V = prep.vocab.size();
  auto contexts = last_turn_contexts(prep.corpus);
  auto batch_of = [&](std::size_t n) {
    ExperienceBatch b;
    for (std::size_t i = 0; i < n; ++i) {
      b.items.push_back({contexts[i % contexts.size()], Utterance{{5, 6}, std::nullopt}, Provenance::kSimulated, {}});
    }
    return b;
  };
  FilterConfig cfg;
  Rng rng(8);
  for (double p : {0.7, 0.3}) {
    auto ssn = constant_ssn(V, p);
    for (int i = 0; i < 50; ++i) {
      auto b = batch_of(3);
      auto kept = filter_experiences(ssn, b, cfg, ReferenceStrategy::kOneEach, kSampler, rng);
      CHECK(kept.items.size() == (p > 0.5 ? 3u : 0u));
      for (const auto& item : b.items) {
        REQUIRE(item.score.has_value());
        CHECK(*item.score == doctest::Approx(p).epsilon(1e-5));
      }
    }
  }

  auto half = constant_ssn(V, 0.5);
  int accepted = 0;
  const int batches = 2000;
  for (int i = 0; i < batches; ++i) {
    auto b = batch_of(1);
    accepted += static_cast<int>(filter_experiences(half, b, cfg, ReferenceStrategy::kOneEach, kSampler, rng).items.size());
  }
  CHECK(static_cast<double>(accepted) / batches == doctest::Approx(0.5).epsilon(0.06));

  for (int i = 0; i < 1000; ++i) {
    const double tau = draw_threshold(cfg, rng);
    CHECK(tau >= 0.45);
    CHECK(tau <= 0.55);
    double p1 = rng.uniform(), p2 = rng.uniform();
    if (p1 < p2) std::swap(p1, p2);
    if (accepts(p2, tau)) CHECK(accepts(p1, tau));
  }

  FilterConfig fixed{0.45, 0.55, FilterRule::kFixedBand};
  CHECK(draw_threshold(fixed, rng) == 0.55);
  auto b = batch_of(2);
  CHECK(filter_experiences(half, b, fixed, ReferenceStrategy::kOneEach, kSampler, rng).items.empty());

  auto real = batch_of(1);
  real.items[0].provenance = Provenance::kReal;
  CHECK_THROWS_AS(filter_experiences(half, real, cfg, ReferenceStrategy::kOneEach, kSampler, rng), ConfigError);
}

TEST_CASE("config validation and JSON round trip") {
  AdvConfig a;
  a.rounds = 7;
  a.teacher_forcing = 0.25;
  a.strategy = ReferenceStrategy::kBothOrdered;
  auto back = AdvConfig::from_json(a.to_json());
  CHECK(back.rounds == 7);
  CHECK(back.teacher_forcing == 0.25);
  CHECK(back.strategy == ReferenceStrategy::kBothOrdered);
  a.teacher_forcing = 1.5;
  CHECK_THROWS_AS(a.validate(), ConfigError);
  a.teacher_forcing = 0.5;
  a.g_steps = 0;
  CHECK_THROWS_AS(a.validate(), ConfigError);

  FilterConfig f{0.3, 0.6, FilterRule::kFixedBand};
  auto fb = FilterConfig::from_json(f.to_json());
  CHECK(fb.threshold_low == 0.3);
  CHECK(fb.rule == FilterRule::kFixedBand);
  CHECK_THROWS_AS((FilterConfig{0.6, 0.4}.validate()), ConfigError);
  CHECK_THROWS_AS((FilterConfig{-0.1, 0.4}.validate()), ConfigError);
  CHECK_THROWS_AS(parse_filter_rule("nope"), ConfigError);
}

TEST_CASE("generator reward rises against a frozen pretrained SSN") {
  auto prep = small_corpus(400);
  const auto V = prep.vocab.size();
  SSNModel ssn(tiny(V));
  Rng rng(9);
  ssn.init(rng);
  nn::Optimizer<float> so(nn::OptimizerConfig{.learning_rate = 3e-3});
  PretrainConfig pc;
  pc.steps = 600;
  pc.m = 1;
  pretrain_ssn(ssn, prep.corpus, pc, so, rng);
  const SSNModel frozen = ssn;

  Generator g(tiny_gen(V));
  g.init(rng);
  AdvConfig cfg;
  cfg.teacher_forcing = 0.0;
  cfg.sampler = kSampler;
  RewardBaseline baseline;
  nn::Optimizer<float> go(nn::OptimizerConfig{.learning_rate = 3e-3});
  std::vector<double> rewards;
  for (int round = 0; round < 10; ++round) {
    double total = 0;
    for (int step = 0; step < 5; ++step) {
      auto contexts = sample_contexts(prep.corpus, 16, rng);
      total += g_update(g, frozen, contexts, cfg, baseline, go, rng) / 5;
    }
    rewards.push_back(total);
    MESSAGE("round " << round + 1 << " reward " << total);
  }
  CHECK(ssn.params().same_values(frozen.params()));
  CHECK(rewards.back() > rewards.front());
}
