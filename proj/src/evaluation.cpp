#include "odl/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <future>
#include <limits>
#include <map>
#include <set>

#include "odl/error.hpp"

namespace odl {

using nlohmann::json;

// --- synthetic oracle --------------------------------------------------------

namespace {

double log_sum_exp(double a, double b) {
  if (a == -std::numeric_limits<double>::infinity()) return b;
  if (b == -std::numeric_limits<double>::infinity()) return a;
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

std::vector<std::size_t> synthetic_words(const Utterance& u) {
  if (!u.raw_text) throw Error("oracle: utterance without raw text");
  std::vector<std::size_t> out;
  for (const auto& tok : tokenize(*u.raw_text)) {
    if (tok.size() < 2 || tok[0] != 'w') throw Error("oracle: '" + tok + "' is not a synthetic word");
    out.push_back(static_cast<std::size_t>(std::stoul(tok.substr(1))));
  }
  return out;
}

}  // namespace

SyntheticOracle::SyntheticOracle(const SyntheticSpec& spec) : spec_(spec) { spec.validate(); }

std::vector<double> SyntheticOracle::topic_log_likelihoods(const Utterance& u) const {
  const auto V = static_cast<double>(spec_.vocab_size);
  std::vector<double> ll(spec_.topics, 0.0);
  for (std::size_t w : synthetic_words(u)) {
    if (w >= spec_.vocab_size) throw Error("oracle: word outside the vocabulary");
    for (std::size_t z = 0; z < spec_.topics; ++z) {
      const std::size_t lo = z * spec_.vocab_size / spec_.topics;
      const std::size_t hi = (z + 1) * spec_.vocab_size / spec_.topics;
      const bool in = w >= lo && w < hi;
      ll[z] += std::log(spec_.strength * (in ? 1.0 / static_cast<double>(hi - lo) : 0.0) +
                        (1.0 - spec_.strength) / V);
    }
  }
  return ll;
}

double SyntheticOracle::log_odds(const Dialogue& raw, const Triple& triple) const {
  std::array<std::vector<double>, 3> ll;
  for (int p = 0; p < 3; ++p) {
    const auto& pair = raw.pair(triple.indices[static_cast<std::size_t>(p)]);
    ll[static_cast<std::size_t>(p)] = topic_log_likelihoods(pair.q);
    const auto la = topic_log_likelihoods(pair.a);
    for (std::size_t z = 0; z < spec_.topics; ++z) ll[static_cast<std::size_t>(p)][z] += la[z];
  }
  const double neg_inf = -std::numeric_limits<double>::infinity();
  double ordered = neg_inf, misordered = neg_inf;
  const int K = static_cast<int>(spec_.topics);
  const double log_len = -std::log(static_cast<double>(spec_.max_turns - spec_.min_turns + 1));
  for (int L = std::max(spec_.min_turns, 3); L <= spec_.max_turns; ++L) {
    const double n_subsets = static_cast<double>(L) * (L - 1) * (L - 2) / 6.0;
    const double log_offsets = -std::log(static_cast<double>(K - L + 1));
    const double prior = log_len + std::log(0.5) + log_offsets - std::log(n_subsets);
    for (int d : {1, -1}) {
      const int o_lo = d > 0 ? -1 : L, o_hi = d > 0 ? K - 1 - L : K;
      for (int o = o_lo; o <= o_hi; ++o) {
        auto topic = [&](int turn) { return static_cast<std::size_t>(o + d * turn); };
        for (int a = 1; a <= L; ++a) {
          for (int b = a + 1; b <= L; ++b) {
            for (int c = b + 1; c <= L; ++c) {
              const double base = prior + ll[0][topic(a)];
              ordered = log_sum_exp(ordered, base + ll[1][topic(b)] + ll[2][topic(c)]);
              misordered = log_sum_exp(misordered, base + ll[1][topic(c)] + ll[2][topic(b)]);
            }
          }
        }
      }
    }
  }
  return misordered - ordered;
}

OrderLabel SyntheticOracle::classify(const Dialogue& raw, const Triple& triple, Rng& rng) const {
  const double lo = log_odds(raw, triple);
  if (std::abs(lo) < 1e-9) return rng.bernoulli(0.5) ? OrderLabel::kMisordered : OrderLabel::kOrdered;
  return lo > 0 ? OrderLabel::kMisordered : OrderLabel::kOrdered;
}

std::vector<TargetExample> sample_real_turn_triples(const Corpus& raw, std::size_t count, Rng& rng) {
  if (raw.empty()) throw Error("sample_real_turn_triples: empty corpus");
  std::vector<TargetExample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const auto label = i < count / 2 ? OrderLabel::kOrdered : OrderLabel::kMisordered;
    const auto d = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(raw.size()) - 1));
    const int L = raw.dialogues[d].turns();
    if (L < 3) throw Error("sample_real_turn_triples: dialogue shorter than three turns");
    std::array<int, 3> idx{};
    do {
      for (auto& x : idx) x = static_cast<int>(rng.uniform_int(1, L));
    } while (idx[0] == idx[1] || idx[0] == idx[2] || idx[1] == idx[2]);
    std::sort(idx.begin(), idx.end());
    out.push_back({d, present(idx[0], idx[1], idx[2], label)});
  }
  return out;
}

double oracle_accuracy(const SyntheticOracle& oracle, const Corpus& raw,
                       const std::vector<TargetExample>& examples, Rng& rng) {
  if (examples.empty()) return 0.0;
  std::size_t correct = 0;
  for (const auto& ex : examples) {
    correct += oracle.classify(raw.dialogues.at(ex.dialogue), ex.target, rng) == ex.target.label;
  }
  return static_cast<double>(correct) / static_cast<double>(examples.size());
}

// --- intrinsic protocol ------------------------------------------------------

double threshold_accuracy(const std::vector<double>& scores, const std::vector<OrderLabel>& labels) {
  if (scores.size() != labels.size()) throw ShapeError("threshold_accuracy: size mismatch");
  if (scores.empty()) return 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const auto guess = scores[i] >= 0.5 ? OrderLabel::kMisordered : OrderLabel::kOrdered;
    correct += guess == labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(scores.size());
}

IntrinsicReport intrinsic_eval(const ClassifierFactory& factory, const Corpus& padded,
                               const IntrinsicConfig& config) {
  if (config.runs < 1) throw ConfigError("intrinsic_eval: runs must be at least 1");
  if (config.train_n == 0 || config.test_n == 0) throw ConfigError("intrinsic_eval: empty split");
  if (!(config.test_fraction > 0.0 && config.test_fraction < 1.0)) {
    throw ConfigError("intrinsic_eval: test_fraction must lie in (0, 1)");
  }
  if (padded.size() < 2) throw ConfigError("intrinsic_eval: need at least two dialogues");
  auto n_test = static_cast<std::size_t>(std::llround(config.test_fraction * static_cast<double>(padded.size())));
  n_test = std::clamp<std::size_t>(n_test, 1, padded.size() - 1);
  Corpus train, test;
  train.dialogues.assign(padded.dialogues.begin(), padded.dialogues.end() - static_cast<long>(n_test));
  test.dialogues.assign(padded.dialogues.end() - static_cast<long>(n_test), padded.dialogues.end());

  Rng data = Rng(config.seed).split("sampler");
  const auto pool = sample_target_examples(train, config.train_n, data);
  const auto held_out = sample_target_examples(test, config.test_n, data);
  std::vector<OrderLabel> labels;
  for (const auto& ex : held_out) labels.push_back(ex.target.label);

  auto run = [&](int r) {
    const std::uint64_t seed = mix_seed(config.seed, static_cast<std::uint64_t>(r) + 1);
    auto clf = factory(seed);
    Rng rng = Rng(seed).split("sampler");
    clf->fit(train, pool, rng);
    std::vector<double> scores;
    scores.reserve(held_out.size());
    for (const auto& ex : held_out) scores.push_back(clf->predict(test, ex, rng));
    return threshold_accuracy(scores, labels);
  };

  IntrinsicReport report;
  report.label = config.label;
  report.test_n = held_out.size();
  report.accuracies.resize(static_cast<std::size_t>(config.runs));
  const int threads = std::max(1, config.threads);
  for (int start = 0; start < config.runs; start += threads) {
    const int end = std::min(config.runs, start + threads);
    if (threads == 1) {
      report.accuracies[static_cast<std::size_t>(start)] = run(start);
      continue;
    }
    std::vector<std::future<double>> jobs;
    for (int r = start; r < end; ++r) jobs.push_back(std::async(std::launch::async, run, r));
    for (int r = start; r < end; ++r) report.accuracies[static_cast<std::size_t>(r)] = jobs[static_cast<std::size_t>(r - start)].get();
  }
  double sum = 0;
  for (double a : report.accuracies) sum += a;
  report.mean = sum / config.runs;
  if (config.runs > 1) {
    double ss = 0;
    for (double a : report.accuracies) ss += (a - report.mean) * (a - report.mean);
    report.stdev = std::sqrt(ss / (config.runs - 1));
  }
  return report;
}

SsnClassifier::SsnClassifier(const SsnClassifierConfig& config, std::uint64_t seed)
    : config_(config), model_(config.ssn) {
  Rng init = Rng(seed).split("init");
  model_.init(init);
}

void SsnClassifier::fit(const Corpus& padded, const std::vector<TargetExample>& examples, Rng& rng) {
  nn::Optimizer<float> opt(config_.optimizer);
  train_ssn_on_examples(model_, padded, examples, config_.train, opt, rng);
}

double SsnClassifier::predict(const Corpus& padded, const TargetExample& example, Rng& rng) {
  return odl::predict(model_, padded.dialogues.at(example.dialogue), example.target,
                      config_.train.strategy, config_.eval_m, rng);
}

// --- hierarchical history baseline --------------------------------------------

void HierConfig::validate() const {
  triple.validate();
  if (utterance_hidden == 0 || turn_hidden == 0) throw ConfigError("hierarchical sizes must be positive");
}

HierBaseline::HierBaseline(const HierConfig& config) : config_(config) {
  config.validate();
  const auto& c = config.triple;
  params_.add("embedding", nn::Shape{c.vocab_size, c.embed_dim});
  nn::add_lstm_params(params_, "pair.fwd", {c.embed_dim, c.pair_hidden});
  nn::add_lstm_params(params_, "pair.bwd", {c.embed_dim, c.pair_hidden});
  nn::add_lstm_params(params_, "reason.fwd", {c.pair_dim(), c.reason_hidden});
  nn::add_lstm_params(params_, "reason.bwd", {c.pair_dim(), c.reason_hidden});
  nn::add_lstm_params(params_, "hier.utt", {c.embed_dim, config.utterance_hidden});
  nn::add_lstm_params(params_, "hier.turn", {config.utterance_hidden, config.turn_hidden});
  params_.add("mlp.w1", nn::Shape{c.mlp_hidden, c.triple_dim() + config.turn_hidden});
  params_.add("mlp.b1", nn::Shape{c.mlp_hidden});
  params_.add("mlp.w2", nn::Shape{1, c.mlp_hidden});
  params_.add("mlp.b2", nn::Shape{1});
}

namespace {

template <typename PS>
HierWeights bind_hier(nn::Tape<float>& tape, PS& params) {
  HierWeights w;
  w.triple.embedding = tape.param(params.get("embedding"));
  w.triple.pair_fwd = nn::bind_lstm(tape, params, "pair.fwd");
  w.triple.pair_bwd = nn::bind_lstm(tape, params, "pair.bwd");
  w.triple.reason_fwd = nn::bind_lstm(tape, params, "reason.fwd");
  w.triple.reason_bwd = nn::bind_lstm(tape, params, "reason.bwd");
  w.utterance = nn::bind_lstm(tape, params, "hier.utt");
  w.turn = nn::bind_lstm(tape, params, "hier.turn");
  w.w1 = tape.param(params.get("mlp.w1"));
  w.b1 = tape.param(params.get("mlp.b1"));
  w.w2 = tape.param(params.get("mlp.w2"));
  w.b2 = tape.param(params.get("mlp.b2"));
  return w;
}

nn::Var<float> run_lstm(nn::Tape<float>& tape, const nn::LstmWeights<float>& w,
                        const std::vector<nn::Var<float>>& inputs) {
  auto state = nn::zero_state(tape, w.hidden);
  for (const auto& x : inputs) state = nn::lstm_cell(x, state, w);
  return state.h;
}

}  // namespace

HierWeights HierBaseline::bind(nn::Tape<float>& tape) { return bind_hier(tape, params_); }
HierWeights HierBaseline::bind(nn::Tape<float>& tape) const { return bind_hier(tape, params_); }

nn::Var<float> history_embedding(const HierWeights& w, const Dialogue& dialogue, int t) {
  nn::Tape<float>& tape = w.w1.tape();
  std::vector<nn::Var<float>> states;
  for (const auto& pair : dialogue.pairs) {
    if (pair.index >= t) continue;
    for (const Utterance* u : {&pair.q, &pair.a}) {
      if (u->tokens.empty()) continue;
      std::vector<nn::Var<float>> emb;
      for (TokenId id : u->tokens) emb.push_back(nn::embedding(w.triple.embedding, id));
      states.push_back(run_lstm(tape, w.utterance, emb));
    }
  }
  if (states.empty()) throw ShapeError("history_embedding: empty history");
  return run_lstm(tape, w.turn, states);
}

nn::Var<float> hier_logit(const HierWeights& w, const HierConfig& config, const Dialogue& padded,
                          const Triple& target) {
  const int t = *std::max_element(target.indices.begin(), target.indices.end());
  std::array<nn::Var<float>, 3> pairs;
  for (std::size_t i = 0; i < 3; ++i) {
    const auto& p = padded.pair(target.indices[i]);
    pairs[i] = encode_pair(w.triple, config.triple, p.q, p.a);
  }
  auto tri = encode_triple(w.triple, pairs[0], pairs[1], pairs[2]);
  const nn::Var<float> parts[] = {tri, history_embedding(w, padded, t)};
  auto hidden = nn::tanh(nn::linear(w.w1, w.b1, nn::concat<float>(parts)));
  return nn::linear(w.w2, w.b2, hidden);
}

double baseline_score(const HierBaseline& baseline, const Dialogue& padded, const Triple& target) {
  nn::Tape<float> tape(false);
  auto w = baseline.bind(tape);
  return nn::sigmoid(hier_logit(w, baseline.config(), padded, target)).item();
}

HierClassifier::HierClassifier(const HierClassifierConfig& config, std::uint64_t seed)
    : config_(config), model_(config.model) {
  Rng init = Rng(seed).split("init");
  model_.init(init);
}

void HierClassifier::fit(const Corpus& padded, const std::vector<TargetExample>& examples, Rng& rng) {
  if (examples.empty()) throw ConfigError("HierClassifier: no examples");
  nn::Optimizer<float> opt(config_.optimizer);
  const float inv = 1.0f / static_cast<float>(config_.train.batch);
  for (int step = 0; step < config_.train.steps; ++step) {
    for (int i = 0; i < config_.train.batch; ++i) {
      const auto& ex = examples[static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<std::int64_t>(examples.size()) - 1))];
      nn::Tape<float> tape;
      auto w = model_.bind(tape);
      auto z = hier_logit(w, model_.config(), padded.dialogues.at(ex.dialogue), ex.target);
      tape.backward(nn::scale(nn::bce_with_logit(z, static_cast<float>(label_value(ex.target.label))), inv));
    }
    opt.step(model_.params());
  }
}

double HierClassifier::predict(const Corpus& padded, const TargetExample& example, Rng&) {
  return baseline_score(model_, padded.dialogues.at(example.dialogue), example.target);
}

// --- generation metrics ------------------------------------------------------

HumanJudge ssn_judge(const SSNModel& ssn, ReferenceStrategy strategy, const SamplerConfig& sampler,
                     Rng& rng) {
  return [&ssn, strategy, sampler, &rng](const DialogueContext& context, const Utterance& response) {
    ExperienceItem item{context, response, Provenance::kSimulated, std::nullopt};
    return estimate_p_star(ssn, item_view(ssn.config(), item), strategy, sampler, rng);
  };
}

double adver_suc(const Generator& generator, const HumanJudge& judge,
                 std::span<const DialogueContext> contexts, int n, DecodeMode mode, Rng& rng) {
  if (n < 1) throw ConfigError("adver_suc: n must be at least 1");
  if (contexts.empty()) throw ConfigError("adver_suc: no contexts");
  std::size_t human = 0, total = 0;
  for (const auto& c : contexts) {
    const auto h = history_at(*c.dialogue, c.t);
    for (int i = 0; i < n; ++i) {
      const auto response = decode(generator, h, mode, &rng).response();
      human += judge(c, response) >= 0.5;
      ++total;
    }
  }
  return static_cast<double>(human) / static_cast<double>(total);
}

template <typename Token>
double distinct_n(const std::vector<std::vector<Token>>& utterances, int n) {
  if (n < 1) throw ConfigError("distinct_n: n must be at least 1");
  if (utterances.empty()) throw ConfigError("distinct_n: no utterances");
  std::set<std::vector<Token>> seen;
  std::size_t total = 0;
  const auto un = static_cast<std::size_t>(n);
  for (const auto& u : utterances) {
    for (std::size_t i = 0; i + un <= u.size(); ++i) {
      seen.emplace(u.begin() + static_cast<long>(i), u.begin() + static_cast<long>(i + un));
      ++total;
    }
  }
  return total ? static_cast<double>(seen.size()) / static_cast<double>(total) : 0.0;
}

template double distinct_n(const std::vector<std::vector<std::string>>&, int);
template double distinct_n(const std::vector<std::vector<TokenId>>&, int);

// --- metric export -------------------------------------------------------------

MetricRow to_metric_row(const IntrinsicReport& report, const std::string& metric) {
  return MetricRow{metric, report.label, report.mean, report.stdev,
                   static_cast<int>(report.accuracies.size()), report.test_n};
}

void write_metrics_csv(std::ostream& out, const std::vector<MetricRow>& rows) {
  out << "metric,strategy,mean,stdev,runs,n\n";
  char buf[64];
  for (const auto& r : rows) {
    out << r.metric << ',' << r.strategy << ',';
    std::snprintf(buf, sizeof buf, "%.6f,%.6f", r.mean, r.stdev);
    out << buf << ',' << r.runs << ',' << r.n << '\n';
  }
}

json metrics_to_json(const std::vector<MetricRow>& rows) {
  json arr = json::array();
  for (const auto& r : rows) {
    arr.push_back({{"metric", r.metric}, {"strategy", r.strategy}, {"mean", r.mean},
                   {"stdev", r.stdev},   {"runs", r.runs},         {"n", r.n}});
  }
  return json{{"metrics", arr}};
}

}  // namespace odl
