#include "odl/harness.hpp"

#include <openssl/evp.h>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <functional>
#include <memory>
#include <set>
#include <sstream>

#include "CLI11.hpp"

#include "odl/error.hpp"
#include "odl/log.hpp"
#include "odl/numerics/checkpoint.hpp"

namespace odl {

using nlohmann::json;
namespace fs = std::filesystem;

// --- RunConfig -------------------------------------------------------------------

namespace {

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, _] : j.items()) {
    if (!ok.count(key)) throw ConfigError(where + ": unknown key \"" + key + "\"");
  }
}

template <typename V>
void take(const json& j, const char* key, V& field) {
  if (j.contains(key)) field = j.at(key).get<V>();
}

void take_path(const json& j, const char* key, std::optional<fs::path>& field) {
  if (!j.contains(key)) return;
  if (j.at(key).is_null()) {
    field.reset();
  } else {
    field = fs::path(j.at(key).get<std::string>());
  }
}

json path_or_null(const std::optional<fs::path>& p) { return p ? json(p->string()) : json(nullptr); }

std::string to_string(nn::OptimizerKind kind) { return kind == nn::OptimizerKind::kSgd ? "sgd" : "adam"; }

nn::OptimizerKind parse_optimizer_kind(const std::string& name) {
  if (name == "sgd") return nn::OptimizerKind::kSgd;
  if (name == "adam") return nn::OptimizerKind::kAdam;
  throw ConfigError("unknown optimizer \"" + name + "\"");
}

json optimizer_json(const nn::OptimizerConfig& c) {
  return json{{"kind", to_string(c.kind)}, {"learning_rate", c.learning_rate}, {"clip_norm", c.clip_norm}};
}

void merge_optimizer(const json& j, nn::OptimizerConfig& c, const std::string& where) {
  check_keys(j, {"kind", "learning_rate", "clip_norm"}, where);
  if (j.contains("kind")) c.kind = parse_optimizer_kind(j.at("kind").get<std::string>());
  take(j, "learning_rate", c.learning_rate);
  take(j, "clip_norm", c.clip_norm);
}

void require_exists(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) throw ConfigError(what + " not found: " + p.string());
}

}  // namespace

RunConfig::RunConfig() {
  ssn = SSNConfig::toy(0);
  ssn_optimizer.learning_rate = 3e-3;
  gen_optimizer.learning_rate = 1e-3;
  pretrain.m = 1;
}

void RunConfig::validate() const {
  for (const auto& p : corpus) require_exists(p, "corpus");
  if (vocab) require_exists(*vocab, "vocabulary");
  if (ssn_checkpoint) require_exists(*ssn_checkpoint, "SSN checkpoint");
  if (gen_checkpoint) require_exists(*gen_checkpoint, "generator checkpoint");
  if (input) require_exists(*input, "input file");
  if (ssn.embed_dim == 0 || ssn.pair_hidden == 0 || ssn.reason_hidden == 0 || ssn.mlp_hidden == 0) {
    throw ConfigError("SSN dimensions must be positive");
  }
  if (gen.embed_dim == 0 || gen.encoder_hidden == 0 || gen.decoder_hidden == 0 ||
      gen.max_decode_len == 0 || gen.rollouts < 1) {
    throw ConfigError("generator dimensions must be positive");
  }
  adv.validate();
  filter.validate();
  odl::validate(sampler);
  synth.validate();
  if (pretrain.steps < 0 || pretrain.batch < 1 || pretrain.m < 1) throw ConfigError("bad pretrain settings");
  if (gen_pretrain.steps < 0 || gen_pretrain.batch < 1) throw ConfigError("bad generator pretrain settings");
  if (intrinsic.runs < 1 || intrinsic.train_n == 0 || intrinsic.test_n == 0 || intrinsic.threads < 1 ||
      !(intrinsic.test_fraction > 0.0 && intrinsic.test_fraction < 1.0)) {
    throw ConfigError("bad intrinsic settings");
  }
  for (const auto* o : {&ssn_optimizer, &gen_optimizer}) {
    if (!(o->learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  }
  if (out.empty()) throw ConfigError("output directory is empty");
}

json RunConfig::to_json() const {
  json corpora = json::array();
  for (const auto& p : corpus) corpora.push_back(p.string());
  auto ssn_j = ssn.to_json();
  ssn_j.erase("vocab_size");
  auto gen_j = gen.to_json();
  gen_j.erase("vocab_size");
  auto adv_j = adv.to_json();
  for (const char* k : {"strategy", "m", "n_target"}) adv_j.erase(k);
  return json{
      {"corpus", corpora},
      {"vocab", path_or_null(vocab)},
      {"ssn_checkpoint", path_or_null(ssn_checkpoint)},
      {"gen_checkpoint", path_or_null(gen_checkpoint)},
      {"input", path_or_null(input)},
      {"ssn", ssn_j},
      {"generator", gen_j},
      {"adversarial", adv_j},
      {"filter", filter.to_json()},
      {"sampler", {{"m", sampler.m}, {"n_target", sampler.n_target}}},
      {"strategy", odl::to_string(strategy)},
      {"pretrain", {{"steps", pretrain.steps}, {"batch", pretrain.batch}, {"m", pretrain.m}}},
      {"gen_pretrain", {{"steps", gen_pretrain.steps}, {"batch", gen_pretrain.batch}}},
      {"ssn_optimizer", optimizer_json(ssn_optimizer)},
      {"gen_optimizer", optimizer_json(gen_optimizer)},
      {"synthetic",
       {{"vocab_size", synth.vocab_size},
        {"topics", synth.topics},
        {"min_turns", synth.min_turns},
        {"max_turns", synth.max_turns},
        {"min_utterance", synth.min_utterance},
        {"max_utterance", synth.max_utterance},
        {"strength", synth.strength},
        {"dialogues", synth.dialogues}}},
      {"intrinsic",
       {{"runs", intrinsic.runs},
        {"train_n", intrinsic.train_n},
        {"test_n", intrinsic.test_n},
        {"test_fraction", intrinsic.test_fraction},
        {"threads", intrinsic.threads}}},
      {"seed", seed},
      {"out", out.string()},
  };
}

void RunConfig::merge_json(const json& j) {
  try {
    check_keys(j, {"corpus", "vocab", "ssn_checkpoint", "gen_checkpoint", "input", "ssn", "generator",
                   "adversarial", "filter", "sampler", "strategy", "pretrain", "gen_pretrain",
                   "ssn_optimizer", "gen_optimizer", "synthetic", "intrinsic", "seed", "out"},
               "config");
    if (j.contains("corpus")) {
      corpus.clear();
      const auto& c = j.at("corpus");
      if (c.is_string()) {
        corpus.emplace_back(c.get<std::string>());
      } else {
        for (const auto& p : c) corpus.emplace_back(p.get<std::string>());
      }
    }
    take_path(j, "vocab", vocab);
    take_path(j, "ssn_checkpoint", ssn_checkpoint);
    take_path(j, "gen_checkpoint", gen_checkpoint);
    take_path(j, "input", input);
    if (j.contains("ssn")) {
      const auto& s = j.at("ssn");
      check_keys(s, {"embed_dim", "pair_hidden", "reason_hidden", "mlp_hidden", "mode", "use_references"}, "ssn");
      take(s, "embed_dim", ssn.embed_dim);
      take(s, "pair_hidden", ssn.pair_hidden);
      take(s, "reason_hidden", ssn.reason_hidden);
      take(s, "mlp_hidden", ssn.mlp_hidden);
      if (s.contains("mode")) ssn.mode = parse_encoding_mode(s.at("mode").get<std::string>());
      take(s, "use_references", ssn.use_references);
    }
    if (j.contains("generator")) {
      const auto& g = j.at("generator");
      check_keys(g, {"embed_dim", "encoder_hidden", "decoder_hidden", "max_decode_len", "rollouts", "attention"},
                 "generator");
      take(g, "embed_dim", gen.embed_dim);
      take(g, "encoder_hidden", gen.encoder_hidden);
      take(g, "decoder_hidden", gen.decoder_hidden);
      take(g, "max_decode_len", gen.max_decode_len);
      take(g, "rollouts", gen.rollouts);
      if (g.contains("attention")) gen.attention = parse_attention(g.at("attention").get<std::string>());
    }
    if (j.contains("adversarial")) {
      const auto& a = j.at("adversarial");
      check_keys(a, {"g_steps", "ssn_steps", "rounds", "batch", "teacher_forcing"}, "adversarial");
      take(a, "g_steps", adv.g_steps);
      take(a, "ssn_steps", adv.ssn_steps);
      take(a, "rounds", adv.rounds);
      take(a, "batch", adv.batch);
      take(a, "teacher_forcing", adv.teacher_forcing);
    }
    if (j.contains("filter")) {
      const auto& f = j.at("filter");
      check_keys(f, {"threshold_low", "threshold_high", "rule"}, "filter");
      take(f, "threshold_low", filter.threshold_low);
      take(f, "threshold_high", filter.threshold_high);
      if (f.contains("rule")) filter.rule = parse_filter_rule(f.at("rule").get<std::string>());
    }
    if (j.contains("sampler")) {
      const auto& s = j.at("sampler");
      check_keys(s, {"m", "n_target"}, "sampler");
      take(s, "m", sampler.m);
      take(s, "n_target", sampler.n_target);
    }
    if (j.contains("strategy")) strategy = parse_strategy(j.at("strategy").get<std::string>());
    if (j.contains("pretrain")) {
      const auto& p = j.at("pretrain");
      check_keys(p, {"steps", "batch", "m"}, "pretrain");
      take(p, "steps", pretrain.steps);
      take(p, "batch", pretrain.batch);
      take(p, "m", pretrain.m);
    }
    if (j.contains("gen_pretrain")) {
      const auto& p = j.at("gen_pretrain");
      check_keys(p, {"steps", "batch"}, "gen_pretrain");
      take(p, "steps", gen_pretrain.steps);
      take(p, "batch", gen_pretrain.batch);
    }
    if (j.contains("ssn_optimizer")) merge_optimizer(j.at("ssn_optimizer"), ssn_optimizer, "ssn_optimizer");
    if (j.contains("gen_optimizer")) merge_optimizer(j.at("gen_optimizer"), gen_optimizer, "gen_optimizer");
    if (j.contains("synthetic")) {
      const auto& s = j.at("synthetic");
      check_keys(s, {"vocab_size", "topics", "min_turns", "max_turns", "min_utterance", "max_utterance",
                     "strength", "dialogues"},
                 "synthetic");
      take(s, "vocab_size", synth.vocab_size);
      take(s, "topics", synth.topics);
      take(s, "min_turns", synth.min_turns);
      take(s, "max_turns", synth.max_turns);
      take(s, "min_utterance", synth.min_utterance);
      take(s, "max_utterance", synth.max_utterance);
      take(s, "strength", synth.strength);
      take(s, "dialogues", synth.dialogues);
    }
    if (j.contains("intrinsic")) {
      const auto& s = j.at("intrinsic");
      check_keys(s, {"runs", "train_n", "test_n", "test_fraction", "threads"}, "intrinsic");
      take(s, "runs", intrinsic.runs);
      take(s, "train_n", intrinsic.train_n);
      take(s, "test_n", intrinsic.test_n);
      take(s, "test_fraction", intrinsic.test_fraction);
      take(s, "threads", intrinsic.threads);
    }
    take(j, "seed", seed);
    if (j.contains("out")) out = j.at("out").get<std::string>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad config: ") + e.what());
  }
}

RunConfig RunConfig::load(const fs::path& path) {
  require_exists(path, "config");
  json j;
  try {
    j = json::parse(nn::read_file(path));
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  RunConfig c;
  c.merge_json(j);
  return c;
}

// --- checksums and manifest ----------------------------------------------------------

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("sha256 failed");
  }
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", digest[i]);
    hex += buf;
  }
  return hex;
}

std::string sha256_file(const fs::path& path) { return sha256_hex(nn::read_file(path)); }

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void RunManifest::add_artifact(const fs::path& path) {
  artifacts[path.filename().string()] = {sha256_file(path), fs::file_size(path)};
}

json RunManifest::to_json() const {
  json arts = json::object();
  for (const auto& [name, rec] : artifacts) arts[name] = {{"sha256", rec.sha256}, {"bytes", rec.bytes}};
  return json{{"command", command},   {"config", config},           {"seed", seed},
              {"started", started},   {"finished", finished},       {"tool_version", tool_version},
              {"artifacts", arts}};
}

RunManifest RunManifest::from_json(const json& j) {
  RunManifest m;
  try {
    m.command = j.at("command").get<std::string>();
    m.config = j.at("config");
    m.seed = j.at("seed").get<std::uint64_t>();
    m.started = j.at("started").get<std::string>();
    m.finished = j.at("finished").get<std::string>();
    m.tool_version = j.at("tool_version").get<std::string>();
    for (const auto& [name, rec] : j.at("artifacts").items()) {
      m.artifacts[name] = {rec.at("sha256").get<std::string>(), rec.at("bytes").get<std::uintmax_t>()};
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("bad manifest: ") + e.what());
  }
  return m;
}

void RunManifest::write(const fs::path& path) const { nn::write_file_atomic(path, to_json().dump(2) + "\n"); }

std::vector<std::string> RunManifest::verify(const fs::path& dir) const {
  std::vector<std::string> bad;
  for (const auto& [name, rec] : artifacts) {
    const auto p = dir / name;
    if (!fs::exists(p) || sha256_file(p) != rec.sha256) bad.push_back(name);
  }
  return bad;
}

// --- commands ----------------------------------------------------------------------

namespace {

// Missing or inconsistent inputs detected before a command starts.
class UsageError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

struct Run {
  const RunConfig& config;
  std::ostream& out;
  RunManifest manifest;
  json options = json::object();
  std::vector<std::string> written;

  fs::path path(const std::string& name) const { return config.out / name; }
  void write(const std::string& name, const std::string& text) {
    nn::write_file_atomic(path(name), text);
    written.push_back(name);
  }
  void wrote(const std::string& name) { written.push_back(name); }
};

struct Command {
  CLI::App* app = nullptr;
  std::vector<std::function<void(RunConfig&)>> overrides;
  std::vector<std::string> needs;
  std::function<void(Run&)> body;
};

// Binds a flag whose value, when given, is applied to the config after the
// config file has been read.
template <typename V, typename F>
CLI::Option* bind(Command& cmd, const std::string& name, const std::string& desc, F apply) {
  auto value = std::make_shared<V>();
  auto* opt = cmd.app->add_option(name, *value, desc);
  cmd.overrides.push_back([value, opt, apply](RunConfig& c) {
    if (opt->count() > 0) apply(c, *value);
  });
  return opt;
}

void set_strategy(RunConfig& c, const std::string& name) {
  if (name == "none" || name == "no-refs") {
    c.ssn.use_references = false;
  } else {
    c.strategy = parse_strategy(name);
    c.ssn.use_references = true;
  }
}

std::string strategy_label(const RunConfig& c) {
  return c.ssn.use_references ? to_string(c.strategy) : "no-refs";
}

void need(const RunConfig& c, const std::string& what) {
  auto missing = [&](const char* flag) { throw UsageError("missing required input " + std::string(flag)); };
  if (what == "corpus" && c.corpus.empty()) missing("--corpus");
  if (what == "vocab" && !c.vocab) missing("--vocab");
  if (what == "ssn" && !c.ssn_checkpoint) missing("--ssn");
  if (what == "gen" && !c.gen_checkpoint) missing("--gen");
  if (what == "input" && !c.input) missing("--input");
}

Corpus load_raw(const RunConfig& c) {
  Corpus all;
  for (const auto& p : c.corpus) {
    auto part = load_corpus(p);
    for (auto& d : part.dialogues) all.dialogues.push_back(std::move(d));
    all.skipped_empty += part.skipped_empty;
  }
  if (all.empty()) throw Error("corpus has no dialogues");
  return all;
}

PreparedCorpus prepare(const RunConfig& c) {
  const auto raw = load_raw(c);
  if (c.vocab) return prepare_corpus(raw, Vocabulary::load(*c.vocab));
  return prepare_corpus(raw);
}

Vocabulary load_vocab(const RunConfig& c) { return Vocabulary::load(*c.vocab); }

void check_vocab(std::size_t model_vocab, const Vocabulary& vocab, const std::string& what) {
  if (model_vocab != vocab.size()) {
    throw ConfigError(what + " expects a vocabulary of " + std::to_string(model_vocab) + " ids, got " +
                      std::to_string(vocab.size()));
  }
}

std::size_t dialogue_index(const Corpus& padded, const Dialogue* d) {
  return static_cast<std::size_t>(d - padded.dialogues.data());
}

json ssn_ckpt_config(const SSNConfig& config, std::uint64_t seed) {
  auto j = ssn_checkpoint_config(config);
  j["seed"] = seed;
  return j;
}

json gen_ckpt_config(const GenConfig& config, std::uint64_t seed) {
  return json{{"model", "generator"}, {"generator", config.to_json()}, {"seed", seed}};
}

std::string loss_log(const std::vector<double>& curve) {
  std::string text;
  for (std::size_t i = 0; i < curve.size(); ++i) text += json{{"step", i + 1}, {"loss", curve[i]}}.dump() + "\n";
  return text;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

std::string metrics_csv(const std::vector<MetricRow>& rows) {
  std::ostringstream s;
  write_metrics_csv(s, rows);
  return s.str();
}

std::string metrics_json(const std::vector<MetricRow>& rows, std::uint64_t seed) {
  auto j = metrics_to_json(rows);
  j["seed"] = seed;
  return j.dump(2) + "\n";
}

// --- subcommand bodies ---

void add_ingest(CLI::App& app, std::vector<Command>& cmds) {
  Command c;
  c.app = app.add_subcommand("ingest", "Filter a raw corpus and build its vocabulary");
  auto min_count = std::make_shared<std::size_t>(1);
  auto min_words = std::make_shared<std::size_t>(1);
  auto max_words = std::make_shared<std::size_t>(std::numeric_limits<std::size_t>::max());
  c.app->add_option("--min-count", *min_count, "Minimum token count for the vocabulary");
  c.app->add_option("--min-words", *min_words, "Drop pairs with a shorter Q or A");
  c.app->add_option("--max-words", *max_words, "Drop pairs with a longer Q or A");
  c.needs = {"corpus"};
  c.body = [=](Run& r) {
    const auto filtered = filter_by_length(load_raw(r.config), *min_words, *max_words);
    const auto vocab = build_vocab(filtered, *min_count);
    r.write("corpus.jsonl", corpus_to_jsonl(filtered));
    r.write("vocab.json", vocab.to_json());
    r.options = {{"min_count", *min_count}, {"min_words", *min_words}, {"max_words", *max_words}};
    r.out << "dialogues " << filtered.size() << ", vocabulary " << vocab.size() << "\n";
  };
  cmds.push_back(std::move(c));
}

void add_synth(CLI::App& app, std::vector<Command>& cmds) {
  Command c;
  c.app = app.add_subcommand("synth", "Write a synthetic topic-line corpus");
  bind<double>(c, "--strength", "Topic word probability", [](RunConfig& r, double v) { r.synth.strength = v; });
  bind<std::size_t>(c, "--dialogues", "Number of dialogues", [](RunConfig& r, std::size_t v) { r.synth.dialogues = v; });
  bind<std::size_t>(c, "--vocab-size", "Content words", [](RunConfig& r, std::size_t v) { r.synth.vocab_size = v; });
  bind<std::size_t>(c, "--topics", "Topic buckets", [](RunConfig& r, std::size_t v) { r.synth.topics = v; });
  bind<int>(c, "--min-turns", "Shortest dialogue", [](RunConfig& r, int v) { r.synth.min_turns = v; });
  bind<int>(c, "--max-turns", "Longest dialogue", [](RunConfig& r, int v) { r.synth.max_turns = v; });
  c.body = [](Run& r) {
    auto spec = r.config.synth;
    spec.seed = r.config.seed;
    const auto corpus = gen_synthetic_corpus(spec);
    r.write("corpus.jsonl", corpus_to_jsonl(corpus));
    r.out << "dialogues " << corpus.size() << "\n";
  };
  cmds.push_back(std::move(c));
}

void add_sample_triples(CLI::App& app, std::vector<Command>& cmds) {
  Command c;
  c.app = app.add_subcommand("sample-triples", "Write balanced target triples as JSON Lines");
  auto count = std::make_shared<std::size_t>(1000);
  c.app->add_option("--count", *count, "Number of triples");
  c.needs = {"corpus"};
  c.body = [=](Run& r) {
    const auto prepared = prepare(r.config);
    Rng rng = Rng(r.config.seed).split("sampler");
    const auto examples = sample_target_examples(prepared.corpus, *count, rng);
    std::string text;
    for (const auto& ex : examples) {
      text += json{{"dialogue", ex.dialogue},
                   {"t", prepared.corpus.dialogues[ex.dialogue].turns()},
                   {"presentation", ex.target.indices},
                   {"label", static_cast<int>(ex.target.label)}}
                  .dump() +
              "\n";
    }
    r.write("triples.jsonl", text);
    r.options = {{"count", *count}};
    r.out << "triples " << examples.size() << "\n";
  };
  cmds.push_back(std::move(c));
}

void bind_ssn_flags(Command& c, bool strategy = true) {
  if (strategy) {
    bind<std::string>(c, "--strategy", "one-each | both-ordered | both-misordered | none",
                      [](RunConfig& r, const std::string& v) { set_strategy(r, v); });
  }
  bind<std::string>(c, "--mode", "pair | utterance-only",
                    [](RunConfig& r, const std::string& v) { r.ssn.mode = parse_encoding_mode(v); });
  bind<std::string>(c, "--dims", "toy | open-domain | task-oriented", [](RunConfig& r, const std::string& v) {
    SSNConfig preset;
    if (v == "toy") {
      preset = SSNConfig::toy(0);
    } else if (v == "open-domain") {
      preset = SSNConfig::open_domain(0);
    } else if (v == "task-oriented") {
      preset = SSNConfig::task_oriented(0);
    } else {
      throw UsageError("unknown SSN size preset \"" + v + "\"");
    }
    preset.mode = r.ssn.mode;
    preset.use_references = r.ssn.use_references;
    r.ssn = preset;
  });
  bind<int>(c, "--steps", "Training steps", [](RunConfig& r, int v) { r.pretrain.steps = v; });
  bind<int>(c, "--batch", "Triples per step", [](RunConfig& r, int v) { r.pretrain.batch = v; });
  bind<int>(c, "--m", "Reference draws per target", [](RunConfig& r, int v) { r.pretrain.m = v; });
  bind<double>(c, "--lr", "SSN learning rate", [](RunConfig& r, double v) { r.ssn_optimizer.learning_rate = v; });
}

void add_pretrain_ssn(CLI::App& app, std::vector<Command>& cmds) {
  Command c;
  c.app = app.add_subcommand("pretrain-ssn", "Train the order network on corpus triples");
  bind_ssn_flags(c);
  auto test_n = std::make_shared<std::size_t>(0);
  c.app->add_option("--test-n", *test_n, "Score this many triples from held-out dialogues");
  c.needs = {"corpus"};
  c.body = [=](Run& r) {
    const auto& cfg = r.config;
    const auto prepared = prepare(cfg);
    Corpus train = prepared.corpus, test;
    if (*test_n > 0) {
      const auto n = std::max<std::size_t>(1, static_cast<std::size_t>(cfg.intrinsic.test_fraction *
                                                                      static_cast<double>(train.size())));
      if (n >= train.size()) throw ConfigError("corpus too small to hold out test dialogues");
      test.dialogues.assign(train.dialogues.end() - static_cast<long>(n), train.dialogues.end());
      train.dialogues.resize(train.size() - n);
    }
    auto ssn_cfg = cfg.ssn;
    ssn_cfg.vocab_size = prepared.vocab.size();
    SSNModel model(ssn_cfg);
    Rng init = Rng(cfg.seed).split("init");
    model.init(init);
    nn::Optimizer<float> opt(cfg.ssn_optimizer);
    Rng rng = Rng(cfg.seed).split("sampler");
    auto pre = cfg.pretrain;
    pre.strategy = cfg.strategy;
    const auto result = pretrain_ssn(model, train, pre, opt, rng);

    r.write("vocab.json", prepared.vocab.to_json());
    r.write("ssn_loss.jsonl", loss_log(result.loss_curve));
    nn::save_checkpoint(r.path("ssn.ckpt"), model.params(), ssn_ckpt_config(ssn_cfg, cfg.seed));
    r.wrote("ssn.ckpt");
    if (!result.loss_curve.empty()) r.out << "final loss " << fmt(result.loss_curve.back()) << "\n";
    if (*test_n > 0) {
      Rng eval = Rng(cfg.seed).split("sampler").split("eval");
      const auto examples = sample_target_examples(test, *test_n, eval);
      const double acc = ssn_accuracy(model, test, examples, cfg.strategy, pre.m, eval);
      r.write("ssn_eval.json", json{{"accuracy", acc}, {"test_n", examples.size()},
                                    {"strategy", strategy_label(cfg)}, {"seed", cfg.seed}}
                                       .dump(2) +
                                   "\n");
      r.out << "test accuracy " << fmt(acc) << "\n";
    }
    r.options = {{"test_n", *test_n}};
  };
  cmds.push_back(std::move(c));
}

void add_eval_intrinsic(CLI::App& app, std::vector<Command>& cmds) {
  Command c;
  c.app = app.add_subcommand("eval-intrinsic", "Order-detection accuracy over repeated runs");
  bind_ssn_flags(c, false);
  auto strategies = std::make_shared<std::vector<std::string>>();
  c.app->add_option("--strategy", *strategies, "one-each | both-ordered | both-misordered | none (repeatable)");
  bind<int>(c, "--runs", "Independent runs", [](RunConfig& r, int v) { r.intrinsic.runs = v; });
  bind<std::size_t>(c, "--train-n", "Training pool size", [](RunConfig& r, std::size_t v) { r.intrinsic.train_n = v; });
  bind<std::size_t>(c, "--test-n", "Test triples", [](RunConfig& r, std::size_t v) { r.intrinsic.test_n = v; });
  bind<int>(c, "--threads", "Concurrent runs", [](RunConfig& r, int v) { r.intrinsic.threads = v; });
  c.needs = {"corpus"};
  c.body = [=](Run& r) {
    const auto& cfg = r.config;
    const auto prepared = prepare(cfg);
    std::vector<std::string> names = *strategies;
    if (names.empty()) names.push_back(strategy_label(cfg));
    std::vector<MetricRow> rows;
    for (const auto& name : names) {
      RunConfig local = cfg;
      set_strategy(local, name);
      SsnClassifierConfig clf;
      clf.ssn = local.ssn;
      clf.ssn.vocab_size = prepared.vocab.size();
      clf.train = local.pretrain;
      clf.train.strategy = local.strategy;
      clf.optimizer = local.ssn_optimizer;
      clf.eval_m = local.pretrain.m;
      auto icfg = local.intrinsic;
      icfg.seed = local.seed;
      icfg.label = strategy_label(local);
      const auto report = intrinsic_eval(
          [clf](std::uint64_t seed) { return std::make_unique<SsnClassifier>(clf, seed); }, prepared.corpus, icfg);
      rows.push_back(to_metric_row(report));
      r.out << icfg.label << " accuracy " << fmt(report.mean) << " +- " << fmt(report.stdev) << "\n";
    }
    r.write("intrinsic.csv", metrics_csv(rows));
    r.write("intrinsic.json", metrics_json(rows, cfg.seed));
    r.options = {{"strategies", names}};
  };
  cmds.push_back(std::move(c));
}

void bind_gen_flags(Command& c) {
  bind<std::string>(c, "--attention", "bilinear | additive",
                    [](RunConfig& r, const std::string& v) { r.gen.attention = parse_attention(v); });
  bind<std::size_t>(c, "--max-len", "Longest decoded response",
                    [](RunConfig& r, std::size_t v) { r.gen.max_decode_len = v; });
  bind<int>(c, "--rollouts", "Monte Carlo rollouts per step", [](RunConfig& r, int v) { r.gen.rollouts = v; });
}

void add_pretrain_gen(CLI::App& app, std::vector<Command>& cmds) {
  Command c;
  c.app = app.add_subcommand("pretrain-gen", "Maximum-likelihood training of the generator");
  bind_gen_flags(c);
  bind<int>(c, "--steps", "Training steps", [](RunConfig& r, int v) { r.gen_pretrain.steps = v; });
  bind<int>(c, "--batch", "Contexts per step", [](RunConfig& r, int v) { r.gen_pretrain.batch = v; });
  bind<double>(c, "--lr", "Generator learning rate", [](RunConfig& r, double v) { r.gen_optimizer.learning_rate = v; });
  c.needs = {"corpus"};
  c.body = [](Run& r) {
    const auto& cfg = r.config;
    const auto prepared = prepare(cfg);
    auto gen_cfg = cfg.gen;
    gen_cfg.vocab_size = prepared.vocab.size();
    Generator gen(gen_cfg);
    Rng init = Rng(cfg.seed).split("init");
    gen.init(init);
    nn::Optimizer<float> opt(cfg.gen_optimizer);
    Rng rng = Rng(cfg.seed).split("sampler");
    std::vector<double> curve;
    for (int step = 0; step < cfg.gen_pretrain.steps; ++step) {
      std::vector<std::pair<GenHistory, Utterance>> batch;
      for (const auto& ctx : sample_contexts(prepared.corpus, static_cast<std::size_t>(cfg.gen_pretrain.batch), rng)) {
        batch.emplace_back(history_at(*ctx.dialogue, ctx.t), ctx.dialogue->pair(ctx.t).a);
      }
      curve.push_back(mle_batch_step(gen, batch, opt));
    }
    r.write("vocab.json", prepared.vocab.to_json());
    r.write("gen_loss.jsonl", loss_log(curve));
    nn::save_checkpoint(r.path("generator.ckpt"), gen.params(), gen_ckpt_config(gen_cfg, cfg.seed));
    r.wrote("generator.ckpt");
    if (!curve.empty()) r.out << "final loss " << fmt(curve.back()) << "\n";
  };
  cmds.push_back(std::move(c));
}

void bind_sampler_flags(Command& c) {
  bind<std::string>(c, "--strategy", "one-each | both-ordered | both-misordered",
                    [](RunConfig& r, const std::string& v) { r.strategy = parse_strategy(v); });
  bind<int>(c, "--m", "Reference draws per p* target", [](RunConfig& r, int v) { r.sampler.m = v; });
  bind<int>(c, "--n-target", "Misordered targets per p* estimate", [](RunConfig& r, int v) { r.sampler.n_target = v; });
}

void add_train_adversarial(CLI::App& app, std::vector<Command>& cmds) {
  Command c;
  c.app = app.add_subcommand("train-adversarial", "Alternate SSN and generator updates");
  bind_sampler_flags(c);
  bind<int>(c, "--rounds", "Rounds", [](RunConfig& r, int v) { r.adv.rounds = v; });
  bind<int>(c, "--g-steps", "Generator updates per round", [](RunConfig& r, int v) { r.adv.g_steps = v; });
  bind<int>(c, "--ssn-steps", "SSN updates per round", [](RunConfig& r, int v) { r.adv.ssn_steps = v; });
  bind<int>(c, "--batch", "Contexts per update", [](RunConfig& r, int v) { r.adv.batch = v; });
  bind<double>(c, "--teacher-forcing", "Probability of an MLE step after each REINFORCE step",
               [](RunConfig& r, double v) { r.adv.teacher_forcing = v; });
  bind<double>(c, "--ssn-lr", "SSN learning rate", [](RunConfig& r, double v) { r.ssn_optimizer.learning_rate = v; });
  bind<double>(c, "--g-lr", "Generator learning rate", [](RunConfig& r, double v) { r.gen_optimizer.learning_rate = v; });
  c.needs = {"corpus", "vocab", "ssn", "gen"};
  c.body = [](Run& r) {
    const auto& cfg = r.config;
    const auto prepared = prepare(cfg);
    auto ssn = load_ssn(*cfg.ssn_checkpoint);
    auto gen = load_generator(*cfg.gen_checkpoint);
    check_vocab(ssn.config().vocab_size, prepared.vocab, "SSN checkpoint");
    check_vocab(gen.config().vocab_size, prepared.vocab, "generator checkpoint");
    auto adv = cfg.adv;
    adv.strategy = cfg.strategy;
    adv.sampler = cfg.sampler;
    AdversarialState state{nn::Optimizer<float>(cfg.gen_optimizer), nn::Optimizer<float>(cfg.ssn_optimizer), {}};
    Rng rng(cfg.seed);
    std::ostringstream log;
    const auto rounds = train_open_domain(gen, ssn, prepared.corpus, adv, state, rng, &log);
    r.write("adversarial_log.jsonl", log.str());
    nn::save_checkpoint(r.path("ssn_adv.ckpt"), ssn.params(), ssn_ckpt_config(ssn.config(), cfg.seed));
    r.wrote("ssn_adv.ckpt");
    nn::save_checkpoint(r.path("generator_adv.ckpt"), gen.params(), gen_ckpt_config(gen.config(), cfg.seed));
    r.wrote("generator_adv.ckpt");
    if (!rounds.empty()) {
      const auto& last = rounds.back();
      r.out << "round " << last.round << ": p*(real) " << fmt(last.p_star_real) << ", p*(gen) "
            << fmt(last.p_star_gen) << ", reward " << fmt(last.g_reward) << "\n";
    }
  };
  cmds.push_back(std::move(c));
}

void add_generate(CLI::App& app, std::vector<Command>& cmds) {
  Command c;
  c.app = app.add_subcommand("generate", "Respond to histories read from JSON Lines");
  auto greedy = std::make_shared<bool>(false);
  c.app->add_flag("--greedy", *greedy, "Greedy decoding instead of sampling");
  c.needs = {"vocab", "gen", "input"};
  c.body = [=](Run& r) {
    const auto& cfg = r.config;
    const auto vocab = load_vocab(cfg);
    const auto gen = load_generator(*cfg.gen_checkpoint);
    check_vocab(gen.config().vocab_size, vocab, "generator checkpoint");
    Rng rng = Rng(cfg.seed).split("sampler");
    std::istringstream in(nn::read_file(*cfg.input));
    std::string line, text;
    std::size_t line_no = 0, count = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      json rec;
      try {
        rec = json::parse(line);
        GenHistory h;
        const auto prev = rec.value("previous", std::string());
        h.previous = tokenize(prev).empty() ? Utterance{{kPadId}, std::nullopt} : encode(vocab, prev);
        h.query = encode(vocab, rec.at("query").get<std::string>());
        if (h.query.tokens.empty()) throw ParseError("empty query");
        const auto sample = decode(gen, h, *greedy ? DecodeMode::kGreedy : DecodeMode::kSample, &rng);
        rec["response"] = odl::decode(vocab, sample.response().tokens);
      } catch (const json::exception& e) {
        throw ParseError(cfg.input->string() + " line " + std::to_string(line_no) + ": " + e.what());
      } catch (const ParseError& e) {
        throw ParseError(cfg.input->string() + " line " + std::to_string(line_no) + ": " + e.what());
      }
      text += rec.dump() + "\n";
      ++count;
    }
    r.write("responses.jsonl", text);
    r.options = {{"greedy", *greedy}};
    r.out << "responses " << count << "\n";
  };
  cmds.push_back(std::move(c));
}

std::vector<DialogueContext> pick_contexts(const Corpus& padded, std::size_t count, Rng& rng) {
  if (count == 0) return last_turn_contexts(padded);
  return sample_contexts(padded, count, rng);
}

void add_eval(CLI::App& app, std::vector<Command>& cmds) {
  Command c;
  c.app = app.add_subcommand("eval", "AdverSuc and distinct-n of a generator");
  bind_sampler_flags(c);
  auto n = std::make_shared<int>(1);
  auto contexts = std::make_shared<std::size_t>(0);
  auto greedy = std::make_shared<bool>(false);
  c.app->add_option("--n", *n, "Responses per context");
  c.app->add_option("--contexts", *contexts, "Sampled last-turn contexts (0: every dialogue)");
  c.app->add_flag("--greedy", *greedy, "Greedy decoding instead of sampling");
  c.needs = {"corpus", "vocab", "ssn", "gen"};
  c.body = [=](Run& r) {
    const auto& cfg = r.config;
    const auto prepared = prepare(cfg);
    const auto judge_model = load_ssn(*cfg.ssn_checkpoint);
    const auto gen = load_generator(*cfg.gen_checkpoint);
    check_vocab(judge_model.config().vocab_size, prepared.vocab, "SSN checkpoint");
    check_vocab(gen.config().vocab_size, prepared.vocab, "generator checkpoint");
    Rng rng = Rng(cfg.seed).split("sampler");
    Rng judge_rng = Rng(cfg.seed).split("sampler").split("judge");
    const auto ctx = pick_contexts(prepared.corpus, *contexts, rng);
    const auto judge = ssn_judge(judge_model, cfg.strategy, cfg.sampler, judge_rng);
    std::vector<std::vector<TokenId>> responses;
    const HumanJudge recording = [&](const DialogueContext& dc, const Utterance& u) {
      responses.push_back(u.tokens);
      return judge(dc, u);
    };
    const double suc = adver_suc(gen, recording, ctx, *n, *greedy ? DecodeMode::kGreedy : DecodeMode::kSample, rng);
    const std::string label = to_string(cfg.strategy);
    std::vector<MetricRow> rows{
        {"adver-suc", label, suc, 0.0, 1, responses.size()},
        {"distinct-1", label, distinct_n(responses, 1), 0.0, 1, responses.size()},
        {"distinct-2", label, distinct_n(responses, 2), 0.0, 1, responses.size()},
    };
    r.write("metrics.csv", metrics_csv(rows));
    r.write("metrics.json", metrics_json(rows, cfg.seed));
    r.options = {{"n", *n}, {"contexts", *contexts}, {"greedy", *greedy}};
    for (const auto& row : rows) r.out << row.metric << " " << fmt(row.mean) << "\n";
  };
  cmds.push_back(std::move(c));
}

void add_filter_experience(CLI::App& app, std::vector<Command>& cmds) {
  Command c;
  c.app = app.add_subcommand("filter-experience", "Keep simulated experiences the SSN finds human-like");
  bind_sampler_flags(c);
  bind<double>(c, "--low", "Lower threshold", [](RunConfig& r, double v) { r.filter.threshold_low = v; });
  bind<double>(c, "--high", "Upper threshold", [](RunConfig& r, double v) { r.filter.threshold_high = v; });
  bind<std::string>(c, "--rule", "sampled-band | fixed-band",
                    [](RunConfig& r, const std::string& v) { r.filter.rule = parse_filter_rule(v); });
  auto batch_size = std::make_shared<std::size_t>(16);
  auto contexts = std::make_shared<std::size_t>(0);
  c.app->add_option("--batch", *batch_size, "Items sharing one threshold");
  c.app->add_option("--contexts", *contexts, "Sampled last-turn contexts when simulating (0: every dialogue)");
  c.needs = {"corpus", "vocab", "ssn"};
  c.body = [=](Run& r) {
    const auto& cfg = r.config;
    if (!cfg.gen_checkpoint && !cfg.input) throw ConfigError("filter-experience needs --gen or --input");
    if (*batch_size == 0) throw ConfigError("--batch must be positive");
    const auto prepared = prepare(cfg);
    const auto& padded = prepared.corpus;
    const auto ssn = load_ssn(*cfg.ssn_checkpoint);
    check_vocab(ssn.config().vocab_size, prepared.vocab, "SSN checkpoint");
    Rng rng = Rng(cfg.seed).split("sampler");

    std::vector<ExperienceItem> items;
    if (cfg.input) {
      std::istringstream in(nn::read_file(*cfg.input));
      std::string line;
      std::size_t line_no = 0;
      while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
          const auto rec = json::parse(line);
          const auto d = rec.at("dialogue").get<std::size_t>();
          if (d >= padded.size()) throw ParseError("dialogue index out of range");
          const auto& dialogue = padded.dialogues[d];
          const int t = rec.value("t", dialogue.turns());
          if (t < 1 || t > dialogue.turns()) throw ParseError("turn out of range");
          auto u = encode(prepared.vocab, rec.at("utterance").get<std::string>());
          if (u.tokens.empty()) throw ParseError("empty utterance");
          items.push_back({{&dialogue, t}, std::move(u), Provenance::kSimulated, std::nullopt});
        } catch (const json::exception& e) {
          throw ParseError(cfg.input->string() + " line " + std::to_string(line_no) + ": " + e.what());
        } catch (const ParseError& e) {
          throw ParseError(cfg.input->string() + " line " + std::to_string(line_no) + ": " + e.what());
        }
      }
    } else {
      const auto gen = load_generator(*cfg.gen_checkpoint);
      check_vocab(gen.config().vocab_size, prepared.vocab, "generator checkpoint");
      Rng gen_rng = Rng(cfg.seed).split("rollouts");
      const auto ctx = pick_contexts(padded, *contexts, gen_rng);
      items = generated_batch(gen, ctx, gen_rng).items;
    }

    std::string text;
    std::size_t accepted_total = 0;
    for (std::size_t start = 0, b = 0; start < items.size(); start += *batch_size, ++b) {
      ExperienceBatch batch;
      batch.items.assign(items.begin() + static_cast<long>(start),
                         items.begin() + static_cast<long>(std::min(items.size(), start + *batch_size)));
      const auto kept = filter_experiences(ssn, batch, cfg.filter, cfg.strategy, cfg.sampler, rng);
      std::size_t k = 0;
      for (const auto& item : batch.items) {
        const bool accepted = k < kept.items.size() && kept.items[k].context.dialogue == item.context.dialogue &&
                              kept.items[k].context.t == item.context.t && kept.items[k].utterance == item.utterance;
        if (accepted) ++k;
        accepted_total += accepted;
        text += json{{"batch", b},
                     {"dialogue", dialogue_index(padded, item.context.dialogue)},
                     {"t", item.context.t},
                     {"utterance", odl::decode(prepared.vocab, item.utterance.tokens)},
                     {"score", item.score.value_or(0.0)},
                     {"accepted", accepted}}
                    .dump() +
                "\n";
      }
    }
    r.write("experiences.jsonl", text);
    r.write("filter_summary.json", json{{"items", items.size()},
                                        {"accepted", accepted_total},
                                        {"filter", cfg.filter.to_json()},
                                        {"seed", cfg.seed}}
                                           .dump(2) +
                                       "\n");
    r.options = {{"batch", *batch_size}, {"contexts", *contexts}};
    r.out << "accepted " << accepted_total << " of " << items.size() << "\n";
  };
  cmds.push_back(std::move(c));
}

}  // namespace

int cmd_dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Inconsistent order detection and SSN-guided dialogue generation", "odl"};
  app.require_subcommand(1);
  std::string config_path;
  std::uint64_t seed = 0;
  std::string out_dir;
  auto* config_opt = app.add_option("--config", config_path, "JSON run configuration");
  auto* seed_opt = app.add_option("--seed", seed, "Global seed");
  auto* out_opt = app.add_option("--out", out_dir, "Output directory");
  std::vector<std::string> corpus_paths;
  std::string vocab_path, ssn_path, gen_path, input_path;
  auto* corpus_opt = app.add_option("--corpus", corpus_paths, "Corpus JSON Lines (repeatable)");
  auto* vocab_opt = app.add_option("--vocab", vocab_path, "Vocabulary JSON");
  auto* ssn_opt = app.add_option("--ssn", ssn_path, "SSN checkpoint");
  auto* gen_opt = app.add_option("--gen", gen_path, "Generator checkpoint");
  auto* input_opt = app.add_option("--input", input_path, "Input JSON Lines");

  std::vector<Command> cmds;
  add_ingest(app, cmds);
  add_synth(app, cmds);
  add_sample_triples(app, cmds);
  add_pretrain_ssn(app, cmds);
  add_eval_intrinsic(app, cmds);
  add_pretrain_gen(app, cmds);
  add_train_adversarial(app, cmds);
  add_generate(app, cmds);
  add_eval(app, cmds);
  add_filter_experience(app, cmds);
  for (auto& c : cmds) c.app->fallthrough();

  if (argc <= 1) {
    err << app.help();
    return kExitUsage;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  Command* cmd = nullptr;
  for (auto& c : cmds) {
    if (c.app->parsed()) cmd = &c;
  }

  RunConfig config;
  try {
    if (config_opt->count() > 0) config = RunConfig::load(config_path);
    if (seed_opt->count() > 0) config.seed = seed;
    if (out_opt->count() > 0) config.out = out_dir;
    if (corpus_opt->count() > 0) {
      config.corpus.clear();
      for (const auto& p : corpus_paths) config.corpus.emplace_back(p);
    }
    if (vocab_opt->count() > 0) config.vocab = vocab_path;
    if (ssn_opt->count() > 0) config.ssn_checkpoint = ssn_path;
    if (gen_opt->count() > 0) config.gen_checkpoint = gen_path;
    if (input_opt->count() > 0) config.input = input_path;
    for (const auto& apply : cmd->overrides) apply(config);
    for (const auto& what : cmd->needs) need(config, what);
    config.validate();
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n\n" << cmd->app->help();
    return kExitUsage;
  }

  Run run{config, out, {}, json::object(), {}};
  run.manifest.command = cmd->app->get_name();
  run.manifest.seed = config.seed;
  run.manifest.started = utc_timestamp();
  try {
    fs::create_directories(config.out);
    cmd->body(run);
    auto snapshot = config.to_json();
    snapshot["options"] = run.options;
    run.manifest.config = snapshot;
    for (const auto& name : run.written) run.manifest.add_artifact(run.path(name));
    run.manifest.finished = utc_timestamp();
    run.manifest.write(config.out / "manifest.json");
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitOk;
}

int cmd_dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv{"odl"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return cmd_dispatch(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace odl
