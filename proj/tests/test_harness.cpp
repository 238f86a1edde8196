#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include "odl/error.hpp"
#include "odl/harness.hpp"
#include "odl/numerics/checkpoint.hpp"

using namespace odl;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() /
           ("odl_harness_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& name) const { return (path / name).string(); }
};

struct Result {
  int code;
  std::string out, err;
};

Result run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cmd_dispatch(args, out, err);
  return {code, out.str(), err.str()};
}

// Small, fast SSN and corpus settings shared by the CLI tests.
std::string tiny_config(const TempDir& dir) {
  const std::string path = dir / "config.json";
  spit(path, R"({"ssn": {"embed_dim": 8, "pair_hidden": 8, "reason_hidden": 8, "mlp_hidden": 8},
                 "generator": {"embed_dim": 8, "encoder_hidden": 8, "decoder_hidden": 8,
                               "max_decode_len": 4, "rollouts": 1},
                 "synthetic": {"dialogues": 60},
                 "pretrain": {"batch": 4}})");
  return path;
}

}  // namespace

TEST_CASE("sha256 matches the standard test vectors") {
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(sha256_hex("abcdbcdecdefdefgefghfghighijhijkijkljklmklmnlmnomnopnopq") ==
        "248d6a61d20638b8e5c026930c3e6039a33ce45964ff2167f6ecedd419db06c1");
}

TEST_CASE("RunConfig json round trip and strictness") {
  RunConfig a;
  a.seed = 42;
  a.strategy = ReferenceStrategy::kBothMisordered;
  a.ssn.use_references = false;
  a.gen.attention = AttentionKind::kAdditive;
  a.filter.rule = FilterRule::kFixedBand;
  a.intrinsic.runs = 3;
  a.corpus = {"x.jsonl", "y.jsonl"};
  a.vocab = "v.json";
  RunConfig b;
  b.merge_json(a.to_json());
  CHECK(b.to_json() == a.to_json());

  SUBCASE("partial documents keep defaults") {
    RunConfig c;
    c.merge_json(nlohmann::json::parse(R"({"seed": 9, "corpus": "only.jsonl", "sampler": {"m": 5}})"));
    CHECK(c.seed == 9);
    REQUIRE(c.corpus.size() == 1);
    CHECK(c.corpus[0] == "only.jsonl");
    CHECK(c.sampler.m == 5);
    CHECK(c.sampler.n_target == RunConfig().sampler.n_target);
  }
  SUBCASE("unknown keys are rejected") {
    RunConfig c;
    CHECK_THROWS_AS(c.merge_json(nlohmann::json::parse(R"({"sed": 1})")), ConfigError);
    CHECK_THROWS_AS(c.merge_json(nlohmann::json::parse(R"({"ssn": {"hidden": 1}})")), ConfigError);
    CHECK_THROWS_AS(c.merge_json(nlohmann::json::parse(R"({"seed": "one"})")), ConfigError);
  }
}

TEST_CASE("RunConfig validation") {
  TempDir dir;
  RunConfig c;
  c.validate();
  c.corpus = {dir / "missing.jsonl"};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  spit(dir / "present.jsonl", "");
  c.corpus = {dir / "present.jsonl"};
  c.validate();
  c.ssn_checkpoint = dir / "none.ckpt";
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.ssn_checkpoint.reset();
  c.filter.threshold_low = 0.9;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("manifest checksums, round trip and atomic write") {
  TempDir dir;
  spit(dir / "a.txt", "abc");
  spit(dir / "b.txt", "");
  RunManifest m;
  m.command = "synth";
  m.seed = 7;
  m.config = {{"seed", 7}};
  m.started = m.finished = utc_timestamp();
  m.add_artifact(dir / "a.txt");
  m.add_artifact(dir / "b.txt");
  CHECK(m.artifacts.at("a.txt").sha256 == sha256_hex("abc"));
  CHECK(m.artifacts.at("a.txt").bytes == 3);
  CHECK(m.verify(dir.path).empty());

  m.write(dir / "manifest.json");
  const auto back = RunManifest::from_json(nlohmann::json::parse(slurp(dir / "manifest.json")));
  CHECK(back.to_json() == m.to_json());
  std::size_t files = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(dir.path)) ++files;
  CHECK(files == 3);

  spit(dir / "a.txt", "abd");
  fs::remove(dir / "b.txt");
  CHECK(m.verify(dir.path) == std::vector<std::string>{"a.txt", "b.txt"});
  CHECK(utc_timestamp().size() == 20);
}

TEST_CASE("usage errors exit 1") {
  std::ostringstream out, err;
  const char* argv[] = {"odl"};
  CHECK(cmd_dispatch(1, argv, out, err) == kExitUsage);
  CHECK(err.str().find("Usage:") != std::string::npos);

  auto r = run({"no-such-command"});
  CHECK(r.code == kExitUsage);
  CHECK(r.err.find("Usage:") != std::string::npos);
  CHECK(run({"synth", "--strength"}).code == kExitUsage);
  CHECK(run({"synth", "--bogus-flag", "1"}).code == kExitUsage);
  CHECK(run({"pretrain-ssn"}).code == kExitUsage);  // no corpus
  CHECK(run({"pretrain-ssn", "--corpus", "/nonexistent/corpus.jsonl"}).code == kExitUsage);
  CHECK(run({"synth", "--strength", "1.5"}).code == kExitUsage);
  CHECK(run({"synth", "--config", "/nonexistent/config.json"}).code == kExitUsage);
  r = run({"--help"});
  CHECK(r.code == kExitOk);
  CHECK(r.out.find("pretrain-ssn") != std::string::npos);
}

TEST_CASE("synth is byte-identical for one seed and records the seed") {
  TempDir dir;
  for (const char* name : {"one", "two"}) {
    REQUIRE(run({"synth", "--strength", "0.8", "--seed", "7", "--dialogues", "50", "--out", dir / name}).code ==
            kExitOk);
  }
  CHECK(slurp(dir / "one/corpus.jsonl") == slurp(dir / "two/corpus.jsonl"));
  REQUIRE(run({"synth", "--strength", "0.8", "--seed", "8", "--dialogues", "50", "--out", dir / "three"}).code ==
          kExitOk);
  CHECK(slurp(dir / "one/corpus.jsonl") != slurp(dir / "three/corpus.jsonl"));

  const auto m = RunManifest::from_json(nlohmann::json::parse(slurp(dir / "one/manifest.json")));
  CHECK(m.command == "synth");
  CHECK(m.seed == 7);
  CHECK(m.config.at("seed") == 7);
  CHECK(m.config.at("synthetic").at("strength") == 0.8);
  CHECK(m.tool_version == kToolVersion);
  CHECK(m.artifacts.count("corpus.jsonl") == 1);
  CHECK(m.verify(dir.path / "one").empty());
  CHECK(load_corpus(dir / "one/corpus.jsonl").size() == 50);
}

TEST_CASE("flags override the config file") {
  TempDir dir;
  spit(dir / "c.json", R"({"seed": 5, "synthetic": {"dialogues": 12, "strength": 0.5}})");
  REQUIRE(run({"synth", "--config", dir / "c.json", "--out", dir / "a"}).code == kExitOk);
  REQUIRE(run({"synth", "--config", dir / "c.json", "--seed", "9", "--dialogues", "20", "--out", dir / "b"}).code ==
          kExitOk);
  const auto a = RunManifest::from_json(nlohmann::json::parse(slurp(dir / "a/manifest.json")));
  const auto b = RunManifest::from_json(nlohmann::json::parse(slurp(dir / "b/manifest.json")));
  CHECK(a.seed == 5);
  CHECK(b.seed == 9);
  CHECK(load_corpus(dir / "a/corpus.jsonl").size() == 12);
  CHECK(load_corpus(dir / "b/corpus.jsonl").size() == 20);
  CHECK(b.config.at("synthetic").at("strength") == 0.5);
  // Global flags may also come before the subcommand.
  REQUIRE(run({"--seed", "5", "--out", dir / "c", "synth", "--dialogues", "12", "--strength", "0.5"}).code ==
          kExitOk);
  CHECK(slurp(dir / "a/corpus.jsonl") == slurp(dir / "c/corpus.jsonl"));
}

TEST_CASE("ingest and sample-triples") {
  TempDir dir;
  REQUIRE(run({"ingest", "--corpus", std::string(ODL_GOLDEN_DIR) + "/corpus_small.jsonl", "--out", dir / "ing"})
              .code == kExitOk);
  const auto vocab = Vocabulary::load(dir / "ing/vocab.json");
  CHECK(vocab.contains("hello"));
  CHECK(load_corpus(dir / "ing/corpus.jsonl").size() == 2);

  REQUIRE(run({"synth", "--dialogues", "30", "--out", dir / "s"}).code == kExitOk);
  REQUIRE(run({"sample-triples", "--corpus", dir / "s/corpus.jsonl", "--count", "40", "--out", dir / "t"}).code ==
          kExitOk);
  std::istringstream in(slurp(dir / "t/triples.jsonl"));
  std::string line;
  int rows = 0, misordered = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    const auto p = j.at("presentation").get<std::array<int, 3>>();
    const int label = j.at("label").get<int>();
    CHECK(static_cast<int>(classify_triple(p)) == label);
    CHECK((p[0] == j.at("t") || p[1] == j.at("t") || p[2] == j.at("t")));
    CHECK(j.at("dialogue").get<std::size_t>() < 30);
    misordered += label;
    ++rows;
  }
  CHECK(rows == 40);
  CHECK(misordered == 20);
}

TEST_CASE("pretrain-ssn is deterministic and its checkpoint round-trips") {
  TempDir dir;
  const auto config = tiny_config(dir);
  REQUIRE(run({"synth", "--config", config, "--out", dir / "s"}).code == kExitOk);
  for (const char* name : {"p1", "p2"}) {
    const auto r = run({"pretrain-ssn", "--config", config, "--corpus", dir / "s/corpus.jsonl", "--steps", "100",
                        "--seed", "11", "--out", dir / name});
    REQUIRE(r.code == kExitOk);
  }
  const auto log = slurp(dir / "p1/ssn_loss.jsonl");
  CHECK(std::count(log.begin(), log.end(), '\n') == 100);
  CHECK(log == slurp(dir / "p2/ssn_loss.jsonl"));
  CHECK(slurp(dir / "p1/ssn.ckpt") == slurp(dir / "p2/ssn.ckpt"));
  const auto m = RunManifest::from_json(nlohmann::json::parse(slurp(dir / "p1/manifest.json")));
  CHECK(m.verify(dir.path / "p1").empty());
  CHECK(m.artifacts.size() == 3);

  // save -> load -> save
  const auto model = load_ssn(dir / "p1/ssn.ckpt");
  const auto ck = nn::load_checkpoint(dir / "p1/ssn.ckpt");
  CHECK(ck.config.at("seed") == 11);
  nn::save_checkpoint(dir / "again.ckpt", model.params(), ck.config);
  CHECK(slurp(dir / "again.ckpt") == slurp(dir / "p1/ssn.ckpt"));

  // truncated file: load error, exit 2 from a consuming command
  const auto bytes = slurp(dir / "p1/ssn.ckpt");
  spit(dir / "cut.ckpt", bytes.substr(0, bytes.size() / 2));
  CHECK_THROWS_AS(load_ssn(dir / "cut.ckpt"), ParseError);
  REQUIRE(run({"pretrain-gen", "--config", config, "--corpus", dir / "s/corpus.jsonl", "--vocab",
               dir / "p1/vocab.json", "--steps", "2", "--out", dir / "g"})
              .code == kExitOk);
  const auto r = run({"eval", "--corpus", dir / "s/corpus.jsonl", "--vocab", dir / "p1/vocab.json", "--ssn",
                      dir / "cut.ckpt", "--gen", dir / "g/generator.ckpt", "--out", dir / "e"});
  CHECK(r.code == kExitFailure);
  CHECK(!fs::exists(dir / "e/manifest.json"));

  // pair-mode checkpoint refused in utterance-only mode
  CHECK_THROWS_AS(load_ssn(dir / "p1/ssn.ckpt", EncodingMode::kUtteranceOnly), ConfigError);
}

TEST_CASE("generation, evaluation, adversarial and filtering commands") {
  TempDir dir;
  const auto config = tiny_config(dir);
  const auto corpus = dir / "s/corpus.jsonl";
  REQUIRE(run({"synth", "--config", config, "--out", dir / "s"}).code == kExitOk);
  REQUIRE(run({"pretrain-ssn", "--config", config, "--corpus", corpus, "--steps", "5", "--out", dir / "p"}).code ==
          kExitOk);
  const auto vocab = dir / "p/vocab.json";
  REQUIRE(run({"pretrain-gen", "--config", config, "--corpus", corpus, "--vocab", vocab, "--steps", "5", "--out",
               dir / "g"})
              .code == kExitOk);
  CHECK(slurp(dir / "g/vocab.json") == slurp(vocab));

  SUBCASE("train-adversarial") {
    REQUIRE(run({"train-adversarial", "--config", config, "--corpus", corpus, "--vocab", vocab, "--ssn",
                 dir / "p/ssn.ckpt", "--gen", dir / "g/generator.ckpt", "--rounds", "2", "--batch", "2", "--out",
                 dir / "a"})
                .code == kExitOk);
    const auto log = slurp(dir / "a/adversarial_log.jsonl");
    CHECK(std::count(log.begin(), log.end(), '\n') == 2);
    load_ssn(dir / "a/ssn_adv.ckpt");
    load_generator(dir / "a/generator_adv.ckpt");
    CHECK(run({"train-adversarial", "--corpus", corpus, "--vocab", vocab, "--ssn", dir / "p/ssn.ckpt"}).code ==
          kExitUsage);
  }
  SUBCASE("generate") {
    spit(dir / "h.jsonl", "{\"query\": \"w1 w2\"}\n\n{\"previous\": \"w3\", \"query\": \"w4 w5\"}\n");
    REQUIRE(run({"generate", "--vocab", vocab, "--gen", dir / "g/generator.ckpt", "--input", dir / "h.jsonl",
                 "--out", dir / "o"})
                .code == kExitOk);
    std::istringstream in(slurp(dir / "o/responses.jsonl"));
    std::string line;
    int rows = 0;
    while (std::getline(in, line)) {
      const auto j = nlohmann::json::parse(line);
      CHECK(!j.at("response").get<std::string>().empty());
      ++rows;
    }
    CHECK(rows == 2);
    spit(dir / "bad.jsonl", "{\"previous\": \"w3\"}\n");
    CHECK(run({"generate", "--vocab", vocab, "--gen", dir / "g/generator.ckpt", "--input", dir / "bad.jsonl",
               "--out", dir / "o2"})
              .code == kExitFailure);
  }
  SUBCASE("eval writes matching CSV and JSON") {
    std::vector<std::string> args{"eval", "--corpus", corpus, "--vocab", vocab, "--ssn", dir / "p/ssn.ckpt",
                                  "--gen", dir / "g/generator.ckpt", "--contexts", "10", "--n", "2", "--seed", "4"};
    auto a = args, b = args;
    a.insert(a.end(), {"--out", dir / "e1"});
    b.insert(b.end(), {"--out", dir / "e2"});
    REQUIRE(run(a).code == kExitOk);
    REQUIRE(run(b).code == kExitOk);
    const auto csv = slurp(dir / "e1/metrics.csv");
    CHECK(csv == slurp(dir / "e2/metrics.csv"));
    CHECK(csv.rfind("metric,strategy,mean,stdev,runs,n\n", 0) == 0);
    const auto j = nlohmann::json::parse(slurp(dir / "e1/metrics.json"));
    CHECK(j.at("seed") == 4);
    REQUIRE(j.at("metrics").size() == 3);
    CHECK(j.at("metrics")[0].at("metric") == "adver-suc");
    CHECK(j.at("metrics")[0].at("n") == 20);
  }
  SUBCASE("filter-experience from a generator and from a file") {
    REQUIRE(run({"filter-experience", "--corpus", corpus, "--vocab", vocab, "--ssn", dir / "p/ssn.ckpt", "--gen",
                 dir / "g/generator.ckpt", "--contexts", "6", "--batch", "4", "--out", dir / "f"})
                .code == kExitOk);
    const auto summary = nlohmann::json::parse(slurp(dir / "f/filter_summary.json"));
    CHECK(summary.at("items") == 6);
    spit(dir / "x.jsonl", "{\"dialogue\": 0, \"t\": 1, \"utterance\": \"w1 w2\"}\n{\"dialogue\": 1, \"utterance\": \"w3\"}\n");
    REQUIRE(run({"filter-experience", "--corpus", corpus, "--vocab", vocab, "--ssn", dir / "p/ssn.ckpt", "--input",
                 dir / "x.jsonl", "--low", "0", "--high", "0", "--out", dir / "f2"})
                .code == kExitOk);
    std::istringstream in(slurp(dir / "f2/experiences.jsonl"));
    std::string line;
    int accepted = 0;
    while (std::getline(in, line)) accepted += nlohmann::json::parse(line).at("accepted").get<bool>();
    CHECK(accepted == 2);
    CHECK(run({"filter-experience", "--corpus", corpus, "--vocab", vocab, "--ssn", dir / "p/ssn.ckpt", "--out",
               dir / "f3"})
              .code == kExitFailure);
  }
}

TEST_CASE("eval-intrinsic writes one row per strategy, identically per seed") {
  TempDir dir;
  const auto config = tiny_config(dir);
  REQUIRE(run({"synth", "--config", config, "--out", dir / "s"}).code == kExitOk);
  std::vector<std::string> args{"eval-intrinsic", "--config", config, "--corpus", dir / "s/corpus.jsonl",
                                "--strategy", "one-each", "--strategy", "none", "--runs", "2", "--train-n", "40",
                                "--test-n", "20", "--steps", "3", "--threads", "2"};
  auto a = args, b = args;
  a.insert(a.end(), {"--out", dir / "i1"});
  b.insert(b.end(), {"--out", dir / "i2"});
  REQUIRE(run(a).code == kExitOk);
  REQUIRE(run(b).code == kExitOk);
  const auto csv = slurp(dir / "i1/intrinsic.csv");
  CHECK(csv == slurp(dir / "i2/intrinsic.csv"));
  std::istringstream in(csv);
  std::string header, one, two, extra;
  std::getline(in, header);
  std::getline(in, one);
  std::getline(in, two);
  CHECK(header == "metric,strategy,mean,stdev,runs,n");
  CHECK(one.rfind("accuracy,one-each,", 0) == 0);
  CHECK(two.rfind("accuracy,no-refs,", 0) == 0);
  CHECK(one.substr(one.size() - 5) == ",2,20");
  CHECK(!std::getline(in, extra));
}
