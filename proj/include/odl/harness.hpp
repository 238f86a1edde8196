#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "odl/adversarial.hpp"
#include "odl/evaluation.hpp"
#include "odl/generator.hpp"
#include "odl/ssn.hpp"
#include "odl/synthetic.hpp"

namespace odl {

inline constexpr const char* kToolVersion = "0.1.0";

struct GenPretrainConfig {
  int steps = 300;
  int batch = 16;
};

// Everything a subcommand may read. Model vocab sizes are left at 0 and filled
// in from the vocabulary at run time.
struct RunConfig {
  std::vector<std::filesystem::path> corpus;
  std::optional<std::filesystem::path> vocab;
  std::optional<std::filesystem::path> ssn_checkpoint;
  std::optional<std::filesystem::path> gen_checkpoint;
  std::optional<std::filesystem::path> input;  // histories / experiences JSONL

  SSNConfig ssn;
  GenConfig gen;
  AdvConfig adv;
  FilterConfig filter;
  SamplerConfig sampler{.m = 2, .n_target = 2};
  ReferenceStrategy strategy = ReferenceStrategy::kOneEach;
  PretrainConfig pretrain;
  GenPretrainConfig gen_pretrain;
  nn::OptimizerConfig ssn_optimizer;
  nn::OptimizerConfig gen_optimizer;
  SyntheticSpec synth;
  IntrinsicConfig intrinsic;

  std::uint64_t seed = 0;
  std::filesystem::path out = "odl-out";

  RunConfig();

  // Throws ConfigError naming the first missing path or bad value.
  void validate() const;
  nlohmann::json to_json() const;
  // Keys absent from `j` keep their current values; unknown keys are errors.
  void merge_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);
};

std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::filesystem::path& path);

// UTC, second resolution, e.g. 2024-01-31T12:00:00Z.
std::string utc_timestamp();

struct ArtifactRecord {
  std::string sha256;
  std::uintmax_t bytes = 0;
};

struct RunManifest {
  std::string command;
  nlohmann::json config;
  std::uint64_t seed = 0;
  std::string started;
  std::string finished;
  std::string tool_version = kToolVersion;
  std::map<std::string, ArtifactRecord> artifacts;  // keyed by file name in the out dir

  // Hashes the file as it is on disk now.
  void add_artifact(const std::filesystem::path& path);
  nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);
  // Atomic: temporary file then rename.
  void write(const std::filesystem::path& path) const;
  // Names of artifacts whose current checksum differs (or that are missing).
  std::vector<std::string> verify(const std::filesystem::path& dir) const;
};

// Exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitFailure = 2;

int cmd_dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int cmd_dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace odl
