#pragma once

#include <filesystem>
#include <string>

#include "json.hpp"

#include "odl/numerics/tensor.hpp"

namespace odl::nn {

inline constexpr int kCheckpointFormat = 1;

// On-disk layout:
//   {"format": 1, "config": {...}, "params": {"<name>": {"shape": [...], "data": [...]}}}
// Values are written as the shortest decimal of their exact binary64 widening,
// so a float round trip is value-exact.
struct Checkpoint {
  nlohmann::json config = nlohmann::json::object();
  ParameterSet<float> params;
};

std::string checkpoint_to_string(const ParameterSet<float>& params, const nlohmann::json& config);
Checkpoint checkpoint_from_string(const std::string& text);

// Writes through a temporary file and renames it into place.
void save_checkpoint(const std::filesystem::path& path, const ParameterSet<float>& params,
                     const nlohmann::json& config);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Copies checkpoint values into an existing parameter set. Names and shapes
// must match exactly; on error `target` is left untouched.
void assign_parameters(ParameterSet<float>& target, const ParameterSet<float>& source);

void write_file_atomic(const std::filesystem::path& path, const std::string& contents);
std::string read_file(const std::filesystem::path& path);

}  // namespace odl::nn
