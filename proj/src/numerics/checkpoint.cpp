#include "odl/numerics/checkpoint.hpp"

#include <fstream>
#include <sstream>

namespace odl::nn {

using nlohmann::json;

std::string checkpoint_to_string(const ParameterSet<float>& params, const json& config) {
  json doc;
  doc["format"] = kCheckpointFormat;
  doc["config"] = config;
  json ps = json::object();
  for (const auto& p : params) {
    json entry;
    entry["shape"] = p->value.shape;
    json data = json::array();
    for (float v : p->value.data) data.push_back(static_cast<double>(v));
    entry["data"] = std::move(data);
    ps[p->name] = std::move(entry);
  }
  doc["params"] = std::move(ps);
  return doc.dump() + "\n";
}

Checkpoint checkpoint_from_string(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError(std::string("checkpoint: ") + e.what());
  }
  if (!doc.is_object() || !doc.contains("format") || !doc.contains("params")) {
    throw ParseError("checkpoint: missing 'format' or 'params'");
  }
  if (doc["format"] != kCheckpointFormat) {
    throw ParseError("checkpoint: unsupported format " + doc["format"].dump());
  }
  Checkpoint ck;
  if (doc.contains("config")) ck.config = doc["config"];
  try {
    for (const auto& [name, entry] : doc["params"].items()) {
      Shape shape = entry.at("shape").get<Shape>();
      const auto& data = entry.at("data");
      if (data.size() != shape_size(shape)) {
        throw ParseError("checkpoint: parameter '" + name + "' has " + std::to_string(data.size()) +
                         " values for shape " + shape_str(shape));
      }
      auto& p = ck.params.add(name, shape);
      for (std::size_t i = 0; i < data.size(); ++i) p.value.data[i] = static_cast<float>(data[i].get<double>());
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("checkpoint: ") + e.what());
  }
  return ck;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out << contents;
    if (!out) throw Error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void save_checkpoint(const std::filesystem::path& path, const ParameterSet<float>& params,
                     const json& config) {
  write_file_atomic(path, checkpoint_to_string(params, config));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return checkpoint_from_string(read_file(path));
}

void assign_parameters(ParameterSet<float>& target, const ParameterSet<float>& source) {
  if (source.count() != target.count()) {
    throw ConfigError("checkpoint has " + std::to_string(source.count()) + " parameters, model expects " +
                      std::to_string(target.count()));
  }
  for (const auto& p : target) {
    if (!source.contains(p->name)) throw ConfigError("checkpoint lacks parameter '" + p->name + "'");
    const auto& q = source.get(p->name);
    if (q.value.shape != p->value.shape) {
      throw ConfigError("parameter '" + p->name + "' has shape " + shape_str(q.value.shape) +
                        " in checkpoint, model expects " + shape_str(p->value.shape));
    }
  }
  for (auto& p : target) p->value.data = source.get(p->name).value.data;
}

}  // namespace odl::nn
