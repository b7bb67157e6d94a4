#include "pop/config.hpp"

#include <fstream>

#include "pop/errors.hpp"

#ifndef POP_CONFIG_DIR
#define POP_CONFIG_DIR "configs"
#endif

namespace pop {

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* what) {
    if (v == 0) throw ConfigError(std::string(what) + " must be positive");
  };
  positive(num_layers, "num_layers");
  positive(hidden, "hidden");
  positive(num_heads, "num_heads");
  positive(num_kv_heads, "num_kv_heads");
  positive(head_dim, "head_dim");
  positive(ffn_dim, "ffn_dim");
  positive(vocab, "vocab");
  positive(max_seq, "max_seq");
  if (num_heads % num_kv_heads != 0) throw ConfigError("num_kv_heads must divide num_heads");
  if (num_heads * head_dim != hidden) throw ConfigError("num_heads * head_dim must equal hidden");
  if (head_dim % 2 != 0) throw ConfigError("head_dim must be even");
  if (!(rope_theta > 0.0)) throw ConfigError("rope_theta must be positive");
  if (!(norm_eps >= 0.0)) throw ConfigError("norm_eps must be nonnegative");
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"name", c.name},         {"num_layers", c.num_layers}, {"hidden", c.hidden},
          {"num_heads", c.num_heads}, {"num_kv_heads", c.num_kv_heads}, {"head_dim", c.head_dim},
          {"ffn_dim", c.ffn_dim},     {"vocab", c.vocab},           {"max_seq", c.max_seq},
          {"rope_theta", c.rope_theta}, {"norm_eps", c.norm_eps}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.name = j.value("name", c.name);
    c.num_layers = j.at("num_layers").get<std::size_t>();
    c.hidden = j.at("hidden").get<std::size_t>();
    c.num_heads = j.at("num_heads").get<std::size_t>();
    c.num_kv_heads = j.at("num_kv_heads").get<std::size_t>();
    c.head_dim = j.at("head_dim").get<std::size_t>();
    c.ffn_dim = j.at("ffn_dim").get<std::size_t>();
    c.vocab = j.value("vocab", c.vocab);
    c.max_seq = j.at("max_seq").get<std::size_t>();
    c.rope_theta = j.value("rope_theta", c.rope_theta);
    c.norm_eps = j.value("norm_eps", c.norm_eps);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed model config: ") + e.what());
  }
  return c;
}

std::filesystem::path resolve_config_path(const std::filesystem::path& path) {
  if (std::filesystem::exists(path)) return path;
  auto bundled = std::filesystem::path(POP_CONFIG_DIR) / path.filename();
  if (std::filesystem::exists(bundled)) return bundled;
  throw FileError("config file not found: " + path.string());
}

ModelConfig load_config(const std::filesystem::path& path) {
  auto resolved = resolve_config_path(path);
  std::ifstream in(resolved);
  if (!in) throw FileError("cannot open config " + resolved.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("config " + resolved.string() + " is not valid JSON: " + e.what());
  }
  auto c = config_from_json(j);
  c.validate();
  return c;
}

}  // namespace pop
