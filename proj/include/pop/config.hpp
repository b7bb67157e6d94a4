#pragma once

#include <cstddef>
#include <filesystem>
#include <string>

#include <json.hpp>

namespace pop {

// Architecture hyperparameters of a Llama-style decoder-only transformer.
struct ModelConfig {
  std::string name = "custom";
  std::size_t num_layers = 0;
  std::size_t hidden = 0;
  std::size_t num_heads = 0;
  std::size_t num_kv_heads = 0;
  std::size_t head_dim = 0;
  std::size_t ffn_dim = 0;
  std::size_t vocab = 259;
  std::size_t max_seq = 0;
  double rope_theta = 10000.0;
  double norm_eps = 1e-6;

  std::size_t kv_dim() const { return num_kv_heads * head_dim; }

  // Throws ConfigError naming the first violated constraint.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

nlohmann::json to_json(const ModelConfig& config);
ModelConfig config_from_json(const nlohmann::json& j);

// Loads a config from `path`; a bare file name that does not exist relative
// to the working directory is also looked up among the bundled configs.
ModelConfig load_config(const std::filesystem::path& path);
std::filesystem::path resolve_config_path(const std::filesystem::path& path);

}  // namespace pop
