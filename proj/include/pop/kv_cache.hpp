#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "pop/tensor.hpp"

namespace pop {

struct ModelConfig;

// Per-layer key/value store with absolute positions. Layers normally share
// one length; when KV generation is skipped for some layers they can be
// shorter, but positions stay absolute and strictly increasing per layer.
// A cache belongs to a single inference session.
class KVCache {
 public:
  KVCache(std::size_t num_layers, std::size_t kv_heads, std::size_t head_dim);
  explicit KVCache(const ModelConfig& config);

  std::size_t num_layers() const { return layers_.size(); }
  std::size_t length(std::size_t layer) const { return layers_.at(layer).positions.size(); }
  std::span<const std::size_t> positions(std::size_t layer) const { return layers_.at(layer).positions; }

  // Appends rows of k, v ([t x kv_heads x head_dim]). Throws ContractError if
  // a new position does not come after every cached one.
  void append(std::size_t layer, const Tensor& k, const Tensor& v, std::span<const std::size_t> positions);

  // Copies of the cached rows as [length x kv_heads x head_dim].
  Tensor keys(std::size_t layer) const;
  Tensor values(std::size_t layer) const;

  std::span<const double> key_data(std::size_t layer) const { return layers_.at(layer).keys; }
  std::span<const double> value_data(std::size_t layer) const { return layers_.at(layer).values; }
  std::size_t row_width() const { return kv_heads_ * head_dim_; }

 private:
  struct Layer {
    Buffer keys;
    Buffer values;
    std::vector<std::size_t> positions;
  };

  std::size_t kv_heads_;
  std::size_t head_dim_;
  std::vector<Layer> layers_;
};

}  // namespace pop
