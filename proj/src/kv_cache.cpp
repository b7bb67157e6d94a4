#include "pop/kv_cache.hpp"

#include "pop/config.hpp"
#include "pop/errors.hpp"

namespace pop {

KVCache::KVCache(std::size_t num_layers, std::size_t kv_heads, std::size_t head_dim)
    : kv_heads_(kv_heads), head_dim_(head_dim), layers_(num_layers) {}

KVCache::KVCache(const ModelConfig& config)
    : KVCache(config.num_layers, config.num_kv_heads, config.head_dim) {}

void KVCache::append(std::size_t layer, const Tensor& k, const Tensor& v, std::span<const std::size_t> positions) {
  Layer& entry = layers_.at(layer);
  const std::size_t width = row_width();
  if (k.shape() != v.shape() || k.numel() != positions.size() * width) {
    throw DimensionError("kv cache append: k " + shape_str(k.shape()) + ", v " + shape_str(v.shape()) +
                         " for " + std::to_string(positions.size()) + " positions");
  }
  std::size_t last = entry.positions.empty() ? 0 : entry.positions.back();
  bool have_last = !entry.positions.empty();
  for (std::size_t p : positions) {
    if (have_last && p <= last) {
      throw ContractError("kv cache layer " + std::to_string(layer) + ": position " + std::to_string(p) +
                          " does not follow cached position " + std::to_string(last));
    }
    last = p;
    have_last = true;
  }
  entry.keys.insert(entry.keys.end(), k.data().begin(), k.data().end());
  entry.values.insert(entry.values.end(), v.data().begin(), v.data().end());
  entry.positions.insert(entry.positions.end(), positions.begin(), positions.end());
}

Tensor KVCache::keys(std::size_t layer) const {
  const Layer& entry = layers_.at(layer);
  if (entry.positions.empty()) throw ContractError("kv cache layer " + std::to_string(layer) + " is empty");
  return Tensor({entry.positions.size(), kv_heads_, head_dim_}, entry.keys);
}

Tensor KVCache::values(std::size_t layer) const {
  const Layer& entry = layers_.at(layer);
  if (entry.positions.empty()) throw ContractError("kv cache layer " + std::to_string(layer) + " is empty");
  return Tensor({entry.positions.size(), kv_heads_, head_dim_}, entry.values);
}

}  // namespace pop
