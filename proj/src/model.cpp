#include "pop/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <numeric>

#include "pop/errors.hpp"
#include "pop/ops.hpp"

namespace pop {

namespace {

template <class LayerT, class Fn>
void for_each_layer_tensor(LayerT& layer, Fn&& fn) {
  fn("attn_norm", layer.attn_norm);
  fn("wq", layer.wq);
  fn("wk", layer.wk);
  fn("wv", layer.wv);
  fn("wo", layer.wo);
  fn("ffn_norm", layer.ffn_norm);
  fn("w_gate", layer.w_gate);
  fn("w_up", layer.w_up);
  fn("w_down", layer.w_down);
}

Tensor random_normal(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Buffer data(shape_numel(shape));
  for (auto& v : data) v = dist(rng);
  return Tensor(std::move(shape), std::move(data));
}

std::vector<std::size_t> iota_positions(std::size_t begin, std::size_t count) {
  std::vector<std::size_t> pos(count);
  std::iota(pos.begin(), pos.end(), begin);
  return pos;
}

}  // namespace

std::vector<std::pair<std::string, const Tensor*>> ModelWeights::named() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  out.emplace_back("embedding", &embedding);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    for_each_layer_tensor(layers[l], [&](const char* name, const Tensor& t) {
      out.emplace_back("layers." + std::to_string(l) + "." + name, &t);
    });
  }
  out.emplace_back("final_norm", &final_norm);
  out.emplace_back("head", &head);
  return out;
}

std::vector<std::pair<std::string, Tensor*>> ModelWeights::named_mutable() {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (auto& [name, t] : named()) out.emplace_back(name, const_cast<Tensor*>(t));
  return out;
}

Shape expected_shape(const ModelConfig& c, const std::string& name) {
  const std::size_t d = c.hidden;
  if (name == "embedding") return {c.vocab, d};
  if (name == "final_norm") return {d};
  if (name == "head") return {d, c.vocab};
  auto dot = name.rfind('.');
  if (name.rfind("layers.", 0) == 0 && dot != std::string::npos) {
    const std::string leaf = name.substr(dot + 1);
    if (leaf == "attn_norm" || leaf == "ffn_norm") return {d};
    if (leaf == "wq" || leaf == "wo") return {d, d};
    if (leaf == "wk" || leaf == "wv") return {d, c.kv_dim()};
    if (leaf == "w_gate" || leaf == "w_up") return {d, c.ffn_dim};
    if (leaf == "w_down") return {c.ffn_dim, d};
  }
  throw ConfigError("unknown tensor name " + name);
}

void ModelWeights::validate() const {
  config.validate();
  if (layers.size() != config.num_layers) {
    throw ConfigError("weights hold " + std::to_string(layers.size()) + " layers, config says " +
                      std::to_string(config.num_layers));
  }
  for (const auto& [name, t] : named()) {
    auto want = expected_shape(config, name);
    if (!t->defined() || t->shape() != want) {
      throw ConfigError("tensor " + name + " has shape " + shape_str(t->shape()) + ", expected " + shape_str(want));
    }
  }
}

ModelWeights init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  const double d = static_cast<double>(config.hidden);
  const double ffn = static_cast<double>(config.ffn_dim);
  const double residual = 1.0 / std::sqrt(2.0 * static_cast<double>(config.num_layers));

  ModelWeights w;
  w.config = config;
  w.embedding = random_normal({config.vocab, config.hidden}, 1.0, rng);
  w.layers.resize(config.num_layers);
  for (auto& layer : w.layers) {
    layer.attn_norm = Tensor::full({config.hidden}, 1.0);
    layer.wq = random_normal({config.hidden, config.hidden}, 1.0 / std::sqrt(d), rng);
    layer.wk = random_normal({config.hidden, config.kv_dim()}, 1.0 / std::sqrt(d), rng);
    layer.wv = random_normal({config.hidden, config.kv_dim()}, 1.0 / std::sqrt(d), rng);
    layer.wo = random_normal({config.hidden, config.hidden}, residual / std::sqrt(d), rng);
    layer.ffn_norm = Tensor::full({config.hidden}, 1.0);
    layer.w_gate = random_normal({config.hidden, config.ffn_dim}, 1.0 / std::sqrt(d), rng);
    layer.w_up = random_normal({config.hidden, config.ffn_dim}, 1.0 / std::sqrt(d), rng);
    layer.w_down = random_normal({config.ffn_dim, config.hidden}, residual / std::sqrt(ffn), rng);
  }
  w.final_norm = Tensor::full({config.hidden}, 1.0);
  w.head = random_normal({config.hidden, config.vocab}, kHeadInitGain / std::sqrt(d), rng);
  return w;
}

std::string model_hash(const ModelWeights& weights) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](const void* data, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  };
  const std::string cfg = to_json(weights.config).dump();
  feed(cfg.data(), cfg.size());
  for (const auto& [name, t] : weights.named()) {
    feed(name.data(), name.size());
    feed(t->data().data(), t->numel() * sizeof(double));
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

namespace {

// Keys and values from the already normalized layer input.
KVPair project_kv(const ModelConfig& c, const LayerWeights& lw, const Tensor& normed,
                  std::span<const std::size_t> positions) {
  const std::size_t t = normed.dim(0);
  Tensor k = rope_apply(reshape(matmul(normed, lw.wk), {t, c.num_kv_heads, c.head_dim}), positions, c.rope_theta);
  Tensor v = reshape(matmul(normed, lw.wv), {t, c.num_kv_heads, c.head_dim});
  return {std::move(k), std::move(v)};
}

}  // namespace

KVPair kv_project(const ModelWeights& w, std::size_t layer, const Tensor& x,
                  std::span<const std::size_t> positions) {
  const auto& c = w.config;
  if (layer >= w.layers.size()) throw ContractError("layer index " + std::to_string(layer) + " out of range");
  if (x.rank() != 2 || x.dim(1) != c.hidden || positions.size() != x.dim(0)) {
    throw DimensionError("kv_project: expected [t x " + std::to_string(c.hidden) + "] with t positions, got " +
                         shape_str(x.shape()));
  }
  const auto& lw = w.layers[layer];
  return project_kv(c, lw, rmsnorm(x, lw.attn_norm, c.norm_eps), positions);
}

Tensor layer_forward(const ModelWeights& w, std::size_t layer, const Tensor& x, KVCache* cache,
                     std::span<const std::size_t> positions, const LayerGate& gate, LayerProbe* probe) {
  const auto& c = w.config;
  if (layer >= w.layers.size()) throw ContractError("layer index " + std::to_string(layer) + " out of range");
  if (x.rank() != 2 || x.dim(1) != c.hidden) {
    throw DimensionError("layer_forward: expected [t x " + std::to_string(c.hidden) + "], got " + shape_str(x.shape()));
  }
  const std::size_t t = x.dim(0);
  if (positions.size() != t) throw DimensionError("layer_forward: position count does not match rows");
  const auto& lw = w.layers[layer];

  // The attention input norm is shared by the query and key/value paths.
  Tensor h = rmsnorm(x, lw.attn_norm, c.norm_eps);
  Tensor q = rope_apply(reshape(matmul(h, lw.wq), {t, c.num_heads, c.head_dim}), positions, c.rope_theta);
  auto [k, v] = project_kv(c, lw, h, positions);

  Tensor attn;
  if (cache) {
    if (x.tracked()) throw ContractError("cached layer_forward does not support tracked inputs");
    cache->append(layer, k, v, positions);
    attn = attention(q, cache->keys(layer), cache->values(layer), positions, cache->positions(layer));
  } else {
    attn = attention(q, k, v, positions, positions);
  }
  Tensor attn_out = matmul(reshape(attn, {t, c.hidden}), lw.wo);
  Tensor y = add(x, gate_rows(attn_out, gate.prefill, gate.decode, gate.split));

  Tensor h2 = rmsnorm(y, lw.ffn_norm, c.norm_eps);
  Tensor ffn = matmul(mul(silu(matmul(h2, lw.w_gate)), matmul(h2, lw.w_up)), lw.w_down);
  Tensor out = add(y, gate_rows(ffn, gate.prefill, gate.decode, gate.split));

  if (probe) {
    probe->input = x;
    probe->kv = {k, v};
    probe->attn_out = attn_out;
    probe->output = out;
  }
  return out;
}

Tensor layer_forward(const ModelWeights& w, std::size_t layer, const Tensor& x, KVCache* cache,
                     std::span<const std::size_t> positions, double gate, LayerProbe* probe) {
  return layer_forward(w, layer, x, cache, positions, LayerGate::uniform(gate), probe);
}

Tensor embed(const ModelWeights& w, std::span<const TokenId> tokens) { return embedding(w.embedding, tokens); }

Tensor output_logits(const ModelWeights& w, const Tensor& hidden) {
  return matmul(rmsnorm(hidden, w.final_norm, w.config.norm_eps), w.head);
}

GateSchedule GateSchedule::ones(std::size_t num_layers, std::size_t prompt_len) {
  GateSchedule g;
  g.prefill.assign(num_layers, 1.0);
  g.decode.assign(num_layers, 1.0);
  g.prompt_len = prompt_len;
  return g;
}

TeacherForcedOutput forward_teacher_forced(const ModelWeights& w, std::span<const TokenId> tokens,
                                           const GateSchedule& gates, GradientTape* tape) {
  const auto& c = w.config;
  const std::size_t total = tokens.size();
  if (total == 0) throw ContractError("forward_teacher_forced: empty token sequence");
  if (total > c.max_seq) {
    throw CapacityError("sequence of " + std::to_string(total) + " tokens exceeds max_seq " + std::to_string(c.max_seq));
  }
  if (gates.prompt_len < 1 || gates.prompt_len > total) {
    throw ContractError("prompt length " + std::to_string(gates.prompt_len) + " outside [1, " +
                        std::to_string(total) + "]");
  }
  if (gates.prefill.size() != c.num_layers || gates.decode.size() != c.num_layers) {
    throw ContractError("gate schedule must hold one gate per layer and stage");
  }
  if (gates.tracked && !tape) throw ContractError("tracked gate schedule needs a tape");
  if (gates.shared && gates.prefill != gates.decode) {
    throw ContractError("shared gate schedule needs equal prefill and decode values");
  }

  TeacherForcedOutput out;
  std::vector<LayerGate> layer_gates(c.num_layers);
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    LayerGate& g = layer_gates[l];
    g.split = gates.split();
    g.prefill = Tensor::scalar(gates.prefill[l]);
    g.decode = Tensor::scalar(gates.decode[l]);
    if (gates.tracked) {
      g.prefill = tape->leaf(g.prefill);
      out.prefill_leaves.push_back(tape->leaf_id(g.prefill));
      if (gates.shared) {
        g.decode = g.prefill;
      } else {
        g.decode = tape->leaf(g.decode);
      }
      out.decode_leaves.push_back(tape->leaf_id(g.decode));
    }
  }

  const auto positions = iota_positions(0, total);
  Tensor x = embed(w, tokens);
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    x = layer_forward(w, l, x, nullptr, positions, layer_gates[l]);
  }
  out.logits = output_logits(w, x);
  return out;
}

Tensor forward_logits(const ModelWeights& w, std::span<const TokenId> tokens) {
  if (tokens.size() > w.config.max_seq) throw CapacityError("sequence exceeds max_seq");
  const auto positions = iota_positions(0, tokens.size());
  Tensor x = embed(w, tokens);
  for (std::size_t l = 0; l < w.config.num_layers; ++l) x = layer_forward(w, l, x, nullptr, positions);
  return output_logits(w, x);
}

TokenId argmax_token(std::span<const double> logits) {
  // std::max_element returns the first maximum, i.e. the lowest id on ties.
  return static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

TokenSampler::TokenSampler(double temperature, std::uint64_t seed) : temperature_(temperature), rng_(seed) {
  if (!(temperature >= 0.0)) throw ConfigError("temperature must be nonnegative");
}

TokenId TokenSampler::next(std::span<const double> logits) {
  if (temperature_ == 0.0) return argmax_token(logits);
  const double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> weights(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) z += (weights[i] = std::exp((logits[i] - m) / temperature_));
  // 53 random bits mapped to [0, 1); fixed so draws agree across standard libraries.
  const double u = static_cast<double>(rng_() >> 11) * 0x1.0p-53 * z;
  double acc = 0.0;
  TokenId last_nonzero = argmax_token(logits);
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (weights[i] == 0.0) continue;
    acc += weights[i];
    last_nonzero = static_cast<TokenId>(i);
    if (u < acc) return static_cast<TokenId>(i);
  }
  return last_nonzero;
}

Tensor decode_step(const ModelWeights& w, KVCache& cache, TokenId token, std::size_t position,
                   std::span<const double> gates, std::vector<LayerProbe>* probes) {
  const std::size_t layers = w.config.num_layers;
  if (!gates.empty() && gates.size() != layers) throw ContractError("decode_step: one gate per layer required");
  if (position >= w.config.max_seq) {
    throw CapacityError("position " + std::to_string(position) + " exceeds max_seq " + std::to_string(w.config.max_seq));
  }
  if (probes) probes->assign(layers, {});
  const std::size_t pos[] = {position};
  const TokenId tok[] = {token};
  Tensor x = embed(w, tok);
  for (std::size_t l = 0; l < layers; ++l) {
    x = layer_forward(w, l, x, &cache, pos, gates.empty() ? 1.0 : gates[l], probes ? &(*probes)[l] : nullptr);
  }
  return output_logits(w, x);
}

std::vector<TokenId> generate(const ModelWeights& w, std::span<const TokenId> prompt, std::size_t max_new,
                              double temperature, std::uint64_t seed, const GateSchedule* gates) {
  const auto& c = w.config;
  if (prompt.empty()) throw ContractError("generate: empty prompt");
  const std::size_t n = prompt.size();
  if (n >= c.max_seq) {
    throw CapacityError("prompt of " + std::to_string(n) + " tokens does not fit max_seq " + std::to_string(c.max_seq));
  }
  if (gates) {
    if (gates->prefill.size() != c.num_layers || gates->decode.size() != c.num_layers) {
      throw ContractError("generate: gate schedule must hold one gate per layer and stage");
    }
    if (gates->prompt_len != n) throw ContractError("generate: gate schedule prompt length mismatch");
  }
  TokenSampler sampler(temperature, seed);
  std::vector<TokenId> out;
  if (max_new == 0) return out;

  KVCache cache(c);
  if (n > 1) {
    const auto positions = iota_positions(0, n - 1);
    Tensor x = embed(w, prompt.first(n - 1));
    for (std::size_t l = 0; l < c.num_layers; ++l) {
      x = layer_forward(w, l, x, &cache, positions, gates ? gates->prefill[l] : 1.0);
    }
  }
  std::span<const double> decode_gates = gates ? std::span<const double>(gates->decode) : std::span<const double>();
  TokenId current = prompt[n - 1];
  for (std::size_t pos = n - 1; out.size() < max_new && pos + 1 < c.max_seq; ++pos) {
    Tensor logits = decode_step(w, cache, current, pos, decode_gates);
    current = sampler.next(logits.data());
    out.push_back(current);
    if (current == tokens::kEos) break;
  }
  return out;
}

}  // namespace pop
