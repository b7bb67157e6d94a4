#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pop/config.hpp"
#include "pop/kv_cache.hpp"
#include "pop/tape.hpp"
#include "pop/tensor.hpp"
#include "pop/tokenizer.hpp"

namespace pop {

struct LayerWeights {
  Tensor attn_norm;  // [d]
  Tensor wq;         // [d x d]
  Tensor wk;         // [d x kv_dim]
  Tensor wv;         // [d x kv_dim]
  Tensor wo;         // [d x d]
  Tensor ffn_norm;   // [d]
  Tensor w_gate;     // [d x ffn]
  Tensor w_up;       // [d x ffn]
  Tensor w_down;     // [ffn x d]
};

// All parameters of a model. Tensors are immutable after construction, so a
// ModelWeights value can be shared across threads. Training builds tracked
// copies that share the same storage.
struct ModelWeights {
  ModelConfig config;
  Tensor embedding;  // [V x d]
  std::vector<LayerWeights> layers;
  Tensor final_norm;  // [d]
  Tensor head;        // [d x V], not tied to the embedding

  // Every tensor with a stable name, in checkpoint order.
  std::vector<std::pair<std::string, const Tensor*>> named() const;
  std::vector<std::pair<std::string, Tensor*>> named_mutable();
  // Throws ConfigError when a tensor shape disagrees with the config.
  void validate() const;
};

// Expected shape of a named tensor under `config`.
Shape expected_shape(const ModelConfig& config, const std::string& name);

// Init scheme: embedding ~ N(0, 1); input-side projections (q, k, v, gate,
// up) ~ N(0, 1/fan_in); residual output projections (o, down) get an extra
// 1/sqrt(2L); the head uses kHeadInitGain/sqrt(d) so initial logits are
// nearly uniform; norm weights are 1.
inline constexpr double kHeadInitGain = 0.5;
ModelWeights init_model(const ModelConfig& config, std::uint64_t seed);

// FNV-1a over the config and every tensor's bytes, as 16 hex digits.
std::string model_hash(const ModelWeights& weights);

// Per-row residual gates for one layer: rows before `split` use `prefill`,
// the rest use `decode`. Both are one-element tensors, possibly tape leaves.
struct LayerGate {
  Tensor prefill = Tensor::scalar(1.0);
  Tensor decode = Tensor::scalar(1.0);
  std::size_t split = 0;

  static LayerGate uniform(double g) { return {Tensor::scalar(g), Tensor::scalar(g), 0}; }
};

struct KVPair {
  Tensor k;  // [t x kv_heads x head_dim], RoPE applied
  Tensor v;  // [t x kv_heads x head_dim]
};

// Internal states of one layer_forward call, for diagnostics and tests.
struct LayerProbe {
  Tensor input;     // x entering the layer
  KVPair kv;        // keys/values this call produced
  Tensor attn_out;  // attention block output after W^O, before gating
  Tensor output;
};

// Keys and values a layer derives from its input:
// k = RoPE(norm(x) W^K), v = norm(x) W^V.
KVPair kv_project(const ModelWeights& w, std::size_t layer, const Tensor& x,
                  std::span<const std::size_t> positions);

// One decoder layer over x [t x d]:
//   y = x + gate * Attn(x, cache), out = y + gate * FFN(y).
// With a cache, the new keys/values are appended (unscaled by the gate) and
// attention covers cached plus new positions; without one, attention is
// causal over x alone. Cached forward requires untracked inputs.
Tensor layer_forward(const ModelWeights& w, std::size_t layer, const Tensor& x, KVCache* cache,
                     std::span<const std::size_t> positions, const LayerGate& gate,
                     LayerProbe* probe = nullptr);
Tensor layer_forward(const ModelWeights& w, std::size_t layer, const Tensor& x, KVCache* cache,
                     std::span<const std::size_t> positions, double gate = 1.0,
                     LayerProbe* probe = nullptr);

Tensor embed(const ModelWeights& w, std::span<const TokenId> tokens);
// Final norm and output head: [t x d] -> [t x V].
Tensor output_logits(const ModelWeights& w, const Tensor& hidden);

// Virtual gates for one teacher-forced pass over tokens s[0..T-1] with a
// prompt of length N. Positions p < N-1 use `prefill[l]`; positions p >= N-1
// use `decode[l]`. With `shared`, each layer has one gate covering both
// regions (prefill[l] must equal decode[l]).
struct GateSchedule {
  std::vector<double> prefill;
  std::vector<double> decode;
  std::size_t prompt_len = 1;
  bool tracked = false;
  bool shared = false;

  static GateSchedule ones(std::size_t num_layers, std::size_t prompt_len);
  std::size_t split() const { return prompt_len - 1; }
};

struct TeacherForcedOutput {
  Tensor logits;  // [T x V]
  // Leaf ids of the gates when the schedule is tracked; with a shared
  // schedule both lists hold the same ids.
  std::vector<LeafId> prefill_leaves;
  std::vector<LeafId> decode_leaves;
};

TeacherForcedOutput forward_teacher_forced(const ModelWeights& w, std::span<const TokenId> tokens,
                                           const GateSchedule& gates, GradientTape* tape = nullptr);

// Plain causal forward with every gate absent: [T x V] logits.
Tensor forward_logits(const ModelWeights& w, std::span<const TokenId> tokens);

// Next-token selection. Temperature 0 is argmax with ties going to the lowest
// id; otherwise sampling from softmax(logits / temperature).
class TokenSampler {
 public:
  TokenSampler(double temperature, std::uint64_t seed);
  TokenId next(std::span<const double> logits);

 private:
  double temperature_;
  std::mt19937_64 rng_;
};

TokenId argmax_token(std::span<const double> logits);

// Processes one token at `position` through every layer with the cache and
// returns its next-token logits [1 x V]. `gates` (one per layer) scales the
// residual branches; empty means all ones. When `probes` is given it receives
// one entry per layer.
Tensor decode_step(const ModelWeights& w, KVCache& cache, TokenId token, std::size_t position,
                   std::span<const double> gates = {}, std::vector<LayerProbe>* probes = nullptr);

// Autoregressive generation with a KV cache. The prompt's first N-1 tokens
// are prefilled in one pass; s[N-1] is processed as the first decode step.
// With a schedule, the prefill pass uses its prefill gates and every decode
// step its decode gates (cache writes are never gated). Stops at EOS, after
// max_new tokens, or when prompt plus output fills max_seq. Returns the
// generated tokens, including a terminating EOS if one is sampled.
std::vector<TokenId> generate(const ModelWeights& w, std::span<const TokenId> prompt, std::size_t max_new,
                              double temperature, std::uint64_t seed, const GateSchedule* gates = nullptr);

}  // namespace pop
