#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "pop/importance.hpp"
#include "pop/model.hpp"

namespace pop {

enum class Strategy { kDeep, kShallow, kInterleaved, kFromProfile };
std::string_view strategy_name(Strategy s);
Strategy parse_strategy(std::string_view name);  // ConfigError on unknown names

// Layers bypassed during prefill. Indices are 0-based and sorted.
struct PruningPlan {
  std::size_t num_layers = 0;
  std::vector<std::size_t> skip_set;
  double ratio = 0.0;
  Strategy strategy = Strategy::kDeep;
  bool indep_kv = true;
  bool boundary_handling = true;

  bool skips(std::size_t layer) const;
  std::vector<bool> skip_mask() const;
};

// floor(ratio * L) with a 0.05-layer allowance so four-digit ratios such as
// 0.3333 select the same count as 1/3.
std::size_t skip_count(std::size_t num_layers, double ratio);

// deep: the last k layers; shallow: the first k; interleaved: every
// ceil(1/ratio)-th layer counting down from the deepest, then the deepest
// unselected layers if the stride runs out; from_profile: lowest prefill
// score first, ties toward deeper layers. Throws ConfigError for ratio
// outside [0, 1), a nonzero ratio that selects no layer, or from_profile
// without a matching profile.
PruningPlan make_plan(std::size_t num_layers, double ratio, Strategy strategy,
                      const ImportanceProfile* profile = nullptr);

nlohmann::json plan_to_json(const PruningPlan& p);
PruningPlan plan_from_json(const nlohmann::json& j);

enum class Exec : std::uint8_t { kFull, kKvOnly, kSkipped };
std::string_view exec_name(Exec e);

// What each layer did at each processed position.
struct PopTrace {
  using Clock = std::chrono::steady_clock;
  std::size_t num_layers = 0;
  std::vector<std::size_t> positions;       // one entry per processed position
  std::vector<std::vector<Exec>> records;   // records[i][l] for positions[i]
  std::vector<std::size_t> cache_after_prefill;
  Clock::time_point prefill_start{};
  Clock::time_point prefill_end{};
  Clock::time_point first_token{};

  std::size_t count(Exec e) const;
  std::size_t total_records() const;
  // Row for an absolute position; throws ContractError if absent.
  const std::vector<Exec>& at_position(std::size_t pos) const;
  double ttft_seconds() const;
};

// Runs tokens at absolute positions start.. through every layer, skipping
// the masked layers (kv_only when indep_kv, else nothing cached), appending
// to the cache. Returns the final hidden states [t x d].
Tensor run_chunk(const ModelWeights& w, std::span<const TokenId> tokens, std::size_t start, KVCache& cache,
                 const std::vector<bool>& skip, bool indep_kv, PopTrace* trace = nullptr);

// Pruned prefill of a prompt prefix s[0..N-2] into a fresh cache.
KVCache pruned_prefill(const ModelWeights& w, const PruningPlan& plan, std::span<const TokenId> prefix,
                       PopTrace* trace = nullptr);

// POP generation. With boundary handling the prompt's last token is the
// first full-model decode step; without it the whole prompt runs pruned.
// Generated tokens always run on the full model. Sampling matches generate().
std::vector<TokenId> pop_generate(const ModelWeights& w, const PruningPlan& plan, std::span<const TokenId> prompt,
                                  std::size_t max_new, double temperature, std::uint64_t seed,
                                  PopTrace* trace = nullptr);

// Teacher-forced logits [T x V] of a two-chunk pipeline: the first `split`
// tokens run with `first_skip`, the rest with `second_skip` over the same
// cache. Skipped layers in either chunk are kv_only unless indep_kv is off
// for the first chunk.
Tensor staged_logits(const ModelWeights& w, std::span<const TokenId> tokens, std::size_t split,
                     const std::vector<bool>& first_skip, const std::vector<bool>& second_skip,
                     bool first_indep_kv = true);

// Teacher-forced logits of the POP pipeline for prompt length N.
Tensor pop_logits(const ModelWeights& w, const PruningPlan& plan, std::span<const TokenId> tokens,
                  std::size_t prompt_len);

struct VariantMetrics {
  std::string variant;
  double ratio = 0.0;
  double resp_loss = 0.0;          // mean loss per response token
  double first_token_agree = 0.0;  // fraction of samples matching the full model's greedy first token
};

inline constexpr std::string_view kVariants[] = {"pop", "shallow", "interleaved", "no_indep_kv", "no_boundary", "full"};

PruningPlan variant_plan(std::string_view variant, std::size_t num_layers, double ratio);

// Evaluates one variant on samples with fixed responses.
VariantMetrics run_variant(const ModelWeights& w, std::string_view variant, double ratio,
                           const std::vector<CalibSample>& eval, std::size_t threads = 0);

void write_variant_csv(const std::filesystem::path& path, const std::vector<VariantMetrics>& rows);
std::vector<VariantMetrics> read_variant_csv(const std::filesystem::path& path);

}  // namespace pop
