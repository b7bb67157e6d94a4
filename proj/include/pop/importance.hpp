#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "pop/model.hpp"

namespace pop {

// One calibration example: prompt s[0..N-1] (BOS-prefixed) followed by a
// response s[N..T-1]. `provided` is an optional fixed response; `response`
// is what the estimator actually scores.
struct CalibSample {
  std::vector<TokenId> prompt;
  std::optional<std::vector<TokenId>> provided;
  std::vector<TokenId> response;

  std::size_t prompt_len() const { return prompt.size(); }
  std::size_t total_len() const { return prompt.size() + response.size(); }
  std::vector<TokenId> tokens() const;
};

struct SamplingParams {
  double temperature = 1.0;
  std::size_t max_len = 64;
};

// Ancestral sampling from the full, ungated model. Stops at EOS (kept) or
// after max_len tokens. Throws ConfigError unless temperature > 0.
std::vector<TokenId> sample_targets(const ModelWeights& w, std::span<const TokenId> prompt, std::size_t max_len,
                                    double temperature, std::uint64_t seed);

// Token-sum cross-entropy of the response given the prompt under a gate
// schedule (logit positions N-1..T-2 predict s[N..T-1]).
double response_loss(const ModelWeights& w, const CalibSample& sample, const GateSchedule& gates);

// Per-layer gate gradients for one sample. When stage-agnostic, one gate per
// layer covers every position and its gradient is reported in both vectors.
struct GateGradients {
  std::vector<double> prefill;
  std::vector<double> decode;
  double loss = 0.0;
  bool stage_aware = true;
  // True when N == 1: no position is prefill-gated, so prefill gradients
  // are exactly zero.
  bool prefill_empty = false;
};

GateGradients gate_gradients(const ModelWeights& w, const CalibSample& sample, bool stage_aware);

struct LayerImportance {
  std::size_t index = 0;
  double prefill_score = 0.0;
  double decode_score = 0.0;
  double prefill_grad_mean = 0.0;
  double decode_grad_mean = 0.0;
  double prefill_grad_se = 0.0;
  double decode_grad_se = 0.0;
};

struct ImportanceProfile {
  std::string model_hash;
  bool stage_aware = true;
  std::size_t num_samples = 0;
  std::uint64_t seed = 0;
  SamplingParams sampling;
  bool self_sampled = true;
  std::vector<LayerImportance> layers;
  std::vector<GateGradients> per_sample;  // only with keep_grads
};

struct ImportanceOptions {
  bool stage_aware = true;
  SamplingParams sampling;
  std::uint64_t seed = 0;
  // Score provided responses instead of sampling; for the fixed-target
  // diagnostic only.
  bool use_provided = false;
  bool keep_grads = false;
  std::size_t threads = 0;  // 0 means worker_count()
};

// Seed for sample i's target draw, independent of scheduling.
std::uint64_t sample_seed(std::uint64_t seed, std::size_t index);

// Fills each sample's response (sampled or provided) in place.
void prepare_targets(const ModelWeights& w, std::vector<CalibSample>& samples, const ImportanceOptions& opts);

// Squared-gradient scores averaged over samples, with gradient means and
// standard errors. Throws DataError on an empty calibration set.
ImportanceProfile estimate_importance(const ModelWeights& w, std::vector<CalibSample> samples,
                                      const ImportanceOptions& opts);

// Rebuilds the per-layer statistics from per-sample gradients in sample order.
std::vector<LayerImportance> summarize_gradients(const std::vector<GateGradients>& per_sample);

enum class Stage { kPrefill, kDecode };
std::string_view stage_name(Stage s);

// Mean over samples of loss(gate of `layer` in `stage` set to 0) minus
// loss(all gates 1), on the samples' frozen responses.
double brute_force_delta_loss(const ModelWeights& w, const std::vector<CalibSample>& samples, std::size_t layer,
                              Stage stage, std::size_t threads = 0);

// Spearman rank correlation with average ranks for ties.
double spearman(const std::vector<double>& a, const std::vector<double>& b);

nlohmann::json profile_to_json(const ImportanceProfile& p);
ImportanceProfile profile_from_json(const nlohmann::json& j);
void save_profile(const ImportanceProfile& p, const std::filesystem::path& path);
ImportanceProfile load_profile(const std::filesystem::path& path);

// Calibration prompts as text.
struct CalibPrompt {
  std::string prompt;
  std::optional<std::string> response;
};

// JSONL with one {"prompt": ..., "response": optional} object per line.
std::vector<CalibPrompt> load_calibration_jsonl(const std::filesystem::path& path);
void save_calibration_jsonl(const std::vector<CalibPrompt>& prompts, const std::filesystem::path& path);

// `count` prompts of `prompt_bytes` bytes at evenly spaced offsets of a text
// slice, each paired with the `response_bytes` bytes that follow it.
std::vector<CalibPrompt> calibration_from_text(std::string_view text, std::size_t count, std::size_t prompt_bytes = 64,
                                               std::size_t response_bytes = 64);

std::vector<CalibSample> make_samples(const std::vector<CalibPrompt>& prompts);

}  // namespace pop
