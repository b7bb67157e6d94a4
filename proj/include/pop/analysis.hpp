#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "pop/config.hpp"
#include "pop/importance.hpp"
#include "pop/model.hpp"
#include "pop/pop_engine.hpp"

namespace pop {

// FLOPs of one layer over a whole prompt, itemized. Matmuls count 2*m*k*n.
struct LayerFlops {
  double q = 0, k = 0, v = 0, o = 0;
  double attn_score = 0, attn_value = 0;  // causal: position p sees p+1 keys
  double ffn = 0;                         // gate, up and down GEMMs
  double norm = 0, rope = 0, softmax = 0, act = 0, residual = 0;

  double weight_gemm() const { return q + k + v + o + ffn; }
  double total() const;
  LayerFlops& operator+=(const LayerFlops& other);
};

// Linear-term constants, per element.
inline constexpr double kNormFlopsPerElem = 4.0;     // square, sum, scale, weight
inline constexpr double kRopeFlopsPerPair = 6.0;     // 4 mul + 2 add
inline constexpr double kSoftmaxFlopsPerElem = 5.0;  // max, sub, exp, sum, div
inline constexpr double kActFlopsPerElem = 5.0;      // silu (4) and the gating product
inline constexpr double kResidualFlopsPerElem = 1.0;

struct FlopsReport {
  std::string config_name;
  std::size_t seq_len = 0;
  std::size_t num_layers = 0;
  std::vector<std::size_t> skip_set;
  LayerFlops full_layer;     // one intact layer over all seq_len positions
  LayerFlops pruned_layer;   // a skipped layer under POP: kv-only prefill plus the boundary step
  LayerFlops kv_only_token;  // kv-only work for one position
  double head = 0;           // final norm and head for the position that emits the first token
  double full_total = 0;
  double pop_total = 0;
  double kv_only_total = 0;  // all kv-only work across skipped layers
  double kv_fraction = 0;    // (k + v) / per-layer weight GEMMs, sequence independent
  double theoretical_speedup = 0;
};

// Prefill cost to the first token: N positions through every layer, then
// the head for the last position. Under POP the skipped layers do kv-only
// work for positions 0..N-2 and run fully for the boundary position.
FlopsReport count_flops(const ModelConfig& config, const PruningPlan& plan, std::size_t seq_len);
nlohmann::json flops_to_json(const FlopsReport& r);

struct BenchOptions {
  std::size_t seq_len = 2048;
  std::size_t batch = 4;
  std::size_t reps = 5;
  std::size_t warmup = 2;
  std::uint64_t seed = 0;
  std::size_t threads = 1;  // sessions run concurrently across the batch
};

struct BenchStats {
  std::size_t seq_len = 0, batch = 0, reps = 0, warmup = 0, threads = 0;
  double full_median = 0, full_iqr = 0;
  double pop_median = 0, pop_iqr = 0;
  double speedup = 0;
  std::vector<double> full_times, pop_times;
  std::vector<TokenId> full_tokens, pop_tokens;  // first generated token per prompt
};

// Seeded synthetic prompts: BOS followed by uniform byte tokens.
std::vector<std::vector<TokenId>> synthetic_prompts(std::size_t count, std::size_t len, std::uint64_t seed);

// TTFT of full generate() and pop_generate() on the same prompts, greedy,
// one new token. Each repetition times the whole batch; full and POP runs
// alternate. Throws ConfigError for reps < 5 or warmup < 2.
BenchStats bench_ttft(const ModelWeights& w, const PruningPlan& plan, const BenchOptions& opts);
nlohmann::json bench_to_json(const BenchStats& s);

double median(std::vector<double> v);
double interquartile_range(std::vector<double> v);

// Cosine similarity; 1 when both vectors are zero, 0 when only one is.
double cosine(std::span<const double> a, std::span<const double> b);

struct LayerDrift {
  std::size_t layer = 0;
  bool skipped = false;
  double hidden = 1, key = 1, value = 1, attn_out = 1;
};

struct DriftTrace {
  std::vector<LayerDrift> layers;
  std::size_t num_prompts = 0;
};

// Full and POP pipelines on the same prompts (N >= 2). Per layer: hidden
// state entering the layer and cached K and V rows over the prefill
// positions, and the attention output while decoding the first generated
// token (the full model's greedy choice, fed to both). Averaged over
// positions, then prompts. Layers whose POP cache holds no prefill rows
// report NaN for key and value.
DriftTrace drift_diagnostics(const ModelWeights& w, const PruningPlan& plan,
                             const std::vector<std::vector<TokenId>>& prompts, std::size_t threads = 0);

void write_drift_csv(const std::filesystem::path& path, const DriftTrace& t);
DriftTrace read_drift_csv(const std::filesystem::path& path);

struct SvgSeries {
  std::string name;
  std::vector<double> y;
};

// Minimal line chart: one polyline per series over x.
std::string svg_chart(const std::string& title, const std::string& x_label, const std::vector<double>& x,
                      const std::vector<SvgSeries>& series);
void write_text(const std::filesystem::path& path, const std::string& text);

struct SweepRow {
  double ratio = 0;
  std::size_t skipped = 0;
  double resp_loss = 0;
  double first_token_agree = 0;
  double theoretical_speedup = 0;
};

inline constexpr double kSweepRatios[] = {0.0, 0.2, 0.25, 1.0 / 3.0, 0.4, 0.5, 0.6};

std::vector<SweepRow> ratio_sweep(const ModelWeights& w, std::span<const double> ratios,
                                  const std::vector<CalibSample>& eval, std::size_t threads = 0);
void write_sweep_csv(const std::filesystem::path& path, const std::vector<SweepRow>& rows);
std::vector<SweepRow> read_sweep_csv(const std::filesystem::path& path);

void write_importance_csv(const std::filesystem::path& path, const ImportanceProfile& p);
std::vector<LayerImportance> read_importance_csv(const std::filesystem::path& path);

struct FigureOptions {
  std::size_t samples = 200;
  std::uint64_t seed = 0;
  SamplingParams sampling;
  double ratio = 1.0 / 3.0;
  std::size_t threads = 0;
};

struct FigureOutputs {
  ImportanceProfile profile;
  DriftTrace drift;
  std::vector<SweepRow> sweep;
  std::vector<std::filesystem::path> files;
};

// Writes importance.csv/.svg, drift.csv/.svg and ratio_sweep.csv/.svg.
// Calibration prompts need provided responses, which the sweep scores; the
// importance pass samples its own targets. Throws FileError for a missing
// checkpoint.
FigureOutputs reproduce_figures(const std::filesystem::path& checkpoint, const std::vector<CalibPrompt>& calib,
                                const std::filesystem::path& outdir, const FigureOptions& opts);

}  // namespace pop
