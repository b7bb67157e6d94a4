#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "pop/model.hpp"

namespace pop {

struct TrainConfig {
  std::size_t steps = 2000;
  std::size_t batch = 4;
  std::size_t seq_len = 128;
  double learning_rate = 3e-3;
  std::size_t warmup = 100;
  double min_lr_fraction = 0.1;  // cosine decay floor after warmup
  double beta1 = 0.9;
  double beta2 = 0.99;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;  // matrices only; never norms or the embedding
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
  std::filesystem::path corpus;

  void validate(const ModelConfig& model) const;
};

// Byte split of a corpus: the first 95% trains, the rest is held out.
struct CorpusSplit {
  std::string train;
  std::string heldout;
};

inline constexpr double kTrainFraction = 0.95;

std::string read_corpus(const std::filesystem::path& path);
CorpusSplit split_corpus(std::string_view bytes, double train_fraction = kTrainFraction);

// One training sequence: BOS followed by seq_len bytes starting at `offset`.
std::vector<TokenId> corpus_window(std::string_view bytes, std::size_t offset, std::size_t seq_len);

// `batch` windows at offsets drawn from a generator seeded with (seed, step).
std::vector<std::vector<TokenId>> sample_batch(std::string_view bytes, std::size_t batch, std::size_t seq_len,
                                               std::uint64_t seed, std::size_t step);

// Mean next-token loss per predicted token over the batch, and its gradient
// for every named tensor (same order as ModelWeights::named()).
struct LossAndGrads {
  double loss = 0.0;
  std::vector<Tensor> grads;
};
LossAndGrads loss_and_gradients(const ModelWeights& w, const std::vector<std::vector<TokenId>>& batch);

// Adam with decoupled weight decay, linear warmup then cosine decay, and
// global-norm clipping.
class AdamOptimizer {
 public:
  AdamOptimizer(const ModelWeights& w, const TrainConfig& cfg);
  double learning_rate(std::size_t step) const;
  // Applies one update in place. Returns the pre-clip gradient norm.
  double step(ModelWeights& w, const std::vector<Tensor>& grads);
  std::size_t steps_taken() const { return t_; }

 private:
  TrainConfig cfg_;
  std::vector<Buffer> m_;
  std::vector<Buffer> v_;
  std::vector<bool> decay_;
  std::size_t t_ = 0;
};

struct TrainResult {
  ModelWeights weights;
  std::vector<double> losses;  // one per step, measured before that step's update
};

// Called after every step with (step, loss); may be empty.
using TrainProgress = std::function<void(std::size_t, double)>;

// Throws DataError when the training split holds fewer than
// 10 * batch * seq_len bytes.
TrainResult train(ModelWeights init, const TrainConfig& cfg, const TrainProgress& progress = {});

// Teacher-forced mean loss per token over consecutive seq_len windows of
// `bytes` (the last window may be shorter). Throws DataError when empty.
double heldout_loss(const ModelWeights& w, std::string_view bytes, std::size_t seq_len);

void write_loss_csv(const std::filesystem::path& path, const std::vector<double>& losses);
std::vector<double> read_loss_csv(const std::filesystem::path& path);

}  // namespace pop
