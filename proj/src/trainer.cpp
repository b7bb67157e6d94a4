#include "pop/trainer.hpp"

#include <cmath>
#include <fstream>
#include <iterator>
#include <memory>
#include <numbers>
#include <random>
#include <sstream>

#include "pop/errors.hpp"
#include "pop/ops.hpp"

namespace pop {

void TrainConfig::validate(const ModelConfig& model) const {
  if (steps == 0) throw ConfigError("steps must be positive");
  if (batch == 0) throw ConfigError("batch must be positive");
  if (seq_len == 0) throw ConfigError("seq_len must be positive");
  if (seq_len + 1 > model.max_seq) {
    throw ConfigError("seq_len " + std::to_string(seq_len) + " plus BOS exceeds max_seq " +
                      std::to_string(model.max_seq));
  }
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (!(clip_norm > 0.0)) throw ConfigError("clip norm must be positive");
}

std::string read_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileError("cannot open corpus " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

CorpusSplit split_corpus(std::string_view bytes, double train_fraction) {
  const auto cut = static_cast<std::size_t>(static_cast<double>(bytes.size()) * train_fraction);
  return {std::string(bytes.substr(0, cut)), std::string(bytes.substr(cut))};
}

std::vector<TokenId> corpus_window(std::string_view bytes, std::size_t offset, std::size_t seq_len) {
  if (offset > bytes.size()) throw DataError("corpus window starts past the end");
  std::vector<TokenId> out{tokens::kBos};
  for (TokenId t : encode_bytes(bytes.substr(offset, seq_len))) out.push_back(t);
  return out;
}

std::vector<std::vector<TokenId>> sample_batch(std::string_view bytes, std::size_t batch, std::size_t seq_len,
                                               std::uint64_t seed, std::size_t step) {
  if (bytes.size() < seq_len) throw DataError("corpus shorter than one training window");
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(step >> 32)};
  std::mt19937_64 rng(seq);
  std::uniform_int_distribution<std::size_t> offset(0, bytes.size() - seq_len);
  std::vector<std::vector<TokenId>> out;
  for (std::size_t b = 0; b < batch; ++b) out.push_back(corpus_window(bytes, offset(rng), seq_len));
  return out;
}

namespace {

// Next-token targets for a sequence; the final position has none.
Tensor sequence_loss(const Tensor& logits, std::span<const TokenId> seq) {
  std::vector<std::int32_t> targets(seq.size(), 0);
  auto mask = std::make_unique<bool[]>(seq.size());
  for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
    targets[i] = seq[i + 1];
    mask[i] = true;
  }
  return cross_entropy(logits, targets, std::span<const bool>(mask.get(), seq.size()));
}

}  // namespace

LossAndGrads loss_and_gradients(const ModelWeights& w, const std::vector<std::vector<TokenId>>& batch) {
  if (batch.empty()) throw DataError("empty batch");
  GradientTape tape;
  ModelWeights tracked = w;
  std::vector<LeafId> ids;
  for (auto& [name, slot] : tracked.named_mutable()) {
    *slot = tape.leaf(*slot);
    ids.push_back(tape.leaf_id(*slot));
  }
  Tensor total;
  std::size_t predicted = 0;
  for (const auto& seq : batch) {
    if (seq.size() < 2) throw DataError("training sequence needs at least two tokens");
    Tensor loss = sequence_loss(forward_logits(tracked, seq), seq);
    total = total.defined() ? add(total, loss) : loss;
    predicted += seq.size() - 1;
  }
  Tensor mean = scale(total, 1.0 / static_cast<double>(predicted));
  Gradients g = tape.backward(mean);
  LossAndGrads out;
  out.loss = mean.item();
  for (LeafId id : ids) out.grads.push_back(g[id]);
  return out;
}

AdamOptimizer::AdamOptimizer(const ModelWeights& w, const TrainConfig& cfg) : cfg_(cfg) {
  for (const auto& [name, t] : w.named()) {
    m_.emplace_back(t->numel(), 0.0);
    v_.emplace_back(t->numel(), 0.0);
    decay_.push_back(t->rank() == 2 && name != "embedding");
  }
}

double AdamOptimizer::learning_rate(std::size_t step) const {
  if (cfg_.warmup > 0 && step < cfg_.warmup) {
    return cfg_.learning_rate * static_cast<double>(step + 1) / static_cast<double>(cfg_.warmup);
  }
  const std::size_t decay_steps = cfg_.steps > cfg_.warmup ? cfg_.steps - cfg_.warmup : 1;
  const double progress = std::min(1.0, static_cast<double>(step - cfg_.warmup) / static_cast<double>(decay_steps));
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return cfg_.learning_rate * (cfg_.min_lr_fraction + (1.0 - cfg_.min_lr_fraction) * cosine);
}

double AdamOptimizer::step(ModelWeights& w, const std::vector<Tensor>& grads) {
  auto params = w.named_mutable();
  if (grads.size() != params.size()) throw ContractError("optimizer: gradient count does not match parameters");
  double sq = 0.0;
  for (const auto& g : grads)
    for (double v : g.data()) sq += v * v;
  const double norm = std::sqrt(sq);
  const double clip = norm > cfg_.clip_norm ? cfg_.clip_norm / norm : 1.0;

  const double lr = learning_rate(t_);
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor& param = *params[p].second;
    Buffer next(param.data().begin(), param.data().end());
    auto g = grads[p].data();
    auto& m = m_[p];
    auto& v = v_[p];
    const double decay = decay_[p] ? lr * cfg_.weight_decay : 0.0;
    for (std::size_t i = 0; i < next.size(); ++i) {
      const double gi = g[i] * clip;
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
      next[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.adam_eps) + decay * next[i];
    }
    param = Tensor(param.shape(), std::move(next));
  }
  return norm;
}

TrainResult train(ModelWeights init, const TrainConfig& cfg, const TrainProgress& progress) {
  cfg.validate(init.config);
  const CorpusSplit split = split_corpus(read_corpus(cfg.corpus));
  const std::size_t needed = 10 * cfg.batch * cfg.seq_len;
  if (split.train.size() < needed) {
    throw DataError("corpus training split has " + std::to_string(split.train.size()) + " bytes; need at least " +
                    std::to_string(needed));
  }
  TrainResult result{std::move(init), {}};
  AdamOptimizer opt(result.weights, cfg);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    auto batch = sample_batch(split.train, cfg.batch, cfg.seq_len, cfg.seed, step);
    LossAndGrads lg = loss_and_gradients(result.weights, batch);
    opt.step(result.weights, lg.grads);
    result.losses.push_back(lg.loss);
    if (progress) progress(step, lg.loss);
  }
  return result;
}

double heldout_loss(const ModelWeights& w, std::string_view bytes, std::size_t seq_len) {
  if (bytes.empty()) throw DataError("held-out slice is empty");
  if (seq_len == 0) throw ConfigError("seq_len must be positive");
  double total = 0.0;
  std::size_t predicted = 0;
  for (std::size_t off = 0; off < bytes.size(); off += seq_len) {
    auto seq = corpus_window(bytes, off, seq_len);
    total += sequence_loss(forward_logits(w, seq), seq).item();
    predicted += seq.size() - 1;
  }
  return total / static_cast<double>(predicted);
}

void write_loss_csv(const std::filesystem::path& path, const std::vector<double>& losses) {
  std::ofstream out(path);
  if (!out) throw FileError("cannot write " + path.string());
  out << "step,loss\n";
  out.precision(17);
  for (std::size_t i = 0; i < losses.size(); ++i) out << i << ',' << losses[i] << '\n';
}

std::vector<double> read_loss_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FileError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "step,loss") throw FormatError(path.string() + ": expected header step,loss");
  std::vector<double> losses;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    try {
      if (comma == std::string::npos || std::stoul(line.substr(0, comma)) != losses.size()) throw FormatError("");
      losses.push_back(std::stod(line.substr(comma + 1)));
    } catch (const std::exception&) {
      throw FormatError(path.string() + ": malformed row '" + line + "'");
    }
  }
  return losses;
}

}  // namespace pop
