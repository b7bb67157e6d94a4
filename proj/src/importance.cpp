#include "pop/importance.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <memory>
#include <numeric>

#include "pop/errors.hpp"
#include "pop/ops.hpp"
#include "pop/parallel.hpp"

namespace pop {

std::vector<TokenId> CalibSample::tokens() const {
  std::vector<TokenId> out = prompt;
  out.insert(out.end(), response.begin(), response.end());
  return out;
}

std::vector<TokenId> sample_targets(const ModelWeights& w, std::span<const TokenId> prompt, std::size_t max_len,
                                    double temperature, std::uint64_t seed) {
  if (!(temperature > 0.0)) throw ConfigError("target sampling needs temperature > 0");
  return generate(w, prompt, max_len, temperature, seed);
}

namespace {

void check_sample(const ModelWeights& w, const CalibSample& s) {
  if (s.prompt.empty()) throw ContractError("calibration sample has an empty prompt");
  if (s.response.empty()) throw ContractError("calibration sample has no response");
  if (s.total_len() > w.config.max_seq) {
    throw CapacityError("calibration sample of " + std::to_string(s.total_len()) + " tokens exceeds max_seq");
  }
}

// Token-sum loss over the response predictions.
Tensor masked_response_loss(const Tensor& logits, const std::vector<TokenId>& tokens, std::size_t n) {
  const std::size_t t = tokens.size();
  std::vector<std::int32_t> targets(t, 0);
  auto mask = std::make_unique<bool[]>(t);
  for (std::size_t p = n - 1; p + 1 < t; ++p) {
    targets[p] = tokens[p + 1];
    mask[p] = true;
  }
  return cross_entropy(logits, targets, std::span<const bool>(mask.get(), t));
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::size_t resolve_threads(std::size_t threads) { return threads == 0 ? worker_count() : threads; }

}  // namespace

double response_loss(const ModelWeights& w, const CalibSample& sample, const GateSchedule& gates) {
  check_sample(w, sample);
  const auto tokens = sample.tokens();
  GateSchedule g = gates;
  g.prompt_len = sample.prompt_len();
  g.tracked = false;
  return masked_response_loss(forward_teacher_forced(w, tokens, g).logits, tokens, sample.prompt_len()).item();
}

GateGradients gate_gradients(const ModelWeights& w, const CalibSample& sample, bool stage_aware) {
  check_sample(w, sample);
  const std::size_t layers = w.config.num_layers;
  const auto tokens = sample.tokens();
  GateSchedule g = GateSchedule::ones(layers, sample.prompt_len());
  g.tracked = true;
  g.shared = !stage_aware;
  GradientTape tape;
  auto out = forward_teacher_forced(w, tokens, g, &tape);
  Tensor loss = masked_response_loss(out.logits, tokens, sample.prompt_len());
  Gradients grads = tape.backward(loss);

  GateGradients r;
  r.loss = loss.item();
  r.stage_aware = stage_aware;
  r.prefill_empty = sample.prompt_len() == 1;
  for (std::size_t l = 0; l < layers; ++l) {
    r.prefill.push_back(grads.scalar(out.prefill_leaves[l]));
    r.decode.push_back(grads.scalar(out.decode_leaves[l]));
  }
  return r;
}

std::uint64_t sample_seed(std::uint64_t seed, std::size_t index) {
  return splitmix64(splitmix64(seed) ^ static_cast<std::uint64_t>(index));
}

void prepare_targets(const ModelWeights& w, std::vector<CalibSample>& samples, const ImportanceOptions& opts) {
  if (opts.use_provided) {
    for (auto& s : samples) {
      if (!s.provided || s.provided->empty()) throw DataError("calibration sample lacks a provided response");
      s.response = *s.provided;
    }
    return;
  }
  auto responses = parallel_map(
      samples.size(),
      [&](std::size_t i) {
        return sample_targets(w, samples[i].prompt, opts.sampling.max_len, opts.sampling.temperature,
                              sample_seed(opts.seed, i));
      },
      resolve_threads(opts.threads));
  for (std::size_t i = 0; i < samples.size(); ++i) samples[i].response = std::move(responses[i]);
}

std::vector<LayerImportance> summarize_gradients(const std::vector<GateGradients>& per_sample) {
  if (per_sample.empty()) throw DataError("no per-sample gradients to summarize");
  const std::size_t layers = per_sample.front().prefill.size();
  const auto n = static_cast<double>(per_sample.size());
  struct Stats {
    double score, mean, se;
  };
  auto stats = [&](std::size_t l, bool prefill) {
    double sq = 0.0, sum = 0.0;
    for (const auto& g : per_sample) {
      const double v = prefill ? g.prefill.at(l) : g.decode.at(l);
      sq += v * v;
      sum += v;
    }
    const double mean = sum / n;
    double var = 0.0;
    for (const auto& g : per_sample) {
      const double d = (prefill ? g.prefill[l] : g.decode[l]) - mean;
      var += d * d;
    }
    const double se = per_sample.size() > 1 ? std::sqrt(var / (n - 1.0) / n) : 0.0;
    return Stats{sq / n, mean, se};
  };
  std::vector<LayerImportance> out;
  for (std::size_t l = 0; l < layers; ++l) {
    const Stats p = stats(l, true), d = stats(l, false);
    out.push_back({l, p.score, d.score, p.mean, d.mean, p.se, d.se});
  }
  return out;
}

ImportanceProfile estimate_importance(const ModelWeights& w, std::vector<CalibSample> samples,
                                      const ImportanceOptions& opts) {
  if (samples.empty()) throw DataError("empty calibration set");
  prepare_targets(w, samples, opts);
  auto grads = parallel_map(
      samples.size(), [&](std::size_t i) { return gate_gradients(w, samples[i], opts.stage_aware); },
      resolve_threads(opts.threads));

  ImportanceProfile p;
  p.model_hash = model_hash(w);
  p.stage_aware = opts.stage_aware;
  p.num_samples = samples.size();
  p.seed = opts.seed;
  p.sampling = opts.sampling;
  p.self_sampled = !opts.use_provided;
  p.layers = summarize_gradients(grads);
  if (opts.keep_grads) p.per_sample = std::move(grads);
  return p;
}

std::string_view stage_name(Stage s) { return s == Stage::kPrefill ? "prefill" : "decode"; }

double brute_force_delta_loss(const ModelWeights& w, const std::vector<CalibSample>& samples, std::size_t layer,
                              Stage stage, std::size_t threads) {
  const std::size_t layers = w.config.num_layers;
  if (layer >= layers) throw ContractError("layer " + std::to_string(layer) + " out of range");
  if (samples.empty()) throw DataError("empty calibration set");
  auto deltas = parallel_map(
      samples.size(),
      [&](std::size_t i) {
        GateSchedule ones = GateSchedule::ones(layers, samples[i].prompt_len());
        GateSchedule ablated = ones;
        (stage == Stage::kPrefill ? ablated.prefill : ablated.decode)[layer] = 0.0;
        return response_loss(w, samples[i], ablated) - response_loss(w, samples[i], ones);
      },
      resolve_threads(threads));
  double sum = 0.0;
  for (double d : deltas) sum += d;
  return sum / static_cast<double>(samples.size());
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) throw DimensionError("spearman needs two equal-length series of length >= 2");
  const auto ra = average_ranks(a), rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    cov += (ra[i] - ma) * (rb[i] - mb);
    va += (ra[i] - ma) * (ra[i] - ma);
    vb += (rb[i] - mb) * (rb[i] - mb);
  }
  // NaN when either series is constant.
  return cov / std::sqrt(va * vb);
}

nlohmann::json profile_to_json(const ImportanceProfile& p) {
  nlohmann::json j;
  j["model_hash"] = p.model_hash;
  j["stage_aware"] = p.stage_aware;
  j["num_samples"] = p.num_samples;
  j["seed"] = p.seed;
  j["sampling"] = {{"temperature", p.sampling.temperature},
                   {"max_len", p.sampling.max_len},
                   {"self_sampled", p.self_sampled}};
  j["layers"] = nlohmann::json::array();
  for (const auto& l : p.layers) {
    j["layers"].push_back({{"index", l.index},
                           {"prefill_score", l.prefill_score},
                           {"decode_score", l.decode_score},
                           {"prefill_grad_mean", l.prefill_grad_mean},
                           {"decode_grad_mean", l.decode_grad_mean},
                           {"prefill_grad_se", l.prefill_grad_se},
                           {"decode_grad_se", l.decode_grad_se}});
  }
  if (!p.per_sample.empty()) {
    auto& arr = j["per_sample_grads"] = nlohmann::json::array();
    for (const auto& g : p.per_sample) {
      arr.push_back({{"prefill", g.prefill}, {"decode", g.decode}, {"loss", g.loss}, {"prefill_empty", g.prefill_empty}});
    }
  }
  return j;
}

ImportanceProfile profile_from_json(const nlohmann::json& j) {
  ImportanceProfile p;
  try {
    p.model_hash = j.at("model_hash").get<std::string>();
    p.stage_aware = j.at("stage_aware").get<bool>();
    p.num_samples = j.at("num_samples").get<std::size_t>();
    p.seed = j.at("seed").get<std::uint64_t>();
    const auto& s = j.at("sampling");
    p.sampling.temperature = s.at("temperature").get<double>();
    p.sampling.max_len = s.at("max_len").get<std::size_t>();
    p.self_sampled = s.value("self_sampled", true);
    for (const auto& l : j.at("layers")) {
      p.layers.push_back({l.at("index").get<std::size_t>(), l.at("prefill_score").get<double>(),
                          l.at("decode_score").get<double>(), l.at("prefill_grad_mean").get<double>(),
                          l.at("decode_grad_mean").get<double>(), l.at("prefill_grad_se").get<double>(),
                          l.at("decode_grad_se").get<double>()});
    }
    if (j.contains("per_sample_grads")) {
      for (const auto& g : j["per_sample_grads"]) {
        GateGradients gg;
        gg.prefill = g.at("prefill").get<std::vector<double>>();
        gg.decode = g.at("decode").get<std::vector<double>>();
        gg.loss = g.at("loss").get<double>();
        gg.prefill_empty = g.value("prefill_empty", false);
        gg.stage_aware = p.stage_aware;
        p.per_sample.push_back(std::move(gg));
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed importance profile: ") + e.what());
  }
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    if (p.layers[i].index != i) throw FormatError("importance profile layers out of order");
  }
  return p;
}

void save_profile(const ImportanceProfile& p, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw FileError("cannot write " + path.string());
  out << profile_to_json(p).dump(2) << '\n';
}

ImportanceProfile load_profile(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FileError("cannot open profile " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return profile_from_json(j);
}

std::vector<CalibPrompt> load_calibration_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FileError("cannot open calibration file " + path.string());
  std::vector<CalibPrompt> out;
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto j = nlohmann::json::parse(line);
      CalibPrompt p;
      p.prompt = j.at("prompt").get<std::string>();
      if (j.contains("response") && !j["response"].is_null()) p.response = j["response"].get<std::string>();
      out.push_back(std::move(p));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void save_calibration_jsonl(const std::vector<CalibPrompt>& prompts, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw FileError("cannot write " + path.string());
  for (const auto& p : prompts) {
    nlohmann::json j{{"prompt", p.prompt}};
    if (p.response) j["response"] = *p.response;
    // Corpus slices can cut a UTF-8 sequence; replace rather than fail.
    out << j.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace) << '\n';
  }
}

std::vector<CalibPrompt> calibration_from_text(std::string_view text, std::size_t count, std::size_t prompt_bytes,
                                               std::size_t response_bytes) {
  if (count == 0) throw DataError("calibration set size must be positive");
  if (text.size() < prompt_bytes + 1) throw DataError("text too short for a calibration prompt");
  const std::size_t room = text.size() - prompt_bytes;
  const std::size_t span = room > response_bytes ? room - response_bytes : 1;
  std::vector<CalibPrompt> out;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t off = i * span / count;
    CalibPrompt p;
    p.prompt = std::string(text.substr(off, prompt_bytes));
    if (response_bytes > 0) p.response = std::string(text.substr(off + prompt_bytes, response_bytes));
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<CalibSample> make_samples(const std::vector<CalibPrompt>& prompts) {
  std::vector<CalibSample> out;
  for (const auto& p : prompts) {
    CalibSample s;
    s.prompt = encode(p.prompt);
    if (p.response) s.provided = encode_bytes(*p.response);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace pop
