#include "pop/pop_engine.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "pop/errors.hpp"
#include "pop/ops.hpp"
#include "pop/parallel.hpp"

namespace pop {

std::string_view strategy_name(Strategy s) {
  switch (s) {
    case Strategy::kDeep: return "deep";
    case Strategy::kShallow: return "shallow";
    case Strategy::kInterleaved: return "interleaved";
    case Strategy::kFromProfile: return "from_profile";
  }
  return "deep";
}

Strategy parse_strategy(std::string_view name) {
  if (name == "deep") return Strategy::kDeep;
  if (name == "shallow") return Strategy::kShallow;
  if (name == "interleaved") return Strategy::kInterleaved;
  if (name == "from_profile") return Strategy::kFromProfile;
  throw ConfigError("unknown strategy '" + std::string(name) + "' (deep, shallow, interleaved, from_profile)");
}

bool PruningPlan::skips(std::size_t layer) const {
  return std::binary_search(skip_set.begin(), skip_set.end(), layer);
}

std::vector<bool> PruningPlan::skip_mask() const {
  std::vector<bool> mask(num_layers, false);
  for (std::size_t l : skip_set) mask.at(l) = true;
  return mask;
}

std::size_t skip_count(std::size_t num_layers, double ratio) {
  return static_cast<std::size_t>(std::floor(ratio * static_cast<double>(num_layers) + 0.05));
}

PruningPlan make_plan(std::size_t num_layers, double ratio, Strategy strategy, const ImportanceProfile* profile) {
  if (num_layers == 0) throw ConfigError("plan needs at least one layer");
  if (!(ratio >= 0.0) || ratio >= 1.0) throw ConfigError("pruning ratio must lie in [0, 1)");
  const std::size_t k = skip_count(num_layers, ratio);
  if (ratio > 0.0 && k == 0) {
    throw ConfigError("ratio " + std::to_string(ratio) + " selects no layer out of " + std::to_string(num_layers));
  }
  if (k >= num_layers) throw ConfigError("ratio would skip every layer");

  PruningPlan plan;
  plan.num_layers = num_layers;
  plan.ratio = ratio;
  plan.strategy = strategy;
  std::vector<std::size_t>& s = plan.skip_set;
  switch (strategy) {
    case Strategy::kDeep:
      for (std::size_t i = 0; i < k; ++i) s.push_back(num_layers - k + i);
      break;
    case Strategy::kShallow:
      for (std::size_t i = 0; i < k; ++i) s.push_back(i);
      break;
    case Strategy::kInterleaved: {
      if (k == 0) break;
      const auto stride = static_cast<std::size_t>(std::max(1.0, std::ceil(1.0 / ratio - 0.05)));
      std::vector<bool> chosen(num_layers, false);
      std::size_t picked = 0;
      for (std::size_t l = num_layers; l-- > 0 && picked < k;) {
        if ((num_layers - 1 - l) % stride == 0) {
          chosen[l] = true;
          ++picked;
        }
      }
      for (std::size_t l = num_layers; l-- > 0 && picked < k;) {
        if (!chosen[l]) {
          chosen[l] = true;
          ++picked;
        }
      }
      for (std::size_t l = 0; l < num_layers; ++l)
        if (chosen[l]) s.push_back(l);
      break;
    }
    case Strategy::kFromProfile: {
      if (!profile) throw ConfigError("strategy from_profile needs an importance profile");
      if (profile->layers.size() != num_layers) {
        throw ConfigError("profile covers " + std::to_string(profile->layers.size()) + " layers, plan needs " +
                          std::to_string(num_layers));
      }
      std::vector<std::size_t> order(num_layers);
      for (std::size_t l = 0; l < num_layers; ++l) order[l] = l;
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const double sa = profile->layers[a].prefill_score, sb = profile->layers[b].prefill_score;
        return sa != sb ? sa < sb : a > b;
      });
      s.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
      std::sort(s.begin(), s.end());
      break;
    }
  }
  return plan;
}

nlohmann::json plan_to_json(const PruningPlan& p) {
  return {{"strategy", strategy_name(p.strategy)}, {"ratio", p.ratio},          {"num_layers", p.num_layers},
          {"skip_set", p.skip_set},               {"indep_kv", p.indep_kv}, {"boundary_handling", p.boundary_handling}};
}

PruningPlan plan_from_json(const nlohmann::json& j) {
  PruningPlan p;
  try {
    p.strategy = parse_strategy(j.at("strategy").get<std::string>());
    p.ratio = j.at("ratio").get<double>();
    p.skip_set = j.at("skip_set").get<std::vector<std::size_t>>();
    p.indep_kv = j.value("indep_kv", true);
    p.boundary_handling = j.value("boundary_handling", true);
    p.num_layers = j.value("num_layers", std::size_t{0});
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed plan: ") + e.what());
  }
  if (!std::is_sorted(p.skip_set.begin(), p.skip_set.end()) ||
      std::adjacent_find(p.skip_set.begin(), p.skip_set.end()) != p.skip_set.end()) {
    throw FormatError("plan skip_set must be sorted and unique");
  }
  if (p.num_layers > 0 && !p.skip_set.empty() && p.skip_set.back() >= p.num_layers) throw FormatError("plan skip_set index out of range");
  return p;
}

std::string_view exec_name(Exec e) {
  switch (e) {
    case Exec::kFull: return "full";
    case Exec::kKvOnly: return "kv_only";
    case Exec::kSkipped: return "skipped";
  }
  return "full";
}

std::size_t PopTrace::count(Exec e) const {
  std::size_t n = 0;
  for (const auto& row : records) n += static_cast<std::size_t>(std::count(row.begin(), row.end(), e));
  return n;
}

std::size_t PopTrace::total_records() const {
  std::size_t n = 0;
  for (const auto& row : records) n += row.size();
  return n;
}

const std::vector<Exec>& PopTrace::at_position(std::size_t pos) const {
  for (std::size_t i = 0; i < positions.size(); ++i)
    if (positions[i] == pos) return records[i];
  throw ContractError("trace has no record for position " + std::to_string(pos));
}

double PopTrace::ttft_seconds() const { return std::chrono::duration<double>(first_token - prefill_start).count(); }

Tensor run_chunk(const ModelWeights& w, std::span<const TokenId> tokens, std::size_t start, KVCache& cache,
                 const std::vector<bool>& skip, bool indep_kv, PopTrace* trace) {
  const std::size_t layers = w.config.num_layers;
  if (skip.size() != layers) throw ContractError("skip mask must have one entry per layer");
  if (tokens.empty()) throw ContractError("run_chunk: empty chunk");
  if (start + tokens.size() > w.config.max_seq) throw CapacityError("chunk runs past max_seq");
  std::vector<std::size_t> pos(tokens.size());
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = start + i;

  std::vector<Exec> row(layers, Exec::kFull);
  Tensor x = embed(w, tokens);
  for (std::size_t l = 0; l < layers; ++l) {
    if (!skip[l]) {
      x = layer_forward(w, l, x, &cache, pos, 1.0);
    } else if (indep_kv) {
      KVPair kv = kv_project(w, l, x, pos);
      cache.append(l, kv.k, kv.v, pos);
      row[l] = Exec::kKvOnly;
    } else {
      row[l] = Exec::kSkipped;
    }
  }
  if (trace) {
    trace->num_layers = layers;
    for (std::size_t p : pos) {
      trace->positions.push_back(p);
      trace->records.push_back(row);
    }
  }
  return x;
}

KVCache pruned_prefill(const ModelWeights& w, const PruningPlan& plan, std::span<const TokenId> prefix,
                       PopTrace* trace) {
  if (plan.num_layers != w.config.num_layers) throw ContractError("plan layer count does not match the model");
  KVCache cache(w.config);
  if (!prefix.empty()) run_chunk(w, prefix, 0, cache, plan.skip_mask(), plan.indep_kv, trace);
  return cache;
}

namespace {

Tensor last_row(const Tensor& x) { return slice_rows(x, x.rows() - 1, 1); }

void note_prefill_end(PopTrace* trace, const KVCache& cache) {
  if (!trace) return;
  trace->prefill_end = PopTrace::Clock::now();
  trace->cache_after_prefill.clear();
  for (std::size_t l = 0; l < cache.num_layers(); ++l) trace->cache_after_prefill.push_back(cache.length(l));
}

}  // namespace

std::vector<TokenId> pop_generate(const ModelWeights& w, const PruningPlan& plan, std::span<const TokenId> prompt,
                                  std::size_t max_new, double temperature, std::uint64_t seed, PopTrace* trace) {
  const auto& c = w.config;
  if (prompt.empty()) throw ContractError("pop_generate: empty prompt");
  if (plan.num_layers != c.num_layers) throw ContractError("plan layer count does not match the model");
  const std::size_t n = prompt.size();
  if (n >= c.max_seq) {
    throw CapacityError("prompt of " + std::to_string(n) + " tokens does not fit max_seq " + std::to_string(c.max_seq));
  }
  TokenSampler sampler(temperature, seed);
  std::vector<TokenId> out;
  if (trace) {
    *trace = PopTrace{};
    trace->num_layers = c.num_layers;
    trace->prefill_start = PopTrace::Clock::now();
  }
  if (max_new == 0) return out;

  const auto skip = plan.skip_mask();
  const std::vector<bool> none(c.num_layers, false);
  KVCache cache(c);
  std::size_t pos = n - 1;
  TokenId current = prompt[n - 1];
  if (plan.boundary_handling) {
    if (n > 1) run_chunk(w, prompt.first(n - 1), 0, cache, skip, plan.indep_kv, trace);
    note_prefill_end(trace, cache);
  } else {
    Tensor hidden = run_chunk(w, prompt, 0, cache, skip, plan.indep_kv, trace);
    note_prefill_end(trace, cache);
    current = sampler.next(output_logits(w, last_row(hidden)).data());
    out.push_back(current);
    if (trace) trace->first_token = PopTrace::Clock::now();
    ++pos;
    if (current == tokens::kEos) return out;
  }
  for (; out.size() < max_new && pos + 1 < c.max_seq; ++pos) {
    const TokenId tok[] = {current};
    Tensor hidden = run_chunk(w, tok, pos, cache, none, true, trace);
    current = sampler.next(output_logits(w, hidden).data());
    out.push_back(current);
    if (trace && out.size() == 1) trace->first_token = PopTrace::Clock::now();
    if (current == tokens::kEos) break;
  }
  return out;
}

Tensor staged_logits(const ModelWeights& w, std::span<const TokenId> tokens, std::size_t split,
                     const std::vector<bool>& first_skip, const std::vector<bool>& second_skip, bool first_indep_kv) {
  if (tokens.empty()) throw ContractError("staged_logits: empty sequence");
  if (split > tokens.size()) throw ContractError("staged_logits: split past the end");
  if (tokens.size() > w.config.max_seq) throw CapacityError("sequence exceeds max_seq");
  KVCache cache(w.config);
  const std::size_t v = w.config.vocab;
  Buffer out(tokens.size() * v);
  auto emit = [&](const Tensor& hidden, std::size_t row0) {
    Tensor logits = output_logits(w, hidden);
    std::memcpy(out.data() + row0 * v, logits.ptr(), logits.numel() * sizeof(double));
  };
  if (split > 0) emit(run_chunk(w, tokens.first(split), 0, cache, first_skip, first_indep_kv), 0);
  if (split < tokens.size()) emit(run_chunk(w, tokens.subspan(split), split, cache, second_skip, true), split);
  return Tensor({tokens.size(), v}, std::move(out));
}

Tensor pop_logits(const ModelWeights& w, const PruningPlan& plan, std::span<const TokenId> tokens,
                  std::size_t prompt_len) {
  if (prompt_len < 1 || prompt_len > tokens.size()) throw ContractError("prompt length out of range");
  const std::size_t split = plan.boundary_handling ? prompt_len - 1 : prompt_len;
  return staged_logits(w, tokens, split, plan.skip_mask(), std::vector<bool>(w.config.num_layers, false),
                       plan.indep_kv);
}

PruningPlan variant_plan(std::string_view variant, std::size_t num_layers, double ratio) {
  if (variant == "pop") return make_plan(num_layers, ratio, Strategy::kDeep);
  if (variant == "shallow") return make_plan(num_layers, ratio, Strategy::kShallow);
  if (variant == "interleaved") return make_plan(num_layers, ratio, Strategy::kInterleaved);
  if (variant == "no_indep_kv") {
    auto p = make_plan(num_layers, ratio, Strategy::kDeep);
    p.indep_kv = false;
    return p;
  }
  if (variant == "no_boundary") {
    auto p = make_plan(num_layers, ratio, Strategy::kDeep);
    p.boundary_handling = false;
    return p;
  }
  if (variant == "full") return make_plan(num_layers, 0.0, Strategy::kDeep);
  throw ConfigError("unknown variant '" + std::string(variant) +
                    "' (pop, shallow, interleaved, no_indep_kv, no_boundary, full)");
}

VariantMetrics run_variant(const ModelWeights& w, std::string_view variant, double ratio,
                           const std::vector<CalibSample>& eval, std::size_t threads) {
  const PruningPlan plan = variant_plan(variant, w.config.num_layers, ratio);
  if (eval.empty()) throw DataError("empty evaluation set");
  struct Row {
    double loss = 0.0;
    std::size_t tokens = 0;
    bool agree = false;
  };
  const std::size_t v = w.config.vocab;
  auto rows = parallel_map(
      eval.size(),
      [&](std::size_t i) {
        const CalibSample& s = eval[i];
        if (s.response.empty()) throw DataError("evaluation sample has no response");
        const auto tokens = s.tokens();
        const std::size_t n = s.prompt_len();
        Tensor full = forward_logits(w, tokens);
        Tensor pruned = plan.skip_set.empty() ? full : pop_logits(w, plan, tokens, n);
        Row r;
        auto row = [&](const Tensor& t, std::size_t p) { return std::span<const double>(t.data()).subspan(p * v, v); };
        r.agree = argmax_token(row(full, n - 1)) == argmax_token(row(pruned, n - 1));
        for (std::size_t p = n - 1; p + 1 < tokens.size(); ++p) {
          auto logits = row(pruned, p);
          const double m = *std::max_element(logits.begin(), logits.end());
          double z = 0.0;
          for (double x : logits) z += std::exp(x - m);
          r.loss += m + std::log(z) - logits[static_cast<std::size_t>(tokens[p + 1])];
          ++r.tokens;
        }
        return r;
      },
      threads == 0 ? worker_count() : threads);
  double loss = 0.0;
  std::size_t count = 0, agree = 0;
  for (const auto& r : rows) {
    loss += r.loss;
    count += r.tokens;
    agree += r.agree ? 1 : 0;
  }
  return {std::string(variant), variant == "full" ? 0.0 : ratio, loss / static_cast<double>(count),
          static_cast<double>(agree) / static_cast<double>(eval.size())};
}

void write_variant_csv(const std::filesystem::path& path, const std::vector<VariantMetrics>& rows) {
  std::ofstream out(path);
  if (!out) throw FileError("cannot write " + path.string());
  out << "variant,ratio,resp_loss,first_token_agree\n";
  out.precision(17);
  for (const auto& r : rows) out << r.variant << ',' << r.ratio << ',' << r.resp_loss << ',' << r.first_token_agree << '\n';
}

std::vector<VariantMetrics> read_variant_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FileError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "variant,ratio,resp_loss,first_token_agree") {
    throw FormatError(path.string() + ": unexpected header");
  }
  std::vector<VariantMetrics> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string f[4];
    for (auto& s : f)
      if (!std::getline(ss, s, ',')) throw FormatError(path.string() + ": short row '" + line + "'");
    try {
      rows.push_back({f[0], std::stod(f[1]), std::stod(f[2]), std::stod(f[3])});
    } catch (const std::exception&) {
      throw FormatError(path.string() + ": malformed row '" + line + "'");
    }
  }
  return rows;
}

}  // namespace pop
