#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <numeric>

#include <unistd.h>

#include "pop/errors.hpp"
#include "pop/pop_engine.hpp"
#include "test_support.hpp"

using namespace pop;
using namespace pop::testing;

namespace {

std::vector<std::size_t> range(std::size_t lo, std::size_t hi) {
  std::vector<std::size_t> v(hi - lo);
  std::iota(v.begin(), v.end(), lo);
  return v;
}

std::vector<TokenId> random_prompt(std::mt19937_64& rng, std::size_t n) {
  std::vector<TokenId> p = {tokens::kBos};
  while (p.size() < n) p.push_back(static_cast<TokenId>(3 + rng() % 256));
  return p;
}

PruningPlan plan_with(std::size_t layers, std::vector<std::size_t> skip) {
  PruningPlan p;
  p.num_layers = layers;
  p.skip_set = std::move(skip);
  return p;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST(MakePlan, DeepThirdOfThirtySix) {
  auto p = make_plan(36, 1.0 / 3.0, Strategy::kDeep);
  EXPECT_EQ(p.skip_set, range(24, 36));
  EXPECT_EQ(make_plan(36, 0.3333, Strategy::kDeep).skip_set, range(24, 36));
  EXPECT_TRUE(p.indep_kv);
  EXPECT_TRUE(p.boundary_handling);
}

TEST(MakePlan, CountsAndStrategies) {
  EXPECT_TRUE(make_plan(12, 0.0, Strategy::kDeep).skip_set.empty());
  EXPECT_EQ(make_plan(12, 1.0 / 3.0, Strategy::kShallow).skip_set, range(0, 4));
  EXPECT_EQ(make_plan(12, 1.0 / 3.0, Strategy::kInterleaved).skip_set, (std::vector<std::size_t>{2, 5, 8, 11}));
  EXPECT_EQ(make_plan(8, 0.25, Strategy::kInterleaved).skip_set, (std::vector<std::size_t>{3, 7}));
  EXPECT_EQ(make_plan(8, 0.5, Strategy::kInterleaved).skip_set, (std::vector<std::size_t>{1, 3, 5, 7}));
  // Stride 4 yields six layers; the seventh is the deepest one left.
  EXPECT_EQ(make_plan(22, 0.32, Strategy::kInterleaved).skip_set,
            (std::vector<std::size_t>{1, 5, 9, 13, 17, 20, 21}));
  for (std::size_t layers : {8u, 12u, 32u, 36u}) {
    for (double r : {1.0 / 6.0, 0.25, 1.0 / 3.0, 0.5, 2.0 / 3.0}) {
      for (auto s : {Strategy::kDeep, Strategy::kShallow, Strategy::kInterleaved}) {
        auto p = make_plan(layers, r, s);
        EXPECT_EQ(p.skip_set.size(), static_cast<std::size_t>(std::floor(r * layers + 1e-9)));
        EXPECT_TRUE(std::is_sorted(p.skip_set.begin(), p.skip_set.end()));
        EXPECT_EQ(make_plan(layers, r, s).skip_set, p.skip_set);
      }
    }
  }
}

TEST(MakePlan, FromProfileTakesLowestPrefillScores) {
  ImportanceProfile prof;
  for (std::size_t l = 0; l < 6; ++l) prof.layers.push_back({l});
  const double scores[] = {5.0, 0.5, 2.0, 0.5, 9.0, 0.1};
  for (std::size_t l = 0; l < 6; ++l) {
    prof.layers[l].prefill_score = scores[l];
    prof.layers[l].decode_score = 100.0 - scores[l];
  }
  // Layers 1 and 3 tie; the deeper one goes first.
  EXPECT_EQ(make_plan(6, 0.34, Strategy::kFromProfile, &prof).skip_set, (std::vector<std::size_t>{3, 5}));
  EXPECT_EQ(make_plan(6, 0.5, Strategy::kFromProfile, &prof).skip_set, (std::vector<std::size_t>{1, 3, 5}));
  EXPECT_THROW(make_plan(6, 0.5, Strategy::kFromProfile), ConfigError);
  EXPECT_THROW(make_plan(7, 0.5, Strategy::kFromProfile, &prof), ConfigError);
}

TEST(MakePlan, RejectsBadRatios) {
  EXPECT_THROW(make_plan(12, 1.0, Strategy::kDeep), ConfigError);
  EXPECT_THROW(make_plan(12, 1.5, Strategy::kDeep), ConfigError);
  EXPECT_THROW(make_plan(12, -0.1, Strategy::kDeep), ConfigError);
  EXPECT_THROW(make_plan(12, 0.05, Strategy::kDeep), ConfigError);
  EXPECT_THROW(parse_strategy("middle"), ConfigError);
  EXPECT_EQ(parse_strategy("from_profile"), Strategy::kFromProfile);
}

TEST(PlanJson, RoundTrip) {
  auto p = make_plan(12, 0.25, Strategy::kInterleaved);
  p.boundary_handling = false;
  auto j = plan_to_json(p);
  for (const char* key : {"strategy", "ratio", "skip_set", "indep_kv", "boundary_handling"}) EXPECT_TRUE(j.contains(key));
  auto q = plan_from_json(nlohmann::json::parse(j.dump()));
  EXPECT_EQ(q.skip_set, p.skip_set);
  EXPECT_EQ(q.ratio, p.ratio);
  EXPECT_EQ(q.strategy, p.strategy);
  EXPECT_EQ(q.num_layers, 12u);
  EXPECT_FALSE(q.boundary_handling);
  j["skip_set"] = {3, 1};
  EXPECT_THROW(plan_from_json(j), FormatError);
  EXPECT_THROW(plan_from_json(nlohmann::json{{"ratio", 0.5}}), FormatError);
}

TEST(PrunedPrefill, CacheIsCompleteWithIndependentKv) {
  const auto c = tiny_config(6);
  auto w = init_model(c, 1);
  std::mt19937_64 rng(1);
  auto prompt = random_prompt(rng, 9);
  auto plan = make_plan(6, 1.0 / 3.0, Strategy::kDeep);
  PopTrace trace;
  auto cache = pruned_prefill(w, plan, std::span(prompt).first(8), &trace);
  for (std::size_t l = 0; l < 6; ++l) {
    ASSERT_EQ(cache.length(l), 8u);
    for (std::size_t p = 0; p < 8; ++p) EXPECT_EQ(cache.positions(l)[p], p);
  }
  EXPECT_EQ(trace.total_records(), 8u * 6u);
  EXPECT_EQ(trace.count(Exec::kKvOnly), 8u * 2u);

  // The boundary step completes every layer to N positions.
  const TokenId last[] = {prompt.back()};
  run_chunk(w, last, 8, cache, std::vector<bool>(6, false), true);
  for (std::size_t l = 0; l < 6; ++l) {
    ASSERT_EQ(cache.length(l), 9u);
    EXPECT_EQ(cache.positions(l).back(), 8u);
  }
}

TEST(PrunedPrefill, WithoutIndependentKvSkippedLayersStayEmpty) {
  const auto c = tiny_config(6);
  auto w = init_model(c, 2);
  std::mt19937_64 rng(2);
  auto prompt = random_prompt(rng, 7);
  auto plan = make_plan(6, 0.5, Strategy::kDeep);
  plan.indep_kv = false;
  PopTrace trace;
  auto cache = pruned_prefill(w, plan, std::span(prompt).first(6), &trace);
  for (std::size_t l = 0; l < 6; ++l) EXPECT_EQ(cache.length(l), plan.skips(l) ? 0u : 6u);
  EXPECT_EQ(trace.count(Exec::kSkipped), 6u * 3u);
  EXPECT_EQ(trace.count(Exec::kKvOnly), 0u);
}

TEST(PrunedPrefill, EmptyPrefixGivesEmptyCache) {
  auto w = init_model(tiny_config(3), 3);
  PopTrace trace;
  auto cache = pruned_prefill(w, make_plan(3, 0.34, Strategy::kDeep), {}, &trace);
  for (std::size_t l = 0; l < 3; ++l) EXPECT_EQ(cache.length(l), 0u);
  EXPECT_EQ(trace.total_records(), 0u);
}

TEST(PrunedPrefill, RatioZeroMatchesFullPrefill) {
  const auto c = tiny_config(4);
  auto w = init_model(c, 4);
  std::mt19937_64 rng(4);
  auto prefix = random_prompt(rng, 12);
  auto cache = pruned_prefill(w, make_plan(4, 0.0, Strategy::kDeep), prefix);

  // Reference: one token at a time through the cached decode path.
  KVCache ref(c);
  for (std::size_t p = 0; p < prefix.size(); ++p) decode_step(w, ref, prefix[p], p);
  for (std::size_t l = 0; l < 4; ++l) {
    EXPECT_LE(max_abs_diff(cache.key_data(l), ref.key_data(l)), 1e-12);
    EXPECT_LE(max_abs_diff(cache.value_data(l), ref.value_data(l)), 1e-12);
  }
}

TEST(PopGenerate, RatioZeroMatchesGenerate) {
  auto w = init_model(tiny_config(4), 5);
  std::mt19937_64 rng(5);
  auto plan = make_plan(4, 0.0, Strategy::kDeep);
  for (std::size_t n : {1u, 2u, 7u, 20u}) {
    auto prompt = random_prompt(rng, n);
    EXPECT_EQ(pop_generate(w, plan, prompt, 12, 0.0, 0), generate(w, prompt, 12, 0.0, 0));
    EXPECT_EQ(pop_generate(w, plan, prompt, 12, 1.0, 9), generate(w, prompt, 12, 1.0, 9));
  }
}

TEST(PopGenerate, SingleTokenPromptRunsFullModel) {
  auto w = init_model(tiny_config(6), 6);
  const std::vector<TokenId> prompt = {tokens::kBos};
  PopTrace trace;
  auto out = pop_generate(w, make_plan(6, 0.5, Strategy::kDeep), prompt, 5, 0.0, 0, &trace);
  EXPECT_EQ(out, generate(w, prompt, 5, 0.0, 0));
  EXPECT_EQ(trace.count(Exec::kFull), trace.total_records());
  for (std::size_t n : trace.cache_after_prefill) EXPECT_EQ(n, 0u);
}

TEST(PopGenerate, BoundaryTokenRunsEveryLayer) {
  const auto c = tiny_config(6);
  auto w = init_model(c, 7);
  std::mt19937_64 rng(7);
  auto prompt = random_prompt(rng, 10);
  auto plan = make_plan(6, 1.0 / 3.0, Strategy::kDeep);
  PopTrace trace;
  auto out = pop_generate(w, plan, prompt, 4, 0.0, 0, &trace);
  for (Exec e : trace.at_position(9)) EXPECT_EQ(e, Exec::kFull);
  for (std::size_t p = 0; p < 9; ++p)
    for (std::size_t l = 0; l < 6; ++l)
      EXPECT_EQ(trace.at_position(p)[l], plan.skips(l) ? Exec::kKvOnly : Exec::kFull);
  for (std::size_t n : trace.cache_after_prefill) EXPECT_EQ(n, 9u);
  // Positions 0..8 prefill, 9 boundary, then one step per generated token but the last.
  EXPECT_EQ(trace.positions.size(), 10u + out.size() - 1);
  EXPECT_EQ(trace.total_records(), trace.positions.size() * 6);
  EXPECT_EQ(trace.count(Exec::kFull) + trace.count(Exec::kKvOnly) + trace.count(Exec::kSkipped),
            trace.total_records());
  EXPECT_GE(trace.ttft_seconds(), 0.0);
  EXPECT_LE(trace.prefill_end, trace.first_token);
}

TEST(PopGenerate, WithoutBoundaryTheLastPromptTokenIsPruned) {
  auto w = init_model(tiny_config(6), 8);
  std::mt19937_64 rng(8);
  auto prompt = random_prompt(rng, 10);
  auto plan = make_plan(6, 1.0 / 3.0, Strategy::kDeep);
  plan.boundary_handling = false;
  PopTrace trace;
  pop_generate(w, plan, prompt, 3, 0.0, 0, &trace);
  for (std::size_t l = 0; l < 6; ++l) EXPECT_EQ(trace.at_position(9)[l], plan.skips(l) ? Exec::kKvOnly : Exec::kFull);
  for (std::size_t n : trace.cache_after_prefill) EXPECT_EQ(n, 10u);
  for (Exec e : trace.at_position(10)) EXPECT_EQ(e, Exec::kFull);

  plan.indep_kv = false;
  pop_generate(w, plan, prompt, 3, 0.0, 0, &trace);
  for (std::size_t l = 0; l < 6; ++l) {
    EXPECT_EQ(trace.at_position(9)[l], plan.skips(l) ? Exec::kSkipped : Exec::kFull);
    EXPECT_EQ(trace.cache_after_prefill[l], plan.skips(l) ? 0u : 10u);
  }
}

TEST(PopGenerate, MatchesGatedGenerate) {
  const auto c = tiny_config(6);
  auto w = init_model(c, 9);
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 10; ++trial) {
    auto prompt = random_prompt(rng, 2 + rng() % 15);
    std::vector<std::size_t> skip;
    for (std::size_t l = 0; l < 6; ++l)
      if (rng() % 2) skip.push_back(l);
    auto plan = plan_with(6, skip);
    GateSchedule gates = GateSchedule::ones(6, prompt.size());
    for (std::size_t l : skip) gates.prefill[l] = 0.0;
    EXPECT_EQ(pop_generate(w, plan, prompt, 10, 0.0, 0), generate(w, prompt, 10, 0.0, 0, &gates));
  }
}

TEST(PopGenerate, CapacityAndEdgeCases) {
  auto w = init_model(tiny_config(3), 10);
  auto plan = make_plan(3, 0.34, Strategy::kDeep);
  EXPECT_THROW(pop_generate(w, plan, std::vector<TokenId>(64, 5), 1, 0.0, 0), CapacityError);
  EXPECT_THROW(pop_generate(w, plan, std::vector<TokenId>{}, 1, 0.0, 0), ContractError);
  EXPECT_EQ(pop_generate(w, plan, std::vector<TokenId>(63, 5), 10, 0.0, 0).size(), 1u);
  EXPECT_TRUE(pop_generate(w, plan, std::vector<TokenId>{1, 5}, 0, 0.0, 0).empty());
  EXPECT_THROW(pop_generate(w, make_plan(4, 0.25, Strategy::kDeep), std::vector<TokenId>{1}, 1, 0.0, 0),
               ContractError);
}

TEST(PopLogits, MatchesPrefillGatesAtZero) {
  const auto c = tiny_config(5);
  auto w = init_model(c, 11);
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t n = 1 + rng() % 10;
    auto tokens = random_prompt(rng, n + 1 + rng() % 6);
    std::vector<std::size_t> skip;
    for (std::size_t l = 0; l < 5; ++l)
      if (rng() % 3 == 0) skip.push_back(l);
    GateSchedule gates = GateSchedule::ones(5, n);
    for (std::size_t l : skip) gates.prefill[l] = 0.0;
    auto gated = forward_teacher_forced(w, tokens, gates).logits;
    auto pruned = pop_logits(w, plan_with(5, skip), tokens, n);
    EXPECT_LE(max_abs_diff(gated.data(), pruned.data()), 1e-12);
  }
}

TEST(PopLogits, RatioZeroMatchesFullForward) {
  auto w = init_model(tiny_config(3), 12);
  std::mt19937_64 rng(12);
  auto tokens = random_prompt(rng, 15);
  auto full = forward_logits(w, tokens);
  auto pop = pop_logits(w, make_plan(3, 0.0, Strategy::kDeep), tokens, 8);
  EXPECT_LE(max_abs_diff(full.data(), pop.data()), 1e-12);
}

TEST(Variants, PlansAndFullAgreement) {
  auto p = variant_plan("no_indep_kv", 12, 1.0 / 3.0);
  EXPECT_FALSE(p.indep_kv);
  EXPECT_EQ(p.skip_set, range(8, 12));
  EXPECT_FALSE(variant_plan("no_boundary", 12, 1.0 / 3.0).boundary_handling);
  EXPECT_TRUE(variant_plan("full", 12, 1.0 / 3.0).skip_set.empty());
  EXPECT_THROW(variant_plan("random", 12, 0.3), ConfigError);

  auto w = init_model(tiny_config(6), 13);
  std::mt19937_64 rng(13);
  std::vector<CalibSample> eval;
  for (int i = 0; i < 8; ++i) {
    CalibSample s;
    s.prompt = random_prompt(rng, 6);
    s.response = {40, 41, 42};
    eval.push_back(s);
  }
  auto full = run_variant(w, "full", 1.0 / 3.0, eval);
  EXPECT_EQ(full.first_token_agree, 1.0);
  EXPECT_EQ(full.ratio, 0.0);
  auto pop = run_variant(w, "pop", 1.0 / 3.0, eval, 1);
  EXPECT_EQ(pop.resp_loss, run_variant(w, "pop", 1.0 / 3.0, eval, 3).resp_loss);
  EXPECT_GT(pop.resp_loss, 0.0);
  EXPECT_THROW(run_variant(w, "pop", 1.0 / 3.0, {}), DataError);
}

TEST(Variants, CsvRoundTrip) {
  auto path = std::filesystem::temp_directory_path() / ("pop_variants_" + std::to_string(::getpid()) + ".csv");
  std::vector<VariantMetrics> rows = {{"pop", 1.0 / 3.0, 1.2345678901234567, 0.97}, {"full", 0.0, 1.1, 1.0}};
  write_variant_csv(path, rows);
  auto back = read_variant_csv(path);
  ASSERT_EQ(back.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(back[i].variant, rows[i].variant);
    EXPECT_EQ(back[i].ratio, rows[i].ratio);
    EXPECT_EQ(back[i].resp_loss, rows[i].resp_loss);
    EXPECT_EQ(back[i].first_token_agree, rows[i].first_token_agree);
  }
  std::ofstream(path) << "name,value\n";
  EXPECT_THROW(read_variant_csv(path), FormatError);
  std::filesystem::remove(path);
}
