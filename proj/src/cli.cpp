#include "pop/cli.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include "pop/analysis.hpp"
#include "pop/checkpoint.hpp"
#include "pop/errors.hpp"
#include "pop/importance.hpp"
#include "pop/parallel.hpp"
#include "pop/pop_engine.hpp"
#include "pop/trainer.hpp"

namespace pop {
namespace {

struct Args {
  std::string config = "toy.json";
  std::string checkpoint;
  std::string profile;
  std::string calib;
  std::string corpus = std::string(POP_DATA_DIR) + "/corpus.txt";
  std::string prompt;
  std::string out;
  std::string svg;
  std::string loss_csv;
  std::string strategy = "deep";
  double ratio = 1.0 / 3.0;
  double temperature = 0.0;
  double lr = 3e-3;
  std::uint64_t seed = 0;
  std::size_t samples = 200;
  std::size_t max_new = 64;
  std::size_t seq_len = 0;  // 0: the subcommand's own default
  std::size_t batch = 4;
  std::size_t reps = 5;
  std::size_t steps = 2000;
  std::size_t layers = 0;
  std::size_t prompt_bytes = 64;
  bool no_indep_kv = false;
  bool no_boundary = false;
  bool stage_aware = false;
  bool keep_grads = false;
  bool fixed_targets = false;
};

ModelConfig resolve_config(const std::string& name) { return load_config(name); }

ModelWeights require_checkpoint(const Args& a) {
  if (a.checkpoint.empty()) throw ConfigError("--checkpoint is required");
  return load_checkpoint(a.checkpoint);
}

std::size_t or_default(std::size_t v, std::size_t fallback) { return v == 0 ? fallback : v; }

// Calibration prompts from --calib, else evenly spaced held-out corpus slices.
std::vector<CalibPrompt> calibration(const Args& a, std::size_t response_bytes) {
  if (!a.calib.empty()) {
    auto c = load_calibration_jsonl(a.calib);
    if (c.size() > a.samples) c.resize(a.samples);
    return c;
  }
  const auto split = split_corpus(read_corpus(a.corpus));
  return calibration_from_text(split.heldout, a.samples, a.prompt_bytes, response_bytes);
}

PruningPlan build_plan(const Args& a, std::size_t layers) {
  std::optional<ImportanceProfile> prof;
  if (!a.profile.empty()) prof = load_profile(a.profile);
  const Strategy s = parse_strategy(a.strategy);
  if (s == Strategy::kFromProfile && !prof) throw ConfigError("--strategy from_profile needs --profile");
  PruningPlan p = make_plan(layers, a.ratio, s, prof ? &*prof : nullptr);
  p.indep_kv = !a.no_indep_kv;
  p.boundary_handling = !a.no_boundary;
  return p;
}

// 1-indexed layer list with runs collapsed, e.g. "25..36" or "3,6,9,12".
std::string one_indexed(const std::vector<std::size_t>& skip) {
  std::ostringstream o;
  for (std::size_t i = 0; i < skip.size();) {
    std::size_t j = i;
    while (j + 1 < skip.size() && skip[j + 1] == skip[j] + 1) ++j;
    if (i) o << ',';
    o << skip[i] + 1;
    if (j > i) o << ".." << skip[j] + 1;
    i = j + 1;
  }
  return skip.empty() ? "none" : o.str();
}

void emit_json(const nlohmann::json& j, const std::string& path, std::ostream& out) {
  if (!path.empty()) write_text(path, j.dump(2) + "\n");
  out << j.dump(2) << '\n';
}

int cmd_init(const Args& a, std::ostream& out) {
  if (a.out.empty()) throw ConfigError("--out is required");
  auto w = init_model(resolve_config(a.config), a.seed);
  save_checkpoint(w, a.out);
  out << "wrote " << a.out << " (" << w.config.name << ", hash " << model_hash(w) << ")\n";
  return kExitOk;
}

int cmd_train(const Args& a, std::ostream& out) {
  if (a.out.empty()) throw ConfigError("--out is required");
  ModelWeights init = a.checkpoint.empty() ? init_model(resolve_config(a.config), a.seed) : load_checkpoint(a.checkpoint);
  TrainConfig t;
  t.steps = a.steps;
  t.batch = a.batch;
  t.seq_len = or_default(a.seq_len, TrainConfig{}.seq_len);
  t.learning_rate = a.lr;
  t.seed = a.seed;
  t.corpus = a.corpus;
  const auto split = split_corpus(read_corpus(a.corpus));
  const double before = heldout_loss(init, split.heldout, t.seq_len);
  auto r = train(init, t, [&](std::size_t step, double loss) {
    if ((step + 1) % 100 == 0) out << "step " << step + 1 << " loss " << loss << '\n' << std::flush;
  });
  const double after = heldout_loss(r.weights, split.heldout, t.seq_len);
  save_checkpoint(r.weights, a.out);
  if (!a.loss_csv.empty()) write_loss_csv(a.loss_csv, r.losses);
  out << "heldout loss " << before << " -> " << after << " (" << std::setprecision(3)
      << 100.0 * (1.0 - after / before) << "% lower)\nwrote " << a.out << '\n';
  return kExitOk;
}

int cmd_generate(const Args& a, std::ostream& out) {
  auto w = require_checkpoint(a);
  auto toks = generate(w, encode(a.prompt), a.max_new, a.temperature, a.seed);
  out << decode(toks) << '\n';
  return kExitOk;
}

int cmd_pop_generate(const Args& a, std::ostream& out) {
  auto w = require_checkpoint(a);
  auto plan = build_plan(a, w.config.num_layers);
  PopTrace trace;
  auto toks = pop_generate(w, plan, encode(a.prompt), a.max_new, a.temperature, a.seed, &trace);
  out << decode(toks) << '\n'
      << "skipped layers (1-indexed): " << one_indexed(plan.skip_set) << '\n'
      << "trace: full " << trace.count(Exec::kFull) << ", kv_only " << trace.count(Exec::kKvOnly) << ", skipped "
      << trace.count(Exec::kSkipped) << " over " << trace.positions.size() << " positions; ttft "
      << trace.ttft_seconds() << " s\n";
  return kExitOk;
}

int cmd_importance(const Args& a, std::ostream& out) {
  auto w = require_checkpoint(a);
  ImportanceOptions o;
  o.stage_aware = a.stage_aware;
  o.seed = a.seed;
  o.sampling.temperature = a.temperature > 0 ? a.temperature : 1.0;
  o.sampling.max_len = a.max_new;
  o.keep_grads = a.keep_grads;
  o.use_provided = a.fixed_targets;
  auto p = estimate_importance(w, make_samples(calibration(a, a.max_new)), o);
  if (!a.out.empty()) save_profile(p, a.out);
  out << "layer,prefill_score,decode_score,prefill_grad_mean,prefill_grad_se,decode_grad_mean,decode_grad_se\n";
  for (const auto& l : p.layers) {
    out << l.index << ',' << l.prefill_score << ',' << l.decode_score << ',' << l.prefill_grad_mean << ','
        << l.prefill_grad_se << ',' << l.decode_grad_mean << ',' << l.decode_grad_se << '\n';
  }
  return kExitOk;
}

int cmd_plan(const Args& a, std::ostream& out) {
  const std::size_t layers = a.layers ? a.layers : resolve_config(a.config).num_layers;
  auto plan = build_plan(a, layers);
  emit_json(plan_to_json(plan), a.out, out);
  out << "skip set (1-indexed): [" << one_indexed(plan.skip_set) << "]\n";
  return kExitOk;
}

int cmd_flops(const Args& a, std::ostream& out) {
  auto c = resolve_config(a.config);
  auto r = count_flops(c, build_plan(a, c.num_layers), or_default(a.seq_len, 2048));
  emit_json(flops_to_json(r), a.out, out);
  return kExitOk;
}

int cmd_bench(const Args& a, std::ostream& out) {
  auto w = a.checkpoint.empty() ? init_model(resolve_config(a.config), a.seed) : load_checkpoint(a.checkpoint);
  BenchOptions o;
  o.seq_len = or_default(a.seq_len, 2048);
  o.batch = a.batch;
  o.reps = a.reps;
  o.seed = a.seed;
  o.threads = worker_count();
  emit_json(bench_to_json(bench_ttft(w, build_plan(a, w.config.num_layers), o)), a.out, out);
  return kExitOk;
}

int cmd_diagnose(const Args& a, std::ostream& out) {
  auto w = require_checkpoint(a);
  std::vector<std::vector<TokenId>> prompts;
  for (const auto& s : make_samples(calibration(a, 0))) prompts.push_back(s.prompt);
  auto t = drift_diagnostics(w, build_plan(a, w.config.num_layers), prompts);
  if (!a.out.empty()) write_drift_csv(a.out, t);
  if (!a.svg.empty()) {
    std::vector<double> xs;
    SvgSeries h{"hidden", {}}, k{"key", {}}, v{"value", {}}, o{"attn_out", {}};
    for (const auto& l : t.layers) {
      xs.push_back(static_cast<double>(l.layer + 1));
      h.y.push_back(l.hidden);
      k.y.push_back(l.key);
      v.y.push_back(l.value);
      o.y.push_back(l.attn_out);
    }
    write_text(a.svg, svg_chart("Cosine similarity, POP vs full", "layer (1-indexed)", xs, {h, k, v, o}));
  }
  out << "layer,skipped,hidden,key,value,attn_out\n";
  for (const auto& l : t.layers) {
    out << l.layer + 1 << ',' << l.skipped << ',' << l.hidden << ',' << l.key << ',' << l.value << ',' << l.attn_out
        << '\n';
  }
  return kExitOk;
}

int cmd_ablate(const Args& a, std::ostream& out) {
  auto w = require_checkpoint(a);
  auto samples = make_samples(calibration(a, a.max_new));
  for (auto& s : samples) {
    if (!s.provided || s.provided->empty()) throw DataError("ablation prompts need responses");
    s.response = *s.provided;
  }
  std::vector<VariantMetrics> rows;
  for (auto v : kVariants) rows.push_back(run_variant(w, v, a.ratio, samples));
  if (!a.out.empty()) write_variant_csv(a.out, rows);
  out << "variant,ratio,resp_loss,first_token_agree\n";
  for (const auto& r : rows) out << r.variant << ',' << r.ratio << ',' << r.resp_loss << ',' << r.first_token_agree << '\n';
  return kExitOk;
}

int cmd_figures(const Args& a, std::ostream& out) {
  if (a.out.empty()) throw ConfigError("--out (directory) is required");
  if (a.checkpoint.empty()) throw ConfigError("--checkpoint is required");
  FigureOptions o;
  o.samples = a.samples;
  o.seed = a.seed;
  o.ratio = a.ratio;
  o.sampling.max_len = a.max_new;
  auto r = reproduce_figures(a.checkpoint, calibration(a, a.max_new), a.out, o);
  for (const auto& f : r.files) out << "wrote " << f.string() << '\n';
  return kExitOk;
}

}  // namespace

int cli_dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Prefill-only pruning lab: train toy decoders, score layers, prune prefill, measure.", "pop"};
  app.require_subcommand(1);
  Args a;

  auto cfg = [&](CLI::App* s) { s->add_option("--config", a.config, "Model config JSON (bare names look in configs/)"); };
  auto ckpt = [&](CLI::App* s) { s->add_option("--checkpoint", a.checkpoint, "Checkpoint file"); };
  auto seed = [&](CLI::App* s) { s->add_option("--seed", a.seed, "Random seed"); };
  auto plan = [&](CLI::App* s) {
    s->add_option("--ratio", a.ratio, "Fraction of layers skipped during prefill, in [0, 1)");
    s->add_option("--strategy", a.strategy, "deep | shallow | interleaved | from_profile");
    s->add_option("--profile", a.profile, "Importance profile JSON for --strategy from_profile");
    s->add_flag("--no-indep-kv", a.no_indep_kv, "Do not cache keys/values for skipped layers");
    s->add_flag("--no-boundary", a.no_boundary, "Run the last prompt token through the pruned model");
  };
  auto calib = [&](CLI::App* s) {
    s->add_option("--samples", a.samples, "Number of calibration or evaluation prompts");
    s->add_option("--calib", a.calib, "Calibration JSONL (default: held-out corpus slices)");
    s->add_option("--corpus", a.corpus, "Corpus text file");
    s->add_option("--prompt-bytes", a.prompt_bytes, "Prompt length in bytes for corpus slices");
  };
  auto out_opt = [&](CLI::App* s, const char* what) { s->add_option("--out", a.out, what); };

  auto* init = app.add_subcommand("init", "Write a freshly initialized checkpoint");
  cfg(init), seed(init), out_opt(init, "Checkpoint to write");

  auto* trn = app.add_subcommand("train", "Pretrain on the corpus");
  cfg(trn), ckpt(trn), seed(trn), out_opt(trn, "Checkpoint to write");
  trn->add_option("--steps", a.steps, "Optimizer steps");
  trn->add_option("--batch", a.batch, "Sequences per step");
  trn->add_option("--seq-len", a.seq_len, "Bytes per training window (default 128)");
  trn->add_option("--lr", a.lr, "Peak learning rate");
  trn->add_option("--corpus", a.corpus, "Corpus text file");
  trn->add_option("--loss-csv", a.loss_csv, "Per-step loss CSV");

  auto* gen = app.add_subcommand("generate", "Generate with the full model");
  ckpt(gen), seed(gen);
  gen->add_option("--prompt", a.prompt, "Prompt text");
  gen->add_option("--max-new", a.max_new, "Maximum new tokens");
  gen->add_option("--temperature", a.temperature, "0 for greedy");

  auto* imp = app.add_subcommand("importance", "Estimate per-layer importance with virtual gates");
  ckpt(imp), seed(imp), calib(imp), out_opt(imp, "Profile JSON to write");
  imp->add_flag("--stage-aware", a.stage_aware, "Separate prefill and decode gates");
  imp->add_option("--max-new", a.max_new, "Sampled response length cap");
  imp->add_option("--temperature", a.temperature, "Target sampling temperature (default 1)");
  imp->add_flag("--keep-grads", a.keep_grads, "Store per-sample gradients in the profile");
  imp->add_flag("--fixed-targets", a.fixed_targets, "Score the calibration responses instead of sampling");

  auto* pln = app.add_subcommand("plan", "Build a pruning plan");
  cfg(pln), plan(pln), out_opt(pln, "Plan JSON to write");
  pln->add_option("--layers", a.layers, "Layer count (overrides --config)");

  auto* popg = app.add_subcommand("pop-generate", "Generate with pruned prefill");
  ckpt(popg), seed(popg), plan(popg);
  popg->add_option("--prompt", a.prompt, "Prompt text");
  popg->add_option("--max-new", a.max_new, "Maximum new tokens");
  popg->add_option("--temperature", a.temperature, "0 for greedy");

  auto* flp = app.add_subcommand("flops", "Analytic prefill FLOPs for a config and plan");
  cfg(flp), plan(flp), out_opt(flp, "Report JSON to write");
  flp->add_option("--seq-len", a.seq_len, "Prompt length (default 2048)");

  auto* bch = app.add_subcommand("bench", "Measure time to first token, full vs POP");
  cfg(bch), ckpt(bch), seed(bch), plan(bch), out_opt(bch, "Stats JSON to write");
  bch->add_option("--seq-len", a.seq_len, "Prompt length (default 2048)");
  bch->add_option("--batch", a.batch, "Prompts per repetition");
  bch->add_option("--reps", a.reps, "Timed repetitions (at least 5)");

  auto* dia = app.add_subcommand("diagnose", "Cosine-similarity drift of POP against the full model");
  ckpt(dia), plan(dia), calib(dia), out_opt(dia, "Drift CSV to write");
  dia->add_option("--svg", a.svg, "Drift chart to write");

  auto* abl = app.add_subcommand("ablate", "Evaluate every POP variant on held-out prompts");
  ckpt(abl), calib(abl), out_opt(abl, "Variant CSV to write");
  abl->add_option("--ratio", a.ratio, "Pruning ratio");
  abl->add_option("--max-new", a.max_new, "Response length in bytes");

  auto* fig = app.add_subcommand("figures", "Importance, drift and ratio-sweep CSV and SVG");
  ckpt(fig), seed(fig), calib(fig), out_opt(fig, "Output directory");
  fig->add_option("--ratio", a.ratio, "Pruning ratio for the drift traces");
  fig->add_option("--max-new", a.max_new, "Response length cap");

  if (argc <= 1) {
    err << app.help();
    return kExitUsage;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    // Top-level help lists every subcommand's flags.
    out << (app.get_subcommands().empty() ? app.help("", CLI::AppFormatMode::All) : app.help());
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  try {
    if (init->parsed()) return cmd_init(a, out);
    if (trn->parsed()) return cmd_train(a, out);
    if (gen->parsed()) return cmd_generate(a, out);
    if (imp->parsed()) return cmd_importance(a, out);
    if (pln->parsed()) return cmd_plan(a, out);
    if (popg->parsed()) return cmd_pop_generate(a, out);
    if (flp->parsed()) return cmd_flops(a, out);
    if (bch->parsed()) return cmd_bench(a, out);
    if (dia->parsed()) return cmd_diagnose(a, out);
    if (abl->parsed()) return cmd_ablate(a, out);
    if (fig->parsed()) return cmd_figures(a, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitData;
  }
  err << app.help();
  return kExitUsage;
}

}  // namespace pop
