#include "pop/analysis.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>
#include <random>
#include <sstream>

#include "pop/checkpoint.hpp"
#include "pop/errors.hpp"
#include "pop/parallel.hpp"

namespace pop {

double LayerFlops::total() const {
  return q + k + v + o + attn_score + attn_value + ffn + norm + rope + softmax + act + residual;
}

LayerFlops& LayerFlops::operator+=(const LayerFlops& b) {
  q += b.q, k += b.k, v += b.v, o += b.o;
  attn_score += b.attn_score, attn_value += b.attn_value, ffn += b.ffn;
  norm += b.norm, rope += b.rope, softmax += b.softmax, act += b.act, residual += b.residual;
  return *this;
}

namespace {

// One intact layer processing one token that attends to `keys` positions.
LayerFlops full_token(const ModelConfig& c, std::size_t keys) {
  const double d = static_cast<double>(c.hidden), hd = static_cast<double>(c.head_dim);
  const double h = static_cast<double>(c.num_heads), kvh = static_cast<double>(c.num_kv_heads);
  const double f = static_cast<double>(c.ffn_dim), t = static_cast<double>(keys);
  LayerFlops r;
  r.q = 2 * d * h * hd;
  r.k = 2 * d * kvh * hd;
  r.v = r.k;
  r.o = 2 * h * hd * d;
  r.ffn = 3 * 2 * d * f;
  r.attn_score = 2 * hd * h * t;
  r.attn_value = 2 * hd * h * t;
  r.softmax = kSoftmaxFlopsPerElem * h * t;
  r.norm = 2 * kNormFlopsPerElem * d;
  r.rope = kRopeFlopsPerPair * (h + kvh) * hd / 2;
  r.act = kActFlopsPerElem * f;
  r.residual = 2 * kResidualFlopsPerElem * d;
  return r;
}

LayerFlops kv_token(const ModelConfig& c) {
  const double d = static_cast<double>(c.hidden), hd = static_cast<double>(c.head_dim);
  const double kvh = static_cast<double>(c.num_kv_heads);
  LayerFlops r;
  r.k = 2 * d * kvh * hd;
  r.v = r.k;
  r.norm = kNormFlopsPerElem * d;
  r.rope = kRopeFlopsPerPair * kvh * hd / 2;
  return r;
}

}  // namespace

FlopsReport count_flops(const ModelConfig& config, const PruningPlan& plan, std::size_t seq_len) {
  config.validate();
  if (seq_len == 0) throw ConfigError("seq_len must be at least 1");
  if (plan.num_layers != config.num_layers) throw ConfigError("plan layer count does not match the config");
  FlopsReport r;
  r.config_name = config.name;
  r.seq_len = seq_len;
  r.num_layers = config.num_layers;
  r.skip_set = plan.skip_set;
  r.kv_only_token = kv_token(config);
  for (std::size_t p = 0; p < seq_len; ++p) r.full_layer += full_token(config, p + 1);
  for (std::size_t p = 0; p + 1 < seq_len; ++p) r.pruned_layer += r.kv_only_token;
  r.pruned_layer += full_token(config, seq_len);
  const double d = static_cast<double>(config.hidden);
  r.head = kNormFlopsPerElem * d + 2 * d * static_cast<double>(config.vocab);

  const double skipped = static_cast<double>(plan.skip_set.size());
  const double kept = static_cast<double>(config.num_layers) - skipped;
  r.full_total = static_cast<double>(config.num_layers) * r.full_layer.total() + r.head;
  r.pop_total = kept * r.full_layer.total() + skipped * r.pruned_layer.total() + r.head;
  r.kv_only_total = skipped * static_cast<double>(seq_len - 1) * r.kv_only_token.total();
  const LayerFlops one = full_token(config, 1);
  r.kv_fraction = (one.k + one.v) / one.weight_gemm();
  r.theoretical_speedup = r.full_total / r.pop_total;
  return r;
}

namespace {

nlohmann::json layer_json(const LayerFlops& f) {
  return {{"q", f.q},
          {"k", f.k},
          {"v", f.v},
          {"o", f.o},
          {"attn_score", f.attn_score},
          {"attn_value", f.attn_value},
          {"ffn", f.ffn},
          {"norm", f.norm},
          {"rope", f.rope},
          {"softmax", f.softmax},
          {"act", f.act},
          {"residual", f.residual},
          {"total", f.total()}};
}

}  // namespace

nlohmann::json flops_to_json(const FlopsReport& r) {
  return {{"config", r.config_name},
          {"seq_len", r.seq_len},
          {"num_layers", r.num_layers},
          {"skip_set", r.skip_set},
          {"full_layer", layer_json(r.full_layer)},
          {"pruned_layer", layer_json(r.pruned_layer)},
          {"kv_only_token", layer_json(r.kv_only_token)},
          {"head", r.head},
          {"full_total", r.full_total},
          {"pop_total", r.pop_total},
          {"kv_only_total", r.kv_only_total},
          {"kv_fraction", r.kv_fraction},
          {"theoretical_speedup", r.theoretical_speedup}};
}

std::vector<std::vector<TokenId>> synthetic_prompts(std::size_t count, std::size_t len, std::uint64_t seed) {
  if (len == 0) throw ConfigError("prompt length must be at least 1");
  std::vector<std::vector<TokenId>> out;
  for (std::size_t i = 0; i < count; ++i) {
    std::mt19937_64 rng(sample_seed(seed, i));
    std::uniform_int_distribution<TokenId> byte(3, 258);
    std::vector<TokenId> p = {tokens::kBos};
    while (p.size() < len) p.push_back(byte(rng));
    out.push_back(std::move(p));
  }
  return out;
}

double median(std::vector<double> v) {
  if (v.empty()) throw DataError("median of an empty sample");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

namespace {

// Linear interpolation between order statistics.
double quantile(const std::vector<double>& sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

}  // namespace

double interquartile_range(std::vector<double> v) {
  if (v.empty()) throw DataError("interquartile range of an empty sample");
  std::sort(v.begin(), v.end());
  return quantile(v, 0.75) - quantile(v, 0.25);
}

BenchStats bench_ttft(const ModelWeights& w, const PruningPlan& plan, const BenchOptions& opts) {
  if (opts.reps < 5) throw ConfigError("bench needs at least 5 repetitions");
  if (opts.warmup < 2) throw ConfigError("bench needs at least 2 warmup runs");
  if (opts.batch == 0) throw ConfigError("bench batch must be positive");
  const auto prompts = synthetic_prompts(opts.batch, opts.seq_len, opts.seed);
  const std::size_t threads = std::max<std::size_t>(1, opts.threads);
  using Clock = std::chrono::steady_clock;

  auto run = [&](bool pruned, std::vector<TokenId>& first) {
    const auto t0 = Clock::now();
    auto outs = parallel_map(
        prompts.size(),
        [&](std::size_t i) {
          return pruned ? pop_generate(w, plan, prompts[i], 1, 0.0, 0) : generate(w, prompts[i], 1, 0.0, 0);
        },
        threads);
    const double dt = std::chrono::duration<double>(Clock::now() - t0).count();
    first.clear();
    for (const auto& o : outs) first.push_back(o.empty() ? TokenId{-1} : o.front());
    return dt;
  };

  BenchStats s;
  s.seq_len = opts.seq_len;
  s.batch = opts.batch;
  s.reps = opts.reps;
  s.warmup = opts.warmup;
  s.threads = threads;
  for (std::size_t i = 0; i < opts.warmup; ++i) {
    run(false, s.full_tokens);
    run(true, s.pop_tokens);
  }
  for (std::size_t i = 0; i < opts.reps; ++i) {
    s.full_times.push_back(run(false, s.full_tokens));
    s.pop_times.push_back(run(true, s.pop_tokens));
  }
  s.full_median = median(s.full_times);
  s.pop_median = median(s.pop_times);
  s.full_iqr = interquartile_range(s.full_times);
  s.pop_iqr = interquartile_range(s.pop_times);
  s.speedup = s.full_median / s.pop_median;
  return s;
}

nlohmann::json bench_to_json(const BenchStats& s) {
  return {{"seq_len", s.seq_len},         {"batch", s.batch},           {"reps", s.reps},
          {"warmup", s.warmup},           {"threads", s.threads},       {"full_median_s", s.full_median},
          {"full_iqr_s", s.full_iqr},     {"pop_median_s", s.pop_median}, {"pop_iqr_s", s.pop_iqr},
          {"speedup", s.speedup},         {"full_tokens", s.full_tokens}, {"pop_tokens", s.pop_tokens}};
}

double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("cosine: length mismatch");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0 && nb == 0) return 1.0;
  if (na == 0 || nb == 0) return 0.0;
  return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

namespace {

// Mean cosine over matching rows of two row-major blocks.
double mean_row_cosine(std::span<const double> a, std::span<const double> b, std::size_t width, std::size_t rows) {
  if (rows == 0) return std::numeric_limits<double>::quiet_NaN();
  double sum = 0;
  for (std::size_t r = 0; r < rows; ++r) sum += cosine(a.subspan(r * width, width), b.subspan(r * width, width));
  return sum / static_cast<double>(rows);
}

std::vector<LayerDrift> drift_one(const ModelWeights& w, const PruningPlan& plan, const std::vector<TokenId>& prompt) {
  const auto& c = w.config;
  const std::size_t layers = c.num_layers, n = prompt.size();
  if (n < 2) throw ContractError("drift diagnostics need prompts of at least 2 tokens");
  if (n + 1 > c.max_seq) throw CapacityError("drift prompt does not fit max_seq");
  const std::size_t d = c.hidden, width = c.num_kv_heads * c.head_dim;
  const std::size_t prefill = plan.boundary_handling ? n - 1 : n;
  auto span_of = [](const Tensor& t) { return std::span<const double>(t.data()); };
  std::vector<std::size_t> pos(prefill);
  for (std::size_t i = 0; i < prefill; ++i) pos[i] = i;
  const std::span<const TokenId> chunk(prompt.data(), prefill);

  std::vector<LayerDrift> out(layers);
  KVCache full_cache(c), pop_cache(c);
  Tensor xf = embed(w, chunk), xp = xf;
  for (std::size_t l = 0; l < layers; ++l) {
    out[l].layer = l;
    out[l].skipped = plan.skips(l);
    out[l].hidden = mean_row_cosine(span_of(xf), span_of(xp), d, n - 1);
    xf = layer_forward(w, l, xf, &full_cache, pos, 1.0);
    if (!plan.skips(l)) {
      xp = layer_forward(w, l, xp, &pop_cache, pos, 1.0);
    } else if (plan.indep_kv) {
      KVPair kv = kv_project(w, l, xp, pos);
      pop_cache.append(l, kv.k, kv.v, pos);
    }
    const std::size_t rows = std::min(pop_cache.length(l), n - 1);
    out[l].key = mean_row_cosine(full_cache.key_data(l), pop_cache.key_data(l), width, rows);
    out[l].value = mean_row_cosine(full_cache.value_data(l), pop_cache.value_data(l), width, rows);
  }

  TokenId next;
  if (plan.boundary_handling) {
    next = argmax_token(decode_step(w, full_cache, prompt[n - 1], n - 1).data());
    decode_step(w, pop_cache, prompt[n - 1], n - 1);
  } else {
    // The full pipeline already holds position n-1; recover its greedy
    // token from a separate full pass.
    next = argmax_token(std::span<const double>(forward_logits(w, prompt).data()).subspan((n - 1) * c.vocab, c.vocab));
  }
  std::vector<LayerProbe> pf, pp;
  decode_step(w, full_cache, next, n, {}, &pf);
  decode_step(w, pop_cache, next, n, {}, &pp);
  for (std::size_t l = 0; l < layers; ++l) out[l].attn_out = cosine(span_of(pf[l].attn_out), span_of(pp[l].attn_out));
  return out;
}

}  // namespace

DriftTrace drift_diagnostics(const ModelWeights& w, const PruningPlan& plan,
                             const std::vector<std::vector<TokenId>>& prompts, std::size_t threads) {
  if (prompts.empty()) throw DataError("drift diagnostics need at least one prompt");
  if (plan.num_layers != w.config.num_layers) throw ContractError("plan layer count does not match the model");
  auto per = parallel_map(
      prompts.size(), [&](std::size_t i) { return drift_one(w, plan, prompts[i]); },
      threads == 0 ? worker_count() : threads);
  DriftTrace t;
  t.num_prompts = prompts.size();
  const double m = static_cast<double>(prompts.size());
  for (std::size_t l = 0; l < w.config.num_layers; ++l) {
    LayerDrift avg{l, plan.skips(l), 0, 0, 0, 0};
    for (const auto& p : per) {
      avg.hidden += p[l].hidden / m;
      avg.key += p[l].key / m;
      avg.value += p[l].value / m;
      avg.attn_out += p[l].attn_out / m;
    }
    t.layers.push_back(avg);
  }
  return t;
}

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw FileError("cannot write " + path.string());
  out.precision(17);
  return out;
}

// Reads a CSV with the expected header into rows of fields.
std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path, const std::string& header) {
  std::ifstream in(path);
  if (!in) throw FileError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != header) throw FormatError(path.string() + ": expected header '" + header + "'");
  const auto columns = static_cast<std::size_t>(std::count(header.begin(), header.end(), ',')) + 1;
  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != columns) throw FormatError(path.string() + ": row '" + line + "' has the wrong column count");
    rows.push_back(std::move(f));
  }
  return rows;
}

double number(const std::filesystem::path& path, const std::string& cell) {
  if (cell == "nan") return std::numeric_limits<double>::quiet_NaN();
  try {
    std::size_t used = 0;
    const double v = std::stod(cell, &used);
    if (used != cell.size()) throw std::invalid_argument(cell);
    return v;
  } catch (const std::exception&) {
    throw FormatError(path.string() + ": bad number '" + cell + "'");
  }
}

std::size_t count_of(const std::filesystem::path& path, const std::string& cell) {
  const double v = number(path, cell);
  if (!(v >= 0) || v != std::floor(v)) throw FormatError(path.string() + ": bad count '" + cell + "'");
  return static_cast<std::size_t>(v);
}

const char* kDriftHeader = "layer,skipped,hidden,key,value,attn_out";
const char* kSweepHeader = "ratio,skipped_layers,resp_loss,first_token_agree,theoretical_speedup";
const char* kImportanceHeader =
    "layer,prefill_score,decode_score,prefill_grad_mean,decode_grad_mean,prefill_grad_se,decode_grad_se";

}  // namespace

void write_drift_csv(const std::filesystem::path& path, const DriftTrace& t) {
  auto out = open_out(path);
  out << kDriftHeader << '\n';
  for (const auto& l : t.layers) {
    out << l.layer << ',' << (l.skipped ? 1 : 0) << ',' << l.hidden << ',' << l.key << ',' << l.value << ','
        << l.attn_out << '\n';
  }
}

DriftTrace read_drift_csv(const std::filesystem::path& path) {
  DriftTrace t;
  for (const auto& f : read_csv(path, kDriftHeader)) {
    t.layers.push_back({count_of(path, f[0]), count_of(path, f[1]) != 0, number(path, f[2]), number(path, f[3]),
                        number(path, f[4]), number(path, f[5])});
  }
  return t;
}

namespace {

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char ch : s) {
    switch (ch) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += ch;
    }
  }
  return out;
}

}  // namespace

std::string svg_chart(const std::string& title, const std::string& x_label, const std::vector<double>& x,
                      const std::vector<SvgSeries>& series) {
  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  const double width = 640, height = 400, left = 60, right = 150, top = 40, bottom = 50;
  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin, ymin = xmin, ymax = -xmin;
  for (double v : x) xmin = std::min(xmin, v), xmax = std::max(xmax, v);
  for (const auto& s : series)
    for (double v : s.y)
      if (std::isfinite(v)) ymin = std::min(ymin, v), ymax = std::max(ymax, v);
  if (!std::isfinite(xmin)) xmin = 0, xmax = 1;
  if (!std::isfinite(ymin)) ymin = 0, ymax = 1;
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax == ymin) ymax = ymin + 1;
  const double pw = width - left - right, ph = height - top - bottom;
  auto sx = [&](double v) { return left + (v - xmin) / (xmax - xmin) * pw; };
  auto sy = [&](double v) { return top + ph - (v - ymin) / (ymax - ymin) * ph; };

  std::ostringstream o;
  o.precision(6);
  o << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
    << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n"
    << "<rect x=\"0\" y=\"0\" width=\"" << width << "\" height=\"" << height << "\" fill=\"white\"/>\n"
    << "<text x=\"" << left << "\" y=\"24\" font-size=\"16\">" << xml_escape(title) << "</text>\n"
    << "<line x1=\"" << left << "\" y1=\"" << top + ph << "\" x2=\"" << left + pw << "\" y2=\"" << top + ph
    << "\" stroke=\"black\"/>\n"
    << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + ph
    << "\" stroke=\"black\"/>\n"
    << "<text x=\"" << left + pw / 2 << "\" y=\"" << height - 12 << "\" font-size=\"12\">" << xml_escape(x_label)
    << "</text>\n"
    << "<text x=\"4\" y=\"" << top + 4 << "\" font-size=\"11\">" << ymax << "</text>\n"
    << "<text x=\"4\" y=\"" << top + ph << "\" font-size=\"11\">" << ymin << "</text>\n"
    << "<text x=\"" << left << "\" y=\"" << top + ph + 16 << "\" font-size=\"11\">" << xmin << "</text>\n"
    << "<text x=\"" << left + pw - 20 << "\" y=\"" << top + ph + 16 << "\" font-size=\"11\">" << xmax << "</text>\n";
  for (std::size_t i = 0; i < series.size(); ++i) {
    const char* color = kColors[i % std::size(kColors)];
    o << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    bool first = true;
    for (std::size_t j = 0; j < std::min(x.size(), series[i].y.size()); ++j) {
      if (!std::isfinite(series[i].y[j])) continue;
      o << (first ? "" : " ") << sx(x[j]) << ',' << sy(series[i].y[j]);
      first = false;
    }
    o << "\"/>\n";
    const double ly = top + 16 * static_cast<double>(i);
    o << "<line x1=\"" << left + pw + 10 << "\" y1=\"" << ly << "\" x2=\"" << left + pw + 30 << "\" y2=\"" << ly
      << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n"
      << "<text x=\"" << left + pw + 34 << "\" y=\"" << ly + 4 << "\" font-size=\"11\">" << xml_escape(series[i].name)
      << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw FileError("cannot write " + path.string());
  out << text;
}

std::vector<SweepRow> ratio_sweep(const ModelWeights& w, std::span<const double> ratios,
                                  const std::vector<CalibSample>& eval, std::size_t threads) {
  if (eval.empty()) throw DataError("ratio sweep needs an evaluation set");
  std::vector<SweepRow> rows;
  for (double r : ratios) {
    const PruningPlan plan = make_plan(w.config.num_layers, r, Strategy::kDeep);
    const VariantMetrics m = run_variant(w, "pop", r, eval, threads);
    const double speedup = count_flops(w.config, plan, eval.front().prompt_len()).theoretical_speedup;
    rows.push_back({r, plan.skip_set.size(), m.resp_loss, m.first_token_agree, speedup});
  }
  return rows;
}

void write_sweep_csv(const std::filesystem::path& path, const std::vector<SweepRow>& rows) {
  auto out = open_out(path);
  out << kSweepHeader << '\n';
  for (const auto& r : rows) {
    out << r.ratio << ',' << r.skipped << ',' << r.resp_loss << ',' << r.first_token_agree << ','
        << r.theoretical_speedup << '\n';
  }
}

std::vector<SweepRow> read_sweep_csv(const std::filesystem::path& path) {
  std::vector<SweepRow> rows;
  for (const auto& f : read_csv(path, kSweepHeader)) {
    rows.push_back({number(path, f[0]), count_of(path, f[1]), number(path, f[2]), number(path, f[3]),
                    number(path, f[4])});
  }
  return rows;
}

void write_importance_csv(const std::filesystem::path& path, const ImportanceProfile& p) {
  auto out = open_out(path);
  out << kImportanceHeader << '\n';
  for (const auto& l : p.layers) {
    out << l.index << ',' << l.prefill_score << ',' << l.decode_score << ',' << l.prefill_grad_mean << ','
        << l.decode_grad_mean << ',' << l.prefill_grad_se << ',' << l.decode_grad_se << '\n';
  }
}

std::vector<LayerImportance> read_importance_csv(const std::filesystem::path& path) {
  std::vector<LayerImportance> out;
  for (const auto& f : read_csv(path, kImportanceHeader)) {
    out.push_back({count_of(path, f[0]), number(path, f[1]), number(path, f[2]), number(path, f[3]),
                   number(path, f[4]), number(path, f[5]), number(path, f[6])});
  }
  return out;
}

FigureOutputs reproduce_figures(const std::filesystem::path& checkpoint, const std::vector<CalibPrompt>& calib,
                                const std::filesystem::path& outdir, const FigureOptions& opts) {
  if (!std::filesystem::exists(checkpoint)) throw FileError("checkpoint not found: " + checkpoint.string());
  const ModelWeights w = load_checkpoint(checkpoint);
  if (calib.empty()) throw DataError("figures need calibration prompts");
  std::vector<CalibPrompt> used(calib.begin(), calib.begin() + static_cast<std::ptrdiff_t>(
                                                                   std::min(opts.samples, calib.size())));
  auto samples = make_samples(used);
  for (auto& s : samples) {
    if (!s.provided || s.provided->empty()) throw DataError("figure calibration prompts need responses");
  }
  std::filesystem::create_directories(outdir);
  FigureOutputs out;
  const std::size_t layers = w.config.num_layers;
  std::vector<double> xs(layers);
  for (std::size_t l = 0; l < layers; ++l) xs[l] = static_cast<double>(l + 1);

  ImportanceOptions io;
  io.stage_aware = true;
  io.sampling = opts.sampling;
  io.seed = opts.seed;
  io.threads = opts.threads;
  out.profile = estimate_importance(w, samples, io);
  out.files.push_back(outdir / "importance.csv");
  write_importance_csv(out.files.back(), out.profile);
  {
    SvgSeries pre{"prefill", {}}, dec{"decode", {}};
    for (const auto& l : out.profile.layers) {
      pre.y.push_back(l.prefill_score);
      dec.y.push_back(l.decode_score);
    }
    out.files.push_back(outdir / "importance.svg");
    write_text(out.files.back(), svg_chart("Layer importance by stage", "layer (1-indexed)", xs, {pre, dec}));
  }

  std::vector<std::vector<TokenId>> prompts;
  for (const auto& s : samples) prompts.push_back(s.prompt);
  const PruningPlan plan = make_plan(layers, opts.ratio, Strategy::kDeep);
  out.drift = drift_diagnostics(w, plan, prompts, opts.threads);
  out.files.push_back(outdir / "drift.csv");
  write_drift_csv(out.files.back(), out.drift);
  {
    SvgSeries h{"hidden", {}}, k{"key", {}}, v{"value", {}}, a{"attn_out", {}};
    for (const auto& l : out.drift.layers) {
      h.y.push_back(l.hidden);
      k.y.push_back(l.key);
      v.y.push_back(l.value);
      a.y.push_back(l.attn_out);
    }
    out.files.push_back(outdir / "drift.svg");
    write_text(out.files.back(), svg_chart("Cosine similarity, POP vs full", "layer (1-indexed)", xs, {h, k, v, a}));
  }

  for (auto& s : samples) s.response = *s.provided;
  out.sweep = ratio_sweep(w, kSweepRatios, samples, opts.threads);
  out.files.push_back(outdir / "ratio_sweep.csv");
  write_sweep_csv(out.files.back(), out.sweep);
  {
    std::vector<double> rx;
    SvgSeries loss{"resp_loss", {}}, agree{"first_token_agree", {}}, speed{"theoretical_speedup", {}};
    for (const auto& r : out.sweep) {
      rx.push_back(r.ratio);
      loss.y.push_back(r.resp_loss);
      agree.y.push_back(r.first_token_agree);
      speed.y.push_back(r.theoretical_speedup);
    }
    out.files.push_back(outdir / "ratio_sweep.svg");
    write_text(out.files.back(), svg_chart("Pruning ratio sweep", "ratio", rx, {loss, agree, speed}));
  }
  return out;
}

}  // namespace pop
