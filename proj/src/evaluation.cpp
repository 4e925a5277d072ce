#include "blockrank/evaluation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <Eigen/QR>

#include "blockrank/checkpoint.hpp"

namespace blockrank {

namespace {

double median(std::vector<double> v) {
  if (v.empty()) return 0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

template <typename F>
double time_ms(F&& f) {
  const auto t0 = std::chrono::steady_clock::now();
  f();
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count();
}

void write_csv(const std::filesystem::path& path, const std::vector<std::string>& row_labels,
               const std::vector<std::string>& col_labels, const Mat<double>& m) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out.precision(10);
  out << "row";
  for (const auto& c : col_labels) out << ',' << c;
  out << '\n';
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    out << row_labels[static_cast<std::size_t>(r)];
    for (Eigen::Index c = 0; c < m.cols(); ++c) out << ',' << m(r, c);
    out << '\n';
  }
}

std::vector<std::string> positive_ids(const PreparedExample& ex) {
  std::vector<std::string> ids{ex.layout.doc_ids[static_cast<std::size_t>(ex.positive)]};
  for (int p : ex.other_positives) ids.push_back(ex.layout.doc_ids[static_cast<std::size_t>(p)]);
  return ids;
}

}  // namespace

nlohmann::json MetricsReport::to_json(bool with_per_query) const {
  nlohmann::json j = {{"p_at_1", p_at_1}, {"mrr_at_10", mrr_at_10}, {"ndcg_at_10", ndcg_at_10}, {"n_queries", n_queries}};
  if (with_per_query) {
    j["per_query"] = nlohmann::json::array();
    for (const auto& q : per_query)
      j["per_query"].push_back({{"p_at_1", q.p_at_1},
                                {"rr_at_10", q.rr_at_10},
                                {"ndcg_at_10", q.ndcg_at_10},
                                {"first_positive_rank", q.first_positive_rank}});
  }
  return j;
}

QueryMetrics query_metrics(std::span<const std::string> ranking, std::span<const std::string> positives) {
  if (positives.empty()) throw Error("query_metrics: no positives");
  const std::set<std::string> pos(positives.begin(), positives.end());
  QueryMetrics q;
  double dcg = 0;
  for (std::size_t r = 0; r < ranking.size(); ++r) {
    if (!pos.count(ranking[r])) continue;
    const int rank = static_cast<int>(r) + 1;
    if (q.first_positive_rank == 0) q.first_positive_rank = rank;
    if (rank <= 10) dcg += 1.0 / std::log2(rank + 1.0);
  }
  double idcg = 0;
  for (int r = 1; r <= std::min<int>(static_cast<int>(pos.size()), 10); ++r) idcg += 1.0 / std::log2(r + 1.0);
  q.p_at_1 = q.first_positive_rank == 1 ? 1.0 : 0.0;
  q.rr_at_10 = q.first_positive_rank >= 1 && q.first_positive_rank <= 10 ? 1.0 / q.first_positive_rank : 0.0;
  q.ndcg_at_10 = dcg / idcg;
  return q;
}

MetricsReport compute_metrics(std::span<const RankedPrediction> predictions,
                              std::span<const std::vector<std::string>> positives) {
  if (predictions.empty()) throw Error("compute_metrics: no predictions");
  if (predictions.size() != positives.size()) throw Error("compute_metrics: predictions and labels differ in count");
  MetricsReport rep;
  rep.n_queries = static_cast<int>(predictions.size());
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const auto q = query_metrics(predictions[i].ranked_ids, positives[i]);
    rep.p_at_1 += q.p_at_1;
    rep.mrr_at_10 += q.rr_at_10;
    rep.ndcg_at_10 += q.ndcg_at_10;
    rep.per_query.push_back(q);
  }
  rep.p_at_1 /= rep.n_queries;
  rep.mrr_at_10 /= rep.n_queries;
  rep.ndcg_at_10 /= rep.n_queries;
  return rep;
}

std::int64_t analytic_scored_pairs(int n_docs, int chunk_len, AttentionMode mode) {
  const std::int64_t n = n_docs, l = chunk_len;
  if (mode == AttentionMode::blockwise) return 3 * (n + 1) * l * l;
  return (n + 2) * l * (n + 2) * l;
}

nlohmann::json ComplexityRecord::to_json() const {
  nlohmann::json j = {{"n_docs", n_docs},     {"chunk_len", chunk_len},       {"d_model", d_model},
                      {"head_dim", head_dim}, {"mode", to_string(mode)},      {"scored_pairs", scored_pairs},
                      {"macs", macs}};
  j["instrumented_pairs"] = instrumented_pairs ? nlohmann::json(*instrumented_pairs) : nlohmann::json();
  return j;
}

ComplexityRecord count_attention_macs(const ModelConfig& cfg, int n_docs, int chunk_len, AttentionMode mode,
                                      bool instrument) {
  if (n_docs < 1 || chunk_len < 1) throw Error("count_attention_macs: N and L_chunk must be >= 1");
  ComplexityRecord rec;
  rec.n_docs = n_docs;
  rec.chunk_len = chunk_len;
  rec.d_model = cfg.d_model;
  rec.head_dim = cfg.head_dim();
  rec.mode = mode;
  rec.scored_pairs = analytic_scored_pairs(n_docs, chunk_len, mode);
  rec.macs = 2 * rec.scored_pairs * rec.head_dim;
  if (!instrument) return rec;

  ModelConfig run = cfg;
  run.attention_mode = mode;
  run.validate();
  std::mt19937_64 rng(static_cast<std::uint64_t>(n_docs) * 131 + static_cast<std::uint64_t>(chunk_len));
  std::uniform_int_distribution<int> tok(1, run.vocab_size - 1);
  auto random_seq = [&] {
    std::vector<int> s(static_cast<std::size_t>(chunk_len));
    for (auto& t : s) t = tok(rng);
    return s;
  };
  PromptSegments seg;
  seg.instruction = random_seq();
  for (int k = 0; k < n_docs; ++k) seg.documents.push_back({format_doc_id(k, id_digits_for(n_docs)), random_seq()});
  seg.query = random_seq();
  const int offset = std::max(2 * chunk_len, std::min(kDefaultQueryOffset, run.max_position - chunk_len));
  const auto layout = assign_positions(chunk_segments(seg, chunk_len), offset);

  AttentionCounter counter;
  TraceOptions opts;
  opts.counter = &counter;
  forward(init_parameters<float>(run, 0), layout, run, opts);
  rec.instrumented_pairs = counter.scored_pairs / counter.head_layer_calls;
  return rec;
}

PolyFit polyfit(std::span<const double> x, std::span<const double> y, int degree) {
  if (x.size() != y.size() || x.empty()) throw Error("polyfit: x and y must be non-empty and equal length");
  const auto n = static_cast<Eigen::Index>(x.size());
  const int k = degree + 1;
  if (degree < 0 || n < k) throw Error("polyfit: need at least degree + 1 points");
  Eigen::MatrixXd A(n, k);
  Eigen::VectorXd b(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double p = 1;
    for (int d = 0; d < k; ++d, p *= x[static_cast<std::size_t>(i)]) A(i, d) = p;
    b(i) = y[static_cast<std::size_t>(i)];
  }
  const Eigen::VectorXd c = A.colPivHouseholderQr().solve(b);
  PolyFit fit;
  fit.coef.assign(c.data(), c.data() + c.size());
  const Eigen::VectorXd resid = b - A * c;
  fit.rss = resid.squaredNorm();
  const double mean = b.mean();
  const double tss = (b.array() - mean).square().sum();
  fit.r2 = tss > 0 ? 1.0 - fit.rss / tss : 1.0;
  fit.aic = fit.rss > 0 ? static_cast<double>(n) * std::log(fit.rss / static_cast<double>(n)) + 2.0 * k
                        : -std::numeric_limits<double>::infinity();
  return fit;
}

nlohmann::json ScalingReport::to_json() const {
  nlohmann::json j = {{"records", nlohmann::json::array()}, {"fits", nlohmann::json::array()}};
  for (const auto& r : records)
    j["records"].push_back({{"mode", to_string(r.mode)},
                            {"method", to_string(r.method)},
                            {"n_docs", r.n_docs},
                            {"median_ms", r.median_ms},
                            {"repeats", r.repeats},
                            {"layers_executed", r.layers_executed},
                            {"decode_steps", r.decode_steps}});
  auto fit_json = [](const PolyFit& f) {
    return nlohmann::json{{"coef", f.coef}, {"rss", f.rss}, {"r2", f.r2},
                          {"aic", std::isfinite(f.aic) ? nlohmann::json(f.aic) : nlohmann::json("-inf")}};
  };
  for (const auto& f : fits)
    j["fits"].push_back({{"mode", to_string(f.mode)},
                         {"method", to_string(f.method)},
                         {"linear", fit_json(f.linear)},
                         {"quadratic", fit_json(f.quadratic)}});
  return j;
}

std::string ScalingReport::to_csv() const {
  std::ostringstream out;
  out.precision(10);
  out << "mode,method,n_docs,median_ms,repeats,layers_executed,decode_steps\n";
  for (const auto& r : records)
    out << to_string(r.mode) << ',' << to_string(r.method) << ',' << r.n_docs << ',' << r.median_ms << ','
        << r.repeats << ',' << r.layers_executed << ',' << r.decode_steps << '\n';
  return out.str();
}

ScalingReport scaling_benchmark(const Parameters<float>& params, const ModelConfig& cfg, const PromptBuilder& builder,
                                const BenchmarkSpec& spec) {
  if (spec.repeats < 1) throw Error("scaling_benchmark: repeats must be >= 1");
  struct Cell {
    AttentionMode mode;
    InferenceMethod method;
    int n;
    ChunkLayout layout;
    DecodeTokens tok;
    ModelConfig run;
    RankedPrediction last;
    std::vector<double> times;
  };
  std::vector<Cell> cells;
  for (int n : spec.n_values) {
    SyntheticTaskConfig task = spec.task;
    task.n_docs = n;
    const auto ex = generate_synthetic_dataset(task, 1).front();
    TemplateConfig tmpl = builder.template_config();
    tmpl.id_digits = id_digits_for(n);
    const PromptBuilder sized(builder.vocab(), tmpl, builder.layout_config());
    const auto layout = sized.build(ex, false);
    for (auto mode : spec.modes) {
      ModelConfig run = cfg;
      run.attention_mode = mode;
      for (auto method : spec.methods) cells.push_back({mode, method, n, layout, sized.decode_tokens(), run, {}, {}});
    }
  }
  auto once = [&](Cell& c) {
    switch (c.method) {
      case InferenceMethod::attention: c.last = rank_by_attention(params, c.layout, c.run, spec.l_star, 0); break;
      case InferenceMethod::greedy: c.last = greedy_decode_id(params, c.layout, c.run, c.tok); break;
      case InferenceMethod::beam: c.last = constrained_beam_decode(params, c.layout, c.run, c.tok, spec.beam); break;
    }
  };
  for (auto& c : cells)
    for (int w = 0; w < spec.warmup; ++w) once(c);
  // Round-robin over cells so slow periods on the host hit every N alike.
  for (int r = 0; r < spec.repeats; ++r)
    for (auto& c : cells) c.times.push_back(time_ms([&] { once(c); }));

  ScalingReport rep;
  for (auto& c : cells)
    rep.records.push_back({c.mode, c.method, c.n, median(c.times), spec.repeats, c.last.layers_executed,
                           c.last.decode_steps});
  for (auto mode : spec.modes)
    for (auto method : spec.methods) {
      std::vector<double> xs, ys;
      for (const auto& r : rep.records)
        if (r.mode == mode && r.method == method) {
          xs.push_back(r.n_docs);
          ys.push_back(r.median_ms);
        }
      if (xs.size() < 3) continue;
      rep.fits.push_back({mode, method, polyfit(xs, ys, 1), polyfit(xs, ys, 2)});
    }
  return rep;
}

HeatmapExport export_attention_heatmaps(const ForwardTrace<float>& trace, const ChunkLayout& layout,
                                        std::span<const int> layers, std::span<const int> tracked_tokens) {
  if (trace.attention.empty())
    throw Error("export_attention_heatmaps: trace has no attention maps (analysis mode off)");
  const int n_layers = static_cast<int>(trace.attention.size());
  const int N = layout.n_docs();
  const int C = layout.n_chunks();

  HeatmapExport h;
  h.layers.assign(layers.begin(), layers.end());
  h.segment_labels.push_back("inst");
  for (const auto& id : layout.doc_ids) h.segment_labels.push_back("doc_" + id);
  h.segment_labels.push_back("query");
  h.tracked_tokens.assign(tracked_tokens.begin(), tracked_tokens.end());
  if (h.tracked_tokens.empty()) h.tracked_tokens = layout.signal_token_indices;
  const int q_valid = layout.chunks.back().n_valid;
  for (int t : h.tracked_tokens)
    if (t < 0 || t >= q_valid) throw Error("export_attention_heatmaps: tracked token " + std::to_string(t) + " is not a valid query token");

  auto doc_mass = [&](const Mat<float>& A, int row, int k) {
    double s = 0;
    for (int j : layout.doc_token_index_sets[static_cast<std::size_t>(k)]) s += A(row, j);
    return s;
  };

  for (int l : h.layers) {
    if (l < 0 || l >= n_layers) throw Error("export_attention_heatmaps: layer " + std::to_string(l) + " was not executed");
    const auto& A = trace.attention[static_cast<std::size_t>(l)];
    Mat<double> seg = Mat<double>::Zero(C, C);
    for (int a = 0; a < C; ++a) {
      const int rows = layout.chunks[static_cast<std::size_t>(a)].n_valid;
      for (int r = 0; r < rows; ++r) {
        const int i = layout.chunk_begin(a) + r;
        for (int b = 0; b < C; ++b)
          for (int c = 0; c < layout.chunks[static_cast<std::size_t>(b)].n_valid; ++c)
            seg(a, b) += A(i, layout.chunk_begin(b) + c);
      }
      if (rows > 0) seg.row(a) /= rows;
    }
    h.segment_mass.push_back(std::move(seg));

    Mat<double> qd(q_valid, N);
    for (int r = 0; r < q_valid; ++r)
      for (int k = 0; k < N; ++k) qd(r, k) = doc_mass(A, layout.query_begin() + r, k);
    h.query_token_doc.push_back(std::move(qd));
  }

  for (int t : h.tracked_tokens) {
    Mat<double> ld(n_layers, N);
    for (int l = 0; l < n_layers; ++l)
      for (int k = 0; k < N; ++k) ld(l, k) = doc_mass(trace.attention[static_cast<std::size_t>(l)], layout.query_begin() + t, k);
    h.layer_doc.push_back(std::move(ld));
  }

  h.metadata = {{"layers", h.layers},
                {"segment_labels", h.segment_labels},
                {"tracked_tokens", h.tracked_tokens},
                {"signal_token_indices", layout.signal_token_indices},
                {"doc_ids", layout.doc_ids},
                {"query_valid_tokens", q_valid},
                {"layers_executed", trace.layers_executed}};
  return h;
}

HeatmapExport export_attention_heatmaps(const Parameters<float>& params, const ChunkLayout& layout,
                                        const ModelConfig& cfg, std::span<const int> layers,
                                        std::span<const int> tracked_tokens) {
  TraceOptions opts;
  opts.retain_attention = true;
  const auto trace = forward(params, layout, cfg, opts);
  auto h = export_attention_heatmaps(trace, layout, layers, tracked_tokens);
  h.metadata["attention_mode"] = to_string(cfg.attention_mode);
  return h;
}

std::vector<std::filesystem::path> write_heatmaps(const HeatmapExport& h, const std::filesystem::path& dir,
                                                  const std::string& digest) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> paths;
  std::vector<std::string> doc_labels(h.segment_labels.begin() + 1, h.segment_labels.end() - 1);
  nlohmann::json summary = h.metadata;
  summary["files"] = nlohmann::json::array();
  for (std::size_t i = 0; i < h.layers.size(); ++i) {
    const auto l = std::to_string(h.layers[i]);
    auto p = dir / ("segment_mass_l" + l + "_" + digest + ".csv");
    write_csv(p, h.segment_labels, h.segment_labels, h.segment_mass[i]);
    paths.push_back(p);
    std::vector<std::string> rows;
    for (Eigen::Index r = 0; r < h.query_token_doc[i].rows(); ++r) rows.push_back("q" + std::to_string(r));
    p = dir / ("query_token_doc_l" + l + "_" + digest + ".csv");
    write_csv(p, rows, doc_labels, h.query_token_doc[i]);
    paths.push_back(p);
  }
  for (std::size_t i = 0; i < h.tracked_tokens.size(); ++i) {
    std::vector<std::string> rows;
    for (Eigen::Index r = 0; r < h.layer_doc[i].rows(); ++r) rows.push_back("layer" + std::to_string(r));
    auto p = dir / ("layer_doc_q" + std::to_string(h.tracked_tokens[i]) + "_" + digest + ".csv");
    write_csv(p, rows, doc_labels, h.layer_doc[i]);
    paths.push_back(p);
  }
  for (const auto& p : paths) summary["files"].push_back(p.filename().string());
  const auto json_path = dir / ("heatmaps_" + digest + ".json");
  std::ofstream(json_path) << summary.dump(2) << '\n';
  paths.push_back(json_path);
  return paths;
}

nlohmann::json LayerwiseCurve::to_json() const {
  return {{"p_at_1", p_at_1}, {"mrr_at_10", mrr_at_10}, {"n_queries", n_queries}};
}

LayerwiseCurve layerwise_attention_precision(const Parameters<float>& params, const ModelConfig& cfg,
                                             std::span<const PreparedExample> examples,
                                             SignalAggregation aggregation) {
  if (examples.empty()) throw Error("layerwise_attention_precision: no examples");
  LayerwiseCurve curve;
  curve.p_at_1.assign(static_cast<std::size_t>(cfg.n_layers), 0.0);
  curve.mrr_at_10.assign(static_cast<std::size_t>(cfg.n_layers), 0.0);
  TraceOptions opts;
  opts.stop_layer = cfg.n_layers - 1;
  opts.cache_qk_all = true;
  for (const auto& ex : examples) {
    const auto trace = forward(params, ex.layout, cfg, opts);
    const auto pos = positive_ids(ex);
    for (int l = 0; l < cfg.n_layers; ++l) {
      const auto s = attention_mass_scores(trace, ex.layout, cfg.n_heads, l, aggregation);
      const auto ranked = rank_from_scores(s.scores, ex.layout.doc_ids, 0);
      const auto q = query_metrics(ranked.ranked_ids, pos);
      curve.p_at_1[static_cast<std::size_t>(l)] += q.p_at_1;
      curve.mrr_at_10[static_cast<std::size_t>(l)] += q.rr_at_10;
    }
  }
  curve.n_queries = static_cast<int>(examples.size());
  for (int l = 0; l < cfg.n_layers; ++l) {
    curve.p_at_1[static_cast<std::size_t>(l)] /= curve.n_queries;
    curve.mrr_at_10[static_cast<std::size_t>(l)] /= curve.n_queries;
  }
  return curve;
}

nlohmann::json EntropyStats::to_json() const {
  nlohmann::json j = {{"n_lists", n_lists}};
  for (int p = 0; p < 2; ++p)
    j["id_" + std::to_string(p)] = {{"mean", mean[p]}, {"std", stddev[p]}, {"stderr", stderr_[p]}};
  return j;
}

double digit_entropy_bits(std::span<const std::string> ids, int position) {
  if (ids.empty()) throw Error("digit_entropy_bits: no ids");
  std::array<int, 10> counts{};
  for (const auto& id : ids) {
    if (position < 0 || position >= static_cast<int>(id.size())) throw Error("digit_entropy_bits: id '" + id + "' too short");
    const char c = id[static_cast<std::size_t>(position)];
    if (c < '0' || c > '9') throw Error("digit_entropy_bits: non-digit in id '" + id + "'");
    ++counts[static_cast<std::size_t>(c - '0')];
  }
  double h = 0;
  const double n = static_cast<double>(ids.size());
  for (int c : counts)
    if (c > 0) h -= (c / n) * std::log2(c / n);
  return h;
}

EntropyStats id_digit_entropy(std::span<const std::vector<std::string>> lists) {
  if (lists.empty()) throw Error("id_digit_entropy: no lists");
  std::vector<double> values[2];
  for (std::size_t i = 0; i < lists.size(); ++i) {
    const auto& l = lists[i];
    if (l.size() != 10) throw Error("id_digit_entropy: list " + std::to_string(i) + " has " + std::to_string(l.size()) + " ids, expected 10");
    if (std::set<std::string>(l.begin(), l.end()).size() != l.size())
      throw Error("id_digit_entropy: list " + std::to_string(i) + " has duplicate ids");
    for (const auto& id : l)
      if (id.size() != 2) throw Error("id_digit_entropy: id '" + id + "' is not two digits");
    for (int p = 0; p < 2; ++p) values[p].push_back(digit_entropy_bits(l, p));
  }
  EntropyStats s;
  s.n_lists = static_cast<int>(lists.size());
  for (int p = 0; p < 2; ++p) {
    const auto& v = values[p];
    const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double ss = 0;
    for (double x : v) ss += (x - m) * (x - m);
    s.mean[p] = m;
    s.stddev[p] = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
    s.stderr_[p] = s.stddev[p] / std::sqrt(static_cast<double>(v.size()));
  }
  return s;
}

std::vector<std::vector<std::string>> random_id_lists(int n_lists, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<int> pool(100);
  std::iota(pool.begin(), pool.end(), 0);
  std::vector<std::vector<std::string>> out;
  for (int i = 0; i < n_lists; ++i) {
    // partial Fisher-Yates: the first 10 slots are a uniform draw without replacement
    for (int k = 0; k < 10; ++k) {
      std::uniform_int_distribution<int> pick(k, 99);
      std::swap(pool[static_cast<std::size_t>(k)], pool[static_cast<std::size_t>(pick(rng))]);
    }
    std::vector<std::string> ids;
    for (int k = 0; k < 10; ++k) ids.push_back(format_doc_id(pool[static_cast<std::size_t>(k)], 2));
    out.push_back(std::move(ids));
  }
  return out;
}

std::vector<PreparedExample> prepare_eval_set(std::span<const RetrievalExample> examples,
                                              const PromptBuilder& builder, int n_docs, std::uint64_t seed) {
  std::vector<PreparedExample> out;
  out.reserve(examples.size());
  for (std::size_t i = 0; i < examples.size(); ++i)
    out.push_back(prepare_example(examples[i], builder, n_docs, mix_seed(seed, i), false));
  return out;
}

EvalResult evaluate(const Parameters<float>& params, const ModelConfig& cfg, const PromptBuilder& builder,
                    std::span<const PreparedExample> examples, const EvalOptions& opts) {
  if (examples.empty()) throw Error("evaluate: no examples");
  const auto tok = builder.decode_tokens();
  EvalResult res;
  std::vector<double> times;
  for (const auto& ex : examples) {
    RankedPrediction p;
    const int k = std::min(opts.top_k, ex.layout.n_docs());
    times.push_back(time_ms([&] {
      switch (opts.method) {
        case InferenceMethod::attention:
          p = rank_by_attention(params, ex.layout, cfg, opts.l_star, k, opts.aggregation);
          break;
        case InferenceMethod::greedy: p = greedy_decode_id(params, ex.layout, cfg, tok); break;
        case InferenceMethod::beam: p = constrained_beam_decode(params, ex.layout, cfg, tok, opts.beam); break;
      }
    }));
    res.predictions.push_back(std::move(p));
    res.positives.push_back(positive_ids(ex));
  }
  res.metrics = compute_metrics(res.predictions, res.positives);
  res.median_latency_ms = median(times);
  return res;
}

nlohmann::json AblationReport::to_json() const {
  nlohmann::json cells_json = nlohmann::json::array();
  for (const auto& c : cells) {
    nlohmann::json j = {{"loss_mode", to_string(c.loss_mode)},
                        {"attention_mode", to_string(c.attention_mode)},
                        {"query_in_prefix", c.query_in_prefix},
                        {"method", to_string(c.method)},
                        {"median_latency_ms", c.median_latency_ms}};
    j["metrics"] = c.metrics ? c.metrics->to_json() : nlohmann::json();
    if (!c.error.empty()) j["error"] = c.error;
    cells_json.push_back(std::move(j));
  }
  return {{"cells", cells_json}};
}

std::string AblationReport::to_csv() const {
  std::ostringstream out;
  out.precision(6);
  out << "loss_mode,attention_mode,query_in_prefix,method,p_at_1,mrr_at_10,ndcg_at_10,median_latency_ms,error\n";
  for (const auto& c : cells) {
    out << to_string(c.loss_mode) << ',' << to_string(c.attention_mode) << ',' << (c.query_in_prefix ? "true" : "false")
        << ',' << to_string(c.method) << ',';
    if (c.metrics)
      out << c.metrics->p_at_1 << ',' << c.metrics->mrr_at_10 << ',' << c.metrics->ndcg_at_10;
    else
      out << ",,";
    std::string err = c.error;
    std::replace(err.begin(), err.end(), ',', ';');
    out << ',' << c.median_latency_ms << ',' << err << '\n';
  }
  return out.str();
}

AblationReport run_ablation_grid(const AblationGrid& grid, const AblationBase& base) {
  AblationReport rep;
  std::vector<RetrievalExample> all = base.train_set;
  all.insert(all.end(), base.eval_set.begin(), base.eval_set.end());
  const auto texts = corpus_texts(all);

  for (bool qip : grid.query_in_prefix)
    for (auto loss : grid.loss_modes)
      for (auto attn : grid.attention_modes) {
        std::vector<AblationCell> cells;
        for (auto m : grid.methods) cells.push_back({loss, attn, qip, m, std::nullopt, 0.0, {}});
        try {
          TemplateConfig tmpl = base.tmpl;
          tmpl.query_in_prefix = qip;
          const PromptBuilder builder(build_vocab(texts, default_reserved_tokens(tmpl)), tmpl, base.layout);
          ModelConfig model = base.model;
          model.vocab_size = builder.vocab().size();
          model.attention_mode = attn;
          TrainConfig tc = base.train;
          tc.loss_mode = loss;
          auto state = make_train_state(init_parameters<float>(model, base.init_seed));
          train(state, base.train_set, model, builder, tc);
          const auto eval_set = prepare_eval_set(base.eval_set, builder, base.eval_n_docs, tc.seed + 1);
          for (auto& cell : cells) {
            try {
              EvalOptions eo;
              eo.method = cell.method;
              eo.l_star = tc.l_star;
              eo.aggregation = tc.aggregation;
              const auto r = evaluate(state.params, model, builder, eval_set, eo);
              cell.metrics = r.metrics;
              cell.median_latency_ms = r.median_latency_ms;
            } catch (const std::exception& e) {
              cell.error = e.what();
            }
          }
        } catch (const std::exception& e) {
          for (auto& cell : cells) cell.error = e.what();
        }
        rep.cells.insert(rep.cells.end(), cells.begin(), cells.end());
      }
  return rep;
}

std::string config_digest(const nlohmann::json& j) {
  const auto text = j.dump();
  return sha256_hex({reinterpret_cast<const unsigned char*>(text.data()), text.size()}).substr(0, 12);
}

}  // namespace blockrank
