#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "blockrank/corpus.hpp"
#include "blockrank/inference.hpp"
#include "blockrank/model.hpp"
#include "blockrank/prompt.hpp"
#include "blockrank/training.hpp"

namespace blockrank {

// ---- ranking metrics

struct QueryMetrics {
  double p_at_1 = 0;
  double rr_at_10 = 0;
  double ndcg_at_10 = 0;
  int first_positive_rank = 0;  // 1-based; 0 when no positive is ranked
};

struct MetricsReport {
  double p_at_1 = 0;
  double mrr_at_10 = 0;
  double ndcg_at_10 = 0;
  int n_queries = 0;
  std::vector<QueryMetrics> per_query;

  nlohmann::json to_json(bool with_per_query = false) const;
};

// An empty ranking (e.g. an invalid decode) scores zero on every metric.
QueryMetrics query_metrics(std::span<const std::string> ranking, std::span<const std::string> positives);
MetricsReport compute_metrics(std::span<const RankedPrediction> predictions,
                              std::span<const std::vector<std::string>> positives);

// ---- complexity accounting

// Score entries per layer per head, counting whole rectangles (causally masked
// entries are computed, then masked).
std::int64_t analytic_scored_pairs(int n_docs, int chunk_len, AttentionMode mode);

struct ComplexityRecord {
  int n_docs = 0;
  int chunk_len = 0;
  int d_model = 0;
  int head_dim = 0;
  AttentionMode mode = AttentionMode::blockwise;
  std::int64_t scored_pairs = 0;  // analytic, per layer per head
  std::int64_t macs = 0;          // 2 * scored_pairs * head_dim
  std::optional<std::int64_t> instrumented_pairs;

  nlohmann::json to_json() const;
};

// Analytic counts, cross-checked by running an instrumented forward over a
// full layout of random tokens when `instrument` is set.
ComplexityRecord count_attention_macs(const ModelConfig& cfg, int n_docs, int chunk_len, AttentionMode mode,
                                      bool instrument = true);

struct PolyFit {
  std::vector<double> coef;  // ascending powers
  double rss = 0;
  double r2 = 0;
  double aic = 0;  // n ln(rss/n) + 2k; -inf on an exact fit
};

PolyFit polyfit(std::span<const double> x, std::span<const double> y, int degree);

// ---- latency scaling

struct LatencyRecord {
  AttentionMode mode = AttentionMode::blockwise;
  InferenceMethod method = InferenceMethod::attention;
  int n_docs = 0;
  double median_ms = 0;
  int repeats = 0;
  int layers_executed = 0;
  int decode_steps = 0;
};

struct ScalingFit {
  AttentionMode mode;
  InferenceMethod method;
  PolyFit linear;
  PolyFit quadratic;
};

struct ScalingReport {
  std::vector<LatencyRecord> records;
  std::vector<ScalingFit> fits;

  nlohmann::json to_json() const;
  std::string to_csv() const;
};

struct BenchmarkSpec {
  std::vector<int> n_values;
  std::vector<AttentionMode> modes;
  std::vector<InferenceMethod> methods;
  int repeats = 5;
  int warmup = 3;
  int l_star = 1;
  int beam = 10;
  SyntheticTaskConfig task;
};

// Median wall-clock per query. Attention inference runs the prefill to l*;
// decoding runs full-depth prefills plus decode steps.
ScalingReport scaling_benchmark(const Parameters<float>& params, const ModelConfig& cfg, const PromptBuilder& builder,
                                const BenchmarkSpec& spec);

// ---- attention analysis

struct HeatmapExport {
  std::vector<int> layers;
  std::vector<std::string> segment_labels;        // inst, doc ids, query
  std::vector<Mat<double>> segment_mass;          // per layer, (N+2) x (N+2)
  std::vector<Mat<double>> query_token_doc;       // per layer, valid query tokens x N
  std::vector<int> tracked_tokens;                // query-chunk offsets
  std::vector<Mat<double>> layer_doc;             // per tracked token, layers x N
  nlohmann::json metadata;
};

// Needs a trace from a forward with retain_attention.
HeatmapExport export_attention_heatmaps(const ForwardTrace<float>& trace, const ChunkLayout& layout,
                                        std::span<const int> layers, std::span<const int> tracked_tokens = {});
// Runs the analysis-mode forward itself; tracked tokens default to the signal tokens.
HeatmapExport export_attention_heatmaps(const Parameters<float>& params, const ChunkLayout& layout,
                                        const ModelConfig& cfg, std::span<const int> layers,
                                        std::span<const int> tracked_tokens = {});

// Writes `{name}_{digest}.csv` files plus one JSON summary; returns the paths.
std::vector<std::filesystem::path> write_heatmaps(const HeatmapExport& h, const std::filesystem::path& dir,
                                                  const std::string& digest);

struct LayerwiseCurve {
  std::vector<double> p_at_1;  // one entry per layer
  std::vector<double> mrr_at_10;
  int n_queries = 0;

  nlohmann::json to_json() const;
};

LayerwiseCurve layerwise_attention_precision(const Parameters<float>& params, const ModelConfig& cfg,
                                             std::span<const PreparedExample> examples,
                                             SignalAggregation aggregation = SignalAggregation::sum);

// ---- id digit entropy

struct EntropyStats {
  double mean[2] = {0, 0};
  double stddev[2] = {0, 0};
  double stderr_[2] = {0, 0};
  int n_lists = 0;

  nlohmann::json to_json() const;
};

// Shannon entropy (bits) of the digit values at `position` across the ids.
double digit_entropy_bits(std::span<const std::string> ids, int position);
// Each list must hold 10 unique two-digit ids.
EntropyStats id_digit_entropy(std::span<const std::vector<std::string>> lists);
std::vector<std::vector<std::string>> random_id_lists(int n_lists, std::uint64_t seed);

// ---- evaluation driver

struct EvalOptions {
  InferenceMethod method = InferenceMethod::attention;
  int l_star = 1;
  int top_k = 10;
  int beam = 10;
  int n_docs = 0;
  std::uint64_t seed = 0;
  SignalAggregation aggregation = SignalAggregation::sum;
};

struct EvalResult {
  std::vector<RankedPrediction> predictions;
  std::vector<std::vector<std::string>> positives;
  MetricsReport metrics;
  double median_latency_ms = 0;
};

// Shuffled candidate list per example (seeded by index), no answer tokens.
std::vector<PreparedExample> prepare_eval_set(std::span<const RetrievalExample> examples,
                                              const PromptBuilder& builder, int n_docs, std::uint64_t seed);

EvalResult evaluate(const Parameters<float>& params, const ModelConfig& cfg, const PromptBuilder& builder,
                    std::span<const PreparedExample> examples, const EvalOptions& opts);

// ---- ablations

struct AblationGrid {
  std::vector<LossMode> loss_modes{LossMode::ntp_only, LossMode::ntp_plus_aux};
  std::vector<AttentionMode> attention_modes{AttentionMode::blockwise};
  std::vector<InferenceMethod> methods{InferenceMethod::greedy, InferenceMethod::attention};
  std::vector<bool> query_in_prefix{true};
};

struct AblationBase {
  ModelConfig model;
  TrainConfig train;
  TemplateConfig tmpl;
  LayoutConfig layout;
  std::vector<RetrievalExample> train_set;
  std::vector<RetrievalExample> eval_set;
  std::uint64_t init_seed = 0;
  int eval_n_docs = 0;
};

struct AblationCell {
  LossMode loss_mode;
  AttentionMode attention_mode;
  bool query_in_prefix;
  InferenceMethod method;
  std::optional<MetricsReport> metrics;
  double median_latency_ms = 0;
  std::string error;
};

struct AblationReport {
  std::vector<AblationCell> cells;

  nlohmann::json to_json() const;
  std::string to_csv() const;
};

AblationReport run_ablation_grid(const AblationGrid& grid, const AblationBase& base);

// Short hex digest of a JSON value, for report file names.
std::string config_digest(const nlohmann::json& j);

}  // namespace blockrank
