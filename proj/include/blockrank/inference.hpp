#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "blockrank/layout.hpp"
#include "blockrank/model.hpp"
#include "blockrank/objective.hpp"
#include "blockrank/prompt.hpp"

namespace blockrank {

enum class InferenceMethod { attention, greedy, beam };

std::string to_string(InferenceMethod m);
InferenceMethod inference_method_from_string(std::string_view s);

struct RankedPrediction {
  std::vector<std::string> ranked_ids;
  InferenceMethod method = InferenceMethod::attention;
  std::optional<std::vector<double>> scores;  // aligned with ranked_ids
  int layers_executed = 0;
  int decode_steps = 0;
  // False when a decoder produced something that is not a candidate id.
  bool valid = true;
  std::vector<int> emitted_tokens;

  nlohmann::json to_json(const std::string& qid) const;
};

// Indices sorted by score descending; ties go to the lower index.
std::vector<int> argsort_descending(std::span<const double> scores);

// Top-K ids by score. K <= 0 keeps every candidate.
RankedPrediction rank_from_scores(std::span<const double> scores, const std::vector<std::string>& ids, int K);

// Prefill up to layer l_star and rank documents by attention mass.
template <typename T>
RankedPrediction rank_by_attention(const Parameters<T>& params, const ChunkLayout& layout, const ModelConfig& cfg,
                                   int l_star, int K, SignalAggregation aggregation = SignalAggregation::sum,
                                   RelevanceScores* scores_out = nullptr);

// Next-token logits after the last valid query-chunk token.
using NextTokenLogits = std::function<std::vector<double>(const ChunkLayout&)>;

// Runs the full model on every call (no KV cache).
template <typename T>
NextTokenLogits model_next_token(const Parameters<T>& params, const ModelConfig& cfg);

inline constexpr int kDefaultDecodeCap = 8;

// Argmax decoding (lowest id on ties) until `]` or the step cap. The layout
// should end at the answer scaffold, i.e. be built without the answer.
RankedPrediction greedy_decode_id(const NextTokenLogits& next, const ChunkLayout& layout, const DecodeTokens& tok,
                                  int step_cap = kDefaultDecodeCap);

// Beam search restricted to the digit trie of the layout's doc ids. Ranks by
// summed log-probability; equal scores fall back to ascending id.
RankedPrediction constrained_beam_decode(const NextTokenLogits& next, const ChunkLayout& layout,
                                         const DecodeTokens& tok, int beam);

template <typename T>
RankedPrediction greedy_decode_id(const Parameters<T>& params, const ChunkLayout& layout, const ModelConfig& cfg,
                                  const DecodeTokens& tok, int step_cap = kDefaultDecodeCap);
template <typename T>
RankedPrediction constrained_beam_decode(const Parameters<T>& params, const ChunkLayout& layout,
                                         const ModelConfig& cfg, const DecodeTokens& tok, int beam);

}  // namespace blockrank
