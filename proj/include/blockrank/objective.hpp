#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "blockrank/layout.hpp"
#include "blockrank/model.hpp"

namespace blockrank {

inline constexpr double kDefaultLambda = 0.1;
inline constexpr double kDefaultTau = 0.05;

enum class SignalAggregation { sum, mean };

std::string to_string(SignalAggregation a);
SignalAggregation signal_aggregation_from_string(std::string_view s);

// S(q, d_k) for every document, from signal-token queries against document
// keys at one layer. Softmax runs over valid document tokens only, per head,
// and probabilities are averaged over heads before summing per document.
struct RelevanceScores {
  std::vector<double> scores;                      // one per document
  std::vector<std::vector<double>> per_signal;     // [signal][document] masses
  int l_star = 0;
  SignalAggregation aggregation = SignalAggregation::sum;
};

template <typename T>
RelevanceScores attention_mass_scores(const QKCache<T>& qk, const ChunkLayout& layout, int n_heads, int l_star,
                                      SignalAggregation aggregation = SignalAggregation::sum);

// Reads the cached Q/K for `l_star` out of a trace.
template <typename T>
RelevanceScores attention_mass_scores(const ForwardTrace<T>& trace, const ChunkLayout& layout, int n_heads,
                                      int l_star, SignalAggregation aggregation = SignalAggregation::sum);

// Gradient of a scalar loss w.r.t. the post-rotary Q/K of the scored layer,
// given d loss / d scores.
template <typename T>
QKCache<T> attention_mass_scores_backward(const QKCache<T>& qk, const ChunkLayout& layout, int n_heads,
                                          SignalAggregation aggregation, std::span<const double> d_scores);

// -log softmax(scores / tau)[positive]; indices in `excluded` (other labeled
// positives) are dropped from the normalizer. Indices are 0-based.
double infonce_aux_loss(std::span<const double> scores, int positive_index, double tau,
                        std::span<const int> excluded = {});
std::vector<double> infonce_aux_loss_grad(std::span<const double> scores, int positive_index, double tau,
                                          std::span<const int> excluded = {});

// Mean cross-entropy of targets[t] under logits.row(rows[t]).
template <typename T>
double ntp_loss(const Mat<T>& logits, std::span<const int> rows, std::span<const int> targets);
// d ntp_loss / d logits (zero on rows not listed).
template <typename T>
Mat<T> ntp_loss_grad(const Mat<T>& logits, std::span<const int> rows, std::span<const int> targets);

// Rows of the query-chunk logits that predict each answer token.
std::vector<int> answer_prediction_rows(const ChunkLayout& layout);
std::vector<int> answer_tokens(const ChunkLayout& layout);

struct LossBreakdown {
  double ntp = 0;
  double aux = 0;
  double total = 0;
  double lambda = kDefaultLambda;
  double tau = kDefaultTau;
  // 0 when training on the auxiliary loss alone; ntp is still reported.
  double ntp_weight = 1.0;

  nlohmann::json to_json() const;
};

// total = ntp_weight * ntp + lambda * aux
LossBreakdown total_loss(double ntp, double aux, double lambda, double tau = kDefaultTau, double ntp_weight = 1.0);

}  // namespace blockrank
