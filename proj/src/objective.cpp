#include "blockrank/objective.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace blockrank {

std::string to_string(SignalAggregation a) { return a == SignalAggregation::sum ? "sum" : "mean"; }

SignalAggregation signal_aggregation_from_string(std::string_view s) {
  if (s == "sum") return SignalAggregation::sum;
  if (s == "mean") return SignalAggregation::mean;
  throw ConfigError("unknown signal aggregation '" + std::string(s) + "' (expected sum or mean)");
}

namespace {

struct DocTokens {
  std::vector<int> flat;   // flat token index
  std::vector<int> owner;  // document index per entry
};

DocTokens doc_tokens(const ChunkLayout& layout) {
  DocTokens out;
  for (std::size_t k = 0; k < layout.doc_token_index_sets.size(); ++k) {
    for (int idx : layout.doc_token_index_sets[k]) {
      out.flat.push_back(idx);
      out.owner.push_back(static_cast<int>(k));
    }
  }
  return out;
}

void check_inputs(const ChunkLayout& layout) {
  if (layout.n_docs() <= 0 || layout.doc_token_index_sets.empty())
    throw Error("attention_mass_scores: layout has no documents");
  if (layout.signal_token_indices.empty()) throw Error("attention_mass_scores: empty signal token set");
}

// Per-head softmax of one signal row against the document keys.
template <typename T>
void doc_softmax(const Mat<T>& q, const Mat<T>& kd, int row, int head, int hd, T scale, Eigen::Matrix<T, Eigen::Dynamic, 1>& p) {
  p.noalias() = kd.middleCols(head * hd, hd) * q.row(row).segment(head * hd, hd).transpose();
  p *= scale;
  const T mx = p.maxCoeff();
  p = (p.array() - mx).exp().matrix();
  p /= p.sum();
}

template <typename T>
Mat<T> gather_rows(const Mat<T>& m, const std::vector<int>& rows) {
  Mat<T> out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
  return out;
}

double log_sum_exp(std::span<const double> v) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double x : v) mx = std::max(mx, x);
  double s = 0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

std::vector<double> infonce_logits(std::span<const double> scores, int positive_index, double tau,
                                   std::span<const int> excluded, std::vector<std::uint8_t>& kept) {
  if (scores.empty()) throw Error("infonce_aux_loss: no scores");
  if (positive_index < 0 || static_cast<std::size_t>(positive_index) >= scores.size())
    throw Error("infonce_aux_loss: positive index out of range");
  if (!(tau > 0)) throw Error("infonce_aux_loss: tau must be > 0");
  for (double s : scores)
    if (!std::isfinite(s)) throw Error("infonce_aux_loss: non-finite score");
  kept.assign(scores.size(), 1);
  for (int e : excluded) {
    if (e == positive_index) throw Error("infonce_aux_loss: the positive cannot be excluded");
    if (e >= 0 && static_cast<std::size_t>(e) < scores.size()) kept[static_cast<std::size_t>(e)] = 0;
  }
  std::vector<double> logits;
  for (std::size_t k = 0; k < scores.size(); ++k)
    if (kept[k]) logits.push_back(scores[k] / tau);
  return logits;
}

}  // namespace

template <typename T>
RelevanceScores attention_mass_scores(const QKCache<T>& qk, const ChunkLayout& layout, int n_heads, int l_star,
                                      SignalAggregation aggregation) {
  check_inputs(layout);
  const int hd = static_cast<int>(qk.q.cols()) / n_heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  const auto docs = doc_tokens(layout);
  const Mat<T> kd = gather_rows(qk.k, docs.flat);
  const auto n_docs = static_cast<std::size_t>(layout.n_docs());
  const auto n_sig = layout.signal_token_indices.size();
  const double weight = aggregation == SignalAggregation::mean ? 1.0 / static_cast<double>(n_sig) : 1.0;

  RelevanceScores out;
  out.l_star = l_star;
  out.aggregation = aggregation;
  out.scores.assign(n_docs, 0.0);
  out.per_signal.assign(n_sig, std::vector<double>(n_docs, 0.0));
  Eigen::Matrix<T, Eigen::Dynamic, 1> p;
  for (std::size_t s = 0; s < n_sig; ++s) {
    const int row = layout.query_begin() + layout.signal_token_indices[s];
    std::vector<double> alpha(docs.flat.size(), 0.0);
    for (int h = 0; h < n_heads; ++h) {
      doc_softmax(qk.q, kd, row, h, hd, scale, p);
      for (std::size_t j = 0; j < alpha.size(); ++j) alpha[j] += static_cast<double>(p(static_cast<Eigen::Index>(j)));
    }
    for (std::size_t j = 0; j < alpha.size(); ++j)
      out.per_signal[s][static_cast<std::size_t>(docs.owner[j])] += alpha[j] / n_heads;
    for (std::size_t k = 0; k < n_docs; ++k) out.scores[k] += weight * out.per_signal[s][k];
  }
  return out;
}

template <typename T>
RelevanceScores attention_mass_scores(const ForwardTrace<T>& trace, const ChunkLayout& layout, int n_heads,
                                      int l_star, SignalAggregation aggregation) {
  const auto it = trace.qk.find(l_star);
  if (it == trace.qk.end())
    throw Error("attention_mass_scores: trace holds no Q/K for layer " + std::to_string(l_star));
  return attention_mass_scores(it->second, layout, n_heads, l_star, aggregation);
}

template <typename T>
QKCache<T> attention_mass_scores_backward(const QKCache<T>& qk, const ChunkLayout& layout, int n_heads,
                                          SignalAggregation aggregation, std::span<const double> d_scores) {
  check_inputs(layout);
  if (d_scores.size() != static_cast<std::size_t>(layout.n_docs()))
    throw Error("attention_mass_scores_backward: gradient size does not match document count");
  const int hd = static_cast<int>(qk.q.cols()) / n_heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  const auto docs = doc_tokens(layout);
  const Mat<T> kd = gather_rows(qk.k, docs.flat);
  const auto n_sig = layout.signal_token_indices.size();
  const double weight = aggregation == SignalAggregation::mean ? 1.0 / static_cast<double>(n_sig) : 1.0;

  QKCache<T> grad{Mat<T>::Zero(qk.q.rows(), qk.q.cols()), Mat<T>::Zero(qk.k.rows(), qk.k.cols())};
  Eigen::Matrix<T, Eigen::Dynamic, 1> p, d_alpha(static_cast<Eigen::Index>(docs.flat.size()));
  for (std::size_t j = 0; j < docs.flat.size(); ++j)
    d_alpha(static_cast<Eigen::Index>(j)) =
        static_cast<T>(weight * d_scores[static_cast<std::size_t>(docs.owner[j])] / n_heads);

  for (std::size_t s = 0; s < n_sig; ++s) {
    const int row = layout.query_begin() + layout.signal_token_indices[s];
    for (int h = 0; h < n_heads; ++h) {
      doc_softmax(qk.q, kd, row, h, hd, scale, p);
      const T dot = p.dot(d_alpha);
      const Eigen::Matrix<T, Eigen::Dynamic, 1> dz = p.cwiseProduct((d_alpha.array() - dot).matrix()) * scale;
      grad.q.row(row).segment(h * hd, hd) += (kd.middleCols(h * hd, hd).transpose() * dz).transpose();
      const auto qrow = qk.q.row(row).segment(h * hd, hd);
      for (std::size_t j = 0; j < docs.flat.size(); ++j)
        grad.k.row(docs.flat[j]).segment(h * hd, hd) += qrow * dz(static_cast<Eigen::Index>(j));
    }
  }
  return grad;
}

double infonce_aux_loss(std::span<const double> scores, int positive_index, double tau,
                        std::span<const int> excluded) {
  std::vector<std::uint8_t> kept;
  const auto logits = infonce_logits(scores, positive_index, tau, excluded, kept);
  const double z_pos = scores[static_cast<std::size_t>(positive_index)] / tau;
  if (z_pos < *std::max_element(logits.begin(), logits.end())) return log_sum_exp(logits) - z_pos;
  // Positive is the max: log1p keeps tiny losses from rounding to zero.
  double rest = 0;
  for (std::size_t k = 0; k < scores.size(); ++k)
    if (kept[k] && static_cast<int>(k) != positive_index) rest += std::exp(scores[k] / tau - z_pos);
  return std::log1p(rest);
}

std::vector<double> infonce_aux_loss_grad(std::span<const double> scores, int positive_index, double tau,
                                          std::span<const int> excluded) {
  std::vector<std::uint8_t> kept;
  const auto logits = infonce_logits(scores, positive_index, tau, excluded, kept);
  const double lse = log_sum_exp(logits);
  std::vector<double> grad(scores.size(), 0.0);
  for (std::size_t k = 0; k < scores.size(); ++k) {
    if (!kept[k]) continue;
    grad[k] = std::exp(scores[k] / tau - lse) / tau;
  }
  grad[static_cast<std::size_t>(positive_index)] -= 1.0 / tau;
  return grad;
}

namespace {

template <typename T>
void check_alignment(const Mat<T>& logits, std::span<const int> rows, std::span<const int> targets) {
  if (rows.empty()) throw Error("ntp_loss: no answer tokens");
  if (rows.size() != targets.size())
    throw Error("ntp_loss: alignment mismatch (" + std::to_string(rows.size()) + " rows for " +
                std::to_string(targets.size()) + " targets)");
  for (std::size_t t = 0; t < rows.size(); ++t) {
    if (rows[t] < 0 || rows[t] >= logits.rows()) throw Error("ntp_loss: answer row out of range");
    if (targets[t] < 0 || targets[t] >= logits.cols()) throw Error("ntp_loss: target outside vocabulary");
  }
}

}  // namespace

template <typename T>
double ntp_loss(const Mat<T>& logits, std::span<const int> rows, std::span<const int> targets) {
  check_alignment(logits, rows, targets);
  double total = 0;
  for (std::size_t t = 0; t < rows.size(); ++t) {
    const auto row = logits.row(rows[t]).template cast<double>();
    const double mx = row.maxCoeff();
    const double lse = mx + std::log((row.array() - mx).exp().sum());
    total += lse - row(targets[t]);
  }
  return total / static_cast<double>(rows.size());
}

template <typename T>
Mat<T> ntp_loss_grad(const Mat<T>& logits, std::span<const int> rows, std::span<const int> targets) {
  check_alignment(logits, rows, targets);
  Mat<T> grad = Mat<T>::Zero(logits.rows(), logits.cols());
  const T inv_n = T(1) / static_cast<T>(rows.size());
  for (std::size_t t = 0; t < rows.size(); ++t) {
    const auto row = logits.row(rows[t]);
    const T mx = row.maxCoeff();
    RowVec<T> p = (row.array() - mx).exp().matrix();
    p /= p.sum();
    p(targets[t]) -= T(1);
    grad.row(rows[t]) += p * inv_n;
  }
  return grad;
}

std::vector<int> answer_prediction_rows(const ChunkLayout& layout) {
  std::vector<int> rows;
  for (int t = 0; t < layout.answer_len; ++t) rows.push_back(layout.query_len + t - 1);
  return rows;
}

std::vector<int> answer_tokens(const ChunkLayout& layout) {
  std::vector<int> out;
  for (int t = 0; t < layout.answer_len; ++t)
    out.push_back(layout.tokens[static_cast<std::size_t>(layout.query_begin() + layout.query_len + t)]);
  return out;
}

nlohmann::json LossBreakdown::to_json() const {
  return {{"ntp", ntp}, {"aux", aux}, {"total", total}, {"lambda", lambda}, {"tau", tau}, {"ntp_weight", ntp_weight}};
}

LossBreakdown total_loss(double ntp, double aux, double lambda, double tau, double ntp_weight) {
  if (!(lambda >= 0)) throw Error("total_loss: lambda must be >= 0");
  return {ntp, aux, ntp_weight * ntp + lambda * aux, lambda, tau, ntp_weight};
}

#define BLOCKRANK_INSTANTIATE(T)                                                                                  \
  template RelevanceScores attention_mass_scores<T>(const QKCache<T>&, const ChunkLayout&, int, int,             \
                                                    SignalAggregation);                                          \
  template RelevanceScores attention_mass_scores<T>(const ForwardTrace<T>&, const ChunkLayout&, int, int,        \
                                                    SignalAggregation);                                          \
  template QKCache<T> attention_mass_scores_backward<T>(const QKCache<T>&, const ChunkLayout&, int,              \
                                                        SignalAggregation, std::span<const double>);             \
  template double ntp_loss<T>(const Mat<T>&, std::span<const int>, std::span<const int>);                        \
  template Mat<T> ntp_loss_grad<T>(const Mat<T>&, std::span<const int>, std::span<const int>);

BLOCKRANK_INSTANTIATE(float)
BLOCKRANK_INSTANTIATE(double)

#undef BLOCKRANK_INSTANTIATE

}  // namespace blockrank
