#include "blockrank/inference.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

namespace blockrank {

std::string to_string(InferenceMethod m) {
  switch (m) {
    case InferenceMethod::attention: return "attention";
    case InferenceMethod::greedy: return "greedy";
    case InferenceMethod::beam: return "beam";
  }
  return "?";
}

InferenceMethod inference_method_from_string(std::string_view s) {
  if (s == "attention" || s == "attn") return InferenceMethod::attention;
  if (s == "greedy" || s == "decode") return InferenceMethod::greedy;
  if (s == "beam") return InferenceMethod::beam;
  throw ConfigError("unknown inference method '" + std::string(s) + "'");
}

nlohmann::json RankedPrediction::to_json(const std::string& qid) const {
  nlohmann::json j = {{"qid", qid},
                      {"method", to_string(method)},
                      {"ranking", ranked_ids},
                      {"scores", scores ? nlohmann::json(*scores) : nlohmann::json::array()},
                      {"layers_executed", layers_executed},
                      {"decode_steps", decode_steps}};
  if (method != InferenceMethod::attention) j["valid"] = valid;
  return j;
}

std::vector<int> argsort_descending(std::span<const double> scores) {
  std::vector<int> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
  });
  return idx;
}

RankedPrediction rank_from_scores(std::span<const double> scores, const std::vector<std::string>& ids, int K) {
  if (scores.size() != ids.size()) throw Error("rank_from_scores: scores and ids differ in length");
  const int n = static_cast<int>(ids.size());
  if (K > n) throw Error("rank_from_scores: K=" + std::to_string(K) + " exceeds N=" + std::to_string(n));
  const int keep = K <= 0 ? n : K;
  const auto order = argsort_descending(scores);
  RankedPrediction p;
  p.method = InferenceMethod::attention;
  p.scores.emplace();
  for (int r = 0; r < keep; ++r) {
    const auto i = static_cast<std::size_t>(order[static_cast<std::size_t>(r)]);
    p.ranked_ids.push_back(ids[i]);
    p.scores->push_back(scores[i]);
  }
  return p;
}

template <typename T>
RankedPrediction rank_by_attention(const Parameters<T>& params, const ChunkLayout& layout, const ModelConfig& cfg,
                                   int l_star, int K, SignalAggregation aggregation, RelevanceScores* scores_out) {
  if (l_star < 0 || l_star >= cfg.n_layers)
    throw Error("rank_by_attention: l* = " + std::to_string(l_star) + " outside [0, " +
                std::to_string(cfg.n_layers - 1) + "]");
  TraceOptions opts;
  opts.stop_layer = l_star;
  opts.cache_qk_layers = {l_star};
  const auto trace = forward(params, layout, cfg, opts);
  auto scores = attention_mass_scores(trace, layout, cfg.n_heads, l_star, aggregation);
  auto p = rank_from_scores(scores.scores, layout.doc_ids, K);
  p.layers_executed = trace.layers_executed;
  p.decode_steps = 0;
  if (scores_out) *scores_out = std::move(scores);
  return p;
}

template <typename T>
NextTokenLogits model_next_token(const Parameters<T>& params, const ModelConfig& cfg) {
  return [&params, cfg](const ChunkLayout& layout) {
    const auto trace = forward(params, layout, cfg);
    const int row = layout.chunks.back().n_valid - 1;
    const auto r = trace.logits->row(row);
    std::vector<double> out(static_cast<std::size_t>(r.size()));
    for (Eigen::Index v = 0; v < r.size(); ++v) out[static_cast<std::size_t>(v)] = static_cast<double>(r(v));
    return out;
  };
}

namespace {

int argmax_lowest(const std::vector<double>& v) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(v.size()); ++i)
    if (v[static_cast<std::size_t>(i)] > v[static_cast<std::size_t>(best)]) best = i;
  return best;
}

std::vector<double> log_softmax(const std::vector<double>& v) {
  const double m = *std::max_element(v.begin(), v.end());
  double z = 0;
  for (double x : v) z += std::exp(x - m);
  const double lz = m + std::log(z);
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] - lz;
  return out;
}

int digit_value(const DecodeTokens& tok, int id) {
  for (int d = 0; d < 10; ++d)
    if (tok.digits[static_cast<std::size_t>(d)] == id) return d;
  return -1;
}

}  // namespace

RankedPrediction greedy_decode_id(const NextTokenLogits& next, const ChunkLayout& layout, const DecodeTokens& tok,
                                  int step_cap) {
  if (step_cap < 1) throw Error("greedy_decode_id: step cap must be >= 1");
  ChunkLayout work = layout;
  RankedPrediction p;
  p.method = InferenceMethod::greedy;
  for (int step = 0; step < step_cap; ++step) {
    const int t = argmax_lowest(next(work));
    p.emitted_tokens.push_back(t);
    if (t == tok.close) break;
    if (!append_query_token(work, t)) break;
  }
  p.decode_steps = static_cast<int>(p.emitted_tokens.size());

  // Expect digits, then ' and ].
  const auto& e = p.emitted_tokens;
  std::string id;
  bool ok = e.size() >= 3 && e.back() == tok.close && e[e.size() - 2] == tok.quote;
  for (std::size_t i = 0; ok && i + 2 < e.size(); ++i) {
    const int d = digit_value(tok, e[i]);
    if (d < 0) ok = false;
    else id += static_cast<char>('0' + d);
  }
  ok = ok && std::find(layout.doc_ids.begin(), layout.doc_ids.end(), id) != layout.doc_ids.end();
  p.valid = ok;
  if (ok) p.ranked_ids = {id};
  return p;
}

RankedPrediction constrained_beam_decode(const NextTokenLogits& next, const ChunkLayout& layout,
                                         const DecodeTokens& tok, int beam) {
  if (beam < 1) throw Error("constrained_beam_decode: beam must be >= 1");
  if (layout.doc_ids.empty()) throw Error("constrained_beam_decode: no candidate ids");
  const std::size_t width = layout.doc_ids.front().size();
  for (const auto& id : layout.doc_ids) {
    if (id.size() != width) throw Error("constrained_beam_decode: candidate ids differ in width");
    for (char c : id)
      if (c < '0' || c > '9') throw Error("constrained_beam_decode: non-decimal id '" + id + "'");
  }
  const std::set<std::string> ids(layout.doc_ids.begin(), layout.doc_ids.end());
  auto has_prefix = [&](const std::string& prefix) {
    auto it = ids.lower_bound(prefix);
    return it != ids.end() && it->compare(0, prefix.size(), prefix) == 0;
  };

  struct Hyp {
    std::string prefix;
    double logp;
    ChunkLayout layout;
  };
  std::vector<Hyp> beams{{"", 0.0, layout}};
  int steps = 0;
  for (std::size_t pos = 0; pos < width; ++pos) {
    struct Expansion {
      std::size_t parent;
      std::string prefix;
      double logp;
      int digit;
    };
    std::vector<Expansion> ex;
    for (std::size_t b = 0; b < beams.size(); ++b) {
      const auto lp = log_softmax(next(beams[b].layout));
      for (int d = 0; d < 10; ++d) {
        std::string pre = beams[b].prefix + static_cast<char>('0' + d);
        if (!has_prefix(pre)) continue;
        ex.push_back({b, std::move(pre), beams[b].logp + lp[static_cast<std::size_t>(tok.digits[static_cast<std::size_t>(d)])], d});
      }
    }
    ++steps;
    std::stable_sort(ex.begin(), ex.end(), [](const Expansion& a, const Expansion& b) {
      if (a.logp != b.logp) return a.logp > b.logp;
      return a.prefix < b.prefix;
    });
    if (ex.size() > static_cast<std::size_t>(beam)) ex.resize(static_cast<std::size_t>(beam));
    const bool last = pos + 1 == width;
    std::vector<Hyp> next_beams;
    for (auto& e : ex) {
      Hyp h{std::move(e.prefix), e.logp, {}};
      if (!last) {
        h.layout = beams[e.parent].layout;
        if (!append_query_token(h.layout, tok.digits[static_cast<std::size_t>(e.digit)]))
          throw Error("constrained_beam_decode: query chunk too short for the id");
      }
      next_beams.push_back(std::move(h));
    }
    beams = std::move(next_beams);
  }

  RankedPrediction p;
  p.method = InferenceMethod::beam;
  p.decode_steps = steps;
  p.scores.emplace();
  for (const auto& h : beams) {
    p.ranked_ids.push_back(h.prefix);
    p.scores->push_back(h.logp);
  }
  return p;
}

template <typename T>
RankedPrediction greedy_decode_id(const Parameters<T>& params, const ChunkLayout& layout, const ModelConfig& cfg,
                                  const DecodeTokens& tok, int step_cap) {
  auto p = greedy_decode_id(model_next_token(params, cfg), layout, tok, step_cap);
  p.layers_executed = cfg.n_layers;
  return p;
}

template <typename T>
RankedPrediction constrained_beam_decode(const Parameters<T>& params, const ChunkLayout& layout,
                                         const ModelConfig& cfg, const DecodeTokens& tok, int beam) {
  auto p = constrained_beam_decode(model_next_token(params, cfg), layout, tok, beam);
  p.layers_executed = cfg.n_layers;
  return p;
}

#define BLOCKRANK_INSTANTIATE(T)                                                                                  \
  template RankedPrediction rank_by_attention<T>(const Parameters<T>&, const ChunkLayout&, const ModelConfig&, int, \
                                                 int, SignalAggregation, RelevanceScores*);                       \
  template NextTokenLogits model_next_token<T>(const Parameters<T>&, const ModelConfig&);                         \
  template RankedPrediction greedy_decode_id<T>(const Parameters<T>&, const ChunkLayout&, const ModelConfig&,     \
                                                const DecodeTokens&, int);                                        \
  template RankedPrediction constrained_beam_decode<T>(const Parameters<T>&, const ChunkLayout&,                  \
                                                       const ModelConfig&, const DecodeTokens&, int);

BLOCKRANK_INSTANTIATE(float)
BLOCKRANK_INSTANTIATE(double)
#undef BLOCKRANK_INSTANTIATE

}  // namespace blockrank
