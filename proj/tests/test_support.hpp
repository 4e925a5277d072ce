#pragma once

#include <algorithm>
#include <random>
#include <vector>

#include "blockrank/corpus.hpp"
#include "blockrank/layout.hpp"
#include "blockrank/model.hpp"
#include "blockrank/prompt.hpp"

namespace blockrank::testing {

inline PromptBuilder builder_for(std::span<const RetrievalExample> data, TemplateConfig tmpl = {},
                                 LayoutConfig layout = {}) {
  return PromptBuilder(build_vocab(corpus_texts(data), default_reserved_tokens(tmpl)), tmpl, layout);
}

inline ModelConfig tiny_model(int vocab, int layers = 2, int d = 32, int heads = 2) {
  ModelConfig c;
  c.n_layers = layers;
  c.d_model = d;
  c.n_heads = heads;
  c.mlp_hidden = 2 * d;
  c.vocab_size = vocab;
  return c;
}

// Random segments with ragged lengths, so some chunks are padded and some truncated.
inline ChunkLayout random_layout(int n_docs, int chunk_len, std::uint64_t seed, int vocab) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> tok(1, vocab - 1);
  std::uniform_int_distribution<int> len(1, chunk_len + 2);
  auto seq = [&] {
    std::vector<int> s(static_cast<std::size_t>(len(rng)));
    for (auto& t : s) t = tok(rng);
    return s;
  };
  PromptSegments seg;
  seg.instruction = seq();
  for (int k = 0; k < n_docs; ++k) seg.documents.push_back({format_doc_id(k, 2), seq()});
  seg.query = seq();
  auto layout = assign_positions(chunk_segments(seg, chunk_len), kDefaultQueryOffset);
  // Two signal rows inside the query.
  layout.signal_token_indices = {std::max(0, layout.query_len - 2), layout.query_len - 1};
  layout.signal_token_indices.erase(
      std::unique(layout.signal_token_indices.begin(), layout.signal_token_indices.end()),
      layout.signal_token_indices.end());
  return layout;
}

template <typename T>
Mat<T> random_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  Mat<T> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(g(rng));
  return m;
}

// Reorders a prompt's candidates; ids travel with their documents.
inline RetrievalExample permute_candidates(const RetrievalExample& ex, const std::vector<int>& order) {
  RetrievalExample out;
  out.query = ex.query;
  for (std::size_t k = 0; k < order.size(); ++k) {
    const auto src = static_cast<std::size_t>(order[k]);
    out.candidates.push_back(ex.candidates[src]);
    if (std::find(ex.positive_indices.begin(), ex.positive_indices.end(), order[k]) != ex.positive_indices.end())
      out.positive_indices.push_back(static_cast<int>(k));
  }
  return out;
}

}  // namespace blockrank::testing
