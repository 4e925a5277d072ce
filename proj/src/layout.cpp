#include "blockrank/layout.hpp"

#include <algorithm>

namespace blockrank {

std::vector<int> ChunkLayout::all_doc_tokens() const {
  std::vector<int> out;
  for (const auto& set : doc_token_index_sets) out.insert(out.end(), set.begin(), set.end());
  return out;
}

ChunkLayout chunk_segments(const PromptSegments& segments, int chunk_len) {
  if (chunk_len < 1) throw Error("chunk_segments: L_chunk must be >= 1");
  if (segments.instruction.empty()) throw Error("chunk_segments: instruction segment is empty");
  if (segments.documents.empty()) throw Error("chunk_segments: no document segments");
  if (segments.query.empty()) throw Error("chunk_segments: query segment is empty");

  ChunkLayout layout;
  layout.chunk_len = chunk_len;
  const auto L = static_cast<std::size_t>(chunk_len);
  const std::size_t n_chunks = segments.documents.size() + 2;
  layout.tokens.assign(n_chunks * L, 0);
  layout.valid.assign(n_chunks * L, 0);

  auto place = [&](std::size_t chunk, std::span<const int> seq, ChunkRole role, int doc_index) {
    const std::size_t n = std::min(seq.size(), L);
    if (seq.size() > L) {
      ++layout.truncation.segments;
      layout.truncation.tokens += static_cast<int>(seq.size() - L);
    }
    std::copy_n(seq.begin(), n, layout.tokens.begin() + static_cast<std::ptrdiff_t>(chunk * L));
    std::fill_n(layout.valid.begin() + static_cast<std::ptrdiff_t>(chunk * L), n, std::uint8_t{1});
    layout.chunks.push_back({role, doc_index, static_cast<int>(n)});
    return static_cast<int>(n);
  };

  layout.inst_len = place(0, segments.instruction, ChunkRole::instruction, -1);
  for (std::size_t k = 0; k < segments.documents.size(); ++k) {
    const auto& doc = segments.documents[k];
    if (doc.tokens.empty()) throw Error("chunk_segments: document " + doc.doc_id + " is empty");
    const int n = place(k + 1, doc.tokens, ChunkRole::document, static_cast<int>(k));
    layout.doc_ids.push_back(doc.doc_id);
    std::vector<int> idx(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = static_cast<int>((k + 1) * L) + i;
    layout.doc_token_index_sets.push_back(std::move(idx));
  }

  std::vector<int> query = segments.query;
  query.insert(query.end(), segments.answer_target.begin(), segments.answer_target.end());
  const int placed = place(n_chunks - 1, query, ChunkRole::query, -1);
  layout.query_len = std::min(placed, static_cast<int>(segments.query.size()));
  layout.answer_len = placed - layout.query_len;
  return layout;
}

ChunkLayout assign_positions(ChunkLayout layout, int query_offset) {
  const int L = layout.chunk_len;
  if (query_offset < layout.inst_len + L)
    throw Error("assign_positions: query offset " + std::to_string(query_offset) +
                " collides with document positions [" + std::to_string(layout.inst_len) + ", " +
                std::to_string(layout.inst_len + L) + ")");
  layout.query_offset = query_offset;
  layout.position_ids.assign(layout.tokens.size(), 0);
  for (int c = 0; c < layout.n_chunks(); ++c) {
    int base = 0;
    switch (layout.chunks[static_cast<std::size_t>(c)].role) {
      case ChunkRole::instruction: base = 0; break;
      case ChunkRole::document: base = layout.inst_len; break;
      case ChunkRole::query: base = query_offset; break;
    }
    // PAD slots continue the sequence; they are masked everywhere.
    for (int i = 0; i < L; ++i) layout.position_ids[static_cast<std::size_t>(c * L + i)] = base + i;
  }
  return layout;
}

std::vector<int> locate_signal_tokens(const ChunkLayout& layout, std::span<const int> signal_spec) {
  if (signal_spec.empty()) throw Error("locate_signal_tokens: empty signal specification");
  const int begin = layout.query_begin();
  std::vector<int> out;
  for (int token : signal_spec) {
    int found = -1;
    for (int i = layout.query_len - 1; i >= 0; --i) {
      if (layout.tokens[static_cast<std::size_t>(begin + i)] == token) {
        found = i;
        break;
      }
    }
    if (found < 0)
      throw Error("locate_signal_tokens: signal token id " + std::to_string(token) +
                  " absent from the query chunk (malformed template)");
    if (std::find(out.begin(), out.end(), found) == out.end()) out.push_back(found);
  }
  return out;
}

ChunkLayout build_layout(const PromptSegments& segments, int chunk_len, int query_offset,
                         std::span<const int> signal_spec) {
  auto layout = assign_positions(chunk_segments(segments, chunk_len), query_offset);
  layout.signal_token_indices = locate_signal_tokens(layout, signal_spec);
  return layout;
}

std::vector<int> sequential_positions(const ChunkLayout& layout) {
  std::vector<int> pos(layout.tokens.size());
  int next = 0;
  for (std::size_t i = 0; i < pos.size(); ++i) {
    pos[i] = next;
    if (layout.valid[i]) ++next;
  }
  return pos;
}

bool append_query_token(ChunkLayout& layout, int token) {
  auto& info = layout.chunks.back();
  if (info.n_valid >= layout.chunk_len) return false;
  const auto flat = static_cast<std::size_t>(layout.query_begin() + info.n_valid);
  layout.tokens[flat] = token;
  layout.valid[flat] = 1;
  ++info.n_valid;
  ++layout.answer_len;
  return true;
}

nlohmann::json layout_to_json(const ChunkLayout& layout) {
  nlohmann::json chunks = nlohmann::json::array();
  for (int c = 0; c < layout.n_chunks(); ++c) {
    const auto& info = layout.chunks[static_cast<std::size_t>(c)];
    const auto b = static_cast<std::ptrdiff_t>(layout.chunk_begin(c));
    const char* role = info.role == ChunkRole::instruction ? "instruction"
                       : info.role == ChunkRole::document  ? "document"
                                                           : "query";
    nlohmann::json j = {
        {"role", role},
        {"n_valid", info.n_valid},
        {"tokens", std::vector<int>(layout.tokens.begin() + b, layout.tokens.begin() + b + layout.chunk_len)},
    };
    if (!layout.position_ids.empty())
      j["position_ids"] =
          std::vector<int>(layout.position_ids.begin() + b, layout.position_ids.begin() + b + layout.chunk_len);
    if (info.role == ChunkRole::document) {
      j["doc_index"] = info.doc_index;
      j["doc_id"] = layout.doc_ids[static_cast<std::size_t>(info.doc_index)];
    }
    chunks.push_back(std::move(j));
  }
  return {
      {"chunk_len", layout.chunk_len},
      {"inst_len", layout.inst_len},
      {"query_offset", layout.query_offset},
      {"query_len", layout.query_len},
      {"answer_len", layout.answer_len},
      {"signal_token_indices", layout.signal_token_indices},
      {"truncation", {{"segments", layout.truncation.segments}, {"tokens", layout.truncation.tokens}}},
      {"chunks", std::move(chunks)},
  };
}

}  // namespace blockrank
