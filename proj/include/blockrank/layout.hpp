#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "blockrank/corpus.hpp"

namespace blockrank {

inline constexpr int kDefaultQueryOffset = 8192;

enum class ChunkRole { instruction, document, query };

struct ChunkInfo {
  ChunkRole role;
  int doc_index;  // -1 unless role == document
  int n_valid;
};

struct TruncationStats {
  int segments = 0;
  int tokens = 0;
};

// Fixed-length chunk grid: chunk 0 is the instruction, chunks 1..N the
// documents and chunk N+1 the query. Token arrays are flattened chunk-major;
// flat index = chunk * chunk_len + offset.
struct ChunkLayout {
  int chunk_len = 0;
  std::vector<ChunkInfo> chunks;
  std::vector<int> tokens;
  std::vector<std::uint8_t> valid;
  std::vector<int> position_ids;  // empty until assign_positions
  int inst_len = 0;
  int query_offset = 0;
  int query_len = 0;   // query scaffold tokens inside the query chunk
  int answer_len = 0;  // answer tokens that follow the scaffold
  std::vector<std::string> doc_ids;
  std::vector<int> signal_token_indices;  // offsets within the query chunk
  std::vector<std::vector<int>> doc_token_index_sets;  // flat indices of valid tokens per document
  TruncationStats truncation;

  int n_chunks() const { return static_cast<int>(chunks.size()); }
  int n_docs() const { return n_chunks() - 2; }
  int total_tokens() const { return n_chunks() * chunk_len; }
  int chunk_begin(int chunk) const { return chunk * chunk_len; }
  int query_chunk() const { return n_chunks() - 1; }
  int query_begin() const { return chunk_begin(query_chunk()); }
  // Flat indices of every valid document token, documents in order.
  std::vector<int> all_doc_tokens() const;
};

ChunkLayout chunk_segments(const PromptSegments& segments, int chunk_len);

// Throws when query_offset would collide with the shared document positions.
ChunkLayout assign_positions(ChunkLayout layout, int query_offset);

// Offsets (within the query chunk scaffold) of the last occurrence of each
// signal token, in signal_spec order.
std::vector<int> locate_signal_tokens(const ChunkLayout& layout, std::span<const int> signal_spec);

// chunk_segments + assign_positions + locate_signal_tokens.
ChunkLayout build_layout(const PromptSegments& segments, int chunk_len, int query_offset,
                         std::span<const int> signal_spec);

// Sequential positions over valid tokens, as used by the dense causal baseline.
std::vector<int> sequential_positions(const ChunkLayout& layout);

// Appends one token to the query chunk; false when the chunk is full.
bool append_query_token(ChunkLayout& layout, int token);

nlohmann::json layout_to_json(const ChunkLayout& layout);

}  // namespace blockrank
