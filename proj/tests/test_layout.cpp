#include <gtest/gtest.h>

#include <map>
#include <numeric>
#include <random>

#include "blockrank/layout.hpp"
#include "blockrank/prompt.hpp"
#include "test_support.hpp"

using namespace blockrank;

namespace {

std::vector<int> seq(int n, int start = 1) {
  std::vector<int> s(static_cast<std::size_t>(n));
  std::iota(s.begin(), s.end(), start);
  return s;
}

PromptSegments segments(int inst, std::vector<int> docs, int query) {
  PromptSegments s;
  s.instruction = seq(inst);
  for (std::size_t k = 0; k < docs.size(); ++k) s.documents.push_back({format_doc_id(static_cast<int>(k), 2), seq(docs[k], 100)});
  s.query = seq(query, 200);
  return s;
}

std::vector<int> chunk_positions(const ChunkLayout& l, int chunk) {
  const auto b = l.position_ids.begin() + l.chunk_begin(chunk);
  return {b, b + l.chunk_len};
}

}  // namespace

TEST(ChunkSegments, PaddingAndTruncation) {
  const auto l = chunk_segments(segments(12, {16, 8, 20}, 10), 16);
  ASSERT_EQ(l.n_chunks(), 5);
  EXPECT_EQ(l.chunks[0].role, ChunkRole::instruction);
  EXPECT_EQ(l.chunks[4].role, ChunkRole::query);
  EXPECT_EQ(l.chunks[1].n_valid, 16);
  EXPECT_EQ(l.chunks[2].n_valid, 8);
  EXPECT_EQ(l.chunks[3].n_valid, 16);
  EXPECT_EQ(l.truncation.segments, 1);
  EXPECT_EQ(l.truncation.tokens, 4);
  int pads_doc2 = 0;
  for (int i = 0; i < 16; ++i) pads_doc2 += l.valid[static_cast<std::size_t>(l.chunk_begin(2) + i)] == 0;
  EXPECT_EQ(pads_doc2, 8);
  EXPECT_EQ(l.inst_len, 12);
  EXPECT_EQ(l.query_len, 10);
}

TEST(ChunkSegments, ExactFitHasNoPadding) {
  const auto l = chunk_segments(segments(8, {8, 8, 8}, 8), 8);
  EXPECT_EQ(l.truncation.segments, 0);
  EXPECT_TRUE(std::all_of(l.valid.begin(), l.valid.end(), [](auto v) { return v == 1; }));
}

TEST(ChunkSegments, ValidCountEqualsCappedLength) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const int L = std::uniform_int_distribution<int>(1, 20)(rng);
    std::uniform_int_distribution<int> len(1, 30);
    std::vector<int> docs(static_cast<std::size_t>(std::uniform_int_distribution<int>(1, 6)(rng)));
    for (auto& d : docs) d = len(rng);
    const auto s = segments(len(rng), docs, len(rng));
    const auto l = chunk_segments(s, L);
    std::vector<std::size_t> lens{s.instruction.size()};
    for (const auto& d : s.documents) lens.push_back(d.tokens.size());
    lens.push_back(s.query.size());
    for (int c = 0; c < l.n_chunks(); ++c) {
      int count = 0;
      for (int i = 0; i < L; ++i) count += l.valid[static_cast<std::size_t>(l.chunk_begin(c) + i)];
      EXPECT_EQ(count, std::min<int>(static_cast<int>(lens[static_cast<std::size_t>(c)]), L));
    }
  }
}

TEST(ChunkSegments, DocumentIndexSetsPartitionValidTokens) {
  const auto l = chunk_segments(segments(5, {3, 9, 1}, 4), 6);
  std::vector<int> flat;
  for (int c = 1; c <= 3; ++c)
    for (int i = 0; i < 6; ++i)
      if (l.valid[static_cast<std::size_t>(l.chunk_begin(c) + i)]) flat.push_back(l.chunk_begin(c) + i);
  EXPECT_EQ(l.all_doc_tokens(), flat);
  EXPECT_EQ(l.doc_token_index_sets[1].size(), 6u);
}

TEST(ChunkSegments, RejectsZeroChunkLength) { EXPECT_THROW(chunk_segments(segments(2, {2}, 2), 0), Error); }

TEST(AssignPositions, SharedDocumentPositions) {
  const auto l = assign_positions(chunk_segments(segments(12, {16, 8, 20}, 10), 16), 8192);
  for (int c = 1; c <= 3; ++c) EXPECT_EQ(l.position_ids[static_cast<std::size_t>(l.chunk_begin(c))], 12);
  EXPECT_EQ(chunk_positions(l, 1), chunk_positions(l, 2));
  EXPECT_EQ(chunk_positions(l, 2), chunk_positions(l, 3));
  for (int i = 0; i < 10; ++i) EXPECT_EQ(l.position_ids[static_cast<std::size_t>(l.query_begin() + i)], 8192 + i);
  for (int i = 0; i < 12; ++i) EXPECT_EQ(l.position_ids[static_cast<std::size_t>(i)], i);
}

TEST(AssignPositions, OffsetCollision) {
  const auto l = chunk_segments(segments(12, {16}, 10), 16);
  EXPECT_THROW(assign_positions(l, 20), Error);
  EXPECT_NO_THROW(assign_positions(l, 28));
}

TEST(AssignPositions, PermutationInvariance) {
  std::mt19937_64 rng(5);
  const auto s = segments(7, {5, 9, 3, 12}, 6);
  const auto base = assign_positions(chunk_segments(s, 10), 8192);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<int> order{0, 1, 2, 3};
    std::shuffle(order.begin(), order.end(), rng);
    PromptSegments p = s;
    for (std::size_t k = 0; k < 4; ++k) p.documents[k] = s.documents[static_cast<std::size_t>(order[k])];
    const auto l = assign_positions(chunk_segments(p, 10), 8192);
    std::multiset<std::pair<int, int>> a, b;
    for (int c = 0; c < l.n_chunks(); ++c)
      for (int i = 0; i < 10; ++i) {
        a.insert({static_cast<int>(base.chunks[static_cast<std::size_t>(c)].role),
                  base.position_ids[static_cast<std::size_t>(c * 10 + i)]});
        b.insert({static_cast<int>(l.chunks[static_cast<std::size_t>(c)].role),
                  l.position_ids[static_cast<std::size_t>(c * 10 + i)]});
      }
    EXPECT_EQ(a, b);
    for (int k = 0; k < 4; ++k) EXPECT_EQ(chunk_positions(l, k + 1), chunk_positions(base, order[static_cast<std::size_t>(k)] + 1));
  }
}

TEST(SequentialPositions, CountsValidTokensOnly) {
  const auto l = chunk_segments(segments(2, {1, 3}, 2), 3);
  const auto pos = sequential_positions(l);
  // valid: [1 1 0][1 0 0][1 1 1][1 1 0]
  EXPECT_EQ(pos, (std::vector<int>{0, 1, 2, 2, 3, 3, 3, 4, 5, 6, 7, 8}));
}

class SignalTokens : public ::testing::Test {
 protected:
  void SetUp() override {
    SyntheticTaskConfig cfg;
    data = generate_synthetic_dataset(cfg, 2);
  }
  std::vector<RetrievalExample> data;
};

TEST_F(SignalTokens, TrailingColonAndBracket) {
  const auto builder = blockrank::testing::builder_for(data);
  const auto l = builder.build(data[0], false);
  ASSERT_EQ(l.signal_token_indices.size(), 2u);
  const auto& v = builder.vocab();
  const int qb = l.query_begin();
  EXPECT_EQ(l.tokens[static_cast<std::size_t>(qb + l.signal_token_indices[0])], v.id(":"));
  EXPECT_EQ(l.tokens[static_cast<std::size_t>(qb + l.signal_token_indices[1])], v.id("["));
  // The ":" is the one after "Final Answer", immediately before the bracket.
  EXPECT_EQ(l.signal_token_indices[1], l.signal_token_indices[0] + 1);
  EXPECT_EQ(l.signal_token_indices[1], l.query_len - 2);
  // With the answer appended the signal rows do not move.
  const auto with_answer = builder.build(data[0], true);
  EXPECT_EQ(with_answer.signal_token_indices, l.signal_token_indices);
}

TEST(SignalTokensBasic, MissingTokenIsAnError) {
  const auto l = chunk_segments(segments(2, {2}, 4), 8);
  const std::vector<int> spec{999};
  EXPECT_THROW(locate_signal_tokens(l, spec), Error);
}

TEST(SignalTokensBasic, LastOccurrenceWins) {
  PromptSegments s = segments(2, {2}, 1);
  s.query = {7, 5, 7, 5, 3};
  const auto l = chunk_segments(s, 8);
  const std::vector<int> spec{7};
  EXPECT_EQ(locate_signal_tokens(l, spec), std::vector<int>{2});
}

TEST(SignalTokensBasic, AnswerTokensAreNotSearched) {
  PromptSegments s = segments(2, {2}, 1);
  s.query = {7, 5};
  s.answer_target = {7};
  const auto l = chunk_segments(s, 8);
  EXPECT_EQ(l.query_len, 2);
  EXPECT_EQ(l.answer_len, 1);
  const std::vector<int> spec{7};
  EXPECT_EQ(locate_signal_tokens(l, spec), std::vector<int>{0});
}

TEST(AppendQueryToken, StopsWhenFull) {
  auto l = chunk_segments(segments(2, {2}, 3), 4);
  EXPECT_TRUE(append_query_token(l, 50));
  EXPECT_FALSE(append_query_token(l, 51));
  EXPECT_EQ(l.tokens[static_cast<std::size_t>(l.query_begin() + 3)], 50);
  EXPECT_EQ(l.answer_len, 1);
}

TEST(LayoutJson, ContainsChunks) {
  const auto l = assign_positions(chunk_segments(segments(2, {2, 3}, 3), 4), 100);
  const auto j = layout_to_json(l);
  EXPECT_EQ(j["chunks"].size(), 4u);
  EXPECT_EQ(j["chunks"][1]["doc_id"], "00");
  EXPECT_EQ(j["chunks"][3]["position_ids"][0], 100);
}
