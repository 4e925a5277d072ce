#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "blockrank/corpus.hpp"
#include "test_support.hpp"

using namespace blockrank;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "blockrank_tests";
  fs::create_directories(dir);
  return dir / name;
}

void write_lines(const fs::path& p, const std::vector<std::string>& lines) {
  std::ofstream out(p);
  for (const auto& l : lines) out << l << '\n';
}

RetrievalExample with_negatives(int n_neg) {
  RetrievalExample ex;
  ex.query = {"q"};
  ex.candidates.push_back({"00", {"pos"}});
  for (int i = 0; i < n_neg; ++i) ex.candidates.push_back({format_doc_id(i + 1, 2), {"neg" + std::to_string(i)}});
  ex.positive_indices = {0};
  return ex;
}

}  // namespace

TEST(BuildVocab, MinimalEnumeration) {
  const std::vector<std::string> corpus{"a b", "b c"};
  const std::vector<std::string> reserved{"<pad>"};
  const auto v = build_vocab(corpus, reserved);
  EXPECT_EQ(v.size(), 4u);
  EXPECT_EQ(v.id("<pad>"), 0);
  EXPECT_EQ(v.id("a"), 1);
  EXPECT_EQ(v.id("b"), 2);
  EXPECT_EQ(v.id("c"), 3);
}

TEST(BuildVocab, EmptyCorpusIsAnError) {
  const std::vector<std::string> corpus;
  const std::vector<std::string> reserved{"<pad>"};
  EXPECT_THROW(build_vocab(corpus, reserved), Error);
}

TEST(BuildVocab, Deterministic) {
  const std::vector<std::string> corpus{"x y z", "z y w"};
  const auto reserved = default_reserved_tokens(TemplateConfig{});
  EXPECT_EQ(build_vocab(corpus, reserved), build_vocab(corpus, reserved));
}

TEST(BuildVocab, CollisionNamesTheToken) {
  const std::vector<std::string> corpus{"hello : world"};
  const auto reserved = default_reserved_tokens(TemplateConfig{});
  try {
    build_vocab(corpus, reserved);
    FAIL() << "expected a collision error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("':'"), std::string::npos) << e.what();
  }
}

TEST(BuildVocab, DigitsAreSingleReservedTokens) {
  const std::vector<std::string> corpus{"w1 w2"};
  const auto v = build_vocab(corpus, default_reserved_tokens(TemplateConfig{}));
  std::set<int> ids;
  for (int d = 0; d < 10; ++d) {
    const int id = v.digit_id(d);
    EXPECT_TRUE(v.is_reserved(id));
    EXPECT_EQ(v.token(id), std::string(1, static_cast<char>('0' + d)));
    ids.insert(id);
  }
  EXPECT_EQ(ids.size(), 10u);
  EXPECT_EQ(v.pad_id(), 0);
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_EQ(v.id(v.token(static_cast<int>(i))), static_cast<int>(i));
}

TEST(SyntheticDataset, OnePositivePerExample) {
  SyntheticTaskConfig cfg;
  cfg.n_docs = 8;
  cfg.doc_len = 16;
  cfg.query_span_len = 6;
  cfg.distractor_overlap = 0.25;
  cfg.seed = 7;
  const auto data = generate_synthetic_dataset(cfg, 100);
  ASSERT_EQ(data.size(), 100u);
  for (const auto& ex : data) {
    ASSERT_EQ(ex.positive_indices.size(), 1u);
    ASSERT_EQ(ex.candidates.size(), 8u);
    const auto& pos = ex.candidates[static_cast<std::size_t>(ex.positive_indices[0])].content;
    ASSERT_EQ(ex.query.size(), 6u);
    // the query is a contiguous span of the positive
    const auto it = std::search(pos.begin(), pos.end(), ex.query.begin(), ex.query.end());
    EXPECT_NE(it, pos.end());
    std::set<std::string> ids;
    for (const auto& c : ex.candidates) ids.insert(c.doc_id);
    EXPECT_EQ(ids.size(), ex.candidates.size());
  }
}

TEST(SyntheticDataset, ZeroOverlapIsSolvedByBagOfWords) {
  SyntheticTaskConfig cfg;
  cfg.distractor_overlap = 0.0;
  const auto data = generate_synthetic_dataset(cfg, 500);
  int hits = 0;
  for (const auto& ex : data) {
    const std::set<std::string> q(ex.query.begin(), ex.query.end());
    std::vector<double> scores;
    for (const auto& c : ex.candidates) {
      const std::set<std::string> words(c.content.begin(), c.content.end());
      double s = 0;
      for (const auto& w : q) s += words.count(w);
      scores.push_back(s);
    }
    const auto best = std::max_element(scores.begin(), scores.end()) - scores.begin();
    hits += static_cast<int>(best) == ex.positive_indices[0];
  }
  EXPECT_EQ(hits, 500);
}

TEST(SyntheticDataset, OverlapCreatesHardNegatives) {
  SyntheticTaskConfig cfg;
  cfg.distractor_overlap = 0.5;
  const auto data = generate_synthetic_dataset(cfg, 50);
  double shared = 0;
  int count = 0;
  for (const auto& ex : data) {
    const auto& pos = ex.candidates[static_cast<std::size_t>(ex.positive_indices[0])].content;
    const std::set<std::string> pw(pos.begin(), pos.end());
    for (std::size_t k = 0; k < ex.candidates.size(); ++k) {
      if (static_cast<int>(k) == ex.positive_indices[0]) continue;
      int s = 0;
      for (const auto& w : ex.candidates[k].content) s += pw.count(w) > 0;
      shared += s;
      ++count;
    }
  }
  EXPECT_GE(shared / count, 0.5 * cfg.doc_len - 1e-9);
}

TEST(SyntheticDataset, Deterministic) {
  SyntheticTaskConfig cfg;
  EXPECT_EQ(generate_synthetic_dataset(cfg, 20), generate_synthetic_dataset(cfg, 20));
  auto other = cfg;
  other.seed = 8;
  EXPECT_NE(generate_synthetic_dataset(cfg, 20), generate_synthetic_dataset(other, 20));
}

TEST(SyntheticDataset, RejectsInvalidConfig) {
  SyntheticTaskConfig cfg;
  cfg.query_span_len = cfg.doc_len + 1;
  EXPECT_THROW(generate_synthetic_dataset(cfg, 1), ConfigError);
  cfg = {};
  cfg.n_docs = 1;
  EXPECT_THROW(generate_synthetic_dataset(cfg, 1), ConfigError);
}

TEST(Ingest, ValidFileKeepsOrder) {
  const auto p = temp_file("two.jsonl");
  write_lines(p, {R"({"query": "a b", "candidates": [{"id": "00", "text": "x y"}, {"id": "01", "text": "z"}], "positives": [1]})",
                  R"({"query": "c", "candidates": [{"id": "00", "text": "w"}], "positives": [0]})"});
  const auto ex = ingest_examples(p);
  ASSERT_EQ(ex.size(), 2u);
  EXPECT_EQ(ex[0].query, (std::vector<std::string>{"a", "b"}));
  EXPECT_EQ(ex[0].positive_indices, std::vector<int>{1});
  EXPECT_EQ(ex[1].candidates[0].content, std::vector<std::string>{"w"});
}

TEST(Ingest, MissingFieldCitesLine) {
  const auto p = temp_file("missing.jsonl");
  write_lines(p, {R"({"candidates": [{"id": "00", "text": "x"}], "positives": [0]})"});
  try {
    ingest_examples(p);
    FAIL();
  } catch (const Error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("line 1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("query"), std::string::npos) << msg;
  }
}

TEST(Ingest, DuplicateIdRejected) {
  const auto p = temp_file("dup.jsonl");
  write_lines(p, {R"({"query": "a", "candidates": [{"id": "03", "text": "x"}, {"id": "03", "text": "y"}], "positives": [0]})"});
  EXPECT_THROW(ingest_examples(p), Error);
}

TEST(Ingest, MalformedJsonCitesLine) {
  const auto p = temp_file("bad.jsonl");
  write_lines(p, {R"({"query": "a", "candidates": [{"id": "00", "text": "x"}], "positives": [0]})", "{not json"});
  try {
    ingest_examples(p);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
  }
}

TEST(Ingest, RoundTrip) {
  SyntheticTaskConfig cfg;
  const auto data = generate_synthetic_dataset(cfg, 30);
  const auto p = temp_file("roundtrip.jsonl");
  write_examples(p, data);
  EXPECT_EQ(ingest_examples(p), data);
}

TEST(CandidateList, TeacherForcingKeepsPositive) {
  const auto out = build_candidate_list(with_negatives(40), 30, 3);
  ASSERT_EQ(out.candidates.size(), 30u);
  ASSERT_EQ(out.positive_indices.size(), 1u);
  EXPECT_EQ(out.candidates[static_cast<std::size_t>(out.positive_indices[0])].content, std::vector<std::string>{"pos"});
  for (std::size_t k = 0; k < out.candidates.size(); ++k) EXPECT_EQ(out.candidates[k].doc_id, format_doc_id(static_cast<int>(k), 2));
}

TEST(CandidateList, SingleCandidate) {
  const auto out = build_candidate_list(with_negatives(5), 1, 0);
  ASSERT_EQ(out.candidates.size(), 1u);
  EXPECT_EQ(out.positive_indices, std::vector<int>{0});
  EXPECT_EQ(out.candidates[0].content, std::vector<std::string>{"pos"});
}

TEST(CandidateList, SeedsPermuteTheSameMultiset) {
  const auto a = build_candidate_list(with_negatives(10), 8, 1);
  const auto b = build_candidate_list(with_negatives(10), 8, 2);
  std::multiset<std::vector<std::string>> ca, cb;
  for (const auto& c : a.candidates) ca.insert(c.content);
  for (const auto& c : b.candidates) cb.insert(c.content);
  EXPECT_EQ(ca, cb);
  std::vector<std::vector<std::string>> oa, ob;
  for (const auto& c : a.candidates) oa.push_back(c.content);
  for (const auto& c : b.candidates) ob.push_back(c.content);
  EXPECT_NE(oa, ob);
}

TEST(CandidateList, TooFewSlotsForPositives) {
  auto ex = with_negatives(4);
  ex.positive_indices = {0, 1};
  EXPECT_THROW(build_candidate_list(ex, 1, 0), Error);
}

TEST(CandidateList, TeacherForcingProperty) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 1000; ++trial) {
    const int total = std::uniform_int_distribution<int>(2, 40)(rng);
    RetrievalExample ex;
    ex.query = {"q"};
    for (int i = 0; i < total; ++i) ex.candidates.push_back({format_doc_id(i, 2), {"c" + std::to_string(i)}});
    const int n_pos = std::uniform_int_distribution<int>(1, std::min(3, total))(rng);
    std::vector<int> idx(static_cast<std::size_t>(total));
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    ex.positive_indices.assign(idx.begin(), idx.begin() + n_pos);
    std::sort(ex.positive_indices.begin(), ex.positive_indices.end());
    const int n = std::uniform_int_distribution<int>(n_pos, total)(rng);
    const auto out = build_candidate_list(ex, n, rng());
    ASSERT_EQ(static_cast<int>(out.candidates.size()), n);
    ASSERT_EQ(static_cast<int>(out.positive_indices.size()), n_pos);
    std::set<std::vector<std::string>> want, got;
    for (int p : ex.positive_indices) want.insert(ex.candidates[static_cast<std::size_t>(p)].content);
    for (int p : out.positive_indices) {
      ASSERT_GE(p, 0);
      ASSERT_LT(p, n);
      got.insert(out.candidates[static_cast<std::size_t>(p)].content);
    }
    ASSERT_EQ(want, got);
  }
}

class AssemblePrompt : public ::testing::Test {
 protected:
  void SetUp() override {
    ex.query = {"alpha", "beta"};
    for (int k = 0; k < 3; ++k) ex.candidates.push_back({format_doc_id(k, 2), {"doc" + std::to_string(k), "text"}});
    ex.positive_indices = {1};
    const std::vector<RetrievalExample> one{ex};
    vocab = build_vocab(corpus_texts(one), default_reserved_tokens(tmpl));
  }
  RetrievalExample ex;
  TemplateConfig tmpl;
  Vocabulary vocab;
};

TEST_F(AssemblePrompt, AnswerTargetSpellsTheId) {
  RetrievalExample big;
  big.query = {"q"};
  for (int k = 0; k < 25; ++k) big.candidates.push_back({format_doc_id(k, 2), {"c"}});
  big.positive_indices = {20};
  const std::vector<RetrievalExample> one{big};
  const auto v = build_vocab(corpus_texts(one), default_reserved_tokens(tmpl));
  const auto seg = assemble_prompt(big, tmpl, v);
  const std::vector<int> want{v.digit_id(2), v.digit_id(0), v.id("'"), v.id("]")};
  EXPECT_EQ(seg.answer_target, want);
}

TEST_F(AssemblePrompt, QueryInPrefixToggle) {
  const int alpha = vocab.id("alpha"), beta = vocab.id("beta");
  auto has_query = [&](const std::vector<int>& s) {
    return std::count(s.begin(), s.end(), alpha) + std::count(s.begin(), s.end(), beta);
  };
  EXPECT_EQ(has_query(assemble_prompt(ex, tmpl, vocab).instruction), 2);
  auto off = tmpl;
  off.query_in_prefix = false;
  EXPECT_EQ(has_query(assemble_prompt(ex, off, vocab).instruction), 0);
}

TEST_F(AssemblePrompt, DocumentsInCandidateOrder) {
  const auto seg = assemble_prompt(ex, tmpl, vocab);
  ASSERT_EQ(seg.documents.size(), 3u);
  for (int k = 0; k < 3; ++k) {
    EXPECT_EQ(seg.documents[static_cast<std::size_t>(k)].doc_id, format_doc_id(k, 2));
    const auto& toks = seg.documents[static_cast<std::size_t>(k)].tokens;
    EXPECT_NE(std::find(toks.begin(), toks.end(), vocab.id("doc" + std::to_string(k))), toks.end());
  }
}

TEST_F(AssemblePrompt, QueryScaffoldEndsWithAnswerOpener) {
  const auto seg = assemble_prompt(ex, tmpl, vocab);
  ASSERT_GE(seg.query.size(), 4u);
  const std::vector<int> tail(seg.query.end() - 4, seg.query.end());
  const std::vector<int> want{vocab.id(phrases::kFinalAnswer), vocab.id(":"), vocab.id("["), vocab.id("'")};
  EXPECT_EQ(tail, want);
  EXPECT_EQ(*(seg.query.end() - 5), vocab.id(":"));
  EXPECT_EQ(*(seg.query.end() - 6), vocab.id(phrases::kFollowing));
}

TEST_F(AssemblePrompt, PureFunction) {
  const auto a = assemble_prompt(ex, tmpl, vocab);
  const auto b = assemble_prompt(ex, tmpl, vocab);
  EXPECT_EQ(a.instruction, b.instruction);
  EXPECT_EQ(a.query, b.query);
  EXPECT_EQ(a.answer_target, b.answer_target);
  for (std::size_t k = 0; k < a.documents.size(); ++k) EXPECT_EQ(a.documents[k].tokens, b.documents[k].tokens);
}

TEST_F(AssemblePrompt, EachDocumentCarriesItsIdTwice) {
  SyntheticTaskConfig cfg;
  cfg.n_docs = 30;
  const auto data = generate_synthetic_dataset(cfg, 10);
  const auto v = build_vocab(corpus_texts(data), default_reserved_tokens(tmpl));
  for (const auto& e : data) {
    const auto seg = assemble_prompt(e, tmpl, v);
    for (const auto& d : seg.documents) {
      std::vector<int> id;
      for (char c : d.doc_id) id.push_back(v.digit_id(c - '0'));
      int hits = 0;
      for (auto it = d.tokens.begin(); (it = std::search(it, d.tokens.end(), id.begin(), id.end())) != d.tokens.end(); ++it)
        ++hits;
      EXPECT_EQ(hits, 2) << d.doc_id;
    }
  }
}

TEST_F(AssemblePrompt, RejectsNonDecimalIds) {
  auto bad = ex;
  bad.candidates[0].doc_id = "a0";
  EXPECT_THROW(assemble_prompt(bad, tmpl, vocab), Error);
}

TEST(TemplateConfigJson, RoundTrip) {
  TemplateConfig t;
  t.query_in_prefix = false;
  t.id_digits = 3;
  const auto back = TemplateConfig::from_json(t.to_json());
  EXPECT_EQ(back.instruction_text, t.instruction_text);
  EXPECT_EQ(back.query_in_prefix, false);
  EXPECT_EQ(back.id_digits, 3);
}
