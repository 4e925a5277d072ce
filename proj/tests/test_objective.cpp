#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "blockrank/objective.hpp"
#include "test_support.hpp"

using namespace blockrank;
using blockrank::testing::random_layout;
using blockrank::testing::random_matrix;

namespace {

constexpr int kVocab = 40;

// Materializes every logit, masks non-document columns, then normalizes.
std::vector<double> naive_scores(const QKCache<double>& qk, const ChunkLayout& l, int H) {
  const int S = l.total_tokens();
  const auto d = qk.q.cols() / H;
  std::vector<int> owner(static_cast<std::size_t>(S), -1);
  for (std::size_t k = 0; k < l.doc_token_index_sets.size(); ++k)
    for (int j : l.doc_token_index_sets[k]) owner[static_cast<std::size_t>(j)] = static_cast<int>(k);
  std::vector<double> out(static_cast<std::size_t>(l.n_docs()), 0.0);
  for (int s : l.signal_token_indices) {
    const int i = l.query_begin() + s;
    std::vector<double> avg(static_cast<std::size_t>(S), 0.0);
    for (int h = 0; h < H; ++h) {
      std::vector<double> z(static_cast<std::size_t>(S));
      for (int j = 0; j < S; ++j)
        z[static_cast<std::size_t>(j)] =
            owner[static_cast<std::size_t>(j)] >= 0
                ? qk.q.row(i).segment(h * d, d).dot(qk.k.row(j).segment(h * d, d)) / std::sqrt(static_cast<double>(d))
                : -1e300;
      const double m = *std::max_element(z.begin(), z.end());
      double sum = 0;
      for (auto& v : z) sum += (v = v > -1e299 ? std::exp(v - m) : 0.0);
      for (int j = 0; j < S; ++j) avg[static_cast<std::size_t>(j)] += z[static_cast<std::size_t>(j)] / sum / H;
    }
    for (int j = 0; j < S; ++j)
      if (owner[static_cast<std::size_t>(j)] >= 0) out[static_cast<std::size_t>(owner[static_cast<std::size_t>(j)])] += avg[static_cast<std::size_t>(j)];
  }
  return out;
}

QKCache<double> random_qk(const ChunkLayout& l, int d, std::mt19937_64& rng) {
  return {random_matrix<double>(l.total_tokens(), d, rng), random_matrix<double>(l.total_tokens(), d, rng)};
}

}  // namespace

TEST(AttentionMass, MatchesNaiveReference) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const int N = 1 + trial % 6;
    const int H = 1 + trial % 2;
    const auto l = random_layout(N, 8, rng(), kVocab);
    const auto qk = random_qk(l, 8 * H, rng);
    const auto got = attention_mass_scores(qk, l, H, 1);
    const auto want = naive_scores(qk, l, H);
    ASSERT_EQ(got.scores.size(), want.size());
    for (std::size_t k = 0; k < want.size(); ++k) EXPECT_NEAR(got.scores[k], want[k], 1e-12);
    double total = 0;
    for (double s : got.scores) total += s;
    EXPECT_NEAR(total, static_cast<double>(l.signal_token_indices.size()), 1e-5);
    for (const auto& row : got.per_signal) {
      double r = 0;
      for (double v : row) r += v;
      EXPECT_NEAR(r, 1.0, 1e-6);
    }
  }
}

TEST(AttentionMass, IdenticalKeysGiveUniformScores) {
  PromptSegments seg;
  seg.instruction = {1, 2, 3};
  for (int k = 0; k < 4; ++k) seg.documents.push_back({format_doc_id(k, 2), {4, 5, 6, 7}});
  seg.query = {8, 9, 10};
  auto l = assign_positions(chunk_segments(seg, 4), 100);
  l.signal_token_indices = {1, 2};
  std::mt19937_64 rng(2);
  auto qk = random_qk(l, 8, rng);
  for (int j : l.all_doc_tokens()) qk.k.row(j) = qk.k.row(l.all_doc_tokens()[0]);
  const auto s = attention_mass_scores(qk, l, 2, 0);
  for (double v : s.scores) EXPECT_NEAR(v, 2.0 / 4.0, 1e-12);
  const auto mean = attention_mass_scores(qk, l, 2, 0, SignalAggregation::mean);
  for (double v : mean.scores) EXPECT_NEAR(v, 0.25, 1e-12);
}

TEST(AttentionMass, SingleDocumentGetsAllMass) {
  std::mt19937_64 rng(3);
  const auto l = random_layout(1, 8, 3, kVocab);
  const auto s = attention_mass_scores(random_qk(l, 8, rng), l, 2, 0);
  ASSERT_EQ(s.scores.size(), 1u);
  EXPECT_NEAR(s.scores[0], static_cast<double>(l.signal_token_indices.size()), 1e-12);
}

TEST(AttentionMass, ShiftInvariantInQuery) {
  // Adding a constant to every key along one head direction shifts all logits
  // of a row equally; scores must not change.
  std::mt19937_64 rng(4);
  const auto l = random_layout(4, 8, 4, kVocab);
  auto qk = random_qk(l, 8, rng);
  const auto a = attention_mass_scores(qk, l, 1, 0);
  Mat<double> offset = random_matrix<double>(1, 8, rng);
  for (int j = 0; j < l.total_tokens(); ++j) qk.k.row(j) += offset;
  const auto b = attention_mass_scores(qk, l, 1, 0);
  for (std::size_t k = 0; k < a.scores.size(); ++k) EXPECT_NEAR(a.scores[k], b.scores[k], 1e-10);
}

TEST(AttentionMass, Errors) {
  std::mt19937_64 rng(5);
  auto l = random_layout(2, 8, 5, kVocab);
  const auto qk = random_qk(l, 8, rng);
  l.signal_token_indices.clear();
  EXPECT_THROW(attention_mass_scores(qk, l, 2, 0), Error);
}

TEST(AttentionMass, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(6);
  const auto l = random_layout(3, 6, 6, kVocab);
  const auto qk = random_qk(l, 8, rng);
  const std::vector<double> w{0.3, -1.2, 0.7};
  auto f = [&](const QKCache<double>& c) {
    const auto s = attention_mass_scores(c, l, 2, 0);
    double out = 0;
    for (std::size_t k = 0; k < w.size(); ++k) out += w[k] * s.scores[k];
    return out;
  };
  const auto g = attention_mass_scores_backward(qk, l, 2, SignalAggregation::sum, w);
  const double eps = 1e-6;
  std::uniform_int_distribution<int> col(0, 7);
  const auto docs = l.all_doc_tokens();
  for (int probe = 0; probe < 20; ++probe) {
    auto plus = qk, minus = qk;
    const bool on_q = probe % 2 == 0;
    const int row = on_q ? l.query_begin() + l.signal_token_indices[static_cast<std::size_t>(probe / 2 % l.signal_token_indices.size())]
                         : docs[static_cast<std::size_t>(probe) % docs.size()];
    const int c = col(rng);
    (on_q ? plus.q : plus.k)(row, c) += eps;
    (on_q ? minus.q : minus.k)(row, c) -= eps;
    const double num = (f(plus) - f(minus)) / (2 * eps);
    const double ana = (on_q ? g.q : g.k)(row, c);
    EXPECT_NEAR(ana, num, 1e-7 + 1e-6 * std::abs(num));
  }
}

TEST(InfoNce, ClosedForms) {
  const std::vector<double> uniform(4, 0.7);
  EXPECT_NEAR(infonce_aux_loss(uniform, 2, 0.05), std::log(4.0), 1e-10);
  const std::vector<double> one{3.0};
  EXPECT_NEAR(infonce_aux_loss(one, 0, 0.05), 0.0, 1e-15);
  const std::vector<double> peaked{2, 0, 0, 0};
  const double l = infonce_aux_loss(peaked, 0, 0.05);
  EXPECT_NEAR(l, std::log1p(3 * std::exp(-40.0)), 1e-20);
  EXPECT_LT(l, 1e-16);
}

TEST(InfoNce, ExcludedPositivesLeaveNormalizer) {
  const std::vector<double> s{1.0, 1.0, 1.0};
  const std::vector<int> ex{1};
  EXPECT_NEAR(infonce_aux_loss(s, 0, 1.0, ex), std::log(2.0), 1e-12);
}

TEST(InfoNce, Errors) {
  const std::vector<double> s{1.0, std::nan("")};
  EXPECT_THROW(infonce_aux_loss(s, 0, 0.05), Error);
  const std::vector<double> ok{1.0, 2.0};
  EXPECT_THROW(infonce_aux_loss(ok, 2, 0.05), Error);
  EXPECT_THROW(infonce_aux_loss(ok, 0, 0.0), Error);
}

TEST(InfoNce, GradientMatchesFiniteDifferences) {
  const std::vector<double> s{0.4, 0.1, -0.3, 0.25};
  const auto g = infonce_aux_loss_grad(s, 1, 0.5);
  for (std::size_t k = 0; k < s.size(); ++k) {
    auto p = s, m = s;
    p[k] += 1e-6;
    m[k] -= 1e-6;
    EXPECT_NEAR(g[k], (infonce_aux_loss(p, 1, 0.5) - infonce_aux_loss(m, 1, 0.5)) / 2e-6, 1e-7);
  }
}

TEST(NtpLoss, ClosedForms) {
  Mat<double> uniform = Mat<double>::Constant(4, 128, 0.3);
  const std::vector<int> rows{1, 2}, targets{5, 77};
  EXPECT_NEAR(ntp_loss(uniform, rows, targets), std::log(128.0), 1e-6);
  Mat<double> sharp = Mat<double>::Zero(4, 128);
  sharp(1, 5) = 30;
  sharp(2, 77) = 30;
  EXPECT_LE(ntp_loss(sharp, rows, targets), 1e-6);
}

TEST(NtpLoss, MaskedRowsDoNotMatter) {
  std::mt19937_64 rng(7);
  Mat<double> logits = random_matrix<double>(6, 20, rng);
  const std::vector<int> rows{2, 3}, targets{4, 9};
  const double base = ntp_loss(logits, rows, targets);
  logits.row(0).setConstant(100);
  logits.row(5) = random_matrix<double>(1, 20, rng);
  EXPECT_EQ(ntp_loss(logits, rows, targets), base);
  const auto g = ntp_loss_grad(logits, rows, targets);
  EXPECT_EQ(g.row(0).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(g.row(5).cwiseAbs().maxCoeff(), 0.0);
}

TEST(NtpLoss, AlignmentMismatch) {
  Mat<double> logits = Mat<double>::Zero(3, 5);
  const std::vector<int> rows{0, 1}, targets{1};
  EXPECT_THROW(ntp_loss(logits, rows, targets), Error);
  const std::vector<int> none;
  EXPECT_THROW(ntp_loss(logits, none, none), Error);
}

TEST(TotalLoss, Arithmetic) {
  const auto t = total_loss(4.852, 1.386, 0.1);
  EXPECT_NEAR(t.total, 4.9906, 1e-12);
  EXPECT_EQ(t.total, 4.852 + 0.1 * 1.386);
  EXPECT_EQ(total_loss(2.5, 9.0, 0.0).total, 2.5);
  EXPECT_EQ(total_loss(2.5, 9.0, 0.1, kDefaultTau, 0.0).total, 0.1 * 9.0);
  EXPECT_THROW(total_loss(1.0, 1.0, -0.1), Error);
}

TEST(AnswerRows, AlignWithAnswerTokens) {
  PromptSegments seg;
  seg.instruction = {1};
  seg.documents.push_back({"00", {2}});
  seg.query = {3, 4, 5};
  seg.answer_target = {6, 7};
  const auto l = chunk_segments(seg, 8);
  EXPECT_EQ(answer_prediction_rows(l), (std::vector<int>{2, 3}));
  EXPECT_EQ(answer_tokens(l), (std::vector<int>{6, 7}));
}
