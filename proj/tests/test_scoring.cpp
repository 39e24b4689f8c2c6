#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"

using namespace headrank;
using testing_support::rand_size;

TEST(Layout, SpanArithmetic) {
  // Span lengths include the opening marker: instruction 2, docs 5, query 4.
  const std::vector<DocText> docs{{"a", "river engine garden planet"},
                                  {"b", "violin harbor the of"},
                                  {"c", "copper lantern meadow falcon"}};
  const auto seq = layout_sequence("rank", docs, "river copper violin", Tokenizer::standard(), 256);
  EXPECT_EQ(seq.layout.instruction.size(), 2u);
  for (const auto& d : seq.layout.docs) EXPECT_EQ(d.range.size(), 5u);
  EXPECT_EQ(seq.layout.query.size(), 4u);
  EXPECT_EQ(seq.layout.query.begin, 2u + 3u * 5u);
  EXPECT_EQ(seq.layout.seq_len, seq.tokens.size());
  EXPECT_EQ(seq.tokens[seq.layout.docs[1].range.begin], Tokenizer::kDocument);
}

TEST(Layout, PermutedDocsPermuteSpans) {
  const std::vector<DocText> docs{{"a", "river"}, {"b", "stone cloud"}, {"c", "x y z"}};
  const std::vector<DocText> perm{docs[2], docs[0], docs[1]};
  const auto s1 = layout_sequence("go", docs, "river", Tokenizer::standard(), 256);
  const auto s2 = layout_sequence("go", perm, "river", Tokenizer::standard(), 256);
  EXPECT_EQ(s2.layout.docs[0].doc_id, "c");
  EXPECT_EQ(s2.layout.docs[0].range.size(), s1.layout.docs[2].range.size());
  EXPECT_EQ(s2.layout.docs[1].range.size(), s1.layout.docs[0].range.size());
}

TEST(Layout, Rejections) {
  const std::vector<DocText> empty_doc{{"a", ""}};
  EXPECT_THROW(layout_sequence("go", empty_doc, "q", Tokenizer::standard(), 256), ConfigError);
  const std::vector<DocText> docs{{"a", "river engine garden"}};
  try {
    (void)layout_sequence("rank", docs, "river", Tokenizer::standard(), 5);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("length 8"), std::string::npos) << e.what();
  }
}

TEST(ScoreHead, UniformAndOneHotRows) {
  std::mt19937_64 rng(3);
  const SpanLayout lay = oracles::random_layout(rng, 4);
  const std::size_t T = lay.seq_len;
  Matrix uni(T, T);
  for (std::size_t i = 0; i < T; ++i)
    for (std::size_t j = 0; j < T; ++j) uni(i, j) = 1.0 / static_cast<double>(T);
  const auto a = score_head(uni, lay);
  for (std::size_t d = 0; d < 4; ++d) {
    EXPECT_NEAR(a[d], static_cast<double>(lay.docs[d].range.size()) / static_cast<double>(T), 1e-15);
  }
  Matrix hot(T, T);
  for (std::size_t i = 0; i < T; ++i) hot(i, lay.docs[2].range.begin) = 1.0;
  const auto b = score_head(hot, lay);
  EXPECT_EQ(b, (std::vector<double>{0.0, 0.0, 1.0, 0.0}));
}

TEST(ScoreHead, MatchesDoubleLoopOracle) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 250; ++trial) {
    const SpanLayout lay = oracles::random_layout(rng, rand_size(rng, 1, 12));
    const Matrix a = oracles::random_causal(rng, lay.seq_len);
    const auto got = score_head(a, lay);
    const auto want = oracles::doc_mass(a, lay);
    ASSERT_EQ(got.size(), want.size());
    for (std::size_t d = 0; d < got.size(); ++d) EXPECT_NEAR(got[d], want[d], 1e-12);
  }
}

TEST(ScoreHead, RejectsMismatchedShapes) {
  std::mt19937_64 rng(4);
  const SpanLayout lay = oracles::random_layout(rng, 3);
  EXPECT_THROW(score_head(Matrix(lay.seq_len + 1, lay.seq_len + 1), lay), ShapeError);
  AttentionTrace tr;
  tr.seq_len = lay.seq_len + 2;
  EXPECT_THROW(score_per_head(tr, lay), ShapeError);
}

TEST(Calibrate, Examples) {
  HeadDocScores raw, zero, base;
  raw.doc_ids = zero.doc_ids = base.doc_ids = {"a", "b"};
  raw.scores[{1, 0}] = {0.30, 0.5};
  zero.scores[{1, 0}] = {0.0, 0.0};
  base.scores[{1, 0}] = {0.12, 0.5};
  EXPECT_EQ(calibrate(raw, zero).at({1, 0}), raw.at({1, 0}));
  EXPECT_EQ(calibrate(raw, raw).at({1, 0}), (std::vector<double>{0.0, 0.0}));
  EXPECT_NEAR(calibrate(raw, base).at({1, 0})[0], 0.18, 1e-15);
  HeadDocScores other = base;
  other.doc_ids = {"a", "c"};
  EXPECT_THROW(calibrate(raw, other), ShapeError);
}

TEST(Aggregate, ExamplesAndOracle) {
  HeadDocScores s;
  s.doc_ids = {"a", "b"};
  s.scores[{1, 0}] = {0.2, 0.1};
  s.scores[{2, 1}] = {0.05, 0.4};
  const std::vector<HeadId> one{{1, 0}};
  EXPECT_EQ(aggregate_core(s, HeadSet::from_ids(one)), s.at({1, 0}));
  const std::vector<HeadId> two{{1, 0}, {2, 1}};
  const auto sum = aggregate_core(s, HeadSet::from_ids(two));
  EXPECT_NEAR(sum[0], 0.25, 1e-15);
  EXPECT_NEAR(sum[1], 0.5, 1e-15);
  const std::vector<HeadId> missing{{3, 3}};
  try {
    (void)aggregate_core(s, HeadSet::from_ids(missing));
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("L3-H3"), std::string::npos) << e.what();
  }

  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int trial = 0; trial < 200; ++trial) {
    HeadDocScores big;
    const std::size_t n = rand_size(rng, 1, 20);
    for (std::size_t d = 0; d < n; ++d) big.doc_ids.push_back("d" + std::to_string(d));
    std::vector<HeadId> ids;
    for (std::size_t l = 1; l <= 4; ++l)
      for (std::size_t h = 0; h < 4; ++h) {
        auto& row = big.scores[{l, h}];
        for (std::size_t d = 0; d < n; ++d) row.push_back(u(rng));
        if (ids.size() < 8 && rng() % 2) ids.push_back({l, h});
      }
    if (ids.empty()) ids.push_back({1, 0});
    const auto got = aggregate_core(big, HeadSet::from_ids(ids));
    for (std::size_t d = 0; d < n; ++d) {
      double want = 0.0;
      for (std::size_t k = 0; k < ids.size(); ++k) want += big.scores.at(ids[k])[d];
      EXPECT_NEAR(got[d], want, 1e-12);
    }
  }
}

TEST(CoreScores, GraphMatchesValuePath) {
  std::mt19937_64 rng(5);
  const auto cfg = testing_support::tiny_model(3, 2, 16);
  const auto params = init_params(cfg);
  const ScoringConfig sc;
  const std::vector<HeadId> ids{{1, 1}, {3, 0}};
  const HeadSet heads = HeadSet::from_ids(ids);
  for (int trial = 0; trial < 5; ++trial) {
    const auto inst = testing_support::random_instance(rng, 6);
    const auto input = prepare_scoring_input(inst, sc, cfg.max_seq_len);
    const auto scored = prefill_trace(params, input.scored.tokens, 3);
    const auto base = prefill_trace(params, input.baseline.tokens, 3);
    const auto want = aggregate_core(calibrated_scores(scored, base, input, true), heads);

    ad::Tape tape(false);
    const BoundModel bm(tape, params);
    const auto got = core_scores_graph(tape, bm, input, heads, true).value();
    ASSERT_EQ(got.size(), want.size());
    for (std::size_t d = 0; d < want.size(); ++d) EXPECT_NEAR(got[d], want[d], 1e-12);
  }
}
