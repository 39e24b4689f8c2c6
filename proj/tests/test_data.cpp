#include <gtest/gtest.h>

#include <map>
#include <random>

#include "oracles.hpp"

using namespace headrank;

namespace {

RankingInstance with_grades(const std::vector<int>& grades) {
  RankingInstance inst;
  inst.query_id = "q1";
  inst.query_text = "river stone";
  for (std::size_t i = 0; i < grades.size(); ++i) {
    inst.candidates.push_back({"d" + std::to_string(i + 1), "river text", grades[i], i + 1});
  }
  return inst;
}

}  // namespace

TEST(Pairs, DiscardsNonAdjacentGaps) {
  const auto pairs = build_pairs(with_grades({3, 2, 0}));
  ASSERT_EQ(pairs.size(), 1u);
  EXPECT_EQ(pairs[0].chosen_doc_id, "d1");
  EXPECT_EQ(pairs[0].rejected_doc_id, "d2");
  EXPECT_TRUE(build_pairs(with_grades({1, 1, 1, 1})).empty());
}

TEST(Pairs, TwoOneOneZero) {
  const auto inst = with_grades({2, 1, 1, 0});
  const auto pairs = build_pairs(inst);
  ASSERT_EQ(pairs.size(), 4u);
  const auto oracle = oracles::adjacent_pairs(inst);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    EXPECT_EQ(pairs[i].chosen_index, oracle[i].first);
    EXPECT_EQ(pairs[i].rejected_index, oracle[i].second);
  }
}

TEST(Pairs, MatchBruteForceOnRandomInstances) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 300; ++trial) {
    const auto inst = testing_support::random_instance(rng, testing_support::rand_size(rng, 1, 30));
    const auto pairs = build_pairs(inst);
    const auto oracle = oracles::adjacent_pairs(inst);
    ASSERT_EQ(pairs.size(), oracle.size());
    std::map<int, std::size_t> count;
    for (const auto& c : inst.candidates) ++count[c.grade];
    std::size_t expected = 0;
    for (int g = 0; g < kMaxGrade; ++g) expected += count[g + 1] * count[g];
    EXPECT_EQ(pairs.size(), expected);
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      EXPECT_EQ(pairs[i].grade_chosen - pairs[i].grade_rejected, 1);
      EXPECT_EQ(pairs[i].chosen_index, oracle[i].first);
      EXPECT_EQ(pairs[i].rejected_index, oracle[i].second);
      EXPECT_EQ(pairs[i].chosen_doc_id, inst.candidates[oracle[i].first].doc_id);
    }
  }
}

TEST(Pairs, CapIsSeededSubsetInOrder) {
  const auto inst = with_grades({3, 2, 2, 2, 1, 1, 1, 1, 0, 0, 0, 0, 0});
  const auto all = build_pairs(inst);
  ASSERT_GT(all.size(), 10u);
  const auto a = cap_pairs(all, 10, 5);
  EXPECT_EQ(a, cap_pairs(all, 10, 5));
  ASSERT_EQ(a.size(), 10u);
  std::size_t cursor = 0;
  for (const auto& p : a) {
    while (cursor < all.size() && !(all[cursor] == p)) ++cursor;
    ASSERT_LT(cursor, all.size()) << "capped pair missing or out of order";
    ++cursor;
  }
  EXPECT_EQ(cap_pairs(all, 0, 5), all);
  EXPECT_EQ(cap_pairs(all, 1000, 5), all);
}

TEST(SelectionExample, PositiveAndNegatives) {
  const auto ex = make_selection_example(with_grades({1, 0, 3, 3, 2, 0}), 3);
  EXPECT_EQ(ex.positive, 2u);
  EXPECT_EQ(ex.negatives, (std::vector<std::size_t>{0, 1, 4}));
  EXPECT_THROW(make_selection_example(with_grades({0, 0, 0})), ParseError);
  EXPECT_THROW(make_selection_example(with_grades({2, 2})), ParseError);
}

TEST(Synthetic, DeterministicAndPlanted) {
  SyntheticConfig cfg;
  cfg.n_queries = 30;
  cfg.n_test = 5;
  const auto a = generate_synthetic(cfg);
  EXPECT_EQ(serialize_corpus(a), serialize_corpus(generate_synthetic(cfg)));
  std::size_t tests = 0;
  for (const auto& inst : a) {
    inst.validate();
    tests += inst.split == Split::test;
    std::set<std::string> keywords;
    std::istringstream qs(inst.query_text);
    for (std::string w; qs >> w;) keywords.insert(w);
    for (const auto& c : inst.candidates) {
      std::istringstream ds(c.text);
      int planted = 0;
      for (std::string w; ds >> w;) planted += keywords.count(w) > 0;
      EXPECT_EQ(planted, c.grade) << inst.query_id << " " << c.doc_id;
    }
  }
  EXPECT_EQ(tests, 5u);
  cfg.seed += 1;
  EXPECT_NE(serialize_corpus(generate_synthetic(cfg)), serialize_corpus(a));
}

TEST(Synthetic, RelevantDocumentsReachTheMiddleZone) {
  SyntheticConfig cfg;
  cfg.n_docs_per_query = 40;
  cfg.n_queries = 200;
  std::size_t hits = 0;
  const auto corpus = generate_synthetic(cfg);
  for (const auto& inst : corpus) {
    bool hit = false;
    for (const auto& c : inst.candidates) hit |= c.grade >= 2 && c.original_rank >= 11 && c.original_rank <= 30;
    hits += hit;
  }
  EXPECT_GE(static_cast<double>(hits) / corpus.size(), 0.8);
}

TEST(Synthetic, RejectsBadBounds) {
  SyntheticConfig cfg;
  cfg.n_docs_per_query = 3;
  EXPECT_THROW(generate_synthetic(cfg), ConfigError);
  cfg = {};
  cfg.grade_levels = 1;
  EXPECT_THROW(generate_synthetic(cfg), ConfigError);
}

TEST(Corpus, SaveLoadIsIdentity) {
  SyntheticConfig cfg;
  cfg.n_queries = 12;
  cfg.n_test = 4;
  const auto a = generate_synthetic(cfg);
  const auto dir = testing_support::scratch_dir("corpus");
  save_corpus(dir / "c.jsonl", a);
  EXPECT_EQ(load_corpus(dir / "c.jsonl"), a);
}

TEST(Corpus, CandidatesSortedByRankOnLoad) {
  const std::string line =
      R"({"query_id":"q1","query":"x","candidates":[{"doc_id":"b","text":"t","rank":2},{"doc_id":"a","text":"t","rank":1}]})";
  const auto c = parse_corpus(line);
  ASSERT_EQ(c.size(), 1u);
  EXPECT_EQ(c[0].candidates[0].doc_id, "a");
  EXPECT_EQ(c[0].candidates[1].grade, 0);
}

TEST(Corpus, MalformedInputReportsLine) {
  const std::string good = R"({"query_id":"q1","query":"x","candidates":[{"doc_id":"a","text":"t","rank":1}]})";
  try {
    (void)parse_corpus(good + "\n{broken\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
  const std::string dup_doc =
      R"({"query_id":"q1","query":"x","candidates":[{"doc_id":"a","text":"t","rank":1},{"doc_id":"a","text":"t","rank":2}]})";
  EXPECT_THROW(parse_corpus(dup_doc), ParseError);
  const std::string gap =
      R"({"query_id":"q1","query":"x","candidates":[{"doc_id":"a","text":"t","rank":1},{"doc_id":"b","text":"t","rank":3}]})";
  EXPECT_THROW(parse_corpus(gap), ParseError);
  EXPECT_THROW(parse_corpus(good + "\n" + good), ParseError);
}

TEST(Qrels, ParseAndJoin) {
  const auto q = parse_qrels("q1 0 d7 2\n\nq1 0 d1 1\n");
  EXPECT_EQ(q.at({"q1", "d7"}), 2);
  std::vector<RankingInstance> corpus{with_grades({0, 0, 0})};
  apply_qrels(corpus, q);
  EXPECT_EQ(corpus[0].candidates[0].grade, 1);
  EXPECT_EQ(corpus[0].candidates[1].grade, 0);
  EXPECT_THROW(parse_qrels("q1 0 d7 2\nq1 0 d7 1\n"), ParseError);
  try {
    (void)parse_qrels("q1 0 d1 1\nq1 d7 2\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
  EXPECT_THROW(parse_qrels("q1 0 d7 two\n"), ParseError);
}

TEST(Qrels, SerializeRoundTrips) {
  SyntheticConfig cfg;
  cfg.n_queries = 6;
  cfg.n_test = 2;
  auto corpus = generate_synthetic(cfg);
  const auto graded = corpus;
  for (auto& inst : corpus)
    for (auto& c : inst.candidates) c.grade = 0;
  apply_qrels(corpus, parse_qrels(serialize_qrels(graded)));
  EXPECT_EQ(corpus, graded);
}
