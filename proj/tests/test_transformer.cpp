#include <gtest/gtest.h>

#include <random>

#include "test_support.hpp"

using namespace headrank;
using testing_support::tiny_model;

namespace {

std::vector<TokenId> random_tokens(std::mt19937_64& rng, std::size_t n, std::size_t vocab) {
  std::vector<TokenId> t(n);
  for (auto& x : t) x = static_cast<TokenId>(rng() % vocab);
  return t;
}

}  // namespace

TEST(Tokenizer, WordsBytesAndMarkers) {
  const Tokenizer& tok = Tokenizer::standard();
  const auto ids = tok.encode("rank  zzz");
  ASSERT_EQ(ids.size(), 4u);  // one word plus three bytes
  EXPECT_GE(ids[0], Tokenizer::kWordBase);
  EXPECT_EQ(tok.token_text(ids[0]), "rank");
  EXPECT_EQ(tok.token_text(ids[1]), "z");
  EXPECT_TRUE(tok.encode("   ").empty());
  EXPECT_LT(Tokenizer::kQuery, Tokenizer::kByteBase);
}

TEST(InitParams, DeterministicPerSeed) {
  ModelConfig c;
  c.seed = 42;
  const auto a = init_params(c);
  const auto b = init_params(c);
  EXPECT_EQ(serialize_checkpoint(a), serialize_checkpoint(b));
  c.seed = 43;
  EXPECT_NE(serialize_checkpoint(init_params(c)), serialize_checkpoint(a));
}

TEST(InitParams, RejectsIndivisibleWidth) {
  ModelConfig c;
  c.d_model = 65;
  c.n_heads = 4;
  EXPECT_THROW(init_params(c), ConfigError);
  ModelConfig small_vocab;
  small_vocab.vocab_size = 10;
  EXPECT_THROW(init_params(small_vocab), ConfigError);
}

TEST(InitParams, ParameterCountMatchesShapeArithmetic) {
  const ModelConfig c;  // defaults
  const auto p = init_params(c);
  // Hand count: embeddings V*d + T*d; per layer two norm vectors, four d x d
  // projections, and the d x d_ff / d_ff x d feed-forward pair.
  const std::size_t V = c.vocab_size, T = c.max_seq_len, d = 64, f = 128, L = 4;
  const std::size_t expected = V * d + T * d + L * (d + d + 4 * d * d + d * f + f * d);
  EXPECT_EQ(p.parameter_count(), expected);
  EXPECT_EQ(TransformerParams::parameter_count(c), expected);
}

TEST(Prefill, SingleTokenMapsAreOne) {
  const auto p = init_params(tiny_model());
  const std::vector<TokenId> one{Tokenizer::kQuery};
  const auto trace = prefill_trace(p, one, 2);
  ASSERT_EQ(trace.maps.size(), 4u);
  for (const auto& [id, m] : trace.maps) {
    ASSERT_EQ(m.rows(), 1u);
    EXPECT_EQ(m(0, 0), 1.0);
  }
}

TEST(Prefill, CausalAndRowStochastic) {
  std::mt19937_64 rng(1);
  const auto cfg = tiny_model(3, 2, 16);
  const auto p = init_params(cfg);
  for (int trial = 0; trial < 20; ++trial) {
    const auto toks = random_tokens(rng, 1 + rng() % 30, cfg.vocab_size);
    const auto tr = prefill_trace(p, toks, 3);
    EXPECT_EQ(tr.recorded_depth, 3u);
    EXPECT_EQ(tr.maps.size(), 6u);
    for (const auto& [id, m] : tr.maps) {
      for (std::size_t i = 0; i < m.rows(); ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < m.cols(); ++j) {
          if (j > i) {
            EXPECT_EQ(m(i, j), 0.0);
          }
          s += m(i, j);
        }
        EXPECT_NEAR(s, 1.0, 1e-9);
      }
    }
  }
}

TEST(Prefill, EarlyExitBitIdentical) {
  std::mt19937_64 rng(2);
  const auto cfg = tiny_model(4, 2, 16);
  const auto p = init_params(cfg);
  for (int trial = 0; trial < 10; ++trial) {
    const auto toks = random_tokens(rng, 5 + rng() % 30, cfg.vocab_size);
    const auto full = prefill_trace(p, toks, 4);
    for (std::size_t d = 1; d <= 4; ++d) {
      const auto cut = prefill_trace(p, toks, d);
      for (const auto& [id, m] : cut.maps) {
        EXPECT_LE(id.layer, d);
        EXPECT_EQ(m, full.at(id)) << id.label() << " at depth " << d;
      }
      EXPECT_EQ(cut.maps.size(), d * cfg.n_heads);
    }
  }
}

TEST(Prefill, KeepFilterOnlyRestrictsTrace) {
  const auto cfg = tiny_model(2, 2, 16);
  const auto p = init_params(cfg);
  const std::vector<TokenId> toks{0, 140, 150, 2, 160};
  const std::set<HeadId> keep{{2, 1}};
  const auto tr = prefill_trace(p, toks, 2, &keep);
  ASSERT_EQ(tr.maps.size(), 1u);
  EXPECT_EQ(tr.at({2, 1}), prefill_trace(p, toks, 2).at({2, 1}));
}

TEST(Prefill, RejectsBadInputs) {
  auto cfg = tiny_model();
  cfg.max_seq_len = 8;
  const auto p = init_params(cfg);
  const std::vector<TokenId> long_seq(9, 5);
  try {
    (void)prefill_trace(p, long_seq, 1);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("9"), std::string::npos);
  }
  const std::vector<TokenId> ok(4, 5);
  EXPECT_THROW(prefill_trace(p, ok, 0), ConfigError);
  EXPECT_THROW(prefill_trace(p, ok, 3), ConfigError);
  const std::vector<TokenId> bad{static_cast<TokenId>(cfg.vocab_size)};
  EXPECT_THROW(prefill_trace(p, bad, 1), ConfigError);
}

TEST(Prefill, AttentionEntryGradientsPassFiniteDifferences) {
  std::mt19937_64 rng(7);
  auto cfg = tiny_model(2, 2, 8);
  cfg.max_seq_len = 8;
  cfg.vocab_size = Tokenizer::standard().vocab_size();
  const auto p = init_params(cfg);
  const auto toks = random_tokens(rng, 6, cfg.vocab_size);
  std::vector<Matrix> params(p.tensors().begin(), p.tensors().end());
  for (const HeadId id : {HeadId{1, 0}, HeadId{2, 1}}) {
    const ad::LossBuilder loss = [&](ad::Tape& tape, std::span<const ad::Var> vars) {
      const BoundModel m(cfg, std::vector<ad::Var>(vars.begin(), vars.end()));
      const auto pf = prefill(tape, m, toks, 2);
      // A scalar function of one attention entry.
      return ad::select(ad::row_mean(pf.graph.at(id), 5, 6), {2});
    };
    const auto rep = ad::finite_difference_check(loss, params, 1e-5);
    EXPECT_LT(rep.max_relative_error, 1e-3) << id.label() << " worst tensor "
                                            << TransformerParams::tensor_name(cfg, rep.worst_param);
  }
}

TEST(Checkpoint, RoundTripsBitExactly) {
  const auto p = init_params(tiny_model(2, 2, 16, 99));
  const std::string bytes = serialize_checkpoint(p);
  const auto q = deserialize_checkpoint(bytes);
  EXPECT_TRUE(p == q);
  EXPECT_EQ(serialize_checkpoint(q), bytes);

  const auto dir = testing_support::scratch_dir("ckpt");
  save_checkpoint(dir / "m.ckpt", p);
  EXPECT_TRUE(load_checkpoint(dir / "m.ckpt") == p);
}

TEST(Checkpoint, RejectsCorruption) {
  const std::string bytes = serialize_checkpoint(init_params(tiny_model()));
  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, bytes.size() - 3)), ParseError);
  EXPECT_THROW(deserialize_checkpoint(bytes + "x"), ParseError);
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(deserialize_checkpoint(bad_magic), ParseError);
  std::string bad_version = bytes;
  bad_version[8] = 9;
  EXPECT_THROW(deserialize_checkpoint(bad_version), ParseError);
}
