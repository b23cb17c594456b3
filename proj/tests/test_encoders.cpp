#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "vlpa/corpus.hpp"
#include "vlpa/encoders.hpp"
#include "vlpa/grad_check.hpp"

using namespace vlpa;

namespace {

Tokens random_tokens(Rng& rng, std::size_t n) {
  Tokens t(n);
  for (auto& v : t) v = static_cast<TokenId>(1 + rng.below(kVocabSize - 1));
  return t;
}

Tensor random_image(Rng& rng) {
  Tensor x(image_shape());
  for (double& v : x.data()) v = rng.uniform(0.0, 1.0);
  return x;
}

double norm(const Tensor& t) {
  double s = 0;
  for (double v : t.data()) s += v * v;
  return std::sqrt(s);
}

}  // namespace

TEST(DualEncoder, SoftOneHotMatchesHardEncoding) {
  Rng rng(5);
  for (auto pool : {Pooling::kMean, Pooling::kMax}) {
    for (std::size_t width : {32u, 64u}) {
      DualEncoderConfig cfg;
      cfg.pooling = pool;
      cfg.width = width;
      cfg.arch_seed = 10 + width;
      auto m = make_dual_encoder(cfg);
      for (std::size_t n : {1u, 2u, 7u, 30u}) {
        Tokens s = random_tokens(rng, n);
        Tape t;
        Tensor soft = encode_text_soft(t, m, t.constant(one_hot(s))).value();
        Tensor hard = encode_text_hard(t, m, s).value();
        ASSERT_EQ(soft.size(), hard.size());
        for (std::size_t i = 0; i < soft.size(); ++i) EXPECT_NEAR(soft[i], hard[i], 1e-12);
      }
    }
  }
}

TEST(DualEncoder, OutputsAreUnitNorm) {
  Rng rng(6);
  auto m = make_dual_encoder({});
  for (int i = 0; i < 5; ++i) {
    EXPECT_NEAR(norm(embed_image(m, random_image(rng))), 1.0, 1e-9);
    EXPECT_NEAR(norm(embed_text(m, random_tokens(rng, 1 + rng.below(30)))), 1.0, 1e-9);
  }
  EXPECT_EQ(embed_image(m, random_image(rng)).size(), 64u);
}

TEST(DualEncoder, BatchedEmbeddingMatchesSingle) {
  Rng rng(7);
  auto m = make_dual_encoder({});
  std::vector<Tensor> imgs = {random_image(rng), random_image(rng), random_image(rng)};
  std::vector<Tokens> txts = {random_tokens(rng, 4), random_tokens(rng, 11), random_tokens(rng, 1)};
  Tensor bi = embed_images(m, imgs, 2), bt = embed_texts(m, txts, 2);
  for (std::size_t r = 0; r < 3; ++r) {
    Tensor si = embed_image(m, imgs[r]), st = embed_text(m, txts[r]);
    for (std::size_t c = 0; c < 64; ++c) {
      EXPECT_NEAR(bi.at(r, c), si[c], 1e-12);
      EXPECT_NEAR(bt.at(r, c), st[c], 1e-12);
    }
  }
}

TEST(DualEncoder, InitIsDeterministicPerSeed) {
  DualEncoderConfig a, b;
  b.arch_seed = 2;
  EXPECT_TRUE(make_dual_encoder(a).params == make_dual_encoder(a).params);
  EXPECT_FALSE(make_dual_encoder(a).params == make_dual_encoder(b).params);
}

TEST(DualEncoder, NonFiniteImageRejected) {
  Rng rng(8);
  auto m = make_dual_encoder({});
  Tensor x = random_image(rng);
  x[17] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(embed_image(m, x), NumericError);
}

TEST(DualEncoder, SoftInputMustBeOnSimplex) {
  auto m = make_dual_encoder({});
  Tensor pi = one_hot({3, 4});
  pi[5] += 0.1;
  Tape t;
  EXPECT_THROW(encode_text_soft(t, m, t.constant(pi)), UsageError);
}

TEST(DualEncoder, ImageGradientMatchesFiniteDifferences) {
  Rng rng(9);
  DualEncoderConfig cfg;
  cfg.width = 32;
  auto m = make_dual_encoder(cfg);
  Tensor dir(Shape{cfg.embed_dim});
  for (double& v : dir.data()) v = rng.normal();
  auto rep = grad_check(
      [&](Tape& t, std::span<const Var> v) { return sum(mul(encode_image(t, m, v[0]), t.constant(dir))); },
      {random_image(rng)}, 1e-4);
  EXPECT_TRUE(rep.passed) << rep.max_rel_error;
}

TEST(CausalLM, RowsAreDistributions) {
  Rng rng(10);
  auto lm = make_causal_lm({});
  Tensor lp = lm_distribution(lm, random_tokens(rng, 12));
  for (std::size_t k = 0; k < 12; ++k) {
    double s = 0;
    for (std::size_t v = 0; v < kVocabSize; ++v) s += std::exp(lp.at(k, v));
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(CausalLM, PerturbingTokenOnlyAffectsLaterPositions) {
  Rng rng(11);
  auto lm = make_causal_lm({});
  Tokens s = random_tokens(rng, 10);
  Tensor base = lm_distribution(lm, s);
  for (std::size_t k : {0u, 4u, 9u}) {
    Tokens p = s;
    p[k] = p[k] == 1 ? 2 : 1;
    Tensor alt = lm_distribution(lm, p);
    for (std::size_t pos = 0; pos < 10; ++pos) {
      double diff = 0;
      for (std::size_t v = 0; v < kVocabSize; ++v) diff = std::max(diff, std::abs(alt.at(pos, v) - base.at(pos, v)));
      if (pos <= k)
        EXPECT_EQ(diff, 0.0) << "k=" << k << " pos=" << pos;
      else
        EXPECT_GT(diff, 0.0) << "k=" << k << " pos=" << pos;
    }
  }
}

TEST(CausalLM, SoftLogprobMatchesHardNll) {
  Rng rng(12);
  auto lm = make_causal_lm({});
  Tokens s = random_tokens(rng, 8);
  Tape t;
  EXPECT_NEAR(lm_logprob(t, lm, t.constant(one_hot(s))).item(), lm_nll(lm, s), 1e-9);
}

TEST(CausalLM, UniformModelGivesLogV) {
  auto lm = make_uniform_lm();
  EXPECT_NEAR(lm_nll(lm, {5, 6, 7}), 3.0 * std::log(static_cast<double>(kVocabSize)), 1e-9);
}

TEST(ContextualEmbedder, PerTokenOutputsUnitNorm) {
  Rng rng(13);
  auto emb = make_contextual_embedder({});
  Tape t;
  Tensor f = contextual_embed(t, emb, random_tokens(rng, 9)).value();
  ASSERT_EQ(f.shape()[0], 9u);
  for (std::size_t r = 0; r < 9; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < f.shape()[1]; ++c) s += f.at(r, c) * f.at(r, c);
    EXPECT_NEAR(std::sqrt(s), 1.0, 1e-9);
  }
}

TEST(ContextualEmbedder, SoftOneHotMatchesHard) {
  Rng rng(14);
  auto emb = make_contextual_embedder({});
  Tokens s = random_tokens(rng, 6);
  Tape t;
  Tensor a = contextual_embed(t, emb, t.constant(one_hot(s))).value();
  Tensor b = contextual_embed(t, emb, s).value();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(Pooling, ParseRoundTrip) {
  EXPECT_EQ(parse_pooling(pooling_name(Pooling::kMax)), Pooling::kMax);
  EXPECT_THROW(parse_pooling("median"), ConfigError);
}
