#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "vlpa/contrastive.hpp"
#include "vlpa/grad_check.hpp"

using namespace vlpa;

namespace {

Tensor unit(Rng& rng, std::size_t d) {
  Tensor t(Shape{d});
  double n = 0;
  for (double& v : t.data()) {
    v = rng.normal();
    n += v * v;
  }
  for (double& v : t.data()) v /= std::sqrt(n);
  return t;
}

// Direct formula with long-double accumulation.
double oracle(const Tensor& a, const std::vector<Tensor>& pos, const std::vector<Tensor>& neg, double tau) {
  auto dot = [&](const Tensor& c) {
    long double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<long double>(a[i]) * c[i];
    return s / tau;
  };
  long double z = 0;
  for (const auto& c : pos) z += std::exp(dot(c));
  for (const auto& c : neg) z += std::exp(dot(c));
  long double acc = 0;
  for (const auto& c : pos) acc += dot(c) - std::log(z);
  return static_cast<double>(acc / pos.size());
}

double nce(const Tensor& a, const std::vector<Tensor>& pos, const std::vector<Tensor>& neg, double tau) {
  Tape t;
  std::vector<Var> p, n;
  for (const auto& x : pos) p.push_back(t.borrow(x));
  for (const auto& x : neg) n.push_back(t.borrow(x));
  return info_nce(t.borrow(a), p, n, tau).item();
}

std::vector<Record> tiny_pool(std::size_t n) {
  std::vector<Record> pool;
  Rng rng(77);
  for (std::size_t i = 0; i < n; ++i) {
    Record r;
    r.pair_id = static_cast<int>(100 + i);
    r.tokens = {1, static_cast<TokenId>(Vocabulary::standard().id("red")), 7};
    r.image = Tensor(image_shape());
    for (double& v : r.image.data()) v = rng.uniform(0.0, 1.0);
    pool.push_back(r);
  }
  return pool;
}

}  // namespace

TEST(InfoNce, MatchesExhaustiveOracle) {
  Rng rng(1);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t d = 2 + rng.below(6);
    const std::size_t np = 1 + rng.below(4), nn = rng.below(5);
    const double tau = rng.uniform(0.05, 2.0);
    Tensor a = unit(rng, d);
    std::vector<Tensor> pos, neg;
    for (std::size_t i = 0; i < np; ++i) pos.push_back(unit(rng, d));
    for (std::size_t i = 0; i < nn; ++i) neg.push_back(unit(rng, d));
    EXPECT_NEAR(nce(a, pos, neg, tau), oracle(a, pos, neg, tau), 1e-8);
  }
}

TEST(InfoNce, SinglePositiveNoNegativesIsZero) {
  Rng rng(2);
  Tensor a = unit(rng, 4);
  EXPECT_NEAR(nce(a, {unit(rng, 4)}, {}, 0.1), 0.0, 1e-15);
}

TEST(InfoNce, NegativeOrderDoesNotMatter) {
  Rng rng(3);
  Tensor a = unit(rng, 8);
  std::vector<Tensor> pos = {unit(rng, 8), unit(rng, 8)}, neg;
  for (int i = 0; i < 6; ++i) neg.push_back(unit(rng, 8));
  neg.push_back(neg[2]);  // a tie
  const double base = nce(a, pos, neg, 0.1);
  std::sort(neg.begin(), neg.end(), [](const Tensor& x, const Tensor& y) { return x.data() < y.data(); });
  do {
    EXPECT_EQ(nce(a, pos, neg, 0.1), base);
  } while (std::next_permutation(neg.begin(), neg.begin() + 4,
                                 [](const Tensor& x, const Tensor& y) { return x.data() < y.data(); }));
}

TEST(InfoNce, RaisingNegativeSimilarityLowersValue) {
  Tensor a(Shape{2}, std::vector<double>{1.0, 0.0});
  Tensor p(Shape{2}, std::vector<double>{0.6, 0.8});
  double prev = 1e9;
  for (double s : {-0.9, -0.5, 0.0, 0.3, 0.7, 0.99}) {
    Tensor n(Shape{2}, std::vector<double>{s, std::sqrt(1 - s * s)});
    const double v = nce(a, {p}, {n}, 0.1);
    EXPECT_LT(v, prev);
    prev = v;
  }
}

TEST(InfoNce, GradientMatchesFiniteDifferences) {
  Rng rng(4);
  auto rep = grad_check(
      [](Tape&, std::span<const Var> v) { return info_nce(v[0], {v[1], v[2]}, {v[3], v[4]}, 0.3); },
      {unit(rng, 5), unit(rng, 5), unit(rng, 5), unit(rng, 5), unit(rng, 5)}, 1e-4);
  EXPECT_TRUE(rep.passed) << rep.max_rel_error;
}

TEST(InfoNce, InvalidArgumentsRejected) {
  Rng rng(5);
  Tape t;
  Var a = t.constant(unit(rng, 3));
  EXPECT_THROW(info_nce(a, std::span<const Var>{}, std::span<const Var>{}, 0.1), UsageError);
  EXPECT_THROW(info_nce(a, {a}, {}, 0.0), UsageError);
  EXPECT_THROW(info_nce(a, {t.constant(unit(rng, 4))}, {}, 0.1), ConfigError);
}

TEST(Bundle, CountsAndRangesMatchRequest) {
  auto pool = tiny_pool(10);
  auto b = build_bundle(pool[0], pool, BundleCounts{7, 5, 3}, 9);
  ASSERT_EQ(b.image_views.size(), 7u);
  ASSERT_EQ(b.text_views.size(), 5u);
  ASSERT_EQ(b.sampled_positives.size(), 3u);
  ASSERT_EQ(b.sampled_positive_texts.size(), 3u);
  for (const auto& v : b.image_views)
    for (double x : v.data()) {
      EXPECT_GE(x, 0.0);
      EXPECT_LE(x, 1.0);
    }
  for (const auto& t : b.text_views) EXPECT_EQ(t.size(), pool[0].tokens.size());
  std::set<int> ids(b.sampled_pair_ids.begin(), b.sampled_pair_ids.end());
  EXPECT_EQ(ids.size(), 3u);
  EXPECT_FALSE(ids.count(pool[0].pair_id));
}

TEST(Bundle, DeterministicInSeed) {
  auto pool = tiny_pool(10);
  auto a = build_bundle(pool[2], pool, {}, 4), b = build_bundle(pool[2], pool, {}, 4);
  auto c = build_bundle(pool[2], pool, {}, 5);
  for (std::size_t i = 0; i < a.image_views.size(); ++i) EXPECT_EQ(a.image_views[i].data(), b.image_views[i].data());
  EXPECT_EQ(a.text_views, b.text_views);
  EXPECT_EQ(a.sampled_pair_ids, b.sampled_pair_ids);
  bool differs = c.sampled_pair_ids != a.sampled_pair_ids;
  for (std::size_t i = 0; i < a.image_views.size(); ++i) differs |= a.image_views[i].data() != c.image_views[i].data();
  EXPECT_TRUE(differs);
}

TEST(Bundle, PoolTooSmallIsConfigError) {
  auto pool = tiny_pool(3);
  EXPECT_THROW(build_bundle(pool[0], pool, {}, 1), ConfigError);
}

TEST(TextAugment, SynonymSwapKeepsConcepts) {
  const auto& v = Vocabulary::standard();
  Rng rng(6);
  Tokens t = {v.id("a"), v.id("red"), v.id("square"), v.id("large")};
  for (int i = 0; i < 50; ++i) {
    Tokens s = synonym_swap(t, 0.5, rng);
    ASSERT_EQ(s.size(), t.size());
    for (std::size_t k = 0; k < t.size(); ++k) EXPECT_EQ(v.concept_of(s[k]), v.concept_of(t[k]));
  }
  EXPECT_EQ(synonym_swap(t, 0.0, rng), t);
}

TEST(TextAugment, DropoutKeepsAToken) {
  Rng rng(7);
  Tokens t = {5, 6, 7};
  for (int i = 0; i < 50; ++i) {
    Tokens s = token_dropout(t, 1.0, rng);
    EXPECT_EQ(std::count(s.begin(), s.end(), kPadToken), 2);
  }
}

TEST(BundleLosses, IntraAndCrossModalMatchOracle) {
  Rng rng(8);
  BundleEmbeddings be;
  be.image = unit(rng, 6);
  be.text = unit(rng, 6);
  for (int i = 0; i < 3; ++i) {
    be.image_views.push_back(unit(rng, 6));
    be.text_views.push_back(unit(rng, 6));
    be.positive_images.push_back(unit(rng, 6));
    be.positive_texts.push_back(unit(rng, 6));
  }
  Tensor ai = unit(rng, 6), at = unit(rng, 6);
  std::vector<Tensor> neg_img = {be.image}, neg_txt = {be.text};
  neg_img.insert(neg_img.end(), be.image_views.begin(), be.image_views.end());
  neg_txt.insert(neg_txt.end(), be.text_views.begin(), be.text_views.end());
  Tape t;
  const double intra = intra_modal_loss(t.borrow(ai), be, 0.1).item();
  EXPECT_NEAR(intra, oracle(ai, be.positive_images, neg_img, 0.1), 1e-10);
  const double cross = cross_modal_loss(t.borrow(ai), t.borrow(at), be, 0.1).item();
  const double want =
      0.5 * (oracle(at, be.positive_images, neg_img, 0.1) + oracle(ai, be.positive_texts, neg_txt, 0.1));
  EXPECT_NEAR(cross, want, 1e-10);
}
