#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "vlpa/corpus.hpp"

using namespace vlpa;

namespace {

CorpusParams small() {
  CorpusParams p;
  p.size = 64;
  p.heldout = 16;
  p.seed = 3;
  return p;
}

}  // namespace

TEST(Corpus, RecordsSatisfyInvariants) {
  auto c = generate_corpus(small());
  ASSERT_EQ(c.records.size(), 64u);
  EXPECT_EQ(c.heldout().size(), 16u);
  std::set<int> ids;
  for (const auto& r : c.records) {
    EXPECT_TRUE(ids.insert(r.pair_id).second);
    ASSERT_FALSE(r.tokens.empty());
    EXPECT_LE(r.tokens.size(), kMaxTextLen);
    for (TokenId t : r.tokens) {
      EXPECT_LT(t, kVocabSize);
      EXPECT_NE(t, kPadToken);
    }
    EXPECT_EQ(r.image.shape(), image_shape());
    for (double v : r.image.data()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(Corpus, SameSeedSameHash) {
  EXPECT_EQ(generate_corpus(small()).content_hash(), generate_corpus(small()).content_hash());
  auto p = small();
  p.seed = 4;
  EXPECT_NE(generate_corpus(small()).content_hash(), generate_corpus(p).content_hash());
}

TEST(Corpus, SaveLoadRoundTrip) {
  auto c = generate_corpus(small());
  auto dir = std::filesystem::temp_directory_path() / "vlpa_corpus_rt";
  std::filesystem::remove_all(dir);
  save_corpus(c, dir);
  EXPECT_TRUE(std::filesystem::exists(dir / "corpus.jsonl"));
  auto back = load_corpus(dir);
  EXPECT_EQ(back.content_hash(), c.content_hash());
  EXPECT_EQ(back.heldout().size(), c.heldout().size());
  std::filesystem::remove_all(dir);
}

TEST(Corpus, SynonymsShareConcept) {
  const auto& v = Vocabulary::standard();
  EXPECT_EQ(v.size(), kVocabSize);
  const TokenId red = v.id("red");
  ASSERT_EQ(v.synonyms(red).size(), 2u);
  for (TokenId s : v.synonyms(red)) EXPECT_EQ(v.concept_of(s), v.concept_of(red));
  EXPECT_NE(v.concept_of(red), v.concept_of(v.id("blue")));
  EXPECT_TRUE(v.synonyms(v.id("a")).empty());
}

TEST(Corpus, InvalidTokensRejected) {
  EXPECT_THROW(validate_tokens(Tokens{}, "t"), UsageError);
  EXPECT_THROW(validate_tokens(Tokens{1, static_cast<TokenId>(kVocabSize)}, "t"), UsageError);
  EXPECT_THROW(validate_tokens(Tokens(kMaxTextLen + 1, 1), "t"), UsageError);
  EXPECT_NO_THROW(validate_tokens(Tokens{1, 2, 3}, "t"));
}

TEST(Corpus, TooSmallHeldoutRejected) {
  auto p = small();
  p.heldout = p.size;
  EXPECT_THROW(generate_corpus(p), ConfigError);
}
