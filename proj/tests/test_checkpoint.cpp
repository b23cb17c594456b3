#include <gtest/gtest.h>

#include <filesystem>

#include "vlpa/checkpoint.hpp"

using namespace vlpa;

namespace {

std::filesystem::path tmp(const char* name) { return std::filesystem::temp_directory_path() / name; }

}  // namespace

TEST(Checkpoint, ByteLayoutIsLittleEndianXmf1) {
  ParamSet ps;
  ps.add("w", Tensor(Shape{2}, std::vector<double>{1.0, -2.0}));
  std::string b = encode_checkpoint(ps);
  ASSERT_EQ(b.size(), 4u + 4 + 4 + 1 + 4 + 4 + 16);
  EXPECT_EQ(b.substr(0, 4), "XMF1");
  EXPECT_EQ(static_cast<unsigned char>(b[4]), 1u);  // version
  EXPECT_EQ(static_cast<unsigned char>(b[8]), 1u);  // name length
  EXPECT_EQ(b[12], 'w');
  EXPECT_EQ(static_cast<unsigned char>(b[13]), 1u);  // rank
  EXPECT_EQ(static_cast<unsigned char>(b[17]), 2u);  // dim 0
  // 1.0 = 0x3FF0000000000000, low byte first
  EXPECT_EQ(static_cast<unsigned char>(b[21 + 7]), 0x3Fu);
  EXPECT_EQ(static_cast<unsigned char>(b[21 + 6]), 0xF0u);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  ParamSet ps;
  Rng rng(1);
  Tensor a(Shape{3, 4}), s(Shape{1});
  for (double& v : a.data()) v = rng.normal();
  s.data()[0] = 0.1;
  ps.add("a", a);
  ps.add("scalar", s);
  ps.add("vec", Tensor(Shape{5}, 1e-300));
  EXPECT_TRUE(decode_checkpoint(encode_checkpoint(ps)) == ps);
}

TEST(Checkpoint, CorruptFilesRejected) {
  EXPECT_THROW(decode_checkpoint("XMF2\x01\0\0\0"), ConfigError);
  std::string b = "XMF1";
  io::put_le<std::uint32_t>(b, 9);
  EXPECT_THROW(decode_checkpoint(b), ConfigError);
  ParamSet ps;
  ps.add("w", Tensor(Shape{4}, 1.0));
  std::string good = encode_checkpoint(ps);
  EXPECT_THROW(decode_checkpoint(good.substr(0, good.size() - 3)), Error);
}

TEST(Checkpoint, DualEncoderRoundTrip) {
  DualEncoderConfig cfg;
  cfg.width = 32;
  cfg.pooling = Pooling::kMax;
  cfg.arch_seed = (1ull << 51) + 12345;
  auto m = make_dual_encoder(cfg);
  save_dual_encoder(tmp("vlpa_de.xmf"), m);
  auto back = load_dual_encoder(tmp("vlpa_de.xmf"));
  EXPECT_TRUE(back.params == m.params);
  EXPECT_EQ(back.config.width, 32u);
  EXPECT_EQ(back.config.pooling, Pooling::kMax);
  EXPECT_EQ(back.config.arch_seed, cfg.arch_seed);
  std::filesystem::remove(tmp("vlpa_de.xmf"));
}

TEST(Checkpoint, LanguageModelAndEmbedderRoundTrip) {
  auto lm = make_causal_lm({});
  auto emb = make_contextual_embedder({});
  save_causal_lm(tmp("vlpa_lm.xmf"), lm);
  save_contextual_embedder(tmp("vlpa_ctx.xmf"), emb);
  EXPECT_TRUE(load_causal_lm(tmp("vlpa_lm.xmf")).params == lm.params);
  EXPECT_TRUE(load_contextual_embedder(tmp("vlpa_ctx.xmf")).params == emb.params);
  EXPECT_THROW(load_dual_encoder(tmp("vlpa_lm.xmf")), ConfigError);
  std::filesystem::remove(tmp("vlpa_lm.xmf"));
  std::filesystem::remove(tmp("vlpa_ctx.xmf"));
}
