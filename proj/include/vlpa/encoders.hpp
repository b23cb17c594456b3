#pragma once

// Toy differentiable vision-language models.
//
//   DualEncoder        image tower: 4x4 patches -> tanh(W p + b + pos) -> pool -> linear -> unit norm
//                      text tower:  token embeddings (rows of E, or pi . E) -> 5-token window
//                                   -> tanh(W x + b + pos) -> pool -> linear -> unit norm
//   CausalLM           next-token model; position k sees the mean and the last of tokens < k
//   ContextualEmbedder per-token unit vectors mixing each token with the mean of the others
//
// Every forward pass is recorded on a Tape so gradients reach both the
// image pixels and the soft token distribution pi.

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "vlpa/autodiff.hpp"
#include "vlpa/corpus.hpp"
#include "vlpa/error.hpp"
#include "vlpa/rng.hpp"

namespace vlpa {

enum class Pooling { kMean, kMax };

inline const char* pooling_name(Pooling p) { return p == Pooling::kMean ? "mean" : "max"; }

inline Pooling parse_pooling(std::string_view s) {
  if (s == "mean") return Pooling::kMean;
  if (s == "max") return Pooling::kMax;
  throw ConfigError("unknown pooling mode '" + std::string(s) + "'");
}

// Ordered set of named parameter tensors.
class ParamSet {
 public:
  void add(std::string name, Tensor t) { items_.emplace_back(std::move(name), std::move(t)); }

  Tensor& at(std::string_view name) {
    for (auto& [n, t] : items_)
      if (n == name) return t;
    throw ConfigError("parameter '" + std::string(name) + "' not found");
  }
  const Tensor& at(std::string_view name) const { return const_cast<ParamSet*>(this)->at(name); }
  bool contains(std::string_view name) const {
    for (const auto& [n, t] : items_)
      if (n == name) return true;
    return false;
  }

  std::vector<std::pair<std::string, Tensor>>& items() { return items_; }
  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : items_) n += t.size();
    return n;
  }

  friend bool operator==(const ParamSet&, const ParamSet&) = default;

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
};

// Parameters placed on a tape: trainable leaves or borrowed constants.
class BoundParams {
 public:
  BoundParams(Tape& tape, const ParamSet& params, bool trainable) : params_(&params) {
    for (const auto& [name, t] : params.items())
      vars_.push_back(trainable ? tape.leaf(t, true) : tape.borrow(t));
  }

  Var operator[](std::string_view name) const {
    const auto& items = params_->items();
    for (std::size_t i = 0; i < items.size(); ++i)
      if (items[i].first == name) return vars_[i];
    throw ConfigError("parameter '" + std::string(name) + "' not bound");
  }

  // Gradients in ParamSet order (zeros where nothing flowed).
  std::vector<Tensor> grads() const {
    std::vector<Tensor> out;
    for (const Var& v : vars_) out.push_back(v.grad_tensor());
    return out;
  }

 private:
  const ParamSet* params_;
  std::vector<Var> vars_;
};

namespace detail {

inline Tensor init_matrix(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
  Tensor t(Shape{rows, cols});
  for (double& v : t.data()) v = stddev * rng.normal();
  return t;
}

inline Tensor zeros(std::size_t n) { return Tensor(Shape{n}, 0.0); }

inline std::vector<std::size_t> iota_vec(std::size_t n, std::size_t start = 0) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = start + i;
  return v;
}

inline Var pool_segments(Pooling mode, const Var& x, std::span<const std::size_t> lengths) {
  return mode == Pooling::kMean ? segment_mean(x, lengths) : segment_max(x, lengths);
}

// Flat gather indices turning a [B,3,32,32] batch into [B*64, 48] patch rows.
inline std::vector<std::size_t> patch_index(std::size_t batch) {
  constexpr std::size_t P = 4, G = kImageSide / P;
  std::vector<std::size_t> idx;
  idx.reserve(batch * kImageNumel);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t py = 0; py < G; ++py)
      for (std::size_t px = 0; px < G; ++px)
        for (std::size_t c = 0; c < kImageChannels; ++c)
          for (std::size_t dy = 0; dy < P; ++dy)
            for (std::size_t dx = 0; dx < P; ++dx)
              idx.push_back(b * kImageNumel + (c * kImageSide + py * P + dy) * kImageSide + px * P + dx);
  return idx;
}

}  // namespace detail

inline constexpr std::size_t kPatchCount = 64;
inline constexpr std::size_t kPatchDim = 48;

// ---------------------------------------------------------------------------
// DualEncoder
// ---------------------------------------------------------------------------

struct DualEncoderConfig {
  std::size_t embed_dim = 64;
  std::size_t token_dim = 32;
  std::size_t width = 64;
  std::size_t window = 5;
  Pooling pooling = Pooling::kMean;
  std::uint64_t arch_seed = 1;
  std::size_t vocab = kVocabSize;
};

struct DualEncoder {
  DualEncoderConfig config;
  ParamSet params;
};

inline DualEncoder make_dual_encoder(const DualEncoderConfig& cfg) {
  if (cfg.window % 2 == 0) throw ConfigError("dual encoder: window must be odd");
  Rng rng(mix_seed(cfg.arch_seed, 0xD0A1));
  const double pw = 1.0 / std::sqrt(static_cast<double>(kPatchDim));
  const double hw = 1.0 / std::sqrt(static_cast<double>(cfg.width));
  const double tw = 1.0 / std::sqrt(static_cast<double>(cfg.window * cfg.token_dim));
  DualEncoder m{cfg, {}};
  m.params.add("img.patch_w", detail::init_matrix(rng, kPatchDim, cfg.width, 2.0 * pw));
  m.params.add("img.patch_b", detail::zeros(cfg.width));
  m.params.add("img.pos", detail::init_matrix(rng, kPatchCount, cfg.width, 0.3));
  m.params.add("img.out_w", detail::init_matrix(rng, cfg.width, cfg.embed_dim, hw));
  m.params.add("img.out_b", detail::zeros(cfg.embed_dim));
  m.params.add("txt.embed", detail::init_matrix(rng, cfg.vocab, cfg.token_dim, 1.0));
  m.params.add("txt.win_w", detail::init_matrix(rng, cfg.window * cfg.token_dim, cfg.width, tw));
  m.params.add("txt.b", detail::zeros(cfg.width));
  m.params.add("txt.pos", detail::init_matrix(rng, kMaxTextLen, cfg.width, 0.3));
  m.params.add("txt.out_w", detail::init_matrix(rng, cfg.width, cfg.embed_dim, hw));
  m.params.add("txt.out_b", detail::zeros(cfg.embed_dim));
  return m;
}

// Unit-norm embeddings [B,d] of a batch of images [B,3,32,32] (or one [3,32,32]).
inline Var image_features(const DualEncoder& m, const BoundParams& p, const Var& images) {
  if (images.size() % kImageNumel != 0 || images.shape().size() < 3 ||
      !std::equal(images.shape().end() - 3, images.shape().end(), image_shape().begin()))
    throw UsageError("encode_image: expected [...,3,32,32], got " + shape_str(images.shape()));
  const std::size_t batch = images.size() / kImageNumel;
  Var patches = gather(images, detail::patch_index(batch), {batch * kPatchCount, kPatchDim});
  Var h = add(matmul(patches, p["img.patch_w"]), p["img.patch_b"]);
  std::vector<std::size_t> pos_rows;
  pos_rows.reserve(batch * kPatchCount);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < kPatchCount; ++i) pos_rows.push_back(i);
  h = tanh(add(h, gather_rows(p["img.pos"], pos_rows)));
  std::vector<std::size_t> lens(batch, kPatchCount);
  Var pooled = detail::pool_segments(m.config.pooling, h, lens);
  return l2_normalize(add(matmul(pooled, p["img.out_w"]), p["img.out_b"]));
}

// Unit-norm embeddings [S,d] from token embeddings [T,token_dim] split into
// consecutive captions of the given lengths.
inline Var text_features(const DualEncoder& m, const BoundParams& p, const Var& token_emb,
                         std::span<const std::size_t> lengths) {
  const std::size_t dt = m.config.token_dim, win = m.config.window, half = win / 2;
  const std::size_t T = token_emb.shape()[0];
  std::vector<std::size_t> idx;
  idx.reserve(T * win * dt);
  std::vector<std::size_t> pos_rows;
  pos_rows.reserve(T);
  std::size_t off = 0;
  for (std::size_t len : lengths) {
    if (len == 0 || len > kMaxTextLen)
      throw UsageError("encode_text: caption length " + std::to_string(len) + " outside [1,30]");
    for (std::size_t k = 0; k < len; ++k) {
      for (std::size_t w = 0; w < win; ++w) {
        const long src = static_cast<long>(k + w) - static_cast<long>(half);
        for (std::size_t j = 0; j < dt; ++j)
          idx.push_back(src < 0 || src >= static_cast<long>(len)
                            ? kGatherZero
                            : (off + static_cast<std::size_t>(src)) * dt + j);
      }
      pos_rows.push_back(k);
    }
    off += len;
  }
  if (off != T) throw UsageError("encode_text: lengths do not cover the token rows");
  Var x = gather(token_emb, std::move(idx), {T, win * dt});
  Var h = add(matmul(x, p["txt.win_w"]), p["txt.b"]);
  h = tanh(add(h, gather_rows(p["txt.pos"], pos_rows)));
  Var pooled = detail::pool_segments(m.config.pooling, h, lengths);
  return l2_normalize(add(matmul(pooled, p["txt.out_w"]), p["txt.out_b"]));
}

namespace detail {
inline void check_simplex_rows(const Tensor& pi, std::size_t vocab, const char* op) {
  if (pi.rank() != 2 || pi.dim(1) != vocab)
    throw UsageError(std::string(op) + ": pi must be [n," + std::to_string(vocab) + "], got " +
                     shape_str(pi.shape()));
  if (pi.dim(0) == 0 || pi.dim(0) > kMaxTextLen)
    throw UsageError(std::string(op) + ": sequence length outside [1,30]");
  for (std::size_t r = 0; r < pi.dim(0); ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) {
      const double v = pi.at(r, j);
      if (!std::isfinite(v) || v < -1e-12) throw UsageError(std::string(op) + ": pi row has invalid entry");
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-6)
      throw UsageError(std::string(op) + ": pi row " + std::to_string(r) + " sums to " + std::to_string(s));
  }
}
}  // namespace detail

inline Var encode_image(Tape& tape, const DualEncoder& m, const Var& image) {
  if (image.shape() != image_shape())
    throw UsageError("encode_image: expected [3,32,32], got " + shape_str(image.shape()));
  for (double v : image.value().values())
    if (!std::isfinite(v)) throw NumericError("encode_image: non-finite pixel");
  BoundParams p(tape, m.params, false);
  return reshape(image_features(m, p, image), {m.config.embed_dim});
}

// Text embedding of a soft token sequence pi [n,V]: rows of pi . E are encoded.
inline Var encode_text_soft(Tape& tape, const DualEncoder& m, const Var& pi) {
  detail::check_simplex_rows(pi.value(), m.config.vocab, "encode_text_soft");
  BoundParams p(tape, m.params, false);
  Var emb = matmul(pi, p["txt.embed"]);
  std::vector<std::size_t> lens{pi.shape()[0]};
  return reshape(text_features(m, p, emb, lens), {m.config.embed_dim});
}

inline Var encode_text_hard(Tape& tape, const DualEncoder& m, const Tokens& tokens) {
  validate_tokens(tokens, "encode_text_hard");
  for (TokenId t : tokens)
    if (t >= m.config.vocab) throw UsageError("encode_text_hard: token id out of vocabulary");
  BoundParams p(tape, m.params, false);
  Var emb = gather_rows(p["txt.embed"], tokens);
  std::vector<std::size_t> lens{tokens.size()};
  return reshape(text_features(m, p, emb, lens), {m.config.embed_dim});
}

// Convenience forward passes without gradients.
inline Tensor embed_image(const DualEncoder& m, const Tensor& image) {
  Tape t;
  return encode_image(t, m, t.borrow(image)).value();
}

inline Tensor embed_text(const DualEncoder& m, const Tokens& tokens) {
  Tape t;
  return encode_text_hard(t, m, tokens).value();
}

// Batched embedding of many images [N,d], chunked to bound tape size.
inline Tensor embed_images(const DualEncoder& m, std::span<const Tensor> images, std::size_t chunk = 128) {
  Tensor out(Shape{images.size(), m.config.embed_dim});
  for (std::size_t s = 0; s < images.size(); s += chunk) {
    const std::size_t e = std::min(images.size(), s + chunk);
    Tensor batch(Shape{e - s, kImageChannels, kImageSide, kImageSide});
    for (std::size_t i = s; i < e; ++i)
      std::copy(images[i].data().begin(), images[i].data().end(), batch.data().begin() + static_cast<long>((i - s) * kImageNumel));
    Tape t;
    BoundParams p(t, m.params, false);
    Var f = image_features(m, p, t.borrow(batch));
    std::copy(f.value().data().begin(), f.value().data().end(),
              out.data().begin() + static_cast<long>(s * m.config.embed_dim));
  }
  return out;
}

inline Tensor embed_texts(const DualEncoder& m, std::span<const Tokens> texts, std::size_t chunk = 256) {
  Tensor out(Shape{texts.size(), m.config.embed_dim});
  for (std::size_t s = 0; s < texts.size(); s += chunk) {
    const std::size_t e = std::min(texts.size(), s + chunk);
    Tokens flat;
    std::vector<std::size_t> lens;
    for (std::size_t i = s; i < e; ++i) {
      validate_tokens(texts[i], "embed_texts");
      flat.insert(flat.end(), texts[i].begin(), texts[i].end());
      lens.push_back(texts[i].size());
    }
    Tape t;
    BoundParams p(t, m.params, false);
    Var f = text_features(m, p, gather_rows(p["txt.embed"], flat), lens);
    std::copy(f.value().data().begin(), f.value().data().end(),
              out.data().begin() + static_cast<long>(s * m.config.embed_dim));
  }
  return out;
}

// ---------------------------------------------------------------------------
// CausalLM
// ---------------------------------------------------------------------------

struct CausalLMConfig {
  std::size_t token_dim = 32;
  std::size_t hidden = 96;
  std::uint64_t seed = 11;
  std::size_t vocab = kVocabSize;
};

struct CausalLM {
  CausalLMConfig config;
  ParamSet params;
};

inline CausalLM make_causal_lm(const CausalLMConfig& cfg) {
  Rng rng(mix_seed(cfg.seed, 0x1A));
  const double iw = 1.0 / std::sqrt(static_cast<double>(cfg.token_dim));
  const double hw = 1.0 / std::sqrt(static_cast<double>(cfg.hidden));
  CausalLM lm{cfg, {}};
  lm.params.add("lm.embed", detail::init_matrix(rng, cfg.vocab, cfg.token_dim, 1.0));
  lm.params.add("lm.ctx_w", detail::init_matrix(rng, cfg.token_dim, cfg.hidden, iw));
  lm.params.add("lm.prev_w", detail::init_matrix(rng, cfg.token_dim, cfg.hidden, iw));
  lm.params.add("lm.pos", detail::init_matrix(rng, kMaxTextLen, cfg.hidden, 0.3));
  lm.params.add("lm.b", detail::zeros(cfg.hidden));
  lm.params.add("lm.out_w", detail::init_matrix(rng, cfg.hidden, cfg.vocab, hw));
  lm.params.add("lm.out_b", detail::zeros(cfg.vocab));
  return lm;
}

// An LM whose every next-token distribution is uniform over the vocabulary.
inline CausalLM make_uniform_lm(const CausalLMConfig& cfg = {}) {
  CausalLM lm = make_causal_lm(cfg);
  for (double& v : lm.params.at("lm.out_w").data()) v = 0.0;
  for (double& v : lm.params.at("lm.out_b").data()) v = 0.0;
  return lm;
}

namespace detail {

// Row k averages rows < k (zero row for k = 0).
inline Tensor prefix_mean_matrix(std::size_t n) {
  Tensor a(Shape{n, n});
  for (std::size_t k = 1; k < n; ++k)
    for (std::size_t j = 0; j < k; ++j) a.at(k, j) = 1.0 / static_cast<double>(k);
  return a;
}

// Row k selects row k-1 (zero row for k = 0).
inline Tensor shift_matrix(std::size_t n) {
  Tensor s(Shape{n, n});
  for (std::size_t k = 1; k < n; ++k) s.at(k, k - 1) = 1.0;
  return s;
}

}  // namespace detail

// Per-position next-token log-probabilities [T,V] for token embeddings
// [T,token_dim] split into consecutive sequences of the given lengths.
inline Var lm_log_probs(const CausalLM&, const BoundParams& p, const Var& token_emb,
                        std::span<const std::size_t> lengths) {
  Tape& tape = *token_emb.tape();
  std::vector<Var> ctx, prev;
  std::vector<std::size_t> pos_rows;
  std::size_t off = 0;
  for (std::size_t len : lengths) {
    if (len == 0 || len > kMaxTextLen) throw UsageError("lm: sequence length outside [1,30]");
    Var e = lengths.size() == 1 ? token_emb : slice(token_emb, 0, off, off + len);
    ctx.push_back(matmul(tape.constant(detail::prefix_mean_matrix(len)), e));
    prev.push_back(matmul(tape.constant(detail::shift_matrix(len)), e));
    for (std::size_t k = 0; k < len; ++k) pos_rows.push_back(k);
    off += len;
  }
  Var c = ctx.size() == 1 ? ctx[0] : concat(ctx);
  Var pv = prev.size() == 1 ? prev[0] : concat(prev);
  Var h = add(add(matmul(c, p["lm.ctx_w"]), matmul(pv, p["lm.prev_w"])), p["lm.b"]);
  h = tanh(add(h, gather_rows(p["lm.pos"], pos_rows)));
  return log_softmax(add(matmul(h, p["lm.out_w"]), p["lm.out_b"]));
}

// Summed cross-entropy -sum_k sum_j pi[k,j] log p(j | pi_<k), a scalar >= 0.
inline Var lm_logprob(Tape& tape, const CausalLM& lm, const Var& pi) {
  detail::check_simplex_rows(pi.value(), lm.config.vocab, "lm_logprob");
  BoundParams p(tape, lm.params, false);
  Var emb = matmul(pi, p["lm.embed"]);
  std::vector<std::size_t> lens{pi.shape()[0]};
  Var logp = lm_log_probs(lm, p, emb, lens);
  return scale(sum(mul(pi, logp)), -1.0);
}

// Next-token log-probability table [n,V] for a hard sequence.
inline Tensor lm_distribution(const CausalLM& lm, const Tokens& tokens) {
  validate_tokens(tokens, "lm_distribution");
  Tape t;
  BoundParams p(t, lm.params, false);
  std::vector<std::size_t> lens{tokens.size()};
  return lm_log_probs(lm, p, gather_rows(p["lm.embed"], tokens), lens).value();
}

// Summed next-token cross-entropy of a hard sequence.
inline double lm_nll(const CausalLM& lm, const Tokens& tokens) {
  Tensor lp = lm_distribution(lm, tokens);
  double s = 0.0;
  for (std::size_t k = 0; k < tokens.size(); ++k) s -= lp.at(k, tokens[k]);
  return s;
}

// Greedy continuation of length n starting from an empty prefix.
inline Tokens lm_greedy(const CausalLM& lm, std::size_t n) {
  Tokens out;
  for (std::size_t k = 0; k < n; ++k) {
    Tokens probe = out;
    probe.push_back(kPadToken);
    Tensor lp = lm_distribution(lm, probe);
    TokenId best = 0;
    for (TokenId j = 1; j < lm.config.vocab; ++j)
      if (lp.at(k, j) > lp.at(k, best)) best = j;
    out.push_back(best);
  }
  return out;
}

// ---------------------------------------------------------------------------
// ContextualEmbedder
// ---------------------------------------------------------------------------

struct ContextualEmbedderConfig {
  std::size_t token_dim = 32;
  std::size_t out_dim = 32;
  std::uint64_t seed = 13;
  std::size_t vocab = kVocabSize;
};

struct ContextualEmbedder {
  ContextualEmbedderConfig config;
  ParamSet params;
};

inline ContextualEmbedder make_contextual_embedder(const ContextualEmbedderConfig& cfg) {
  Rng rng(mix_seed(cfg.seed, 0xC7));
  const double iw = 1.0 / std::sqrt(static_cast<double>(cfg.token_dim));
  ContextualEmbedder e{cfg, {}};
  e.params.add("ctx.embed", detail::init_matrix(rng, cfg.vocab, cfg.token_dim, 1.0));
  e.params.add("ctx.self_w", detail::init_matrix(rng, cfg.token_dim, cfg.out_dim, iw));
  e.params.add("ctx.mix_w", detail::init_matrix(rng, cfg.token_dim, cfg.out_dim, 0.3 * iw));
  return e;
}

namespace detail {
// Row k averages every row except k (zero for n = 1).
inline Tensor others_mean_matrix(std::size_t n) {
  Tensor m(Shape{n, n});
  if (n == 1) return m;
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t j = 0; j < n; ++j)
      if (j != k) m.at(k, j) = 1.0 / static_cast<double>(n - 1);
  return m;
}
}  // namespace detail

// Unit-norm contextual vectors [n,out_dim] from token embeddings [n,token_dim].
inline Var contextual_features(const ContextualEmbedder& emb, const BoundParams& p, const Var& token_emb) {
  Tape& tape = *token_emb.tape();
  const std::size_t n = token_emb.shape()[0];
  Var mixed = matmul(tape.constant(detail::others_mean_matrix(n)), token_emb);
  (void)emb;
  return l2_normalize(add(matmul(token_emb, p["ctx.self_w"]), matmul(mixed, p["ctx.mix_w"])));
}

inline Var contextual_embed(Tape& tape, const ContextualEmbedder& emb, const Var& pi) {
  detail::check_simplex_rows(pi.value(), emb.config.vocab, "contextual_embed");
  BoundParams p(tape, emb.params, false);
  return contextual_features(emb, p, matmul(pi, p["ctx.embed"]));
}

inline Var contextual_embed(Tape& tape, const ContextualEmbedder& emb, const Tokens& tokens) {
  validate_tokens(tokens, "contextual_embed");
  for (TokenId t : tokens)
    if (t >= emb.config.vocab) throw UsageError("contextual_embed: token id out of vocabulary");
  BoundParams p(tape, emb.params, false);
  return contextual_features(emb, p, gather_rows(p["ctx.embed"], tokens));
}

// One-hot rows [n,V] for a token sequence.
inline Tensor one_hot(const Tokens& tokens, std::size_t vocab = kVocabSize) {
  Tensor t(Shape{tokens.size(), vocab});
  for (std::size_t k = 0; k < tokens.size(); ++k) {
    if (tokens[k] >= vocab) throw UsageError("one_hot: token id out of vocabulary");
    t.at(k, tokens[k]) = 1.0;
  }
  return t;
}

}  // namespace vlpa
