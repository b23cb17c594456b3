#pragma once

// InfoNCE and the two contrastive attack terms. Anchors are adversarial
// embeddings; negatives are the benign item and its augmented views;
// positives are unrelated corpus items.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "vlpa/autodiff.hpp"
#include "vlpa/corpus.hpp"
#include "vlpa/encoders.hpp"
#include "vlpa/imageattack.hpp"
#include "vlpa/rng.hpp"

namespace vlpa {

// Mean over positives of log(exp(s+/tau) / sum over all candidates exp(s/tau)),
// s = anchor . candidate. Candidates are summed in ascending similarity order
// so the result does not depend on list order.
inline Var info_nce(const Var& anchor, std::span<const Var> positives, std::span<const Var> negatives, double tau) {
  if (positives.empty()) throw UsageError("info_nce: at least one positive is required");
  if (!(tau > 0)) throw UsageError("info_nce: tau must be positive");
  const std::size_t d = anchor.size();
  struct Cand {
    double sim;
    bool positive;
    const Var* v;
  };
  std::vector<Cand> cands;
  auto add = [&](const Var& c, bool pos) {
    if (c.size() != d)
      throw ConfigError("info_nce: candidate shape " + shape_str(c.shape()) + " does not match anchor " +
                        shape_str(anchor.shape()));
    double s = 0.0;
    for (std::size_t i = 0; i < d; ++i) s += c.value()[i] * anchor.value()[i];
    cands.push_back({s, pos, &c});
  };
  for (const Var& p : positives) add(p, true);
  for (const Var& n : negatives) add(n, false);
  std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
    return a.sim < b.sim || (a.sim == b.sim && a.positive < b.positive);
  });
  std::vector<Var> rows;
  std::vector<std::size_t> pos_idx;
  for (std::size_t i = 0; i < cands.size(); ++i) {
    rows.push_back(reshape(*cands[i].v, {1, d}));
    if (cands[i].positive) pos_idx.push_back(i);
  }
  Var logits = scale(reshape(matmul(concat(rows), reshape(anchor, {d, 1})), {cands.size()}), 1.0 / tau);
  Var lsm = log_softmax(logits);
  const std::size_t np = pos_idx.size();
  return mean(gather(lsm, std::move(pos_idx), {np}));
}

inline Var info_nce(const Var& anchor, std::initializer_list<Var> positives, std::initializer_list<Var> negatives,
                    double tau) {
  return info_nce(anchor, std::span<const Var>(positives.begin(), positives.size()),
                  std::span<const Var>(negatives.begin(), negatives.size()), tau);
}

struct BundleCounts {
  std::size_t image_views = 7;
  std::size_t text_views = 7;
  std::size_t sampled_positives = 3;
};

struct AugmentationBundle {
  Tensor image;
  Tokens text;
  std::vector<Tensor> image_views;
  std::vector<Tokens> text_views;
  std::vector<Tensor> sampled_positives;       // unrelated images
  std::vector<Tokens> sampled_positive_texts;  // their captions
  std::vector<int> sampled_pair_ids;
};

// Synonym swap: each content token becomes a random alternate with probability `prob`.
inline Tokens synonym_swap(const Tokens& t, double prob, Rng& rng) {
  const auto& vocab = Vocabulary::standard();
  Tokens out = t;
  for (TokenId& tok : out) {
    const auto& alts = vocab.synonyms(tok);
    if (!alts.empty() && rng.bernoulli(prob)) tok = alts[rng.below(alts.size())];
  }
  return out;
}

// Replaces tokens with <pad> with probability `prob`, keeping at least one token.
inline Tokens token_dropout(const Tokens& t, double prob, Rng& rng) {
  Tokens out = t;
  std::size_t dropped = 0;
  for (TokenId& tok : out)
    if (rng.bernoulli(prob)) {
      tok = kPadToken;
      ++dropped;
    }
  if (dropped == out.size()) out[rng.below(out.size())] = t[rng.below(t.size())];
  return out;
}

// Views and unrelated samples for one pair; deterministic in (pair, seed).
inline AugmentationBundle build_bundle(const Record& pair, std::span<const Record> pool, const BundleCounts& counts,
                                       std::uint64_t seed) {
  std::vector<std::size_t> others;
  for (std::size_t i = 0; i < pool.size(); ++i)
    if (pool[i].pair_id != pair.pair_id) others.push_back(i);
  if (others.size() < counts.sampled_positives || others.empty())
    throw ConfigError("build_bundle: pool of " + std::to_string(pool.size()) + " pairs cannot supply " +
                      std::to_string(counts.sampled_positives) + " unrelated samples");
  Rng rng(mix_seed(seed, static_cast<std::uint64_t>(pair.pair_id) ^ 0xB0D1E5ULL));
  AugmentationBundle b;
  b.image = pair.image;
  b.text = pair.tokens;

  TransformSpec views;
  views.p = 1.0;
  for (std::size_t i = 0; i < counts.image_views; ++i) {
    Tape t;
    Var v = apply_transform(t.borrow(pair.image), views, rng);
    v = apply_transform(v, views, rng);
    b.image_views.push_back(v.value());
  }
  for (std::size_t i = 0; i < counts.text_views; ++i) {
    if (i + 1 == counts.text_views)
      b.text_views.push_back(token_dropout(pair.tokens, 0.2, rng));
    else
      b.text_views.push_back(synonym_swap(pair.tokens, 0.3, rng));
  }
  for (std::size_t i = 0; i < counts.sampled_positives; ++i) {
    const std::size_t j = i + rng.below(others.size() - i);
    std::swap(others[i], others[j]);
    const Record& r = pool[others[i]];
    b.sampled_positives.push_back(r.image);
    b.sampled_positive_texts.push_back(r.tokens);
    b.sampled_pair_ids.push_back(r.pair_id);
  }
  return b;
}

// Surrogate embeddings of a bundle, computed once per pair.
struct BundleEmbeddings {
  Tensor image;
  Tensor text;
  std::vector<Tensor> image_views;
  std::vector<Tensor> text_views;
  std::vector<Tensor> positive_images;
  std::vector<Tensor> positive_texts;
};

inline BundleEmbeddings embed_bundle(const DualEncoder& m, const AugmentationBundle& b) {
  BundleEmbeddings e;
  e.image = embed_image(m, b.image);
  e.text = embed_text(m, b.text);
  for (const auto& v : b.image_views) e.image_views.push_back(embed_image(m, v));
  for (const auto& v : b.text_views) e.text_views.push_back(embed_text(m, v));
  for (const auto& v : b.sampled_positives) e.positive_images.push_back(embed_image(m, v));
  for (const auto& v : b.sampled_positive_texts) e.positive_texts.push_back(embed_text(m, v));
  return e;
}

namespace detail {
inline std::vector<Var> as_constants(Tape& t, const Tensor& first, const std::vector<Tensor>& rest) {
  std::vector<Var> out{t.borrow(first)};
  for (const auto& r : rest) out.push_back(t.borrow(r));
  return out;
}
inline std::vector<Var> as_constants(Tape& t, const std::vector<Tensor>& xs) {
  std::vector<Var> out;
  for (const auto& x : xs) out.push_back(t.borrow(x));
  return out;
}
}  // namespace detail

// Cross-modal term from adversarial embeddings: the text anchor against
// benign image views, the image anchor against benign text views, averaged.
inline Var cross_modal_loss(const Var& adv_image_emb, const Var& adv_text_emb, const BundleEmbeddings& be,
                            double tau) {
  Tape& t = *adv_image_emb.tape();
  if (be.positive_images.empty() || be.positive_texts.empty())
    throw UsageError("cross_modal_loss: bundle has no sampled positives");
  auto pos_img = detail::as_constants(t, be.positive_images);
  auto neg_img = detail::as_constants(t, be.image, be.image_views);
  auto pos_txt = detail::as_constants(t, be.positive_texts);
  auto neg_txt = detail::as_constants(t, be.text, be.text_views);
  return scale(add(info_nce(adv_text_emb, pos_img, neg_img, tau), info_nce(adv_image_emb, pos_txt, neg_txt, tau)),
               0.5);
}

// Image-only contrastive term.
inline Var intra_modal_loss(const Var& adv_image_emb, const BundleEmbeddings& be, double tau) {
  Tape& t = *adv_image_emb.tape();
  if (be.positive_images.empty()) throw UsageError("intra_modal_loss: bundle has no sampled positives");
  auto pos_img = detail::as_constants(t, be.positive_images);
  auto neg_img = detail::as_constants(t, be.image, be.image_views);
  return info_nce(adv_image_emb, pos_img, neg_img, tau);
}

// Convenience forms that encode the adversarial inputs with the surrogate.
inline Var cross_modal_loss(Tape& t, const DualEncoder& m, const Var& x_adv, const Var& pi, const BundleEmbeddings& be,
                            double tau) {
  return cross_modal_loss(encode_image(t, m, x_adv), encode_text_soft(t, m, pi), be, tau);
}

inline Var intra_modal_loss(Tape& t, const DualEncoder& m, const Var& x_adv, const BundleEmbeddings& be, double tau) {
  return intra_modal_loss(encode_image(t, m, x_adv), be, tau);
}

}  // namespace vlpa
