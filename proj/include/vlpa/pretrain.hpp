#pragma once

// Pretraining of the model zoo on a synthetic corpus:
//   dual encoders   symmetric InfoNCE over in-batch pairs
//   causal LM       next-token cross-entropy on training captions
//   contextual emb. per-token concept classification through a throwaway head

#include <chrono>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "vlpa/corpus.hpp"
#include "vlpa/encoders.hpp"
#include "vlpa/retrieval.hpp"

namespace vlpa {

// Adam over every tensor of a ParamSet.
class Adam {
 public:
  Adam(const ParamSet& params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
    for (const auto& [n, t] : params.items()) {
      m_.emplace_back(t.shape(), 0.0);
      v_.emplace_back(t.shape(), 0.0);
    }
  }

  void set_lr(double lr) { lr_ = lr; }

  void step(ParamSet& params, const std::vector<Tensor>& grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    auto& items = params.items();
    for (std::size_t i = 0; i < items.size(); ++i) {
      auto& w = items[i].second.data();
      const auto& g = grads[i].data();
      auto& m = m_[i].data();
      auto& v = v_[i].data();
      for (std::size_t j = 0; j < w.size(); ++j) {
        if (!std::isfinite(g[j])) throw NumericError("adam: non-finite gradient in " + items[i].first);
        m[j] = b1_ * m[j] + (1 - b1_) * g[j];
        v[j] = b2_ * v[j] + (1 - b2_) * g[j] * g[j];
        w[j] -= lr_ * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
      }
    }
  }

 private:
  double lr_, b1_, b2_, eps_;
  long t_ = 0;
  std::vector<Tensor> m_, v_;
};

// Model variant string "arch_seed:width:pooling", e.g. "1:64:mean".
inline DualEncoderConfig parse_model_spec(const std::string& s) {
  std::istringstream in(s);
  std::string seed, width, pool;
  if (!std::getline(in, seed, ':') || !std::getline(in, width, ':') || !std::getline(in, pool) || seed.empty() ||
      width.empty())
    throw ConfigError("model spec '" + s + "' is not of the form seed:width:pooling");
  DualEncoderConfig cfg;
  try {
    cfg.arch_seed = std::stoull(seed);
    cfg.width = std::stoul(width);
  } catch (const std::exception&) {
    throw ConfigError("model spec '" + s + "' has a non-numeric field");
  }
  if (cfg.width != 32 && cfg.width != 64 && cfg.width != 128)
    throw ConfigError("model spec '" + s + "': width must be 32, 64 or 128");
  cfg.pooling = parse_pooling(pool);
  return cfg;
}

inline std::string model_spec_string(const DualEncoderConfig& c) {
  return std::to_string(c.arch_seed) + ":" + std::to_string(c.width) + ":" + pooling_name(c.pooling);
}

struct ZooSpec {
  std::string surrogate = "1:64:mean";
  std::vector<std::string> victims = {"2:32:mean", "3:128:mean", "4:64:max", "5:128:max"};
  std::size_t steps = 1500;
  std::size_t batch = 128;
  double lr = 3e-3;
  std::size_t lm_steps = 600;
  std::size_t ctx_steps = 300;
  double surrogate_target = 0.8;
  double victim_target = 0.7;

  void validate() const {
    parse_model_spec(surrogate);
    if (victims.size() < 4) throw ConfigError("zoo: at least 4 victims are required");
    for (const auto& v : victims) parse_model_spec(v);
    if (batch < 2) throw ConfigError("zoo: batch must be >= 2");
    if (!(lr > 0)) throw ConfigError("zoo: learning rate must be positive");
  }

  nlohmann::json to_json() const {
    return {{"surrogate", surrogate}, {"victims", victims},     {"steps", steps},
            {"batch", batch},         {"lr", lr},               {"lm_steps", lm_steps},
            {"ctx_steps", ctx_steps}, {"surrogate_target", surrogate_target},
            {"victim_target", victim_target}};
  }
};

struct ModelZoo {
  DualEncoder surrogate;
  std::vector<DualEncoder> victims;
  CausalLM lm;
  ContextualEmbedder embedder;
  nlohmann::json metrics;
};

namespace detail {

inline Tensor stack_images(std::span<const Record> recs, std::span<const std::size_t> idx) {
  Tensor out(Shape{idx.size(), kImageChannels, kImageSide, kImageSide});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto& src = recs[idx[i]].image.data();
    std::copy(src.begin(), src.end(), out.data().begin() + static_cast<long>(i * kImageNumel));
  }
  return out;
}

inline std::vector<std::size_t> sample_batch(Rng& rng, std::size_t n, std::size_t b) {
  std::vector<std::size_t> all = iota_vec(n);
  b = std::min(b, n);
  for (std::size_t i = 0; i < b; ++i) std::swap(all[i], all[i + rng.below(n - i)]);
  all.resize(b);
  return all;
}

// Diagonal of a square [B,B] tensor.
inline Var diagonal(const Var& m) {
  const std::size_t b = m.shape()[0];
  std::vector<std::size_t> idx(b);
  for (std::size_t i = 0; i < b; ++i) idx[i] = i * b + i;
  return gather(m, std::move(idx), {b});
}

inline double cosine_lr(double base, std::size_t step, std::size_t total) {
  const double warm = std::min(1.0, static_cast<double>(step + 1) / 50.0);
  return base * warm * 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(step) / static_cast<double>(total)));
}

}  // namespace detail

// Pool-wide clean retrieval index of a dual encoder.
inline RetrievalIndex build_index(const DualEncoder& m, std::span<const Record> pool) {
  std::vector<Tensor> images;
  std::vector<Tokens> texts;
  RetrievalIndex idx;
  for (const auto& r : pool) {
    images.push_back(r.image);
    texts.push_back(r.tokens);
    idx.pair_ids.push_back(r.pair_id);
  }
  idx.image_embeddings = embed_images(m, images);
  idx.text_embeddings = embed_texts(m, texts);
  return idx;
}

// Mean of text- and image-retrieval R@1 on a pool.
inline double mean_clean_r1(const DualEncoder& m, std::span<const Record> pool) {
  RetrievalIndex idx = build_index(m, pool);
  return 0.5 * (clean_recall(idx, 1, Direction::kTextRetrieval) + clean_recall(idx, 1, Direction::kImageRetrieval));
}

inline void train_dual_encoder(DualEncoder& m, std::span<const Record> train, const ZooSpec& spec) {
  constexpr double kTau = 0.1;
  Rng rng(mix_seed(m.config.arch_seed, 0x7241));
  Adam opt(m.params, spec.lr);
  for (std::size_t step = 0; step < spec.steps; ++step) {
    auto idx = detail::sample_batch(rng, train.size(), spec.batch);
    Tokens flat;
    std::vector<std::size_t> lens;
    for (std::size_t i : idx) {
      flat.insert(flat.end(), train[i].tokens.begin(), train[i].tokens.end());
      lens.push_back(train[i].tokens.size());
    }
    Tape tape;
    BoundParams p(tape, m.params, true);
    Var img = image_features(m, p, tape.constant(detail::stack_images(train, idx)));
    Var txt = text_features(m, p, gather_rows(p["txt.embed"], flat), lens);
    Var logits = scale(matmul(img, transpose(txt)), 1.0 / kTau);
    Var l_i2t = mean(detail::diagonal(log_softmax(logits)));
    Var l_t2i = mean(detail::diagonal(log_softmax(transpose(logits))));
    Var loss = scale(add(l_i2t, l_t2i), -0.5);
    tape.backward(loss);
    opt.set_lr(detail::cosine_lr(spec.lr, step, spec.steps));
    opt.step(m.params, p.grads());
  }
}

// Held-out perplexity of a causal LM over a set of captions.
inline double corpus_perplexity(const CausalLM& lm, std::span<const Record> pool) {
  double nll = 0.0;
  std::size_t n = 0;
  for (const auto& r : pool) {
    nll += lm_nll(lm, r.tokens);
    n += r.tokens.size();
  }
  return std::exp(nll / static_cast<double>(n));
}

inline void train_causal_lm(CausalLM& lm, std::span<const Record> train, const ZooSpec& spec) {
  Rng rng(mix_seed(lm.config.seed, 0x7242));
  Adam opt(lm.params, spec.lr);
  const std::size_t b = std::min<std::size_t>(64, train.size());
  for (std::size_t step = 0; step < spec.lm_steps; ++step) {
    auto idx = detail::sample_batch(rng, train.size(), b);
    Tokens flat;
    std::vector<std::size_t> lens;
    for (std::size_t i : idx) {
      flat.insert(flat.end(), train[i].tokens.begin(), train[i].tokens.end());
      lens.push_back(train[i].tokens.size());
    }
    Tape tape;
    BoundParams p(tape, lm.params, true);
    Var logp = lm_log_probs(lm, p, gather_rows(p["lm.embed"], flat), lens);
    std::vector<std::size_t> pick(flat.size());
    for (std::size_t k = 0; k < flat.size(); ++k) pick[k] = k * lm.config.vocab + flat[k];
    Var loss = scale(mean(gather(logp, std::move(pick), {flat.size()})), -1.0);
    tape.backward(loss);
    opt.set_lr(detail::cosine_lr(spec.lr, step, spec.lm_steps));
    opt.step(lm.params, p.grads());
  }
}

// Trains the embedder so that each token's contextual vector identifies its
// concept (synonyms share a concept), with a linear head discarded afterwards.
inline double train_contextual_embedder(ContextualEmbedder& emb, std::span<const Record> train, const ZooSpec& spec) {
  const auto& vocab = Vocabulary::standard();
  Rng rng(mix_seed(emb.config.seed, 0x7243));
  ParamSet all = emb.params;
  {
    Rng hr(mix_seed(emb.config.seed, 0x7244));
    all.add("ctx.head", detail::init_matrix(hr, emb.config.out_dim, vocab.concept_count(), 0.1));
  }
  Adam opt(all, spec.lr);
  double acc = 0.0;
  for (std::size_t step = 0; step < spec.ctx_steps; ++step) {
    auto idx = detail::sample_batch(rng, train.size(), 32);
    Tape tape;
    BoundParams p(tape, all, true);
    std::vector<Var> feats;
    std::vector<std::size_t> labels;
    for (std::size_t i : idx) {
      const Tokens& t = train[i].tokens;
      feats.push_back(contextual_features(emb, p, gather_rows(p["ctx.embed"], t)));
      for (TokenId tok : t) labels.push_back(vocab.concept_of(tok));
    }
    Var logp = log_softmax(scale(matmul(concat(feats), p["ctx.head"]), 10.0));
    const std::size_t C = vocab.concept_count();
    std::size_t correct = 0;
    std::vector<std::size_t> pick(labels.size());
    for (std::size_t k = 0; k < labels.size(); ++k) {
      pick[k] = k * C + labels[k];
      std::size_t best = 0;
      for (std::size_t c = 1; c < C; ++c)
        if (logp.value()[k * C + c] > logp.value()[k * C + best]) best = c;
      correct += best == labels[k];
    }
    acc = static_cast<double>(correct) / static_cast<double>(labels.size());
    Var loss = scale(mean(gather(logp, std::move(pick), {labels.size()})), -1.0);
    tape.backward(loss);
    opt.set_lr(detail::cosine_lr(spec.lr, step, spec.ctx_steps));
    opt.step(all, p.grads());
  }
  for (auto& [n, t] : emb.params.items()) t = all.at(n);
  return acc;
}

// Trains the whole zoo. Throws TrainingError when a retrieval or fluency
// target is missed; the achieved metrics travel with the error.
inline ModelZoo pretrain_zoo(const SyntheticCorpus& corpus, const ZooSpec& spec, std::uint64_t seed) {
  spec.validate();
  if (corpus.records.size() < 512)
    throw ConfigError("pretrain: corpus must hold at least 512 pairs, got " + std::to_string(corpus.records.size()));
  auto train = corpus.train();
  auto held = corpus.heldout();
  nlohmann::json metrics;
  bool ok = true;
  std::vector<std::string> failures;

  auto fit = [&](const std::string& s, double target) {
    DualEncoderConfig cfg = parse_model_spec(s);
    cfg.arch_seed = mix_seed(seed, cfg.arch_seed) >> 12;
    DualEncoder m = make_dual_encoder(cfg);
    train_dual_encoder(m, train, spec);
    const double r1 = mean_clean_r1(m, held);
    metrics["r1"][s] = r1;
    if (!(r1 >= target)) {
      ok = false;
      failures.push_back(s + " R@1 " + std::to_string(r1) + " < " + std::to_string(target));
    }
    return m;
  };

  ModelZoo zoo{fit(spec.surrogate, spec.surrogate_target), {}, {}, {}, {}};
  for (const auto& v : spec.victims) zoo.victims.push_back(fit(v, spec.victim_target));

  CausalLMConfig lc;
  lc.seed = mix_seed(seed, 0x11) >> 12;
  zoo.lm = make_causal_lm(lc);
  train_causal_lm(zoo.lm, train, spec);
  const double ppl = corpus_perplexity(zoo.lm, held);
  metrics["lm_perplexity"] = ppl;
  if (!(ppl < static_cast<double>(kVocabSize))) {
    ok = false;
    failures.push_back("LM perplexity " + std::to_string(ppl) + " >= V");
  }

  ContextualEmbedderConfig ec;
  ec.seed = mix_seed(seed, 0x13) >> 12;
  zoo.embedder = make_contextual_embedder(ec);
  metrics["embedder_concept_accuracy"] = train_contextual_embedder(zoo.embedder, train, spec);
  zoo.metrics = metrics;
  if (!ok) {
    std::string msg = "pretraining targets missed:";
    for (const auto& f : failures) msg += " " + f + ";";
    throw TrainingError(msg, metrics.dump());
  }
  return zoo;
}

}  // namespace vlpa
