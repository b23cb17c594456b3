#pragma once

// Transfer evaluation: clean vs adversarial retrieval on each victim, plus
// text-quality metrics and the loss-landscape flatness probe.

#include <cmath>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "vlpa/config.hpp"
#include "vlpa/encoders.hpp"
#include "vlpa/orchestrator.hpp"
#include "vlpa/pretrain.hpp"
#include "vlpa/retrieval.hpp"

namespace vlpa {

inline double asr(double clean_metric, double adv_metric) { return clean_metric - adv_metric; }

// Cosine of mean-pooled contextual embeddings.
inline double semantic_sim(const ContextualEmbedder& emb, const Tokens& a, const Tokens& b) {
  auto pooled = [&](const Tokens& t) {
    Tape tape;
    Tensor e = contextual_embed(tape, emb, t).value();
    const std::size_t n = e.dim(0), d = e.dim(1);
    std::vector<double> m(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) m[j] += e.at(i, j);
    for (double& v : m) v /= static_cast<double>(n);
    return m;
  };
  const auto pa = pooled(a), pb = pooled(b);
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t j = 0; j < pa.size(); ++j) {
    dot += pa[j] * pb[j];
    na += pa[j] * pa[j];
    nb += pb[j] * pb[j];
  }
  return dot / (std::max(std::sqrt(na), kNormFloor) * std::max(std::sqrt(nb), kNormFloor));
}

// exp(mean next-token cross-entropy).
inline double perplexity(const CausalLM& lm, const Tokens& tokens) {
  return std::exp(lm_nll(lm, tokens) / static_cast<double>(tokens.size()));
}

struct FlatnessProfile {
  std::vector<double> magnitudes;
  std::vector<double> mean_delta;
  std::size_t direction_count = 20;
};

// f(a) = mean over random unit directions p of
//   cos(F(x + a p), t) - cos(F(x), t).
inline FlatnessProfile flatness_profile(const DualEncoder& surrogate, const Tensor& adv_image,
                                        const Tensor& adv_text_embedding, const std::vector<double>& magnitudes,
                                        std::size_t directions = 20, std::uint64_t seed = 0) {
  bool has_zero = false;
  for (double a : magnitudes) has_zero |= a == 0.0;
  if (!has_zero) throw UsageError("flatness_profile: magnitudes must include 0");
  if (directions == 0) throw UsageError("flatness_profile: at least one direction is required");
  auto cos_to_text = [&](const Tensor& img) {
    const Tensor e = embed_image(surrogate, img);
    double s = 0.0;
    for (std::size_t i = 0; i < e.size(); ++i) s += e[i] * adv_text_embedding[i];
    return s;
  };
  const double base = cos_to_text(adv_image);
  FlatnessProfile prof{magnitudes, std::vector<double>(magnitudes.size(), 0.0), directions};
  Rng rng(mix_seed(seed, 0xF1A7));
  for (std::size_t k = 0; k < directions; ++k) {
    Tensor dir(adv_image.shape());
    double n2 = 0.0;
    for (double& v : dir.data()) {
      v = rng.normal();
      n2 += v * v;
    }
    const double inv = 1.0 / std::sqrt(n2);
    for (double& v : dir.data()) v *= inv;
    for (std::size_t i = 0; i < magnitudes.size(); ++i) {
      if (magnitudes[i] == 0.0) continue;
      Tensor moved = adv_image;
      for (std::size_t j = 0; j < moved.size(); ++j) moved[j] += magnitudes[i] * dir[j];
      prof.mean_delta[i] += cos_to_text(moved) - base;
    }
  }
  for (std::size_t i = 0; i < magnitudes.size(); ++i)
    prof.mean_delta[i] = magnitudes[i] == 0.0 ? 0.0 : prof.mean_delta[i] / static_cast<double>(directions);
  return prof;
}

inline double mean_abs_flatness(const FlatnessProfile& p) {
  double s = 0.0;
  for (double v : p.mean_delta) s += std::abs(v);
  return s / static_cast<double>(p.mean_delta.size());
}

inline constexpr std::array<std::size_t, 3> kRecallKs = {1, 5, 10};

struct RecallTable {
  // [direction][k index]
  std::array<std::array<double, 3>, 2> clean{}, adv{}, asr{};
};

struct VictimReport {
  std::string name;
  bool is_surrogate = false;
  RecallTable recall;
};

struct EvalReport {
  std::vector<VictimReport> models;
  std::size_t query_count = 0;
  std::size_t pool_size = 0;
  std::size_t failures = 0;
  double sim = 1.0;         // mean semantic similarity, clean vs adversarial text
  double ter = 0.0;         // mean token error rate
  double perp_clean = 0.0;  // mean perplexity of the clean captions
  double perp_adv = 0.0;    // mean perplexity of the adversarial captions
  double below_beta = 0.0;  // fraction of adversarial texts with sim < beta
  double surrogate_clean_cos = 0.0;
  double surrogate_adv_cos = 0.0;
  nlohmann::json config;
  std::uint64_t seed = 0;

  // Mean adversarial success at R@1 over victims and both directions.
  double mean_victim_asr1() const {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& m : models)
      if (!m.is_surrogate) {
        s += 0.5 * (m.recall.asr[0][0] + m.recall.asr[1][0]);
        ++n;
      }
    return n ? s / static_cast<double>(n) : 0.0;
  }
};

namespace detail {

// Pool embeddings with the attacked rows replaced by adversarial inputs.
inline RetrievalIndex adversarial_index(const DualEncoder& m, const RetrievalIndex& clean,
                                        std::span<const Record> pool, const std::vector<AttackResult>& results) {
  std::map<int, const AttackResult*> by_id;
  for (const auto& r : results) by_id[r.pair_id] = &r;
  std::vector<Tensor> imgs;
  std::vector<Tokens> txts;
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    auto it = by_id.find(pool[i].pair_id);
    if (it == by_id.end()) continue;
    imgs.push_back(it->second->adv_image);
    txts.push_back(it->second->adv_tokens);
    rows.push_back(i);
  }
  RetrievalIndex adv = clean;
  const Tensor ie = embed_images(m, imgs), te = embed_texts(m, txts);
  const std::size_t d = m.config.embed_dim;
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t j = 0; j < d; ++j) {
      adv.image_embeddings[rows[r] * d + j] = ie[r * d + j];
      adv.text_embeddings[rows[r] * d + j] = te[r * d + j];
    }
  return adv;
}

inline Tensor select_rows(const Tensor& t, const std::vector<std::size_t>& rows) {
  const std::size_t d = t.dim(1);
  Tensor out(Shape{rows.size(), d});
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = t[rows[r] * d + j];
  return out;
}

}  // namespace detail

// Retrieval table for one model: queries are the attacked pairs; the gallery is
// the full pool (clean) or the pool with attacked rows swapped for their
// adversarial versions.
inline RecallTable evaluate_model(const DualEncoder& m, std::span<const Record> pool,
                                  const std::vector<AttackResult>& results) {
  const RetrievalIndex clean = build_index(m, pool);
  const RetrievalIndex adv = detail::adversarial_index(m, clean, pool, results);
  std::vector<int> qids;
  std::vector<std::size_t> rows;
  for (const auto& r : results) {
    qids.push_back(r.pair_id);
    for (std::size_t i = 0; i < pool.size(); ++i)
      if (pool[i].pair_id == r.pair_id) rows.push_back(i);
  }
  if (rows.size() != qids.size()) throw UsageError("evaluate: attacked pair missing from the pool");
  RecallTable t;
  for (Direction dir : {Direction::kTextRetrieval, Direction::kImageRetrieval}) {
    const int di = dir == Direction::kTextRetrieval ? 0 : 1;
    // TR: image queries against texts; IR: text queries against images.
    const Tensor& cq = dir == Direction::kTextRetrieval ? clean.image_embeddings : clean.text_embeddings;
    const Tensor& aq = dir == Direction::kTextRetrieval ? adv.image_embeddings : adv.text_embeddings;
    const Tensor cqs = detail::select_rows(cq, rows), aqs = detail::select_rows(aq, rows);
    for (std::size_t ki = 0; ki < kRecallKs.size(); ++ki) {
      const std::size_t k = std::min(kRecallKs[ki], pool.size());
      t.clean[di][ki] = recall_at_k(clean, cqs, qids, k, dir);
      t.adv[di][ki] = recall_at_k(adv, aqs, qids, k, dir);
      t.asr[di][ki] = asr(t.clean[di][ki], t.adv[di][ki]);
    }
  }
  return t;
}

struct EvalModels {
  const DualEncoder& surrogate;
  std::vector<const DualEncoder*> victims;
  std::vector<std::string> victim_names;
  const CausalLM& lm;
  const ContextualEmbedder& embedder;
};

inline EvalReport evaluate(const EvalModels& models, std::span<const Record> pool,
                           const std::vector<AttackResult>& results, const AttackConfig& cfg) {
  EvalReport rep;
  rep.query_count = results.size();
  rep.pool_size = pool.size();
  rep.config = cfg;
  rep.seed = cfg.seed;
  rep.models.push_back({"surrogate", true, evaluate_model(models.surrogate, pool, results)});
  for (std::size_t v = 0; v < models.victims.size(); ++v)
    rep.models.push_back({models.victim_names[v], false, evaluate_model(*models.victims[v], pool, results)});

  std::map<int, const Record*> by_id;
  for (const auto& r : pool) by_id[r.pair_id] = &r;
  double sim = 0, ter = 0, pc = 0, pa = 0, below = 0, cc = 0, ac = 0;
  for (const auto& r : results) {
    const Record& rec = *by_id.at(r.pair_id);
    const double s = semantic_sim(models.embedder, rec.tokens, r.adv_tokens);
    sim += s;
    below += s < cfg.beta;
    ter += token_error_rate(rec.tokens, r.adv_tokens);
    pc += perplexity(models.lm, rec.tokens);
    pa += perplexity(models.lm, r.adv_tokens);
    cc += r.clean_cos;
    ac += r.adv_cos;
    rep.failures += !r.ok;
  }
  const double n = static_cast<double>(results.size());
  rep.sim = sim / n;
  rep.ter = ter / n;
  rep.perp_clean = pc / n;
  rep.perp_adv = pa / n;
  rep.below_beta = below / n;
  rep.surrogate_clean_cos = cc / n;
  rep.surrogate_adv_cos = ac / n;
  return rep;
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json models = nlohmann::json::array();
  for (const auto& m : r.models) {
    nlohmann::json e = {{"name", m.name}, {"surrogate", m.is_surrogate}};
    for (int di = 0; di < 2; ++di) {
      const std::string dir = di == 0 ? "TR" : "IR";
      for (std::size_t ki = 0; ki < kRecallKs.size(); ++ki) {
        const std::string k = "R@" + std::to_string(kRecallKs[ki]);
        e[dir]["clean"][k] = m.recall.clean[di][ki];
        e[dir]["adv"][k] = m.recall.adv[di][ki];
        e[dir]["asr"][k] = m.recall.asr[di][ki];
      }
    }
    models.push_back(e);
  }
  return {{"models", models},
          {"query_count", r.query_count},
          {"pool_size", r.pool_size},
          {"failures", r.failures},
          {"text",
           {{"sim", r.sim},
            {"sim_scale", "toy contextual embedder cosine"},
            {"ter", r.ter},
            {"perp_clean", r.perp_clean},
            {"perp_adv", r.perp_adv},
            {"below_beta", r.below_beta}}},
          {"surrogate_cos", {{"clean", r.surrogate_clean_cos}, {"adv", r.surrogate_adv_cos}}},
          {"mean_victim_asr1", r.mean_victim_asr1()},
          {"config", r.config},
          {"seed", r.seed}};
}

// One row per model x direction x k.
inline std::string to_csv(const EvalReport& r) {
  std::ostringstream out;
  out.precision(17);
  out << "model,direction,k,clean,adv,asr\n";
  for (const auto& m : r.models)
    for (int di = 0; di < 2; ++di)
      for (std::size_t ki = 0; ki < kRecallKs.size(); ++ki)
        out << m.name << ',' << (di == 0 ? "TR" : "IR") << ',' << kRecallKs[ki] << ',' << m.recall.clean[di][ki]
            << ',' << m.recall.adv[di][ki] << ',' << m.recall.asr[di][ki] << '\n';
  return out.str();
}

}  // namespace vlpa
