#pragma once

// The joint text + image attack on one surrogate, and a parallel batch driver.

#include <atomic>
#include <exception>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "vlpa/config.hpp"
#include "vlpa/contrastive.hpp"
#include "vlpa/encoders.hpp"
#include "vlpa/imageattack.hpp"
#include "vlpa/textattack.hpp"

namespace vlpa {

// Read-only models used while crafting.
struct AttackModels {
  const DualEncoder& surrogate;
  const CausalLM& lm;
  const ContextualEmbedder& embedder;
};

struct ObjectiveTerms {
  Var total;
  Var cos;   // similarity of the adversarial pair (enters as -a*cos)
  Var perp;  // fluency cross-entropy (enters as -b*perp)
  Var sim;
  Var itm;
  Var i2i;
};

// The maximised objective
//   -a*cos(F(x), F(e(pi))) - b*L_perp + c*L_sim + d*L_itm + g*L_i2i.
inline ObjectiveTerms total_objective(const AttackModels& models, const Var& pi, const Var& x_view,
                                      const Tokens& original, const BundleEmbeddings& be, const AttackConfig& cfg) {
  Tape& tape = *pi.tape();
  Var img = encode_image(tape, models.surrogate, x_view);
  Var txt = encode_text_soft(tape, models.surrogate, pi);
  ObjectiveTerms o;
  o.cos = cosine_similarity(img, txt);
  o.perp = fluency_loss(tape, models.lm, pi);
  o.sim = bertscore_sim(tape, models.embedder, original, pi);
  o.itm = cross_modal_loss(img, txt, be, cfg.tau);
  o.i2i = intra_modal_loss(img, be, cfg.tau);
  o.total = add(add(add(add(scale(o.cos, -cfg.a), scale(o.perp, -cfg.b)), scale(o.sim, cfg.c)), scale(o.itm, cfg.d)),
                scale(o.i2i, cfg.g));
  return o;
}

struct TraceEntry {
  // term means over the M inner evaluations
  double cos = 0, perp = 0, sim = 0, itm = 0, i2i = 0, total = 0;
  // untransformed surrogate similarity of (x_adv, decoded text) after the iteration
  double adv_cos = 0;
  double linf = 0, min_pixel = 0, max_pixel = 0;
};

struct AttackResult {
  int pair_id = 0;
  bool ok = true;
  std::string error;
  Tensor adv_image;
  Tokens adv_tokens;
  std::vector<TraceEntry> trace;
  double achieved_linf = 0.0;
  double ter = 0.0;
  double clean_cos = 0.0;
  double adv_cos = 0.0;
};

inline std::uint64_t pair_seed(std::uint64_t seed, int pair_id) {
  return mix_seed(seed ^ static_cast<std::uint64_t>(static_cast<std::int64_t>(pair_id)));
}

inline double surrogate_cosine(const DualEncoder& m, const Tensor& image, const Tokens& text) {
  const Tensor a = embed_image(m, image), b = embed_text(m, text);
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Crafts one adversarial pair. Numeric failures propagate to the caller.
inline AttackResult attack_pair(const AttackModels& models, const Record& pair, std::span<const Record> pool,
                                const AttackConfig& cfg) {
  cfg.validate();
  const std::uint64_t ps = pair_seed(cfg.seed, pair.pair_id);
  Rng rng(ps);
  AdvTextDistribution dist = init_distribution(pair.tokens, cfg.eta, cfg.t);
  ThetaOptimizerState opt = init_theta_optimizer(dist, cfg.alpha_theta, cfg.gamma, cfg.rho, cfg.delta);
  PerturbationState st = init_perturbation(pair.image, cfg.eps, cfg.alpha_img, cfg.mu);
  TransformSpec tspec;
  tspec.p = cfg.p;

  AttackResult res;
  res.pair_id = pair.pair_id;
  res.clean_cos = surrogate_cosine(models.surrogate, pair.image, pair.tokens);
  if (cfg.H > 0) {
    BundleCounts counts{cfg.image_view_count, cfg.text_view_count, cfg.sampled_positive_count};
    const BundleEmbeddings be = embed_bundle(models.surrogate, build_bundle(pair, pool, counts, ps));
    const Tensor hard_pi = one_hot(pair.tokens);
    std::vector<Tensor> grads;
    for (std::size_t h = 0; h < cfg.H; ++h) {
      grads.clear();
      TraceEntry te;
      for (std::size_t m = 0; m < cfg.M; ++m) {
        Tape tape;
        Var x = tape.leaf(st.x_adv, cfg.attack_image);
        Var view = nesterov_lookahead(apply_transform(x, tspec, rng), st);
        Var theta = tape.leaf(dist.theta, cfg.attack_text);
        Var pi = cfg.attack_text ? sample_pi(theta, dist.temperature, rng) : tape.borrow(hard_pi);
        ObjectiveTerms o = total_objective(models, pi, view, pair.tokens, be, cfg);
        te.cos += o.cos.item();
        te.perp += o.perp.item();
        te.sim += o.sim.item();
        te.itm += o.itm.item();
        te.i2i += o.i2i.item();
        te.total += o.total.item();
        if (!std::isfinite(o.total.item())) throw NumericError("attack: objective became non-finite");
        tape.backward(o.total);
        if (cfg.attack_image) grads.push_back(x.grad_tensor());
        if (cfg.attack_text) theta_step(dist, opt, theta.grad_tensor());
      }
      const double inv = 1.0 / static_cast<double>(cfg.M);
      for (double* v : {&te.cos, &te.perp, &te.sim, &te.itm, &te.i2i, &te.total}) *v *= inv;
      if (cfg.attack_image) momentum_sign_step(st, averaged_gradient(grads));
      te.linf = linf_distance(st.x_adv, st.x_orig);
      te.min_pixel = *std::min_element(st.x_adv.data().begin(), st.x_adv.data().end());
      te.max_pixel = *std::max_element(st.x_adv.data().begin(), st.x_adv.data().end());
      te.adv_cos = surrogate_cosine(models.surrogate, st.x_adv, decode(dist));
      res.trace.push_back(te);
    }
  }
  res.adv_image = st.x_adv;
  res.adv_tokens = decode(dist);
  res.achieved_linf = linf_distance(st.x_adv, st.x_orig);
  res.ter = token_error_rate(pair.tokens, res.adv_tokens);
  res.adv_cos = cfg.H > 0 ? res.trace.back().adv_cos : res.clean_cos;
  return res;
}

// Attacks every pair on `jobs` worker threads. Results keep input order and do
// not depend on `jobs`. A numeric failure marks that pair and leaves the
// originals in place; any other error aborts the batch.
inline std::vector<AttackResult> attack_batch(const AttackModels& models, std::span<const Record> pairs,
                                              std::span<const Record> pool, const AttackConfig& cfg,
                                              std::size_t jobs = 1) {
  if (pairs.empty()) throw UsageError("attack_batch: no pairs");
  cfg.validate();
  std::vector<AttackResult> out(pairs.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr fatal;
  std::mutex fatal_mu;
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= pairs.size()) return;
      try {
        out[i] = attack_pair(models, pairs[i], pool, cfg);
      } catch (const NumericError& e) {
        AttackResult r;
        r.pair_id = pairs[i].pair_id;
        r.ok = false;
        r.error = e.what();
        r.adv_image = pairs[i].image;
        r.adv_tokens = pairs[i].tokens;
        out[i] = std::move(r);
      } catch (...) {
        std::lock_guard lock(fatal_mu);
        if (!fatal) fatal = std::current_exception();
        next = pairs.size();
      }
    }
  };
  jobs = std::max<std::size_t>(1, std::min(jobs, pairs.size()));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool_threads;
    for (std::size_t j = 0; j < jobs; ++j) pool_threads.emplace_back(worker);
    for (auto& t : pool_threads) t.join();
  }
  if (fatal) std::rethrow_exception(fatal);
  return out;
}

}  // namespace vlpa
