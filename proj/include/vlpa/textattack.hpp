#pragma once

// Adversarial text as a matrix theta [n,V] of logits. Soft sequences pi are
// drawn with the Gumbel-softmax trick so gradients reach theta; the final
// text is the row-wise argmax of theta.

#include <cmath>
#include <string>

#include "vlpa/autodiff.hpp"
#include "vlpa/corpus.hpp"
#include "vlpa/encoders.hpp"
#include "vlpa/rng.hpp"

namespace vlpa {

struct AdvTextDistribution {
  Tensor theta;  // [n,V]
  double temperature = 1.0;
  Tokens original;
  double eta = 13.0;

  std::size_t length() const { return original.size(); }
  std::size_t vocab() const { return theta.dim(1); }
};

inline AdvTextDistribution init_distribution(const Tokens& x, double eta, double t, std::size_t vocab = kVocabSize) {
  if (x.empty() || x.size() > kMaxTextLen)
    throw UsageError("init_distribution: text length " + std::to_string(x.size()) + " outside [1,30]");
  if (!(t > 0)) throw UsageError("init_distribution: temperature must be positive");
  AdvTextDistribution d;
  d.theta = Tensor(Shape{x.size(), vocab}, 0.0);
  for (std::size_t j = 0; j < x.size(); ++j) {
    if (x[j] >= vocab) throw UsageError("init_distribution: token id out of vocabulary");
    d.theta.at(j, x[j]) = eta;
  }
  d.temperature = t;
  d.original = x;
  d.eta = eta;
  return d;
}

// Standard Gumbel noise matching theta's shape.
inline Tensor gumbel_noise(const Tensor& theta, Rng& rng) {
  Tensor g(theta.shape());
  for (double& v : g.data()) v = rng.gumbel();
  return g;
}

// pi = softmax((theta + noise) / t), rows on the simplex. Noise is a constant.
inline Var gumbel_softmax(const Var& theta, const Tensor& noise, double t) {
  if (!(t > 0)) throw UsageError("sample_pi: temperature must be positive");
  return softmax(scale(add(theta, theta.tape()->constant(noise)), 1.0 / t));
}

inline Var sample_pi(const Var& theta, double t, Rng& rng) {
  return gumbel_softmax(theta, gumbel_noise(theta.value(), rng), t);
}

// Draws pi without recording gradients.
inline Tensor sample_pi(const AdvTextDistribution& d, Rng& rng) {
  Tape tape;
  return sample_pi(tape.borrow(d.theta), d.temperature, rng).value();
}

inline Var fluency_loss(Tape& tape, const CausalLM& lm, const Var& pi) { return lm_logprob(tape, lm, pi); }

// Greedy-matching similarity: mean over original positions k of
// max_j phi(x)_k . phi(pi)_j.
inline Var bertscore_sim(Tape& tape, const ContextualEmbedder& emb, const Tokens& x, const Var& pi) {
  Var ref = contextual_embed(tape, emb, x);
  Var cand = contextual_embed(tape, emb, pi);
  return mean(max_axis(matmul(ref, transpose(cand)), 1));
}

struct ThetaOptimizerState {
  Tensor sq_avg;
  Tensor momentum_buf;
  double lr = 0.3;
  double gamma = 0.6;
  double rho = 0.99;
  double delta = 1e-8;
};

inline ThetaOptimizerState init_theta_optimizer(const AdvTextDistribution& d, double lr = 0.3, double gamma = 0.6,
                                                double rho = 0.99, double delta = 1e-8) {
  return {Tensor(d.theta.shape(), 0.0), Tensor(d.theta.shape(), 0.0), lr, gamma, rho, delta};
}

// RMSProp with momentum, ascending.
inline void theta_step(AdvTextDistribution& d, ThetaOptimizerState& s, const Tensor& grad) {
  if (grad.shape() != d.theta.shape())
    throw UsageError("theta_step: grad shape " + shape_str(grad.shape()) + " != " + shape_str(d.theta.shape()));
  if (!grad.all_finite()) throw NumericError("theta_step: non-finite gradient");
  auto& th = d.theta.data();
  auto& sq = s.sq_avg.data();
  auto& mb = s.momentum_buf.data();
  const auto& g = grad.data();
  for (std::size_t i = 0; i < th.size(); ++i) {
    sq[i] = s.rho * sq[i] + (1.0 - s.rho) * g[i] * g[i];
    mb[i] = s.gamma * mb[i] + s.lr * g[i] / (std::sqrt(sq[i]) + s.delta);
    th[i] += mb[i];
  }
  if (!d.theta.all_finite()) throw NumericError("theta_step: theta became non-finite");
}

// Row-wise argmax of theta; ties go to the lowest token id.
inline Tokens decode(const AdvTextDistribution& d) {
  const std::size_t n = d.theta.dim(0), v = d.theta.dim(1);
  Tokens out(n);
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < v; ++j)
      if (d.theta.at(k, j) > d.theta.at(k, best)) best = j;
    out[k] = best;
  }
  return out;
}

inline double token_error_rate(const Tokens& a, const Tokens& b) {
  if (a.size() != b.size())
    throw UsageError("token_error_rate: lengths differ (" + std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()) + ")");
  if (a.empty()) throw UsageError("token_error_rate: empty sequences");
  std::size_t diff = 0;
  for (std::size_t i = 0; i < a.size(); ++i) diff += a[i] != b[i];
  return static_cast<double>(diff) / static_cast<double>(a.size());
}

}  // namespace vlpa
