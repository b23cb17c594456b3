#pragma once

// Seeded random composite graphs, one family per primitive, for
// finite-difference checks of the tape.

#include <string>
#include <vector>

#include "vlpa/autodiff.hpp"
#include "vlpa/grad_check.hpp"
#include "vlpa/rng.hpp"

namespace vlpa::testkit {

struct ZooGraph {
  std::string primitive;
  std::vector<Tensor> leaves;
  GraphBuilder build;
  double tolerance = 1e-4;
};

inline const std::vector<std::string>& zoo_primitives() {
  static const std::vector<std::string> names = {
      "add",      "add_row",      "sub",       "mul",          "mul_row",   "matmul",
      "scale",    "shift",        "exp",       "log",          "tanh",      "relu",
      "clamp",    "softmax",      "log_softmax", "sum",        "mean",      "sum_axis",
      "mean_axis", "max_axis",    "l2_normalize", "cosine_similarity", "concat", "slice",
      "reshape",  "transpose",    "gather",    "gather_rows",  "segment_mean", "segment_max",
      "bilinear_sample"};
  return names;
}

inline Tensor random_tensor(Rng& rng, Shape shape, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = scale * rng.normal();
  return t;
}

// Graph number `index`: exercises primitive index % count inside a chain of
// smooth ops, reduced to a scalar by a random weighting.
inline ZooGraph make_zoo_graph(std::size_t index, std::uint64_t seed) {
  const auto& names = zoo_primitives();
  ZooGraph z;
  z.primitive = names[index % names.size()];
  Rng rng(mix_seed(seed, index));

  // Leaves: X [3,4], W [4,4], Y [3,4], b [4]
  z.leaves = {random_tensor(rng, {3, 4}), random_tensor(rng, {4, 4}, 0.5), random_tensor(rng, {3, 4}),
              random_tensor(rng, {4})};
  Tensor weights = random_tensor(rng, {64});
  const std::vector<int> tail = {static_cast<int>(rng.below(3)), static_cast<int>(rng.below(3))};

  if (z.primitive == "bilinear_sample") {
    Tensor img = random_tensor(rng, {2, 5, 5});
    Tensor grid(Shape{3, 3, 2});
    for (std::size_t i = 0; i < grid.size(); ++i)
      grid[i] = static_cast<double>(rng.below(5)) - 0.5 + rng.uniform(0.2, 0.8);
    z.leaves = {img, grid};
    z.tolerance = 1e-3;
    z.build = [weights](Tape& t, std::span<const Var> v) {
      Var s = bilinear_sample(tanh(v[0]), v[1]);
      Var w = t.constant(Tensor(Shape{s.size()},
                                std::vector<double>(weights.data().begin(),
                                                    weights.data().begin() + static_cast<long>(s.size()))));
      return sum(mul(reshape(tanh(s), {s.size()}), w));
    };
    return z;
  }

  std::string p = z.primitive;
  z.build = [p, weights, tail](Tape& t, std::span<const Var> v) {
    const Var& X = v[0];
    const Var& W = v[1];
    const Var& Y = v[2];
    const Var& b = v[3];
    Var h = tanh(matmul(X, W));  // [3,4]
    Var out;
    if (p == "add") out = add(h, Y);
    else if (p == "add_row") out = add(h, b);
    else if (p == "sub") out = sub(h, Y);
    else if (p == "mul") out = mul(h, Y);
    else if (p == "mul_row") out = mul(h, b);
    else if (p == "matmul") out = matmul(h, transpose(Y));
    else if (p == "scale") out = scale(h, -1.7);
    else if (p == "shift") out = shift(h, 0.3);
    else if (p == "exp") out = exp(h);
    else if (p == "log") out = log(shift(exp(h), 0.1));
    else if (p == "tanh") out = tanh(add(h, Y));
    else if (p == "relu") out = relu(add(h, Y));
    else if (p == "clamp") out = clamp(add(h, Y), -0.5, 0.5);
    else if (p == "softmax") out = softmax(add(h, Y));
    else if (p == "log_softmax") out = log_softmax(add(h, Y));
    else if (p == "sum") out = sum(mul(h, Y));
    else if (p == "mean") out = mean(mul(h, Y));
    else if (p == "sum_axis") out = sum_axis(mul(h, Y), 0);
    else if (p == "mean_axis") out = mean_axis(mul(h, Y), 1);
    else if (p == "max_axis") out = max_axis(add(h, Y), 1);
    else if (p == "l2_normalize") out = l2_normalize(add(h, Y));
    else if (p == "cosine_similarity") out = cosine_similarity(h, Y);
    else if (p == "concat") out = concat({h, Y, X});
    else if (p == "slice") out = slice(add(h, Y), 1, 1, 3);
    else if (p == "reshape") out = matmul(reshape(h, {4, 3}), X);
    else if (p == "transpose") out = matmul(transpose(h), Y);
    else if (p == "gather") out = gather(add(h, Y), {0, 5, kGatherZero, 11, 5, 2}, {2, 3});
    else if (p == "gather_rows") {
      std::vector<std::size_t> rows = {2, 0, 2};
      out = gather_rows(add(h, Y), rows);
    } else if (p == "segment_mean") {
      std::vector<std::size_t> lens = {1, 2};
      out = segment_mean(add(h, Y), lens);
    } else if (p == "segment_max") {
      std::vector<std::size_t> lens = {2, 1};
      out = segment_max(add(h, Y), lens);
    } else {
      out = forward_op(p, {h});
    }
    // A few smooth ops on top so every graph is a composite of >= 5 primitives.
    for (int k : tail) {
      if (k == 0) out = tanh(out);
      else if (k == 1) out = scale(out, 0.8);
      else out = shift(out, -0.2);
    }
    const std::size_t n = out.size();
    Var flat = reshape(out, {n});
    Var w = t.constant(Tensor(Shape{n}, std::vector<double>(weights.data().begin(),
                                                             weights.data().begin() + static_cast<long>(n))));
    return sum(mul(flat, w));
  };
  return z;
}

}  // namespace vlpa::testkit
