#pragma once

#include <algorithm>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "vlpa/error.hpp"
#include "vlpa/tensor.hpp"

namespace vlpa {

enum class Direction { kTextRetrieval, kImageRetrieval };

inline const char* direction_name(Direction d) { return d == Direction::kTextRetrieval ? "TR" : "IR"; }

// Row-aligned image and text embeddings of a retrieval pool.
struct RetrievalIndex {
  Tensor image_embeddings;  // [N,d]
  Tensor text_embeddings;   // [N,d]
  std::vector<int> pair_ids;

  std::size_t size() const { return pair_ids.size(); }

  void validate() const {
    const std::size_t n = pair_ids.size();
    if (image_embeddings.rank() != 2 || text_embeddings.rank() != 2 || image_embeddings.dim(0) != n ||
        text_embeddings.dim(0) != n || image_embeddings.dim(1) != text_embeddings.dim(1))
      throw UsageError("retrieval index: embedding shapes do not match pair ids");
    std::vector<int> ids = pair_ids;
    std::sort(ids.begin(), ids.end());
    if (std::adjacent_find(ids.begin(), ids.end()) != ids.end())
      throw UsageError("retrieval index: duplicate pair id");
  }

  // Candidates searched in a direction: texts for TR, images for IR.
  const Tensor& candidates(Direction d) const {
    return d == Direction::kTextRetrieval ? text_embeddings : image_embeddings;
  }
};

inline double dot_rows(const Tensor& a, std::size_t i, const Tensor& b, std::size_t j) {
  const std::size_t d = a.dim(1);
  const double* pa = a.data().data() + i * d;
  const double* pb = b.data().data() + j * d;
  double s = 0.0;
  for (std::size_t k = 0; k < d; ++k) s += pa[k] * pb[k];
  return s;
}

// 0-based rank of the true candidate for each query. Ties go to the lower pair id.
inline std::vector<std::size_t> true_ranks(const RetrievalIndex& index, const Tensor& queries,
                                           std::span<const int> query_ids, Direction dir) {
  const Tensor& cand = index.candidates(dir);
  if (queries.rank() != 2 || queries.dim(1) != cand.dim(1) || queries.dim(0) != query_ids.size())
    throw UsageError("recall_at_k: query shape " + shape_str(queries.shape()) + " does not match index");
  const std::size_t n = index.size();
  std::vector<std::size_t> ranks;
  ranks.reserve(query_ids.size());
  std::vector<double> scores(n);
  for (std::size_t q = 0; q < query_ids.size(); ++q) {
    std::size_t target = n;
    for (std::size_t j = 0; j < n; ++j) {
      scores[j] = dot_rows(queries, q, cand, j);
      if (index.pair_ids[j] == query_ids[q]) target = j;
    }
    if (target == n) throw UsageError("recall_at_k: query pair id " + std::to_string(query_ids[q]) + " not in index");
    std::size_t rank = 0;
    for (std::size_t j = 0; j < n; ++j)
      if (scores[j] > scores[target] || (scores[j] == scores[target] && index.pair_ids[j] < index.pair_ids[target]))
        ++rank;
    ranks.push_back(rank);
  }
  return ranks;
}

// Fraction of queries whose true pair lands in the top k by cosine similarity
// (rows are unit norm, so dot products are cosines).
inline double recall_at_k(const RetrievalIndex& index, const Tensor& queries, std::span<const int> query_ids,
                          std::size_t k, Direction dir) {
  if (k == 0 || k > index.size())
    throw UsageError("recall_at_k: k=" + std::to_string(k) + " outside [1," + std::to_string(index.size()) + "]");
  if (query_ids.empty()) throw UsageError("recall_at_k: no queries");
  auto ranks = true_ranks(index, queries, query_ids, dir);
  std::size_t hits = 0;
  for (std::size_t r : ranks) hits += r < k;
  return static_cast<double>(hits) / static_cast<double>(ranks.size());
}

// Clean recall: queries are the pool's own embeddings of the other modality.
inline double clean_recall(const RetrievalIndex& index, std::size_t k, Direction dir) {
  const Tensor& q = dir == Direction::kTextRetrieval ? index.image_embeddings : index.text_embeddings;
  return recall_at_k(index, q, index.pair_ids, k, dir);
}

}  // namespace vlpa
