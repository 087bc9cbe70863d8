#pragma once

#include <cstddef>
#include <vector>

#include "abc/graph.hpp"
#include "abc/tensor.hpp"

namespace abc {

// Slot layout of one contrastive batch: M candidate slots serving N queries.
// Every query has exactly one positive slot; the remaining slots are mined
// negatives. `owner` covers all M slots (a positive slot is owned by the query
// whose positive it is), which keeps slot bookkeeping total.
struct BatchLayout {
  std::size_t n_queries = 0;                // N
  std::size_t n_candidates = 0;             // M
  std::vector<std::size_t> pos_index;       // per query, its positive's slot
  std::vector<std::size_t> owner;           // per slot, the owning query

  // require_regular additionally demands the pretraining shape: M divisible
  // by N and exactly M/N - 1 mined slots per query.
  void validate(bool require_regular = false) const;
};

// S[i][j] = dot(Q_i, C_j). Rows must be unit-norm within 1e-6; the loss
// contract assumes normalized embeddings and this is where it is enforced.
Tensor similarity_matrix(const Tensor& q, const Tensor& c);
NodeId similarity_node(Graph& g, NodeId q, NodeId c);

// Mean over queries of -log softmax(S_i / tau)[pos(i)], softmax over all M
// candidate slots. Positives of other queries act as in-batch negatives.
double contrastive_loss_value(const Tensor& s, const BatchLayout& layout, double tau);

// Same loss as a graph node, with the temperature carried in log-space so it
// can be a trainable leaf. The per-row max is detached into constants before
// exponentiation; the log-sum-exp value and all gradients are exact.
NodeId contrastive_loss_node(Graph& g, NodeId s, const BatchLayout& layout, NodeId log_tau);

// Builds the similarity matrix and loss from embedding nodes. With
// candidate_grads false the candidate side is re-injected as a constant, so
// backward() never reaches leaves that only feed C.
NodeId loss_with_stop_gradient(Graph& g, NodeId q, NodeId c, const BatchLayout& layout,
                               NodeId log_tau, bool candidate_grads);

}  // namespace abc
