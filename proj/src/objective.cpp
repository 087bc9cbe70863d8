#include "abc/objective.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace abc {
namespace {

void check_unit_rows(const Tensor& t, const char* which) {
  if (t.rank() != 2) throw std::invalid_argument(std::string(which) + " must be rank 2, got " + shape_str(t.shape));
  for (std::size_t i = 0; i < t.shape[0]; ++i) {
    double sq = 0.0;
    for (std::size_t j = 0; j < t.shape[1]; ++j) sq += t.at(i, j) * t.at(i, j);
    if (std::abs(std::sqrt(sq) - 1.0) > 1e-6)
      throw std::invalid_argument(std::string(which) + " row " + std::to_string(i) +
                                  " is not unit-norm (|x| = " + std::to_string(std::sqrt(sq)) + ")");
  }
}

}  // namespace

void BatchLayout::validate(bool require_regular) const {
  const std::size_t n = n_queries, m = n_candidates;
  if (n == 0 || m < n) throw std::invalid_argument("batch layout needs 1 <= N <= M");
  if (pos_index.size() != n) throw std::invalid_argument("pos_index must have one entry per query");
  if (owner.size() != m) throw std::invalid_argument("owner must have one entry per candidate slot");
  std::vector<uint8_t> seen(m, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t p = pos_index[i];
    if (p >= m) throw std::invalid_argument("pos_index out of range");
    if (seen[p]++) throw std::invalid_argument("pos_index must be injective");
    if (owner[p] != i) throw std::invalid_argument("a positive slot must be owned by its query");
  }
  for (std::size_t j = 0; j < m; ++j)
    if (owner[j] >= n) throw std::invalid_argument("owner out of range");
  if (require_regular) {
    if (m % n != 0) throw std::invalid_argument("pretraining batches need M divisible by N");
    const std::size_t per_query = m / n - 1;
    std::vector<std::size_t> mined(n, 0);
    for (std::size_t j = 0; j < m; ++j)
      if (!seen[j]) ++mined[owner[j]];
    for (std::size_t i = 0; i < n; ++i)
      if (mined[i] != per_query)
        throw std::invalid_argument("query " + std::to_string(i) + " owns " + std::to_string(mined[i]) +
                                    " mined negatives, expected " + std::to_string(per_query));
  }
}

Tensor similarity_matrix(const Tensor& q, const Tensor& c) {
  check_unit_rows(q, "queries");
  check_unit_rows(c, "candidates");
  if (q.shape[1] != c.shape[1])
    throw std::invalid_argument("query and candidate widths disagree: " + shape_str(q.shape) + " vs " +
                                shape_str(c.shape));
  Tensor s = Tensor::zeros({q.shape[0], c.shape[0]});
  for (std::size_t i = 0; i < q.shape[0]; ++i)
    for (std::size_t j = 0; j < c.shape[0]; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < q.shape[1]; ++k) acc += q.at(i, k) * c.at(j, k);
      s.at(i, j) = acc;
    }
  return s;
}

NodeId similarity_node(Graph& g, NodeId q, NodeId c) {
  check_unit_rows(g.value(q), "queries");
  check_unit_rows(g.value(c), "candidates");
  return g.matmul(q, c, false, true);
}

double contrastive_loss_value(const Tensor& s, const BatchLayout& layout, double tau) {
  if (!(tau > 0.0)) throw std::domain_error("temperature must be positive");
  layout.validate();
  if (s.rank() != 2 || s.shape[0] != layout.n_queries || s.shape[1] != layout.n_candidates)
    throw std::invalid_argument("similarity matrix shape " + shape_str(s.shape) + " does not match layout");
  double total = 0.0;
  for (std::size_t i = 0; i < layout.n_queries; ++i) {
    double row_max = s.at(i, 0);
    for (std::size_t j = 1; j < layout.n_candidates; ++j) row_max = std::max(row_max, s.at(i, j));
    double denom = 0.0;
    for (std::size_t j = 0; j < layout.n_candidates; ++j)
      denom += std::exp((s.at(i, j) - row_max) / tau);
    total += std::log(denom) - (s.at(i, layout.pos_index[i]) - row_max) / tau;
  }
  return total / static_cast<double>(layout.n_queries);
}

NodeId contrastive_loss_node(Graph& g, NodeId s, const BatchLayout& layout, NodeId log_tau) {
  layout.validate();
  const Tensor& sv = g.value(s);
  if (sv.rank() != 2 || sv.shape[0] != layout.n_queries || sv.shape[1] != layout.n_candidates)
    throw std::invalid_argument("similarity matrix shape " + shape_str(sv.shape) + " does not match layout");
  if (!g.value(log_tau).is_scalar()) throw std::invalid_argument("log_tau must be scalar");
  const std::size_t n = layout.n_queries, m = layout.n_candidates;
  const double m_d = static_cast<double>(m);

  NodeId inv_tau = g.exp(g.scalar_mul(log_tau, -1.0));
  NodeId x = g.mul(s, inv_tau);  // S / tau, |entries| up to ~1/tau

  // Row maxima as detached constants: subtracting a constant leaves both the
  // log-sum-exp value and its gradient unchanged, but keeps exp() finite even
  // when tau collapses.
  const Tensor& xv = g.value(x);
  Tensor max_broad = Tensor::zeros({n, m});
  Tensor max_vec = Tensor::zeros({n});
  for (std::size_t i = 0; i < n; ++i) {
    double row_max = xv.at(i, 0);
    for (std::size_t j = 1; j < m; ++j) row_max = std::max(row_max, xv.at(i, j));
    max_vec.at(i) = row_max;
    for (std::size_t j = 0; j < m; ++j) max_broad.at(i, j) = row_max;
  }

  NodeId shifted = g.sub(x, g.constant(std::move(max_broad)));
  NodeId sum_exp = g.scalar_mul(g.mean_axis(g.exp(shifted), 1), m_d);
  NodeId lse = g.add(g.log(sum_exp), g.constant(std::move(max_vec)));

  Tensor onehot = Tensor::zeros({n, m});
  for (std::size_t i = 0; i < n; ++i) onehot.at(i, layout.pos_index[i]) = 1.0;
  NodeId x_pos = g.scalar_mul(g.mean_axis(g.mul(x, g.constant(std::move(onehot))), 1), m_d);

  return g.mean_axis(g.sub(lse, x_pos), 0);
}

NodeId loss_with_stop_gradient(Graph& g, NodeId q, NodeId c, const BatchLayout& layout,
                               NodeId log_tau, bool candidate_grads) {
  NodeId cand = candidate_grads ? c : g.constant(g.value(c));
  return contrastive_loss_node(g, similarity_node(g, q, cand), layout, log_tau);
}

}  // namespace abc
