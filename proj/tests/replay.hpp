#pragma once

#include <cmath>

#include "less/lesscore.hpp"
#include "less/policies.hpp"

namespace less::testing {

inline Mat causal_probs(const Mat& q, const Mat& k) {
  const std::size_t n = q.rows();
  Mat s = scale(matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(q.cols())));
  for (std::size_t i = 0; i < n; ++i) {
    softmax_inplace(s.row(i).subspan(0, i + 1));
    for (std::size_t j = i + 1; j < n; ++j) s(i, j) = 0.0;
  }
  return s;
}

struct ReplayResult {
  double max_output_diff = 0.0;  // sequential vs batch outputs
  double max_prob_diff = 0.0;    // slot probabilities vs batch probability rows
  double max_norm_error = 0.0;   // |Σ slot_prob + lowrank_mass − 1|
  double max_mass_diff = 0.0;    // low-rank mass vs batch mass at evicted columns
  Mat mask;
};

// Runs Algorithm-1 decoding token by token and the masked batch formulation
// on the same inputs, using the sequence's own causal attention for the policy.
inline ReplayResult replay_vs_batch(const FeatureMap& fm, Policy policy, std::size_t budget, const Mat& q,
                                    const Mat& k, const Mat& v) {
  const std::size_t n = q.rows();
  ReplayResult r;
  r.mask = build_lm_mask(policy, budget, causal_probs(q, k));
  const MaskedAttention batch = masked_attention(fm, q, k, v, r.mask);
  LessCache cache(policy, budget, q.cols(), rank_of(fm));
  for (std::size_t t = 0; t < n; ++t) {
    const auto positions = [&] {
      // Positions attended by step t: cache contents after append.
      auto p = cache.sparse.positions();
      p.push_back(t);
      return p;
    }();
    const Synthesis syn = less_decode_step(fm, cache, t, q.row(t), k.row(t), v.row(t));
    for (std::size_t j = 0; j < q.cols(); ++j)
      r.max_output_diff = std::max(r.max_output_diff, std::abs(syn.output[j] - batch.output(t, j)));
    double total = syn.lowrank_mass, in_mask_batch = 0.0;
    for (std::size_t s = 0; s < syn.slot_prob.size(); ++s) {
      total += syn.slot_prob[s];
      const std::size_t pos = positions[s];
      r.max_prob_diff = std::max(r.max_prob_diff, std::abs(syn.slot_prob[s] - batch.probs(t, pos)));
      in_mask_batch += batch.probs(t, pos);
    }
    double row_total = 0.0;
    for (std::size_t s = 0; s <= t; ++s) row_total += batch.probs(t, s);
    r.max_mass_diff = std::max(r.max_mass_diff, std::abs(syn.lowrank_mass - (row_total - in_mask_batch)));
    r.max_norm_error = std::max(r.max_norm_error, std::abs(total - 1.0));
  }
  return r;
}

}  // namespace less::testing
