#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "less/lesscore.hpp"

namespace less {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

Mat as_row(std::span<const double> v) { return Mat::row_vector(v); }

void check_state(const FeatureMap& fm, const LowRankState& s) {
  const std::size_t r = rank_of(fm), d = head_dim_of(fm);
  if (s.h.rows() != r || s.h.cols() != d || s.z.rows() != 1 || s.z.cols() != r) {
    throw std::invalid_argument("low-rank state " + s.h.shape_str() + "/" + s.z.shape_str() +
                                " does not match kernel (R=" + std::to_string(r) + ", D=" + std::to_string(d) + ")");
  }
}

void fold(LowRankState& state, std::span<const double> psi_k, std::span<const double> v) {
  const std::size_t d = v.size();
  for (std::size_t r = 0; r < psi_k.size(); ++r) {
    const double w = psi_k[r];
    double* hrow = state.h.row(r).data();
    for (std::size_t j = 0; j < d; ++j) hrow[j] += w * v[j];
    state.z[r] += w;
  }
}

}  // namespace

PhaseTimes& PhaseTimes::operator+=(const PhaseTimes& o) {
  eviction += o.eviction;
  kernels += o.kernels;
  synthesis += o.synthesis;
  state_update += o.state_update;
  return *this;
}

LowRankState LowRankState::zeros(std::size_t rank, std::size_t head_dim) {
  return LowRankState{Mat(rank, head_dim), Mat(1, rank)};
}

void absorb(const FeatureMap& fm, LowRankState& state, const DiscardSet& discards) {
  check_state(fm, state);
  const std::size_t d = head_dim_of(fm);
  for (const auto& e : discards) {
    if (e.key.size() != d || e.value.size() != d) {
      throw std::invalid_argument("discarded pair has dims (" + std::to_string(e.key.size()) + ", " +
                                  std::to_string(e.value.size()) + "), expected " + std::to_string(d));
    }
    const Mat pk = psi(fm, as_row(e.key));
    fold(state, pk.row(0), e.value);
  }
}

LowRankState update_state(const FeatureMap& fm, const LowRankState& state, const DiscardSet& discards) {
  LowRankState next = state;
  absorb(fm, next, discards);
  return next;
}

namespace {

Synthesis synthesize(const FeatureMap& fm, std::span<const double> q, const LowRankState& state,
                     std::span<const double> keys, std::span<const double> values, PhaseTimes* times) {
  const std::size_t d = head_dim_of(fm);
  if (q.size() != d) throw std::invalid_argument("synth_attention: query has wrong head_dim");
  if (keys.size() != values.size() || keys.size() % d != 0 || keys.empty()) {
    throw std::invalid_argument("synth_attention: cached keys/values malformed");
  }
  check_state(fm, state);
  const std::size_t n = keys.size() / d;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

  Synthesis out;
  out.slot_prob.resize(n);
  out.sparse_prob.resize(n);
  out.output.assign(d, 0.0);

  double shift = 0.0;
  for (std::size_t s = 0; s < n; ++s) {
    double l = 0.0;
    for (std::size_t j = 0; j < d; ++j) l += q[j] * keys[s * d + j];
    l *= inv_sqrt_d;
    out.slot_prob[s] = l;
    shift = std::max(shift, l);
  }
  double sum_e = 0.0;
  for (std::size_t s = 0; s < n; ++s) {
    const double e = std::exp(out.slot_prob[s] - shift);
    out.slot_prob[s] = e;
    sum_e += e;
    const double* vrow = values.data() + s * d;
    for (std::size_t j = 0; j < d; ++j) out.output[j] += e * vrow[j];
  }

  auto t0 = Clock::now();
  const Mat phi_q = phi(fm, as_row(q));
  if (times) times->kernels += seconds_since(t0);

  t0 = Clock::now();
  const double damp = std::exp(-shift);
  const std::size_t r = rank_of(fm);
  double lr_den = 0.0;
  for (std::size_t i = 0; i < r; ++i) {
    const double w = phi_q[i] * damp;
    if (w == 0.0) continue;
    lr_den += w * state.z[i];
    const double* hrow = state.h.row(i).data();
    for (std::size_t j = 0; j < d; ++j) out.output[j] += w * hrow[j];
  }
  const double den = sum_e + lr_den;
  if (!(den > 0.0) || !std::isfinite(den)) throw std::domain_error("synth_attention: degenerate denominator");
  for (double& o : out.output) o /= den;
  for (std::size_t s = 0; s < n; ++s) {
    out.sparse_prob[s] = out.slot_prob[s] / sum_e;
    out.slot_prob[s] /= den;
  }
  out.lowrank_mass = lr_den / den;
  if (times) times->synthesis += seconds_since(t0);
  return out;
}

}  // namespace

Synthesis synth_attention(const FeatureMap& fm, std::span<const double> q, const LowRankState& state,
                          std::span<const double> keys, std::span<const double> values) {
  return synthesize(fm, q, state, keys, values, nullptr);
}

Synthesis synth_attention(const FeatureMap& fm, std::span<const double> q, const LowRankState& state,
                          const Mat& keys, const Mat& values) {
  if (keys.rows() != values.rows()) throw std::invalid_argument("synth_attention: K'/V' row counts differ");
  return synthesize(fm, q, state, keys.data(), values.data(), nullptr);
}

LessCache::LessCache(Policy policy, std::size_t budget, std::size_t head_dim, std::size_t rank)
    : sparse(policy, budget, head_dim), state(LowRankState::zeros(rank, head_dim)) {}

Synthesis less_decode_step(const FeatureMap& fm, LessCache& cache, std::size_t position,
                           std::span<const double> q, std::span<const double> k, std::span<const double> v,
                           PhaseTimes* times) {
  cache.sparse.append(position, k, v);
  Synthesis syn = synthesize(fm, q, cache.state, cache.sparse.keys(), cache.sparse.values(), times);

  auto t0 = Clock::now();
  DiscardSet discards = policy_step(cache.sparse, syn.sparse_prob);
  if (times) times->eviction += seconds_since(t0);

  for (const auto& e : discards) {
    t0 = Clock::now();
    const Mat pk = psi(fm, as_row(e.key));
    if (times) times->kernels += seconds_since(t0);
    t0 = Clock::now();
    fold(cache.state, pk.row(0), e.value);
    if (times) times->state_update += seconds_since(t0);
  }
  return syn;
}

void validate_mask(const Mat& mask) {
  const std::size_t n = mask.rows();
  if (mask.cols() != n) throw std::invalid_argument("mask must be square, got " + mask.shape_str());
  for (std::size_t t = 0; t < n; ++t) {
    if (mask(t, t) == 0.0) throw std::invalid_argument("mask diagonal must be true (row " + std::to_string(t) + ")");
    for (std::size_t s = t + 1; s < n; ++s)
      if (mask(t, s) != 0.0) {
        throw std::invalid_argument("mask is not causal (entry " + std::to_string(t) + "," + std::to_string(s) + ")");
      }
  }
}

MaskedScores MaskedScores::build(const Mat& q, const Mat& k, const Mat& mask) {
  validate_mask(mask);
  const std::size_t n = q.rows(), d = q.cols();
  if (k.rows() != n || k.cols() != d || mask.rows() != n) {
    throw std::invalid_argument("masked_attention: Q/K/mask shapes disagree");
  }
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  const Mat logits = matmul_nt(q, k);
  MaskedScores ms{Mat(n, n), Mat(n, n), std::vector<double>(n)};
  for (std::size_t i = 0; i < n; ++i) {
    double shift = 0.0;
    for (std::size_t s = 0; s <= i; ++s)
      if (mask(i, s) != 0.0) shift = std::max(shift, logits(i, s) * inv_sqrt_d);
    for (std::size_t s = 0; s <= i; ++s) {
      if (mask(i, s) != 0.0)
        ms.exp_part(i, s) = std::exp(logits(i, s) * inv_sqrt_d - shift);
      else
        ms.lowrank_sel(i, s) = 1.0;
    }
    ms.damp[i] = std::exp(-shift);
  }
  return ms;
}

MaskedAttentionVars masked_attention(ad::Tape& t, ad::Var phi_q, ad::Var psi_k, const MaskedScores& scores,
                                     ad::Var v) {
  ad::Var kernel_scores = ad::matmul_nt(t, phi_q, psi_k);
  ad::Var evicted = ad::scale_rows(t, ad::mul(t, kernel_scores, t.constant(scores.lowrank_sel)), scores.damp);
  ad::Var weights = ad::add(t, evicted, t.constant(scores.exp_part));
  ad::Var probs = ad::row_normalize(t, weights);
  ad::Var out = ad::matmul(t, probs, v);
  return {out, probs};
}

MaskedAttentionVars masked_attention(ad::Tape& t, ad::Var phi_q, ad::Var psi_k, const Mat& q, const Mat& k,
                                     const Mat& v, const Mat& mask) {
  if (v.rows() != q.rows() || v.cols() != q.cols()) throw std::invalid_argument("masked_attention: V shape disagrees");
  return masked_attention(t, phi_q, psi_k, MaskedScores::build(q, k, mask), t.constant(v));
}

MaskedAttention masked_attention(const FeatureMap& fm, const Mat& q, const Mat& k, const Mat& v,
                                 const Mat& mask) {
  ad::Tape t;
  ad::Var pq = t.constant(phi(fm, q));
  ad::Var pk = t.constant(psi(fm, k));
  auto vars = masked_attention(t, pq, pk, q, k, v, mask);
  return {t.value(vars.output), t.value(vars.probs)};
}

MaskedAttention sparse_attention(const Mat& q, const Mat& k, const Mat& v, const Mat& mask) {
  validate_mask(mask);
  const std::size_t n = q.rows(), d = q.cols();
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  MaskedAttention res{Mat(n, d), Mat(n, n)};
  std::vector<double> row;
  std::vector<std::size_t> cols;
  for (std::size_t i = 0; i < n; ++i) {
    row.clear();
    cols.clear();
    for (std::size_t s = 0; s <= i; ++s) {
      if (mask(i, s) == 0.0) continue;
      double l = 0.0;
      for (std::size_t j = 0; j < d; ++j) l += q(i, j) * k(s, j);
      row.push_back(l * inv_sqrt_d);
      cols.push_back(s);
    }
    softmax_inplace(row);
    for (std::size_t c = 0; c < cols.size(); ++c) {
      res.probs(i, cols[c]) = row[c];
      for (std::size_t j = 0; j < d; ++j) res.output(i, j) += row[c] * v(cols[c], j);
    }
  }
  return res;
}

}  // namespace less
