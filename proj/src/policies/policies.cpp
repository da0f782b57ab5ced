#include "less/policies.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace less {

std::string_view policy_name(Policy p) {
  switch (p) {
    case Policy::H2O: return "h2o";
    case Policy::Lambda: return "lambda";
    case Policy::TOVA: return "tova";
  }
  return "?";
}

Policy parse_policy(std::string_view name) {
  if (name == "h2o" || name == "H2O") return Policy::H2O;
  if (name == "lambda" || name == "Lambda" || name == "sink") return Policy::Lambda;
  if (name == "tova" || name == "TOVA") return Policy::TOVA;
  throw std::invalid_argument("unknown policy '" + std::string(name) + "'");
}

std::size_t policy_min_budget(Policy p) {
  switch (p) {
    case Policy::H2O: return 2;
    case Policy::Lambda: return kLambdaSinks + 1;
    case Policy::TOVA: return 1;
  }
  return 1;
}

SparseCache::SparseCache(Policy policy, std::size_t budget, std::size_t head_dim)
    : policy_(policy), budget_(budget), dim_(head_dim) {
  if (budget < policy_min_budget(policy)) {
    throw std::invalid_argument(std::string(policy_name(policy)) + " needs budget >= " +
                                std::to_string(policy_min_budget(policy)) + ", got " +
                                std::to_string(budget));
  }
  if (policy == Policy::H2O && budget % 2 != 0) {
    throw std::invalid_argument("h2o budget must be even, got " + std::to_string(budget));
  }
  keys_.reserve((budget + 1) * dim_);
  values_.reserve((budget + 1) * dim_);
  positions_.reserve(budget + 1);
  acc_score_.reserve(budget + 1);
}

void SparseCache::append(std::size_t position, std::span<const double> k, std::span<const double> v) {
  if (k.size() != dim_ || v.size() != dim_) {
    throw std::invalid_argument("SparseCache::append: expected head_dim " + std::to_string(dim_));
  }
  if (!positions_.empty() && position <= positions_[newest_]) {
    throw std::invalid_argument("SparseCache::append: positions must increase");
  }
  keys_.insert(keys_.end(), k.begin(), k.end());
  values_.insert(values_.end(), v.begin(), v.end());
  positions_.push_back(position);
  acc_score_.push_back(0.0);
  newest_ = positions_.size() - 1;
}

void SparseCache::accumulate(std::span<const double> attn_row) {
  if (attn_row.size() != size()) {
    throw std::invalid_argument("attention row has " + std::to_string(attn_row.size()) +
                                " entries for " + std::to_string(size()) + " cached slots");
  }
  for (std::size_t i = 0; i < attn_row.size(); ++i) acc_score_[i] += attn_row[i];
}

Evicted SparseCache::evict_slot(std::size_t slot) {
  Evicted out;
  out.position = positions_[slot];
  out.key.assign(keys_.begin() + slot * dim_, keys_.begin() + (slot + 1) * dim_);
  out.value.assign(values_.begin() + slot * dim_, values_.begin() + (slot + 1) * dim_);
  const std::size_t last = positions_.size() - 1;
  if (slot != last) {
    std::copy_n(keys_.begin() + last * dim_, dim_, keys_.begin() + slot * dim_);
    std::copy_n(values_.begin() + last * dim_, dim_, values_.begin() + slot * dim_);
    positions_[slot] = positions_[last];
    acc_score_[slot] = acc_score_[last];
    if (newest_ == last) newest_ = slot;
  }
  keys_.resize(last * dim_);
  values_.resize(last * dim_);
  positions_.pop_back();
  acc_score_.pop_back();
  return out;
}

std::size_t budget_tokens(std::size_t max_len, double pct) {
  if (!(pct > 0.0 && pct <= 1.0)) throw std::invalid_argument("budget fraction must be in (0, 1]");
  // The epsilon keeps products like 0.29·100 from flooring to 28.
  auto n = static_cast<std::size_t>(std::floor(pct * static_cast<double>(max_len) + 1e-9));
  n -= n % 2;
  if (n < 2) {
    throw std::invalid_argument("budget of " + std::to_string(n) + " tokens is below the minimum of 2");
  }
  return n;
}

namespace {

constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();

// Slot with the smallest score among `eligible`, ties toward the older position.
template <typename Eligible>
std::size_t argmin_slot(const SparseCache& c, std::span<const double> score, Eligible eligible) {
  std::size_t best = kNone;
  for (std::size_t s = 0; s < c.size(); ++s) {
    if (!eligible(s)) continue;
    if (best == kNone || score[s] < score[best] ||
        (score[s] == score[best] && c.positions()[s] < c.positions()[best])) {
      best = s;
    }
  }
  return best;
}

// Positions strictly below this value are outside the B/2 most recent.
std::size_t recent_cutoff(const SparseCache& c) {
  const std::size_t window = c.budget() / 2;
  if (c.size() <= window) return 0;
  std::vector<std::size_t> pos = c.positions();
  std::nth_element(pos.begin(), pos.begin() + static_cast<std::ptrdiff_t>(window - 1), pos.end(),
                   std::greater<>());
  return pos[window - 1];
}

std::size_t h2o_victim(const SparseCache& c) {
  const std::size_t cutoff = recent_cutoff(c);
  return argmin_slot(c, c.acc_score(), [&](std::size_t s) { return c.positions()[s] < cutoff; });
}

std::size_t lambda_victim(const SparseCache& c) {
  std::size_t best = kNone;
  for (std::size_t s = 0; s < c.size(); ++s) {
    const std::size_t p = c.positions()[s];
    if (p < kLambdaSinks) continue;
    if (best == kNone || p < c.positions()[best]) best = s;
  }
  return best;
}

std::size_t tova_victim(const SparseCache& c, std::span<const double> row) {
  return argmin_slot(c, row, [&](std::size_t s) { return s != c.newest_slot(); });
}

void check_row(const SparseCache& c, std::span<const double> row) {
  if (row.size() != c.size()) {
    throw std::invalid_argument("attention row has " + std::to_string(row.size()) + " entries for " +
                                std::to_string(c.size()) + " cached slots");
  }
}

}  // namespace

DiscardSet h2o_step(SparseCache& cache, std::span<const double> attn_row) {
  if (cache.policy() != Policy::H2O) throw std::invalid_argument("h2o_step on non-H2O cache");
  cache.accumulate(attn_row);
  DiscardSet out;
  if (cache.size() > cache.budget()) out.push_back(cache.evict_slot(h2o_victim(cache)));
  return out;
}

DiscardSet lambda_step(SparseCache& cache) {
  if (cache.policy() != Policy::Lambda) throw std::invalid_argument("lambda_step on non-Lambda cache");
  DiscardSet out;
  if (cache.size() > cache.budget()) out.push_back(cache.evict_slot(lambda_victim(cache)));
  return out;
}

DiscardSet tova_step(SparseCache& cache, std::span<const double> attn_row) {
  if (cache.policy() != Policy::TOVA) throw std::invalid_argument("tova_step on non-TOVA cache");
  check_row(cache, attn_row);
  DiscardSet out;
  if (cache.size() > cache.budget()) out.push_back(cache.evict_slot(tova_victim(cache, attn_row)));
  return out;
}

DiscardSet policy_step(SparseCache& cache, std::span<const double> attn_row) {
  switch (cache.policy()) {
    case Policy::H2O: return h2o_step(cache, attn_row);
    case Policy::Lambda: return lambda_step(cache);
    case Policy::TOVA: return tova_step(cache, attn_row);
  }
  return {};
}

DiscardSet evict_to_budget(SparseCache& cache, std::span<const double> last_row) {
  DiscardSet out;
  if (cache.policy() == Policy::TOVA) check_row(cache, last_row);
  std::vector<double> row(last_row.begin(), last_row.end());
  while (cache.size() > cache.budget()) {
    std::size_t victim = kNone;
    switch (cache.policy()) {
      case Policy::H2O: victim = h2o_victim(cache); break;
      case Policy::Lambda: victim = lambda_victim(cache); break;
      case Policy::TOVA: victim = tova_victim(cache, row); break;
    }
    if (!row.empty()) {
      row[victim] = row.back();
      row.pop_back();
    }
    out.push_back(cache.evict_slot(victim));
  }
  return out;
}

Mat build_lm_mask(Policy policy, std::size_t budget, const Mat& scores) {
  const std::size_t n = scores.rows();
  if (scores.cols() != n) throw std::invalid_argument("build_lm_mask: scores must be square");
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t s = t + 1; s < n; ++s)
      if (scores(t, s) != 0.0) {
        throw std::invalid_argument("build_lm_mask: scores are not causal (entry " + std::to_string(t) +
                                    "," + std::to_string(s) + ")");
      }

  SparseCache cache(policy, budget, 0);
  Mat mask(n, n);
  std::vector<double> row;
  for (std::size_t t = 0; t < n; ++t) {
    cache.append(t, {}, {});
    row.resize(cache.size());
    double total = 0.0;
    for (std::size_t s = 0; s < cache.size(); ++s) {
      const std::size_t p = cache.positions()[s];
      mask(t, p) = 1.0;
      row[s] = scores(t, p);
      total += row[s];
    }
    if (total > 0.0)
      for (double& v : row) v /= total;
    policy_step(cache, row);
  }
  return mask;
}

Mat topk_row_mask(const Mat& scores, std::size_t k) {
  if (k == 0) throw std::invalid_argument("topk_row_mask: k must be >= 1");
  Mat mask(scores.rows(), scores.cols());
  std::vector<std::size_t> idx;
  for (std::size_t t = 0; t < scores.rows(); ++t) {
    const std::size_t avail = std::min(t + 1, scores.cols());
    idx.resize(avail);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    const std::size_t take = std::min(k, avail);
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(take), idx.end(),
                      [&](std::size_t a, std::size_t b) {
                        if (scores(t, a) != scores(t, b)) return scores(t, a) > scores(t, b);
                        return a < b;
                      });
    for (std::size_t i = 0; i < take; ++i) mask(t, idx[i]) = 1.0;
  }
  return mask;
}

}  // namespace less
