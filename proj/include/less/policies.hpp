#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "less/mat.hpp"

namespace less {

enum class Policy { H2O, Lambda, TOVA };

std::string_view policy_name(Policy p);
Policy parse_policy(std::string_view name);

// Smallest budget each policy can run with.
std::size_t policy_min_budget(Policy p);

// Number of leading "sink" positions Λ-masking always keeps.
inline constexpr std::size_t kLambdaSinks = 4;

// One evicted key/value pair.
struct Evicted {
  std::size_t position = 0;
  std::vector<double> key;
  std::vector<double> value;
};
using DiscardSet = std::vector<Evicted>;

// Eviction-based sparse KV cache. Slots are unordered: an evicted slot is
// overwritten in place by the newest pair, so `positions` is authoritative.
// Holds at most budget+1 pairs transiently (between append and step).
class SparseCache {
 public:
  SparseCache(Policy policy, std::size_t budget, std::size_t head_dim);

  Policy policy() const { return policy_; }
  std::size_t budget() const { return budget_; }
  std::size_t head_dim() const { return dim_; }
  std::size_t size() const { return positions_.size(); }

  std::span<const double> key(std::size_t slot) const { return {keys_.data() + slot * dim_, dim_}; }
  std::span<const double> value(std::size_t slot) const { return {values_.data() + slot * dim_, dim_}; }
  const std::vector<double>& keys() const { return keys_; }
  const std::vector<double>& values() const { return values_; }
  const std::vector<std::size_t>& positions() const { return positions_; }
  const std::vector<double>& acc_score() const { return acc_score_; }

  // Appends (k, v) for `position` as the newest slot. Positions must increase.
  void append(std::size_t position, std::span<const double> k, std::span<const double> v);

  // Floats held at rest: keys and values only.
  std::size_t float_count() const { return 2 * dim_ * size(); }

  // Implementation hooks for the step functions below.
  void accumulate(std::span<const double> attn_row);
  Evicted evict_slot(std::size_t slot);
  std::size_t newest_slot() const { return newest_; }

 private:
  Policy policy_;
  std::size_t budget_;
  std::size_t dim_;
  std::vector<double> keys_;
  std::vector<double> values_;
  std::vector<std::size_t> positions_;
  std::vector<double> acc_score_;
  std::size_t newest_ = 0;
};

// floor(pct·max_len) rounded down to an even count.
std::size_t budget_tokens(std::size_t max_len, double pct);

// Policy steps run after the newest pair was appended and attention over all
// current slots was computed. `attn_row` is that attention restricted to the
// cached slots (slot order, summing to 1). Each returns the pairs evicted.
DiscardSet h2o_step(SparseCache& cache, std::span<const double> attn_row);
DiscardSet lambda_step(SparseCache& cache);
DiscardSet tova_step(SparseCache& cache, std::span<const double> attn_row);
DiscardSet policy_step(SparseCache& cache, std::span<const double> attn_row);

// Prompt-phase reduction: given accumulated scores from the full prompt (H2O)
// or the final prompt query's attention (TOVA), evicts down to the budget.
DiscardSet evict_to_budget(SparseCache& cache, std::span<const double> last_row);

// Boolean S×S mask stored as 0/1 doubles: mask(t, s) = 1 iff key s is cached
// when query t executes, from a sequential simulation of the policy on the
// causal probability matrix `scores`.
Mat build_lm_mask(Policy policy, std::size_t budget, const Mat& scores);

// Per row, marks the k largest causal scores (ties toward smaller column).
Mat topk_row_mask(const Mat& scores, std::size_t k);

}  // namespace less
