#include <algorithm>
#include <set>

#include "doctest.h"
#include "less/policies.hpp"
#include "policy_oracle.hpp"
#include "test_util.hpp"

using namespace less;
using less::testing::random_causal_probs;
using less::testing::simulate_policy;

namespace {

std::set<std::size_t> positions_of(const SparseCache& c) { return {c.positions().begin(), c.positions().end()}; }

void push(SparseCache& c, std::size_t pos) {
  const std::vector<double> kv(c.head_dim(), static_cast<double>(pos));
  c.append(pos, kv, kv);
}

// Drives a SparseCache through the same steps as build_lm_mask.
std::vector<std::set<std::size_t>> run_cache(Policy p, std::size_t budget, const Mat& scores,
                                            std::vector<std::vector<std::size_t>>* evicted = nullptr) {
  SparseCache c(p, budget, 2);
  std::vector<std::set<std::size_t>> kept;
  for (std::size_t t = 0; t < scores.rows(); ++t) {
    push(c, t);
    std::vector<double> row(c.size());
    double total = 0.0;
    for (std::size_t s = 0; s < c.size(); ++s) total += (row[s] = scores(t, c.positions()[s]));
    for (double& v : row) v /= total;
    const auto d = policy_step(c, row);
    if (evicted) {
      evicted->emplace_back();
      for (const auto& e : d) {
        evicted->back().push_back(e.position);
        CHECK(e.key[0] == static_cast<double>(e.position));
      }
    }
    kept.push_back(positions_of(c));
  }
  return kept;
}

}  // namespace

TEST_CASE("budget_tokens table arithmetic") {
  CHECK(budget_tokens(4096, 0.05) == 204);
  CHECK(budget_tokens(2048, 0.02) == 40);
  CHECK(budget_tokens(4096, 0.02) == 80);
  CHECK(budget_tokens(256, 0.10) == 24);
  CHECK_THROWS(budget_tokens(10, 0.1));
  CHECK_THROWS(budget_tokens(100, 0.0));
  CHECK_THROWS(budget_tokens(100, 1.5));
}

TEST_CASE("parse_policy") {
  CHECK(parse_policy("h2o") == Policy::H2O);
  CHECK(parse_policy("lambda") == Policy::Lambda);
  CHECK(parse_policy("tova") == Policy::TOVA);
  CHECK_THROWS(parse_policy("lru"));
}

TEST_CASE("budget validation per policy") {
  CHECK_THROWS(SparseCache(Policy::H2O, 5, 4));
  CHECK_THROWS(SparseCache(Policy::Lambda, 4, 4));
  CHECK_NOTHROW(SparseCache(Policy::Lambda, 5, 4));
  CHECK_NOTHROW(SparseCache(Policy::TOVA, 3, 4));
}

TEST_CASE("h2o under budget accumulates without eviction") {
  SparseCache c(Policy::H2O, 4, 2);
  push(c, 0);
  push(c, 1);
  CHECK(h2o_step(c, std::vector<double>{0.25, 0.75}).empty());
  push(c, 2);
  CHECK(h2o_step(c, std::vector<double>{0.5, 0.25, 0.25}).empty());
  CHECK(c.acc_score()[0] == 0.75);
  CHECK(c.acc_score()[1] == 1.0);
}

TEST_CASE("h2o evicts min accumulated score outside the recent window") {
  SparseCache c(Policy::H2O, 4, 2);
  for (std::size_t p = 0; p < 5; ++p) push(c, p);
  // Scores for positions 0..2 are 0.9, 0.1, 0.5; recent positions 3 and 4
  // get the lowest scores but are protected.
  const auto d = h2o_step(c, std::vector<double>{0.9, 0.1, 0.5, 0.0, 0.0});
  REQUIRE(d.size() == 1);
  CHECK(d[0].position == 1);
  CHECK(positions_of(c) == std::set<std::size_t>{0, 2, 3, 4});
}

TEST_CASE("h2o tie evicts the older position") {
  SparseCache c(Policy::H2O, 4, 2);
  for (std::size_t p = 0; p < 5; ++p) push(c, p);
  const auto d = h2o_step(c, std::vector<double>{0.3, 0.2, 0.2, 0.15, 0.15});
  REQUIRE(d.size() == 1);
  CHECK(d[0].position == 1);
}

TEST_CASE("evicted slot is refilled in place by the last slot") {
  SparseCache c(Policy::H2O, 4, 2);
  for (std::size_t p = 0; p < 5; ++p) push(c, p);
  h2o_step(c, std::vector<double>{0.9, 0.1, 0.5, 0.0, 0.0});
  CHECK(c.positions() == std::vector<std::size_t>{0, 4, 2, 3});
  CHECK(c.key(1)[0] == 4.0);
}

TEST_CASE("lambda keeps sinks and a sliding window") {
  SparseCache c(Policy::Lambda, 6, 2);
  for (std::size_t t = 0; t <= 10; ++t) {
    push(c, t);
    const auto d = lambda_step(c);
    if (t < 6) {
      CHECK(d.empty());
    } else {
      REQUIRE(d.size() == 1);
      CHECK(d[0].position == t - (6 - kLambdaSinks));
    }
  }
  CHECK(positions_of(c) == std::set<std::size_t>{0, 1, 2, 3, 9, 10});
}

TEST_CASE("tova evicts the current minimum, never the newest") {
  SparseCache c(Policy::TOVA, 3, 2);
  for (std::size_t p = 0; p < 3; ++p) push(c, p);
  CHECK(tova_step(c, std::vector<double>{0.2, 0.3, 0.5}).empty());
  push(c, 3);
  auto d = tova_step(c, std::vector<double>{0.1, 0.7, 0.05, 0.15});
  REQUIRE(d.size() == 1);
  CHECK(d[0].position == 2);

  SparseCache t(Policy::TOVA, 2, 2);
  push(t, 0);
  push(t, 1);
  tova_step(t, std::vector<double>{0.5, 0.5});
  push(t, 2);
  d = tova_step(t, std::vector<double>{0.3, 0.3, 0.4});
  CHECK(d[0].position == 0);  // tie → older
  push(t, 3);
  d = tova_step(t, std::vector<double>{0.4, 0.4, 0.2});  // newest has the minimum
  CHECK(d[0].position != 3);
}

TEST_CASE("step functions reject malformed attention rows") {
  SparseCache c(Policy::TOVA, 3, 2);
  push(c, 0);
  CHECK_THROWS(tova_step(c, std::vector<double>{0.5, 0.5}));
  SparseCache h(Policy::H2O, 4, 2);
  push(h, 0);
  CHECK_THROWS(h2o_step(h, std::vector<double>{}));
  CHECK_THROWS(lambda_step(h));
  CHECK_THROWS(h.append(0, std::vector<double>{0, 0}, std::vector<double>{0, 0}));
}

TEST_CASE("build_lm_mask without eviction is lower triangular") {
  Rng rng(4);
  const Mat s = random_causal_probs(12, rng);
  for (Policy p : {Policy::H2O, Policy::Lambda, Policy::TOVA}) {
    const Mat m = build_lm_mask(p, 12, s);
    for (std::size_t t = 0; t < 12; ++t)
      for (std::size_t j = 0; j < 12; ++j) CHECK(m(t, j) == (j <= t ? 1.0 : 0.0));
  }
}

TEST_CASE("lambda mask rows at steady state") {
  Rng rng(4);
  const Mat m = build_lm_mask(Policy::Lambda, 6, random_causal_probs(10, rng));
  // Query 9 sees the 6 pairs at rest after step 8 plus its own pair.
  std::set<std::size_t> row9;
  for (std::size_t j = 0; j < 10; ++j)
    if (m(9, j) != 0.0) row9.insert(j);
  CHECK(row9 == std::set<std::size_t>{0, 1, 2, 3, 7, 8, 9});
  // Window shape is stationary once t ≥ B.
  for (std::size_t t = 6; t < 10; ++t) {
    std::vector<std::size_t> off;
    for (std::size_t j = 0; j <= t; ++j)
      if (m(t, j) != 0.0) off.push_back(t - j);
    CHECK(off.size() == 7);
    CHECK(off.front() == t);
  }
}

TEST_CASE("build_lm_mask rejects non-causal scores") {
  Mat s(3, 3, 0.1);
  CHECK_THROWS(build_lm_mask(Policy::H2O, 2, s));
}

TEST_CASE("build_lm_mask and SparseCache match the brute-force oracle") {
  Rng rng(1234);
  for (Policy p : {Policy::H2O, Policy::Lambda, Policy::TOVA}) {
    for (std::size_t budget : {6, 8}) {
      for (int trial = 0; trial < 10; ++trial) {
        const std::size_t n = 1 + rng.below(32);
        const Mat s = random_causal_probs(n, rng);
        const auto oracle = simulate_policy(p, budget, s);
        const Mat mask = build_lm_mask(p, budget, s);
        CHECK(mask == less::testing::oracle_mask(oracle));
        std::vector<std::vector<std::size_t>> ev;
        const auto kept = run_cache(p, budget, s, &ev);
        for (std::size_t t = 0; t < n; ++t) {
          CHECK(kept[t] == oracle[t].kept);
          CHECK(ev[t] == oracle[t].evicted);
          CHECK(kept[t].size() <= budget);
          std::size_t row = 0;
          for (std::size_t j = 0; j < n; ++j) row += mask(t, j) != 0.0;
          CHECK(row == std::min(t + 1, budget + 1));
        }
      }
    }
  }
}

TEST_CASE("cache conservation: kept ∪ discarded covers each position exactly once") {
  Rng rng(77);
  for (Policy p : {Policy::H2O, Policy::Lambda, Policy::TOVA}) {
    const Mat s = random_causal_probs(30, rng);
    std::vector<std::vector<std::size_t>> ev;
    const auto kept = run_cache(p, 8, s, &ev);
    std::multiset<std::size_t> seen;
    for (const auto& e : ev) seen.insert(e.begin(), e.end());
    seen.insert(kept.back().begin(), kept.back().end());
    for (std::size_t t = 0; t < 30; ++t) CHECK(seen.count(t) == 1);
    CHECK(seen.size() == 30);
  }
}

TEST_CASE("h2o accumulated scores never decrease for surviving slots") {
  Rng rng(9);
  const Mat s = random_causal_probs(25, rng);
  SparseCache c(Policy::H2O, 6, 2);
  std::map<std::size_t, double> last;
  for (std::size_t t = 0; t < 25; ++t) {
    push(c, t);
    std::vector<double> row(c.size());
    double total = 0.0;
    for (std::size_t i = 0; i < c.size(); ++i) total += (row[i] = s(t, c.positions()[i]));
    for (double& v : row) v /= total;
    h2o_step(c, row);
    for (std::size_t i = 0; i < c.size(); ++i) {
      const std::size_t pos = c.positions()[i];
      if (last.count(pos)) CHECK(c.acc_score()[i] >= last[pos]);
      last[pos] = c.acc_score()[i];
    }
  }
}

TEST_CASE("evict_to_budget reduces a prompt-sized cache") {
  SparseCache c(Policy::H2O, 4, 2);
  for (std::size_t p = 0; p < 8; ++p) push(c, p);
  c.accumulate(std::vector<double>{3, 0.1, 2, 0.5, 1, 1, 1, 1});
  const auto d = evict_to_budget(c, {});
  CHECK(d.size() == 4);
  CHECK(positions_of(c) == std::set<std::size_t>{0, 2, 6, 7});

  SparseCache t(Policy::TOVA, 3, 2);
  for (std::size_t p = 0; p < 6; ++p) push(t, p);
  evict_to_budget(t, std::vector<double>{0.3, 0.05, 0.2, 0.1, 0.15, 0.2});
  CHECK(positions_of(t) == std::set<std::size_t>{0, 2, 5});
}

TEST_CASE("topk_row_mask") {
  const Mat s{{1.0, 0, 0}, {0.6, 0.4, 0}, {0.5, 0.3, 0.2}};
  const Mat m = topk_row_mask(s, 2);
  CHECK(m == Mat{{1, 0, 0}, {1, 1, 0}, {1, 1, 0}});
  CHECK(topk_row_mask(s, 5) == Mat{{1, 0, 0}, {1, 1, 0}, {1, 1, 1}});
  const Mat tie{{1.0, 0, 0, 0}, {0.5, 0.5, 0, 0}, {0.25, 0.5, 0.25, 0}, {0.25, 0.25, 0.25, 0.25}};
  const Mat mt = topk_row_mask(tie, 2);
  CHECK(mt(2, 0) == 1.0);
  CHECK(mt(2, 2) == 0.0);
  CHECK(mt(3, 0) == 1.0);
  CHECK(mt(3, 1) == 1.0);
  CHECK_THROWS(topk_row_mask(s, 0));
}
