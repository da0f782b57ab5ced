#include <Eigen/Dense>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "fixtures.hpp"
#include "less/evaluation.hpp"
#include "less/trainer.hpp"
#include "test_util.hpp"

using namespace less;
using less::testing::corpus;
using less::testing::small_model;

namespace {

std::span<const std::uint8_t> heldout() { return split_corpus(corpus(), 0.1).second; }

KernelBank random_bank(const ModelConfig& c, std::size_t rank, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<FeatureMap> maps;
  for (std::size_t i = 0; i < c.n_layers * c.n_heads; ++i) {
    auto p = KernelParams::init(c.head_dim(), 16, rank, rng);
    p.psi_s1 = p.psi_s2 = p.psi_s3 = 1.0;
    maps.emplace_back(p);
  }
  return KernelBank(c.n_layers, c.n_heads, std::move(maps));
}

// Kernels for the small fixture model trained at 10% H2O.
const KernelBank& trained_bank() {
  static const KernelBank bank = [] {
    const auto& m = small_model();
    const AttnTrace tr = collect_traces(m, split_corpus(corpus(), 0.1).first, 16, m.config.context_len, 21);
    TrainConfig cfg;
    cfg.hidden = 32;
    return bank_from_results(train_all(tr, {0, 1}, cfg, 2), m.config.n_layers, m.config.n_heads);
  }();
  return bank;
}

Mat read_csv_matrix(const std::filesystem::path& p) {
  std::ifstream is(p);
  std::vector<std::vector<double>> rows;
  for (std::string line; std::getline(is, line);) {
    std::vector<double> r;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) r.push_back(std::stod(cell));
    rows.push_back(std::move(r));
  }
  Mat m(rows.size(), rows.empty() ? 0 : rows[0].size());
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j) m(i, j) = rows[i][j];
  return m;
}

std::string first_line(const std::filesystem::path& p) {
  std::ifstream is(p);
  std::string s;
  std::getline(is, s);
  return s;
}

std::vector<double> gram_relative_sv(const Mat& a) {
  Eigen::MatrixXd e(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) e(i, j) = a(i, j);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(e.transpose() * e);
  std::vector<double> s;
  for (Eigen::Index i = es.eigenvalues().size() - 1; i >= 0; --i) s.push_back(std::sqrt(std::max(0.0, es.eigenvalues()(i))));
  const double top = s.front();
  for (double& v : s) v /= top;
  return s;
}

}  // namespace

TEST_CASE("hellinger basics") {
  const std::vector<double> a{1.0, 0.0}, b{0.0, 1.0}, u{0.5, 0.5};
  CHECK(hellinger(a, a) == 0.0);
  CHECK(hellinger(a, b) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(hellinger(a, u) == doctest::Approx(std::sqrt((2.0 - std::sqrt(2.0)) / 2.0)).epsilon(1e-14));
  CHECK(hellinger(a, u) == doctest::Approx(0.5412).epsilon(1e-4));
  CHECK_THROWS_AS(hellinger(std::vector<double>{0.5, 0.4}, u), std::invalid_argument);
  CHECK_THROWS_AS(hellinger(std::vector<double>{1.5, -0.5}, u), std::invalid_argument);
  CHECK_THROWS_AS(hellinger(std::vector<double>{1.0}, u), std::invalid_argument);
}

TEST_CASE("hellinger is a symmetric metric on random rows") {
  Rng rng(17);
  auto row = [&](std::size_t n) {
    std::vector<double> p(n);
    double s = 0;
    for (double& v : p) s += (v = rng.uniform() < 0.2 ? 0.0 : rng.uniform());
    if (s == 0) p[0] = s = 1;
    for (double& v : p) v /= s;
    return p;
  };
  for (int it = 0; it < 200; ++it) {
    const std::size_t n = 2 + it % 9;
    const auto p = row(n), q = row(n), r = row(n);
    const double pq = hellinger(p, q);
    CHECK(pq == hellinger(q, p));
    CHECK(pq >= 0.0);
    CHECK(pq <= 1.0);
    CHECK(hellinger(p, r) <= pq + hellinger(q, r) + 1e-12);
  }
}

TEST_CASE("attention maps with nothing evicted are exact") {
  const auto& m = small_model();
  const auto tokens = heldout().first(m.config.context_len);
  const KernelBank bank = random_bank(m.config, 8, 1);
  const auto hl = layerwise_hellinger(m, bank, Policy::H2O, m.config.context_len, heldout(), 2);
  for (std::size_t l = 0; l < m.config.n_layers; ++l) {
    CHECK(hl.sparse[l] < 1e-7);
    CHECK(hl.less[l] < 1e-7);
  }
  CHECK(hl.rows == 2 * m.config.n_heads * m.config.context_len);
  for (const auto& hm : attention_maps(m, bank, Policy::TOVA, m.config.context_len, tokens))
    CHECK(max_abs_diff(hm.less, hm.full) < 1e-12);
}

TEST_CASE("zeroed kernels make LESS distances equal sparse-only") {
  const auto& c = small_model().config;
  const auto bank = KernelBank::zeros(c.n_layers, c.n_heads, c.head_dim(), 16, 8);
  const auto hl = layerwise_hellinger(small_model(), bank, Policy::H2O, 12, heldout(), 2);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    CHECK(std::abs(hl.less[l] - hl.sparse[l]) < 1e-9);
    CHECK(hl.sparse[l] > 0.0);
  }
  CHECK_THROWS_AS(layerwise_hellinger(small_model(), KernelBank{}, Policy::H2O, 12, heldout(), 1),
                  std::invalid_argument);
}

TEST_CASE("trained kernels bring attention closer to full in every layer") {
  const auto& m = small_model();
  const auto budget = budget_tokens(m.config.context_len, 0.1);
  const auto hl = layerwise_hellinger(m, trained_bank(), Policy::H2O, budget, heldout(), 4);
  for (std::size_t l = 0; l < m.config.n_layers; ++l) {
    MESSAGE("layer " << l << " sparse " << hl.sparse[l] << " less " << hl.less[l]);
    CHECK(hl.less[l] <= hl.sparse[l]);
  }
}

TEST_CASE("residual svd report") {
  const auto& m = small_model();
  const std::size_t S = m.config.context_len;
  SUBCASE("keeping every key leaves no residual") {
    for (const auto& cv : residual_svd_report(m, heldout(), S, 1))
      for (double v : cv.delta_rel) CHECK(v == 0.0);
  }
  SUBCASE("curves are descending, start at one and match a Gram oracle") {
    const auto curves = residual_svd_report(m, heldout(), 8, 1);
    REQUIRE(curves.size() == m.config.n_layers * m.config.n_heads);
    const auto fw = forward_full(m, heldout().first(S));
    for (const auto& cv : curves) {
      REQUIRE(cv.a_rel.size() == m.config.head_dim());
      CHECK(cv.a_rel[0] == doctest::Approx(1.0));
      CHECK(cv.delta_rel[0] == doctest::Approx(1.0));
      for (std::size_t i = 1; i < cv.a_rel.size(); ++i) {
        CHECK(cv.a_rel[i] <= cv.a_rel[i - 1] + 1e-15);
        CHECK(cv.delta_rel[i] <= cv.delta_rel[i - 1] + 1e-15);
        CHECK(cv.delta_rel[i] >= 0.0);
      }
      const auto& rec = fw.layers[cv.layer];
      const Mat a = matmul(head_attention_probs(rec.q[cv.head], rec.k[cv.head]), rec.v[cv.head]);
      const auto oracle = gram_relative_sv(a);
      for (std::size_t i = 0; i < oracle.size(); ++i) CHECK(std::abs(cv.a_rel[i] - oracle[i]) < 1e-8);
    }
  }
  SUBCASE("csv") {
    const auto path = std::filesystem::temp_directory_path() / "less_svd.csv";
    write_svd_csv(path, residual_svd_report(m, heldout(), 8, 1));
    CHECK(first_line(path) == "layer,head,index,a_rel,delta_rel");
    std::filesystem::remove(path);
  }
  CHECK_THROWS_AS(residual_svd_report(m, heldout(), 0, 1), std::invalid_argument);
}

TEST_CASE("exported attention maps") {
  const auto& m = small_model();
  const auto dir = std::filesystem::temp_directory_path() / "less_maps";
  std::filesystem::remove_all(dir);
  const KernelBank bank = random_bank(m.config, 8, 4);
  const auto prompt = heldout().first(48);
  const auto maps = export_attention_maps(m, bank, Policy::H2O, 8, prompt, dir);
  REQUIRE(maps.size() == m.config.n_layers * m.config.n_heads);
  for (const auto& hm : maps) {
    const std::string suffix = "_" + std::to_string(hm.layer) + "_" + std::to_string(hm.head) + ".csv";
    for (const char* method : {"full", "sparse", "less"}) {
      const Mat read = read_csv_matrix(dir / (std::string("attn_") + method + suffix));
      REQUIRE(read.rows() == 48);
      REQUIRE(read.cols() == 48);
      for (std::size_t t = 0; t < 48; ++t) {
        double s = 0.0;
        for (std::size_t j = 0; j < 48; ++j) s += read(t, j);
        CHECK(std::abs(s - 1.0) < 1e-6);
      }
    }
    FeatureMap fm = bank.at(hm.layer, hm.head);
    const auto fw = forward_full(m, prompt);
    const Mat kern = matmul_nt(phi(fm, fw.layers[hm.layer].q[hm.head]), psi(fm, fw.layers[hm.layer].k[hm.head]));
    for (std::size_t t = 0; t < 48; ++t) {
      for (std::size_t s = 0; s <= t; ++s) {
        if (hm.mask(t, s) == 0.0) {
          CHECK(hm.sparse(t, s) == 0.0);
          if (kern(t, s) > 0.0) CHECK(hm.less(t, s) > 0.0);
        }
      }
    }
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("baseline+ storage matches LESS") {
  CHECK(baseline_plus_extra(8) == 4);
  CHECK(baseline_plus_extra(16) == 8);
  const auto& m = small_model();
  const KernelBank bank = random_bank(m.config, 8, 6);
  EvalOptions o;
  o.max_windows = 2;
  o.hellinger_windows = 1;
  const auto rep = compare_methods(m, bank, Policy::H2O, 12, heldout(), o);
  REQUIRE(rep.methods.size() == 4);
  CHECK(rep.method("baseline+").budget == 16);
  CHECK(rep.method("less").storage_floats == rep.method("baseline+").storage_floats);
  const std::size_t D = m.config.head_dim();
  CHECK(rep.method("less").floats_per_head == 12 * 2 * D + 8 * D + 8);
  REQUIRE(rep.memory_less.size() == m.config.context_len);
  for (std::size_t t = 0; t < rep.memory_less.size(); ++t) {
    CHECK(rep.memory_full[t] == (t + 1) * 2 * D);
    CHECK(rep.memory_baseline[t] == std::min<std::size_t>(t + 1, 12) * 2 * D);
    CHECK(rep.memory_baseline_plus[t] == std::min<std::size_t>(t + 1, 16) * 2 * D);
    CHECK(rep.memory_less[t] == rep.memory_baseline[t] + 8 * D + 8);
  }
  CHECK_THROWS_AS(rep.method("nope"), std::out_of_range);
}

TEST_CASE("all methods agree when the budget covers the context") {
  const auto& m = small_model();
  const KernelBank bank = random_bank(m.config, 8, 7);
  EvalOptions o;
  o.max_windows = 2;
  o.hellinger_windows = 1;
  const auto rep = compare_methods(m, bank, Policy::H2O, m.config.context_len, heldout(), o);
  const double full = rep.method("full").ppl.word_ppl;
  for (const auto& mr : rep.methods) CHECK(std::abs(mr.ppl.word_ppl - full) <= 1e-6 * full);
}

TEST_CASE("evaluation reports are deterministic and serialise") {
  const auto& m = small_model();
  EvalOptions o;
  o.max_windows = 2;
  o.hellinger_windows = 1;
  o.memory_steps = 20;
  const auto budget = budget_tokens(m.config.context_len, 0.1);
  const auto a = compare_methods(m, trained_bank(), Policy::H2O, budget, heldout(), o);
  const auto b = compare_methods(m, trained_bank(), Policy::H2O, budget, heldout(), o);
  for (std::size_t i = 0; i < 4; ++i) CHECK(a.methods[i].ppl.total_nll == b.methods[i].ppl.total_nll);
  CHECK(a.hellinger.less == b.hellinger.less);
  CHECK(a.memory_less.size() == 20);
  const double gap = a.gap_closed("less");
  CHECK(std::isfinite(gap));
  CHECK(a.gap_closed("baseline") == 0.0);
  MESSAGE("ppl full " << a.method("full").ppl.word_ppl << " baseline " << a.method("baseline").ppl.word_ppl
                      << " less " << a.method("less").ppl.word_ppl);

  const auto dir = std::filesystem::temp_directory_path() / "less_eval_csv";
  std::filesystem::create_directories(dir);
  write_eval_csv(dir / "eval.csv", {a, b});
  write_hellinger_csv(dir / "hell.csv", a);
  write_memory_csv(dir / "mem.csv", a);
  write_position_nll_csv(dir / "pos.csv", a);
  CHECK(first_line(dir / "eval.csv").rfind("policy,budget,method", 0) == 0);
  CHECK(first_line(dir / "hell.csv") == "layer,sparse,less");
  CHECK(first_line(dir / "mem.csv") == "t,full,baseline,baseline+,less");
  CHECK(first_line(dir / "pos.csv") == "position,full,baseline,baseline+,less");
  std::ifstream pos(dir / "pos.csv");
  std::size_t lines = 0;
  for (std::string l; std::getline(pos, l);) ++lines;
  CHECK(lines == m.config.context_len);  // header + L−1 positions
  std::filesystem::remove_all(dir);
}

TEST_CASE("decode benchmark accounting") {
  const auto& m = small_model();
  const KernelBank bank = random_bank(m.config, 8, 8);
  CHECK_THROWS_AS(bench_decode(m, bank, Policy::H2O, 16, heldout(), 64, 32, 2), std::invalid_argument);
  const auto rep = bench_decode(m, bank, Policy::H2O, 16, heldout(), 64, 64, 3);
  REQUIRE(rep.rows.size() == 3);
  const auto& full = rep.row("full");
  CHECK(full.phases.eviction == 0.0);
  CHECK(full.phases.kernels == 0.0);
  CHECK(full.phases.state_update == 0.0);
  CHECK(rep.row("baseline").phases.eviction > 0.0);
  for (const auto& r : rep.rows) {
    CHECK(r.reps.size() == 3);
    const auto& p = r.phases;
    CHECK(p.eviction + p.kernels + p.synthesis + p.state_update <= r.decode * 1.05 + 1e-4);
  }
  const auto& l = rep.row("less");
  CHECK(l.phases.kernels > 0.0);
  CHECK(l.phases.synthesis > 0.0);
  CHECK(rep.lowrank_overhead() > 0.0);
  CHECK(rep.lowrank_overhead() < 1.0);
  const auto path = std::filesystem::temp_directory_path() / "less_bench.csv";
  write_bench_csv(path, rep);
  CHECK(first_line(path).rfind("method,prompt_len,gen_len", 0) == 0);
  std::filesystem::remove(path);
}
