// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <CLI11.hpp>
#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <numeric>
#include <set>
#include <sstream>

#include "kernel_grad.hpp"
#include "less/evaluation.hpp"
#include "less/trainer.hpp"
#include "policy_oracle.hpp"
#include "replay.hpp"
#include "test_util.hpp"

using namespace less;
using namespace less::testing;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }
double cpu_seconds() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmtd(const char* f, double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, x);
  return buf;
}

void progress(const std::string& s) {
  std::fprintf(stderr, "  .. %s\n", s.c_str());
  std::fflush(stderr);
}

struct Setup {
  fs::path cache;
  fs::path out;
  std::size_t seeds = 5;
  std::size_t trace_seqs = 32;
  std::size_t epochs = 40;
  std::size_t eval_windows = 32;
};

struct Shared {
  std::vector<std::uint8_t> corpus;
  std::span<const std::uint8_t> train, held;
  ToyModel model;
  double pretrain_cpu = 0.0;  // CPU seconds spent producing the model, cached or not
  std::vector<KernelBank> banks;  // per seed, filled by criterion 6
  std::vector<EvalReport> reports;
  double norm_error = 0.0;  // worst |Σ probs − 1| seen anywhere (criterion 9)
};

std::vector<std::uint8_t> read_corpus() {
  std::ifstream is(LESS_DATA_DIR "/moby_dick.txt", std::ios::binary);
  if (!is) throw std::runtime_error("missing corpus " LESS_DATA_DIR "/moby_dick.txt");
  return {std::istreambuf_iterator<char>(is), {}};
}

// Default-config model, 2000 steps, fixed seed; pretrained once and cached.
void load_or_pretrain(const Setup& s, Shared& sh) {
  const ModelConfig cfg;  // d_model 64, 4 heads, 2 layers, context 256, seed 1
  PretrainOptions opts;   // 2000 steps
  const fs::path model_file = s.cache / ("model_d64_h4_l2_c256_steps" + std::to_string(opts.steps) + ".bin");
  const fs::path time_file = model_file.string() + ".cpu";
  if (fs::exists(model_file) && fs::exists(time_file)) {
    try {
      sh.model = read_model(model_file);
      std::ifstream(time_file) >> sh.pretrain_cpu;
      if (sh.model.config == cfg) {
        progress("using cached model " + model_file.string());
        return;
      }
    } catch (const std::exception&) {
    }
  }
  progress("pretraining the toy model (" + std::to_string(opts.steps) + " steps), about 5 minutes");
  const double c0 = cpu_seconds();
  const PretrainResult res = pretrain(cfg, sh.corpus, opts);
  sh.pretrain_cpu = cpu_seconds() - c0;
  progress("held-out loss " + fmtd("%.4f", res.heldout_loss) + " nats/byte");
  sh.model = res.model;
  fs::create_directories(s.cache);
  write_model(model_file, sh.model);
  std::ofstream(time_file) << sh.pretrain_cpu << '\n';
}

KernelBank random_bank(const ModelConfig& c, std::size_t rank, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<FeatureMap> maps;
  for (std::size_t i = 0; i < c.n_layers * c.n_heads; ++i) maps.emplace_back(random_kernel(c.head_dim(), 16, rank, rng));
  return KernelBank(c.n_layers, c.n_heads, std::move(maps));
}

double row_sum_error(const Mat& p) {
  double worst = 0.0;
  for (std::size_t t = 0; t < p.rows(); ++t) {
    double s = 0.0;
    for (double v : p.row(t)) s += v;
    worst = std::max(worst, std::abs(s - 1.0));
  }
  return worst;
}

// 1. Nothing evicted: LESS decoding, perplexity and maps equal the full cache.
Verdict c1_no_eviction(Shared& sh) {
  const auto& m = sh.model;
  const KernelBank bank = random_bank(m.config, 8, 101);
  const auto prompt = sh.held.first(160);
  const std::size_t gen = 96, budget = 256;
  const DecodeResult full = decode(m, prompt, gen, CacheBackend::full());
  const Perplexity pf = perplexity(m, sh.held, CacheBackend::full(), 4);
  double logit = 0.0, ppl = 0.0, maps = 0.0;
  bool same_tokens = true;
  for (Policy p : {Policy::H2O, Policy::Lambda, Policy::TOVA}) {
    const auto backend = CacheBackend::less(p, budget, bank);
    const DecodeResult d = decode(m, prompt, gen, backend);
    same_tokens = same_tokens && d.generated == full.generated;
    logit = std::max(logit, max_abs_diff(d.prompt_logits, full.prompt_logits));
    for (std::size_t i = 0; i < gen; ++i)
      for (std::size_t j = 0; j < m.config.vocab; ++j)
        logit = std::max(logit, std::abs(d.step_logits[i][j] - full.step_logits[i][j]));
    const Perplexity pl = perplexity(m, sh.held, backend, 4);
    ppl = std::max(ppl, std::abs(pl.word_ppl - pf.word_ppl) / pf.word_ppl);
    for (const auto& hm : attention_maps(m, bank, p, budget, sh.held.first(m.config.context_len))) {
      maps = std::max(maps, max_abs_diff(hm.less, hm.full));
      sh.norm_error = std::max(sh.norm_error, row_sum_error(hm.less));
    }
  }
  return {same_tokens && logit <= 1e-9 && ppl <= 1e-6 && maps <= 1e-9,
          "max logit diff " + fmtd("%.2e", logit) + ", ppl rel diff " + fmtd("%.2e", ppl) + ", map diff " +
              fmtd("%.2e", maps) + (same_tokens ? "" : ", generated tokens differ")};
}

// 2. Sequential decode steps equal the masked batch formulation.
Verdict c2_recursion(Shared& sh) {
  Rng rng(202);
  double worst = 0.0, worst_prob = 0.0;
  std::size_t n = 0;
  for (Policy p : {Policy::H2O, Policy::Lambda, Policy::TOVA}) {
    for (int i = 0; i < 120; ++i, ++n) {
      const std::size_t S = 1 + rng.below(64), D = 1 + rng.below(16);
      const std::size_t lo = policy_min_budget(p);
      std::size_t budget = lo + rng.below(std::max<std::size_t>(1, S > lo ? S - lo : 1));
      if (p == Policy::H2O) budget += budget % 2;
      const FeatureMap fm = random_kernel(D, 1 + rng.below(24), 8, rng);
      const Mat q = random_mat(S, D, rng, 1.5), k = random_mat(S, D, rng, 1.5), v = random_mat(S, D, rng);
      const ReplayResult r = replay_vs_batch(fm, p, budget, q, k, v);
      worst = std::max(worst, r.max_output_diff);
      worst_prob = std::max(worst_prob, r.max_prob_diff);
      sh.norm_error = std::max(sh.norm_error, r.max_norm_error);
    }
  }
  return {worst <= 1e-10 && worst_prob <= 1e-10, std::to_string(n) + " instances, max output diff " +
                                                     fmtd("%.2e", worst) + ", max prob diff " + fmtd("%.2e", worst_prob)};
}

// 3. Analytic residual-loss gradients against central differences.
Verdict c3_gradients(Shared&) {
  Rng rng(303);
  std::size_t coords = 0, failed = 0;
  double worst = 0.0;
  std::string first;
  const int instances = 24;
  for (int i = 0; i < instances; ++i) {
    const Policy p = std::array{Policy::H2O, Policy::Lambda, Policy::TOVA}[i % 3];
    const std::size_t D = 2 + rng.below(3), S = 7 + rng.below(5), dm = D * (1 + rng.below(3));
    HeadSample s;
    s.q = random_mat(S, D, rng);
    s.k = random_mat(S, D, rng);
    s.v = random_mat(S, D, rng);
    s.mask = build_lm_mask(p, p == Policy::Lambda ? 5 : 4, causal_probs(s.q, s.k));
    s.w_o_rows = random_mat(D, dm, rng, 0.5);
    s.target = random_mat(S, dm, rng, 0.3);
    s.scores = MaskedScores::build(s.q, s.k, s.mask);
    const KernelParams k0 = random_kernel(D, 3 + rng.below(4), 2 + rng.below(3), rng);
    const GradCheck g = check_kernel_gradient(
        [&](ad::Tape& t, const KernelVars& kv) { return residual_loss(t, kv, s, 0.0, nullptr); }, k0, 1e-4);
    coords += g.checked;
    failed += g.failed;
    worst = std::max(worst, g.worst_rel);
    if (first.empty()) first = g.first_failure;
  }
  return {failed == 0, std::to_string(instances) + " instances, " + std::to_string(coords) + " coordinates, " +
                           std::to_string(failed) + " beyond rel 1e-4" + (first.empty() ? "" : " (" + first + ")") +
                           ", worst raw rel " + fmtd("%.1e", worst)};
}

// 4. Caches and build_lm_mask against the brute-force simulation.
Verdict c4_policies(Shared&) {
  Rng rng(404);
  std::size_t cases = 0, mismatches = 0, rejected = 0;
  for (Policy p : {Policy::H2O, Policy::Lambda, Policy::TOVA}) {
    for (std::size_t budget : {4, 6, 8}) {
      if (budget < policy_min_budget(p)) {
        // Λ keeps four sinks plus a window, so it cannot run with four slots.
        bool threw = false;
        try {
          SparseCache c(p, budget, 2);
        } catch (const std::invalid_argument&) {
          threw = true;
        }
        if (!threw) ++mismatches;
        ++rejected;
        continue;
      }
      for (std::size_t S = 1; S <= 32; ++S) {
        for (int trial = 0; trial < 50; ++trial, ++cases) {
          const Mat scores = random_causal_probs(S, rng);
          const auto oracle = simulate_policy(p, budget, scores);
          if (!(build_lm_mask(p, budget, scores) == oracle_mask(oracle))) ++mismatches;
          SparseCache c(p, budget, 1);
          for (std::size_t t = 0; t < S; ++t) {
            const std::vector<double> kv{static_cast<double>(t)};
            c.append(t, kv, kv);
            std::vector<double> row(c.size());
            double total = 0.0;
            for (std::size_t j = 0; j < c.size(); ++j) total += (row[j] = scores(t, c.positions()[j]));
            for (double& x : row) x /= total;
            std::vector<std::size_t> ev;
            for (const auto& e : policy_step(c, row)) ev.push_back(e.position);
            const std::set<std::size_t> kept(c.positions().begin(), c.positions().end());
            if (kept != oracle[t].kept || ev != oracle[t].evicted) {
              ++mismatches;
              break;
            }
          }
        }
      }
    }
  }
  return {mismatches == 0, std::to_string(cases) + " simulations, " + std::to_string(mismatches) + " mismatches, " +
                               std::to_string(rejected) + " budget below the policy minimum rejected"};
}

// 5. Freshly initialised kernels barely perturb sparse attention.
Verdict c5_warm_start(Shared& sh) {
  const auto& m = sh.model;
  const std::size_t S = m.config.context_len, D = m.config.head_dim();
  Rng rng(505);
  double worst = 0.0;
  std::size_t heads = 0;
  for (std::size_t w = 0; w < 4; ++w) {
    const auto fw = forward_full(m, sh.held.subspan(w * S, S));
    for (std::size_t l = 0; l < m.config.n_layers; ++l) {
      for (std::size_t h = 0; h < m.config.n_heads; ++h, ++heads) {
        const auto& r = fw.layers[l];
        for (Policy p : {Policy::H2O, Policy::Lambda, Policy::TOVA}) {
          const Mat mask = build_lm_mask(p, budget_tokens(S, 0.1), head_attention_probs(r.q[h], r.k[h]));
          const FeatureMap fm = KernelParams::init(D, 512, 8, rng);
          const auto la = masked_attention(fm, r.q[h], r.k[h], r.v[h], mask);
          const auto sa = sparse_attention(r.q[h], r.k[h], r.v[h], mask);
          worst = std::max({worst, max_abs_diff(la.output, sa.output), max_abs_diff(la.probs, sa.probs)});
          sh.norm_error = std::max(sh.norm_error, row_sum_error(la.probs));
        }
      }
    }
  }
  return {worst < 1e-3, std::to_string(heads) + " model heads x 3 policies at 10%, hidden 512, max abs diff " +
                            fmtd("%.2e", worst)};
}

// 6 and 7. Per seed: trace, train at 10% H2O, evaluate at 10% on a disjoint held-out slice.
void run_seeds(const Setup& s, Shared& sh, double& cpu) {
  const double c0 = cpu_seconds();
  const auto& m = sh.model;
  const std::size_t S = m.config.context_len, budget = budget_tokens(S, 0.1);
  for (std::size_t seed = 0; seed < s.seeds; ++seed) {
    const auto t0 = Clock::now();
    const AttnTrace tr = collect_traces(m, sh.train, s.trace_seqs, S, seed);
    TrainConfig cfg;
    cfg.epochs = s.epochs;
    cfg.halve_every = std::max<std::size_t>(1, s.epochs / 4);
    cfg.seed = seed;
    std::vector<std::size_t> layers(m.config.n_layers);
    std::iota(layers.begin(), layers.end(), std::size_t{0});
    const auto results = train_all(tr, layers, cfg, 1);
    sh.banks.push_back(bank_from_results(results, m.config.n_layers, m.config.n_heads));
    EvalOptions o;
    o.max_windows = s.eval_windows;
    o.hellinger_windows = 8;
    const auto slice = sh.held.subspan(std::min(sh.held.size() - S, seed * s.eval_windows * S));
    sh.reports.push_back(compare_methods(m, sh.banks.back(), Policy::H2O, budget, slice, o));
    const auto& r = sh.reports.back();
    progress("seed " + std::to_string(seed) + ": byte ppl full " + fmtd("%.4f", r.method("full").ppl.byte_ppl) +
             " less " + fmtd("%.4f", r.method("less").ppl.byte_ppl) + " baseline+ " +
             fmtd("%.4f", r.method("baseline+").ppl.byte_ppl) + " baseline " +
             fmtd("%.4f", r.method("baseline").ppl.byte_ppl) + " (" + fmtd("%.0f", seconds_since(t0)) + " s)");
  }
  cpu = cpu_seconds() - c0;
}

Verdict c6_ordering(const Setup& s, Shared& sh, double seeds_cpu) {
  std::size_t ok = 0;
  std::string per;
  for (const auto& r : sh.reports) {
    const double f = r.method("full").ppl.word_ppl, l = r.method("less").ppl.word_ppl,
                 b = r.method("baseline").ppl.word_ppl;
    const bool pass = f <= l && l < b && r.gap_closed("less") > r.gap_closed("baseline+");
    ok += pass;
    per += (per.empty() ? "" : " ") + fmtd("%.2f", r.gap_closed("less")) + "/" + fmtd("%.2f", r.gap_closed("baseline+")) +
           (pass ? "" : "x");
  }
  const double cpu_min = (sh.pretrain_cpu + seeds_cpu) / 60.0;
  return {ok * 5 >= 4 * s.seeds && cpu_min <= 30.0,
          std::to_string(ok) + "/" + std::to_string(s.seeds) + " seeds ordered; gap closed less/baseline+ per seed " +
              per + "; " + fmtd("%.1f", cpu_min) + " CPU-min including pretraining"};
}

Verdict c7_hellinger(const Setup& s, Shared& sh) {
  std::size_t ok = 0;
  std::string per;
  for (const auto& r : sh.reports) {
    bool pass = true;
    std::string row;
    for (std::size_t l = 0; l < r.hellinger.sparse.size(); ++l) {
      pass = pass && r.hellinger.less[l] <= r.hellinger.sparse[l];
      row += (row.empty() ? "" : ",") + fmtd("%.3f", r.hellinger.less[l]) + "<" + fmtd("%.3f", r.hellinger.sparse[l]);
    }
    ok += pass;
    per += " [" + row + (pass ? "" : " x") + "]";
  }
  return {ok * 5 >= 4 * s.seeds, std::to_string(ok) + "/" + std::to_string(s.seeds) +
                                     " seeds with LESS <= sparse in every layer; less<sparse per layer" + per};
}

// 8. Steady-state per-head cache size.
Verdict c8_memory(Shared& sh) {
  bool ok = true;
  std::string detail;
  Rng rng(808);
  const std::size_t D = sh.model.config.head_dim(), R = 8;
  for (Policy p : {Policy::H2O, Policy::Lambda, Policy::TOVA}) {
    for (std::size_t B : {6, 12, 24}) {
      const FeatureMap fm = random_kernel(D, 16, R, rng);
      LessCache cache(p, B, D, R);
      for (std::size_t t = 0; t < 3 * B; ++t) {
        const Mat qkv = random_mat(3, D, rng);
        less_decode_step(fm, cache, t, qkv.row(0), qkv.row(1), qkv.row(2));
        const std::size_t expect = std::min(t + 1, B) * 2 * D + R * D + R;
        if (cache.float_count() != expect) ok = false;
      }
    }
  }
  const std::size_t B = 24;
  const KernelBank bank = random_bank(sh.model.config, R, 9);
  const auto curve = memory_curve(sh.model, CacheBackend::less(Policy::H2O, B, bank), sh.held.first(200));
  for (std::size_t t = B; t < curve.size(); ++t) ok = ok && curve[t] == B * 2 * D + R * D + R;
  const bool four = R * D == 4 * (2 * D) && baseline_plus_extra(R) == 4;
  ok = ok && four;
  detail = "B*2D + R*D + R = " + std::to_string(B * 2 * D + R * D + R) + " floats at B=24, D=" + std::to_string(D) +
           "; R*D = " + std::to_string(R * D) + " = 4 KV pairs of " + std::to_string(2 * D) + " floats";
  if (!sh.reports.empty()) {
    const auto& r = sh.reports.front();
    ok = ok && r.method("less").storage_floats == r.method("baseline+").storage_floats;
  }
  return {ok, detail};
}

// 9. Every probability decomposition seen above sums to one.
Verdict c9_normalization(Shared& sh) {
  // Also decode with each seed's trained kernels on model activations.
  const auto& m = sh.model;
  const std::size_t S = m.config.context_len;
  const auto fw = forward_full(m, sh.held.first(S));
  std::size_t banks = 0;
  for (const auto& bank : sh.banks) {
    ++banks;
    for (std::size_t l = 0; l < m.config.n_layers; ++l)
      for (std::size_t h = 0; h < m.config.n_heads; ++h)
        for (Policy p : {Policy::H2O, Policy::TOVA}) {
          const auto r = replay_vs_batch(bank.at(l, h), p, budget_tokens(S, 0.1), fw.layers[l].q[h],
                                         fw.layers[l].k[h], fw.layers[l].v[h]);
          sh.norm_error = std::max(sh.norm_error, r.max_norm_error);
          sh.norm_error = std::max(
              sh.norm_error, row_sum_error(masked_attention(bank.at(l, h), fw.layers[l].q[h], fw.layers[l].k[h],
                                                            fw.layers[l].v[h], r.mask)
                                               .probs));
        }
  }
  return {sh.norm_error <= 1e-9, "worst |row sum - 1| " + fmtd("%.2e", sh.norm_error) +
                                     " over criteria 1, 2, 5 and trained kernels from " + std::to_string(banks) +
                                     " seeds"};
}

// 10. Report only.
Verdict c10_svd(const Setup& s, Shared& sh) {
  const std::size_t k = 32;  // 12.5% of the context
  const auto curves = residual_svd_report(sh.model, sh.held, k, 8);
  fs::create_directories(s.out);
  write_svd_csv(s.out / "svd.csv", curves);
  std::vector<double> a(curves.front().a_rel.size()), d(a.size());
  for (const auto& c : curves)
    for (std::size_t i = 0; i < a.size(); ++i) {
      a[i] += c.a_rel[i] / static_cast<double>(curves.size());
      d[i] += c.delta_rel[i] / static_cast<double>(curves.size());
    }
  std::string tail;
  for (std::size_t i : {1, 3, 7, 15})
    if (i < a.size()) tail += " s" + std::to_string(i + 1) + " " + fmtd("%.3f", a[i]) + "|" + fmtd("%.3f", d[i]);
  return {!curves.empty(), "top-" + std::to_string(k) + " residual, mean sigma_i/sigma_1 A|delta:" + tail + "; " +
                               (s.out / "svd.csv").string()};
}

// 11. Long decode at a 10% budget.
Verdict c11_latency(const Setup& s, Shared& sh) {
  const std::size_t prompt = 1024, gen = 1024, budget = budget_tokens(prompt + gen, 0.1);
  const KernelBank& bank = sh.banks.empty() ? random_bank(sh.model.config, 8, 11) : sh.banks.front();
  const BenchReport r = bench_decode(sh.model, bank, Policy::H2O, budget, sh.held, prompt, gen, 5);
  fs::create_directories(s.out);
  write_bench_csv(s.out / "bench.csv", r);
  const auto& full = r.row("full");
  const auto& less = r.row("less");
  const auto& p = less.phases;
  return {less.decode < full.decode,
          "prompt " + std::to_string(prompt) + " + gen " + std::to_string(gen) + ", B=" + std::to_string(budget) +
              ": full " + fmtd("%.3f", full.decode) + " s, sparse " + fmtd("%.3f", r.row("baseline").decode) +
              " s, less " + fmtd("%.3f", less.decode) + " s [eviction " + fmtd("%.3f", p.eviction) + ", kernels " +
              fmtd("%.3f", p.kernels) + ", synthesis " + fmtd("%.3f", p.synthesis) + ", state update " +
              fmtd("%.3f", p.state_update) + "]; low-rank overhead " + fmtd("%.1f", 100 * r.lowrank_overhead()) +
              "% of decode"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  Setup s;
  s.cache = LESS_ACCEPT_CACHE;
  s.out = LESS_ACCEPT_CACHE;
  std::vector<int> only;
  app.add_option("--cache", s.cache, "directory holding the pretrained model");
  app.add_option("--out", s.out, "directory for the svd and bench reports");
  app.add_option("--only", only, "run only these criteria")->delimiter(',');
  app.add_option("--seeds", s.seeds, "seeds for criteria 6 and 7");
  CLI11_PARSE(app, argc, argv);
  const auto wanted = [&](int c) { return only.empty() || std::find(only.begin(), only.end(), c) != only.end(); };

  Shared sh;
  sh.corpus = read_corpus();
  std::tie(sh.train, sh.held) = split_corpus(sh.corpus, 0.1);
  const bool needs_model = only.empty() || std::any_of(only.begin(), only.end(), [](int c) { return c != 2 && c != 3 && c != 4; });
  if (needs_model) load_or_pretrain(s, sh);

  int failures = 0;
  const auto report = [&](int id, const char* name, const std::function<Verdict()>& fn) {
    if (!wanted(id)) return;
    const auto t0 = Clock::now();
    Verdict v;
    try {
      v = fn();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    failures += !v.pass;
    std::printf("%s  %2d  %s: %s (%.1f s)\n", v.pass ? "PASS" : "FAIL", id, name, v.detail.c_str(), seconds_since(t0));
    std::fflush(stdout);
  };

  report(1, "no-eviction exactness", [&] { return c1_no_eviction(sh); });
  report(2, "recursion equals masked batch", [&] { return c2_recursion(sh); });
  report(3, "gradient check", [&] { return c3_gradients(sh); });
  report(4, "policy oracle", [&] { return c4_policies(sh); });
  report(5, "warm start", [&] { return c5_warm_start(sh); });
  double seeds_cpu = 0.0;
  if (wanted(6) || wanted(7) || wanted(9) || wanted(11)) {
    const auto t0 = Clock::now();
    try {
      run_seeds(s, sh, seeds_cpu);
    } catch (const std::exception& e) {
      std::fprintf(stderr, "seed runs failed: %s\n", e.what());
    }
    progress("seed runs took " + fmtd("%.0f", seconds_since(t0)) + " s");
  }
  report(6, "perplexity ordering at 10% H2O", [&] { return c6_ordering(s, sh, seeds_cpu); });
  report(7, "layer-wise Hellinger", [&] { return c7_hellinger(s, sh); });
  report(8, "memory contract", [&] { return c8_memory(sh); });
  report(9, "normalization", [&] { return c9_normalization(sh); });
  report(10, "residual SVD report", [&] { return c10_svd(s, sh); });
  report(11, "decode latency", [&] { return c11_latency(s, sh); });
  return failures == 0 ? 0 : 1;
}
