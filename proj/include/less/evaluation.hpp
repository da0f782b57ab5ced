#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "less/lesscore.hpp"
#include "less/policies.hpp"
#include "less/toymodel.hpp"

namespace less {

// ‖√p − √q‖₂/√2. Both rows must be nonnegative and sum to 1 ± 1e-6.
double hellinger(std::span<const double> p, std::span<const double> q);

// Attention matrices of one head on one window, all S×S over the full
// causal support. Evicted entries are 0 in `sparse` and carry the kernel's
// reconstructed mass in `less`.
struct HeadMaps {
  std::size_t layer = 0;
  std::size_t head = 0;
  Mat full;
  Mat sparse;
  Mat less;
  Mat mask;
};

// Maps for every (layer, head) of `tokens` (≤ context_len). The policy mask
// comes from each head's own full attention; q/k/v come from the full model.
std::vector<HeadMaps> attention_maps(const ToyModel& model, const KernelBank& kernels, Policy policy,
                                     std::size_t budget, std::span<const std::uint8_t> tokens);

struct LayerHellinger {
  std::vector<double> sparse;  // per layer mean over rows, heads and windows
  std::vector<double> less;
  std::size_t rows = 0;        // rows averaged per layer
};

// Mean Hellinger distance from full attention, on up to `max_windows`
// non-overlapping context windows of `corpus`.
LayerHellinger layerwise_hellinger(const ToyModel& model, const KernelBank& kernels, Policy policy,
                                   std::size_t budget, std::span<const std::uint8_t> corpus,
                                   std::size_t max_windows);

// σ_i/σ_1 of the full attention output A = P·V and of the residual
// Δ_A = A − A_topk (top-k per row, renormalised), averaged over windows.
struct SvdCurve {
  std::size_t layer = 0;
  std::size_t head = 0;
  std::vector<double> a_rel;
  std::vector<double> delta_rel;
};
std::vector<SvdCurve> residual_svd_report(const ToyModel& model, std::span<const std::uint8_t> corpus,
                                          std::size_t k, std::size_t max_windows);
// Relative singular values of one matrix; all zeros when σ_1 is 0.
std::vector<double> relative_singular_values(const Mat& a);
void write_svd_csv(const std::filesystem::path& path, const std::vector<SvdCurve>& curves);

// Writes attn_{full,sparse,less}_{layer}_{head}.csv into `dir`.
std::vector<HeadMaps> export_attention_maps(const ToyModel& model, const KernelBank& kernels, Policy policy,
                                            std::size_t budget, std::span<const std::uint8_t> prompt,
                                            const std::filesystem::path& dir);
void write_matrix_csv(const std::filesystem::path& path, const Mat& m);

// Extra tokens Baseline+ gets so its cache matches LESS's H (R×D floats).
std::size_t baseline_plus_extra(std::size_t rank);

struct MethodResult {
  std::string method;  // full, baseline, baseline+, less
  std::size_t budget = 0;
  Perplexity ppl;
  std::size_t floats_per_head = 0;  // steady-state per-head cache size
  std::size_t storage_floats = 0;   // same, ignoring z as the Baseline+ allotment does
};

struct EvalOptions {
  std::size_t max_windows = 0;       // perplexity windows, 0 = all
  std::size_t hellinger_windows = 8;
  std::size_t memory_steps = 0;      // length of the float-count curve, 0 = context_len
};

struct EvalReport {
  Policy policy = Policy::H2O;
  std::size_t budget = 0;
  std::size_t rank = 0;
  std::vector<MethodResult> methods;  // Full, Baseline, Baseline+, LESS
  LayerHellinger hellinger;
  // Total per-head cache floats after each of the first memory_steps tokens.
  std::vector<std::size_t> memory_full, memory_baseline, memory_baseline_plus, memory_less;

  const MethodResult& method(const std::string& name) const;
  // Fraction of the Baseline → Full perplexity gap a method recovers.
  double gap_closed(const std::string& name) const;
};

EvalReport compare_methods(const ToyModel& model, const KernelBank& kernels, Policy policy, std::size_t budget,
                           std::span<const std::uint8_t> corpus, const EvalOptions& opts = {});

// Per-head cache floats after each teacher-forced step of `tokens`.
std::vector<std::size_t> memory_curve(const ToyModel& model, const CacheBackend& backend,
                                      std::span<const std::uint8_t> tokens);

void write_eval_csv(const std::filesystem::path& path, const std::vector<EvalReport>& reports);
void write_hellinger_csv(const std::filesystem::path& path, const EvalReport& report);
void write_memory_csv(const std::filesystem::path& path, const EvalReport& report);
// position, mean NLL per method: the length-vs-quality pairs.
void write_position_nll_csv(const std::filesystem::path& path, const EvalReport& report);

struct BenchRow {
  std::string method;        // full, baseline, less
  double decode = 0.0;       // median decode-phase wall time (s)
  PhaseTimes phases;         // medians per phase
  std::vector<double> reps;  // per-repetition decode times
};

struct BenchReport {
  std::size_t prompt_len = 0;
  std::size_t gen_len = 0;
  std::size_t budget = 0;
  std::size_t reps = 0;
  std::vector<BenchRow> rows;

  const BenchRow& row(const std::string& method) const;
  // (kernels + state update) / decode time of the LESS run.
  double lowrank_overhead() const;
};

// Median-of-reps greedy decode timings for full, sparse-only and LESS.
// The prompt is drawn from `corpus`, repeated if shorter than prompt_len.
BenchReport bench_decode(const ToyModel& model, const KernelBank& kernels, Policy policy, std::size_t budget,
                         std::span<const std::uint8_t> corpus, std::size_t prompt_len, std::size_t gen_len,
                         std::size_t reps);
void write_bench_csv(const std::filesystem::path& path, const BenchReport& report);

}  // namespace less
