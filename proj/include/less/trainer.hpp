#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <utility>
#include <vector>

#include "less/adam.hpp"
#include "less/lesscore.hpp"
#include "less/policies.hpp"
#include "less/toymodel.hpp"

namespace less {

// Frozen-model features for one (sequence, layer).
struct TraceRecord {
  std::vector<Mat> q, k, v;  // per head, S×D
  Mat output;                // true post-W_O attention output, S×d_model
  bool operator==(const TraceRecord&) const = default;
};

// Trace file: "LESSTRC1", u32 (n_seqs, n_layers, n_heads, S, D, d_model),
// u64 model hash, W_O per layer, then records sequence-major, layer-minor.
// All matrices little-endian float32; values are held float-rounded in memory
// so a round trip is bit-exact.
struct AttnTrace {
  std::size_t n_seqs = 0, n_layers = 0, n_heads = 0, seq_len = 0, head_dim = 0, d_model = 0;
  std::uint64_t model_hash = 0;
  std::vector<Mat> w_o;  // per layer, d_model×d_model
  std::vector<TraceRecord> records;

  const TraceRecord& at(std::size_t seq, std::size_t layer) const;
  void validate() const;
  bool operator==(const AttnTrace&) const = default;
};

std::uint64_t model_hash(const ToyModel& model);

// n_seqs disjoint windows of seq_len bytes chosen with `seed`.
AttnTrace collect_traces(const ToyModel& model, std::span<const std::uint8_t> corpus, std::size_t n_seqs,
                         std::size_t seq_len, std::uint64_t seed);
void write_trace(const std::filesystem::path& path, const AttnTrace& trace);
AttnTrace read_trace(const std::filesystem::path& path);

struct TrainConfig {
  std::size_t epochs = 40;
  double lr0 = 1e-3;
  std::size_t halve_every = 10;
  double dropout = 0.3;
  std::size_t batch = 2;
  Policy policy = Policy::H2O;
  double beta = 0.1;  // training sparsity: budget = budget_tokens(S, beta)
  std::size_t hidden = 64;
  std::size_t rank = 8;
  std::uint64_t seed = 0;
  AdamConfig adam{0.9, 0.999, 1e-16};  // ψ-scalar gradients start near 1e-12

  void validate() const;
};

// lr0 · 2^(−floor(epoch / halve_every)).
double lr_at(const TrainConfig& cfg, std::size_t epoch);

// Everything the loss needs for one (record, head). `target` is the true
// output minus the other heads' exact contribution, so only head h's
// approximation error remains.
struct HeadSample {
  Mat q, k, v;  // S×D
  Mat mask;     // S×S policy mask
  Mat w_o_rows;  // D×d_model slice of W_O for this head
  Mat target;    // S×d_model
  MaskedScores scores;  // cached from (q, k, mask)
};

// Exact causal attention probabilities of one head.
Mat head_attention_probs(const Mat& q, const Mat& k);

HeadSample make_head_sample(const AttnTrace& trace, std::size_t seq, std::size_t layer, std::size_t head,
                            const Mat& mask);
// Mask from the head's own attention at the given policy/budget.
Mat trace_mask(const AttnTrace& trace, std::size_t seq, std::size_t layer, std::size_t head, Policy policy,
               std::size_t budget);

// Mean squared error over tokens and model dimensions of
//   concat(Â_h, exact other heads)·W_O − true output.
double residual_loss(const KernelParams& params, const AttnTrace& trace, std::size_t seq, std::size_t layer,
                     std::size_t head, const Mat& mask);
double residual_loss(const KernelParams& params, const HeadSample& sample);
ad::Var residual_loss(ad::Tape& t, const KernelVars& kv, const HeadSample& sample, double dropout, Rng* rng);

struct LossPoint {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  std::size_t layer = 0;
  std::size_t head = 0;
  KernelParams params;
  std::vector<LossPoint> curve;           // per optimizer step, training mode
  std::vector<double> epoch_eval_loss;    // eval-mode loss after each epoch
  double initial_loss = 0.0;               // eval mode, initial kernels
  double final_loss = 0.0;                 // eval mode, returned kernels
  double sparse_only_loss = 0.0;           // eval mode, kernels zeroed
};

// Returns the float-rounded kernels with the lowest eval-mode loss among the
// initial point and every epoch end.
TrainResult train_layer(const AttnTrace& traces, std::size_t layer, std::size_t head, const TrainConfig& cfg);

// Trains every head of the selected layers, `jobs` at a time. Results are
// ordered by (layer, head) and do not depend on `jobs`.
std::vector<TrainResult> train_all(const AttnTrace& traces, const std::vector<std::size_t>& layers,
                                   const TrainConfig& cfg, std::size_t jobs);

KernelBank bank_from_results(const std::vector<TrainResult>& results, std::size_t n_layers, std::size_t n_heads);

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossPoint>& curve);

}  // namespace less
