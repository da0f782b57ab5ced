#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <variant>
#include <vector>

#include "less/autodiff.hpp"
#include "less/mat.hpp"
#include "less/policies.hpp"
#include "less/rng.hpp"

namespace less {

inline constexpr double kPsiScalarInit = 1e-4;

// Learned kernels for one attention head:
//   phi(q) = |gelu(gelu(q·Wφ1)·Wφ2)|
//   psi(k) = |s3 · gelu(s2 · gelu(s1 · k·Wψ1)·Wψ2)·Wψ3|
struct KernelParams {
  Mat phi_w1;  // D×R′
  Mat phi_w2;  // R′×R
  Mat psi_w1;  // D×R′
  Mat psi_w2;  // R′×R
  Mat psi_w3;  // R×R
  double psi_s1 = kPsiScalarInit;
  double psi_s2 = kPsiScalarInit;
  double psi_s3 = kPsiScalarInit;

  std::size_t head_dim() const { return phi_w1.rows(); }
  std::size_t hidden() const { return phi_w1.cols(); }
  std::size_t rank() const { return phi_w2.cols(); }
  std::size_t parameter_count() const;

  // Weights uniform in ±1/sqrt(fan_in); scalars at kPsiScalarInit.
  static KernelParams init(std::size_t head_dim, std::size_t hidden, std::size_t rank, Rng& rng);
  static KernelParams zeros(std::size_t head_dim, std::size_t hidden, std::size_t rank);

  void validate() const;
  bool operator==(const KernelParams&) const = default;
};

// Positive random features f(x) = exp(ω·x/D^¼ − ‖x‖²/(2√D))/√R used for both
// queries and keys; an untrained stand-in for the learned kernels.
struct PerformerKernels {
  Mat omega;  // R×D, standard normal rows
  std::size_t head_dim() const { return omega.cols(); }
  std::size_t rank() const { return omega.rows(); }
  static PerformerKernels sample(std::size_t head_dim, std::size_t rank, std::uint64_t seed);
};

using FeatureMap = std::variant<KernelParams, PerformerKernels>;

std::size_t rank_of(const FeatureMap& fm);
std::size_t head_dim_of(const FeatureMap& fm);

Mat phi(const KernelParams& p, const Mat& q);
Mat psi(const KernelParams& p, const Mat& k);
Mat performer_features(const PerformerKernels& p, const Mat& x);
Mat phi(const FeatureMap& fm, const Mat& q);
Mat psi(const FeatureMap& fm, const Mat& k);

// Low-rank cache (H: R×D, z: 1×R) summarising every evicted pair.
struct LowRankState {
  Mat h;
  Mat z;
  static LowRankState zeros(std::size_t rank, std::size_t head_dim);
  std::size_t float_count() const { return h.size() + z.size(); }
};

// H += Σ ψ(k)ᵀv, z += Σ ψ(k) over the discards. Returns a new state.
LowRankState update_state(const FeatureMap& fm, const LowRankState& state, const DiscardSet& discards);
void absorb(const FeatureMap& fm, LowRankState& state, const DiscardSet& discards);

struct Synthesis {
  std::vector<double> output;       // 1×D attention output
  std::vector<double> slot_prob;    // probability mass of each cached row
  std::vector<double> sparse_prob;  // softmax over cached rows alone (policy input)
  double lowrank_mass = 0.0;        // total mass assigned through (H, z)
};

// Low-rank-plus-sparse attention for one query. `keys`/`values` hold the
// n = B_t+1 cached rows (current token included), row-major n×D.
// Stabilised by m = max(0, max_s q·k_s/√D) applied to both terms.
Synthesis synth_attention(const FeatureMap& fm, std::span<const double> q, const LowRankState& state,
                          std::span<const double> keys, std::span<const double> values);
Synthesis synth_attention(const FeatureMap& fm, std::span<const double> q, const LowRankState& state,
                          const Mat& keys, const Mat& values);

// Seconds spent per decode phase.
struct PhaseTimes {
  double eviction = 0.0;
  double kernels = 0.0;
  double synthesis = 0.0;
  double state_update = 0.0;
  PhaseTimes& operator+=(const PhaseTimes& o);
};

// Per-head LESS cache: sparse policy cache plus low-rank state.
struct LessCache {
  SparseCache sparse;
  LowRankState state;
  LessCache(Policy policy, std::size_t budget, std::size_t head_dim, std::size_t rank);
  std::size_t float_count() const { return sparse.float_count() + state.float_count(); }
};

// One generation step: append (k,v), synthesise attention, let the policy
// evict, fold the evicted pairs into (H, z) and drop them.
Synthesis less_decode_step(const FeatureMap& fm, LessCache& cache, std::size_t position,
                           std::span<const double> q, std::span<const double> k, std::span<const double> v,
                           PhaseTimes* times = nullptr);

// Masked (sequence-parallel) formulation. `mask` is a 0/1 S×S causal matrix
// with a true diagonal; masked-in keys use exp scores, causal masked-out keys
// contribute φ(q)ψ(k)ᵀ. `probs` holds the explicit probability decomposition.
struct MaskedAttention {
  Mat output;  // S×D
  Mat probs;   // S×S
};
MaskedAttention masked_attention(const FeatureMap& fm, const Mat& q, const Mat& k, const Mat& v,
                                 const Mat& mask);

// Sparse-only attention renormalised over the mask (kernel term absent).
MaskedAttention sparse_attention(const Mat& q, const Mat& k, const Mat& v, const Mat& mask);

// Tape-recorded variant used for training.
struct KernelVars {
  ad::Var phi_w1, phi_w2, psi_w1, psi_w2, psi_w3, psi_s1, psi_s2, psi_s3;
  static KernelVars track(ad::Tape& t, const KernelParams& p);
  static KernelVars fixed(ad::Tape& t, const KernelParams& p);
  KernelParams gradients(const ad::Tape& t, const KernelParams& shape) const;
};

ad::Var phi(ad::Tape& t, const KernelVars& kv, ad::Var q, double dropout, Rng* rng);
ad::Var psi(ad::Tape& t, const KernelVars& kv, ad::Var k, double dropout, Rng* rng);

struct MaskedAttentionVars {
  ad::Var output;
  ad::Var probs;
};
MaskedAttentionVars masked_attention(ad::Tape& t, ad::Var phi_q, ad::Var psi_k, const Mat& q, const Mat& k,
                                     const Mat& v, const Mat& mask);

// The kernel-independent part of the masked formulation, reusable across
// optimizer steps on the same sample.
struct MaskedScores {
  Mat exp_part;               // exp(score − m) on the mask, 0 elsewhere
  Mat lowrank_sel;            // 1 at causal masked-out entries
  std::vector<double> damp;   // e^{−m} per row
  static MaskedScores build(const Mat& q, const Mat& k, const Mat& mask);
};
MaskedAttentionVars masked_attention(ad::Tape& t, ad::Var phi_q, ad::Var psi_k, const MaskedScores& scores,
                                     ad::Var v);

void validate_mask(const Mat& mask);

// Kernel checkpoint: "LESSKRN1", u32 (layer, head, D, R′, R), then weights and
// scalars as little-endian float32 in declaration order.
struct KernelRecord {
  std::size_t layer = 0;
  std::size_t head = 0;
  KernelParams params;
};
void write_kernel(const std::filesystem::path& path, const KernelRecord& rec);
KernelRecord read_kernel(const std::filesystem::path& path);

// Kernels for every (layer, head) of a model.
class KernelBank {
 public:
  KernelBank() = default;
  KernelBank(std::size_t n_layers, std::size_t n_heads, std::vector<FeatureMap> maps);

  std::size_t n_layers() const { return n_layers_; }
  std::size_t n_heads() const { return n_heads_; }
  bool empty() const { return maps_.empty(); }
  const FeatureMap& at(std::size_t layer, std::size_t head) const;
  FeatureMap& at(std::size_t layer, std::size_t head);
  std::size_t rank() const;

  static KernelBank zeros(std::size_t n_layers, std::size_t n_heads, std::size_t head_dim, std::size_t hidden,
                          std::size_t rank);
  static KernelBank performer(std::size_t n_layers, std::size_t n_heads, std::size_t head_dim,
                              std::size_t rank, std::uint64_t seed);
  // Loads L{layer}_H{head}.bin files from `dir`.
  static KernelBank load(const std::filesystem::path& dir, std::size_t n_layers, std::size_t n_heads);
  void save(const std::filesystem::path& dir) const;

  static std::string file_name(std::size_t layer, std::size_t head);

 private:
  std::size_t n_layers_ = 0;
  std::size_t n_heads_ = 0;
  std::vector<FeatureMap> maps_;
};

}  // namespace less
