#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "less/lesscore.hpp"
#include "less/mat.hpp"
#include "less/policies.hpp"

namespace less {

struct ModelConfig {
  std::size_t vocab = 256;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_layers = 2;
  std::size_t context_len = 256;
  std::uint32_t seed = 1;

  std::size_t head_dim() const { return d_model / n_heads; }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct LayerWeights {
  Mat wq, wk, wv, wo;  // d_model×d_model
  Mat ln1, ln2;        // 1×d_model gains
  Mat w1;              // d_model×4·d_model
  Mat w2;              // 4·d_model×d_model
  bool operator==(const LayerWeights&) const = default;
};

// Pre-norm byte-level decoder with sinusoidal positions and a tied output head.
struct ToyModel {
  ModelConfig config;
  Mat tok_emb;  // vocab×d_model
  std::vector<LayerWeights> layers;

  static ToyModel init(const ModelConfig& cfg);
  std::size_t parameter_count() const;
  bool operator==(const ToyModel&) const = default;
};

// Sinusoidal table row for one position.
void positional_row(std::size_t pos, std::size_t d_model, std::span<double> out);
Mat positional_table(std::size_t n_positions, std::size_t d_model);

// Checkpoint: "LESSMDL1", u32 (vocab, d_model, n_heads, n_layers, context_len,
// seed), then weights as float32 in declaration order.
void write_model(const std::filesystem::path& path, const ToyModel& model);
ToyModel read_model(const std::filesystem::path& path);

// Per-layer record from a full forward pass.
struct LayerRecord {
  std::vector<Mat> q, k, v;  // per head, S×D
  Mat attn_out;              // post-W_O attention block output, S×d_model
};

struct ForwardResult {
  Mat logits;  // S×vocab
  std::vector<LayerRecord> layers;
};

ForwardResult forward_full(const ToyModel& model, std::span<const std::uint8_t> tokens);

// Mean next-byte cross-entropy (nats) over non-overlapping context windows.
double mean_nll(const ToyModel& model, std::span<const std::uint8_t> bytes, std::size_t max_windows = 0);

struct PretrainOptions {
  std::size_t steps = 2000;
  double lr = 3e-3;
  std::size_t batch = 2;
  std::size_t seq_len = 0;  // 0 → context_len
  double heldout_fraction = 0.1;
  std::size_t warmup = 100;
};

struct PretrainResult {
  ToyModel model;
  std::vector<double> train_loss;
  double heldout_loss = 0.0;
};

// Trains from the first (1 − heldout_fraction) of the corpus, scores the rest.
PretrainResult pretrain(const ModelConfig& cfg, std::span<const std::uint8_t> corpus, const PretrainOptions& opts);
ToyModel pretrain(const ModelConfig& cfg, std::span<const std::uint8_t> corpus, std::size_t steps, double lr);

// Splits a corpus into the training and held-out portions pretrain uses.
std::pair<std::span<const std::uint8_t>, std::span<const std::uint8_t>> split_corpus(
    std::span<const std::uint8_t> corpus, double heldout_fraction);

// ---- incremental decoding --------------------------------------------------

// Attention state of one head during incremental decoding.
class HeadCache {
 public:
  virtual ~HeadCache() = default;
  // Processes a whole prompt with exact causal attention (rows S×D), then
  // reduces the cache to its budget.
  virtual Mat prefill(const Mat& q, const Mat& k, const Mat& v, PhaseTimes* times) = 0;
  // One token: returns the 1×D attention output.
  virtual std::vector<double> step(std::size_t pos, std::span<const double> q, std::span<const double> k,
                                   std::span<const double> v, PhaseTimes* times) = 0;
  virtual std::size_t float_count() const = 0;
};

// Full cache, sparse-only policy cache, or sparse + low-rank (LESS).
struct CacheBackend {
  enum class Kind { Full, Sparse, Less };
  Kind kind = Kind::Full;
  Policy policy = Policy::H2O;
  std::size_t budget = 0;
  const KernelBank* kernels = nullptr;

  static CacheBackend full();
  static CacheBackend sparse(Policy policy, std::size_t budget);
  static CacheBackend less(Policy policy, std::size_t budget, const KernelBank& kernels);

  std::unique_ptr<HeadCache> make_head(std::size_t layer, std::size_t head, std::size_t head_dim) const;
  std::string label() const;
};

class DecodeSession {
 public:
  DecodeSession(const ToyModel& model, const CacheBackend& backend);

  // Feeds a prompt; returns its S×vocab logits.
  Mat prefill(std::span<const std::uint8_t> tokens);
  // Feeds one token at the next position; returns vocab logits.
  std::vector<double> step(std::uint8_t token);

  std::size_t position() const { return pos_; }
  std::size_t float_count() const;
  const PhaseTimes& times() const { return times_; }
  void collect_times(bool on) { timing_ = on; }

 private:
  const ToyModel& model_;
  std::vector<std::unique_ptr<HeadCache>> heads_;  // layer-major
  std::size_t pos_ = 0;
  PhaseTimes times_;
  bool timing_ = false;
};

inline constexpr std::size_t kMaxDecodePositions = 1 << 16;

struct DecodeResult {
  std::vector<std::uint8_t> generated;
  Mat prompt_logits;                             // S×vocab
  std::vector<std::vector<double>> step_logits;  // logits after each generated token is fed
  std::vector<std::size_t> float_counts;         // cache floats after each step
  PhaseTimes times;
  double prefill_seconds = 0.0;
  double decode_seconds = 0.0;
};

// Greedy decoding: prefill the prompt, then gen_len argmax steps.
DecodeResult decode(const ToyModel& model, std::span<const std::uint8_t> prompt, std::size_t gen_len,
                    const CacheBackend& backend, bool collect_times = false);

struct Perplexity {
  double word_ppl = 0.0;
  double byte_ppl = 0.0;
  double total_nll = 0.0;
  std::size_t bytes = 0;
  std::size_t words = 0;
  // Summed NLL and sample count of predictions made at each window position.
  std::vector<double> position_nll;
  std::vector<std::size_t> position_count;
};

// Teacher-forced scoring over non-overlapping windows of context_len bytes;
// each window starts from an empty cache and evicts from its first token.
// word_ppl = exp(total NLL / whitespace-delimited word count).
Perplexity perplexity(const ToyModel& model, std::span<const std::uint8_t> corpus, const CacheBackend& backend,
                      std::size_t max_windows = 0);

std::size_t count_words(std::span<const std::uint8_t> bytes);

}  // namespace less
