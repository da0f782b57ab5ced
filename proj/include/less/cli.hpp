#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "less/evaluation.hpp"
#include "less/toymodel.hpp"
#include "less/trainer.hpp"

namespace less::cli {

enum ExitCode : int { kOk = 0, kConfigError = 2, kDataError = 3, kMissingArtifact = 4, kNumericFailure = 5 };

struct CliError : std::runtime_error {
  CliError(ExitCode c, const std::string& what) : std::runtime_error(what), code(c) {}
  ExitCode code;
};
struct ConfigError : CliError {
  explicit ConfigError(const std::string& w) : CliError(kConfigError, w) {}
};
struct DataError : CliError {
  explicit DataError(const std::string& w) : CliError(kDataError, w) {}
};
struct MissingArtifact : CliError {
  explicit MissingArtifact(const std::filesystem::path& p)
      : CliError(kMissingArtifact, "missing artifact: " + p.string()), path(p) {}
  std::filesystem::path path;
};
struct NumericFailure : CliError {
  explicit NumericFailure(const std::string& w) : CliError(kNumericFailure, w) {}
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::filesystem::path corpus = "data/moby_dick.txt";
  std::filesystem::path out = "runs/default";
  double heldout = 0.1;

  ModelConfig model;
  std::optional<std::uint32_t> model_seed;  // unset → follows `seed`
  PretrainOptions pretrain;

  std::size_t trace_seqs = 32;
  std::size_t trace_len = 0;  // 0 → context_len

  Policy policy = Policy::H2O;
  TrainConfig train;
  double train_budget = 10.0;  // percent of trace_len

  std::vector<double> budgets{10.0};  // eval budgets, percent of context_len
  std::vector<std::string> methods{"full", "baseline", "baseline+", "less"};
  bool performer = false;
  EvalOptions eval;

  std::size_t bench_prompt = 1024;
  std::size_t bench_gen = 1024;
  std::size_t bench_reps = 3;
  double bench_budget = 10.0;  // percent of prompt + gen

  std::size_t maps_prompt = 64;
  std::size_t maps_offset = 0;  // into the held-out split
  double maps_budget = 10.0;    // percent of maps_prompt

  std::size_t svd_k = 32;
  std::size_t svd_windows = 8;

  // Applies one key=value assignment. Unknown keys and malformed values throw ConfigError.
  void set(std::string_view key, std::string_view value);
  // Canonical key=value form of every setting, sorted by key.
  std::map<std::string, std::string> entries() const;
  void validate() const;

  std::uint32_t effective_model_seed() const;
  ModelConfig effective_model() const;
  TrainConfig effective_train() const;  // trace_len-based budget folded into beta
};

// Flat key=value lines, `#` starts a comment, blank lines ignored.
std::vector<std::pair<std::string, std::string>> parse_config_text(std::string_view text);

// File (optional), then LESS_SEED, then the --set overrides in order.
RunConfig load_config(const std::optional<std::filesystem::path>& file, const std::vector<std::string>& overrides);

// Budget in tokens for a percent of `len`; ConfigError if the policy cannot run with it.
std::size_t pct_budget(double pct, std::size_t len, Policy policy);

// git blob id: SHA-1 of "blob <size>\0" + content, lowercase hex.
std::string git_hash(std::string_view content);
std::string git_hash_file(const std::filesystem::path& path);

struct Manifest {
  std::string command;
  std::map<std::string, std::string> inputs;   // label → path
  std::vector<std::filesystem::path> outputs;  // relative to the run directory
  std::map<std::string, std::string> notes;    // extra command options

  // Hashes inputs and outputs and writes <out>/manifests/<command>.json.
  std::filesystem::path write(const RunConfig& cfg) const;
};

// Artifact locations within a run directory.
struct RunPaths {
  std::filesystem::path root;
  std::filesystem::path model() const { return root / "model.bin"; }
  std::filesystem::path trace() const { return root / "trace.bin"; }
  std::filesystem::path kernels() const { return root / "kernels"; }
  std::filesystem::path train() const { return root / "train"; }
  std::filesystem::path eval() const { return root / "eval"; }
  std::filesystem::path bench() const { return root / "bench.csv"; }
  std::filesystem::path maps() const { return root / "maps"; }
  std::filesystem::path svd() const { return root / "svd.csv"; }
};

struct TrainOptions {
  std::vector<std::size_t> layers;  // empty → all
  std::size_t jobs = 1;
};

void cmd_pretrain(const RunConfig& cfg);
void cmd_trace(const RunConfig& cfg);
void cmd_train(const RunConfig& cfg, const TrainOptions& opts);
std::vector<EvalReport> cmd_eval(const RunConfig& cfg);
void cmd_bench(const RunConfig& cfg);
void cmd_maps(const RunConfig& cfg);
void cmd_svd(const RunConfig& cfg);

// Full command-line entry point; returns the process exit code.
int run(int argc, const char* const* argv);

}  // namespace less::cli
