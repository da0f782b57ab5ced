#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

#include "less/cli.hpp"

namespace less::cli {
namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, std::string_view expect) {
  throw ConfigError("invalid value '" + std::string(value) + "' for " + std::string(key) + " (expected " +
                    std::string(expect) + ")");
}

template <class T>
T parse_int(std::string_view key, std::string_view v) {
  T out{};
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) bad_value(key, v, "a nonnegative integer");
  return out;
}

double parse_double(std::string_view key, std::string_view v) {
  double out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size() || !std::isfinite(out)) bad_value(key, v, "a number");
  return out;
}

bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  bad_value(key, v, "true or false");
}

std::vector<std::string> split_list(std::string_view v) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= v.size()) {
    const auto end = std::min(v.find(',', start), v.size());
    const auto item = trim(v.substr(start, end - start));
    if (!item.empty()) out.emplace_back(item);
    start = end + 1;
  }
  return out;
}

std::string fmt(double x) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}
template <class T>
std::string fmt_int(T x) {
  return std::to_string(x);
}
std::string fmt(bool b) { return b ? "true" : "false"; }

template <class T>
std::string join(const std::vector<T>& xs) {
  std::string s;
  for (const auto& x : xs) {
    if (!s.empty()) s += ',';
    if constexpr (std::is_same_v<T, std::string>)
      s += x;
    else
      s += fmt(x);
  }
  return s;
}

struct Key {
  std::function<void(RunConfig&, std::string_view key, std::string_view value)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define LESS_SIZE_KEY(field)                                                                        \
  Key {                                                                                             \
    [](RunConfig& c, std::string_view k, std::string_view v) { c.field = parse_int<std::size_t>(k, v); }, \
        [](const RunConfig& c) { return fmt_int(c.field); }                                         \
  }
#define LESS_DOUBLE_KEY(field)                                                                 \
  Key {                                                                                        \
    [](RunConfig& c, std::string_view k, std::string_view v) { c.field = parse_double(k, v); }, \
        [](const RunConfig& c) { return fmt(c.field); }                                        \
  }

const std::map<std::string, Key, std::less<>>& keys() {
  static const std::map<std::string, Key, std::less<>> table = {
      {"seed", {[](RunConfig& c, auto k, auto v) { c.seed = parse_int<std::uint64_t>(k, v); },
                [](const RunConfig& c) { return fmt_int(c.seed); }}},
      {"corpus", {[](RunConfig& c, auto, auto v) { c.corpus = std::string(v); },
                  [](const RunConfig& c) { return c.corpus.string(); }}},
      {"out", {[](RunConfig& c, auto, auto v) { c.out = std::string(v); },
               [](const RunConfig& c) { return c.out.string(); }}},
      {"heldout", LESS_DOUBLE_KEY(heldout)},
      {"policy", {[](RunConfig& c, auto k, auto v) {
                    try {
                      c.policy = parse_policy(v);
                    } catch (const std::invalid_argument&) {
                      bad_value(k, v, "h2o, lambda or tova");
                    }
                  },
                  [](const RunConfig& c) { return std::string(policy_name(c.policy)); }}},

      {"model.d_model", LESS_SIZE_KEY(model.d_model)},
      {"model.n_heads", LESS_SIZE_KEY(model.n_heads)},
      {"model.n_layers", LESS_SIZE_KEY(model.n_layers)},
      {"model.context_len", LESS_SIZE_KEY(model.context_len)},
      {"model.seed", {[](RunConfig& c, auto k, auto v) { c.model_seed = parse_int<std::uint32_t>(k, v); },
                      [](const RunConfig& c) { return c.model_seed ? fmt_int(*c.model_seed) : std::string("seed"); }}},

      {"pretrain.steps", LESS_SIZE_KEY(pretrain.steps)},
      {"pretrain.lr", LESS_DOUBLE_KEY(pretrain.lr)},
      {"pretrain.batch", LESS_SIZE_KEY(pretrain.batch)},
      {"pretrain.seq_len", LESS_SIZE_KEY(pretrain.seq_len)},
      {"pretrain.warmup", LESS_SIZE_KEY(pretrain.warmup)},

      {"trace.n_seqs", LESS_SIZE_KEY(trace_seqs)},
      {"trace.seq_len", LESS_SIZE_KEY(trace_len)},

      {"train.epochs", LESS_SIZE_KEY(train.epochs)},
      {"train.lr", LESS_DOUBLE_KEY(train.lr0)},
      {"train.halve_every", LESS_SIZE_KEY(train.halve_every)},
      {"train.dropout", LESS_DOUBLE_KEY(train.dropout)},
      {"train.batch", LESS_SIZE_KEY(train.batch)},
      {"train.budget", LESS_DOUBLE_KEY(train_budget)},
      {"train.hidden", LESS_SIZE_KEY(train.hidden)},
      {"train.rank", LESS_SIZE_KEY(train.rank)},
      {"train.adam_eps", LESS_DOUBLE_KEY(train.adam.eps)},

      {"eval.budgets", {[](RunConfig& c, auto k, auto v) {
                          c.budgets.clear();
                          for (const auto& item : split_list(v)) c.budgets.push_back(parse_double(k, item));
                        },
                        [](const RunConfig& c) { return join(c.budgets); }}},
      {"eval.methods", {[](RunConfig& c, auto, auto v) { c.methods = split_list(v); },
                        [](const RunConfig& c) { return join(c.methods); }}},
      {"eval.performer", {[](RunConfig& c, auto k, auto v) { c.performer = parse_bool(k, v); },
                          [](const RunConfig& c) { return fmt(c.performer); }}},
      {"eval.max_windows", LESS_SIZE_KEY(eval.max_windows)},
      {"eval.hellinger_windows", LESS_SIZE_KEY(eval.hellinger_windows)},
      {"eval.memory_steps", LESS_SIZE_KEY(eval.memory_steps)},

      {"bench.prompt_len", LESS_SIZE_KEY(bench_prompt)},
      {"bench.gen_len", LESS_SIZE_KEY(bench_gen)},
      {"bench.reps", LESS_SIZE_KEY(bench_reps)},
      {"bench.budget", LESS_DOUBLE_KEY(bench_budget)},

      {"maps.prompt_len", LESS_SIZE_KEY(maps_prompt)},
      {"maps.offset", LESS_SIZE_KEY(maps_offset)},
      {"maps.budget", LESS_DOUBLE_KEY(maps_budget)},

      {"svd.k", LESS_SIZE_KEY(svd_k)},
      {"svd.windows", LESS_SIZE_KEY(svd_windows)},
  };
  return table;
}

#undef LESS_SIZE_KEY
#undef LESS_DOUBLE_KEY

void check_pct(const char* key, double pct) {
  if (!(pct > 0.0 && pct <= 100.0)) throw ConfigError(std::string(key) + " must be a percent in (0, 100], got " + fmt(pct));
}

}  // namespace

std::vector<std::pair<std::string, std::string>> parse_config_text(std::string_view text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::size_t line_no = 0, start = 0;
  while (start < text.size()) {
    const auto end = std::min(text.find('\n', start), text.size());
    std::string_view line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key=value");
    const auto key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
    out.emplace_back(std::string(key), std::string(trim(line.substr(eq + 1))));
  }
  return out;
}

void RunConfig::set(std::string_view key, std::string_view value) {
  const auto it = keys().find(key);
  if (it == keys().end()) throw ConfigError("unknown config key: " + std::string(key));
  it->second.set(*this, key, value);
}

std::map<std::string, std::string> RunConfig::entries() const {
  std::map<std::string, std::string> out;
  for (const auto& [k, key] : keys()) out[k] = key.get(*this);
  return out;
}

std::uint32_t RunConfig::effective_model_seed() const {
  return model_seed ? *model_seed : static_cast<std::uint32_t>(seed);
}

ModelConfig RunConfig::effective_model() const {
  ModelConfig m = model;
  m.seed = effective_model_seed();
  return m;
}

TrainConfig RunConfig::effective_train() const {
  TrainConfig t = train;
  t.policy = policy;
  t.beta = train_budget / 100.0;
  t.seed = seed;
  return t;
}

void RunConfig::validate() const {
  try {
    effective_model().validate();
    effective_train().validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (!(heldout > 0.0 && heldout < 1.0)) throw ConfigError("heldout must be in (0, 1)");
  check_pct("train.budget", train_budget);
  check_pct("bench.budget", bench_budget);
  check_pct("maps.budget", maps_budget);
  if (budgets.empty()) throw ConfigError("eval.budgets must list at least one percent");
  for (double b : budgets) check_pct("eval.budgets", b);
  static const std::vector<std::string> known{"full", "baseline", "baseline+", "less"};
  if (methods.empty()) throw ConfigError("eval.methods must name at least one method");
  for (const auto& m : methods)
    if (std::find(known.begin(), known.end(), m) == known.end()) throw ConfigError("unknown eval method: " + m);
  if (trace_seqs == 0) throw ConfigError("trace.n_seqs must be positive");
  if (trace_len > model.context_len) throw ConfigError("trace.seq_len exceeds model.context_len");
  if (bench_reps < 3) throw ConfigError("bench.reps must be at least 3");
  if (bench_prompt == 0) throw ConfigError("bench.prompt_len must be positive");
  if (maps_prompt == 0 || maps_prompt > model.context_len)
    throw ConfigError("maps.prompt_len must be in [1, model.context_len]");
  if (svd_k == 0) throw ConfigError("svd.k must be positive");
}

std::size_t pct_budget(double pct, std::size_t len, Policy policy) {
  const std::size_t b = budget_tokens(len, pct / 100.0);
  if (b < policy_min_budget(policy)) {
    throw ConfigError(fmt(pct) + "% of " + std::to_string(len) + " tokens gives budget " + std::to_string(b) + ", below " +
                      std::string(policy_name(policy)) + "'s minimum of " + std::to_string(policy_min_budget(policy)));
  }
  return b;
}

RunConfig load_config(const std::optional<std::filesystem::path>& file, const std::vector<std::string>& overrides) {
  RunConfig cfg;
  if (file) {
    std::ifstream is(*file, std::ios::binary);
    if (!is) throw ConfigError("cannot read config file: " + file->string());
    std::stringstream ss;
    ss << is.rdbuf();
    std::vector<std::string> seen;
    for (const auto& [k, v] : parse_config_text(ss.str())) {
      if (std::find(seen.begin(), seen.end(), k) != seen.end()) throw ConfigError("duplicate config key: " + k);
      seen.push_back(k);
      cfg.set(k, v);
    }
  }
  if (const char* env = std::getenv("LESS_SEED"); env && *env) cfg.set("seed", env);
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + o + "'");
    cfg.set(trim(std::string_view(o).substr(0, eq)), trim(std::string_view(o).substr(eq + 1)));
  }
  cfg.validate();
  return cfg;
}

}  // namespace less::cli
