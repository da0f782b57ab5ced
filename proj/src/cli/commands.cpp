#include <CLI11.hpp>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <iterator>
#include <thread>

#include "less/cli.hpp"

namespace less::cli {
namespace {

namespace fs = std::filesystem;

std::vector<std::uint8_t> load_corpus(const RunConfig& cfg) {
  std::ifstream is(cfg.corpus, std::ios::binary);
  if (!is) throw DataError("cannot read corpus: " + cfg.corpus.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), {});
  const auto [train, held] = split_corpus(bytes, cfg.heldout);
  if (train.size() <= cfg.model.context_len || held.size() < cfg.model.context_len) {
    throw DataError("corpus " + cfg.corpus.string() + " (" + std::to_string(bytes.size()) +
                    " bytes) is too small for context_len " + std::to_string(cfg.model.context_len));
  }
  return bytes;
}

void require(const fs::path& p) {
  if (!fs::exists(p)) throw MissingArtifact(p);
}

ToyModel load_model(const RunPaths& paths) {
  require(paths.model());
  try {
    return read_model(paths.model());
  } catch (const std::runtime_error& e) {
    throw DataError(paths.model().string() + ": " + e.what());
  }
}

KernelBank load_kernels(const RunPaths& paths, const ModelConfig& c) {
  for (std::size_t l = 0; l < c.n_layers; ++l)
    for (std::size_t h = 0; h < c.n_heads; ++h) require(paths.kernels() / KernelBank::file_name(l, h));
  try {
    return KernelBank::load(paths.kernels(), c.n_layers, c.n_heads);
  } catch (const std::runtime_error& e) {
    throw DataError(paths.kernels().string() + ": " + e.what());
  }
}

std::vector<fs::path> kernel_files(const ModelConfig& c) {
  std::vector<fs::path> out;
  for (std::size_t l = 0; l < c.n_layers; ++l)
    for (std::size_t h = 0; h < c.n_heads; ++h) out.push_back(fs::path("kernels") / KernelBank::file_name(l, h));
  return out;
}

bool wants(const RunConfig& cfg, const std::string& method) {
  return std::find(cfg.methods.begin(), cfg.methods.end(), method) != cfg.methods.end();
}

void check_finite(const Perplexity& p, const std::string& what) {
  if (!std::isfinite(p.total_nll)) throw NumericFailure("non-finite perplexity for " + what);
}

}  // namespace

void cmd_pretrain(const RunConfig& cfg) {
  const RunPaths paths{cfg.out};
  const auto corpus = load_corpus(cfg);
  PretrainOptions opts = cfg.pretrain;
  opts.heldout_fraction = cfg.heldout;
  std::printf("pretraining %zu steps on %zu bytes\n", opts.steps, corpus.size());
  const PretrainResult res = pretrain(cfg.effective_model(), corpus, opts);
  if (!std::isfinite(res.heldout_loss)) throw NumericFailure("non-finite held-out loss after pretraining");
  fs::create_directories(cfg.out);
  write_model(paths.model(), res.model);
  {
    std::ofstream os(cfg.out / "pretrain_loss.csv");
    os << "step,loss\n";
    os.precision(17);
    for (std::size_t i = 0; i < res.train_loss.size(); ++i) os << i << ',' << res.train_loss[i] << '\n';
  }
  std::printf("held-out loss %.4f nats/byte\n", res.heldout_loss);
  Manifest{"pretrain", {{"corpus", cfg.corpus.string()}}, {"model.bin", "pretrain_loss.csv"}, {}}.write(cfg);
}

void cmd_trace(const RunConfig& cfg) {
  const RunPaths paths{cfg.out};
  const ToyModel model = load_model(paths);
  const auto corpus = load_corpus(cfg);
  const auto train = split_corpus(corpus, cfg.heldout).first;
  const std::size_t len = cfg.trace_len ? cfg.trace_len : model.config.context_len;
  AttnTrace trace;
  try {
    trace = collect_traces(model, train, cfg.trace_seqs, len, cfg.seed);
  } catch (const std::invalid_argument& e) {
    throw DataError(e.what());
  }
  write_trace(paths.trace(), trace);
  std::printf("traced %zu sequences of %zu bytes\n", trace.n_seqs, trace.seq_len);
  Manifest{"trace", {{"corpus", cfg.corpus.string()}, {"model", paths.model().string()}}, {"trace.bin"}, {}}.write(cfg);
}

void cmd_train(const RunConfig& cfg, const TrainOptions& opts) {
  const RunPaths paths{cfg.out};
  require(paths.trace());
  AttnTrace trace;
  try {
    trace = read_trace(paths.trace());
  } catch (const std::runtime_error& e) {
    throw DataError(paths.trace().string() + ": " + e.what());
  }
  std::vector<std::size_t> layers = opts.layers;
  if (layers.empty())
    for (std::size_t l = 0; l < trace.n_layers; ++l) layers.push_back(l);
  for (std::size_t l : layers)
    if (l >= trace.n_layers) throw ConfigError("--layers " + std::to_string(l) + " out of range");
  const std::size_t jobs = opts.jobs ? opts.jobs : std::max(1u, std::thread::hardware_concurrency());

  std::vector<TrainResult> results;
  try {
    results = train_all(trace, layers, cfg.effective_train(), jobs);
  } catch (const std::domain_error& e) {
    throw NumericFailure(e.what());
  }

  fs::create_directories(paths.kernels());
  fs::create_directories(paths.train());
  std::vector<fs::path> outputs;
  std::string tag;
  for (std::size_t l : layers) {
    tag += "_L" + std::to_string(l);
    const fs::path summary = fs::path("train") / ("summary_L" + std::to_string(l) + ".csv");
    std::ofstream os(cfg.out / summary);
    os << "layer,head,sparse_only_loss,initial_loss,final_loss\n";
    os.precision(17);
    for (const auto& r : results) {
      if (r.layer != l) continue;
      const fs::path kfile = fs::path("kernels") / KernelBank::file_name(r.layer, r.head);
      const fs::path lfile =
          fs::path("train") / ("loss_L" + std::to_string(r.layer) + "_H" + std::to_string(r.head) + ".csv");
      write_kernel(cfg.out / kfile, KernelRecord{r.layer, r.head, r.params});
      write_loss_csv(cfg.out / lfile, r.curve);
      os << r.layer << ',' << r.head << ',' << r.sparse_only_loss << ',' << r.initial_loss << ',' << r.final_loss << '\n';
      std::printf("layer %zu head %zu: sparse-only %.4g -> trained %.4g\n", r.layer, r.head, r.sparse_only_loss,
                  r.final_loss);
      outputs.push_back(kfile);
      outputs.push_back(lfile);
    }
    os.close();
    outputs.push_back(summary);
  }
  std::string layer_list;
  for (std::size_t l : layers) layer_list += (layer_list.empty() ? "" : ",") + std::to_string(l);
  const bool all = layers.size() == trace.n_layers;
  Manifest{all ? "train" : "train" + tag,
           {{"trace", paths.trace().string()}},
           outputs,
           {{"layers", layer_list}, {"jobs", std::to_string(jobs)}}}
      .write(cfg);
}

std::vector<EvalReport> cmd_eval(const RunConfig& cfg) {
  const RunPaths paths{cfg.out};
  const ToyModel model = load_model(paths);
  const auto& c = model.config;
  const bool use_less = wants(cfg, "less");
  const KernelBank bank = use_less ? load_kernels(paths, c)
                                   : KernelBank::zeros(c.n_layers, c.n_heads, c.head_dim(), 1, cfg.train.rank);
  const auto corpus = load_corpus(cfg);
  const auto held = split_corpus(corpus, cfg.heldout).second;

  std::vector<EvalReport> reports;
  std::vector<fs::path> outputs;
  fs::create_directories(paths.eval());
  for (double pct : cfg.budgets) {
    const std::size_t budget = pct_budget(pct, c.context_len, cfg.policy);
    EvalReport rep = compare_methods(model, bank, cfg.policy, budget, held, cfg.eval);
    for (const auto& m : rep.methods) check_finite(m.ppl, m.method + " at budget " + std::to_string(budget));
    if (cfg.performer) {
      const KernelBank perf = KernelBank::performer(c.n_layers, c.n_heads, c.head_dim(), cfg.train.rank, cfg.seed);
      MethodResult pr = rep.method("less");
      pr.method = "performer";
      pr.ppl = perplexity(model, held, CacheBackend::less(cfg.policy, budget, perf), cfg.eval.max_windows);
      check_finite(pr.ppl, "performer");
      rep.methods.push_back(pr);
    }
    const EvalReport all = rep;
    std::erase_if(rep.methods, [&](const MethodResult& m) { return m.method != "performer" && !wants(cfg, m.method); });

    std::printf("budget %zu (%g%%, %s)\n", budget, pct, std::string(policy_name(cfg.policy)).c_str());
    for (const auto& m : rep.methods)
      std::printf("  %-10s B=%-4zu word ppl %.6g  byte ppl %.6g\n", m.method.c_str(), m.budget, m.ppl.word_ppl,
                  m.ppl.byte_ppl);
    if (wants(cfg, "full") && wants(cfg, "baseline")) {
      for (const char* m : {"baseline+", "less"})
        if (wants(cfg, m)) std::printf("  gap closed by %s: %.3f\n", m, all.gap_closed(m));
    }

    const std::string tag = "_B" + std::to_string(budget) + ".csv";
    const auto add = [&](const std::string& name) {
      outputs.push_back(fs::path("eval") / (name + tag));
      return cfg.out / outputs.back();
    };
    write_position_nll_csv(add("position_nll"), rep);
    if (use_less) {
      for (std::size_t l = 0; l < c.n_layers; ++l)
        std::printf("  layer %zu Hellinger: sparse %.4f  less %.4f\n", l, rep.hellinger.sparse[l], rep.hellinger.less[l]);
      write_hellinger_csv(add("hellinger"), rep);
      write_memory_csv(add("memory"), all);
    }
    reports.push_back(std::move(rep));
  }
  write_eval_csv(paths.eval() / "eval.csv", reports);
  outputs.insert(outputs.begin(), fs::path("eval") / "eval.csv");

  std::map<std::string, std::string> inputs{{"corpus", cfg.corpus.string()}, {"model", paths.model().string()}};
  if (use_less)
    for (const auto& k : kernel_files(c)) inputs[k.generic_string()] = (cfg.out / k).string();
  Manifest{"eval", inputs, outputs, {}}.write(cfg);
  return reports;
}

void cmd_bench(const RunConfig& cfg) {
  const RunPaths paths{cfg.out};
  const ToyModel model = load_model(paths);
  const KernelBank bank = load_kernels(paths, model.config);
  const auto corpus = load_corpus(cfg);
  const auto held = split_corpus(corpus, cfg.heldout).second;
  const std::size_t budget = pct_budget(cfg.bench_budget, cfg.bench_prompt + cfg.bench_gen, cfg.policy);
  const BenchReport rep = bench_decode(model, bank, cfg.policy, budget, held, cfg.bench_prompt, cfg.bench_gen,
                                       cfg.bench_reps);
  write_bench_csv(paths.bench(), rep);
  std::printf("decode %zu tokens after a %zu-token prompt, budget %zu, median of %zu\n", rep.gen_len,
              rep.prompt_len, rep.budget, rep.reps);
  for (const auto& r : rep.rows) {
    std::printf("  %-9s decode %.4fs  eviction %.4fs  kernels %.4fs  synthesis %.4fs  state update %.4fs\n",
                r.method.c_str(), r.decode, r.phases.eviction, r.phases.kernels, r.phases.synthesis,
                r.phases.state_update);
  }
  std::printf("  low-rank overhead %.1f%% of LESS decode time\n", 100.0 * rep.lowrank_overhead());
  std::map<std::string, std::string> inputs{{"corpus", cfg.corpus.string()}, {"model", paths.model().string()}};
  for (const auto& k : kernel_files(model.config)) inputs[k.generic_string()] = (cfg.out / k).string();
  Manifest{"bench", inputs, {"bench.csv"}, {}}.write(cfg);
}

void cmd_maps(const RunConfig& cfg) {
  const RunPaths paths{cfg.out};
  const ToyModel model = load_model(paths);
  const KernelBank bank = load_kernels(paths, model.config);
  const auto corpus = load_corpus(cfg);
  const auto held = split_corpus(corpus, cfg.heldout).second;
  if (cfg.maps_offset + cfg.maps_prompt > held.size()) throw ConfigError("maps.offset runs past the held-out split");
  const std::size_t budget = pct_budget(cfg.maps_budget, cfg.maps_prompt, cfg.policy);
  const auto maps =
      export_attention_maps(model, bank, cfg.policy, budget, held.subspan(cfg.maps_offset, cfg.maps_prompt), paths.maps());
  std::vector<fs::path> outputs;
  for (const auto& m : maps)
    for (const char* method : {"full", "sparse", "less"})
      outputs.push_back(fs::path("maps") / ("attn_" + std::string(method) + "_" + std::to_string(m.layer) + "_" +
                                           std::to_string(m.head) + ".csv"));
  std::printf("wrote %zu attention maps of %zu tokens at budget %zu to %s\n", outputs.size(), cfg.maps_prompt, budget,
              paths.maps().string().c_str());
  std::map<std::string, std::string> inputs{{"corpus", cfg.corpus.string()}, {"model", paths.model().string()}};
  for (const auto& k : kernel_files(model.config)) inputs[k.generic_string()] = (cfg.out / k).string();
  Manifest{"maps", inputs, outputs, {}}.write(cfg);
}

void cmd_svd(const RunConfig& cfg) {
  const RunPaths paths{cfg.out};
  const ToyModel model = load_model(paths);
  const auto corpus = load_corpus(cfg);
  const auto held = split_corpus(corpus, cfg.heldout).second;
  if (cfg.svd_k >= model.config.context_len) throw ConfigError("svd.k must be below model.context_len");
  const auto curves = residual_svd_report(model, held, cfg.svd_k, cfg.svd_windows);
  write_svd_csv(paths.svd(), curves);
  std::printf("relative singular values, top-%zu residual (A | delta), summed over the spectrum:\n", cfg.svd_k);
  for (const auto& cv : curves) {
    double sa = 0, sd = 0;
    for (double v : cv.a_rel) sa += v;
    for (double v : cv.delta_rel) sd += v;
    std::printf("  layer %zu head %zu: %.3f | %.3f\n", cv.layer, cv.head, sa, sd);
  }
  Manifest{"svd", {{"corpus", cfg.corpus.string()}, {"model", paths.model().string()}}, {"svd.csv"}, {}}.write(cfg);
}

int run(int argc, const char* const* argv) {
  CLI::App app{"Sparse-plus-low-rank KV cache experiments on a byte-level toy model"};
  app.require_subcommand(1, 1);
  std::string config_file;
  std::vector<std::string> sets;
  TrainOptions topts;

  const std::vector<std::pair<std::string, std::string>> commands{
      {"pretrain", "train the toy language model"},
      {"trace", "record per-layer attention inputs and outputs"},
      {"train", "train LESS kernels from a trace"},
      {"eval", "compare Full, Baseline, Baseline+ and LESS"},
      {"bench", "time greedy decoding per cache type"},
      {"maps", "export attention matrices"},
      {"svd", "singular values of attention outputs and top-k residuals"},
      {"run", "pretrain, trace, train, eval, bench, maps and svd in order"},
  };
  for (const auto& [name, help] : commands) {
    auto* sc = app.add_subcommand(name, help);
    sc->add_option("config", config_file, "key=value config file");
    sc->add_option("--set", sets, "override one setting, key=value")
        ->expected(1)
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
    if (name == "train" || name == "run") {
      sc->add_option("--layers", topts.layers, "train only these layers")->delimiter(',');
      sc->add_option("--jobs", topts.jobs, "parallel (layer, head) jobs, 0 = all cores");
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    const RunConfig cfg =
        load_config(config_file.empty() ? std::nullopt : std::optional<fs::path>(config_file), sets);
    if (cmd == "pretrain" || cmd == "run") cmd_pretrain(cfg);
    if (cmd == "trace" || cmd == "run") cmd_trace(cfg);
    if (cmd == "train" || cmd == "run") cmd_train(cfg, topts);
    if (cmd == "eval" || cmd == "run") cmd_eval(cfg);
    if (cmd == "bench" || cmd == "run") cmd_bench(cfg);
    if (cmd == "maps" || cmd == "run") cmd_maps(cfg);
    if (cmd == "svd" || cmd == "run") cmd_svd(cfg);
  } catch (const CliError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.code;
  } catch (const std::domain_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kNumericFailure;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::out_of_range& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kDataError;
  }
  return kOk;
}

}  // namespace less::cli
