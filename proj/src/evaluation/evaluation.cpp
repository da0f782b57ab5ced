#include "less/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <stdexcept>

#include "less/trainer.hpp"

namespace less {

double hellinger(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw std::invalid_argument("hellinger: rows differ in length");
  double sp = 0.0, sq = 0.0, acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!(p[i] >= 0.0) || !(q[i] >= 0.0)) throw std::invalid_argument("hellinger: negative or NaN probability");
    sp += p[i];
    sq += q[i];
    const double d = std::sqrt(p[i]) - std::sqrt(q[i]);
    acc += d * d;
  }
  if (std::abs(sp - 1.0) > 1e-6 || std::abs(sq - 1.0) > 1e-6) {
    throw std::invalid_argument("hellinger: rows must sum to 1 (got " + std::to_string(sp) + ", " +
                                std::to_string(sq) + ")");
  }
  return std::min(1.0, std::sqrt(acc / 2.0));
}

std::vector<HeadMaps> attention_maps(const ToyModel& model, const KernelBank& kernels, Policy policy,
                                     std::size_t budget, std::span<const std::uint8_t> tokens) {
  const auto& c = model.config;
  if (kernels.empty()) throw std::invalid_argument("attention maps need trained kernels");
  if (kernels.n_layers() != c.n_layers || kernels.n_heads() != c.n_heads) {
    throw std::invalid_argument("kernel bank shape does not match model");
  }
  const auto fw = forward_full(model, tokens);
  std::vector<HeadMaps> out;
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto& rec = fw.layers[l];
    for (std::size_t h = 0; h < c.n_heads; ++h) {
      HeadMaps m;
      m.layer = l;
      m.head = h;
      m.full = head_attention_probs(rec.q[h], rec.k[h]);
      m.mask = build_lm_mask(policy, budget, m.full);
      m.sparse = sparse_attention(rec.q[h], rec.k[h], rec.v[h], m.mask).probs;
      m.less = masked_attention(kernels.at(l, h), rec.q[h], rec.k[h], rec.v[h], m.mask).probs;
      out.push_back(std::move(m));
    }
  }
  return out;
}

namespace {

// Starts of full context windows, at most max_windows (0 = all).
std::vector<std::size_t> window_starts(std::size_t corpus_size, std::size_t len, std::size_t max_windows) {
  std::vector<std::size_t> starts;
  for (std::size_t s = 0; s + len <= corpus_size; s += len) {
    if (max_windows && starts.size() == max_windows) break;
    starts.push_back(s);
  }
  if (starts.empty()) {
    throw std::invalid_argument("corpus of " + std::to_string(corpus_size) + " bytes holds no window of " +
                                std::to_string(len));
  }
  return starts;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::ofstream open_csv(const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << std::setprecision(12);
  return os;
}

}  // namespace

LayerHellinger layerwise_hellinger(const ToyModel& model, const KernelBank& kernels, Policy policy,
                                   std::size_t budget, std::span<const std::uint8_t> corpus,
                                   std::size_t max_windows) {
  const auto& c = model.config;
  LayerHellinger res;
  res.sparse.assign(c.n_layers, 0.0);
  res.less.assign(c.n_layers, 0.0);
  std::size_t rows_per_layer = 0;
  for (std::size_t start : window_starts(corpus.size(), c.context_len, max_windows)) {
    const auto maps = attention_maps(model, kernels, policy, budget, corpus.subspan(start, c.context_len));
    for (const auto& m : maps) {
      for (std::size_t t = 0; t < m.full.rows(); ++t) {
        const auto f = m.full.row(t).subspan(0, t + 1);
        res.sparse[m.layer] += hellinger(f, m.sparse.row(t).subspan(0, t + 1));
        res.less[m.layer] += hellinger(f, m.less.row(t).subspan(0, t + 1));
      }
    }
    rows_per_layer += c.n_heads * c.context_len;
  }
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    res.sparse[l] /= static_cast<double>(rows_per_layer);
    res.less[l] /= static_cast<double>(rows_per_layer);
  }
  res.rows = rows_per_layer;
  return res;
}

std::vector<double> relative_singular_values(const Mat& a) {
  std::vector<double> s = svd_values(a);
  const double top = s.empty() ? 0.0 : s.front();
  for (double& v : s) v = top > 0.0 ? v / top : 0.0;
  return s;
}

std::vector<SvdCurve> residual_svd_report(const ToyModel& model, std::span<const std::uint8_t> corpus,
                                          std::size_t k, std::size_t max_windows) {
  const auto& c = model.config;
  if (k == 0) throw std::invalid_argument("residual_svd_report: k must be positive");
  std::vector<SvdCurve> curves(c.n_layers * c.n_heads);
  const auto starts = window_starts(corpus.size(), c.context_len, max_windows);
  for (std::size_t start : starts) {
    const auto fw = forward_full(model, corpus.subspan(start, c.context_len));
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      for (std::size_t h = 0; h < c.n_heads; ++h) {
        const auto& rec = fw.layers[l];
        const Mat p = head_attention_probs(rec.q[h], rec.k[h]);
        const Mat mask = topk_row_mask(p, k);
        Mat pk = p;
        for (std::size_t t = 0; t < p.rows(); ++t) {
          if (k >= t + 1) continue;  // row kept whole
          double z = 0.0;
          for (std::size_t s = 0; s <= t; ++s) z += (pk(t, s) = p(t, s) * mask(t, s));
          for (std::size_t s = 0; s <= t; ++s) pk(t, s) /= z;
        }
        const Mat a = matmul(p, rec.v[h]);
        const Mat delta = sub(a, matmul(pk, rec.v[h]));
        SvdCurve& cv = curves[l * c.n_heads + h];
        cv.layer = l;
        cv.head = h;
        const auto ra = relative_singular_values(a), rd = relative_singular_values(delta);
        cv.a_rel.resize(ra.size(), 0.0);
        cv.delta_rel.resize(rd.size(), 0.0);
        for (std::size_t i = 0; i < ra.size(); ++i) cv.a_rel[i] += ra[i] / static_cast<double>(starts.size());
        for (std::size_t i = 0; i < rd.size(); ++i) cv.delta_rel[i] += rd[i] / static_cast<double>(starts.size());
      }
    }
  }
  return curves;
}

void write_svd_csv(const std::filesystem::path& path, const std::vector<SvdCurve>& curves) {
  auto os = open_csv(path);
  os << "layer,head,index,a_rel,delta_rel\n";
  for (const auto& cv : curves)
    for (std::size_t i = 0; i < cv.a_rel.size(); ++i)
      os << cv.layer << ',' << cv.head << ',' << i << ',' << cv.a_rel[i] << ',' << cv.delta_rel[i] << '\n';
}

void write_matrix_csv(const std::filesystem::path& path, const Mat& m) {
  auto os = open_csv(path);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t j = 0; j < m.cols(); ++j) os << (j ? "," : "") << m(r, j);
    os << '\n';
  }
}

std::vector<HeadMaps> export_attention_maps(const ToyModel& model, const KernelBank& kernels, Policy policy,
                                            std::size_t budget, std::span<const std::uint8_t> prompt,
                                            const std::filesystem::path& dir) {
  auto maps = attention_maps(model, kernels, policy, budget, prompt);
  std::filesystem::create_directories(dir);
  for (const auto& m : maps) {
    const std::string suffix = "_" + std::to_string(m.layer) + "_" + std::to_string(m.head) + ".csv";
    write_matrix_csv(dir / ("attn_full" + suffix), m.full);
    write_matrix_csv(dir / ("attn_sparse" + suffix), m.sparse);
    write_matrix_csv(dir / ("attn_less" + suffix), m.less);
  }
  return maps;
}

std::size_t baseline_plus_extra(std::size_t rank) { return (rank + 1) / 2; }

const MethodResult& EvalReport::method(const std::string& name) const {
  for (const auto& m : methods)
    if (m.method == name) return m;
  throw std::out_of_range("no method '" + name + "' in report");
}

double EvalReport::gap_closed(const std::string& name) const {
  const double base = method("baseline").ppl.word_ppl, full = method("full").ppl.word_ppl;
  return (base - method(name).ppl.word_ppl) / (base - full);
}

std::vector<std::size_t> memory_curve(const ToyModel& model, const CacheBackend& backend,
                                      std::span<const std::uint8_t> tokens) {
  DecodeSession s(model, backend);
  const std::size_t heads = model.config.n_layers * model.config.n_heads;
  std::vector<std::size_t> out;
  for (std::uint8_t t : tokens) {
    (void)s.step(t);
    out.push_back(s.float_count() / heads);
  }
  return out;
}

EvalReport compare_methods(const ToyModel& model, const KernelBank& kernels, Policy policy, std::size_t budget,
                           std::span<const std::uint8_t> corpus, const EvalOptions& opts) {
  if (kernels.empty()) throw std::invalid_argument("compare_methods: LESS needs trained kernels");
  const auto& c = model.config;
  const std::size_t D = c.head_dim(), R = kernels.rank();
  EvalReport rep;
  rep.policy = policy;
  rep.budget = budget;
  rep.rank = R;
  const std::size_t plus = budget + baseline_plus_extra(R);
  const CacheBackend backends[] = {CacheBackend::full(), CacheBackend::sparse(policy, budget),
                                   CacheBackend::sparse(policy, plus), CacheBackend::less(policy, budget, kernels)};
  const char* names[] = {"full", "baseline", "baseline+", "less"};
  const std::size_t budgets[] = {c.context_len, budget, plus, budget};
  for (int i = 0; i < 4; ++i) {
    MethodResult m;
    m.method = names[i];
    m.budget = budgets[i];
    m.ppl = perplexity(model, corpus, backends[i], opts.max_windows);
    m.storage_floats = 2 * D * std::min(budgets[i], c.context_len) + (i == 3 ? R * D : 0);
    m.floats_per_head = m.storage_floats + (i == 3 ? R : 0);
    rep.methods.push_back(std::move(m));
  }
  rep.hellinger = layerwise_hellinger(model, kernels, policy, budget, corpus, opts.hellinger_windows);
  const std::size_t steps = std::min(corpus.size(), opts.memory_steps ? opts.memory_steps : c.context_len);
  const auto tokens = corpus.first(steps);
  rep.memory_full = memory_curve(model, backends[0], tokens);
  rep.memory_baseline = memory_curve(model, backends[1], tokens);
  rep.memory_baseline_plus = memory_curve(model, backends[2], tokens);
  rep.memory_less = memory_curve(model, backends[3], tokens);
  return rep;
}

void write_eval_csv(const std::filesystem::path& path, const std::vector<EvalReport>& reports) {
  auto os = open_csv(path);
  os << "policy,budget,method,method_budget,word_ppl,byte_ppl,total_nll,bytes,words,floats_per_head,storage_floats\n";
  for (const auto& r : reports)
    for (const auto& m : r.methods)
      os << policy_name(r.policy) << ',' << r.budget << ',' << m.method << ',' << m.budget << ',' << m.ppl.word_ppl
         << ',' << m.ppl.byte_ppl << ',' << m.ppl.total_nll << ',' << m.ppl.bytes << ',' << m.ppl.words << ','
         << m.floats_per_head << ',' << m.storage_floats << '\n';
}

void write_hellinger_csv(const std::filesystem::path& path, const EvalReport& report) {
  auto os = open_csv(path);
  os << "layer,sparse,less\n";
  for (std::size_t l = 0; l < report.hellinger.sparse.size(); ++l)
    os << l << ',' << report.hellinger.sparse[l] << ',' << report.hellinger.less[l] << '\n';
}

void write_memory_csv(const std::filesystem::path& path, const EvalReport& report) {
  auto os = open_csv(path);
  os << "t,full,baseline,baseline+,less\n";
  for (std::size_t t = 0; t < report.memory_full.size(); ++t)
    os << t + 1 << ',' << report.memory_full[t] << ',' << report.memory_baseline[t] << ','
       << report.memory_baseline_plus[t] << ',' << report.memory_less[t] << '\n';
}

void write_position_nll_csv(const std::filesystem::path& path, const EvalReport& report) {
  auto os = open_csv(path);
  os << "position";
  for (const auto& m : report.methods) os << ',' << m.method;
  os << '\n';
  const std::size_t n = report.methods.front().ppl.position_nll.size();
  for (std::size_t i = 0; i < n; ++i) {
    if (report.methods.front().ppl.position_count[i] == 0) break;
    os << i + 1;
    for (const auto& m : report.methods)
      os << ',' << m.ppl.position_nll[i] / static_cast<double>(m.ppl.position_count[i]);
    os << '\n';
  }
}

const BenchRow& BenchReport::row(const std::string& method) const {
  for (const auto& r : rows)
    if (r.method == method) return r;
  throw std::out_of_range("no bench row '" + method + "'");
}

double BenchReport::lowrank_overhead() const {
  const BenchRow& r = row("less");
  return (r.phases.kernels + r.phases.state_update) / r.decode;
}

BenchReport bench_decode(const ToyModel& model, const KernelBank& kernels, Policy policy, std::size_t budget,
                         std::span<const std::uint8_t> corpus, std::size_t prompt_len, std::size_t gen_len,
                         std::size_t reps) {
  if (reps < 3) throw std::invalid_argument("bench_decode: reps must be >= 3");
  if (prompt_len == 0 || corpus.empty()) throw std::invalid_argument("bench_decode: empty prompt");
  std::vector<std::uint8_t> prompt(prompt_len);
  for (std::size_t i = 0; i < prompt_len; ++i) prompt[i] = corpus[i % corpus.size()];

  BenchReport rep{prompt_len, gen_len, budget, reps, {}};
  const CacheBackend backends[] = {CacheBackend::full(), CacheBackend::sparse(policy, budget),
                                   CacheBackend::less(policy, budget, kernels)};
  const char* names[] = {"full", "baseline", "less"};
  std::vector<std::vector<PhaseTimes>> phases(3);
  rep.rows.resize(3);
  // Methods are interleaved within each repetition so drift hits all alike.
  for (std::size_t r = 0; r < reps; ++r) {
    for (int i = 0; i < 3; ++i) {
      const auto d = decode(model, prompt, gen_len, backends[i], true);
      rep.rows[i].reps.push_back(d.decode_seconds);
      phases[i].push_back(d.times);
    }
  }
  for (int i = 0; i < 3; ++i) {
    BenchRow& row = rep.rows[i];
    row.method = names[i];
    row.decode = median(row.reps);
    auto med = [&](double PhaseTimes::*f) {
      std::vector<double> v;
      for (const auto& p : phases[i]) v.push_back(p.*f);
      return median(v);
    };
    row.phases.eviction = med(&PhaseTimes::eviction);
    row.phases.kernels = med(&PhaseTimes::kernels);
    row.phases.synthesis = med(&PhaseTimes::synthesis);
    row.phases.state_update = med(&PhaseTimes::state_update);
  }
  return rep;
}

void write_bench_csv(const std::filesystem::path& path, const BenchReport& report) {
  auto os = open_csv(path);
  os << "method,prompt_len,gen_len,budget,reps,decode_s,eviction_s,kernels_s,synthesis_s,state_update_s,other_s\n";
  for (const auto& r : report.rows) {
    const auto& p = r.phases;
    const double other = r.decode - (p.eviction + p.kernels + p.synthesis + p.state_update);
    os << r.method << ',' << report.prompt_len << ',' << report.gen_len << ',' << report.budget << ','
       << report.reps << ',' << r.decode << ',' << p.eviction << ',' << p.kernels << ',' << p.synthesis << ','
       << p.state_update << ',' << other << '\n';
  }
}

}  // namespace less
