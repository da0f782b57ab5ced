#include "less/trainer.hpp"

#include <atomic>
#include <cmath>
#include <cstring>
#include <exception>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <string_view>
#include <stdexcept>
#include <thread>

#include "less/binio.hpp"

namespace less {

// ---- traces -----------------------------------------------------------------

const TraceRecord& AttnTrace::at(std::size_t seq, std::size_t layer) const {
  if (seq >= n_seqs || layer >= n_layers) {
    throw std::out_of_range("trace record (" + std::to_string(seq) + ", " + std::to_string(layer) +
                            ") out of range");
  }
  return records[seq * n_layers + layer];
}

void AttnTrace::validate() const {
  if (head_dim * n_heads != d_model) throw std::invalid_argument("trace: n_heads·D != d_model");
  if (w_o.size() != n_layers || records.size() != n_seqs * n_layers) {
    throw std::invalid_argument("trace: record count does not match header");
  }
  for (const Mat& w : w_o)
    if (w.rows() != d_model || w.cols() != d_model) throw std::invalid_argument("trace: W_O shape mismatch");
  for (const auto& r : records) {
    if (r.q.size() != n_heads || r.k.size() != n_heads || r.v.size() != n_heads) {
      throw std::invalid_argument("trace: head count mismatch in record");
    }
    for (std::size_t h = 0; h < n_heads; ++h)
      for (const Mat* m : {&r.q[h], &r.k[h], &r.v[h]})
        if (m->rows() != seq_len || m->cols() != head_dim) throw std::invalid_argument("trace: Q/K/V shape mismatch");
    if (r.output.rows() != seq_len || r.output.cols() != d_model) {
      throw std::invalid_argument("trace: output shape mismatch");
    }
  }
}

namespace {

struct Fnv {
  std::uint64_t h = 1469598103934665603ull;
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  }
  void u32(std::uint32_t v) { bytes(&v, 4); }
  void mat(const Mat& m) {
    for (double v : m.data()) {
      const float f = static_cast<float>(v);
      bytes(&f, 4);
    }
  }
};

}  // namespace

std::uint64_t model_hash(const ToyModel& model) {
  Fnv f;
  const auto& c = model.config;
  for (std::size_t v : {c.vocab, c.d_model, c.n_heads, c.n_layers, c.context_len}) f.u32(static_cast<std::uint32_t>(v));
  f.u32(c.seed);
  f.mat(model.tok_emb);
  for (const auto& w : model.layers)
    for (const Mat* m : {&w.wq, &w.wk, &w.wv, &w.wo, &w.ln1, &w.ln2, &w.w1, &w.w2}) f.mat(*m);
  return f.h;
}

AttnTrace collect_traces(const ToyModel& model, std::span<const std::uint8_t> corpus, std::size_t n_seqs,
                         std::size_t seq_len, std::uint64_t seed) {
  const auto& c = model.config;
  if (n_seqs == 0) throw std::invalid_argument("collect_traces: n_seqs must be positive");
  if (seq_len < 2 || seq_len > c.context_len) {
    throw std::invalid_argument("collect_traces: seq_len must be in [2, " + std::to_string(c.context_len) + "]");
  }
  const std::size_t n_windows = corpus.size() / seq_len;
  if (n_windows < n_seqs) {
    throw std::invalid_argument("collect_traces: corpus of " + std::to_string(corpus.size()) + " bytes holds " +
                                std::to_string(n_windows) + " windows of " + std::to_string(seq_len) + ", need " +
                                std::to_string(n_seqs));
  }
  std::vector<std::size_t> idx(n_windows);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = 0; i < n_seqs; ++i) std::swap(idx[i], idx[i + rng.below(n_windows - i)]);

  AttnTrace tr;
  tr.n_seqs = n_seqs;
  tr.n_layers = c.n_layers;
  tr.n_heads = c.n_heads;
  tr.seq_len = seq_len;
  tr.head_dim = c.head_dim();
  tr.d_model = c.d_model;
  tr.model_hash = model_hash(model);
  for (const auto& w : model.layers) tr.w_o.push_back(round_to_float(w.wo));
  for (std::size_t s = 0; s < n_seqs; ++s) {
    const auto fw = forward_full(model, corpus.subspan(idx[s] * seq_len, seq_len));
    for (const auto& l : fw.layers) {
      TraceRecord r;
      for (std::size_t h = 0; h < c.n_heads; ++h) {
        r.q.push_back(round_to_float(l.q[h]));
        r.k.push_back(round_to_float(l.k[h]));
        r.v.push_back(round_to_float(l.v[h]));
      }
      r.output = round_to_float(l.attn_out);
      tr.records.push_back(std::move(r));
    }
  }
  return tr;
}

void write_trace(const std::filesystem::path& path, const AttnTrace& tr) {
  tr.validate();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  binio::write_magic(os, "LESSTRC1");
  for (std::size_t v : {tr.n_seqs, tr.n_layers, tr.n_heads, tr.seq_len, tr.head_dim, tr.d_model}) {
    binio::write_u32(os, static_cast<std::uint32_t>(v));
  }
  binio::write_u64(os, tr.model_hash);
  for (const Mat& w : tr.w_o) binio::write_mat(os, w);
  for (const auto& r : tr.records) {
    for (std::size_t h = 0; h < tr.n_heads; ++h) {
      binio::write_mat(os, r.q[h]);
      binio::write_mat(os, r.k[h]);
      binio::write_mat(os, r.v[h]);
    }
    binio::write_mat(os, r.output);
  }
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

AttnTrace read_trace(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open trace file " + path.string());
  binio::expect_magic(is, "LESSTRC1", path.string());
  AttnTrace tr;
  tr.n_seqs = binio::read_u32(is);
  tr.n_layers = binio::read_u32(is);
  tr.n_heads = binio::read_u32(is);
  tr.seq_len = binio::read_u32(is);
  tr.head_dim = binio::read_u32(is);
  tr.d_model = binio::read_u32(is);
  tr.model_hash = binio::read_u64(is);
  if (tr.head_dim * tr.n_heads != tr.d_model) throw std::runtime_error("trace header inconsistent: " + path.string());
  for (std::size_t l = 0; l < tr.n_layers; ++l) tr.w_o.push_back(binio::read_mat(is, tr.d_model, tr.d_model));
  for (std::size_t i = 0; i < tr.n_seqs * tr.n_layers; ++i) {
    TraceRecord r;
    for (std::size_t h = 0; h < tr.n_heads; ++h) {
      r.q.push_back(binio::read_mat(is, tr.seq_len, tr.head_dim));
      r.k.push_back(binio::read_mat(is, tr.seq_len, tr.head_dim));
      r.v.push_back(binio::read_mat(is, tr.seq_len, tr.head_dim));
    }
    r.output = binio::read_mat(is, tr.seq_len, tr.d_model);
    tr.records.push_back(std::move(r));
  }
  if (is.peek() != std::char_traits<char>::eof()) throw std::runtime_error("trailing bytes in " + path.string());
  return tr;
}

// ---- loss -------------------------------------------------------------------

void TrainConfig::validate() const {
  if (epochs == 0 || halve_every == 0 || batch == 0 || hidden == 0 || rank == 0) {
    throw std::invalid_argument("train config: counts must be positive");
  }
  if (!(lr0 > 0.0)) throw std::invalid_argument("train config: lr0 must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("train config: dropout must be in [0, 1)");
  if (!(beta > 0.0 && beta <= 1.0)) throw std::invalid_argument("train config: beta must be in (0, 1]");
}

double lr_at(const TrainConfig& cfg, std::size_t epoch) {
  if (epoch >= cfg.epochs) {
    throw std::out_of_range("lr_at: epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(cfg.epochs) +
                            ")");
  }
  return cfg.lr0 * std::ldexp(1.0, -static_cast<int>(epoch / cfg.halve_every));
}

Mat head_attention_probs(const Mat& q, const Mat& k) {
  const std::size_t n = q.rows();
  Mat s = scale(matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(q.cols())));
  for (std::size_t i = 0; i < n; ++i) {
    softmax_inplace(s.row(i).subspan(0, i + 1));
    for (std::size_t j = i + 1; j < n; ++j) s(i, j) = 0.0;
  }
  return s;
}

Mat trace_mask(const AttnTrace& trace, std::size_t seq, std::size_t layer, std::size_t head, Policy policy,
               std::size_t budget) {
  const auto& r = trace.at(seq, layer);
  return build_lm_mask(policy, budget, head_attention_probs(r.q.at(head), r.k.at(head)));
}

HeadSample make_head_sample(const AttnTrace& trace, std::size_t seq, std::size_t layer, std::size_t head,
                            const Mat& mask) {
  if (head >= trace.n_heads) throw std::out_of_range("head index out of range");
  const auto& r = trace.at(seq, layer);
  const std::size_t d = trace.head_dim;
  if (mask.rows() != trace.seq_len || mask.cols() != trace.seq_len) {
    throw std::invalid_argument("mask shape " + mask.shape_str() + " does not match trace length " +
                                std::to_string(trace.seq_len));
  }
  HeadSample s{r.q[head], r.k[head], r.v[head], mask, slice_rows(trace.w_o[layer], head * d, (head + 1) * d), {},
               MaskedScores::build(r.q[head], r.k[head], mask)};
  Mat others(trace.seq_len, trace.d_model);
  for (std::size_t h = 0; h < trace.n_heads; ++h) {
    if (h == head) continue;
    set_cols(others, h * d, matmul(head_attention_probs(r.q[h], r.k[h]), r.v[h]));
  }
  s.target = sub(r.output, matmul(others, trace.w_o[layer]));
  return s;
}

ad::Var residual_loss(ad::Tape& t, const KernelVars& kv, const HeadSample& s, double dropout, Rng* rng) {
  ad::Var pq = phi(t, kv, t.constant(s.q), dropout, rng);
  ad::Var pk = psi(t, kv, t.constant(s.k), dropout, rng);
  const auto att = masked_attention(t, pq, pk, s.scores, t.constant(s.v));
  ad::Var pred = ad::matmul(t, att.output, t.constant(s.w_o_rows));
  return ad::mean_square(t, ad::sub(t, pred, t.constant(s.target)));
}

double residual_loss(const KernelParams& params, const HeadSample& sample) {
  ad::Tape t;
  return t.value(residual_loss(t, KernelVars::fixed(t, params), sample, 0.0, nullptr))[0];
}

double residual_loss(const KernelParams& params, const AttnTrace& trace, std::size_t seq, std::size_t layer,
                     std::size_t head, const Mat& mask) {
  if (params.head_dim() != trace.head_dim) throw std::invalid_argument("kernel head_dim does not match trace");
  return residual_loss(params, make_head_sample(trace, seq, layer, head, mask));
}

// ---- training ---------------------------------------------------------------

namespace {

double mean_loss(const KernelParams& p, const std::vector<HeadSample>& samples) {
  double total = 0.0;
  for (const auto& s : samples) total += residual_loss(p, s);
  return total / static_cast<double>(samples.size());
}

std::uint64_t job_seed(std::uint64_t seed, std::size_t layer, std::size_t head, std::uint64_t salt) {
  std::uint64_t x = seed * 0x9e3779b97f4a7c15ull + (layer << 20) + (head << 8) + salt;
  x ^= x >> 31;
  x *= 0xbf58476d1ce4e5b9ull;
  x ^= x >> 27;
  return x;
}

struct Packed {
  Mat w[5];
  Mat s[3];
  std::vector<Mat*> ptrs() { return {&w[0], &w[1], &w[2], &w[3], &w[4], &s[0], &s[1], &s[2]}; }
};

Packed pack(const KernelParams& p) {
  return Packed{{p.phi_w1, p.phi_w2, p.psi_w1, p.psi_w2, p.psi_w3},
                {Mat(1, 1, p.psi_s1), Mat(1, 1, p.psi_s2), Mat(1, 1, p.psi_s3)}};
}

void unpack(const Packed& k, KernelParams& p) {
  p.phi_w1 = k.w[0];
  p.phi_w2 = k.w[1];
  p.psi_w1 = k.w[2];
  p.psi_w2 = k.w[3];
  p.psi_w3 = k.w[4];
  p.psi_s1 = k.s[0][0];
  p.psi_s2 = k.s[1][0];
  p.psi_s3 = k.s[2][0];
}

KernelParams rounded(KernelParams p) {
  for (Mat* m : {&p.phi_w1, &p.phi_w2, &p.psi_w1, &p.psi_w2, &p.psi_w3}) *m = round_to_float(*m);
  for (double* s : {&p.psi_s1, &p.psi_s2, &p.psi_s3}) *s = static_cast<double>(static_cast<float>(*s));
  return p;
}

}  // namespace

TrainResult train_layer(const AttnTrace& traces, std::size_t layer, std::size_t head, const TrainConfig& cfg) {
  cfg.validate();
  traces.validate();
  if (layer >= traces.n_layers || head >= traces.n_heads) {
    throw std::out_of_range("train_layer: (layer " + std::to_string(layer) + ", head " + std::to_string(head) +
                            ") not in trace");
  }
  const std::size_t budget = budget_tokens(traces.seq_len, cfg.beta);
  std::vector<HeadSample> samples;
  for (std::size_t s = 0; s < traces.n_seqs; ++s) {
    samples.push_back(
        make_head_sample(traces, s, layer, head, trace_mask(traces, s, layer, head, cfg.policy, budget)));
  }

  TrainResult res;
  res.layer = layer;
  res.head = head;
  Rng init_rng(job_seed(cfg.seed, layer, head, 1));
  Rng order_rng(job_seed(cfg.seed, layer, head, 2));
  Rng drop_rng(job_seed(cfg.seed, layer, head, 3));
  res.params = rounded(KernelParams::init(traces.head_dim, cfg.hidden, cfg.rank, init_rng));
  res.initial_loss = mean_loss(res.params, samples);
  KernelParams best = res.params;
  double best_loss = res.initial_loss;
  res.sparse_only_loss = mean_loss(KernelParams::zeros(traces.head_dim, cfg.hidden, cfg.rank), samples);

  Packed packed = pack(res.params);
  const auto ptrs = packed.ptrs();
  Adam opt(std::vector<const Mat*>(ptrs.begin(), ptrs.end()), cfg.adam);
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t step = 0;
  const auto where = [&](std::size_t epoch) {
    return "non-finite training loss at layer " + std::to_string(layer) + " head " + std::to_string(head) +
           " epoch " + std::to_string(epoch) + " step " + std::to_string(step);
  };
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) try {
    const double lr = lr_at(cfg, epoch);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[order_rng.below(i)]);
    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch) {
      const std::size_t b1 = std::min(order.size(), b0 + cfg.batch);
      KernelParams cur = res.params;
      unpack(packed, cur);
      ad::Tape t;
      const KernelVars kv = KernelVars::track(t, cur);
      ad::Var loss = residual_loss(t, kv, samples[order[b0]], cfg.dropout, &drop_rng);
      for (std::size_t i = b0 + 1; i < b1; ++i)
        loss = ad::add(t, loss, residual_loss(t, kv, samples[order[i]], cfg.dropout, &drop_rng));
      if (b1 - b0 > 1) loss = ad::scale(t, loss, 1.0 / static_cast<double>(b1 - b0));
      const double lval = t.value(loss)[0];
      if (!std::isfinite(lval)) throw std::domain_error(where(epoch));
      t.backward(loss);
      const KernelParams g = kv.gradients(t, cur);
      Packed gp = pack(g);
      const auto gptr = gp.ptrs();
      opt.step(ptrs, std::vector<const Mat*>(gptr.begin(), gptr.end()), lr);
      res.curve.push_back({epoch, step++, lval, lr});
    }
    KernelParams cur = res.params;
    unpack(packed, cur);
    cur = rounded(std::move(cur));
    const double eval = mean_loss(cur, samples);
    res.epoch_eval_loss.push_back(eval);
    if (eval < best_loss) {
      best_loss = eval;
      best = std::move(cur);
    }
  } catch (const std::domain_error& e) {
    // Overflowing kernels can fail inside normalisation before the loss is seen.
    if (std::string_view(e.what()).starts_with("non-finite training loss")) throw;
    throw std::domain_error(where(epoch) + " (" + e.what() + ")");
  }
  res.params = std::move(best);
  res.final_loss = best_loss;
  return res;
}

std::vector<TrainResult> train_all(const AttnTrace& traces, const std::vector<std::size_t>& layers,
                                   const TrainConfig& cfg, std::size_t jobs) {
  std::vector<std::pair<std::size_t, std::size_t>> work;
  for (std::size_t l : layers) {
    if (l >= traces.n_layers) throw std::out_of_range("layer " + std::to_string(l) + " not in trace");
    for (std::size_t h = 0; h < traces.n_heads; ++h) work.emplace_back(l, h);
  }
  std::vector<TrainResult> out(work.size());
  std::vector<std::exception_ptr> errors(work.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < work.size(); i = next++) {
      try {
        out[i] = train_layer(traces, work[i].first, work[i].second, cfg);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t n = std::max<std::size_t>(1, std::min(jobs, work.size()));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < n; ++i) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

KernelBank bank_from_results(const std::vector<TrainResult>& results, std::size_t n_layers, std::size_t n_heads) {
  if (results.empty()) throw std::invalid_argument("bank_from_results: no trained kernels");
  const KernelParams& like = results.front().params;
  std::vector<FeatureMap> maps(n_layers * n_heads,
                               KernelParams::zeros(like.head_dim(), like.hidden(), like.rank()));
  for (const auto& r : results) {
    if (r.layer >= n_layers || r.head >= n_heads) throw std::out_of_range("trained kernel outside model shape");
    maps[r.layer * n_heads + r.head] = r.params;
  }
  return KernelBank(n_layers, n_heads, std::move(maps));
}

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossPoint>& curve) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "epoch,step,loss,lr\n" << std::setprecision(10);
  for (const auto& p : curve) os << p.epoch << ',' << p.step << ',' << p.loss << ',' << p.lr << '\n';
}

}  // namespace less
