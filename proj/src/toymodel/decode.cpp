#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>

#include "less/toymodel.hpp"

namespace less {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

// Exact causal attention over a prompt, summed in the same order as the
// batch forward pass. probs is S×S.
Mat prompt_attention(const Mat& q, const Mat& k, const Mat& v, Mat* probs) {
  const std::size_t n = q.rows(), d = q.cols();
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  Mat s = matmul_nt(q, k);
  for (std::size_t i = 0; i < n; ++i) {
    auto row = s.row(i);
    for (std::size_t j = 0; j <= i; ++j) row[j] *= inv_sqrt_d;
    softmax_inplace(row.subspan(0, i + 1));
    for (std::size_t j = i + 1; j < n; ++j) row[j] = 0.0;
  }
  Mat out = matmul(s, v);
  if (probs) *probs = std::move(s);
  return out;
}

// Softmax attention of q over n row-major cached rows.
std::vector<double> cached_softmax(std::span<const double> q, const std::vector<double>& keys, std::size_t n,
                                   std::vector<double>& probs) {
  const std::size_t d = q.size();
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  probs.resize(n);
  for (std::size_t s = 0; s < n; ++s) {
    double l = 0.0;
    const double* kr = keys.data() + s * d;
    for (std::size_t j = 0; j < d; ++j) l += q[j] * kr[j];
    probs[s] = l * inv_sqrt_d;
  }
  softmax_inplace(probs);
  return probs;
}

std::vector<double> weighted_values(const std::vector<double>& probs, const std::vector<double>& values,
                                    std::size_t d) {
  std::vector<double> out(d, 0.0);
  for (std::size_t s = 0; s < probs.size(); ++s) {
    const double p = probs[s];
    const double* vr = values.data() + s * d;
    for (std::size_t j = 0; j < d; ++j) out[j] += p * vr[j];
  }
  return out;
}

class FullHead final : public HeadCache {
 public:
  explicit FullHead(std::size_t d) : d_(d) {}

  Mat prefill(const Mat& q, const Mat& k, const Mat& v, PhaseTimes*) override {
    keys_.insert(keys_.end(), k.data().begin(), k.data().end());
    values_.insert(values_.end(), v.data().begin(), v.data().end());
    n_ += k.rows();
    return prompt_attention(q, k, v, nullptr);
  }

  std::vector<double> step(std::size_t, std::span<const double> q, std::span<const double> k,
                           std::span<const double> v, PhaseTimes*) override {
    keys_.insert(keys_.end(), k.begin(), k.end());
    values_.insert(values_.end(), v.begin(), v.end());
    ++n_;
    cached_softmax(q, keys_, n_, probs_);
    return weighted_values(probs_, values_, d_);
  }

  std::size_t float_count() const override { return 2 * d_ * n_; }

 private:
  std::size_t d_;
  std::size_t n_ = 0;
  std::vector<double> keys_, values_, probs_;
};

// Appends a prompt to a policy cache and reduces it to budget, using the
// full prompt attention for the policy's scores.
DiscardSet load_prompt(SparseCache& cache, std::size_t first_pos, const Mat& k, const Mat& v, const Mat& probs) {
  const std::size_t n = k.rows();
  for (std::size_t i = 0; i < n; ++i) cache.append(first_pos + i, k.row(i), v.row(i));
  if (cache.size() <= cache.budget()) {
    if (cache.policy() == Policy::H2O) {
      std::vector<double> col(n, 0.0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j <= i; ++j) col[j] += probs(i, j);
      cache.accumulate(col);
    }
    return {};
  }
  std::vector<double> last;
  if (cache.policy() == Policy::H2O) {
    std::vector<double> col(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j <= i; ++j) col[j] += probs(i, j);
    cache.accumulate(col);
  } else if (cache.policy() == Policy::TOVA) {
    last.assign(probs.row(n - 1).begin(), probs.row(n - 1).end());
  }
  return evict_to_budget(cache, last);
}

class SparseHead final : public HeadCache {
 public:
  SparseHead(Policy p, std::size_t budget, std::size_t d) : cache_(p, budget, d) {}

  Mat prefill(const Mat& q, const Mat& k, const Mat& v, PhaseTimes* times) override {
    Mat probs;
    Mat out = prompt_attention(q, k, v, &probs);
    const auto t0 = Clock::now();
    load_prompt(cache_, 0, k, v, probs);
    if (times) times->eviction += seconds_since(t0);
    return out;
  }

  std::vector<double> step(std::size_t pos, std::span<const double> q, std::span<const double> k,
                           std::span<const double> v, PhaseTimes* times) override {
    cache_.append(pos, k, v);
    cached_softmax(q, cache_.keys(), cache_.size(), probs_);
    auto out = weighted_values(probs_, cache_.values(), cache_.head_dim());
    const auto t0 = Clock::now();
    policy_step(cache_, probs_);
    if (times) times->eviction += seconds_since(t0);
    return out;
  }

  std::size_t float_count() const override { return cache_.float_count(); }

 private:
  SparseCache cache_;
  std::vector<double> probs_;
};

class LessHead final : public HeadCache {
 public:
  LessHead(const FeatureMap& fm, Policy p, std::size_t budget, std::size_t d)
      : fm_(fm), cache_(p, budget, d, rank_of(fm)) {}

  Mat prefill(const Mat& q, const Mat& k, const Mat& v, PhaseTimes* times) override {
    Mat probs;
    Mat out = prompt_attention(q, k, v, &probs);
    auto t0 = Clock::now();
    const DiscardSet discards = load_prompt(cache_.sparse, 0, k, v, probs);
    if (times) times->eviction += seconds_since(t0);
    t0 = Clock::now();
    absorb(fm_, cache_.state, discards);
    if (times) times->state_update += seconds_since(t0);
    return out;
  }

  std::vector<double> step(std::size_t pos, std::span<const double> q, std::span<const double> k,
                           std::span<const double> v, PhaseTimes* times) override {
    return less_decode_step(fm_, cache_, pos, q, k, v, times).output;
  }

  std::size_t float_count() const override { return cache_.float_count(); }

 private:
  const FeatureMap& fm_;
  LessCache cache_;
};

// Layer norm of one row; mirrors the tape op's arithmetic exactly.
void layer_norm_row(std::span<const double> x, const Mat& gain, std::span<double> out) {
  const std::size_t c = x.size();
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(c);
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(c);
  const double inv_std = 1.0 / std::sqrt(var + 1e-5);
  for (std::size_t j = 0; j < c; ++j) out[j] = ((x[j] - mean) * inv_std) * gain[j];
}

// y = x·W for a single row, same summation order as matmul.
void vec_mat(std::span<const double> x, const Mat& w, std::span<double> y) {
  std::fill(y.begin(), y.end(), 0.0);
  for (std::size_t i = 0; i < w.rows(); ++i) {
    const double xi = x[i];
    const double* wr = w.row(i).data();
    for (std::size_t j = 0; j < w.cols(); ++j) y[j] += xi * wr[j];
  }
}

}  // namespace

CacheBackend CacheBackend::full() { return {}; }

CacheBackend CacheBackend::sparse(Policy policy, std::size_t budget) {
  CacheBackend b;
  b.kind = Kind::Sparse;
  b.policy = policy;
  b.budget = budget;
  return b;
}

CacheBackend CacheBackend::less(Policy policy, std::size_t budget, const KernelBank& kernels) {
  CacheBackend b;
  b.kind = Kind::Less;
  b.policy = policy;
  b.budget = budget;
  b.kernels = &kernels;
  return b;
}

std::unique_ptr<HeadCache> CacheBackend::make_head(std::size_t layer, std::size_t head, std::size_t head_dim) const {
  switch (kind) {
    case Kind::Full: return std::make_unique<FullHead>(head_dim);
    case Kind::Sparse: return std::make_unique<SparseHead>(policy, budget, head_dim);
    case Kind::Less: {
      if (!kernels || kernels->empty()) throw std::invalid_argument("LESS backend needs kernels");
      const FeatureMap& fm = kernels->at(layer, head);
      if (head_dim_of(fm) != head_dim) {
        throw std::invalid_argument("kernel head_dim " + std::to_string(head_dim_of(fm)) + " != model head_dim " +
                                    std::to_string(head_dim));
      }
      return std::make_unique<LessHead>(fm, policy, budget, head_dim);
    }
  }
  throw std::logic_error("unknown cache backend");
}

std::string CacheBackend::label() const {
  switch (kind) {
    case Kind::Full: return "full";
    case Kind::Sparse: return std::string(policy_name(policy)) + "@" + std::to_string(budget);
    case Kind::Less: return "less-" + std::string(policy_name(policy)) + "@" + std::to_string(budget);
  }
  return "?";
}

DecodeSession::DecodeSession(const ToyModel& model, const CacheBackend& backend) : model_(model) {
  const auto& c = model.config;
  if (backend.kind == CacheBackend::Kind::Less &&
      (backend.kernels->n_layers() != c.n_layers || backend.kernels->n_heads() != c.n_heads)) {
    throw std::invalid_argument("kernel bank shape does not match model");
  }
  for (std::size_t l = 0; l < c.n_layers; ++l)
    for (std::size_t h = 0; h < c.n_heads; ++h) heads_.push_back(backend.make_head(l, h, c.head_dim()));
}

std::size_t DecodeSession::float_count() const {
  std::size_t n = 0;
  for (const auto& h : heads_) n += h->float_count();
  return n;
}

Mat DecodeSession::prefill(std::span<const std::uint8_t> tokens) {
  if (pos_ != 0) throw std::logic_error("prefill must be the first call of a session");
  if (tokens.empty()) throw std::invalid_argument("prefill: empty prompt");
  if (tokens.size() > kMaxDecodePositions) throw std::invalid_argument("prefill: prompt exceeds position cap");
  const auto& c = model_.config;
  const std::size_t n = tokens.size(), d = c.d_model, hd = c.head_dim();
  Mat x = positional_table(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    auto row = x.row(i);
    const auto e = model_.tok_emb.row(tokens[i]);
    for (std::size_t j = 0; j < d; ++j) row[j] = e[j] + row[j];
  }
  PhaseTimes* times = timing_ ? &times_ : nullptr;
  Mat h(n, d);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto& w = model_.layers[l];
    for (std::size_t i = 0; i < n; ++i) layer_norm_row(x.row(i), w.ln1, h.row(i));
    const Mat q = matmul(h, w.wq), k = matmul(h, w.wk), v = matmul(h, w.wv);
    Mat a(n, d);
    for (std::size_t hh = 0; hh < c.n_heads; ++hh) {
      const std::size_t c0 = hh * hd, c1 = c0 + hd;
      set_cols(a, c0,
               heads_[l * c.n_heads + hh]->prefill(slice_cols(q, c0, c1), slice_cols(k, c0, c1),
                                                   slice_cols(v, c0, c1), times));
    }
    x = add(x, matmul(a, w.wo));
    for (std::size_t i = 0; i < n; ++i) layer_norm_row(x.row(i), w.ln2, h.row(i));
    x = add(x, matmul(gelu(matmul(h, w.w1)), w.w2));
  }
  pos_ = n;
  return matmul_nt(x, model_.tok_emb);
}

std::vector<double> DecodeSession::step(std::uint8_t token) {
  if (pos_ >= kMaxDecodePositions) throw std::length_error("decode position cap reached");
  const auto& c = model_.config;
  const std::size_t d = c.d_model, hd = c.head_dim(), f = 4 * d;
  std::vector<double> x(d), h(d), q(d), k(d), v(d), a(d), o(d), f1(f), f2(d);
  positional_row(pos_, d, x);
  const auto e = model_.tok_emb.row(token);
  for (std::size_t j = 0; j < d; ++j) x[j] = e[j] + x[j];
  PhaseTimes* times = timing_ ? &times_ : nullptr;
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto& w = model_.layers[l];
    layer_norm_row(x, w.ln1, h);
    vec_mat(h, w.wq, q);
    vec_mat(h, w.wk, k);
    vec_mat(h, w.wv, v);
    for (std::size_t hh = 0; hh < c.n_heads; ++hh) {
      const std::size_t c0 = hh * hd;
      auto sub = [&](std::vector<double>& src) { return std::span<const double>(src.data() + c0, hd); };
      const auto out = heads_[l * c.n_heads + hh]->step(pos_, sub(q), sub(k), sub(v), times);
      std::copy(out.begin(), out.end(), a.begin() + static_cast<std::ptrdiff_t>(c0));
    }
    vec_mat(a, w.wo, o);
    for (std::size_t j = 0; j < d; ++j) x[j] = x[j] + o[j];
    layer_norm_row(x, w.ln2, h);
    vec_mat(h, w.w1, f1);
    for (double& z : f1) z = gelu(z);
    vec_mat(f1, w.w2, f2);
    for (std::size_t j = 0; j < d; ++j) x[j] = x[j] + f2[j];
  }
  ++pos_;
  std::vector<double> logits(c.vocab);
  for (std::size_t t = 0; t < c.vocab; ++t) {
    const auto er = model_.tok_emb.row(t);
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += x[j] * er[j];
    logits[t] = s;
  }
  return logits;
}

namespace {

std::uint8_t argmax(std::span<const double> logits) {
  return static_cast<std::uint8_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

double row_nll(std::span<const double> logits, std::size_t target) {
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double se = 0.0;
  for (double v : logits) se += std::exp(v - mx);
  return -(logits[target] - mx - std::log(se));
}

bool is_space(std::uint8_t b) { return b == ' ' || b == '\n' || b == '\t' || b == '\r' || b == '\f' || b == '\v'; }

}  // namespace

DecodeResult decode(const ToyModel& model, std::span<const std::uint8_t> prompt, std::size_t gen_len,
                    const CacheBackend& backend, bool collect_times) {
  if (prompt.empty()) throw std::invalid_argument("decode: prompt must be non-empty");
  if (prompt.size() + gen_len > kMaxDecodePositions) {
    throw std::invalid_argument("decode: prompt + gen_len exceeds cap of " + std::to_string(kMaxDecodePositions));
  }
  DecodeSession s(model, backend);
  s.collect_times(collect_times);
  DecodeResult res;
  auto t0 = Clock::now();
  res.prompt_logits = s.prefill(prompt);
  res.prefill_seconds = seconds_since(t0);
  const PhaseTimes prefill_times = s.times();

  std::vector<double> last(res.prompt_logits.row(prompt.size() - 1).begin(),
                           res.prompt_logits.row(prompt.size() - 1).end());
  t0 = Clock::now();
  for (std::size_t i = 0; i < gen_len; ++i) {
    const std::uint8_t tok = argmax(last);
    res.generated.push_back(tok);
    last = s.step(tok);
    res.step_logits.push_back(last);
    res.float_counts.push_back(s.float_count());
  }
  res.decode_seconds = seconds_since(t0);
  // Report decode-phase times only; the prompt's eviction is part of prefill.
  res.times = s.times();
  res.times.eviction -= prefill_times.eviction;
  res.times.kernels -= prefill_times.kernels;
  res.times.synthesis -= prefill_times.synthesis;
  res.times.state_update -= prefill_times.state_update;
  return res;
}

std::size_t count_words(std::span<const std::uint8_t> bytes) {
  std::size_t n = 0;
  bool in_word = false;
  for (std::uint8_t b : bytes) {
    if (is_space(b)) {
      in_word = false;
    } else if (!in_word) {
      in_word = true;
      ++n;
    }
  }
  return n;
}

Perplexity perplexity(const ToyModel& model, std::span<const std::uint8_t> corpus, const CacheBackend& backend,
                      std::size_t max_windows) {
  if (corpus.size() < 2) throw std::invalid_argument("perplexity: corpus needs at least 2 bytes");
  const std::size_t L = model.config.context_len;
  Perplexity p;
  p.position_nll.assign(L - 1, 0.0);
  p.position_count.assign(L - 1, 0);
  std::size_t windows = 0;
  for (std::size_t start = 0; start + 1 < corpus.size(); start += L) {
    if (max_windows && windows == max_windows) break;
    const auto w = corpus.subspan(start, std::min(L, corpus.size() - start));
    if (w.size() < 2) break;
    DecodeSession s(model, backend);
    for (std::size_t i = 0; i + 1 < w.size(); ++i) {
      const auto logits = s.step(w[i]);
      const double nll = row_nll(logits, w[i + 1]);
      p.total_nll += nll;
      p.position_nll[i] += nll;
      ++p.position_count[i];
    }
    p.bytes += w.size() - 1;
    p.words += count_words(w.subspan(1));
    ++windows;
  }
  p.byte_ppl = std::exp(p.total_nll / static_cast<double>(p.bytes));
  p.word_ppl = p.words ? std::exp(p.total_nll / static_cast<double>(p.words)) : INFINITY;
  return p;
}

}  // namespace less
