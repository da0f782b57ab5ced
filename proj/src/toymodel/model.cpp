#include <cmath>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include "less/adam.hpp"
#include "less/autodiff.hpp"
#include "less/binio.hpp"
#include "less/rng.hpp"
#include "less/toymodel.hpp"
#include "model_internal.hpp"

namespace less {

void ModelConfig::validate() const {
  if (vocab == 0 || d_model == 0 || n_heads == 0 || n_layers == 0) {
    throw std::invalid_argument("model config: sizes must be positive");
  }
  if (d_model % n_heads != 0) {
    throw std::invalid_argument("model config: d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                                std::to_string(n_heads));
  }
  if (context_len < 8) throw std::invalid_argument("model config: context_len must be >= 8");
}

namespace {

Mat normal_mat(std::size_t r, std::size_t c, double stddev, Rng& rng) {
  Mat m(r, c);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = stddev * rng.normal();
  return m;
}

}  // namespace

ToyModel ToyModel::init(const ModelConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  ToyModel m;
  m.config = cfg;
  const std::size_t d = cfg.d_model, f = 4 * cfg.d_model;
  const double proj_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
  m.tok_emb = normal_mat(cfg.vocab, d, 0.02, rng);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    LayerWeights w;
    const double sd = 1.0 / std::sqrt(static_cast<double>(d));
    w.wq = normal_mat(d, d, sd, rng);
    w.wk = normal_mat(d, d, sd, rng);
    w.wv = normal_mat(d, d, sd, rng);
    w.wo = normal_mat(d, d, sd * proj_scale, rng);
    w.ln1 = Mat(1, d, 1.0);
    w.ln2 = Mat(1, d, 1.0);
    w.w1 = normal_mat(d, f, sd, rng);
    w.w2 = normal_mat(f, d, proj_scale / std::sqrt(static_cast<double>(f)), rng);
    m.layers.push_back(std::move(w));
  }
  return m;
}

std::size_t ToyModel::parameter_count() const {
  std::size_t n = tok_emb.size();
  for (const auto& w : layers) {
    n += w.wq.size() + w.wk.size() + w.wv.size() + w.wo.size() + w.ln1.size() + w.ln2.size() + w.w1.size() +
         w.w2.size();
  }
  return n;
}

void positional_row(std::size_t pos, std::size_t d_model, std::span<double> out) {
  if (out.size() != d_model) throw std::invalid_argument("positional_row: output size mismatch");
  for (std::size_t i = 0; i < d_model; i += 2) {
    const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d_model));
    const double a = static_cast<double>(pos) * freq;
    out[i] = std::sin(a);
    if (i + 1 < d_model) out[i + 1] = std::cos(a);
  }
}

Mat positional_table(std::size_t n_positions, std::size_t d_model) {
  Mat t(n_positions, d_model);
  for (std::size_t p = 0; p < n_positions; ++p) positional_row(p, d_model, t.row(p));
  return t;
}

// ---- checkpoint -------------------------------------------------------------

namespace {
constexpr std::string_view kModelMagic = "LESSMDL1";

std::uint32_t to_u32(std::size_t v, const char* what) {
  if (v > 0xffffffffu) throw std::invalid_argument(std::string("checkpoint field too large: ") + what);
  return static_cast<std::uint32_t>(v);
}
}  // namespace

void write_model(const std::filesystem::path& path, const ToyModel& model) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  const auto& c = model.config;
  binio::write_magic(os, kModelMagic);
  binio::write_u32(os, to_u32(c.vocab, "vocab"));
  binio::write_u32(os, to_u32(c.d_model, "d_model"));
  binio::write_u32(os, to_u32(c.n_heads, "n_heads"));
  binio::write_u32(os, to_u32(c.n_layers, "n_layers"));
  binio::write_u32(os, to_u32(c.context_len, "context_len"));
  binio::write_u32(os, c.seed);
  binio::write_mat(os, model.tok_emb);
  for (const auto& w : model.layers) {
    for (const Mat* m : {&w.wq, &w.wk, &w.wv, &w.wo, &w.ln1, &w.ln2, &w.w1, &w.w2}) binio::write_mat(os, *m);
  }
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

ToyModel read_model(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open model checkpoint " + path.string());
  binio::expect_magic(is, kModelMagic, path.string());
  ModelConfig c;
  c.vocab = binio::read_u32(is);
  c.d_model = binio::read_u32(is);
  c.n_heads = binio::read_u32(is);
  c.n_layers = binio::read_u32(is);
  c.context_len = binio::read_u32(is);
  c.seed = binio::read_u32(is);
  c.validate();
  ToyModel m;
  m.config = c;
  const std::size_t d = c.d_model, f = 4 * d;
  m.tok_emb = binio::read_mat(is, c.vocab, d);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    LayerWeights w;
    w.wq = binio::read_mat(is, d, d);
    w.wk = binio::read_mat(is, d, d);
    w.wv = binio::read_mat(is, d, d);
    w.wo = binio::read_mat(is, d, d);
    w.ln1 = binio::read_mat(is, 1, d);
    w.ln2 = binio::read_mat(is, 1, d);
    w.w1 = binio::read_mat(is, d, f);
    w.w2 = binio::read_mat(is, f, d);
    m.layers.push_back(std::move(w));
  }
  if (is.peek() != std::char_traits<char>::eof()) {
    throw std::runtime_error("trailing bytes in model checkpoint " + path.string());
  }
  return m;
}

// ---- tape forward -----------------------------------------------------------

namespace detail {

ModelVars bind(ad::Tape& t, const ToyModel& m, bool trainable) {
  auto leaf = [&](const Mat& x) { return trainable ? t.parameter(x) : t.constant(x); };
  ModelVars v;
  v.emb = leaf(m.tok_emb);
  for (const auto& w : m.layers) {
    v.layers.push_back({leaf(w.wq), leaf(w.wk), leaf(w.wv), leaf(w.wo), leaf(w.ln1), leaf(w.ln2), leaf(w.w1),
                        leaf(w.w2)});
  }
  return v;
}

TapeForward run_forward(ad::Tape& t, const ModelVars& mv, const ToyModel& m,
                        const std::vector<std::size_t>& tokens, std::size_t seq_len) {
  const auto& c = m.config;
  const std::size_t n_seq = tokens.size() / seq_len;
  Mat pos(tokens.size(), c.d_model);
  const Mat table = positional_table(seq_len, c.d_model);
  for (std::size_t b = 0; b < n_seq; ++b)
    for (std::size_t i = 0; i < seq_len; ++i)
      std::copy_n(table.row(i).data(), c.d_model, pos.row(b * seq_len + i).data());

  TapeForward out;
  ad::Var x = ad::add(t, ad::gather_rows(t, mv.emb, tokens), t.constant(std::move(pos)));
  for (const auto& lv : mv.layers) {
    ad::Var h = ad::layer_norm(t, x, lv.ln1);
    ad::Var q = ad::matmul(t, h, lv.wq);
    ad::Var k = ad::matmul(t, h, lv.wk);
    ad::Var v = ad::matmul(t, h, lv.wv);
    ad::Var a = ad::causal_attention(t, q, k, v, c.n_heads, seq_len);
    ad::Var o = ad::matmul(t, a, lv.wo);
    x = ad::add(t, x, o);
    ad::Var h2 = ad::layer_norm(t, x, lv.ln2);
    ad::Var f = ad::matmul(t, ad::gelu(t, ad::matmul(t, h2, lv.w1)), lv.w2);
    x = ad::add(t, x, f);
    out.layers.push_back({q, k, v, o});
  }
  out.logits = ad::matmul_nt(t, x, mv.emb);
  return out;
}

}  // namespace detail

ForwardResult forward_full(const ToyModel& model, std::span<const std::uint8_t> tokens) {
  const auto& c = model.config;
  if (tokens.empty()) throw std::invalid_argument("forward_full: empty input");
  if (tokens.size() > c.context_len) {
    throw std::invalid_argument("forward_full: length " + std::to_string(tokens.size()) + " exceeds context " +
                                std::to_string(c.context_len));
  }
  ad::Tape t;
  const auto mv = detail::bind(t, model, false);
  std::vector<std::size_t> ids(tokens.begin(), tokens.end());
  const auto fw = detail::run_forward(t, mv, model, ids, ids.size());
  ForwardResult res;
  res.logits = t.value(fw.logits);
  const std::size_t hd = c.head_dim();
  for (const auto& l : fw.layers) {
    LayerRecord rec;
    for (std::size_t h = 0; h < c.n_heads; ++h) {
      rec.q.push_back(slice_cols(t.value(l.q), h * hd, (h + 1) * hd));
      rec.k.push_back(slice_cols(t.value(l.k), h * hd, (h + 1) * hd));
      rec.v.push_back(slice_cols(t.value(l.v), h * hd, (h + 1) * hd));
    }
    rec.attn_out = t.value(l.o);
    res.layers.push_back(std::move(rec));
  }
  return res;
}

namespace {

double row_nll(std::span<const double> logits, std::size_t target) {
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double se = 0.0;
  for (double v : logits) se += std::exp(v - mx);
  return -(logits[target] - mx - std::log(se));
}

}  // namespace

double mean_nll(const ToyModel& model, std::span<const std::uint8_t> bytes, std::size_t max_windows) {
  const std::size_t L = model.config.context_len;
  double total = 0.0;
  std::size_t count = 0, windows = 0;
  for (std::size_t start = 0; start + 1 < bytes.size(); start += L) {
    if (max_windows && windows == max_windows) break;
    const auto w = bytes.subspan(start, std::min(L, bytes.size() - start));
    if (w.size() < 2) break;
    const auto fw = forward_full(model, w);
    for (std::size_t i = 0; i + 1 < w.size(); ++i) total += row_nll(fw.logits.row(i), w[i + 1]);
    count += w.size() - 1;
    ++windows;
  }
  if (count == 0) throw std::invalid_argument("mean_nll: need at least 2 bytes");
  return total / static_cast<double>(count);
}

// ---- pretraining ------------------------------------------------------------

std::pair<std::span<const std::uint8_t>, std::span<const std::uint8_t>> split_corpus(
    std::span<const std::uint8_t> corpus, double heldout_fraction) {
  if (!(heldout_fraction > 0.0 && heldout_fraction < 1.0)) {
    throw std::invalid_argument("heldout_fraction must be in (0, 1)");
  }
  const auto n_held = static_cast<std::size_t>(static_cast<double>(corpus.size()) * heldout_fraction);
  const std::size_t n_train = corpus.size() - n_held;
  return {corpus.subspan(0, n_train), corpus.subspan(n_train)};
}

namespace {

std::vector<Mat*> model_tensors(ToyModel& m) {
  std::vector<Mat*> out{&m.tok_emb};
  for (auto& w : m.layers)
    for (Mat* x : {&w.wq, &w.wk, &w.wv, &w.wo, &w.ln1, &w.ln2, &w.w1, &w.w2}) out.push_back(x);
  return out;
}

std::vector<ad::Var> model_vars(const detail::ModelVars& mv) {
  std::vector<ad::Var> out{mv.emb};
  for (const auto& l : mv.layers)
    for (ad::Var v : {l.wq, l.wk, l.wv, l.wo, l.ln1, l.ln2, l.w1, l.w2}) out.push_back(v);
  return out;
}

}  // namespace

PretrainResult pretrain(const ModelConfig& cfg, std::span<const std::uint8_t> corpus, const PretrainOptions& opts) {
  cfg.validate();
  const std::size_t L = cfg.context_len;
  if (corpus.size() < 100 * L) {
    throw std::invalid_argument("pretrain: corpus has " + std::to_string(corpus.size()) + " bytes, need >= " +
                                std::to_string(100 * L));
  }
  const std::size_t S = opts.seq_len ? opts.seq_len : L;
  if (S > L || S < 2) throw std::invalid_argument("pretrain: seq_len must be in [2, context_len]");
  if (opts.batch == 0) throw std::invalid_argument("pretrain: batch must be positive");
  const auto [train, held] = split_corpus(corpus, opts.heldout_fraction);
  if (train.size() <= S + 1 || held.size() < 2) throw std::invalid_argument("pretrain: corpus split too small");

  PretrainResult res;
  res.model = ToyModel::init(cfg);
  auto params = model_tensors(res.model);
  std::vector<const Mat*> shapes(params.begin(), params.end());
  Adam opt(shapes);
  Rng rng(static_cast<std::uint64_t>(cfg.seed) * 0x9e3779b97f4a7c15ull + 17);

  for (std::size_t step = 0; step < opts.steps; ++step) {
    std::vector<std::size_t> inputs, targets;
    inputs.reserve(opts.batch * S);
    targets.reserve(opts.batch * S);
    for (std::size_t b = 0; b < opts.batch; ++b) {
      const std::size_t start = rng.below(train.size() - S - 1);
      for (std::size_t i = 0; i < S; ++i) {
        inputs.push_back(train[start + i]);
        targets.push_back(train[start + i + 1]);
      }
    }
    ad::Tape t;
    const auto mv = detail::bind(t, res.model, true);
    const auto fw = detail::run_forward(t, mv, res.model, inputs, S);
    ad::Var loss = ad::cross_entropy(t, fw.logits, std::move(targets));
    const double lval = t.value(loss)[0];
    if (!std::isfinite(lval)) throw std::domain_error("pretrain: non-finite loss at step " + std::to_string(step));
    res.train_loss.push_back(lval);
    t.backward(loss);

    const auto vars = model_vars(mv);
    std::vector<Mat> grads;
    grads.reserve(vars.size());
    double norm_sq = 0.0;
    for (ad::Var v : vars) {
      grads.push_back(t.grad(v));
      norm_sq += frobenius_sq(grads.back());
    }
    const double norm = std::sqrt(norm_sq);
    if (norm > 1.0)
      for (Mat& g : grads) g = scale(g, 1.0 / norm);
    std::vector<const Mat*> gptr;
    for (const Mat& g : grads) gptr.push_back(&g);

    // Linear warmup, then cosine decay to 10% of the peak rate.
    double lr = opts.lr;
    if (step < opts.warmup) {
      lr *= static_cast<double>(step + 1) / static_cast<double>(opts.warmup);
    } else {
      const double span = static_cast<double>(std::max<std::size_t>(1, opts.steps - opts.warmup));
      const double frac = static_cast<double>(step - opts.warmup) / span;
      lr *= 0.1 + 0.9 * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
    }
    opt.step(params, gptr, lr);
  }
  // Checkpoints are single precision; round now so a saved model reloads
  // bit-identically.
  for (Mat* p : params) *p = round_to_float(*p);
  res.heldout_loss = mean_nll(res.model, held, 16);
  return res;
}

ToyModel pretrain(const ModelConfig& cfg, std::span<const std::uint8_t> corpus, std::size_t steps, double lr) {
  PretrainOptions o;
  o.steps = steps;
  o.lr = lr;
  return pretrain(cfg, corpus, o).model;
}

}  // namespace less
