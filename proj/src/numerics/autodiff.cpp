#include "less/autodiff.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace less::ad {

Var Tape::constant(Mat value) {
  nodes_.push_back(Node{std::move(value), {}, false, {}});
  return Var{nodes_.size() - 1};
}

Var Tape::parameter(Mat value) {
  nodes_.push_back(Node{std::move(value), {}, true, {}});
  return Var{nodes_.size() - 1};
}

Var Tape::record(Mat value, std::initializer_list<Var> inputs, BackwardFn fn) {
  bool needs = false;
  for (Var in : inputs) needs = needs || nodes_[in.id].requires_grad;
  nodes_.push_back(Node{std::move(value), {}, needs, needs ? std::move(fn) : BackwardFn{}});
  return Var{nodes_.size() - 1};
}

Mat& Tape::grad_acc(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty() && !n.value.empty()) n.grad = Mat(n.value.rows(), n.value.cols());
  return n.grad;
}

std::size_t Tape::backward(Var root) {
  const Mat& rv = nodes_[root.id].value;
  if (rv.rows() != 1 || rv.cols() != 1) {
    throw std::invalid_argument("backward: root must be a scalar, got " + rv.shape_str());
  }
  for (auto& n : nodes_) n.grad = Mat();
  if (!nodes_[root.id].requires_grad) return 0;
  grad_acc(root.id)[0] = 1.0;
  std::size_t visited = 0;
  for (std::size_t i = root.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
    n.backward(*this, i);
    ++visited;
  }
  return visited;
}

Var matmul(Tape& t, Var a, Var b) {
  return t.record(less::matmul(t.value(a), t.value(b)), {a, b},
                  [a, b](Tape& t, std::size_t self) {
                    const Mat& g = t.grad_at(self);
                    if (t.tracks(a.id)) axpy(1.0, less::matmul_nt(g, t.value_at(b.id)), t.grad_acc(a.id));
                    if (t.tracks(b.id)) axpy(1.0, less::matmul_tn(t.value_at(a.id), g), t.grad_acc(b.id));
                  });
}

Var matmul_nt(Tape& t, Var a, Var b) {
  return t.record(less::matmul_nt(t.value(a), t.value(b)), {a, b},
                  [a, b](Tape& t, std::size_t self) {
                    const Mat& g = t.grad_at(self);
                    if (t.tracks(a.id)) axpy(1.0, less::matmul(g, t.value_at(b.id)), t.grad_acc(a.id));
                    if (t.tracks(b.id)) axpy(1.0, less::matmul_tn(g, t.value_at(a.id)), t.grad_acc(b.id));
                  });
}

Var add(Tape& t, Var a, Var b) {
  return t.record(less::add(t.value(a), t.value(b)), {a, b}, [a, b](Tape& t, std::size_t self) {
    const Mat& g = t.grad_at(self);
    if (t.tracks(a.id)) axpy(1.0, g, t.grad_acc(a.id));
    if (t.tracks(b.id)) axpy(1.0, g, t.grad_acc(b.id));
  });
}

Var sub(Tape& t, Var a, Var b) {
  return t.record(less::sub(t.value(a), t.value(b)), {a, b}, [a, b](Tape& t, std::size_t self) {
    const Mat& g = t.grad_at(self);
    if (t.tracks(a.id)) axpy(1.0, g, t.grad_acc(a.id));
    if (t.tracks(b.id)) axpy(-1.0, g, t.grad_acc(b.id));
  });
}

Var mul(Tape& t, Var a, Var b) {
  return t.record(less::hadamard(t.value(a), t.value(b)), {a, b},
                  [a, b](Tape& t, std::size_t self) {
                    const Mat& g = t.grad_at(self);
                    if (t.tracks(a.id)) axpy(1.0, less::hadamard(g, t.value_at(b.id)), t.grad_acc(a.id));
                    if (t.tracks(b.id)) axpy(1.0, less::hadamard(g, t.value_at(a.id)), t.grad_acc(b.id));
                  });
}

Var scale(Tape& t, Var a, double s) {
  return t.record(less::scale(t.value(a), s), {a}, [a, s](Tape& t, std::size_t self) {
    axpy(s, t.grad_at(self), t.grad_acc(a.id));
  });
}

Var scale_by(Tape& t, Var a, Var s) {
  if (t.value(s).size() != 1) throw std::invalid_argument("scale_by: scale must be 1x1");
  return t.record(less::scale(t.value(a), t.value(s)[0]), {a, s},
                  [a, s](Tape& t, std::size_t self) {
                    const Mat& g = t.grad_at(self);
                    if (t.tracks(a.id)) axpy(t.value_at(s.id)[0], g, t.grad_acc(a.id));
                    if (t.tracks(s.id)) {
                      const Mat& av = t.value_at(a.id);
                      double acc = 0.0;
                      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * av[i];
                      t.grad_acc(s.id)[0] += acc;
                    }
                  });
}

Var scale_rows(Tape& t, Var a, std::vector<double> factors) {
  const Mat& av = t.value(a);
  if (factors.size() != av.rows()) throw std::invalid_argument("scale_rows: factor count mismatch");
  Mat out = av;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (double& v : out.row(r)) v *= factors[r];
  return t.record(std::move(out), {a}, [a, f = std::move(factors)](Tape& t, std::size_t self) {
    const Mat& g = t.grad_at(self);
    Mat& ga = t.grad_acc(a.id);
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < g.cols(); ++c) ga(r, c) += f[r] * g(r, c);
  });
}

Var gelu(Tape& t, Var a) {
  const Mat& x = t.value(a);
  Mat y(x.rows(), x.cols());
  Mat dy(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) {
    // Same expression order as less::gelu so tape and row paths agree bitwise.
    const double e = std::erf(x[i] * std::numbers::sqrt2 / 2.0);
    const double cdf = 0.5 * (1.0 + e);
    y[i] = 0.5 * x[i] * (1.0 + e);
    dy[i] = cdf + x[i] * std::exp(-0.5 * x[i] * x[i]) * std::numbers::inv_sqrtpi / std::numbers::sqrt2;
  }
  return t.record(std::move(y), {a}, [a, dy = std::move(dy)](Tape& t, std::size_t self) {
    const Mat& g = t.grad_at(self);
    Mat& ga = t.grad_acc(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dy[i];
  });
}

Var abs(Tape& t, Var a) {
  return t.record(less::abs_ew(t.value(a)), {a}, [a](Tape& t, std::size_t self) {
    const Mat& g = t.grad_at(self);
    const Mat& x = t.value_at(a.id);
    Mat& ga = t.grad_acc(a.id);
    // Subgradient 0 at x == 0.
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (x[i] > 0)
        ga[i] += g[i];
      else if (x[i] < 0)
        ga[i] -= g[i];
    }
  });
}

Var row_softmax(Tape& t, Var a) {
  return t.record(less::row_softmax(t.value(a)), {a}, [a](Tape& t, std::size_t self) {
    const Mat& g = t.grad_at(self);
    const Mat& y = t.value_at(self);
    Mat& ga = t.grad_acc(a.id);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < y.cols(); ++c) dot += g(r, c) * y(r, c);
      for (std::size_t c = 0; c < y.cols(); ++c) ga(r, c) += y(r, c) * (g(r, c) - dot);
    }
  });
}

Var row_normalize(Tape& t, Var a) {
  const Mat& av = t.value(a);
  Mat out = av;
  std::vector<double> sums(av.rows());
  for (std::size_t r = 0; r < av.rows(); ++r) {
    double s = 0.0;
    for (double v : av.row(r)) s += v;
    if (!(s > 0.0)) throw std::domain_error("row_normalize: non-positive row sum");
    sums[r] = s;
    for (double& v : out.row(r)) v /= s;
  }
  return t.record(std::move(out), {a}, [a, sums = std::move(sums)](Tape& t, std::size_t self) {
    const Mat& g = t.grad_at(self);
    const Mat& y = t.value_at(self);
    Mat& ga = t.grad_acc(a.id);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < y.cols(); ++c) dot += g(r, c) * y(r, c);
      for (std::size_t c = 0; c < y.cols(); ++c) ga(r, c) += (g(r, c) - dot) / sums[r];
    }
  });
}

Var dropout(Tape& t, Var a, double rate, Rng& rng) {
  if (rate <= 0.0) return a;
  if (rate >= 1.0) throw std::invalid_argument("dropout: rate must be < 1");
  const Mat& av = t.value(a);
  Mat mask(av.rows(), av.cols());
  const double keep = 1.0 / (1.0 - rate);
  for (auto& m : mask.data()) m = rng.uniform() >= rate ? keep : 0.0;
  Mat out = less::hadamard(av, mask);
  return t.record(std::move(out), {a}, [a, mask = std::move(mask)](Tape& t, std::size_t self) {
    axpy(1.0, less::hadamard(t.grad_at(self), mask), t.grad_acc(a.id));
  });
}

Var sum(Tape& t, Var a) {
  Mat out(1, 1, less::sum(t.value(a)));
  return t.record(std::move(out), {a}, [a](Tape& t, std::size_t self) {
    const double g = t.grad_at(self)[0];
    for (double& v : t.grad_acc(a.id).data()) v += g;
  });
}

Var mean_square(Tape& t, Var a) {
  const Mat& av = t.value(a);
  const double n = static_cast<double>(av.size());
  Mat out(1, 1, less::frobenius_sq(av) / n);
  return t.record(std::move(out), {a}, [a, n](Tape& t, std::size_t self) {
    const double g = t.grad_at(self)[0];
    axpy(2.0 * g / n, t.value_at(a.id), t.grad_acc(a.id));
  });
}

Var gather_rows(Tape& t, Var table, std::vector<std::size_t> indices) {
  const Mat& tv = t.value(table);
  Mat out(indices.size(), tv.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= tv.rows()) throw std::out_of_range("gather_rows: index out of range");
    std::copy_n(tv.row(indices[i]).data(), tv.cols(), out.row(i).data());
  }
  return t.record(std::move(out), {table}, [table, idx = std::move(indices)](Tape& t, std::size_t self) {
    const Mat& g = t.grad_at(self);
    Mat& gt = t.grad_acc(table.id);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      auto dst = gt.row(idx[i]);
      auto src = g.row(i);
      for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
    }
  });
}

Var layer_norm(Tape& t, Var x, Var gain, double eps) {
  const Mat& xv = t.value(x);
  const Mat& gv = t.value(gain);
  if (gv.rows() != 1 || gv.cols() != xv.cols()) throw std::invalid_argument("layer_norm: gain shape");
  const std::size_t n = xv.rows(), c = xv.cols();
  Mat xhat(n, c);
  std::vector<double> inv_std(n);
  for (std::size_t r = 0; r < n; ++r) {
    double mean = 0.0;
    for (double v : xv.row(r)) mean += v;
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (double v : xv.row(r)) var += (v - mean) * (v - mean);
    var /= static_cast<double>(c);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) xhat(r, j) = (xv(r, j) - mean) * inv_std[r];
  }
  Mat out(n, c);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < c; ++j) out(r, j) = xhat(r, j) * gv[j];
  return t.record(std::move(out), {x, gain},
                  [x, gain, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, std::size_t self) {
                    const Mat& g = t.grad_at(self);
                    const Mat& gv = t.value_at(gain.id);
                    const std::size_t n = g.rows(), c = g.cols();
                    if (t.tracks(gain.id)) {
                      Mat& gg = t.grad_acc(gain.id);
                      for (std::size_t r = 0; r < n; ++r)
                        for (std::size_t j = 0; j < c; ++j) gg[j] += g(r, j) * xhat(r, j);
                    }
                    if (t.tracks(x.id)) {
                      Mat& gx = t.grad_acc(x.id);
                      for (std::size_t r = 0; r < n; ++r) {
                        double m1 = 0.0, m2 = 0.0;
                        for (std::size_t j = 0; j < c; ++j) {
                          const double d = g(r, j) * gv[j];
                          m1 += d;
                          m2 += d * xhat(r, j);
                        }
                        m1 /= static_cast<double>(c);
                        m2 /= static_cast<double>(c);
                        for (std::size_t j = 0; j < c; ++j) {
                          const double d = g(r, j) * gv[j];
                          gx(r, j) += inv_std[r] * (d - m1 - xhat(r, j) * m2);
                        }
                      }
                    }
                  });
}

namespace {

// Copies the (rows [r0, r0+n), cols [c0, c0+w)) block of m.
Mat block(const Mat& m, std::size_t r0, std::size_t n, std::size_t c0, std::size_t w) {
  Mat out(n, w);
  for (std::size_t r = 0; r < n; ++r) std::copy_n(m.row(r0 + r).data() + c0, w, out.row(r).data());
  return out;
}

void add_block(Mat& m, std::size_t r0, std::size_t c0, const Mat& src) {
  for (std::size_t r = 0; r < src.rows(); ++r) {
    double* dst = m.row(r0 + r).data() + c0;
    const double* s = src.row(r).data();
    for (std::size_t c = 0; c < src.cols(); ++c) dst[c] += s[c];
  }
}

}  // namespace

Var causal_attention(Tape& t, Var q, Var k, Var v, std::size_t n_heads, std::size_t seq_len) {
  const Mat& qv = t.value(q);
  const Mat& kv = t.value(k);
  const Mat& vv = t.value(v);
  if (qv.rows() != kv.rows() || qv.rows() != vv.rows() || qv.cols() != kv.cols() ||
      qv.cols() != vv.cols()) {
    throw std::invalid_argument("causal_attention: Q/K/V shapes differ");
  }
  if (seq_len == 0 || qv.rows() % seq_len != 0 || qv.cols() % n_heads != 0) {
    throw std::invalid_argument("causal_attention: rows not divisible into sequences");
  }
  const std::size_t n_seq = qv.rows() / seq_len, hd = qv.cols() / n_heads;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(hd));

  std::vector<Mat> probs;
  probs.reserve(n_seq * n_heads);
  Mat out(qv.rows(), qv.cols());
  for (std::size_t b = 0; b < n_seq; ++b) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      const Mat qh = block(qv, b * seq_len, seq_len, h * hd, hd);
      const Mat kh = block(kv, b * seq_len, seq_len, h * hd, hd);
      const Mat vh = block(vv, b * seq_len, seq_len, h * hd, hd);
      Mat s = less::matmul_nt(qh, kh);
      for (std::size_t i = 0; i < seq_len; ++i) {
        auto row = s.row(i);
        for (std::size_t j = 0; j <= i; ++j) row[j] *= inv_sqrt_d;
        softmax_inplace(row.subspan(0, i + 1));
        for (std::size_t j = i + 1; j < seq_len; ++j) row[j] = 0.0;
      }
      add_block(out, b * seq_len, h * hd, less::matmul(s, vh));
      probs.push_back(std::move(s));
    }
  }

  return t.record(
      std::move(out), {q, k, v},
      [q, k, v, n_heads, seq_len, n_seq, hd, inv_sqrt_d, probs = std::move(probs)](Tape& t,
                                                                                  std::size_t self) {
        const Mat& g = t.grad_at(self);
        const Mat& qv = t.value_at(q.id);
        const Mat& kv = t.value_at(k.id);
        const Mat& vv = t.value_at(v.id);
        for (std::size_t b = 0; b < n_seq; ++b) {
          for (std::size_t h = 0; h < n_heads; ++h) {
            const Mat& p = probs[b * n_heads + h];
            const Mat gh = block(g, b * seq_len, seq_len, h * hd, hd);
            if (t.tracks(v.id)) add_block(t.grad_acc(v.id), b * seq_len, h * hd, less::matmul_tn(p, gh));
            if (!t.tracks(q.id) && !t.tracks(k.id)) continue;
            const Mat vh = block(vv, b * seq_len, seq_len, h * hd, hd);
            Mat dp = less::matmul_nt(gh, vh);
            for (std::size_t i = 0; i < seq_len; ++i) {
              double dot = 0.0;
              for (std::size_t j = 0; j <= i; ++j) dot += dp(i, j) * p(i, j);
              for (std::size_t j = 0; j <= i; ++j) dp(i, j) = p(i, j) * (dp(i, j) - dot) * inv_sqrt_d;
              for (std::size_t j = i + 1; j < seq_len; ++j) dp(i, j) = 0.0;
            }
            if (t.tracks(q.id)) {
              const Mat kh = block(kv, b * seq_len, seq_len, h * hd, hd);
              add_block(t.grad_acc(q.id), b * seq_len, h * hd, less::matmul(dp, kh));
            }
            if (t.tracks(k.id)) {
              const Mat qh = block(qv, b * seq_len, seq_len, h * hd, hd);
              add_block(t.grad_acc(k.id), b * seq_len, h * hd, less::matmul_tn(dp, qh));
            }
          }
        }
      });
}

Var cross_entropy(Tape& t, Var logits, std::vector<std::size_t> targets) {
  const Mat& lv = t.value(logits);
  if (targets.size() != lv.rows()) throw std::invalid_argument("cross_entropy: target count mismatch");
  Mat p = less::row_softmax(lv);
  double nll = 0.0;
  for (std::size_t r = 0; r < p.rows(); ++r) {
    if (targets[r] >= p.cols()) throw std::out_of_range("cross_entropy: target out of range");
    // log-sum-exp form so a confident model cannot produce log(0).
    double mx = lv(r, 0);
    for (double v : lv.row(r)) mx = std::max(mx, v);
    double se = 0.0;
    for (double v : lv.row(r)) se += std::exp(v - mx);
    nll -= lv(r, targets[r]) - mx - std::log(se);
  }
  const double n = static_cast<double>(p.rows());
  Mat out(1, 1, nll / n);
  return t.record(std::move(out), {logits},
                  [logits, p = std::move(p), tg = std::move(targets), n](Tape& t, std::size_t self) {
                    const double g = t.grad_at(self)[0] / n;
                    Mat& gl = t.grad_acc(logits.id);
                    for (std::size_t r = 0; r < p.rows(); ++r) {
                      for (std::size_t c = 0; c < p.cols(); ++c) gl(r, c) += g * p(r, c);
                      gl(r, tg[r]) -= g;
                    }
                  });
}

}  // namespace less::ad
