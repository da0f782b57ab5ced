#include <cmath>
#include <fstream>
#include <stdexcept>

#include "less/binio.hpp"
#include "less/lesscore.hpp"

namespace less {

namespace {

Mat uniform_mat(std::size_t rows, std::size_t cols, Rng& rng) {
  Mat m(rows, cols);
  const double bound = 1.0 / std::sqrt(static_cast<double>(rows));
  for (auto& v : m.data()) v = rng.uniform(-bound, bound);
  return m;
}

void check_cols(const Mat& x, std::size_t d, const char* what) {
  if (x.cols() != d) {
    throw std::invalid_argument(std::string(what) + ": input has " + std::to_string(x.cols()) +
                                " columns, kernel expects head_dim " + std::to_string(d));
  }
}

}  // namespace

std::size_t KernelParams::parameter_count() const {
  return phi_w1.size() + phi_w2.size() + psi_w1.size() + psi_w2.size() + psi_w3.size() + 3;
}

KernelParams KernelParams::init(std::size_t head_dim, std::size_t hidden, std::size_t rank, Rng& rng) {
  KernelParams p;
  p.phi_w1 = uniform_mat(head_dim, hidden, rng);
  p.phi_w2 = uniform_mat(hidden, rank, rng);
  p.psi_w1 = uniform_mat(head_dim, hidden, rng);
  p.psi_w2 = uniform_mat(hidden, rank, rng);
  p.psi_w3 = uniform_mat(rank, rank, rng);
  return p;
}

KernelParams KernelParams::zeros(std::size_t head_dim, std::size_t hidden, std::size_t rank) {
  KernelParams p;
  p.phi_w1 = Mat(head_dim, hidden);
  p.phi_w2 = Mat(hidden, rank);
  p.psi_w1 = Mat(head_dim, hidden);
  p.psi_w2 = Mat(hidden, rank);
  p.psi_w3 = Mat(rank, rank);
  return p;
}

void KernelParams::validate() const {
  const std::size_t d = head_dim(), h = hidden(), r = rank();
  const bool ok = phi_w2.rows() == h && psi_w1.rows() == d && psi_w1.cols() == h && psi_w2.rows() == h &&
                  psi_w2.cols() == r && psi_w3.rows() == r && psi_w3.cols() == r;
  if (!ok) throw std::invalid_argument("KernelParams: inconsistent weight shapes");
}

PerformerKernels PerformerKernels::sample(std::size_t head_dim, std::size_t rank, std::uint64_t seed) {
  if (rank == 0 || rank % 2 != 0) throw std::invalid_argument("performer rank must be even");
  Rng rng(seed);
  PerformerKernels p;
  p.omega = Mat(rank, head_dim);
  for (auto& v : p.omega.data()) v = rng.normal();
  return p;
}

std::size_t rank_of(const FeatureMap& fm) {
  return std::visit([](const auto& k) { return k.rank(); }, fm);
}

std::size_t head_dim_of(const FeatureMap& fm) {
  return std::visit([](const auto& k) { return k.head_dim(); }, fm);
}

Mat phi(const KernelParams& p, const Mat& q) {
  check_cols(q, p.head_dim(), "phi");
  return abs_ew(gelu(matmul(gelu(matmul(q, p.phi_w1)), p.phi_w2)));
}

Mat psi(const KernelParams& p, const Mat& k) {
  check_cols(k, p.head_dim(), "psi");
  Mat h1 = gelu(scale(matmul(k, p.psi_w1), p.psi_s1));
  Mat h2 = gelu(scale(matmul(h1, p.psi_w2), p.psi_s2));
  return abs_ew(scale(matmul(h2, p.psi_w3), p.psi_s3));
}

Mat performer_features(const PerformerKernels& p, const Mat& x) {
  check_cols(x, p.head_dim(), "performer");
  const double d = static_cast<double>(p.head_dim());
  const double in_scale = 1.0 / std::pow(d, 0.25);
  const double norm_scale = 1.0 / (2.0 * std::sqrt(d));
  const double out_scale = 1.0 / std::sqrt(static_cast<double>(p.rank()));
  Mat proj = matmul_nt(x, p.omega);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double sq = 0.0;
    for (double v : x.row(i)) sq += v * v;
    for (double& v : proj.row(i)) v = std::exp(v * in_scale - sq * norm_scale) * out_scale;
  }
  return proj;
}

Mat phi(const FeatureMap& fm, const Mat& q) {
  if (const auto* kp = std::get_if<KernelParams>(&fm)) return phi(*kp, q);
  return performer_features(std::get<PerformerKernels>(fm), q);
}

Mat psi(const FeatureMap& fm, const Mat& k) {
  if (const auto* kp = std::get_if<KernelParams>(&fm)) return psi(*kp, k);
  return performer_features(std::get<PerformerKernels>(fm), k);
}

KernelVars KernelVars::track(ad::Tape& t, const KernelParams& p) {
  return KernelVars{t.parameter(p.phi_w1),         t.parameter(p.phi_w2),         t.parameter(p.psi_w1),
                    t.parameter(p.psi_w2),         t.parameter(p.psi_w3),         t.parameter(Mat(1, 1, p.psi_s1)),
                    t.parameter(Mat(1, 1, p.psi_s2)), t.parameter(Mat(1, 1, p.psi_s3))};
}

KernelVars KernelVars::fixed(ad::Tape& t, const KernelParams& p) {
  return KernelVars{t.constant(p.phi_w1),         t.constant(p.phi_w2),         t.constant(p.psi_w1),
                    t.constant(p.psi_w2),         t.constant(p.psi_w3),         t.constant(Mat(1, 1, p.psi_s1)),
                    t.constant(Mat(1, 1, p.psi_s2)), t.constant(Mat(1, 1, p.psi_s3))};
}

KernelParams KernelVars::gradients(const ad::Tape& t, const KernelParams& shape) const {
  auto g = [&](ad::Var v, const Mat& like) {
    const Mat& gm = t.grad(v);
    return gm.empty() ? Mat(like.rows(), like.cols()) : gm;
  };
  auto gs = [&](ad::Var v) { return t.grad(v).empty() ? 0.0 : t.grad(v)[0]; };
  KernelParams out;
  out.phi_w1 = g(phi_w1, shape.phi_w1);
  out.phi_w2 = g(phi_w2, shape.phi_w2);
  out.psi_w1 = g(psi_w1, shape.psi_w1);
  out.psi_w2 = g(psi_w2, shape.psi_w2);
  out.psi_w3 = g(psi_w3, shape.psi_w3);
  out.psi_s1 = gs(psi_s1);
  out.psi_s2 = gs(psi_s2);
  out.psi_s3 = gs(psi_s3);
  return out;
}

ad::Var phi(ad::Tape& t, const KernelVars& kv, ad::Var q, double dropout, Rng* rng) {
  check_cols(t.value(q), t.value(kv.phi_w1).rows(), "phi");
  ad::Var h = ad::gelu(t, ad::matmul(t, q, kv.phi_w1));
  if (rng) h = ad::dropout(t, h, dropout, *rng);
  h = ad::gelu(t, ad::matmul(t, h, kv.phi_w2));
  if (rng) h = ad::dropout(t, h, dropout, *rng);
  return ad::abs(t, h);
}

ad::Var psi(ad::Tape& t, const KernelVars& kv, ad::Var k, double dropout, Rng* rng) {
  check_cols(t.value(k), t.value(kv.psi_w1).rows(), "psi");
  ad::Var h = ad::gelu(t, ad::scale_by(t, ad::matmul(t, k, kv.psi_w1), kv.psi_s1));
  if (rng) h = ad::dropout(t, h, dropout, *rng);
  h = ad::gelu(t, ad::scale_by(t, ad::matmul(t, h, kv.psi_w2), kv.psi_s2));
  if (rng) h = ad::dropout(t, h, dropout, *rng);
  return ad::abs(t, ad::scale_by(t, ad::matmul(t, h, kv.psi_w3), kv.psi_s3));
}

void write_kernel(const std::filesystem::path& path, const KernelRecord& rec) {
  rec.params.validate();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write kernel file " + path.string());
  binio::write_magic(os, "LESSKRN1");
  binio::write_u32(os, static_cast<std::uint32_t>(rec.layer));
  binio::write_u32(os, static_cast<std::uint32_t>(rec.head));
  binio::write_u32(os, static_cast<std::uint32_t>(rec.params.head_dim()));
  binio::write_u32(os, static_cast<std::uint32_t>(rec.params.hidden()));
  binio::write_u32(os, static_cast<std::uint32_t>(rec.params.rank()));
  binio::write_mat(os, rec.params.phi_w1);
  binio::write_mat(os, rec.params.phi_w2);
  binio::write_mat(os, rec.params.psi_w1);
  binio::write_mat(os, rec.params.psi_w2);
  binio::write_mat(os, rec.params.psi_w3);
  binio::write_f32(os, rec.params.psi_s1);
  binio::write_f32(os, rec.params.psi_s2);
  binio::write_f32(os, rec.params.psi_s3);
  if (!os) throw std::runtime_error("failed writing kernel file " + path.string());
}

KernelRecord read_kernel(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open kernel file " + path.string());
  binio::expect_magic(is, "LESSKRN1", path.string());
  KernelRecord rec;
  rec.layer = binio::read_u32(is);
  rec.head = binio::read_u32(is);
  const std::size_t d = binio::read_u32(is), h = binio::read_u32(is), r = binio::read_u32(is);
  rec.params.phi_w1 = binio::read_mat(is, d, h);
  rec.params.phi_w2 = binio::read_mat(is, h, r);
  rec.params.psi_w1 = binio::read_mat(is, d, h);
  rec.params.psi_w2 = binio::read_mat(is, h, r);
  rec.params.psi_w3 = binio::read_mat(is, r, r);
  rec.params.psi_s1 = binio::read_f32(is);
  rec.params.psi_s2 = binio::read_f32(is);
  rec.params.psi_s3 = binio::read_f32(is);
  return rec;
}

KernelBank::KernelBank(std::size_t n_layers, std::size_t n_heads, std::vector<FeatureMap> maps)
    : n_layers_(n_layers), n_heads_(n_heads), maps_(std::move(maps)) {
  if (maps_.size() != n_layers * n_heads) throw std::invalid_argument("KernelBank: wrong number of maps");
}

const FeatureMap& KernelBank::at(std::size_t layer, std::size_t head) const {
  if (layer >= n_layers_ || head >= n_heads_) throw std::out_of_range("KernelBank: no such layer/head");
  return maps_[layer * n_heads_ + head];
}

FeatureMap& KernelBank::at(std::size_t layer, std::size_t head) {
  if (layer >= n_layers_ || head >= n_heads_) throw std::out_of_range("KernelBank: no such layer/head");
  return maps_[layer * n_heads_ + head];
}

std::size_t KernelBank::rank() const {
  if (maps_.empty()) throw std::logic_error("KernelBank: empty");
  return rank_of(maps_.front());
}

KernelBank KernelBank::zeros(std::size_t n_layers, std::size_t n_heads, std::size_t head_dim,
                             std::size_t hidden, std::size_t rank) {
  std::vector<FeatureMap> maps(n_layers * n_heads, KernelParams::zeros(head_dim, hidden, rank));
  return KernelBank(n_layers, n_heads, std::move(maps));
}

KernelBank KernelBank::performer(std::size_t n_layers, std::size_t n_heads, std::size_t head_dim,
                                 std::size_t rank, std::uint64_t seed) {
  std::vector<FeatureMap> maps;
  for (std::size_t i = 0; i < n_layers * n_heads; ++i)
    maps.emplace_back(PerformerKernels::sample(head_dim, rank, seed + 7919 * i));
  return KernelBank(n_layers, n_heads, std::move(maps));
}

std::string KernelBank::file_name(std::size_t layer, std::size_t head) {
  return "L" + std::to_string(layer) + "_H" + std::to_string(head) + ".bin";
}

KernelBank KernelBank::load(const std::filesystem::path& dir, std::size_t n_layers, std::size_t n_heads) {
  std::vector<FeatureMap> maps;
  for (std::size_t l = 0; l < n_layers; ++l) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      KernelRecord rec = read_kernel(dir / file_name(l, h));
      if (rec.layer != l || rec.head != h) {
        throw std::runtime_error("kernel file " + file_name(l, h) + " holds layer " + std::to_string(rec.layer) +
                                 " head " + std::to_string(rec.head));
      }
      maps.emplace_back(std::move(rec.params));
    }
  }
  return KernelBank(n_layers, n_heads, std::move(maps));
}

void KernelBank::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  for (std::size_t l = 0; l < n_layers_; ++l)
    for (std::size_t h = 0; h < n_heads_; ++h) {
      const auto* kp = std::get_if<KernelParams>(&at(l, h));
      if (!kp) throw std::logic_error("only learned kernels can be saved");
      write_kernel(dir / file_name(l, h), KernelRecord{l, h, *kp});
    }
}

}  // namespace less
