#include "less/mat.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace less {

namespace {

void require_same_shape(const Mat& a, const Mat& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " +
                                b.shape_str());
  }
}

}  // namespace

Mat::Mat(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Mat::Mat(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw std::invalid_argument("Mat: data length " + std::to_string(data_.size()) +
                                " does not match shape " + shape_str());
  }
}

Mat::Mat(std::initializer_list<std::initializer_list<double>> rows) {
  rows_ = rows.size();
  cols_ = rows_ ? rows.begin()->size() : 0;
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) throw std::invalid_argument("Mat: ragged initializer");
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

Mat Mat::identity(std::size_t n) {
  Mat m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Mat Mat::row_vector(std::span<const double> values) {
  return Mat(1, values.size(), std::vector<double>(values.begin(), values.end()));
}

void Mat::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

std::string Mat::shape_str() const {
  return "(" + std::to_string(rows_) + "x" + std::to_string(cols_) + ")";
}

namespace {

// c = a·b with a register tile of kMr×kNr outputs. Every c(i,j) is still
// accumulated from zero over p ascending, so results match the plain ikj loop
// bit for bit; the tiling only cuts memory traffic.
constexpr std::size_t kMr = 4;
constexpr std::size_t kNr = 8;

void gemm(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m) {
  std::size_t i0 = 0;
  for (; i0 + kMr <= n; i0 += kMr) {
    std::size_t j0 = 0;
    for (; j0 + kNr <= m; j0 += kNr) {
      double acc[kMr][kNr] = {};
      for (std::size_t p = 0; p < k; ++p) {
        const double* br = b + p * m + j0;
        for (std::size_t r = 0; r < kMr; ++r) {
          const double av = a[(i0 + r) * k + p];
          for (std::size_t q = 0; q < kNr; ++q) acc[r][q] += av * br[q];
        }
      }
      for (std::size_t r = 0; r < kMr; ++r)
        for (std::size_t q = 0; q < kNr; ++q) c[(i0 + r) * m + j0 + q] = acc[r][q];
    }
    for (std::size_t r = 0; r < kMr; ++r) {
      double* crow = c + (i0 + r) * m;
      const double* arow = a + (i0 + r) * k;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = arow[p];
        const double* brow = b + p * m;
        for (std::size_t j = j0; j < m; ++j) crow[j] += av * brow[j];
      }
    }
  }
  for (; i0 < n; ++i0) {
    double* crow = c + i0 * m;
    const double* arow = a + i0 * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace

Mat matmul(const Mat& a, const Mat& b) {
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: inner dimensions differ " + a.shape_str() + " * " +
                                b.shape_str());
  }
  Mat c(a.rows(), b.cols());
  gemm(a.data().data(), b.data().data(), c.data().data(), a.rows(), a.cols(), b.cols());
  return c;
}

Mat matmul_tn(const Mat& a, const Mat& b) {
  if (a.rows() != b.rows()) {
    throw std::invalid_argument("matmul_tn: row counts differ " + a.shape_str() + " vs " +
                                b.shape_str());
  }
  return matmul(transpose(a), b);
}

Mat matmul_nt(const Mat& a, const Mat& b) {
  if (a.cols() != b.cols()) {
    throw std::invalid_argument("matmul_nt: column counts differ " + a.shape_str() + " vs " +
                                b.shape_str());
  }
  return matmul(a, transpose(b));
}

Mat transpose(const Mat& a) {
  Mat t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

Mat add(const Mat& a, const Mat& b) {
  require_same_shape(a, b, "add");
  Mat c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] += b[i];
  return c;
}

Mat sub(const Mat& a, const Mat& b) {
  require_same_shape(a, b, "sub");
  Mat c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] -= b[i];
  return c;
}

Mat hadamard(const Mat& a, const Mat& b) {
  require_same_shape(a, b, "hadamard");
  Mat c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] *= b[i];
  return c;
}

Mat scale(const Mat& a, double s) {
  Mat c = a;
  for (auto& v : c.data()) v *= s;
  return c;
}

void axpy(double alpha, const Mat& x, Mat& y) {
  require_same_shape(x, y, "axpy");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

void softmax_inplace(std::span<double> row) {
  if (row.empty()) return;
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : row) {
    if (std::isnan(v)) throw std::invalid_argument("row_softmax: NaN input");
    mx = std::max(mx, v);
  }
  double total = 0.0;
  for (double& v : row) {
    v = std::exp(v - mx);
    total += v;
  }
  for (double& v : row) v /= total;
}

Mat row_softmax(const Mat& s) {
  Mat out = s;
  for (std::size_t r = 0; r < out.rows(); ++r) softmax_inplace(out.row(r));
  return out;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) * std::numbers::inv_sqrtpi / std::numbers::sqrt2;
  return cdf + x * pdf;
}

Mat gelu(const Mat& x) {
  Mat y = x;
  for (auto& v : y.data()) v = gelu(v);
  return y;
}

Mat abs_ew(const Mat& x) {
  Mat y = x;
  for (auto& v : y.data()) v = std::fabs(v);
  return y;
}

double sum(const Mat& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return s;
}

double frobenius_sq(const Mat& a) {
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  return s;
}

double max_abs(const Mat& a) {
  double m = 0.0;
  for (double v : a.data()) m = std::max(m, std::fabs(v));
  return m;
}

double max_abs_diff(const Mat& a, const Mat& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

bool all_finite(const Mat& a) {
  return std::all_of(a.data().begin(), a.data().end(), [](double v) { return std::isfinite(v); });
}

Mat slice_cols(const Mat& a, std::size_t c0, std::size_t c1) {
  if (c0 > c1 || c1 > a.cols()) throw std::out_of_range("slice_cols: bad range");
  Mat out(a.rows(), c1 - c0);
  for (std::size_t r = 0; r < a.rows(); ++r)
    std::copy_n(a.row(r).data() + c0, c1 - c0, out.row(r).data());
  return out;
}

Mat slice_rows(const Mat& a, std::size_t r0, std::size_t r1) {
  if (r0 > r1 || r1 > a.rows()) throw std::out_of_range("slice_rows: bad range");
  Mat out(r1 - r0, a.cols());
  std::copy_n(a.data().data() + r0 * a.cols(), (r1 - r0) * a.cols(), out.data().data());
  return out;
}

void set_cols(Mat& dst, std::size_t c0, const Mat& src) {
  if (src.rows() != dst.rows() || c0 + src.cols() > dst.cols())
    throw std::out_of_range("set_cols: bad range");
  for (std::size_t r = 0; r < src.rows(); ++r)
    std::copy_n(src.row(r).data(), src.cols(), dst.row(r).data() + c0);
}

std::vector<double> svd_values(const Mat& a) {
  // Work on the orientation with fewer columns; singular values are shared.
  const Mat& src = a;
  const bool flip = a.cols() > a.rows();
  const std::size_t m = flip ? src.cols() : src.rows();
  const std::size_t n = flip ? src.rows() : src.cols();
  if (n == 0) return {};

  std::vector<std::vector<double>> col(n, std::vector<double>(m));
  for (std::size_t i = 0; i < src.rows(); ++i)
    for (std::size_t j = 0; j < src.cols(); ++j) {
      if (flip)
        col[i][j] = src(i, j);
      else
        col[j][i] = src(i, j);
    }

  constexpr double kTol = 1e-15;
  for (int sweep = 0; sweep < 80; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double alpha = 0, beta = 0, gamma = 0;
        for (std::size_t i = 0; i < m; ++i) {
          alpha += col[p][i] * col[p][i];
          beta += col[q][i] * col[q][i];
          gamma += col[p][i] * col[q][i];
        }
        if (gamma == 0.0 || std::fabs(gamma) <= kTol * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::fabs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double xp = col[p][i], xq = col[q][i];
          col[p][i] = c * xp - s * xq;
          col[q][i] = s * xp + c * xq;
        }
      }
    }
    if (!rotated) break;
  }

  std::vector<double> sv(n);
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0;
    for (double v : col[j]) s += v * v;
    sv[j] = std::sqrt(s);
  }
  std::sort(sv.begin(), sv.end(), std::greater<>());
  return sv;
}

Mat round_to_float(const Mat& a) {
  Mat out = a;
  for (auto& v : out.data()) v = static_cast<double>(static_cast<float>(v));
  return out;
}

}  // namespace less
