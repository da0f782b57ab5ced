#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace less {

// Dense row-major matrix of doubles. The only numeric carrier in the library.
class Mat {
 public:
  Mat() = default;
  Mat(std::size_t rows, std::size_t cols, double fill = 0.0);
  Mat(std::size_t rows, std::size_t cols, std::vector<double> data);
  Mat(std::initializer_list<std::initializer_list<double>> rows);

  static Mat identity(std::size_t n);
  static Mat row_vector(std::span<const double> values);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& storage() const { return data_; }

  void fill(double v);
  std::string shape_str() const;

  bool operator==(const Mat& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Products. Summation runs over the inner index in ascending order.
Mat matmul(const Mat& a, const Mat& b);
Mat matmul_tn(const Mat& a, const Mat& b);  // aᵀ·b
Mat matmul_nt(const Mat& a, const Mat& b);  // a·bᵀ
Mat transpose(const Mat& a);

Mat add(const Mat& a, const Mat& b);
Mat sub(const Mat& a, const Mat& b);
Mat hadamard(const Mat& a, const Mat& b);
Mat scale(const Mat& a, double s);
void axpy(double alpha, const Mat& x, Mat& y);  // y += alpha·x

Mat row_softmax(const Mat& s);
void softmax_inplace(std::span<double> row);

double gelu(double x);
double gelu_grad(double x);
Mat gelu(const Mat& x);
Mat abs_ew(const Mat& x);

double sum(const Mat& a);
double frobenius_sq(const Mat& a);
double max_abs(const Mat& a);
double max_abs_diff(const Mat& a, const Mat& b);
bool all_finite(const Mat& a);

Mat slice_cols(const Mat& a, std::size_t c0, std::size_t c1);
Mat slice_rows(const Mat& a, std::size_t r0, std::size_t r1);
void set_cols(Mat& dst, std::size_t c0, const Mat& src);

// Singular values in descending order (one-sided Jacobi).
std::vector<double> svd_values(const Mat& a);

// Rounds every entry through IEEE single precision.
Mat round_to_float(const Mat& a);

}  // namespace less
