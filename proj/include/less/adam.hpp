#pragma once

#include <cstddef>
#include <vector>

#include "less/mat.hpp"

namespace less {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Bias-corrected Adam over a fixed list of tensors.
class Adam {
 public:
  Adam() = default;
  explicit Adam(const std::vector<const Mat*>& shapes, AdamConfig cfg = {});

  // params[i] -= lr · m̂ / (sqrt(v̂) + eps), one moment pair per tensor.
  void step(const std::vector<Mat*>& params, const std::vector<const Mat*>& grads, double lr);

  std::size_t steps_taken() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  AdamConfig cfg_;
  std::vector<Mat> m_;
  std::vector<Mat> v_;
  std::size_t t_ = 0;
};

}  // namespace less
