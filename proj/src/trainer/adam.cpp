#include "less/adam.hpp"

#include <cmath>
#include <stdexcept>

namespace less {

Adam::Adam(const std::vector<const Mat*>& shapes, AdamConfig cfg) : cfg_(cfg) {
  for (const Mat* s : shapes) {
    m_.emplace_back(s->rows(), s->cols());
    v_.emplace_back(s->rows(), s->cols());
  }
}

void Adam::step(const std::vector<Mat*>& params, const std::vector<const Mat*>& grads, double lr) {
  if (params.size() != m_.size() || grads.size() != m_.size()) {
    throw std::invalid_argument("Adam::step: tensor count mismatch");
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Mat& p = *params[i];
    const Mat& g = *grads[i];
    if (p.size() != m_[i].size() || g.size() != p.size()) {
      throw std::invalid_argument("Adam::step: shape mismatch at tensor " + std::to_string(i));
    }
    for (std::size_t j = 0; j < p.size(); ++j) {
      m_[i][j] = cfg_.beta1 * m_[i][j] + (1.0 - cfg_.beta1) * g[j];
      v_[i][j] = cfg_.beta2 * v_[i][j] + (1.0 - cfg_.beta2) * g[j] * g[j];
      const double mhat = m_[i][j] / bc1;
      const double vhat = v_[i][j] / bc2;
      p[j] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

}  // namespace less
