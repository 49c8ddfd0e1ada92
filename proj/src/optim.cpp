#include "dcss/optim.hpp"

#include <cmath>

namespace dcss::opt {

void AdamW::step(const std::vector<Mat*>& params,
                 const std::vector<Mat>& grads, double lr) {
  if (params.size() != grads.size())
    throw ValidationError("optimizer got mismatched parameter/gradient lists");
  if (m_.empty()) {
    for (const Mat* p : params) {
      m_.push_back(Mat::Zero(p->rows(), p->cols()));
      v_.push_back(Mat::Zero(p->rows(), p->cols()));
    }
  }
  if (m_.size() != params.size())
    throw ValidationError("optimizer parameter list changed size");

  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, t_);
  const double bc2 = 1.0 - std::pow(beta2_, t_);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Mat& p = *params[i];
    const Mat& g = grads[i];
    if (g.rows() != p.rows() || g.cols() != p.cols())
      throw ValidationError("gradient shape mismatch at parameter " +
                            std::to_string(i));
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g.cwiseProduct(g);
    const Mat mhat = m_[i] / bc1;
    const Mat vhat = v_[i] / bc2;
    p -= lr * (mhat.array() / (vhat.array().sqrt() + eps_)).matrix();
    p -= lr * wd_ * p;
    quantize_f32(p);
  }
}

double poly_lr(double base_lr, int step, int total_steps, double power) {
  if (total_steps <= 0) throw ValidationError("total_steps must be positive");
  const double frac =
      std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps));
  return base_lr * std::pow(1.0 - frac, power);
}

}  // namespace dcss::opt
