#pragma once

#include "dcss/common.hpp"

#include <vector>

namespace dcss::opt {

/// Adam with decoupled weight decay. Parameters are re-quantized to float32
/// values after every step so checkpoints round-trip bitwise.
class AdamW {
 public:
  explicit AdamW(double weight_decay) : wd_(weight_decay) {}

  void step(const std::vector<Mat*>& params, const std::vector<Mat>& grads,
            double lr);

  int steps_taken() const { return t_; }

 private:
  double wd_;
  double beta1_ = 0.9;
  double beta2_ = 0.999;
  double eps_ = 1e-8;
  int t_ = 0;
  std::vector<Mat> m_, v_;
};

/// Polynomial decay from base_lr to 0 over total_steps.
double poly_lr(double base_lr, int step, int total_steps, double power = 0.9);

}  // namespace dcss::opt
