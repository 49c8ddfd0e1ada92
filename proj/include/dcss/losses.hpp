#pragma once

#include "dcss/autodiff.hpp"
#include "dcss/common.hpp"

#include <functional>
#include <vector>

namespace dcss::loss {

constexpr double kProbEps = 1e-7;

struct ASLConfig {
  double gamma_pos = 0.0;
  double gamma_neg = 2.0;
};

/// 1 - 2*sum(p g) / sum(p^2 + g^2). Throws DegenerateInputError when both
/// p and g are all-zero (0/0).
double dice_loss(const Mat& p, const Mat& g);

/// Mean negative log-likelihood; rows of probs must sum to 1 within 1e-6.
/// Probabilities are clamped to [kProbEps, 1 - kProbEps].
double ce_loss(const Mat& probs, const Mat& onehot);

/// Dice plus per-pixel two-class cross-entropy of a binary mask, weight 1
/// each.
double seg_loss(const Mat& p, const Mat& g);

/// Focal-style existence loss: -(1-p)^gp log(p) for present classes,
/// -p^gn log(1-p) for absent ones, averaged over classes. Scores are
/// clamped into the open unit interval first.
double asymmetric_loss(const Vec& scores, const std::vector<int>& present,
                       const ASLConfig& config);

/// Max relative error between analytic gradients and central differences,
/// denominator max(|a|, |n|, 1e-8).
double grad_check(const std::function<double(const std::vector<Mat>&)>& fn,
                  const std::vector<Mat>& params,
                  const std::vector<Mat>& analytic, double epsilon = 1e-4);

// -- tape versions used inside training graphs --

ad::Var dice_loss_t(ad::Tape& t, ad::Var p, const Mat& g);
ad::Var seg_loss_t(ad::Tape& t, ad::Var p, const Mat& g);
ad::Var asymmetric_loss_t(ad::Tape& t, ad::Var scores,
                          const std::vector<int>& present,
                          const ASLConfig& config);

}  // namespace dcss::loss
