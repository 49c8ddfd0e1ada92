#include "dcss/losses.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace dcss::loss {

namespace {

double clamp_prob(double p) {
  return std::min(std::max(p, kProbEps), 1.0 - kProbEps);
}

void require_same_shape(const Mat& a, const Mat& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ValidationError(std::string(what) + ": shape mismatch " +
                          std::to_string(a.rows()) + "x" +
                          std::to_string(a.cols()) + " vs " +
                          std::to_string(b.rows()) + "x" +
                          std::to_string(b.cols()));
  }
}

void require_gammas(const ASLConfig& config) {
  if (config.gamma_pos < 0.0 || config.gamma_neg < 0.0) {
    throw ValidationError("asymmetric_loss: gammas must be non-negative");
  }
}

Mat presence_mask(const std::vector<int>& present, Eigen::Index rows,
                  Eigen::Index cols, bool positive) {
  if (static_cast<Eigen::Index>(present.size()) != rows * cols) {
    throw ValidationError("asymmetric_loss: presence vector has " +
                          std::to_string(present.size()) + " entries, scores " +
                          std::to_string(rows * cols));
  }
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < rows * cols; ++i) {
    const int y = present[static_cast<std::size_t>(i)];
    if (y != 0 && y != 1) {
      throw ValidationError("asymmetric_loss: presence entries must be 0 or 1");
    }
    const bool on = positive ? (y == 1) : (y == 0);
    m(i / cols, i % cols) = on ? 1.0 : 0.0;
  }
  return m;
}

}  // namespace

double dice_loss(const Mat& p, const Mat& g) {
  require_same_shape(p, g, "dice_loss");
  const double num = (p.array() * g.array()).sum();
  const double den = p.array().square().sum() + g.array().square().sum();
  if (den == 0.0) {
    throw DegenerateInputError("dice_loss: prediction and target are both all-zero");
  }
  return 1.0 - 2.0 * num / den;
}

double ce_loss(const Mat& probs, const Mat& onehot) {
  require_same_shape(probs, onehot, "ce_loss");
  if (probs.rows() == 0 || probs.cols() == 0) {
    throw ValidationError("ce_loss: empty input");
  }
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    const double s = probs.row(i).sum();
    if (std::abs(s - 1.0) > 1e-6) {
      throw ValidationError("ce_loss: row " + std::to_string(i) +
                            " sums to " + std::to_string(s) + ", expected 1");
    }
    double ysum = 0.0;
    for (Eigen::Index j = 0; j < onehot.cols(); ++j) {
      const double y = onehot(i, j);
      if (y != 0.0 && y != 1.0) {
        throw ValidationError("ce_loss: labels must be one-hot");
      }
      ysum += y;
    }
    if (ysum != 1.0) {
      throw ValidationError("ce_loss: row " + std::to_string(i) +
                            " of labels is not one-hot");
    }
  }
  double total = 0.0;
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    for (Eigen::Index j = 0; j < probs.cols(); ++j) {
      if (onehot(i, j) == 1.0) {
        total -= std::log(clamp_prob(probs(i, j)));
      }
    }
  }
  return total / static_cast<double>(probs.rows());
}

double seg_loss(const Mat& p, const Mat& g) {
  require_same_shape(p, g, "seg_loss");
  const double dice = dice_loss(p, g);
  double ce = 0.0;
  const auto n = static_cast<double>(p.rows() * p.cols());
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    for (Eigen::Index j = 0; j < p.cols(); ++j) {
      const double y = g(i, j);
      if (y != 0.0 && y != 1.0) {
        throw ValidationError("seg_loss: target mask must be binary");
      }
      ce -= y * std::log(clamp_prob(p(i, j))) +
            (1.0 - y) * std::log(clamp_prob(1.0 - p(i, j)));
    }
  }
  return dice + ce / n;
}

double asymmetric_loss(const Vec& scores, const std::vector<int>& present,
                       const ASLConfig& config) {
  require_gammas(config);
  if (scores.size() == 0) {
    throw ValidationError("asymmetric_loss: no classes");
  }
  if (static_cast<Eigen::Index>(present.size()) != scores.size()) {
    throw ValidationError("asymmetric_loss: presence vector has " +
                          std::to_string(present.size()) + " entries, scores " +
                          std::to_string(scores.size()));
  }
  double total = 0.0;
  for (Eigen::Index k = 0; k < scores.size(); ++k) {
    const int y = present[static_cast<std::size_t>(k)];
    if (y != 0 && y != 1) {
      throw ValidationError("asymmetric_loss: presence entries must be 0 or 1");
    }
    const double p = clamp_prob(scores(k));
    if (y == 1) {
      total -= std::pow(1.0 - p, config.gamma_pos) * std::log(p);
    } else {
      total -= std::pow(p, config.gamma_neg) * std::log(1.0 - p);
    }
  }
  return total / static_cast<double>(scores.size());
}

double grad_check(const std::function<double(const std::vector<Mat>&)>& fn,
                  const std::vector<Mat>& params,
                  const std::vector<Mat>& analytic, double epsilon) {
  if (params.size() != analytic.size()) {
    throw ValidationError("grad_check: parameter and gradient counts differ");
  }
  double worst = 0.0;
  std::vector<Mat> work = params;
  for (std::size_t t = 0; t < work.size(); ++t) {
    require_same_shape(params[t], analytic[t], "grad_check");
    for (Eigen::Index i = 0; i < work[t].rows(); ++i) {
      for (Eigen::Index j = 0; j < work[t].cols(); ++j) {
        const double saved = work[t](i, j);
        work[t](i, j) = saved + epsilon;
        const double hi = fn(work);
        work[t](i, j) = saved - epsilon;
        const double lo = fn(work);
        work[t](i, j) = saved;
        const double numeric = (hi - lo) / (2.0 * epsilon);
        const double a = analytic[t](i, j);
        const double rel = std::abs(a - numeric) /
                           std::max({std::abs(a), std::abs(numeric), 1e-8});
        worst = std::max(worst, rel);
      }
    }
  }
  return worst;
}

ad::Var dice_loss_t(ad::Tape& t, ad::Var p, const Mat& g) {
  const Mat& pv = t.value(p);
  require_same_shape(pv, g, "dice_loss");
  if (pv.array().square().sum() + g.array().square().sum() == 0.0) {
    throw DegenerateInputError("dice_loss: prediction and target are both all-zero");
  }
  ad::Var num = ad::sum(ad::cmul_const(p, g));
  ad::Var den = ad::add_scalar(ad::sum(ad::cmul(p, p)), g.array().square().sum());
  return ad::add_scalar(ad::scale(ad::cdiv(num, den), -2.0), 1.0);
}

ad::Var seg_loss_t(ad::Tape& t, ad::Var p, const Mat& g) {
  const Mat& pv = t.value(p);
  require_same_shape(pv, g, "seg_loss");
  for (Eigen::Index i = 0; i < g.size(); ++i) {
    const double y = g(i / g.cols(), i % g.cols());
    if (y != 0.0 && y != 1.0) {
      throw ValidationError("seg_loss: target mask must be binary");
    }
  }
  ad::Var dice = dice_loss_t(t, p, g);
  ad::Var pc = ad::clampv(p, kProbEps, 1.0 - kProbEps);
  ad::Var qc = ad::clampv(ad::add_scalar(ad::scale(p, -1.0), 1.0), kProbEps,
                          1.0 - kProbEps);
  const Mat ones = Mat::Ones(g.rows(), g.cols());
  ad::Var ce = ad::add(ad::cmul_const(ad::logv(pc), g),
                       ad::cmul_const(ad::logv(qc), ones - g));
  const double n = static_cast<double>(g.rows() * g.cols());
  return ad::add(dice, ad::scale(ad::sum(ce), -1.0 / n));
}

ad::Var asymmetric_loss_t(ad::Tape& t, ad::Var scores,
                          const std::vector<int>& present,
                          const ASLConfig& config) {
  require_gammas(config);
  // Copy the dimensions up front: pushing ops below reallocates the tape's
  // node storage, which would invalidate a reference obtained from value().
  const Eigen::Index rows = t.value(scores).rows();
  const Eigen::Index cols = t.value(scores).cols();
  if (rows * cols == 0) {
    throw ValidationError("asymmetric_loss: no classes");
  }
  const Mat pos = presence_mask(present, rows, cols, true);
  const Mat neg = presence_mask(present, rows, cols, false);
  ad::Var p = ad::clampv(scores, kProbEps, 1.0 - kProbEps);
  ad::Var q = ad::add_scalar(ad::scale(p, -1.0), 1.0);
  ad::Var pos_term = ad::cmul(ad::powc(q, config.gamma_pos), ad::logv(p));
  ad::Var neg_term = ad::cmul(ad::powc(p, config.gamma_neg), ad::logv(q));
  ad::Var masked = ad::add(ad::cmul_const(pos_term, pos),
                           ad::cmul_const(neg_term, neg));
  return ad::scale(ad::sum(masked), -1.0 / static_cast<double>(rows * cols));
}

}  // namespace dcss::loss
