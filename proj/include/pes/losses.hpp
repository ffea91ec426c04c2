#pragma once

#include "pes/error.hpp"
#include "pes/pseudo.hpp"
#include "pes/types.hpp"

#include <algorithm>
#include <cmath>

namespace pes {

/// Loss value together with its gradient w.r.t. the prediction it was computed from.
template <typename Scalar>
struct LossResult {
  Scalar value{};
  MatrixX<Scalar> grad;
};

/// Coarse and fine parts of a detector loss, with gradients for both logit blocks.
template <typename Scalar>
struct DetectorLoss {
  Scalar value{};
  Scalar coarse{};
  Scalar fine{};
  MatrixX<Scalar> grad_coarse;
  MatrixX<Scalar> grad_fine;
};

/// Class-weighted 2-way softmax cross-entropy over stacked frames (rows).
/// Label 1 carries `fg_weight`, label 0 weight 1; normalized by the weight sum.
template <typename Scalar>
LossResult<Scalar> coarse_loss(const MatrixX<Scalar>& logits, const IndexVector& labels, Scalar fg_weight = 5) {
  require(logits.cols() == 2, ErrorCategory::shape, "coarse logits must have two columns");
  require(logits.rows() == labels.size(), ErrorCategory::shape, "coarse labels do not match logits");
  require(fg_weight > 0, ErrorCategory::argument, "fg_weight must be positive");
  LossResult<Scalar> out;
  out.grad = MatrixX<Scalar>::Zero(logits.rows(), 2);
  if (logits.rows() == 0) return out;

  Scalar weighted = 0, weight_sum = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const int y = labels[i];
    require(y == 0 || y == 1, ErrorCategory::argument, "coarse labels must be 0 or 1");
    const Scalar w = y == 1 ? fg_weight : Scalar(1);
    const Scalar hi = std::max(logits(i, 0), logits(i, 1));
    const Scalar lse = hi + std::log(std::exp(logits(i, 0) - hi) + std::exp(logits(i, 1) - hi));
    weighted += w * (lse - logits(i, y));
    weight_sum += w;
    for (int c = 0; c < 2; ++c) out.grad(i, c) = w * (std::exp(logits(i, c) - lse) - (c == y ? Scalar(1) : Scalar(0)));
  }
  out.value = weighted / weight_sum;
  out.grad /= weight_sum;
  return out;
}

/// Element-wise binary cross-entropy with logits, averaged over every entry.
template <typename Scalar>
LossResult<Scalar> fine_loss(const MatrixX<Scalar>& logits, const MatrixX<Scalar>& labels) {
  require(logits.rows() == labels.rows() && logits.cols() == labels.cols(), ErrorCategory::shape,
          "fine labels do not match logits");
  LossResult<Scalar> out;
  out.grad = MatrixX<Scalar>::Zero(logits.rows(), logits.cols());
  if (logits.size() == 0) return out;
  const Scalar n = static_cast<Scalar>(logits.size());
  Scalar total = 0;
  for (Eigen::Index j = 0; j < logits.cols(); ++j)
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
      const Scalar x = logits(i, j), y = labels(i, j);
      total += std::max(x, Scalar(0)) - x * y + std::log1p(std::exp(-std::abs(x)));
      out.grad(i, j) = (Scalar(sigmoid(x)) - y) / n;
    }
  out.value = total / n;
  return out;
}

/// Coarse plus fine loss against dense hard targets.
template <typename Scalar>
DetectorLoss<Scalar> detector_loss(const MatrixX<Scalar>& coarse_logits, const MatrixX<Scalar>& fine_logits,
                                   const IndexVector& coarse_labels, const MatrixX<Scalar>& fine_labels,
                                   Scalar fg_weight = 5) {
  auto c = coarse_loss<Scalar>(coarse_logits, coarse_labels, fg_weight);
  auto f = fine_loss<Scalar>(fine_logits, fine_labels);
  return {c.value + f.value, c.value, f.value, std::move(c.grad), std::move(f.grad)};
}

/// Detector loss against pseudo-labels; the targets are constants, so gradients
/// reach the predictions only.
template <typename Scalar>
DetectorLoss<Scalar> unlabeled_loss(const MatrixX<Scalar>& coarse_logits, const MatrixX<Scalar>& fine_logits,
                                    const PseudoLabels& pseudo, Scalar fg_weight = 5) {
  require(pseudo.coarse.size() == coarse_logits.rows() && pseudo.fine.rows() == fine_logits.rows() &&
              pseudo.fine.cols() == fine_logits.cols(),
          ErrorCategory::shape, "pseudo-labels are stale: shape differs from predictions");
  return detector_loss<Scalar>(coarse_logits, fine_logits, pseudo.coarse, pseudo.fine.template cast<Scalar>(),
                               fg_weight);
}

/// Unlabeled-loss weight ramp: 0 before `start`, linear to `target` on [start, end), `target` after.
struct AnnealSchedule {
  int start = 30;
  int end = 90;
  double target = 0.4;

  void validate() const {
    require(start < end, ErrorCategory::config, "anneal start must precede its end");
    require(start >= 0, ErrorCategory::config, "anneal start must be non-negative");
    require(target >= 0.0, ErrorCategory::config, "anneal target must be non-negative");
  }
};

inline double lambda_at(int epoch, const AnnealSchedule& s) {
  require(epoch >= 0, ErrorCategory::argument, "epoch must be non-negative");
  if (epoch < s.start) return 0.0;
  if (epoch >= s.end) return s.target;
  return s.target * static_cast<double>(epoch - s.start) / static_cast<double>(s.end - s.start);
}

/// L_lab + lambda(e) * L_unlab. An absent term (pure batch) is passed as 0.
inline double total_stage1_loss(double labeled, double unlabeled, int epoch, const AnnealSchedule& s) {
  return labeled + lambda_at(epoch, s) * unlabeled;
}

/// Mean squared error between embeddings; the teacher side is a constant, so
/// the gradient is taken w.r.t. the student only.
template <typename Scalar>
LossResult<Scalar> distill_loss(const MatrixX<Scalar>& teacher, const MatrixX<Scalar>& student) {
  require(teacher.rows() == student.rows() && teacher.cols() == student.cols(), ErrorCategory::shape,
          "teacher and student embeddings differ in shape");
  LossResult<Scalar> out;
  if (student.size() == 0) {
    out.grad = MatrixX<Scalar>::Zero(student.rows(), student.cols());
    return out;
  }
  const MatrixX<Scalar> diff = student - teacher;
  const Scalar n = static_cast<Scalar>(diff.size());
  out.value = diff.squaredNorm() / n;
  out.grad = (Scalar(2) / n) * diff;
  return out;
}

}  // namespace pes
