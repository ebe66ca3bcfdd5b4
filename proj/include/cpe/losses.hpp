// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "cpe/types.hpp"

#include <array>
#include <cstdint>
#include <span>
#include <vector>

namespace cpe {

// ---------------------------------------------------------------------------
// Scalar-generic primitives. All softmax/cross-entropy paths go through
// log-sum-exp with max subtraction.
// ---------------------------------------------------------------------------

template <typename Derived>
typename Derived::Scalar log_sum_exp(const Eigen::MatrixBase<Derived>& v) {
  using S = typename Derived::Scalar;
  const S m = v.maxCoeff();
  return m + std::log((v.array() - m).exp().sum());
}

template <typename Derived>
Eigen::Vector<typename Derived::Scalar, Eigen::Dynamic> softmax(
    const Eigen::MatrixBase<Derived>& v) {
  using S = typename Derived::Scalar;
  Eigen::Array<S, Eigen::Dynamic, 1> e = (v.array() - v.maxCoeff()).exp();
  return (e / e.sum()).matrix();
}

template <typename Derived>
typename Derived::Scalar cross_entropy(const Eigen::MatrixBase<Derived>& logits,
                                       Index label) {
  if (label < 0 || label >= logits.size())
    throw std::out_of_range("cross_entropy: label " + std::to_string(label) +
                            " outside [0, " + std::to_string(logits.size()) + ")");
  return log_sum_exp(logits) - logits(label);
}

/// d cross_entropy / d logits = softmax(logits) - onehot(label).
template <typename Derived>
Eigen::Vector<typename Derived::Scalar, Eigen::Dynamic> cross_entropy_grad(
    const Eigen::MatrixBase<Derived>& logits, Index label) {
  if (label < 0 || label >= logits.size())
    throw std::out_of_range("cross_entropy_grad: label out of range");
  auto g = softmax(logits);
  g(label) -= typename Derived::Scalar(1);
  return g;
}

/// Labeled-set class prior, pi_k = N_k / N, with the elementwise log cached.
struct Prior {
  Vec pi;
  Vec log_pi;

  static Prior from_counts(std::span<const std::int64_t> counts);
  static Prior from_probabilities(Vec pi);
  static Prior uniform(int num_classes);

  int num_classes() const { return static_cast<int>(pi.size()); }

  /// tau * log_pi shifted so its max entry is exactly zero. The shift cancels
  /// in softmax, and makes tau = 0 and uniform priors reduce to the plain
  /// cross entropy bit-for-bit.
  Vec adjustment(double tau) const {
    Vec adj = tau * log_pi;
    adj.array() -= adj.maxCoeff();
    return adj;
  }
};

/// Logit-adjustment intensities for the three experts.
struct TauTriple {
  double tau1 = 0.0;
  double tau2 = 2.0;
  double tau3 = 4.0;

  double operator[](std::size_t i) const {
    switch (i) {
      case 0: return tau1;
      case 1: return tau2;
      case 2: return tau3;
      default: throw std::out_of_range("TauTriple index");
    }
  }
  std::array<double, 3> as_array() const { return {tau1, tau2, tau3}; }
};

/// Balanced cross entropy: cross_entropy(logits + tau * log pi, label).
template <typename Derived>
typename Derived::Scalar balanced_cross_entropy(const Eigen::MatrixBase<Derived>& logits,
                                                Index label, const Prior& prior,
                                                double tau) {
  if (logits.size() != prior.pi.size())
    throw std::invalid_argument("balanced_cross_entropy: prior size mismatch");
  const Vec adjusted = logits + prior.adjustment(tau);
  return cross_entropy(adjusted, label);
}

template <typename Derived>
Vec balanced_cross_entropy_grad(const Eigen::MatrixBase<Derived>& logits, Index label,
                                const Prior& prior, double tau) {
  const Vec adjusted = logits + prior.adjustment(tau);
  return cross_entropy_grad(adjusted, label);
}

/// True iff the max probability strictly exceeds rho.
inline bool confidence_mask(const Vec& probabilities, double rho) {
  return probabilities.maxCoeff() > rho;
}

// ---------------------------------------------------------------------------
// Batch losses. The *_cpe_* entry points are fixed at three experts; the
// span-based cores also serve the single-expert ablations.
// ---------------------------------------------------------------------------

struct SupervisedLoss {
  double total = 0.0;
  std::vector<double> per_expert;
};

struct UnsupervisedLoss {
  double total = 0.0;
  std::vector<double> per_expert;
  std::vector<double> mask_rates;
};

/// Per-term breakdown of one optimization step's loss.
struct LossBundle {
  std::vector<double> supervised_per_expert;
  std::vector<double> unsupervised_per_expert;  // lambda-weighted
  std::vector<double> mask_rate_per_expert;
  double total = 0.0;

  bool finite() const;
};

/// Mean balanced CE per expert over the labeled batch; total is the sum of
/// the per-expert means. Optionally writes d(total)/d(logits_i).
SupervisedLoss supervised_loss_multi(std::span<const Mat> expert_logits,
                                     std::span<const int> labels, const Prior& prior,
                                     std::span<const double> taus,
                                     std::vector<Mat>* grads = nullptr);

SupervisedLoss supervised_cpe_loss(const std::array<Mat, 3>& expert_logits,
                                   std::span<const int> labels, const Prior& prior,
                                   const TauTriple& taus,
                                   std::array<Mat, 3>* grads = nullptr);

/// FixMatch-style masked pseudo-label loss, one term per expert, each using
/// its own pseudo-labels and confidences (from the weak view). Already
/// carries the lambda weight and the 1/B_u factor.
UnsupervisedLoss unsupervised_loss_multi(std::span<const Mat> expert_logits_on_strong,
                                         std::span<const std::vector<int>> pseudo_labels,
                                         std::span<const Vec> confidences, double rho,
                                         double lambda, std::vector<Mat>* grads = nullptr);

UnsupervisedLoss unsupervised_cpe_loss(const std::array<Mat, 3>& expert_logits_on_strong,
                                       const std::array<std::vector<int>, 3>& pseudo_labels,
                                       const std::array<Vec, 3>& confidences, double rho,
                                       double lambda, std::array<Mat, 3>* grads = nullptr);

enum class Branch : int { HMT = 0, MT = 1, T = 2 };
constexpr int kNumBranches = 3;
const char* branch_name(Branch b);

/// One sample's classwise-BN term: the average of the cross entropies over
/// the branches the pseudo-label activates (head -> HMT only; medium -> HMT
/// and MT; tail -> all three).
double cbn_unsupervised_term(const std::array<Vec, kNumBranches>& logits_by_branch,
                             int pseudo_label, const ClassGroups& groups);

/// Number of active branch terms for a pseudo-label: 1, 2 or 3.
int cbn_active_terms(int pseudo_label, const ClassGroups& groups);

/// Batch CBN unsupervised loss. logits_by_branch[b][i] holds expert i's
/// logits over branch b's normalization of the strong view. Masked and
/// lambda-weighted exactly like the plain unsupervised loss, with the CE
/// replaced per sample by the CBN term. grads, when given, is filled with
/// d(total)/d(logits_by_branch[b][i]).
UnsupervisedLoss cbn_unsupervised_loss(
    const std::array<std::vector<Mat>, kNumBranches>& logits_by_branch,
    std::span<const std::vector<int>> pseudo_labels, std::span<const Vec> confidences,
    const ClassGroups& groups, double rho, double lambda,
    std::array<std::vector<Mat>, kNumBranches>* grads = nullptr);

/// Assembles the step bundle: total = sum of supervised means + the
/// lambda-weighted unsupervised terms.
LossBundle total_cpe_loss(const SupervisedLoss& sup, const UnsupervisedLoss& unsup);

}  // namespace cpe
