// SPDX-License-Identifier: Apache-2.0
#include "cpe/losses.hpp"

#include <cmath>

namespace cpe {

Prior Prior::from_counts(std::span<const std::int64_t> counts) {
  if (counts.empty()) throw std::invalid_argument("Prior: empty counts");
  std::int64_t total = 0;
  for (auto c : counts) {
    if (c <= 0) throw std::invalid_argument("Prior: all class counts must be positive");
    total += c;
  }
  Vec pi(static_cast<Index>(counts.size()));
  for (std::size_t k = 0; k < counts.size(); ++k)
    pi(static_cast<Index>(k)) = static_cast<double>(counts[k]) / static_cast<double>(total);
  return from_probabilities(std::move(pi));
}

Prior Prior::from_probabilities(Vec pi) {
  if (pi.size() == 0) throw std::invalid_argument("Prior: empty probability vector");
  if ((pi.array() <= 0.0).any())
    throw std::invalid_argument("Prior: every entry must be positive (log undefined at 0)");
  if (std::abs(pi.sum() - 1.0) > 1e-9)
    throw std::invalid_argument("Prior: probabilities must sum to 1");
  Prior p;
  // scalar loop: Eigen's packet log can differ from std::log in the last ulp
  // across SIMD/tail lanes, which would break the exact uniform-prior
  // reduction to plain cross entropy
  p.log_pi.resize(pi.size());
  for (Index i = 0; i < pi.size(); ++i) p.log_pi(i) = std::log(pi(i));
  p.pi = std::move(pi);
  return p;
}

Prior Prior::uniform(int num_classes) {
  if (num_classes < 1) throw std::invalid_argument("Prior: num_classes must be positive");
  return from_probabilities(Vec::Constant(num_classes, 1.0 / num_classes));
}

bool LossBundle::finite() const {
  auto all_finite = [](const std::vector<double>& v) {
    for (double x : v)
      if (!std::isfinite(x)) return false;
    return true;
  };
  return std::isfinite(total) && all_finite(supervised_per_expert) &&
         all_finite(unsupervised_per_expert) && all_finite(mask_rate_per_expert);
}

namespace {

void check_batch_shapes(std::span<const Mat> expert_logits, std::size_t batch,
                        const char* who) {
  if (expert_logits.empty()) throw std::invalid_argument(std::string(who) + ": no experts");
  const Index rows = expert_logits[0].rows();
  const Index cols = expert_logits[0].cols();
  if (static_cast<std::size_t>(rows) != batch)
    throw std::invalid_argument(std::string(who) + ": batch size mismatch");
  for (const Mat& m : expert_logits)
    if (m.rows() != rows || m.cols() != cols)
      throw std::invalid_argument(std::string(who) + ": expert logit shapes differ");
}

}  // namespace

SupervisedLoss supervised_loss_multi(std::span<const Mat> expert_logits,
                                     std::span<const int> labels, const Prior& prior,
                                     std::span<const double> taus,
                                     std::vector<Mat>* grads) {
  check_batch_shapes(expert_logits, labels.size(), "supervised loss");
  if (taus.size() != expert_logits.size())
    throw std::invalid_argument("supervised loss: one tau per expert required");
  const auto num_experts = expert_logits.size();
  const Index batch = expert_logits[0].rows();
  if (batch == 0) throw std::invalid_argument("supervised loss: empty batch");

  if (grads) {
    grads->assign(num_experts, Mat());
  }

  SupervisedLoss out;
  out.per_expert.resize(num_experts, 0.0);
  for (std::size_t i = 0; i < num_experts; ++i) {
    const Mat& logits = expert_logits[i];
    const Vec adj = prior.adjustment(taus[i]);
    double sum = 0.0;
    Mat grad = grads ? Mat::Zero(logits.rows(), logits.cols()) : Mat();
    for (Index b = 0; b < batch; ++b) {
      const Vec adjusted = logits.row(b).transpose() + adj;
      sum += cross_entropy(adjusted, labels[static_cast<std::size_t>(b)]);
      if (grads)
        grad.row(b) =
            cross_entropy_grad(adjusted, labels[static_cast<std::size_t>(b)]).transpose() /
            static_cast<double>(batch);
    }
    out.per_expert[i] = sum / static_cast<double>(batch);
    out.total += out.per_expert[i];
    if (grads) (*grads)[i] = std::move(grad);
  }
  return out;
}

SupervisedLoss supervised_cpe_loss(const std::array<Mat, 3>& expert_logits,
                                   std::span<const int> labels, const Prior& prior,
                                   const TauTriple& taus, std::array<Mat, 3>* grads) {
  const auto tau_arr = taus.as_array();
  std::vector<Mat> g;
  auto out = supervised_loss_multi(std::span<const Mat>(expert_logits.data(), 3), labels,
                                   prior, tau_arr, grads ? &g : nullptr);
  if (grads)
    for (int i = 0; i < 3; ++i) (*grads)[static_cast<std::size_t>(i)] = std::move(g[i]);
  return out;
}

UnsupervisedLoss unsupervised_loss_multi(std::span<const Mat> expert_logits_on_strong,
                                         std::span<const std::vector<int>> pseudo_labels,
                                         std::span<const Vec> confidences, double rho,
                                         double lambda, std::vector<Mat>* grads) {
  const auto num_experts = expert_logits_on_strong.size();
  if (pseudo_labels.size() != num_experts || confidences.size() != num_experts)
    throw std::invalid_argument("unsupervised loss: per-expert inputs required");
  const Index batch = expert_logits_on_strong.empty() ? 0 : expert_logits_on_strong[0].rows();
  check_batch_shapes(expert_logits_on_strong, static_cast<std::size_t>(batch),
                     "unsupervised loss");
  if (batch == 0) throw std::invalid_argument("unsupervised loss: empty batch");

  if (grads) grads->assign(num_experts, Mat());

  UnsupervisedLoss out;
  out.per_expert.resize(num_experts, 0.0);
  out.mask_rates.resize(num_experts, 0.0);
  const double scale = lambda / static_cast<double>(batch);
  for (std::size_t i = 0; i < num_experts; ++i) {
    const Mat& logits = expert_logits_on_strong[i];
    if (static_cast<Index>(pseudo_labels[i].size()) != batch ||
        confidences[i].size() != batch)
      throw std::invalid_argument("unsupervised loss: pseudo-label/confidence length mismatch");
    Mat grad = grads ? Mat::Zero(logits.rows(), logits.cols()) : Mat();
    double sum = 0.0;
    Index unmasked = 0;
    for (Index b = 0; b < batch; ++b) {
      if (!(confidences[i](b) > rho)) continue;  // strict threshold
      ++unmasked;
      const int y_hat = pseudo_labels[i][static_cast<std::size_t>(b)];
      sum += cross_entropy(logits.row(b).transpose(), y_hat);
      if (grads)
        grad.row(b) = scale * cross_entropy_grad(logits.row(b).transpose(), y_hat).transpose();
    }
    out.per_expert[i] = scale * sum;
    out.mask_rates[i] = static_cast<double>(unmasked) / static_cast<double>(batch);
    out.total += out.per_expert[i];
    if (grads) (*grads)[i] = std::move(grad);
  }
  return out;
}

UnsupervisedLoss unsupervised_cpe_loss(const std::array<Mat, 3>& expert_logits_on_strong,
                                       const std::array<std::vector<int>, 3>& pseudo_labels,
                                       const std::array<Vec, 3>& confidences, double rho,
                                       double lambda, std::array<Mat, 3>* grads) {
  std::vector<Mat> g;
  auto out = unsupervised_loss_multi(
      std::span<const Mat>(expert_logits_on_strong.data(), 3),
      std::span<const std::vector<int>>(pseudo_labels.data(), 3),
      std::span<const Vec>(confidences.data(), 3), rho, lambda, grads ? &g : nullptr);
  if (grads)
    for (int i = 0; i < 3; ++i) (*grads)[static_cast<std::size_t>(i)] = std::move(g[i]);
  return out;
}

const char* branch_name(Branch b) {
  switch (b) {
    case Branch::HMT: return "HMT";
    case Branch::MT: return "MT";
    default: return "T";
  }
}

int cbn_active_terms(int pseudo_label, const ClassGroups& groups) {
  switch (groups.group_of(pseudo_label)) {
    case ClassGroups::Group::Head: return 1;
    case ClassGroups::Group::Medium: return 2;
    default: return 3;
  }
}

double cbn_unsupervised_term(const std::array<Vec, kNumBranches>& logits_by_branch,
                             int pseudo_label, const ClassGroups& groups) {
  const int active = cbn_active_terms(pseudo_label, groups);
  double sum = cross_entropy(logits_by_branch[0], pseudo_label);
  if (active >= 2) sum += cross_entropy(logits_by_branch[1], pseudo_label);
  if (active >= 3) sum += cross_entropy(logits_by_branch[2], pseudo_label);
  return sum / active;
}

UnsupervisedLoss cbn_unsupervised_loss(
    const std::array<std::vector<Mat>, kNumBranches>& logits_by_branch,
    std::span<const std::vector<int>> pseudo_labels, std::span<const Vec> confidences,
    const ClassGroups& groups, double rho, double lambda,
    std::array<std::vector<Mat>, kNumBranches>* grads) {
  const auto num_experts = logits_by_branch[0].size();
  if (num_experts == 0) throw std::invalid_argument("cbn loss: no experts");
  // MT/T may be empty when no pseudo-label routed a sample there this step.
  for (const auto& branch : logits_by_branch)
    if (!branch.empty() && branch.size() != num_experts)
      throw std::invalid_argument("cbn loss: branch/expert table is ragged");
  if (pseudo_labels.size() != num_experts || confidences.size() != num_experts)
    throw std::invalid_argument("cbn loss: per-expert inputs required");
  const Index batch = logits_by_branch[0][0].rows();
  if (batch == 0) throw std::invalid_argument("cbn loss: empty batch");

  if (grads)
    for (int b = 0; b < kNumBranches; ++b) {
      (*grads)[static_cast<std::size_t>(b)].clear();
      if (logits_by_branch[static_cast<std::size_t>(b)].empty()) continue;
      for (std::size_t i = 0; i < num_experts; ++i)
        (*grads)[static_cast<std::size_t>(b)].push_back(
            Mat::Zero(batch, logits_by_branch[0][0].cols()));
    }

  UnsupervisedLoss out;
  out.per_expert.resize(num_experts, 0.0);
  out.mask_rates.resize(num_experts, 0.0);
  const double scale = lambda / static_cast<double>(batch);
  for (std::size_t i = 0; i < num_experts; ++i) {
    double sum = 0.0;
    Index unmasked = 0;
    for (Index s = 0; s < batch; ++s) {
      if (!(confidences[i](s) > rho)) continue;
      ++unmasked;
      const int y_hat = pseudo_labels[i][static_cast<std::size_t>(s)];
      const int active = cbn_active_terms(y_hat, groups);
      for (int b = 0; b < active; ++b) {
        if (logits_by_branch[static_cast<std::size_t>(b)].empty())
          throw std::logic_error(std::string("cbn loss: pseudo-label needs branch ") +
                                 branch_name(static_cast<Branch>(b)) +
                                 " but it was not forwarded");
        const Vec row = logits_by_branch[static_cast<std::size_t>(b)][i].row(s).transpose();
        sum += cross_entropy(row, y_hat) / active;
        if (grads)
          (*grads)[static_cast<std::size_t>(b)][i].row(s) =
              (scale / active) * cross_entropy_grad(row, y_hat).transpose();
      }
    }
    out.per_expert[i] = scale * sum;
    out.mask_rates[i] = static_cast<double>(unmasked) / static_cast<double>(batch);
    out.total += out.per_expert[i];
  }
  return out;
}

LossBundle total_cpe_loss(const SupervisedLoss& sup, const UnsupervisedLoss& unsup) {
  LossBundle bundle;
  bundle.supervised_per_expert = sup.per_expert;
  bundle.unsupervised_per_expert = unsup.per_expert;
  bundle.mask_rate_per_expert = unsup.mask_rates;
  bundle.total = sup.total + unsup.total;
  return bundle;
}

}  // namespace cpe
