// SPDX-License-Identifier: Apache-2.0
//
// Central finite differences (step 1e-4) against every analytic gradient:
// the loss primitives w.r.t. logits, and the BN/expert composites w.r.t.
// the encoder features and the raw inputs.
#include "cpe/losses.hpp"
#include "cpe/model.hpp"

#include "support/oracles.hpp"

#include <doctest.h>

#include <array>
#include <vector>

using namespace cpe;

namespace {

constexpr double kStep = 1e-4;
constexpr double kTol = 1e-4;

Vec random_logits(std::mt19937_64& rng, int C, double scale = 2.0) {
  Vec v(C);
  for (int i = 0; i < C; ++i) v(i) = scale * gaussian(rng);
  return v;
}

Mat random_mat(std::mt19937_64& rng, Index rows, Index cols, double scale = 1.0) {
  Mat m(rows, cols);
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) m(r, c) = scale * gaussian(rng);
  return m;
}

Prior random_prior(std::mt19937_64& rng, int C) {
  Vec pi(C);
  for (int i = 0; i < C; ++i) pi(i) = 0.05 + uniform_real(rng);
  pi /= pi.sum();
  return Prior::from_probabilities(pi);
}

}  // namespace

TEST_CASE("cross entropy and balanced cross entropy gradients") {
  auto rng = derive_rng(7, "grad-ce");
  for (int trial = 0; trial < 30; ++trial) {
    const int C = 2 + static_cast<int>(uniform_index(rng, 9));
    Vec logits = random_logits(rng, C);
    const int label = static_cast<int>(uniform_index(rng, C));
    const Prior prior = random_prior(rng, C);
    const double tau = 4.0 * uniform_real(rng);

    const Vec g_ce = cross_entropy_grad(logits, label);
    const double err_ce = oracle::check_gradient(
        [&] { return cross_entropy(logits, label); }, logits.data(),
        static_cast<std::size_t>(C), g_ce.data(), kStep);
    CHECK(err_ce <= kTol);

    const Vec g_bce = balanced_cross_entropy_grad(logits, label, prior, tau);
    const double err_bce = oracle::check_gradient(
        [&] { return balanced_cross_entropy(logits, label, prior, tau); }, logits.data(),
        static_cast<std::size_t>(C), g_bce.data(), kStep);
    CHECK(err_bce <= kTol);
  }
}

TEST_CASE("supervised loss gradient w.r.t. every expert's logits") {
  auto rng = derive_rng(17, "grad-sup");
  for (int trial = 0; trial < 10; ++trial) {
    const int C = 3 + static_cast<int>(uniform_index(rng, 5));
    const int B = 2 + static_cast<int>(uniform_index(rng, 4));
    std::array<Mat, 3> logits{random_mat(rng, B, C, 2.0), random_mat(rng, B, C, 2.0),
                              random_mat(rng, B, C, 2.0)};
    std::vector<int> labels;
    for (int b = 0; b < B; ++b) labels.push_back(static_cast<int>(uniform_index(rng, C)));
    const Prior prior = random_prior(rng, C);
    const TauTriple taus{0.0, 2.0, 4.0};

    std::array<Mat, 3> grads;
    supervised_cpe_loss(logits, labels, prior, taus, &grads);
    for (int e = 0; e < 3; ++e) {
      const double err = oracle::check_gradient(
          [&] { return supervised_cpe_loss(logits, labels, prior, taus).total; },
          logits[static_cast<std::size_t>(e)].data(),
          static_cast<std::size_t>(logits[static_cast<std::size_t>(e)].size()),
          grads[static_cast<std::size_t>(e)].data(), kStep);
      CHECK(err <= kTol);
    }
  }
}

TEST_CASE("unsupervised loss gradient with confidence masking") {
  auto rng = derive_rng(27, "grad-unsup");
  for (int trial = 0; trial < 10; ++trial) {
    const int C = 3 + static_cast<int>(uniform_index(rng, 5));
    const int B = 2 + static_cast<int>(uniform_index(rng, 5));
    std::array<Mat, 3> logits;
    std::array<std::vector<int>, 3> pseudo;
    std::array<Vec, 3> conf;
    for (int e = 0; e < 3; ++e) {
      logits[static_cast<std::size_t>(e)] = random_mat(rng, B, C, 2.0);
      conf[static_cast<std::size_t>(e)] = Vec(B);
      for (int b = 0; b < B; ++b) {
        pseudo[static_cast<std::size_t>(e)].push_back(static_cast<int>(uniform_index(rng, C)));
        conf[static_cast<std::size_t>(e)](b) = uniform_real(rng);
      }
    }
    const double rho = 0.5;
    const double lambda = 2.0;
    std::array<Mat, 3> grads;
    unsupervised_cpe_loss(logits, pseudo, conf, rho, lambda, &grads);
    for (int e = 0; e < 3; ++e) {
      const double err = oracle::check_gradient(
          [&] { return unsupervised_cpe_loss(logits, pseudo, conf, rho, lambda).total; },
          logits[static_cast<std::size_t>(e)].data(),
          static_cast<std::size_t>(logits[static_cast<std::size_t>(e)].size()),
          grads[static_cast<std::size_t>(e)].data(), kStep);
      CHECK(err <= kTol);
    }
  }
}

TEST_CASE("cbn loss gradient w.r.t. every branch/expert logits") {
  auto rng = derive_rng(37, "grad-cbn");
  const auto groups = partition_classes(6);
  for (int trial = 0; trial < 5; ++trial) {
    const int C = 6, B = 4;
    std::array<std::vector<Mat>, kNumBranches> logits;
    std::vector<std::vector<int>> pseudo(3);
    std::vector<Vec> conf(3);
    for (int b = 0; b < kNumBranches; ++b)
      for (int e = 0; e < 3; ++e)
        logits[static_cast<std::size_t>(b)].push_back(random_mat(rng, B, C, 2.0));
    for (int e = 0; e < 3; ++e) {
      conf[static_cast<std::size_t>(e)] = Vec(B);
      for (int s = 0; s < B; ++s) {
        pseudo[static_cast<std::size_t>(e)].push_back(static_cast<int>(uniform_index(rng, C)));
        conf[static_cast<std::size_t>(e)](s) = uniform_real(rng);
      }
    }
    std::array<std::vector<Mat>, kNumBranches> grads;
    cbn_unsupervised_loss(logits, pseudo, conf, groups, 0.4, 2.0, &grads);
    for (int b = 0; b < kNumBranches; ++b)
      for (int e = 0; e < 3; ++e) {
        const double err = oracle::check_gradient(
            [&] {
              return cbn_unsupervised_loss(logits, pseudo, conf, groups, 0.4, 2.0).total;
            },
            logits[static_cast<std::size_t>(b)][static_cast<std::size_t>(e)].data(),
            static_cast<std::size_t>(
                logits[static_cast<std::size_t>(b)][static_cast<std::size_t>(e)].size()),
            grads[static_cast<std::size_t>(b)][static_cast<std::size_t>(e)].data(), kStep);
        CHECK(err <= kTol);
      }
  }
}

TEST_CASE("BN + expert composite gradient w.r.t. encoder features") {
  auto rng = derive_rng(47, "grad-feat");
  const int B = 5, F = 4, C = 6;
  const auto groups = partition_classes(C);

  for (int trial = 0; trial < 5; ++trial) {
    std::array<BatchNorm, kNumBranches> bn{BatchNorm(F, 0.1, 1e-5), BatchNorm(F, 0.1, 1e-5),
                                           BatchNorm(F, 0.1, 1e-5)};
    // give the branches distinct, non-trivial affine parameters
    for (auto& b : bn) {
      for (int f = 0; f < F; ++f) {
        b.gamma()(f) = 0.5 + uniform_real(rng);
        b.beta()(f) = gaussian(rng);
      }
    }
    std::vector<Linear> experts;
    for (int e = 0; e < 3; ++e) experts.emplace_back(F, C, rng);

    Mat features = random_mat(rng, B, F, 1.5);
    std::array<std::vector<Index>, kNumBranches> active;
    for (Index r = 0; r < B; ++r) active[0].push_back(r);
    active[1] = {0, 2, 3};
    active[2] = {2};

    std::vector<std::vector<int>> pseudo(3);
    std::vector<Vec> conf(3);
    // pseudo-labels consistent with the routing: rows in active[1] may be
    // medium/tail, rows in active[2] tail, the rest head
    for (int e = 0; e < 3; ++e) {
      conf[static_cast<std::size_t>(e)] = Vec::Constant(B, 0.99);
      for (Index r = 0; r < B; ++r) {
        int y = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(groups.head_end)));
        if (r == 2)
          y = groups.tail_begin + static_cast<int>(uniform_index(
                  rng, static_cast<std::uint64_t>(C - groups.tail_begin)));
        else if (r == 0 || r == 3)
          y = groups.head_end + static_cast<int>(uniform_index(
                  rng, static_cast<std::uint64_t>(groups.tail_begin - groups.head_end)));
        pseudo[static_cast<std::size_t>(e)].push_back(y);
      }
    }

    auto loss_at = [&](const Mat& x) {
      std::array<std::vector<Mat>, kNumBranches> logits;
      for (int b = 0; b < kNumBranches; ++b) {
        const auto& rows = active[static_cast<std::size_t>(b)];
        if (rows.empty()) continue;
        const Mat norm = bn[static_cast<std::size_t>(b)].forward_train(x, rows, false, nullptr);
        for (const auto& head : experts)
          logits[static_cast<std::size_t>(b)].push_back(head.forward(norm));
      }
      return cbn_unsupervised_loss(logits, pseudo, conf, groups, 0.95, 2.0).total;
    };

    // analytic: forward with contexts, loss grads, then back through heads + BN
    std::array<BatchNorm::Ctx, kNumBranches> ctx;
    std::array<std::vector<Mat>, kNumBranches> logits;
    std::array<Mat, kNumBranches> normalized;
    for (int b = 0; b < kNumBranches; ++b) {
      const auto& rows = active[static_cast<std::size_t>(b)];
      if (rows.empty()) continue;
      normalized[static_cast<std::size_t>(b)] = bn[static_cast<std::size_t>(b)].forward_train(
          features, rows, false, &ctx[static_cast<std::size_t>(b)]);
      for (const auto& head : experts)
        logits[static_cast<std::size_t>(b)].push_back(
            head.forward(normalized[static_cast<std::size_t>(b)]));
    }
    std::array<std::vector<Mat>, kNumBranches> d_logits;
    cbn_unsupervised_loss(logits, pseudo, conf, groups, 0.95, 2.0, &d_logits);

    Mat d_features = Mat::Zero(B, F);
    for (int b = 0; b < kNumBranches; ++b) {
      if (d_logits[static_cast<std::size_t>(b)].empty()) continue;
      Mat d_norm = Mat::Zero(B, F);
      for (int e = 0; e < 3; ++e)
        d_norm += experts[static_cast<std::size_t>(e)].backward(
            normalized[static_cast<std::size_t>(b)],
            d_logits[static_cast<std::size_t>(b)][static_cast<std::size_t>(e)]);
      d_features += bn[static_cast<std::size_t>(b)].backward(ctx[static_cast<std::size_t>(b)],
                                                             d_norm);
    }

    const double err = oracle::check_gradient([&] { return loss_at(features); },
                                              features.data(),
                                              static_cast<std::size_t>(features.size()),
                                              d_features.data(), kStep);
    CHECK(err <= kTol);
  }
}

TEST_CASE("full model composite gradient w.r.t. the raw input") {
  auto rng = derive_rng(57, "grad-model");
  const int B = 4, D = 5, C = 6;
  CpeModelConfig cfg;
  cfg.num_classes = C;
  cfg.encoder = {D, {8}, 4};
  CpeModel model(cfg, 99);
  const auto groups = model.groups();

  Mat x = random_mat(rng, B, D, 1.0);
  std::vector<int> labels;
  for (int b = 0; b < B; ++b) labels.push_back(static_cast<int>(uniform_index(rng, C)));
  const Prior prior = random_prior(rng, C);
  const TauTriple taus;

  auto loss_at = [&](CpeModel& m) {
    auto out = m.forward_branches(x, ForwardMode::Train, nullptr, nullptr,
                                  /*update_stats=*/false);
    return supervised_loss_multi(out.logits[0], labels, prior, taus.as_array()).total;
  };

  ForwardCache cache;
  auto out = model.forward_branches(x, ForwardMode::Train, nullptr, &cache, false);
  std::vector<Mat> grads;
  supervised_loss_multi(out.logits[0], labels, prior, taus.as_array(), &grads);
  std::array<std::vector<Mat>, kNumBranches> d_logits;
  d_logits[0] = std::move(grads);
  model.zero_grads();
  const Mat dx = model.backward_branches(cache, d_logits);

  const double err =
      oracle::check_gradient([&] { return loss_at(model); }, x.data(),
                             static_cast<std::size_t>(x.size()), dx.data(), kStep);
  CHECK(err <= kTol);
}

TEST_CASE("encoder parameter gradients through a training-style loss") {
  auto rng = derive_rng(67, "grad-params");
  const int B = 4, D = 5, C = 6;
  CpeModelConfig cfg;
  cfg.num_classes = C;
  cfg.encoder = {D, {8}, 4};
  CpeModel model(cfg, 123);

  const Mat x = random_mat(rng, B, D, 1.0);
  std::vector<int> labels;
  for (int b = 0; b < B; ++b) labels.push_back(static_cast<int>(uniform_index(rng, C)));
  const Prior prior = random_prior(rng, C);
  const TauTriple taus{0.0, 2.0, 4.0};

  auto loss_at = [&] {
    auto out = model.forward_branches(x, ForwardMode::Train, nullptr, nullptr, false);
    return supervised_loss_multi(out.logits[0], labels, prior, taus.as_array()).total;
  };

  ForwardCache cache;
  auto out = model.forward_branches(x, ForwardMode::Train, nullptr, &cache, false);
  std::vector<Mat> grads;
  supervised_loss_multi(out.logits[0], labels, prior, taus.as_array(), &grads);
  std::array<std::vector<Mat>, kNumBranches> d_logits;
  d_logits[0] = std::move(grads);
  model.zero_grads();
  model.backward_branches(cache, d_logits);

  for (auto& p : model.params()) {
    if (p.name.rfind("bn_mt", 0) == 0 || p.name.rfind("bn_t", 0) == 0) continue;  // unused here
    const double err = oracle::check_gradient(loss_at, p.value,
                                              static_cast<std::size_t>(p.size), p.grad, kStep);
    CAPTURE(p.name);
    CHECK(err <= kTol);
  }
}
