// SPDX-License-Identifier: Apache-2.0
#include "cpe/losses.hpp"

#include "support/oracles.hpp"

#include <doctest.h>

#include <array>
#include <cmath>
#include <vector>

using namespace cpe;

namespace {

std::vector<double> to_std(const Vec& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

Vec random_logits(std::mt19937_64& rng, int C, double scale = 3.0) {
  Vec v(C);
  for (int i = 0; i < C; ++i) v(i) = scale * gaussian(rng);
  return v;
}

Prior random_prior(std::mt19937_64& rng, int C) {
  Vec pi(C);
  for (int i = 0; i < C; ++i) pi(i) = 0.05 + uniform_real(rng);
  pi /= pi.sum();
  return Prior::from_probabilities(pi);
}

}  // namespace

TEST_CASE("cross_entropy scalar examples") {
  CHECK(cross_entropy(Vec::Zero(2), 0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  Vec spike(3);
  spike << 10.0, 0.0, 0.0;
  // frozen from an independent high-precision evaluation: ln(1 + 2 e^-10)
  CHECK(cross_entropy(spike, 0) == doctest::Approx(9.07957374672444e-05).epsilon(1e-9));

  for (double t : {-7.5, 0.0, 3.25}) {
    const Vec flat = Vec::Constant(6, t);
    CHECK(cross_entropy(flat, 4) == doctest::Approx(std::log(6.0)).epsilon(1e-12));
  }

  CHECK_THROWS_AS(cross_entropy(Vec::Zero(3), 3), std::out_of_range);
  CHECK_THROWS_AS(cross_entropy(Vec::Zero(3), -1), std::out_of_range);
}

TEST_CASE("balanced_cross_entropy examples and exact reductions") {
  auto rng = derive_rng(11, "bce");
  SUBCASE("tau=0 equals plain CE bit-for-bit") {
    for (int trial = 0; trial < 50; ++trial) {
      const int C = 2 + static_cast<int>(uniform_index(rng, 9));
      const Vec logits = random_logits(rng, C);
      const Prior prior = random_prior(rng, C);
      const int label = static_cast<int>(uniform_index(rng, C));
      CHECK(balanced_cross_entropy(logits, label, prior, 0.0) == cross_entropy(logits, label));
    }
  }
  SUBCASE("uniform prior equals plain CE bit-for-bit for any tau") {
    for (int trial = 0; trial < 50; ++trial) {
      const int C = 2 + static_cast<int>(uniform_index(rng, 9));
      const Vec logits = random_logits(rng, C);
      const double tau = 4.0 * uniform_real(rng);
      const int label = static_cast<int>(uniform_index(rng, C));
      CHECK(balanced_cross_entropy(logits, label, Prior::uniform(C), tau) ==
            cross_entropy(logits, label));
    }
  }
  SUBCASE("closed-form example") {
    Vec logits(2);
    logits << 1.0, 0.0;
    Vec pi(2);
    pi << 0.9, 0.1;
    // ln(1 + e^{1 + ln 0.9 - ln 0.1}) = ln(1 + 9e), frozen from an
    // independent high-precision evaluation
    CHECK(balanced_cross_entropy(logits, 1, Prior::from_probabilities(pi), 1.0) ==
          doctest::Approx(3.2372867569952120).epsilon(1e-12));
  }
  SUBCASE("zero prior entries are rejected") {
    Vec pi(2);
    pi << 1.0, 0.0;
    CHECK_THROWS_AS(Prior::from_probabilities(pi), std::invalid_argument);
  }
  SUBCASE("matches the loop oracle") {
    for (int trial = 0; trial < 100; ++trial) {
      const int C = 2 + static_cast<int>(uniform_index(rng, 9));
      const Vec logits = random_logits(rng, C);
      const Prior prior = random_prior(rng, C);
      const double tau = 4.0 * uniform_real(rng);
      const int label = static_cast<int>(uniform_index(rng, C));
      const auto expected =
          oracle::balanced_cross_entropy(to_std(logits), label, to_std(prior.pi), tau);
      CHECK(balanced_cross_entropy(logits, label, prior, tau) ==
            doctest::Approx(static_cast<double>(expected)).epsilon(1e-11));
    }
  }
}

TEST_CASE("adjustment monotonicity: mislabeling a tail sample costs more as tau grows") {
  Vec logits(3);
  logits << 2.0, 0.5, -1.0;  // argmax is the head class
  Vec pi(3);
  pi << 0.7, 0.2, 0.1;
  const Prior prior = Prior::from_probabilities(pi);
  double prev = balanced_cross_entropy(logits, 2, prior, 0.0);
  for (double tau : {0.5, 1.0, 2.0, 4.0}) {
    const double cur = balanced_cross_entropy(logits, 2, prior, tau);
    CHECK(cur > prev);
    prev = cur;
  }
}

TEST_CASE("confidence_mask is strict") {
  Vec p(2);
  p << 0.96, 0.04;
  CHECK(confidence_mask(p, 0.95));
  p << 0.95, 0.05;
  CHECK_FALSE(confidence_mask(p, 0.95));
  CHECK_FALSE(confidence_mask(Vec::Constant(10, 0.1), 0.95));
}

TEST_CASE("supervised_cpe_loss") {
  auto rng = derive_rng(21, "sup");
  SUBCASE("shared logits and taus=0 collapse to 3x one expert") {
    Mat logits = Mat::Zero(1, 2);
    std::vector<int> labels{0};
    const std::array<Mat, 3> experts{logits, logits, logits};
    const auto out = supervised_cpe_loss(experts, labels, Prior::uniform(2), TauTriple{0, 0, 0});
    CHECK(out.total == doctest::Approx(3.0 * std::log(2.0)).epsilon(1e-12));
    for (double v : out.per_expert) CHECK(v == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  }
  SUBCASE("uniform prior + any taus on shared (0,0) logits gives 3 ln 2") {
    Mat logits = Mat::Zero(1, 2);
    std::vector<int> labels{0};
    const std::array<Mat, 3> experts{logits, logits, logits};
    const auto out =
        supervised_cpe_loss(experts, labels, Prior::uniform(2), TauTriple{0, 2, 4});
    CHECK(out.total == doctest::Approx(3.0 * std::log(2.0)).epsilon(1e-12));
  }
  SUBCASE("matches the per-sample loop oracle") {
    for (int trial = 0; trial < 100; ++trial) {
      const int C = 3;
      const int B = 4;
      std::array<Mat, 3> experts;
      std::vector<std::vector<std::vector<double>>> raw(3);
      for (int e = 0; e < 3; ++e) {
        experts[static_cast<std::size_t>(e)] = Mat(B, C);
        for (int b = 0; b < B; ++b) {
          const Vec row = random_logits(rng, C);
          experts[static_cast<std::size_t>(e)].row(b) = row.transpose();
          raw[static_cast<std::size_t>(e)].push_back(to_std(row));
        }
      }
      std::vector<int> labels;
      for (int b = 0; b < B; ++b) labels.push_back(static_cast<int>(uniform_index(rng, C)));
      const Prior prior = random_prior(rng, C);
      const TauTriple taus{4.0 * uniform_real(rng), 4.0 * uniform_real(rng),
                           4.0 * uniform_real(rng)};
      const auto out = supervised_cpe_loss(experts, labels, prior, taus);
      const auto expected = oracle::supervised_loss(
          raw, labels, to_std(prior.pi), {taus.tau1, taus.tau2, taus.tau3});
      CHECK(out.total == doctest::Approx(static_cast<double>(expected)).epsilon(1e-9));
    }
  }
  SUBCASE("shape mismatch is rejected") {
    std::array<Mat, 3> experts{Mat::Zero(2, 3), Mat::Zero(2, 3), Mat::Zero(3, 3)};
    std::vector<int> labels{0, 1};
    CHECK_THROWS_AS(supervised_cpe_loss(experts, labels, Prior::uniform(3), TauTriple{}),
                    std::invalid_argument);
  }
}

TEST_CASE("unsupervised_cpe_loss") {
  auto rng = derive_rng(31, "unsup");
  SUBCASE("all-masked batch gives exactly zero") {
    std::array<Mat, 3> logits{Mat::Zero(4, 3), Mat::Zero(4, 3), Mat::Zero(4, 3)};
    std::array<std::vector<int>, 3> pseudo{std::vector<int>(4, 0), std::vector<int>(4, 1),
                                           std::vector<int>(4, 2)};
    std::array<Vec, 3> conf{Vec::Constant(4, 0.5), Vec::Constant(4, 0.95),
                            Vec::Constant(4, 0.3)};
    const auto out = unsupervised_cpe_loss(logits, pseudo, conf, 0.95, 2.0);
    CHECK(out.total == 0.0);
    for (double m : out.mask_rates) CHECK(m == 0.0);
  }
  SUBCASE("single confident sample reproduces lambda-weighted CE") {
    const double t = 4.2, lambda = 2.0;
    Vec row(3);
    row << t, 0.0, 0.0;
    std::array<Mat, 3> logits{row.transpose(), row.transpose(), row.transpose()};
    std::array<std::vector<int>, 3> pseudo{std::vector<int>{0}, std::vector<int>{0},
                                           std::vector<int>{0}};
    std::array<Vec, 3> conf{Vec::Constant(1, 0.99), Vec::Constant(1, 0.0),
                            Vec::Constant(1, 0.0)};
    const auto out = unsupervised_cpe_loss(logits, pseudo, conf, 0.95, lambda);
    CHECK(out.per_expert[0] ==
          doctest::Approx(lambda * cross_entropy(row, 0)).epsilon(1e-12));
    CHECK(out.per_expert[1] == 0.0);
    CHECK(out.mask_rates[0] == doctest::Approx(1.0));
  }
  SUBCASE("matches the per-sample loop oracle") {
    for (int trial = 0; trial < 100; ++trial) {
      const int C = 2 + static_cast<int>(uniform_index(rng, 9));
      const int B = 1 + static_cast<int>(uniform_index(rng, 8));
      std::array<Mat, 3> logits;
      std::vector<std::vector<std::vector<double>>> raw(3);
      std::array<std::vector<int>, 3> pseudo;
      std::array<Vec, 3> conf;
      std::vector<std::vector<int>> raw_pseudo(3);
      std::vector<std::vector<double>> raw_conf(3);
      for (int e = 0; e < 3; ++e) {
        logits[static_cast<std::size_t>(e)] = Mat(B, C);
        conf[static_cast<std::size_t>(e)] = Vec(B);
        for (int b = 0; b < B; ++b) {
          const Vec row = random_logits(rng, C);
          logits[static_cast<std::size_t>(e)].row(b) = row.transpose();
          raw[static_cast<std::size_t>(e)].push_back(to_std(row));
          const int y = static_cast<int>(uniform_index(rng, C));
          pseudo[static_cast<std::size_t>(e)].push_back(y);
          raw_pseudo[static_cast<std::size_t>(e)].push_back(y);
          const double c = uniform_real(rng);
          conf[static_cast<std::size_t>(e)](b) = c;
          raw_conf[static_cast<std::size_t>(e)].push_back(c);
        }
      }
      const double rho = uniform_real(rng);
      const double lambda = 2.0 * uniform_real(rng);
      const auto out = unsupervised_cpe_loss(logits, pseudo, conf, rho, lambda);
      const auto expected = oracle::unsupervised_loss(raw, raw_pseudo, raw_conf, rho, lambda);
      CHECK(out.total == doctest::Approx(static_cast<double>(expected)).epsilon(1e-9));
    }
  }
}

TEST_CASE("cbn_unsupervised_term follows the indicator structure") {
  const auto groups = partition_classes(9);  // head {0,1,2} medium {3,4,5} tail {6,7,8}
  auto rng = derive_rng(41, "cbn");

  SUBCASE("head label uses only the HMT branch") {
    const std::array<Vec, 3> branches{random_logits(rng, 9), random_logits(rng, 9),
                                      random_logits(rng, 9)};
    CHECK(cbn_active_terms(1, groups) == 1);
    CHECK(cbn_unsupervised_term(branches, 1, groups) ==
          doctest::Approx(cross_entropy(branches[0], 1)).epsilon(1e-12));
  }
  SUBCASE("medium label averages the two active branches") {
    const std::array<Vec, 3> branches{random_logits(rng, 9), random_logits(rng, 9),
                                      random_logits(rng, 9)};
    const double a = cross_entropy(branches[0], 4);
    const double b = cross_entropy(branches[1], 4);
    CHECK(cbn_active_terms(4, groups) == 2);
    CHECK(cbn_unsupervised_term(branches, 4, groups) ==
          doctest::Approx((a + b) / 2.0).epsilon(1e-12));
  }
  SUBCASE("tail label with identical branches returns the common CE") {
    const Vec shared = random_logits(rng, 9);
    const std::array<Vec, 3> branches{shared, shared, shared};
    CHECK(cbn_active_terms(7, groups) == 3);
    CHECK(cbn_unsupervised_term(branches, 7, groups) ==
          doctest::Approx(cross_entropy(shared, 7)).epsilon(1e-12));
  }
  SUBCASE("out-of-range pseudo-label is rejected") {
    const std::array<Vec, 3> branches{Vec::Zero(9), Vec::Zero(9), Vec::Zero(9)};
    CHECK_THROWS_AS(cbn_unsupervised_term(branches, 9, groups), std::out_of_range);
    CHECK_THROWS_AS(cbn_unsupervised_term(branches, -1, groups), std::out_of_range);
  }
  SUBCASE("matches the loop oracle") {
    for (int trial = 0; trial < 100; ++trial) {
      const int C = 3 + static_cast<int>(uniform_index(rng, 8));
      const auto g = partition_classes(C);
      const std::array<Vec, 3> branches{random_logits(rng, C), random_logits(rng, C),
                                        random_logits(rng, C)};
      const int y = static_cast<int>(uniform_index(rng, C));
      const auto expected = oracle::cbn_term(
          {to_std(branches[0]), to_std(branches[1]), to_std(branches[2])}, y, g.head_end,
          g.tail_begin);
      CHECK(cbn_unsupervised_term(branches, y, g) ==
            doctest::Approx(static_cast<double>(expected)).epsilon(1e-11));
    }
  }
}

TEST_CASE("total_cpe_loss assembles the bundle") {
  SupervisedLoss sup;
  sup.per_expert = {1.0, 2.0, 3.0};
  sup.total = 6.0;
  UnsupervisedLoss unsup;
  unsup.per_expert = {0.5, 0.25, 0.25};
  unsup.mask_rates = {0.5, 1.0, 0.0};
  unsup.total = 1.0;

  const auto bundle = total_cpe_loss(sup, unsup);
  CHECK(bundle.total == doctest::Approx(7.0));
  CHECK(bundle.mask_rate_per_expert == std::vector<double>{0.5, 1.0, 0.0});
  CHECK(bundle.finite());

  SUBCASE("masks all zero leaves the supervised total") {
    UnsupervisedLoss dead;
    dead.per_expert = {0.0, 0.0, 0.0};
    dead.mask_rates = {0.0, 0.0, 0.0};
    dead.total = 0.0;
    CHECK(total_cpe_loss(sup, dead).total == doctest::Approx(sup.total));
  }
}

TEST_CASE("shift invariance across every loss") {
  auto rng = derive_rng(51, "shift");
  for (int trial = 0; trial < 25; ++trial) {
    const int C = 3 + static_cast<int>(uniform_index(rng, 8));
    const auto groups = partition_classes(C);
    const Vec logits = random_logits(rng, C);
    const double shift = 6.0 * gaussian(rng);
    const Vec shifted = logits.array() + shift;
    const int label = static_cast<int>(uniform_index(rng, C));
    const Prior prior = random_prior(rng, C);

    CHECK(cross_entropy(shifted, label) ==
          doctest::Approx(cross_entropy(logits, label)).epsilon(1e-9));
    CHECK(balanced_cross_entropy(shifted, label, prior, 2.0) ==
          doctest::Approx(balanced_cross_entropy(logits, label, prior, 2.0)).epsilon(1e-9));
    CHECK((softmax(shifted) - softmax(logits)).cwiseAbs().maxCoeff() < 1e-9);

    const std::array<Vec, 3> branches{logits, random_logits(rng, C), random_logits(rng, C)};
    const std::array<Vec, 3> branches_shifted{shifted, branches[1], branches[2]};
    CHECK(cbn_unsupervised_term(branches_shifted, label, groups) ==
          doctest::Approx(cbn_unsupervised_term(branches, label, groups)).epsilon(1e-9));
  }
}

TEST_CASE("masked samples receive exactly zero gradient") {
  auto rng = derive_rng(61, "maskgrad");
  const int B = 6, C = 4;
  std::array<Mat, 3> logits;
  std::array<std::vector<int>, 3> pseudo;
  std::array<Vec, 3> conf;
  for (int e = 0; e < 3; ++e) {
    logits[static_cast<std::size_t>(e)] = Mat(B, C);
    conf[static_cast<std::size_t>(e)] = Vec(B);
    for (int b = 0; b < B; ++b) {
      logits[static_cast<std::size_t>(e)].row(b) = random_logits(rng, C).transpose();
      pseudo[static_cast<std::size_t>(e)].push_back(static_cast<int>(uniform_index(rng, C)));
      conf[static_cast<std::size_t>(e)](b) = (b % 2 == 0) ? 0.99 : 0.10;
    }
  }
  std::array<Mat, 3> grads;
  unsupervised_cpe_loss(logits, pseudo, conf, 0.95, 2.0, &grads);
  for (int e = 0; e < 3; ++e)
    for (int b = 0; b < B; ++b) {
      const double row_norm = grads[static_cast<std::size_t>(e)].row(b).cwiseAbs().sum();
      if (b % 2 == 0)
        CHECK(row_norm > 0.0);
      else
        CHECK(row_norm == 0.0);  // bitwise zero, not just small
    }
}
