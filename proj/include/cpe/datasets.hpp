// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "cpe/types.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

namespace cpe {

/// An indexed labeled corpus; sample id == row index.
struct Corpus {
  Mat features;            // [N x D]
  std::vector<int> labels;  // in [0, C)
  int num_classes = 0;
};

/// Gaussian mixture task for desk-scale experiments, in two flavors.
///
/// Flat (sibling_spread == 0): class means on a circle of `radius` in the
/// first two dimensions; spacing_decay < 1 shrinks the angular gaps along
/// the class index so high-index classes crowd together.
///
/// Hierarchical (sibling_spread > 0, num_classes divisible by 3): class
/// trios sit on a circle of `radius` (trio centers far apart), and the three
/// sibling classes of a trio sit on a sub-circle of radius `sibling_spread`
/// around their center. Trios are separable from structure alone; siblings
/// overlap heavily, so the ambiguous mass between them is decided by label
/// information and class priors. Class index is contiguous per trio.
///
/// Remaining dimensions are pure noise the encoder has to learn to ignore.
struct GaussianMixtureSpec {
  int num_classes = 9;
  int dim = 8;
  double radius = 3.0;
  double sigma = 1.0;
  std::int64_t per_class = 700;
  std::uint64_t seed = 7;
  double spacing_decay = 1.0;
  double sibling_spread = 0.0;
};

Corpus make_gaussian_mixture(const GaussianMixtureSpec& spec);

/// Balanced evaluation set drawn from the same mixture with a shifted seed.
Corpus make_gaussian_mixture_test(const GaussianMixtureSpec& spec,
                                  std::int64_t per_class_test);

/// CIFAR-10 binary-format loader: each record is 1 label byte + 3072 pixel
/// bytes; pixels are scaled to [0, 1]. Reads every *.bin batch file given.
Corpus load_cifar10_bin(const std::vector<std::filesystem::path>& batch_files);

/// Standard CIFAR-10 train layout under `dir` (data_batch_1..5.bin).
Corpus load_cifar10_train_dir(const std::filesystem::path& dir);

/// test_batch.bin under `dir`.
Corpus load_cifar10_test_dir(const std::filesystem::path& dir);

}  // namespace cpe
