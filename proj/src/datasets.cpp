// SPDX-License-Identifier: Apache-2.0
#include "cpe/datasets.hpp"

#include <cmath>
#include <fstream>

namespace cpe {

namespace {

Corpus sample_mixture(const GaussianMixtureSpec& spec, std::int64_t per_class,
                      std::uint64_t seed) {
  if (spec.num_classes < 2) throw std::invalid_argument("gaussian mixture: need >= 2 classes");
  if (spec.dim < 2) throw std::invalid_argument("gaussian mixture: need dim >= 2");
  if (per_class < 1) throw std::invalid_argument("gaussian mixture: per_class must be positive");

  if (spec.spacing_decay <= 0.0 || spec.spacing_decay > 1.0)
    throw std::invalid_argument("gaussian mixture: spacing_decay must lie in (0, 1]");
  if (spec.sibling_spread < 0.0)
    throw std::invalid_argument("gaussian mixture: sibling_spread must be >= 0");
  if (spec.sibling_spread > 0.0 && spec.num_classes % 3 != 0)
    throw std::invalid_argument(
        "gaussian mixture: hierarchical layout needs num_classes divisible by 3");

  Corpus corpus;
  corpus.num_classes = spec.num_classes;
  const auto total = static_cast<Index>(per_class) * spec.num_classes;
  corpus.features.resize(total, spec.dim);
  corpus.labels.reserve(static_cast<std::size_t>(total));

  std::vector<std::pair<double, double>> means(static_cast<std::size_t>(spec.num_classes));
  if (spec.sibling_spread > 0.0) {
    // each trio spans the frequency range: classes {t, t+G, t+2G} share a
    // supercluster, so every ambiguity set pits a head class against a
    // medium and a tail class
    const int trios = spec.num_classes / 3;
    for (int c = 0; c < spec.num_classes; ++c) {
      const int trio = c % trios;
      const int rank = c / trios;
      const double center = 2.0 * M_PI * trio / trios;
      // rotate each trio's sub-circle so sibling layouts are not aligned
      const double sub = 2.0 * M_PI * rank / 3.0 + center / 2.0;
      means[static_cast<std::size_t>(c)] = {
          spec.radius * std::cos(center) + spec.sibling_spread * std::cos(sub),
          spec.radius * std::sin(center) + spec.sibling_spread * std::sin(sub)};
    }
  } else {
    // angular gaps proportional to decay^k, normalized to the full circle
    double gap_sum = 0.0, gap = 1.0;
    std::vector<double> gaps;
    for (int c = 0; c < spec.num_classes; ++c, gap *= spec.spacing_decay) {
      gaps.push_back(gap);
      gap_sum += gap;
    }
    double cum = 0.0;
    for (int c = 0; c < spec.num_classes; ++c) {
      const double angle = 2.0 * M_PI * cum / gap_sum;
      means[static_cast<std::size_t>(c)] = {spec.radius * std::cos(angle),
                                            spec.radius * std::sin(angle)};
      cum += gaps[static_cast<std::size_t>(c)];
    }
  }

  Index row = 0;
  for (int c = 0; c < spec.num_classes; ++c) {
    auto rng = derive_rng(seed, "gaussian-mixture", static_cast<std::uint64_t>(c));
    for (std::int64_t i = 0; i < per_class; ++i, ++row) {
      corpus.features(row, 0) =
          means[static_cast<std::size_t>(c)].first + spec.sigma * gaussian(rng);
      corpus.features(row, 1) =
          means[static_cast<std::size_t>(c)].second + spec.sigma * gaussian(rng);
      for (int d = 2; d < spec.dim; ++d) corpus.features(row, d) = gaussian(rng);
      corpus.labels.push_back(c);
    }
  }
  return corpus;
}

}  // namespace

Corpus make_gaussian_mixture(const GaussianMixtureSpec& spec) {
  return sample_mixture(spec, spec.per_class, spec.seed);
}

Corpus make_gaussian_mixture_test(const GaussianMixtureSpec& spec,
                                  std::int64_t per_class_test) {
  return sample_mixture(spec, per_class_test, splitmix64(spec.seed ^ fnv1a("test-pool")));
}

Corpus load_cifar10_bin(const std::vector<std::filesystem::path>& batch_files) {
  constexpr std::size_t kRecord = 1 + 3072;
  if (batch_files.empty()) throw std::invalid_argument("cifar10: no batch files given");

  std::vector<std::vector<unsigned char>> raw;
  std::size_t total = 0;
  for (const auto& path : batch_files) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cifar10: cannot open " + path.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
    if (bytes.empty() || bytes.size() % kRecord != 0)
      throw std::runtime_error("cifar10: " + path.string() +
                               " is not a multiple of the 3073-byte record size");
    total += bytes.size() / kRecord;
    raw.push_back(std::move(bytes));
  }

  Corpus corpus;
  corpus.num_classes = 10;
  corpus.features.resize(static_cast<Index>(total), 3072);
  corpus.labels.reserve(total);
  Index row = 0;
  for (const auto& bytes : raw) {
    for (std::size_t off = 0; off < bytes.size(); off += kRecord, ++row) {
      const int label = bytes[off];
      if (label < 0 || label > 9)
        throw std::runtime_error("cifar10: label byte out of range");
      corpus.labels.push_back(label);
      for (std::size_t j = 0; j < 3072; ++j)
        corpus.features(row, static_cast<Index>(j)) = bytes[off + 1 + j] / 255.0;
    }
  }
  return corpus;
}

Corpus load_cifar10_train_dir(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  for (int i = 1; i <= 5; ++i)
    files.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
  for (const auto& f : files)
    if (!std::filesystem::exists(f))
      throw std::runtime_error("cifar10: missing batch file " + f.string());
  return load_cifar10_bin(files);
}

Corpus load_cifar10_test_dir(const std::filesystem::path& dir) {
  const auto f = dir / "test_batch.bin";
  if (!std::filesystem::exists(f))
    throw std::runtime_error("cifar10: missing test file " + f.string());
  return load_cifar10_bin({f});
}

}  // namespace cpe
