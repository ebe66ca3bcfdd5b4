// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace cpe {

using Scalar = double;
using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using MatF = Eigen::MatrixXf;
using Index = Eigen::Index;

/// Head / medium / tail partition of the label space. Classes are indexed
/// 0..C-1 in descending labeled-frequency order, so the partition is three
/// contiguous index ranges: head = [0, head_end), tail = [tail_begin, C).
struct ClassGroups {
  int num_classes = 0;
  int head_end = 0;
  int tail_begin = 0;

  enum class Group { Head, Medium, Tail };

  Group group_of(int cls) const {
    check(cls);
    if (cls < head_end) return Group::Head;
    if (cls >= tail_begin) return Group::Tail;
    return Group::Medium;
  }
  bool in_medium_or_tail(int cls) const {
    check(cls);
    return cls >= head_end;
  }
  bool in_tail(int cls) const {
    check(cls);
    return cls >= tail_begin;
  }

  std::vector<int> head() const { return range(0, head_end); }
  std::vector<int> medium() const { return range(head_end, tail_begin); }
  std::vector<int> tail() const { return range(tail_begin, num_classes); }

 private:
  void check(int cls) const {
    if (cls < 0 || cls >= num_classes)
      throw std::out_of_range("class index " + std::to_string(cls) +
                              " outside [0, " + std::to_string(num_classes) + ")");
  }
  static std::vector<int> range(int lo, int hi) {
    std::vector<int> r;
    for (int c = lo; c < hi; ++c) r.push_back(c);
    return r;
  }
};

inline const char* group_name(ClassGroups::Group g) {
  switch (g) {
    case ClassGroups::Group::Head: return "head";
    case ClassGroups::Group::Medium: return "medium";
    default: return "tail";
  }
}

/// Contiguous first/last thirds: head and tail each get floor(C/3) classes,
/// medium the remainder.
inline ClassGroups partition_classes(int num_classes) {
  if (num_classes < 3)
    throw std::invalid_argument("partition_classes: need at least 3 classes, got " +
                                std::to_string(num_classes));
  const int third = num_classes / 3;
  return ClassGroups{num_classes, third, num_classes - third};
}

// ---------------------------------------------------------------------------
// Deterministic RNG derivation. Every stochastic choice in the project is a
// pure function of (seed, tag, indices), which is what makes runs replayable
// and checkpoints resumable without serializing generator state.
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::mt19937_64 derive_rng(std::uint64_t seed, std::string_view tag,
                                  std::uint64_t a = 0, std::uint64_t b = 0) {
  std::uint64_t h = splitmix64(seed ^ fnv1a(tag));
  h = splitmix64(h ^ a);
  h = splitmix64(h ^ b);
  return std::mt19937_64(h);
}

/// Unbiased integer in [0, n).
inline std::uint64_t uniform_index(std::mt19937_64& rng, std::uint64_t n) {
  if (n == 0) throw std::invalid_argument("uniform_index: n must be positive");
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t r;
  do {
    r = rng();
  } while (r >= limit);
  return r % n;
}

inline double uniform_real(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;  // [0, 1)
}

/// Stateless standard normal (Box-Muller, cosine branch only) so that
/// draws depend on nothing but the generator position.
inline double gaussian(std::mt19937_64& rng) {
  const double u1 = 1.0 - uniform_real(rng);  // (0, 1]
  const double u2 = uniform_real(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

/// In-place Fisher-Yates; implementation-independent unlike std::shuffle,
/// so split manifests hash identically across platforms.
template <typename T>
void deterministic_shuffle(std::vector<T>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::size_t j = static_cast<std::size_t>(uniform_index(rng, i));
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace cpe
