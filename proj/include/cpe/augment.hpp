// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "cpe/types.hpp"

namespace cpe {

/// FixMatch-style view pair: a light perturbation for pseudo-labeling and a
/// heavy composite for the consistency target. `Identity` passes samples
/// through untouched (used by equivalence tests). `VectorNoise` treats rows
/// as plain feature vectors; `Image32` treats rows as 32x32 CHW images.
struct AugmentConfig {
  enum class Kind { Identity, VectorNoise, Image32 };
  Kind kind = Kind::VectorNoise;

  // VectorNoise
  double weak_sigma = 0.05;
  double strong_sigma = 0.5;
  double strong_dropout = 0.2;

  // Image32
  int shift_max = 4;          // weak + strong: random translate, zero padded
  double cutout_fraction = 0.5;  // strong: square side as a fraction of 32
};

/// Light view: additive low noise (vectors) or flip/shift (images).
Mat weak_augment(const Mat& batch, const AugmentConfig& cfg, std::mt19937_64& rng);

/// Heavy view: high noise plus feature dropout (vectors) or a flip/shift/
/// cutout/jitter composite (images).
Mat strong_augment(const Mat& batch, const AugmentConfig& cfg, std::mt19937_64& rng);

}  // namespace cpe
