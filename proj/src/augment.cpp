// SPDX-License-Identifier: Apache-2.0
#include "cpe/augment.hpp"

namespace cpe {

namespace {

constexpr int kSide = 32;

void check_image_width(const Mat& batch) {
  if (batch.cols() % (kSide * kSide) != 0)
    throw std::invalid_argument("Image32 augment: row width must be a multiple of 32*32");
}

// row-major CHW pixel index
inline Index px(int channel, int row, int col) {
  return static_cast<Index>(channel) * kSide * kSide + static_cast<Index>(row) * kSide + col;
}

Mat shift_and_flip(const Eigen::RowVectorXd& image, int channels, bool flip, int dx, int dy) {
  Eigen::RowVectorXd out = Eigen::RowVectorXd::Zero(image.size());
  for (int c = 0; c < channels; ++c)
    for (int r = 0; r < kSide; ++r)
      for (int col = 0; col < kSide; ++col) {
        int src_r = r - dy;
        int src_c = col - dx;
        if (src_r < 0 || src_r >= kSide || src_c < 0 || src_c >= kSide) continue;
        if (flip) src_c = kSide - 1 - src_c;
        out(px(c, r, col)) = image(px(c, src_r, src_c));
      }
  return out;
}

Mat image_weak(const Mat& batch, const AugmentConfig& cfg, std::mt19937_64& rng) {
  check_image_width(batch);
  const int channels = static_cast<int>(batch.cols()) / (kSide * kSide);
  Mat out(batch.rows(), batch.cols());
  for (Index i = 0; i < batch.rows(); ++i) {
    const bool flip = rng() & 1;
    const int dx = static_cast<int>(uniform_index(rng, 2 * cfg.shift_max + 1)) - cfg.shift_max;
    const int dy = static_cast<int>(uniform_index(rng, 2 * cfg.shift_max + 1)) - cfg.shift_max;
    out.row(i) = shift_and_flip(batch.row(i), channels, flip, dx, dy);
  }
  return out;
}

Mat image_strong(const Mat& batch, const AugmentConfig& cfg, std::mt19937_64& rng) {
  check_image_width(batch);
  const int channels = static_cast<int>(batch.cols()) / (kSide * kSide);
  Mat out = image_weak(batch, cfg, rng);
  const int cut = std::max(1, static_cast<int>(cfg.cutout_fraction * kSide));
  for (Index i = 0; i < out.rows(); ++i) {
    // brightness / contrast jitter
    const double scale = 0.6 + 0.8 * uniform_real(rng);
    const double offset = 0.4 * uniform_real(rng) - 0.2;
    out.row(i) = ((out.row(i).array() - 0.5) * scale + 0.5 + offset).matrix();
    // cutout
    const int r0 = static_cast<int>(uniform_index(rng, kSide - cut + 1));
    const int c0 = static_cast<int>(uniform_index(rng, kSide - cut + 1));
    for (int c = 0; c < channels; ++c)
      for (int r = r0; r < r0 + cut; ++r)
        for (int col = c0; col < c0 + cut; ++col) out(i, px(c, r, col)) = 0.5;
    // low additive noise keeps the composite from ever being an identity
    for (Index j = 0; j < out.cols(); ++j) out(i, j) += 0.02 * gaussian(rng);
  }
  return out;
}

}  // namespace

Mat weak_augment(const Mat& batch, const AugmentConfig& cfg, std::mt19937_64& rng) {
  switch (cfg.kind) {
    case AugmentConfig::Kind::Identity:
      return batch;
    case AugmentConfig::Kind::Image32:
      return image_weak(batch, cfg, rng);
    case AugmentConfig::Kind::VectorNoise:
    default: {
      Mat out = batch;
      for (Index i = 0; i < out.rows(); ++i)
        for (Index j = 0; j < out.cols(); ++j) out(i, j) += cfg.weak_sigma * gaussian(rng);
      return out;
    }
  }
}

Mat strong_augment(const Mat& batch, const AugmentConfig& cfg, std::mt19937_64& rng) {
  switch (cfg.kind) {
    case AugmentConfig::Kind::Identity:
      return batch;
    case AugmentConfig::Kind::Image32:
      return image_strong(batch, cfg, rng);
    case AugmentConfig::Kind::VectorNoise:
    default: {
      Mat out = batch;
      for (Index i = 0; i < out.rows(); ++i)
        for (Index j = 0; j < out.cols(); ++j) {
          out(i, j) += cfg.strong_sigma * gaussian(rng);
          if (uniform_real(rng) < cfg.strong_dropout) out(i, j) = 0.0;
        }
      return out;
    }
  }
}

}  // namespace cpe
