#ifndef BADENC_AUGMENT_HPP
#define BADENC_AUGMENT_HPP

#include "badenc/image.hpp"

#include <cstdint>

namespace badenc {

/// Reduced SimCLR augmentation pipeline, applied in this order:
///
///  1. random resized crop: area fraction uniform in crop_scale_range, aspect
///     ratio log-uniform in [3/4, 4/3], up to 10 attempts before falling back
///     to the full image; the crop is resized back bilinearly.
///  2. horizontal flip with flip_probability.
///  3. colour jitter with strength s (skipped when s == 0):
///       brightness  x <- b*x,                   b ~ U[1-0.8s, 1+0.8s]
///       contrast    x <- c*(x - mean) + mean,    c ~ U[1-0.8s, 1+0.8s]
///       saturation  x <- g + a*(x - g),          a ~ U[1-0.8s, 1+0.8s]
///     mean is the image-wide luma mean, g the per-pixel luma
///     (0.299 R + 0.587 G + 0.114 B). Values are clamped after each step.
///  4. 3x3 Gaussian blur with sigma ~ U[0.1, 2.0], applied with
///     blur_probability, edges replicated.
struct AugmentationConfig {
  double crop_scale_lo = 0.2;
  double crop_scale_hi = 1.0;
  double flip_probability = 0.5;
  double color_jitter_strength = 0.5;
  double blur_probability = 0.0;

  static AugmentationConfig identity() { return {1.0, 1.0, 0.0, 0.0, 0.0}; }

  void validate() const;
};

Image augment(const Image& x, const AugmentationConfig& cfg, std::uint64_t seed);

}  // namespace badenc

#endif  // BADENC_AUGMENT_HPP
