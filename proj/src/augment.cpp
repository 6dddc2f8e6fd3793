#include "badenc/augment.hpp"

#include "badenc/rng.hpp"

#include <algorithm>
#include <cmath>

namespace badenc {

void AugmentationConfig::validate() const {
  require(crop_scale_lo > 0.0 && crop_scale_hi <= 1.0 && crop_scale_lo <= crop_scale_hi,
          "crop_scale_range must satisfy 0 < lo <= hi <= 1");
  require(flip_probability >= 0.0 && flip_probability <= 1.0, "flip_probability must lie in [0, 1]");
  require(color_jitter_strength >= 0.0, "color_jitter_strength must be non-negative");
  require(blur_probability >= 0.0 && blur_probability <= 1.0, "blur_probability must lie in [0, 1]");
}

namespace {

Image random_resized_crop(const Image& x, double lo, double hi, Rng& rng) {
  const Index h = x.height();
  const Index w = x.width();
  const double area = static_cast<double>(h * w);
  if (lo >= 1.0) return x;
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * rng.uniform(lo, hi);
    const double log_ratio = rng.uniform(std::log(3.0 / 4.0), std::log(4.0 / 3.0));
    const double ratio = std::exp(log_ratio);
    const auto cw = static_cast<Index>(std::lround(std::sqrt(target * ratio)));
    const auto ch = static_cast<Index>(std::lround(std::sqrt(target / ratio)));
    if (cw < 1 || ch < 1 || cw > w || ch > h) continue;
    if (cw == w && ch == h) return x;
    const auto top = static_cast<Index>(rng.below(static_cast<std::uint64_t>(h - ch + 1)));
    const auto left = static_cast<Index>(rng.below(static_cast<std::uint64_t>(w - cw + 1)));
    Image crop(ch, cw);
    for (Index c = 0; c < Image::kChannels; ++c) {
      for (Index y = 0; y < ch; ++y) {
        for (Index col = 0; col < cw; ++col) crop(c, y, col) = x(c, top + y, left + col);
      }
    }
    return resize_bilinear(crop, h, w);
  }
  return x;
}

void flip_horizontal(Image& x) {
  for (Index c = 0; c < Image::kChannels; ++c) {
    for (Index y = 0; y < x.height(); ++y) {
      for (Index col = 0; col < x.width() / 2; ++col) std::swap(x(c, y, col), x(c, y, x.width() - 1 - col));
    }
  }
}

float luma(const Image& x, Index y, Index col) {
  return 0.299f * x(0, y, col) + 0.587f * x(1, y, col) + 0.114f * x(2, y, col);
}

void color_jitter(Image& x, double strength, Rng& rng) {
  const double lo = std::max(0.0, 1.0 - 0.8 * strength);
  const double hi = 1.0 + 0.8 * strength;
  const auto brightness = static_cast<float>(rng.uniform(lo, hi));
  const auto contrast = static_cast<float>(rng.uniform(lo, hi));
  const auto saturation = static_cast<float>(rng.uniform(lo, hi));

  x.pixels() *= brightness;
  x.clamp();

  double mean = 0.0;
  for (Index y = 0; y < x.height(); ++y) {
    for (Index col = 0; col < x.width(); ++col) mean += luma(x, y, col);
  }
  const auto m = static_cast<float>(mean / static_cast<double>(x.plane_size()));
  x.pixels() = (x.pixels() - m) * contrast + m;
  x.clamp();

  for (Index y = 0; y < x.height(); ++y) {
    for (Index col = 0; col < x.width(); ++col) {
      const float g = luma(x, y, col);
      for (Index c = 0; c < Image::kChannels; ++c) x(c, y, col) = g + saturation * (x(c, y, col) - g);
    }
  }
  x.clamp();
}

void gaussian_blur3(Image& x, double sigma) {
  const double w1 = std::exp(-1.0 / (2.0 * sigma * sigma));
  const double norm = 1.0 + 2.0 * w1;
  const float k[3] = {static_cast<float>(w1 / norm), static_cast<float>(1.0 / norm), static_cast<float>(w1 / norm)};
  const Index h = x.height();
  const Index w = x.width();
  Image tmp = x;
  for (Index c = 0; c < Image::kChannels; ++c) {
    for (Index y = 0; y < h; ++y) {
      for (Index col = 0; col < w; ++col) {
        float acc = 0.0f;
        for (int d = -1; d <= 1; ++d) acc += k[d + 1] * x(c, y, std::clamp<Index>(col + d, 0, w - 1));
        tmp(c, y, col) = acc;
      }
    }
    for (Index y = 0; y < h; ++y) {
      for (Index col = 0; col < w; ++col) {
        float acc = 0.0f;
        for (int d = -1; d <= 1; ++d) acc += k[d + 1] * tmp(c, std::clamp<Index>(y + d, 0, h - 1), col);
        x(c, y, col) = acc;
      }
    }
  }
  x.clamp();
}

}  // namespace

Image augment(const Image& x, const AugmentationConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  Image out = random_resized_crop(x, cfg.crop_scale_lo, cfg.crop_scale_hi, rng);
  if (rng.bernoulli(cfg.flip_probability)) flip_horizontal(out);
  if (cfg.color_jitter_strength > 0.0) color_jitter(out, cfg.color_jitter_strength, rng);
  if (rng.bernoulli(cfg.blur_probability)) gaussian_blur3(out, rng.uniform(0.1, 2.0));
  return out;
}

}  // namespace badenc
