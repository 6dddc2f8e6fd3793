#ifndef BADENC_IMAGE_HPP
#define BADENC_IMAGE_HPP

#include "badenc/core.hpp"

#include <vector>

namespace badenc {

/// RGB image with channel-planar float storage, every value in [0, 1].
/// Pixel (c, y, x) lives at index c*H*W + y*W + x, the same order as a
/// CIFAR-10 binary record.
class Image {
 public:
  static constexpr Index kChannels = 3;

  using Pixels = Eigen::Array<float, Eigen::Dynamic, 1>;

  Image() = default;

  /// Black image.
  Image(Index height, Index width);

  /// Takes ownership of planar pixel data; throws ArgumentError when the size
  /// does not match or a value falls outside [0, 1].
  Image(Index height, Index width, Pixels pixels);

  static Image filled(Index height, Index width, float value);

  Index height() const { return height_; }
  Index width() const { return width_; }
  Index plane_size() const { return height_ * width_; }
  Index size() const { return kChannels * height_ * width_; }
  bool empty() const { return size() == 0; }

  float operator()(Index c, Index y, Index x) const { return pixels_[(c * height_ + y) * width_ + x]; }

  /// Unchecked write access. Callers keep values inside [0, 1]; clamp() restores
  /// the invariant after arithmetic.
  float& operator()(Index c, Index y, Index x) { return pixels_[(c * height_ + y) * width_ + x]; }

  const Pixels& pixels() const { return pixels_; }
  Pixels& pixels() { return pixels_; }

  void clamp() { pixels_ = pixels_.max(0.0f).min(1.0f); }

  bool same_shape(const Image& other) const { return height_ == other.height_ && width_ == other.width_; }

  friend bool operator==(const Image& a, const Image& b) {
    return a.same_shape(b) && (a.pixels_ == b.pixels_).all();
  }

 private:
  Index height_ = 0;
  Index width_ = 0;
  Pixels pixels_;
};

struct LabeledDataset {
  std::vector<Image> images;
  std::vector<int> labels;
  int num_classes = 0;

  std::size_t size() const { return images.size(); }

  /// Throws ArgumentError when sizes disagree or a label is out of range.
  void validate() const;

  /// Indices of every example with the given label, in dataset order.
  std::vector<std::size_t> indices_of(int label) const;

  LabeledDataset subset(const std::vector<std::size_t>& indices) const;
};

struct ShadowDataset {
  std::vector<Image> images;

  std::size_t size() const { return images.size(); }
};

/// Bilinear resize with half-pixel centres; a same-size resize is the identity.
Image resize_bilinear(const Image& src, Index height, Index width);

}  // namespace badenc

#endif  // BADENC_IMAGE_HPP
