#include "badenc/image.hpp"

#include <algorithm>
#include <cmath>

namespace badenc {

Image::Image(Index height, Index width) : height_(height), width_(width) {
  require(height > 0 && width > 0, "image dimensions must be positive");
  pixels_ = Pixels::Zero(kChannels * height * width);
}

Image::Image(Index height, Index width, Pixels pixels) : height_(height), width_(width), pixels_(std::move(pixels)) {
  require(height > 0 && width > 0, "image dimensions must be positive");
  require(pixels_.size() == kChannels * height * width, "pixel buffer does not match 3 x height x width");
  require((pixels_ >= 0.0f).all() && (pixels_ <= 1.0f).all(), "pixel values must lie in [0, 1]");
}

Image Image::filled(Index height, Index width, float value) {
  return Image(height, width, Pixels::Constant(kChannels * height * width, value));
}

void LabeledDataset::validate() const {
  require(num_classes > 0, "dataset needs at least one class");
  require(images.size() == labels.size(), "image and label counts differ");
  for (int label : labels) {
    require(label >= 0 && label < num_classes, "label " + std::to_string(label) + " outside [0, num_classes)");
  }
}

std::vector<std::size_t> LabeledDataset::indices_of(int label) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == label) out.push_back(i);
  }
  return out;
}

LabeledDataset LabeledDataset::subset(const std::vector<std::size_t>& indices) const {
  LabeledDataset out;
  out.num_classes = num_classes;
  out.images.reserve(indices.size());
  out.labels.reserve(indices.size());
  for (std::size_t i : indices) {
    require(i < images.size(), "subset index out of range");
    out.images.push_back(images[i]);
    out.labels.push_back(labels[i]);
  }
  return out;
}

Image resize_bilinear(const Image& src, Index height, Index width) {
  require(height > 0 && width > 0, "resize target must be positive");
  if (src.height() == height && src.width() == width) return src;

  Image out(height, width);
  const double sy = static_cast<double>(src.height()) / static_cast<double>(height);
  const double sx = static_cast<double>(src.width()) / static_cast<double>(width);
  for (Index y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(src.height() - 1));
    const Index y0 = static_cast<Index>(fy);
    const Index y1 = std::min(y0 + 1, src.height() - 1);
    const double wy = fy - static_cast<double>(y0);
    for (Index x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(src.width() - 1));
      const Index x0 = static_cast<Index>(fx);
      const Index x1 = std::min(x0 + 1, src.width() - 1);
      const double wx = fx - static_cast<double>(x0);
      for (Index c = 0; c < Image::kChannels; ++c) {
        const double top = (1 - wx) * src(c, y0, x0) + wx * src(c, y0, x1);
        const double bottom = (1 - wx) * src(c, y1, x0) + wx * src(c, y1, x1);
        out(c, y, x) = static_cast<float>((1 - wy) * top + wy * bottom);
      }
    }
  }
  out.clamp();
  return out;
}

}  // namespace badenc
