#include "badenc/trigger.hpp"

namespace badenc {

Corner parse_corner(const std::string& text) {
  if (text == "bottom-right") return Corner::BottomRight;
  if (text == "upper-left") return Corner::UpperLeft;
  if (text == "center") return Corner::Center;
  throw ArgumentError("unknown trigger corner '" + text + "' (expected bottom-right, upper-left or center)");
}

std::string to_string(Corner corner) {
  switch (corner) {
    case Corner::BottomRight:
      return "bottom-right";
    case Corner::UpperLeft:
      return "upper-left";
    case Corner::Center:
      return "center";
  }
  return "?";
}

Trigger::Trigger(Mask mask, Image pattern, std::string name)
    : mask_(std::move(mask)), pattern_(std::move(pattern)), name_(std::move(name)) {
  require(mask_.rows() == pattern_.height() && mask_.cols() == pattern_.width(),
          "trigger mask and pattern dimensions differ");
  require((mask_ <= 1).all(), "trigger mask entries must be 0 or 1");
}

Trigger Trigger::square(Index height, Index width, Corner corner, Index size, std::array<float, 3> rgb,
                        std::string name) {
  require(size > 0 && size <= height && size <= width, "trigger square does not fit the image");
  for (float v : rgb) require(v >= 0.0f && v <= 1.0f, "trigger colour components must lie in [0, 1]");

  Index top = 0;
  Index left = 0;
  switch (corner) {
    case Corner::BottomRight:
      top = height - size;
      left = width - size;
      break;
    case Corner::UpperLeft:
      break;
    case Corner::Center:
      top = (height - size) / 2;
      left = (width - size) / 2;
      break;
  }

  Mask mask = Mask::Zero(height, width);
  mask.block(top, left, size, size).setOnes();
  Image pattern(height, width);
  for (Index c = 0; c < Image::kChannels; ++c) {
    for (Index y = top; y < top + size; ++y) {
      for (Index x = left; x < left + size; ++x) pattern(c, y, x) = rgb[static_cast<std::size_t>(c)];
    }
  }
  if (name.empty()) name = "square-" + to_string(corner) + "-" + std::to_string(size);
  return Trigger(std::move(mask), std::move(pattern), std::move(name));
}

Image embed_trigger(const Image& x, const Trigger& trigger) {
  require(x.height() == trigger.height() && x.width() == trigger.width(),
          "image and trigger dimensions differ");
  Image out = x;
  for (Index y = 0; y < x.height(); ++y) {
    for (Index col = 0; col < x.width(); ++col) {
      if (trigger.mask()(y, col) == 0) continue;
      for (Index c = 0; c < Image::kChannels; ++c) out(c, y, col) = trigger.pattern()(c, y, col);
    }
  }
  return out;
}

}  // namespace badenc
