#ifndef BADENC_TRIGGER_HPP
#define BADENC_TRIGGER_HPP

#include "badenc/image.hpp"

#include <array>
#include <string>

namespace badenc {

enum class Corner { BottomRight, UpperLeft, Center };

Corner parse_corner(const std::string& text);
std::string to_string(Corner corner);

/// A full-image binary mask plus the pattern written wherever the mask is set.
class Trigger {
 public:
  using Mask = Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  Trigger() = default;

  /// Throws ArgumentError on shape mismatch or a mask entry other than 0/1.
  Trigger(Mask mask, Image pattern, std::string name);

  /// Solid `size`x`size` square of colour `rgb` (components in [0, 1]) placed
  /// at `corner` of a height x width image.
  static Trigger square(Index height, Index width, Corner corner, Index size, std::array<float, 3> rgb,
                        std::string name = {});

  /// The default backdoor trigger: a 10x10 white square in the bottom-right corner.
  static Trigger white_square(Index height, Index width, Index size = 10) {
    return square(height, width, Corner::BottomRight, size, {1.0f, 1.0f, 1.0f}, "white-br-" + std::to_string(size));
  }

  const Mask& mask() const { return mask_; }
  const Image& pattern() const { return pattern_; }
  const std::string& name() const { return name_; }
  Index height() const { return pattern_.height(); }
  Index width() const { return pattern_.width(); }
  Index area() const { return static_cast<Index>(mask_.cast<Index>().sum()); }

 private:
  Mask mask_;
  Image pattern_;
  std::string name_;
};

/// x ⊕ e: pattern where the mask is set, x elsewhere.
Image embed_trigger(const Image& x, const Trigger& trigger);

}  // namespace badenc

#endif  // BADENC_TRIGGER_HPP
