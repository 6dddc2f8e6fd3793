#ifndef BADENC_DATASETS_HPP
#define BADENC_DATASETS_HPP

#include "badenc/augment.hpp"
#include "badenc/image.hpp"
#include "badenc/trigger.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace badenc {

inline constexpr Index kCifarSide = 32;
inline constexpr std::size_t kCifarRecordBytes = 1 + 3 * 32 * 32;

/// Reads a CIFAR-10 binary batch: 3073-byte records, one label byte followed
/// by the R, G and B planes in row-major order.
LabeledDataset load_cifar10_binary(const std::filesystem::path& path);

/// Concatenates several batch files in the order given.
LabeledDataset load_cifar10_binary(const std::vector<std::filesystem::path>& paths);

LabeledDataset parse_cifar10_binary(const std::vector<std::uint8_t>& bytes);

/// Serialises 32x32 images with labels < 256 in the same record layout.
/// Pixels are quantised with round(v * 255).
std::vector<std::uint8_t> serialize_cifar10_binary(const LabeledDataset& dataset);
void save_cifar10_binary(const LabeledDataset& dataset, const std::filesystem::path& path);

/// Class c draws shape c % 4 (square, disc, triangle, plus) over a dim noise
/// background, with jittered position, size and hue; the hue ranges of
/// neighbouring classes overlap. Deterministic per seed.
LabeledDataset make_synthetic_dataset(int num_classes, int per_class, int image_size, std::uint64_t seed);

/// Uniform sample of n images without replacement; labels are dropped.
ShadowDataset sample_shadow(const LabeledDataset& dataset, std::size_t n, std::uint64_t seed);
ShadowDataset sample_shadow(const ShadowDataset& dataset, std::size_t n, std::uint64_t seed);

}  // namespace badenc

#endif  // BADENC_DATASETS_HPP
