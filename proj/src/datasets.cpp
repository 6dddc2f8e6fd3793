#include "badenc/datasets.hpp"

#include "badenc/rng.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>

namespace badenc {

namespace {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

LabeledDataset parse_cifar10_binary(const std::vector<std::uint8_t>& bytes) {
  if (bytes.empty() || bytes.size() % kCifarRecordBytes != 0) {
    throw FormatError("malformed CIFAR-10 file: " + std::to_string(bytes.size()) + " bytes is not a multiple of " +
                      std::to_string(kCifarRecordBytes));
  }
  const std::size_t count = bytes.size() / kCifarRecordBytes;
  LabeledDataset out;
  out.num_classes = 10;
  out.images.reserve(count);
  out.labels.reserve(count);
  for (std::size_t r = 0; r < count; ++r) {
    const std::uint8_t* record = bytes.data() + r * kCifarRecordBytes;
    if (record[0] >= 10) {
      throw FormatError("corrupt CIFAR-10 record " + std::to_string(r) + ": label byte " + std::to_string(record[0]));
    }
    Image::Pixels pixels(kCifarRecordBytes - 1);
    for (std::size_t i = 0; i + 1 < kCifarRecordBytes; ++i) {
      pixels[static_cast<Index>(i)] = static_cast<float>(record[i + 1]) / 255.0f;
    }
    out.images.emplace_back(kCifarSide, kCifarSide, std::move(pixels));
    out.labels.push_back(record[0]);
  }
  return out;
}

LabeledDataset load_cifar10_binary(const std::filesystem::path& path) {
  return parse_cifar10_binary(read_file(path));
}

LabeledDataset load_cifar10_binary(const std::vector<std::filesystem::path>& paths) {
  require(!paths.empty(), "no CIFAR-10 files given");
  LabeledDataset all;
  all.num_classes = 10;
  for (const auto& p : paths) {
    LabeledDataset part = load_cifar10_binary(p);
    std::move(part.images.begin(), part.images.end(), std::back_inserter(all.images));
    all.labels.insert(all.labels.end(), part.labels.begin(), part.labels.end());
  }
  return all;
}

std::vector<std::uint8_t> serialize_cifar10_binary(const LabeledDataset& dataset) {
  dataset.validate();
  require(dataset.num_classes <= 256, "binary record labels are a single byte");
  std::vector<std::uint8_t> bytes;
  bytes.reserve(dataset.size() * kCifarRecordBytes);
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const Image& img = dataset.images[i];
    require(img.height() == kCifarSide && img.width() == kCifarSide, "binary records hold 32x32 images only");
    bytes.push_back(static_cast<std::uint8_t>(dataset.labels[i]));
    for (Index k = 0; k < img.size(); ++k) {
      bytes.push_back(static_cast<std::uint8_t>(std::lround(img.pixels()[k] * 255.0f)));
    }
  }
  return bytes;
}

void save_cifar10_binary(const LabeledDataset& dataset, const std::filesystem::path& path) {
  const auto bytes = serialize_cifar10_binary(dataset);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

namespace {

constexpr double kHueJitter = 0.25;

std::array<float, 3> hue_colour(double hue) {
  // HSV with fixed saturation/value; hue in [0, 1)
  const double h = 6.0 * hue;
  const double s = 0.85;
  const double v = 0.95;
  const int sector = static_cast<int>(h) % 6;
  const double f = h - std::floor(h);
  const double p = v * (1 - s);
  const double q = v * (1 - s * f);
  const double t = v * (1 - s * (1 - f));
  double r = v, g = t, b = p;
  switch (sector) {
    case 1: r = q, g = v, b = p; break;
    case 2: r = p, g = v, b = t; break;
    case 3: r = p, g = q, b = v; break;
    case 4: r = t, g = p, b = v; break;
    case 5: r = v, g = p, b = q; break;
    default: break;
  }
  return {static_cast<float>(r), static_cast<float>(g), static_cast<float>(b)};
}

bool inside_shape(int kind, double dy, double dx, double radius) {
  switch (kind) {
    case 0:  // square
      return std::abs(dy) <= radius && std::abs(dx) <= radius;
    case 1:  // disc
      return dy * dy + dx * dx <= radius * radius;
    case 2:  // upward triangle
      return dy <= radius && dy >= -radius && std::abs(dx) <= (dy + radius) * 0.5;
    default:  // plus sign
      return (std::abs(dy) <= radius * 0.35 && std::abs(dx) <= radius) ||
             (std::abs(dx) <= radius * 0.35 && std::abs(dy) <= radius);
  }
}

}  // namespace

LabeledDataset make_synthetic_dataset(int num_classes, int per_class, int image_size, std::uint64_t seed) {
  require(num_classes >= 2, "synthetic dataset needs at least 2 classes");
  require(per_class >= 1, "synthetic dataset needs at least 1 image per class");
  require(image_size >= 8, "synthetic images must be at least 8x8");

  const auto side = static_cast<Index>(image_size);
  LabeledDataset out;
  out.num_classes = num_classes;
  out.images.reserve(static_cast<std::size_t>(num_classes * per_class));
  Rng rng(derive_seed(seed, stable_hash("synthetic")));
  // Interleave classes so any prefix is roughly balanced.
  for (int k = 0; k < per_class; ++k) {
    for (int cls = 0; cls < num_classes; ++cls) {
      // hue is only a weak cue; neighbouring classes overlap
      double hue = static_cast<double>(cls) / num_classes + rng.uniform(-kHueJitter, kHueJitter);
      hue -= std::floor(hue);
      const auto colour = hue_colour(hue);
      const int kind = cls % 4;
      Image img(side, side);
      for (Index i = 0; i < img.size(); ++i) img.pixels()[i] = static_cast<float>(rng.uniform(0.0, 0.3));
      const double radius = image_size * rng.uniform(0.14, 0.26);
      const double cy = image_size * rng.uniform(0.25, 0.75);
      const double cx = image_size * rng.uniform(0.25, 0.75);
      const double shade = rng.uniform(0.85, 1.0);
      for (Index y = 0; y < side; ++y) {
        for (Index x = 0; x < side; ++x) {
          if (!inside_shape(kind, y + 0.5 - cy, x + 0.5 - cx, radius)) continue;
          for (Index c = 0; c < Image::kChannels; ++c) {
            img(c, y, x) = static_cast<float>(colour[static_cast<std::size_t>(c)] * shade);
          }
        }
      }
      // 8-bit quantised so fixtures survive a trip through the binary format
      img.pixels() = (img.pixels() * 255.0f).round() / 255.0f;
      out.images.push_back(std::move(img));
      out.labels.push_back(cls);
    }
  }
  return out;
}

namespace {

std::vector<std::size_t> choose_without_replacement(std::size_t population, std::size_t n, std::uint64_t seed) {
  require(n >= 1 && n <= population,
          "shadow size " + std::to_string(n) + " outside [1, " + std::to_string(population) + "]");
  Rng rng(derive_seed(seed, stable_hash("shadow")));
  auto perm = rng.permutation(population);
  perm.resize(n);
  // keep dataset order so n == |d| reproduces the dataset exactly
  std::sort(perm.begin(), perm.end());
  return perm;
}

}  // namespace

ShadowDataset sample_shadow(const LabeledDataset& dataset, std::size_t n, std::uint64_t seed) {
  ShadowDataset out;
  for (std::size_t i : choose_without_replacement(dataset.size(), n, seed)) out.images.push_back(dataset.images[i]);
  return out;
}

ShadowDataset sample_shadow(const ShadowDataset& dataset, std::size_t n, std::uint64_t seed) {
  ShadowDataset out;
  for (std::size_t i : choose_without_replacement(dataset.size(), n, seed)) out.images.push_back(dataset.images[i]);
  return out;
}

}  // namespace badenc
