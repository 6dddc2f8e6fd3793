#ifndef BADENC_ENCODER_HPP
#define BADENC_ENCODER_HPP

#include "badenc/image.hpp"
#include "badenc/nn/network.hpp"

#include <algorithm>
#include <cmath>
#include <span>
#include <string>

namespace badenc {

/// Norms at or below this are treated as a collapsed (zero) feature.
inline constexpr double kDegenerateNorm = 1e-12;

/// Image encoder f: an architecture id plus the network realising it. The
/// output of the final layer is the feature vector; there is no projection.
template <typename Scalar>
struct Encoder {
  std::string architecture;
  Index feature_dim = 0;
  Index input_height = 0;
  Index input_width = 0;
  nn::Network<Scalar> network;
};

/// Two-layer perceptron feature_dim -> feature_dim -> latent_dim used only by
/// the contrastive objective.
template <typename Scalar>
struct ProjectionHead {
  Index feature_dim = 0;
  Index latent_dim = 0;
  nn::Network<Scalar> network;
};

namespace detail {

inline Index parse_width(const std::string& arch, const std::string& prefix) {
  try {
    std::size_t used = 0;
    const int w = std::stoi(arch.substr(prefix.size()), &used);
    if (used == arch.size() - prefix.size() && w > 0) return w;
  } catch (const std::exception&) {
  }
  throw ArgumentError("unknown encoder architecture '" + arch + "'");
}

inline Index ceil_div(Index a, Index b) { return (a + b - 1) / b; }

}  // namespace detail

/// Builds a freshly initialised encoder. Known architectures:
///
///   cnn3-w<n>  three stride-2 3x3 conv blocks (n, 2n, 4n channels) each with
///              batch norm and ReLU, then a linear map to feature_dim.
///   toy-cnn    one 3x3 conv (2 channels) + batch norm + ReLU + linear; meant
///              for tiny images in gradient checks.
///   toy-mlp    flatten, linear to 8 hidden units, ReLU, linear.
template <typename Scalar>
Encoder<Scalar> make_encoder(const std::string& architecture, Index height, Index width, Index feature_dim,
                             std::uint64_t seed) {
  require(height > 0 && width > 0, "encoder input dimensions must be positive");
  require(feature_dim > 0, "feature_dim must be positive");
  using namespace nn;
  std::vector<Layer<Scalar>> layers;
  if (architecture.rfind("cnn3-w", 0) == 0) {
    const Index n = detail::parse_width(architecture, "cnn3-w");
    Index h = height;
    Index w = width;
    Index in = Image::kChannels;
    for (Index out : {n, 2 * n, 4 * n}) {
      layers.emplace_back(Conv2d<Scalar>(in, out, 3, 2, 1));
      layers.emplace_back(BatchNorm<Scalar>(out));
      layers.emplace_back(Relu<Scalar>());
      in = out;
      h = detail::ceil_div(h, 2);
      w = detail::ceil_div(w, 2);
    }
    layers.emplace_back(Flatten<Scalar>());
    layers.emplace_back(Linear<Scalar>(in * h * w, feature_dim));
  } else if (architecture == "toy-cnn") {
    layers.emplace_back(Conv2d<Scalar>(Image::kChannels, 2, 3, 1, 1));
    layers.emplace_back(BatchNorm<Scalar>(2));
    layers.emplace_back(Relu<Scalar>());
    layers.emplace_back(Flatten<Scalar>());
    layers.emplace_back(Linear<Scalar>(2 * height * width, feature_dim));
  } else if (architecture == "toy-mlp") {
    layers.emplace_back(Flatten<Scalar>());
    layers.emplace_back(Linear<Scalar>(Image::kChannels * height * width, 8));
    layers.emplace_back(Relu<Scalar>());
    layers.emplace_back(Linear<Scalar>(8, feature_dim));
  } else {
    throw ArgumentError("unknown encoder architecture '" + architecture + "'");
  }
  Encoder<Scalar> enc{architecture, feature_dim, height, width, Network<Scalar>(std::move(layers))};
  enc.network.init(seed);
  return enc;
}

template <typename Scalar>
ProjectionHead<Scalar> make_projection_head(Index feature_dim, Index latent_dim, std::uint64_t seed) {
  require(feature_dim > 0 && latent_dim > 0, "projection head dimensions must be positive");
  using namespace nn;
  std::vector<Layer<Scalar>> layers;
  layers.emplace_back(Linear<Scalar>(feature_dim, feature_dim));
  layers.emplace_back(Relu<Scalar>());
  layers.emplace_back(Linear<Scalar>(feature_dim, latent_dim));
  ProjectionHead<Scalar> head{feature_dim, latent_dim, Network<Scalar>(std::move(layers))};
  head.network.init(seed);
  return head;
}

template <typename Scalar>
void check_input(const Encoder<Scalar>& enc, std::span<const Image> images) {
  for (const Image& img : images) {
    require(img.height() == enc.input_height && img.width() == enc.input_width,
            "image is " + std::to_string(img.height()) + "x" + std::to_string(img.width()) + " but encoder '" +
                enc.architecture + "' expects " + std::to_string(enc.input_height) + "x" +
                std::to_string(enc.input_width));
  }
}

/// Inference-mode features, one column per image. A feature never depends on
/// the other images in the batch.
template <typename Scalar>
Matrix<Scalar> encode(const Encoder<Scalar>& enc, std::span<const Image> images) {
  check_input(enc, images);
  constexpr std::size_t kChunk = 256;
  Matrix<Scalar> features(enc.feature_dim, static_cast<Index>(images.size()));
  for (std::size_t start = 0; start < images.size(); start += kChunk) {
    const std::size_t n = std::min(kChunk, images.size() - start);
    const auto out = enc.network.infer(nn::to_feature_map<Scalar>(images.subspan(start, n)));
    features.middleCols(static_cast<Index>(start), static_cast<Index>(n)) = out.values;
  }
  return features;
}

template <typename Scalar>
Vector<Scalar> encode(const Encoder<Scalar>& enc, const Image& image) {
  return encode(enc, std::span<const Image>(&image, 1)).col(0);
}

/// u.v / (|u| |v|), clamped to [-1, 1]. Throws DegenerateError for a zero vector.
template <typename DerivedU, typename DerivedV>
typename DerivedU::Scalar cosine_similarity(const Eigen::MatrixBase<DerivedU>& u, const Eigen::MatrixBase<DerivedV>& v) {
  using Scalar = typename DerivedU::Scalar;
  require(u.size() == v.size(), "cosine similarity of vectors with different lengths");
  const Scalar nu = u.norm();
  const Scalar nv = v.norm();
  if (!(nu > Scalar(kDegenerateNorm)) || !(nv > Scalar(kDegenerateNorm))) {
    throw DegenerateError("cosine similarity of a zero-norm vector");
  }
  const Scalar c = u.dot(v) / (nu * nv);
  return std::clamp(c, Scalar(-1), Scalar(1));
}

/// Column-normalised copy of a feature matrix, kept together with the norms
/// so gradients can be pulled back through the normalisation.
template <typename Scalar>
struct UnitColumns {
  Matrix<Scalar> unit;
  Vector<Scalar> norms;

  explicit UnitColumns(const Matrix<Scalar>& x) : norms(x.colwise().norm().transpose()) {
    for (Index j = 0; j < norms.size(); ++j) {
      if (!(norms[j] > Scalar(kDegenerateNorm))) {
        throw DegenerateError("feature vector " + std::to_string(j) + " has zero norm");
      }
    }
    unit = x * norms.cwiseInverse().asDiagonal();
  }

  /// d/dx of a loss given d/d(unit): (g - u (u.g)) / |x| per column.
  Matrix<Scalar> backprop(const Matrix<Scalar>& grad_unit) const {
    const Vector<Scalar> proj = unit.cwiseProduct(grad_unit).colwise().sum().transpose();
    return (grad_unit - unit * proj.asDiagonal()) * norms.cwiseInverse().asDiagonal();
  }
};

}  // namespace badenc

#endif  // BADENC_ENCODER_HPP
