#ifndef BADENC_NN_NETWORK_HPP
#define BADENC_NN_NETWORK_HPP

#include "badenc/image.hpp"
#include "badenc/nn/layers.hpp"

#include <span>
#include <variant>
#include <vector>

namespace badenc::nn {

template <typename Scalar>
using Layer = std::variant<Conv2d<Scalar>, BatchNorm<Scalar>, Relu<Scalar>, Flatten<Scalar>, Linear<Scalar>>;

/// A feed-forward stack of layers with value semantics: copying a network
/// copies its parameters.
template <typename Scalar>
class Network {
 public:
  Network() = default;
  explicit Network(std::vector<Layer<Scalar>> layers) : layers_(std::move(layers)) {}

  void init(std::uint64_t seed) {
    Rng rng(seed);
    for (auto& layer : layers_) std::visit([&](auto& l) { l.init(rng); }, layer);
  }

  /// Caches what backward() needs. Train mode also updates normalisation
  /// statistics.
  FeatureMap<Scalar> forward(FeatureMap<Scalar> x, Mode mode) {
    for (auto& layer : layers_) x = std::visit([&](auto& l) { return l.forward(x, mode); }, layer);
    return x;
  }

  /// Inference-mode evaluation without touching any cached state.
  FeatureMap<Scalar> infer(FeatureMap<Scalar> x) const {
    for (const auto& layer : layers_) x = std::visit([&](const auto& l) { return l.infer(x); }, layer);
    return x;
  }

  /// Accumulates parameter gradients for the last forward() and returns the
  /// gradient with respect to its input values.
  Matrix<Scalar> backward(Matrix<Scalar> grad) {
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
      grad = std::visit([&](auto& l) { return l.backward(grad); }, *it);
    }
    return grad;
  }

  std::vector<ParamRef<Scalar>> parameters() {
    std::vector<ParamRef<Scalar>> out;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const std::string prefix = "layer" + std::to_string(i) + ".";
      std::visit([&](auto& l) { l.visit_params(prefix, [&](ParamRef<Scalar> p) { out.push_back(p); }); }, layers_[i]);
    }
    return out;
  }

  /// Parameters and normalisation statistics: everything a checkpoint stores.
  std::vector<TensorRef<Scalar>> tensors() {
    std::vector<TensorRef<Scalar>> out;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const std::string prefix = "layer" + std::to_string(i) + ".";
      std::visit(
          [&](auto& l) {
            l.visit_params(prefix, [&](ParamRef<Scalar> p) { out.push_back({p.name, p.value}); });
            l.visit_buffers(prefix, [&](TensorRef<Scalar> t) { out.push_back(t); });
          },
          layers_[i]);
    }
    return out;
  }

  std::vector<std::pair<std::string, Matrix<Scalar>>> tensors() const {
    std::vector<std::pair<std::string, Matrix<Scalar>>> out;
    Network copy = *this;
    for (const auto& t : copy.tensors()) out.emplace_back(t.name, *t.value);
    return out;
  }

  void zero_grad() {
    for (auto& p : parameters()) p.grad->setZero();
  }

  Index parameter_count() {
    Index n = 0;
    for (auto& p : parameters()) n += p.value->size();
    return n;
  }

  std::size_t size() const { return layers_.size(); }
  const std::vector<Layer<Scalar>>& layers() const { return layers_; }

 private:
  std::vector<Layer<Scalar>> layers_;
};

/// All parameters concatenated in parameters() order.
template <typename Scalar>
Vector<Scalar> flatten_parameters(Network<Scalar>& net) {
  Vector<Scalar> v(net.parameter_count());
  Index k = 0;
  for (auto& p : net.parameters()) {
    v.segment(k, p.value->size()) = p.value->reshaped();
    k += p.value->size();
  }
  return v;
}

template <typename Scalar>
Vector<Scalar> flatten_gradients(Network<Scalar>& net) {
  Vector<Scalar> v(net.parameter_count());
  Index k = 0;
  for (auto& p : net.parameters()) {
    v.segment(k, p.grad->size()) = p.grad->reshaped();
    k += p.grad->size();
  }
  return v;
}

template <typename Scalar>
void assign_parameters(Network<Scalar>& net, const Vector<Scalar>& v) {
  require(v.size() == net.parameter_count(), "parameter vector size mismatch");
  Index k = 0;
  for (auto& p : net.parameters()) {
    p.value->reshaped() = v.segment(k, p.value->size());
    k += p.value->size();
  }
}

template <typename Scalar>
bool all_finite(Network<Scalar>& net) {
  for (auto& t : net.tensors()) {
    if (!t.value->allFinite()) return false;
  }
  return true;
}

/// Packs images into a (3, B*H*W) input map. All images must share a shape.
template <typename Scalar>
FeatureMap<Scalar> to_feature_map(std::span<const Image> images) {
  require(!images.empty(), "empty image batch");
  const Index h = images.front().height();
  const Index w = images.front().width();
  FeatureMap<Scalar> x{Matrix<Scalar>(Image::kChannels, static_cast<Index>(images.size()) * h * w),
                       static_cast<Index>(images.size()), h, w};
  for (std::size_t b = 0; b < images.size(); ++b) {
    const Image& img = images[b];
    require(img.height() == h && img.width() == w, "images in a batch must share dimensions");
    const Index offset = static_cast<Index>(b) * h * w;
    for (Index c = 0; c < Image::kChannels; ++c) {
      x.values.row(c).segment(offset, h * w) =
          img.pixels().segment(c * h * w, h * w).template cast<Scalar>().matrix().transpose();
    }
  }
  return x;
}

/// Inverse layout of to_feature_map for gradients: returns one planar
/// 3*H*W vector per sample.
template <typename Scalar>
std::vector<Vector<Scalar>> split_planar(const Matrix<Scalar>& values, Index batch, Index height, Index width) {
  std::vector<Vector<Scalar>> out(static_cast<std::size_t>(batch), Vector<Scalar>(values.rows() * height * width));
  const Index plane = height * width;
  for (Index b = 0; b < batch; ++b) {
    for (Index c = 0; c < values.rows(); ++c) {
      out[static_cast<std::size_t>(b)].segment(c * plane, plane) = values.row(c).segment(b * plane, plane).transpose();
    }
  }
  return out;
}

}  // namespace badenc::nn

#endif  // BADENC_NN_NETWORK_HPP
