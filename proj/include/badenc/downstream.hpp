#ifndef BADENC_DOWNSTREAM_HPP
#define BADENC_DOWNSTREAM_HPP

#include "badenc/checkpoint.hpp"
#include "badenc/encoder.hpp"
#include "badenc/nn/optim.hpp"

#include <functional>
#include <span>
#include <string>
#include <vector>

namespace badenc {

/// Multi-shot downstream head: fully connected feature_dim -> hidden... ->
/// num_classes with ReLU between layers. The default hidden widths are 512, 256.
template <typename Scalar>
struct Classifier {
  Index feature_dim = 0;
  int num_classes = 0;
  std::vector<Index> hidden{512, 256};
  nn::Network<Scalar> network;
};

template <typename Scalar>
Classifier<Scalar> make_classifier(Index feature_dim, std::vector<Index> hidden, int num_classes, std::uint64_t seed) {
  require(feature_dim > 0, "feature_dim must be positive");
  require(num_classes >= 2, "a classifier needs at least two classes");
  std::vector<nn::Layer<Scalar>> layers;
  Index in = feature_dim;
  for (Index width : hidden) {
    require(width > 0, "hidden widths must be positive");
    layers.emplace_back(nn::Linear<Scalar>(in, width));
    layers.emplace_back(nn::Relu<Scalar>());
    in = width;
  }
  layers.emplace_back(nn::Linear<Scalar>(in, num_classes));
  Classifier<Scalar> clf{feature_dim, num_classes, std::move(hidden), nn::Network<Scalar>(std::move(layers))};
  clf.network.init(seed);
  return clf;
}

template <typename Scalar>
struct FeatureSet {
  Matrix<Scalar> features;  // feature_dim x n
  std::vector<int> labels;
  int num_classes = 0;
};

/// Column k holds encode(enc, image k); labels are carried over in order.
template <typename Scalar>
FeatureSet<Scalar> extract_features(const Encoder<Scalar>& enc, const LabeledDataset& data) {
  data.validate();
  return {encode(enc, std::span<const Image>(data.images)), data.labels, data.num_classes};
}

struct DownstreamConfig {
  int epochs = 100;
  double learning_rate = 1e-4;
  Index batch_size = 64;
  std::vector<Index> hidden{512, 256};
  std::uint64_t seed = 0;

  void validate() const {
    require(epochs >= 1, "downstream epochs must be at least 1");
    require(learning_rate > 0.0, "downstream learning rate must be positive");
    require(batch_size >= 1, "downstream batch size must be at least 1");
  }
};

/// Index of the largest entry; ties go to the smallest index.
template <typename Derived>
int argmax_first(const Eigen::MatrixBase<Derived>& v) {
  int best = 0;
  for (Index i = 1; i < v.size(); ++i) {
    if (v(i) > v(best)) best = static_cast<int>(i);
  }
  return best;
}

template <typename Scalar>
Matrix<Scalar> logits(const Classifier<Scalar>& clf, const Matrix<Scalar>& features) {
  require(features.rows() == clf.feature_dim, "feature dimension does not match the classifier");
  return clf.network.infer({features, features.cols(), 1, 1}).values;
}

template <typename Scalar>
std::vector<int> predict_features(const Classifier<Scalar>& clf, const Matrix<Scalar>& features) {
  const Matrix<Scalar> z = logits(clf, features);
  std::vector<int> out(static_cast<std::size_t>(z.cols()));
  for (Index j = 0; j < z.cols(); ++j) out[static_cast<std::size_t>(j)] = argmax_first(z.col(j));
  return out;
}

template <typename Scalar>
std::vector<int> predict(const Classifier<Scalar>& clf, const Encoder<Scalar>& enc, std::span<const Image> images) {
  require(clf.feature_dim == enc.feature_dim, "classifier and encoder feature dimensions differ");
  return predict_features(clf, encode(enc, images));
}

template <typename Scalar>
int predict(const Classifier<Scalar>& clf, const Encoder<Scalar>& enc, const Image& x) {
  return predict(clf, enc, std::span<const Image>(&x, 1)).front();
}

template <typename Scalar>
struct MultishotResult {
  Classifier<Scalar> classifier;
  std::vector<double> epoch_loss;
  std::vector<double> train_accuracy;
};

/// Softmax cross-entropy on the frozen features, Adam, shuffled mini-batches
/// (the last partial batch is kept).
template <typename Scalar>
MultishotResult<Scalar> train_multishot(const FeatureSet<Scalar>& data, const DownstreamConfig& cfg,
                                        const std::function<void(int, double, double)>& on_epoch = {}) {
  cfg.validate();
  const auto n = static_cast<std::size_t>(data.features.cols());
  require(n == data.labels.size(), "feature and label counts differ");
  require(data.num_classes >= 2, "downstream task needs at least two classes");
  std::vector<int> per_class(static_cast<std::size_t>(data.num_classes), 0);
  for (int y : data.labels) {
    require(y >= 0 && y < data.num_classes, "label outside [0, num_classes)");
    ++per_class[static_cast<std::size_t>(y)];
  }
  for (int c = 0; c < data.num_classes; ++c) {
    require(per_class[static_cast<std::size_t>(c)] > 0, "class " + std::to_string(c) + " has no training example");
  }

  MultishotResult<Scalar> out{make_classifier<Scalar>(data.features.rows(), cfg.hidden, data.num_classes,
                                                      derive_seed(cfg.seed, stable_hash("classifier-init"))),
                              {},
                              {}};
  nn::Adam<Scalar> optimizer(cfg.learning_rate);
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng(derive_seed(cfg.seed, stable_hash("classifier-epoch"), epoch));
    const auto order = rng.permutation(n);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < n; start += bs) {
      const std::size_t m = std::min(bs, n - start);
      Matrix<Scalar> x(data.features.rows(), static_cast<Index>(m));
      std::vector<int> y(m);
      for (std::size_t k = 0; k < m; ++k) {
        x.col(static_cast<Index>(k)) = data.features.col(static_cast<Index>(order[start + k]));
        y[k] = data.labels[order[start + k]];
      }
      out.classifier.network.zero_grad();
      const Matrix<Scalar> z = out.classifier.network.forward({x, static_cast<Index>(m), 1, 1}, nn::Mode::Train).values;
      Matrix<Scalar> grad(z.rows(), z.cols());
      for (Index j = 0; j < z.cols(); ++j) {
        const Scalar top = z.col(j).maxCoeff();
        const Vector<Scalar> e = (z.col(j).array() - top).exp();
        const Scalar sum = e.sum();
        const int label = y[static_cast<std::size_t>(j)];
        loss_sum += static_cast<double>(std::log(sum) + top - z(label, j));
        grad.col(j) = e / sum;
        grad(label, j) -= Scalar(1);
        if (argmax_first(z.col(j)) == label) ++correct;
      }
      grad /= static_cast<Scalar>(m);
      out.classifier.network.backward(grad);
      optimizer.step(out.classifier.network.parameters());
    }
    out.epoch_loss.push_back(loss_sum / static_cast<double>(n));
    out.train_accuracy.push_back(static_cast<double>(correct) / static_cast<double>(n));
    if (on_epoch) on_epoch(epoch, out.epoch_loss.back(), out.train_accuracy.back());
  }
  if (!nn::all_finite(out.classifier.network)) throw DivergenceError("classifier parameters are not finite", cfg.epochs);
  return out;
}

/// Zero-shot emulation: one unit-norm anchor per class.
template <typename Scalar>
struct PrototypeTable {
  Matrix<Scalar> prototypes;  // feature_dim x num_classes
  std::vector<std::string> class_names;

  int num_classes() const { return static_cast<int>(prototypes.cols()); }
};

/// prototype_c = normalised mean feature of the class-c exemplars.
template <typename Scalar>
PrototypeTable<Scalar> build_class_prototypes(const Encoder<Scalar>& enc, const LabeledDataset& exemplars,
                                              std::vector<std::string> class_names = {}) {
  exemplars.validate();
  const Matrix<Scalar> f = encode(enc, std::span<const Image>(exemplars.images));
  Matrix<Scalar> sums = Matrix<Scalar>::Zero(enc.feature_dim, exemplars.num_classes);
  std::vector<int> counts(static_cast<std::size_t>(exemplars.num_classes), 0);
  for (std::size_t k = 0; k < exemplars.size(); ++k) {
    sums.col(exemplars.labels[k]) += f.col(static_cast<Index>(k));
    ++counts[static_cast<std::size_t>(exemplars.labels[k])];
  }
  for (int c = 0; c < exemplars.num_classes; ++c) {
    require(counts[static_cast<std::size_t>(c)] > 0, "class " + std::to_string(c) + " has no exemplar");
    sums.col(c) /= static_cast<Scalar>(counts[static_cast<std::size_t>(c)]);
  }
  if (class_names.empty()) {
    for (int c = 0; c < exemplars.num_classes; ++c) class_names.push_back("class-" + std::to_string(c));
  }
  require(static_cast<int>(class_names.size()) == exemplars.num_classes, "one class name per class is required");
  return {UnitColumns<Scalar>(sums).unit, std::move(class_names)};
}

/// argmax_c cos(feature, prototype_c) per column; ties go to the smallest id.
template <typename Scalar>
std::vector<int> zero_shot_predict_features(const PrototypeTable<Scalar>& protos, const Matrix<Scalar>& features) {
  require(features.rows() == protos.prototypes.rows(), "feature dimension does not match the prototypes");
  const UnitColumns<Scalar> unit(features);
  const Matrix<Scalar> cos = protos.prototypes.transpose() * unit.unit;
  std::vector<int> out(static_cast<std::size_t>(cos.cols()));
  for (Index j = 0; j < cos.cols(); ++j) out[static_cast<std::size_t>(j)] = argmax_first(cos.col(j));
  return out;
}

template <typename Scalar>
std::vector<int> zero_shot_predict(const Encoder<Scalar>& enc, const PrototypeTable<Scalar>& protos,
                                   std::span<const Image> images) {
  return zero_shot_predict_features(protos, encode(enc, images));
}

template <typename Scalar>
int zero_shot_predict(const Encoder<Scalar>& enc, const PrototypeTable<Scalar>& protos, const Image& x) {
  return zero_shot_predict(enc, protos, std::span<const Image>(&x, 1)).front();
}

template <typename Scalar>
Checkpoint classifier_checkpoint(const Classifier<Scalar>& clf, const nlohmann::json& config = nlohmann::json::object()) {
  Checkpoint ckpt = to_checkpoint(clf.network);
  ckpt.header["kind"] = "classifier";
  ckpt.header["architecture"] = "mlp";
  ckpt.header["feature_dim"] = clf.feature_dim;
  ckpt.header["num_classes"] = clf.num_classes;
  ckpt.header["hidden"] = clf.hidden;
  ckpt.header["config"] = config;
  return ckpt;
}

template <typename Scalar>
Classifier<Scalar> classifier_from_checkpoint(const Checkpoint& ckpt) {
  require_kind(ckpt, "classifier");
  const auto& h = ckpt.header;
  auto clf = make_classifier<Scalar>(h.at("feature_dim").get<Index>(), h.at("hidden").get<std::vector<Index>>(),
                                     h.at("num_classes").get<int>(), 0);
  load_tensors(clf.network, ckpt);
  return clf;
}

template <typename Scalar>
void save_classifier(const Classifier<Scalar>& clf, const std::filesystem::path& path,
                     const nlohmann::json& config = nlohmann::json::object()) {
  write_checkpoint(classifier_checkpoint(clf, config), path);
}

template <typename Scalar>
Classifier<Scalar> load_classifier(const std::filesystem::path& path) {
  return classifier_from_checkpoint<Scalar>(read_checkpoint(path));
}

/// Prototype tables as JSON: {"prototypes": [{"class": c, "name": ..., "vector": [...]}, ...]}.
template <typename Scalar>
nlohmann::json prototypes_to_json(const PrototypeTable<Scalar>& protos) {
  nlohmann::json out;
  out["prototypes"] = nlohmann::json::array();
  for (int c = 0; c < protos.num_classes(); ++c) {
    std::vector<double> v(static_cast<std::size_t>(protos.prototypes.rows()));
    for (Index i = 0; i < protos.prototypes.rows(); ++i) v[static_cast<std::size_t>(i)] = protos.prototypes(i, c);
    out["prototypes"].push_back({{"class", c}, {"name", protos.class_names[static_cast<std::size_t>(c)]}, {"vector", v}});
  }
  return out;
}

template <typename Scalar>
PrototypeTable<Scalar> prototypes_from_json(const nlohmann::json& j) {
  const auto& list = j.at("prototypes");
  require(!list.empty(), "prototype table is empty");
  const auto dim = static_cast<Index>(list.front().at("vector").size());
  PrototypeTable<Scalar> out{Matrix<Scalar>(dim, static_cast<Index>(list.size())), {}};
  for (std::size_t c = 0; c < list.size(); ++c) {
    const auto v = list[c].at("vector").get<std::vector<double>>();
    require(static_cast<Index>(v.size()) == dim, "prototype vectors differ in length");
    for (Index i = 0; i < dim; ++i) out.prototypes(i, static_cast<Index>(c)) = static_cast<Scalar>(v[static_cast<std::size_t>(i)]);
    out.class_names.push_back(list[c].at("name").get<std::string>());
  }
  return out;
}

}  // namespace badenc

#endif  // BADENC_DOWNSTREAM_HPP
