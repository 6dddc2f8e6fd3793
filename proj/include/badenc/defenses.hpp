#ifndef BADENC_DEFENSES_HPP
#define BADENC_DEFENSES_HPP

#include "badenc/evaluation.hpp"
#include "badenc/nn/optim.hpp"

#include <cmath>
#include <filesystem>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace badenc {

/// Uniform view of a differentiable image classifier for the detectors:
/// logits for a batch of images and the gradient of a loss with respect to
/// the input pixels. forward() caches what backward_input() needs.
template <typename Scalar>
class ModelHandle {
 public:
  virtual ~ModelHandle() = default;

  virtual Index input_height() const = 0;
  virtual Index input_width() const = 0;
  virtual int num_outputs() const = 0;

  /// Logits, one column per image of `input` (a (3, B*H*W) map).
  virtual Matrix<Scalar> forward(const nn::FeatureMap<Scalar>& input) = 0;

  /// d(loss)/d(input values) for d(loss)/d(logits) of the last forward().
  virtual Matrix<Scalar> backward_input(const Matrix<Scalar>& grad_logits) = 0;

  void check_images(Index height, Index width) const {
    require(height == input_height() && width == input_width(), "model does not accept images of this size");
  }
};

/// Frozen encoder followed by a multi-shot classifier.
template <typename Scalar>
class PipelineHandle final : public ModelHandle<Scalar> {
 public:
  PipelineHandle(Encoder<Scalar> encoder, Classifier<Scalar> classifier)
      : encoder_(std::move(encoder)), classifier_(std::move(classifier)) {
    require(encoder_.feature_dim == classifier_.feature_dim, "classifier and encoder feature dimensions differ");
  }

  Index input_height() const override { return encoder_.input_height; }
  Index input_width() const override { return encoder_.input_width; }
  int num_outputs() const override { return classifier_.num_classes; }

  Matrix<Scalar> forward(const nn::FeatureMap<Scalar>& input) override {
    this->check_images(input.height, input.width);
    auto features = encoder_.network.forward(input, nn::Mode::Inference);
    return classifier_.network.forward(std::move(features), nn::Mode::Inference).values;
  }

  Matrix<Scalar> backward_input(const Matrix<Scalar>& grad_logits) override {
    return encoder_.network.backward(classifier_.network.backward(grad_logits));
  }

  const Encoder<Scalar>& encoder() const { return encoder_; }
  const Classifier<Scalar>& classifier() const { return classifier_; }

 private:
  Encoder<Scalar> encoder_;
  Classifier<Scalar> classifier_;
};

/// logits = W * pixels + b on planar pixel vectors; useful for analytic fixtures.
template <typename Scalar>
class AffineHandle final : public ModelHandle<Scalar> {
 public:
  AffineHandle(Index height, Index width, Matrix<Scalar> weight, Vector<Scalar> bias)
      : height_(height), width_(width), weight_(std::move(weight)), bias_(std::move(bias)) {
    require(weight_.cols() == Image::kChannels * height * width, "affine model weight does not match the image size");
    require(weight_.rows() == bias_.size(), "affine model bias does not match the output count");
  }

  Index input_height() const override { return height_; }
  Index input_width() const override { return width_; }
  int num_outputs() const override { return static_cast<int>(weight_.rows()); }

  Matrix<Scalar> forward(const nn::FeatureMap<Scalar>& input) override {
    this->check_images(input.height, input.width);
    flatten_ = nn::Flatten<Scalar>();
    const auto flat = flatten_.forward(input, nn::Mode::Inference);
    Matrix<Scalar> z = weight_ * flat.values;
    z.colwise() += bias_;
    return z;
  }

  Matrix<Scalar> backward_input(const Matrix<Scalar>& grad_logits) override {
    return flatten_.backward(weight_.transpose() * grad_logits);
  }

 private:
  Index height_, width_;
  Matrix<Scalar> weight_;
  Vector<Scalar> bias_;
  nn::Flatten<Scalar> flatten_;
};

/// Loads an encoder checkpoint and a classifier checkpoint into one handle.
template <typename Scalar>
std::unique_ptr<ModelHandle<Scalar>> load_model_handle(const std::filesystem::path& encoder_path,
                                                       const std::filesystem::path& classifier_path) {
  return std::make_unique<PipelineHandle<Scalar>>(load_encoder<Scalar>(encoder_path),
                                                  load_classifier<Scalar>(classifier_path));
}

// ---------------------------------------------------------------------------
// Trigger reverse engineering

struct ReversedTrigger {
  Eigen::ArrayXXd mask;  // height x width, entries in [0, 1]
  Image pattern;
  double l1_norm = 0.0;  // sum of mask
  int target_class = 0;
  double final_loss = 0.0;
  double final_attack_rate = 0.0;  // fraction of the last batch classified as target
};

struct ReverseConfig {
  double learning_rate = 0.1;
  Index batch_size = 32;
  std::uint64_t seed = 0;
};

/// Optimises a mask m and pattern p, both squashed into [0, 1] through
/// (tanh(.) + 1) / 2, so that x' = (1 - m) x + m p is classified as
/// `target_class`: minimises mean cross-entropy(target) + sparsity_weight * |m|_1
/// with Adam over shuffled mini-batches of `clean`.
template <typename Scalar>
ReversedTrigger reverse_engineer_trigger(ModelHandle<Scalar>& model, int target_class, const LabeledDataset& clean,
                                         int steps, double sparsity_weight, const ReverseConfig& cfg = {}) {
  require(steps >= 1, "reverse engineering needs at least one step");
  require(!clean.images.empty(), "reverse engineering needs clean data");
  require(sparsity_weight >= 0.0, "sparsity weight must be non-negative");
  require(target_class >= 0 && target_class < model.num_outputs(), "target class outside the model's outputs");
  const Index h = model.input_height();
  const Index w = model.input_width();
  const Index plane = h * w;
  for (const Image& x : clean.images) model.check_images(x.height(), x.width());

  // raw parameters: mask (1 x plane), pattern (3 x plane)
  Matrix<double> mask_raw = Matrix<double>::Zero(1, plane);
  Matrix<double> pattern_raw = Matrix<double>::Zero(Image::kChannels, plane);
  Matrix<double> mask_grad(1, plane), pattern_grad(Image::kChannels, plane);
  std::vector<nn::ParamRef<double>> params{{"mask", &mask_raw, &mask_grad, false},
                                           {"pattern", &pattern_raw, &pattern_grad, false}};
  nn::Adam<double> optimizer(cfg.learning_rate);

  const auto n = clean.images.size();
  const auto bs = std::min<std::size_t>(static_cast<std::size_t>(std::max<Index>(cfg.batch_size, 1)), n);
  Rng rng(derive_seed(cfg.seed, stable_hash("reverse-trigger"), target_class));
  auto order = rng.permutation(n);
  std::size_t cursor = 0;

  double last_loss = 0.0;
  double last_rate = 0.0;
  for (int step = 0; step < steps; ++step) {
    const Matrix<double> m = (mask_raw.array().tanh() + 1.0) * 0.5;
    const Matrix<double> p = (pattern_raw.array().tanh() + 1.0) * 0.5;

    std::vector<std::size_t> idx(bs);
    for (auto& i : idx) {
      if (cursor == n) {
        order = rng.permutation(n);
        cursor = 0;
      }
      i = order[cursor++];
    }
    nn::FeatureMap<Scalar> x{Matrix<Scalar>(Image::kChannels, static_cast<Index>(bs) * plane), static_cast<Index>(bs), h, w};
    Matrix<double> originals(Image::kChannels, static_cast<Index>(bs) * plane);
    for (std::size_t b = 0; b < bs; ++b) {
      const Image& img = clean.images[idx[b]];
      for (Index c = 0; c < Image::kChannels; ++c) {
        for (Index k = 0; k < plane; ++k) {
          const double v = img.pixels()[c * plane + k];
          const Index col = static_cast<Index>(b) * plane + k;
          originals(c, col) = v;
          x.values(c, col) = static_cast<Scalar>((1.0 - m(0, k)) * v + m(0, k) * p(c, k));
        }
      }
    }

    const Matrix<Scalar> z = model.forward(x);
    Matrix<Scalar> grad_z(z.rows(), z.cols());
    double ce = 0.0;
    std::size_t hits = 0;
    for (Index j = 0; j < z.cols(); ++j) {
      const Scalar top = z.col(j).maxCoeff();
      const Vector<Scalar> e = (z.col(j).array() - top).exp();
      const Scalar sum = e.sum();
      ce += static_cast<double>(std::log(sum) + top - z(target_class, j));
      grad_z.col(j) = e / sum;
      grad_z(target_class, j) -= Scalar(1);
      if (argmax_first(z.col(j)) == target_class) ++hits;
    }
    grad_z /= static_cast<Scalar>(bs);
    ce /= static_cast<double>(bs);
    last_loss = ce + sparsity_weight * m.sum();
    last_rate = static_cast<double>(hits) / static_cast<double>(bs);
    if (!std::isfinite(last_loss)) throw DivergenceError("trigger reverse engineering diverged", step);

    const Matrix<double> gx = model.backward_input(grad_z).template cast<double>();
    mask_grad.setConstant(sparsity_weight);
    pattern_grad.setZero();
    for (std::size_t b = 0; b < bs; ++b) {
      for (Index k = 0; k < plane; ++k) {
        const Index col = static_cast<Index>(b) * plane + k;
        for (Index c = 0; c < Image::kChannels; ++c) {
          mask_grad(0, k) += gx(c, col) * (p(c, k) - originals(c, col));
          pattern_grad(c, k) += gx(c, col) * m(0, k);
        }
      }
    }
    mask_grad.array() *= 0.5 * (1.0 - mask_raw.array().tanh().square());
    pattern_grad.array() *= 0.5 * (1.0 - pattern_raw.array().tanh().square());
    optimizer.step(params);
  }

  ReversedTrigger out;
  const Matrix<double> m = (mask_raw.array().tanh() + 1.0) * 0.5;
  const Matrix<double> p = (pattern_raw.array().tanh() + 1.0) * 0.5;
  out.mask = Eigen::Map<const Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(m.data(), h, w);
  Image::Pixels pixels(Image::kChannels * plane);
  for (Index c = 0; c < Image::kChannels; ++c) {
    for (Index k = 0; k < plane; ++k) pixels[c * plane + k] = static_cast<float>(p(c, k));
  }
  out.pattern = Image(h, w, std::move(pixels));
  out.l1_norm = out.mask.sum();
  out.target_class = target_class;
  out.final_loss = last_loss;
  out.final_attack_rate = last_rate;
  return out;
}

/// Same search on an encoder + classifier pipeline.
template <typename Scalar>
ReversedTrigger reverse_engineer_trigger(const Classifier<Scalar>& clf, const Encoder<Scalar>& enc, int target_class,
                                         const LabeledDataset& clean, int steps, double sparsity_weight,
                                         const ReverseConfig& cfg = {}) {
  PipelineHandle<Scalar> handle(enc, clf);
  return reverse_engineer_trigger(handle, target_class, clean, steps, sparsity_weight, cfg);
}

struct AnomalyResult {
  double index = 0.0;  // +infinity when degenerate
  bool degenerate = false;
  double median = 0.0;
  double mad = 0.0;
  double min_norm = 0.0;
  std::size_t flagged_class = 0;  // position of the smallest norm
};

inline constexpr double kMadConsistency = 1.4826;
inline constexpr double kAnomalyThreshold = 2.0;

/// |min - median| / (1.4826 * MAD) over per-class reversed-trigger norms. A
/// zero MAD yields +infinity with `degenerate` set.
AnomalyResult anomaly_index(std::span<const double> l1_norms);

// ---------------------------------------------------------------------------
// Meta neural trojan detection

/// Jointly tuned query images plus a logistic head on the concatenated
/// softmax outputs of a model on those queries.
struct MetaClassifier {
  Eigen::MatrixXd query_raw;  // (3, Q*H*W) pre-sigmoid query pixels
  Index query_count = 0;
  Index height = 0;
  Index width = 0;
  int outputs = 0;
  Eigen::VectorXd weights;  // length Q * outputs
  double bias = 0.0;

  std::vector<Image> queries() const;
};

struct MntdResult {
  MetaClassifier meta;
  double train_accuracy = 0.0;
  std::vector<double> epoch_loss;
};

namespace detail {

template <typename Scalar>
nn::FeatureMap<Scalar> query_map(const MetaClassifier& meta) {
  const Eigen::MatrixXd q = (1.0 / (1.0 + (-meta.query_raw.array()).exp())).matrix();
  return {q.cast<Scalar>(), meta.query_count, meta.height, meta.width};
}

/// Column-wise softmax.
inline Eigen::MatrixXd softmax_columns(const Eigen::MatrixXd& z) {
  Eigen::MatrixXd out(z.rows(), z.cols());
  for (Index j = 0; j < z.cols(); ++j) {
    const Eigen::ArrayXd e = (z.col(j).array() - z.col(j).maxCoeff()).exp();
    out.col(j) = (e / e.sum()).matrix();
  }
  return out;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace detail

/// Backdoor probability of `model` under the meta-classifier; > 0.5 means
/// backdoored.
template <typename Scalar>
double mntd_score(const MetaClassifier& meta, ModelHandle<Scalar>& model) {
  require(model.num_outputs() == meta.outputs, "model output count does not match the meta-classifier");
  model.check_images(meta.height, meta.width);
  const Eigen::MatrixXd probs = detail::softmax_columns(model.forward(detail::query_map<Scalar>(meta)).template cast<double>());
  return detail::sigmoid(meta.weights.dot(probs.reshaped()) + meta.bias);
}

struct MntdConfig {
  Index query_count = 8;
  int epochs = 300;
  double learning_rate = 0.05;
  std::uint64_t seed = 0;
};

/// Trains the logistic head and the query images together (binary
/// cross-entropy, Adam, full batch) to separate clean shadow models (label 0)
/// from backdoored ones (label 1).
template <typename Scalar>
MntdResult mntd_train(std::span<ModelHandle<Scalar>* const> clean, std::span<ModelHandle<Scalar>* const> backdoored,
                      const MntdConfig& cfg) {
  require(clean.size() >= 2 && backdoored.size() >= 2, "meta-classifier needs at least 2 shadow models per class");
  require(cfg.query_count >= 1, "meta-classifier needs at least one query");
  require(cfg.epochs >= 1, "meta-classifier needs at least one epoch");
  ModelHandle<Scalar>& first = *clean.front();
  MetaClassifier meta;
  meta.query_count = cfg.query_count;
  meta.height = first.input_height();
  meta.width = first.input_width();
  meta.outputs = first.num_outputs();
  std::vector<std::pair<ModelHandle<Scalar>*, double>> models;
  for (auto* m : clean) models.emplace_back(m, 0.0);
  for (auto* m : backdoored) models.emplace_back(m, 1.0);
  for (auto& [m, label] : models) {
    require(m->num_outputs() == meta.outputs, "shadow models disagree on the output count");
    m->check_images(meta.height, meta.width);
  }

  Rng rng(derive_seed(cfg.seed, stable_hash("mntd-init")));
  const Index plane = meta.height * meta.width;
  meta.query_raw.resize(Image::kChannels, cfg.query_count * plane);
  for (Index j = 0; j < meta.query_raw.cols(); ++j) {
    for (Index i = 0; i < meta.query_raw.rows(); ++i) meta.query_raw(i, j) = rng.normal();
  }
  const Index dim = cfg.query_count * meta.outputs;
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(dim, 1);
  Eigen::MatrixXd b = Eigen::MatrixXd::Zero(1, 1);
  for (Index i = 0; i < dim; ++i) w(i, 0) = 0.01 * rng.normal();
  Eigen::MatrixXd gw(dim, 1), gb(1, 1), gq(meta.query_raw.rows(), meta.query_raw.cols());
  std::vector<nn::ParamRef<double>> params{
      {"weights", &w, &gw, false}, {"bias", &b, &gb, false}, {"queries", &meta.query_raw, &gq, false}};
  nn::Adam<double> optimizer(cfg.learning_rate);

  MntdResult out;
  const auto count = static_cast<double>(models.size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    gw.setZero();
    gb.setZero();
    gq.setZero();
    const auto qmap = detail::query_map<Scalar>(meta);
    double loss = 0.0;
    for (auto& [model, label] : models) {
      const Eigen::MatrixXd probs = detail::softmax_columns(model->forward(qmap).template cast<double>());
      const double logit = w.col(0).dot(probs.reshaped()) + b(0, 0);
      const double s = detail::sigmoid(logit);
      // numerically stable binary cross-entropy on the logit
      loss += std::max(logit, 0.0) - logit * label + std::log1p(std::exp(-std::abs(logit)));
      const double dlogit = (s - label) / count;
      gw.col(0) += dlogit * probs.reshaped();
      gb(0, 0) += dlogit;
      // back through the softmax: dz = p * (g - p.g) per query
      const Eigen::MatrixXd gp = (dlogit * w).reshaped(probs.rows(), probs.cols());
      Eigen::MatrixXd gz(probs.rows(), probs.cols());
      for (Index j = 0; j < probs.cols(); ++j) {
        gz.col(j) = probs.col(j).cwiseProduct(gp.col(j)) - probs.col(j) * probs.col(j).dot(gp.col(j));
      }
      gq += model->backward_input(gz.cast<Scalar>()).template cast<double>();
    }
    const Eigen::ArrayXXd q = 1.0 / (1.0 + (-meta.query_raw.array()).exp());
    gq.array() *= q * (1.0 - q);
    loss /= count;
    if (!std::isfinite(loss)) throw DivergenceError("meta-classifier training diverged", epoch);
    out.epoch_loss.push_back(loss);
    optimizer.step(params);
  }
  meta.weights = w.col(0);
  meta.bias = b(0, 0);

  std::size_t correct = 0;
  for (auto& [model, label] : models) {
    const double s = mntd_score(meta, *model);
    if ((s > 0.5) == (label > 0.5)) ++correct;
  }
  out.train_accuracy = static_cast<double>(correct) / count;
  out.meta = std::move(meta);
  return out;
}

template <typename Scalar>
MntdResult mntd_train(std::span<ModelHandle<Scalar>* const> clean, std::span<ModelHandle<Scalar>* const> backdoored,
                      Index query_count, int epochs, std::uint64_t seed) {
  MntdConfig cfg;
  cfg.query_count = query_count;
  cfg.epochs = epochs;
  cfg.seed = seed;
  return mntd_train(clean, backdoored, cfg);
}

nlohmann::json to_json(const MetaClassifier& meta);
MetaClassifier meta_classifier_from_json(const nlohmann::json& j);

}  // namespace badenc

#endif  // BADENC_DEFENSES_HPP
