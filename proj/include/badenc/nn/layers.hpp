#ifndef BADENC_NN_LAYERS_HPP
#define BADENC_NN_LAYERS_HPP

#include "badenc/core.hpp"
#include "badenc/rng.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace badenc::nn {

enum class Mode { Train, Inference };

/// Activations for a batch. Rows are channels; column (b*H + y)*W + x holds
/// spatial position (y, x) of sample b. Vectors are the H = W = 1 case, so a
/// batch of feature vectors is a plain channels x batch matrix.
template <typename Scalar>
struct FeatureMap {
  Matrix<Scalar> values;
  Index batch = 0;
  Index height = 1;
  Index width = 1;

  Index channels() const { return values.rows(); }
  Index plane() const { return height * width; }
};

/// Named view onto one trainable tensor and its gradient accumulator.
template <typename Scalar>
struct ParamRef {
  std::string name;
  Matrix<Scalar>* value;
  Matrix<Scalar>* grad;
  bool normalization;
};

template <typename Scalar>
struct TensorRef {
  std::string name;
  Matrix<Scalar>* value;
};

inline constexpr Index kProductBlock = 64;

/// out = lhs * rhs evaluated in zero-padded blocks of kProductBlock columns.
/// Each column then goes through a product of identical shape, which makes the
/// result for one sample independent of the rest of the batch.
template <typename Scalar>
void blocked_product(const Matrix<Scalar>& lhs, const Matrix<Scalar>& rhs, Matrix<Scalar>& out) {
  out.resize(lhs.rows(), rhs.cols());
  Matrix<Scalar> padded;
  Matrix<Scalar> tmp;
  for (Index c0 = 0; c0 < rhs.cols(); c0 += kProductBlock) {
    const Index n = std::min(kProductBlock, rhs.cols() - c0);
    if (n == kProductBlock) {
      out.middleCols(c0, n).noalias() = lhs * rhs.middleCols(c0, n);
    } else {
      padded.setZero(rhs.rows(), kProductBlock);
      padded.leftCols(n) = rhs.middleCols(c0, n);
      tmp.noalias() = lhs * padded;
      out.middleCols(c0, n) = tmp.leftCols(n);
    }
  }
}

template <typename Scalar>
void he_init(Matrix<Scalar>& w, Index fan_in, Rng& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (Index j = 0; j < w.cols(); ++j) {
    for (Index i = 0; i < w.rows(); ++i) w(i, j) = static_cast<Scalar>(stddev * rng.normal());
  }
}

/// Square-kernel 2-D convolution lowered to a matrix product via im2col.
template <typename Scalar>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(Index in_channels, Index out_channels, Index kernel, Index stride, Index padding)
      : in_(in_channels), out_(out_channels), k_(kernel), stride_(stride), pad_(padding) {
    weight_ = Matrix<Scalar>::Zero(out_, in_ * k_ * k_);
    bias_ = Matrix<Scalar>::Zero(out_, 1);
    grad_weight_ = Matrix<Scalar>::Zero(weight_.rows(), weight_.cols());
    grad_bias_ = Matrix<Scalar>::Zero(out_, 1);
  }

  void init(Rng& rng) {
    he_init(weight_, in_ * k_ * k_, rng);
    bias_.setZero();
  }

  Index out_size(Index n) const { return (n + 2 * pad_ - k_) / stride_ + 1; }

  FeatureMap<Scalar> forward(const FeatureMap<Scalar>& x, Mode) {
    input_shape_ = x;
    input_shape_.values.resize(0, 0);
    im2col(x, cols_);
    return apply_cols(x, cols_);
  }

  FeatureMap<Scalar> infer(const FeatureMap<Scalar>& x) const {
    Matrix<Scalar> cols;
    im2col(x, cols);
    return apply_cols(x, cols);
  }

  Matrix<Scalar> backward(const Matrix<Scalar>& grad_out) {
    grad_weight_.noalias() += grad_out * cols_.transpose();
    grad_bias_ += grad_out.rowwise().sum();
    const Matrix<Scalar> grad_cols = weight_.transpose() * grad_out;
    return col2im(grad_cols);
  }

  template <typename F>
  void visit_params(const std::string& prefix, F&& f) {
    f(ParamRef<Scalar>{prefix + "weight", &weight_, &grad_weight_, false});
    f(ParamRef<Scalar>{prefix + "bias", &bias_, &grad_bias_, false});
  }

  template <typename F>
  void visit_buffers(const std::string&, F&&) {}

 private:
  void im2col(const FeatureMap<Scalar>& x, Matrix<Scalar>& cols) const {
    require(x.channels() == in_, "convolution expects " + std::to_string(in_) + " input channels");
    const Index ho = out_size(x.height);
    const Index wo = out_size(x.width);
    cols.setZero(in_ * k_ * k_, x.batch * ho * wo);
    for (Index b = 0; b < x.batch; ++b) {
      for (Index oy = 0; oy < ho; ++oy) {
        for (Index ox = 0; ox < wo; ++ox) {
          const Index col = (b * ho + oy) * wo + ox;
          for (Index ky = 0; ky < k_; ++ky) {
            const Index iy = oy * stride_ - pad_ + ky;
            if (iy < 0 || iy >= x.height) continue;
            for (Index kx = 0; kx < k_; ++kx) {
              const Index ix = ox * stride_ - pad_ + kx;
              if (ix < 0 || ix >= x.width) continue;
              const Index src = (b * x.height + iy) * x.width + ix;
              for (Index c = 0; c < in_; ++c) cols((c * k_ + ky) * k_ + kx, col) = x.values(c, src);
            }
          }
        }
      }
    }
  }

  Matrix<Scalar> col2im(const Matrix<Scalar>& grad_cols) const {
    const FeatureMap<Scalar>& s = input_shape_;
    const Index ho = out_size(s.height);
    const Index wo = out_size(s.width);
    Matrix<Scalar> dx = Matrix<Scalar>::Zero(in_, s.batch * s.height * s.width);
    for (Index b = 0; b < s.batch; ++b) {
      for (Index oy = 0; oy < ho; ++oy) {
        for (Index ox = 0; ox < wo; ++ox) {
          const Index col = (b * ho + oy) * wo + ox;
          for (Index ky = 0; ky < k_; ++ky) {
            const Index iy = oy * stride_ - pad_ + ky;
            if (iy < 0 || iy >= s.height) continue;
            for (Index kx = 0; kx < k_; ++kx) {
              const Index ix = ox * stride_ - pad_ + kx;
              if (ix < 0 || ix >= s.width) continue;
              const Index dst = (b * s.height + iy) * s.width + ix;
              for (Index c = 0; c < in_; ++c) dx(c, dst) += grad_cols((c * k_ + ky) * k_ + kx, col);
            }
          }
        }
      }
    }
    return dx;
  }

  FeatureMap<Scalar> apply_cols(const FeatureMap<Scalar>& x, const Matrix<Scalar>& cols) const {
    FeatureMap<Scalar> y;
    y.batch = x.batch;
    y.height = out_size(x.height);
    y.width = out_size(x.width);
    blocked_product(weight_, cols, y.values);
    y.values.colwise() += bias_.col(0);
    return y;
  }

  Index in_ = 0, out_ = 0, k_ = 1, stride_ = 1, pad_ = 0;
  Matrix<Scalar> weight_, bias_, grad_weight_, grad_bias_;
  Matrix<Scalar> cols_;
  FeatureMap<Scalar> input_shape_;
};

/// Per-channel batch normalisation. Train mode normalises with batch
/// statistics and updates the running averages; inference mode uses the
/// running averages and is a fixed affine map.
template <typename Scalar>
class BatchNorm {
 public:
  static constexpr double kMomentum = 0.1;
  static constexpr double kEpsilon = 1e-5;

  BatchNorm() = default;
  explicit BatchNorm(Index channels)
      : gamma_(Matrix<Scalar>::Ones(channels, 1)),
        beta_(Matrix<Scalar>::Zero(channels, 1)),
        grad_gamma_(Matrix<Scalar>::Zero(channels, 1)),
        grad_beta_(Matrix<Scalar>::Zero(channels, 1)),
        running_mean_(Matrix<Scalar>::Zero(channels, 1)),
        running_var_(Matrix<Scalar>::Ones(channels, 1)) {}

  void init(Rng&) {}

  FeatureMap<Scalar> forward(const FeatureMap<Scalar>& x, Mode mode) {
    require(x.channels() == gamma_.rows(), "batch norm channel mismatch");
    mode_ = mode;
    const Index m = x.values.cols();
    if (mode == Mode::Inference) {
      inv_std_ = (running_var_.array() + Scalar(kEpsilon)).rsqrt().matrix();
      xhat_ = (x.values.colwise() - running_mean_.col(0)).array().colwise() * inv_std_.col(0).array();
    } else {
      require(m > 1, "batch norm in train mode needs more than one value per channel");
      const Vector<Scalar> mean = x.values.rowwise().mean();
      Matrix<Scalar> centered = x.values.colwise() - mean;
      const Vector<Scalar> var = centered.array().square().rowwise().mean();
      inv_std_ = (var.array() + Scalar(kEpsilon)).rsqrt().matrix();
      xhat_ = centered.array().colwise() * inv_std_.col(0).array();
      const auto unbiased = var * (static_cast<Scalar>(m) / static_cast<Scalar>(m - 1));
      running_mean_ = Scalar(1 - kMomentum) * running_mean_ + Scalar(kMomentum) * mean;
      running_var_ = Scalar(1 - kMomentum) * running_var_ + Scalar(kMomentum) * unbiased;
    }
    FeatureMap<Scalar> y{affine(xhat_), x.batch, x.height, x.width};
    return y;
  }

  FeatureMap<Scalar> infer(const FeatureMap<Scalar>& x) const {
    require(x.channels() == gamma_.rows(), "batch norm channel mismatch");
    const Vector<Scalar> inv = (running_var_.array() + Scalar(kEpsilon)).rsqrt();
    const Matrix<Scalar> xhat = (x.values.colwise() - running_mean_.col(0)).array().colwise() * inv.array();
    return {affine(xhat), x.batch, x.height, x.width};
  }

  Matrix<Scalar> backward(const Matrix<Scalar>& grad_out) {
    grad_gamma_ += (grad_out.array() * xhat_.array()).rowwise().sum().matrix();
    grad_beta_ += grad_out.rowwise().sum();
    const Matrix<Scalar> dxhat = grad_out.array().colwise() * gamma_.col(0).array();
    Matrix<Scalar> dx;
    if (mode_ == Mode::Inference) {
      dx = dxhat.array().colwise() * inv_std_.col(0).array();
    } else {
      const auto m = static_cast<Scalar>(dxhat.cols());
      const Vector<Scalar> sum_d = dxhat.rowwise().sum();
      const Vector<Scalar> sum_dx = (dxhat.array() * xhat_.array()).rowwise().sum();
      dx = (m * dxhat.array() - xhat_.array().colwise() * sum_dx.array()).colwise() - sum_d.array();
      dx = dx.array().colwise() * (inv_std_.col(0).array() / m);
    }
    return dx;
  }

  template <typename F>
  void visit_params(const std::string& prefix, F&& f) {
    f(ParamRef<Scalar>{prefix + "gamma", &gamma_, &grad_gamma_, true});
    f(ParamRef<Scalar>{prefix + "beta", &beta_, &grad_beta_, true});
  }

  template <typename F>
  void visit_buffers(const std::string& prefix, F&& f) {
    f(TensorRef<Scalar>{prefix + "running_mean", &running_mean_});
    f(TensorRef<Scalar>{prefix + "running_var", &running_var_});
  }

 private:
  Matrix<Scalar> affine(const Matrix<Scalar>& xhat) const {
    Matrix<Scalar> y = xhat.array().colwise() * gamma_.col(0).array();
    y.colwise() += beta_.col(0);
    return y;
  }

  Matrix<Scalar> gamma_, beta_, grad_gamma_, grad_beta_, running_mean_, running_var_;
  Matrix<Scalar> xhat_, inv_std_;
  Mode mode_ = Mode::Inference;
};

template <typename Scalar>
class Relu {
 public:
  void init(Rng&) {}

  FeatureMap<Scalar> forward(const FeatureMap<Scalar>& x, Mode) {
    active_ = (x.values.array() > Scalar(0)).template cast<Scalar>();
    return infer(x);
  }

  FeatureMap<Scalar> infer(const FeatureMap<Scalar>& x) const {
    return {x.values.cwiseMax(Scalar(0)), x.batch, x.height, x.width};
  }

  Matrix<Scalar> backward(const Matrix<Scalar>& grad_out) {
    return grad_out.cwiseProduct(active_);
  }

  template <typename F>
  void visit_params(const std::string&, F&&) {}
  template <typename F>
  void visit_buffers(const std::string&, F&&) {}

 private:
  Matrix<Scalar> active_;
};

/// (C, B*H*W) -> (C*H*W, B); row (c*H + y)*W + x, i.e. image-planar order.
template <typename Scalar>
class Flatten {
 public:
  void init(Rng&) {}

  FeatureMap<Scalar> forward(const FeatureMap<Scalar>& x, Mode) {
    shape_ = {Matrix<Scalar>(), x.batch, x.height, x.width};
    channels_ = x.channels();
    return infer(x);
  }

  FeatureMap<Scalar> infer(const FeatureMap<Scalar>& x) const {
    const Index plane = x.plane();
    FeatureMap<Scalar> y{Matrix<Scalar>(x.channels() * plane, x.batch), x.batch, 1, 1};
    for (Index b = 0; b < x.batch; ++b) {
      for (Index c = 0; c < x.channels(); ++c) {
        y.values.col(b).segment(c * plane, plane) = x.values.row(c).segment(b * plane, plane).transpose();
      }
    }
    return y;
  }

  Matrix<Scalar> backward(const Matrix<Scalar>& grad_out) {
    const Index plane = shape_.height * shape_.width;
    Matrix<Scalar> dx(channels_, shape_.batch * plane);
    for (Index b = 0; b < shape_.batch; ++b) {
      for (Index c = 0; c < channels_; ++c) {
        dx.row(c).segment(b * plane, plane) = grad_out.col(b).segment(c * plane, plane).transpose();
      }
    }
    return dx;
  }

  template <typename F>
  void visit_params(const std::string&, F&&) {}
  template <typename F>
  void visit_buffers(const std::string&, F&&) {}

 private:
  FeatureMap<Scalar> shape_;
  Index channels_ = 0;
};

/// Fully connected layer on vectors (H = W = 1).
template <typename Scalar>
class Linear {
 public:
  Linear() = default;
  Linear(Index in_features, Index out_features)
      : weight_(Matrix<Scalar>::Zero(out_features, in_features)),
        bias_(Matrix<Scalar>::Zero(out_features, 1)),
        grad_weight_(Matrix<Scalar>::Zero(out_features, in_features)),
        grad_bias_(Matrix<Scalar>::Zero(out_features, 1)) {}

  void init(Rng& rng) {
    he_init(weight_, weight_.cols(), rng);
    bias_.setZero();
  }

  FeatureMap<Scalar> forward(const FeatureMap<Scalar>& x, Mode) {
    input_ = x.values;
    return infer(x);
  }

  FeatureMap<Scalar> infer(const FeatureMap<Scalar>& x) const {
    require(x.plane() == 1 && x.channels() == weight_.cols(),
            "linear layer expects " + std::to_string(weight_.cols()) + " input features");
    FeatureMap<Scalar> y{Matrix<Scalar>(), x.batch, 1, 1};
    blocked_product(weight_, x.values, y.values);
    y.values.colwise() += bias_.col(0);
    return y;
  }

  Matrix<Scalar> backward(const Matrix<Scalar>& grad_out) {
    grad_weight_.noalias() += grad_out * input_.transpose();
    grad_bias_ += grad_out.rowwise().sum();
    return weight_.transpose() * grad_out;
  }

  template <typename F>
  void visit_params(const std::string& prefix, F&& f) {
    f(ParamRef<Scalar>{prefix + "weight", &weight_, &grad_weight_, false});
    f(ParamRef<Scalar>{prefix + "bias", &bias_, &grad_bias_, false});
  }

  template <typename F>
  void visit_buffers(const std::string&, F&&) {}

 private:
  Matrix<Scalar> weight_, bias_, grad_weight_, grad_bias_;
  Matrix<Scalar> input_;
};

}  // namespace badenc::nn

#endif  // BADENC_NN_LAYERS_HPP
