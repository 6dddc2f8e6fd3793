#ifndef BADENC_NN_OPTIM_HPP
#define BADENC_NN_OPTIM_HPP

#include "badenc/nn/layers.hpp"

#include <cmath>
#include <vector>

namespace badenc::nn {

/// theta <- theta - lr * grad
template <typename Scalar>
class Sgd {
 public:
  explicit Sgd(double lr) : lr_(lr) {}

  void step(const std::vector<ParamRef<Scalar>>& params) {
    for (const auto& p : params) *p.value -= Scalar(lr_) * *p.grad;
  }

 private:
  double lr_;
};

/// Adaptive moment estimation with the usual bias correction. Moment buffers
/// are matched to parameters by position, so step() must always receive the
/// same parameter list.
template <typename Scalar>
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const std::vector<ParamRef<Scalar>>& params) {
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.push_back(Matrix<Scalar>::Zero(p.value->rows(), p.value->cols()));
        v_.push_back(Matrix<Scalar>::Zero(p.value->rows(), p.value->cols()));
      }
    }
    require(m_.size() == params.size(), "optimizer parameter list changed between steps");
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    const auto step = static_cast<Scalar>(lr_ * std::sqrt(c2) / c1);
    for (std::size_t i = 0; i < params.size(); ++i) {
      const Matrix<Scalar>& g = *params[i].grad;
      m_[i] = Scalar(beta1_) * m_[i] + Scalar(1 - beta1_) * g;
      v_[i] = Scalar(beta2_) * v_[i] + Scalar(1 - beta2_) * g.cwiseAbs2();
      params[i].value->array() -=
          step * m_[i].array() / (v_[i].array().sqrt() + static_cast<Scalar>(eps_ * std::sqrt(c2)));
    }
  }

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<Matrix<Scalar>> m_, v_;
};

}  // namespace badenc::nn

#endif  // BADENC_NN_OPTIM_HPP
