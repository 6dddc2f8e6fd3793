#ifndef BADENC_TESTS_SUPPORT_HPP
#define BADENC_TESTS_SUPPORT_HPP

#include "badenc/encoder.hpp"
#include "badenc/image.hpp"
#include "badenc/rng.hpp"

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <unistd.h>

namespace testing {

using badenc::Image;
using badenc::Index;

inline Image random_image(Index h, Index w, std::uint64_t seed) {
  badenc::Rng rng(seed);
  Image img(h, w);
  for (Index i = 0; i < img.size(); ++i) img.pixels()[i] = static_cast<float>(rng.uniform());
  return img;
}

inline std::vector<Image> random_images(std::size_t n, Index h, Index w, std::uint64_t seed) {
  std::vector<Image> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(random_image(h, w, seed * 1000 + i));
  return out;
}

/// Plain loop cosine.
inline double scalar_cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

/// Feature of one image through the single-image path, as a plain vector.
template <typename Scalar>
std::vector<double> feature_of(const badenc::Encoder<Scalar>& enc, const Image& x) {
  const auto f = badenc::encode(enc, x);
  return std::vector<double>(f.data(), f.data() + f.size());
}

/// |a - b| / max(|a|, |b|, floor)
inline double relative_error(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Central differences of `loss` with respect to every parameter of `net`.
template <typename Net>
Eigen::VectorXd numeric_gradient(Net& net, const std::function<double()>& loss, double step = 1e-5) {
  Eigen::VectorXd theta = badenc::nn::flatten_parameters(net);
  Eigen::VectorXd g(theta.size());
  for (Index i = 0; i < theta.size(); ++i) {
    const double keep = theta[i];
    theta[i] = keep + step;
    badenc::nn::assign_parameters(net, theta);
    const double up = loss();
    theta[i] = keep - step;
    badenc::nn::assign_parameters(net, theta);
    const double down = loss();
    theta[i] = keep;
    g[i] = (up - down) / (2 * step);
  }
  badenc::nn::assign_parameters(net, theta);
  return g;
}

/// Largest per-coordinate relative error, with a floor scaled to the gradient size.
inline double max_relative_error(const Eigen::VectorXd& analytic, const Eigen::VectorXd& numeric) {
  const double floor = 1e-6 * std::max(1.0, numeric.cwiseAbs().maxCoeff());
  double worst = 0;
  for (Index i = 0; i < analytic.size(); ++i) worst = std::max(worst, relative_error(analytic[i], numeric[i], floor));
  return worst;
}

/// One-vs-all least-squares linear classifier; returns held-out accuracy.
inline double least_squares_probe(const Eigen::MatrixXd& train_x, const std::vector<int>& train_y,
                                  const Eigen::MatrixXd& test_x, const std::vector<int>& test_y, int classes) {
  const Index d = train_x.rows();
  Eigen::MatrixXd a(train_x.cols(), d + 1);
  a.leftCols(d) = train_x.transpose();
  a.col(d).setOnes();
  Eigen::MatrixXd t = Eigen::MatrixXd::Constant(train_x.cols(), classes, -1.0);
  for (std::size_t i = 0; i < train_y.size(); ++i) t(static_cast<Index>(i), train_y[i]) = 1.0;
  const Eigen::MatrixXd reg = 1e-3 * Eigen::MatrixXd::Identity(d + 1, d + 1);
  const Eigen::MatrixXd w = (a.transpose() * a + reg).ldlt().solve(a.transpose() * t);
  int hits = 0;
  for (Index j = 0; j < test_x.cols(); ++j) {
    Eigen::VectorXd row(d + 1);
    row.head(d) = test_x.col(j);
    row[d] = 1.0;
    Eigen::VectorXd scores = w.transpose() * row;
    Index best = 0;
    scores.maxCoeff(&best);
    hits += static_cast<int>(best) == test_y[static_cast<std::size_t>(j)] ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(test_x.cols());
}

/// Scratch directory removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& name)
      : path(std::filesystem::temp_directory_path() / ("badenc-test-" + name + "-" + std::to_string(::getpid()))) {
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace testing

#endif  // BADENC_TESTS_SUPPORT_HPP
