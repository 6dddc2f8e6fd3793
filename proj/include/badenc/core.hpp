#ifndef BADENC_CORE_HPP
#define BADENC_CORE_HPP

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace badenc {

using Index = Eigen::Index;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Precision used by the training pipeline. Gradient checks instantiate the
/// same templates with double.
using Real = float;

// Error taxonomy. Every failure the toolkit reports derives from Error so the
// CLI can map it onto an exit code.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ArgumentError : Error {
  using Error::Error;
};

/// Malformed or corrupt on-disk data.
struct FormatError : Error {
  using Error::Error;
};

/// A zero-norm vector reached a cosine similarity.
struct DegenerateError : Error {
  using Error::Error;
};

struct DivergenceError : Error {
  DivergenceError(const std::string& what, long step)
      : Error(what + " (at " + std::to_string(step) + ")"), step(step) {}
  long step;
};

struct IntegrityError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct StageError : Error {
  using Error::Error;
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw ArgumentError(message);
}

}  // namespace badenc

#endif  // BADENC_CORE_HPP
