#ifndef BADENC_CONTRASTIVE_HPP
#define BADENC_CONTRASTIVE_HPP

#include "badenc/augment.hpp"
#include "badenc/encoder.hpp"
#include "badenc/nn/optim.hpp"
#include "badenc/rng.hpp"

#include <cmath>
#include <functional>
#include <span>
#include <vector>

namespace badenc {

struct SimCLRConfig {
  double temperature = 0.5;
  Index batch_size = 64;
  int epochs = 100;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  std::string architecture = "cnn3-w16";
  Index feature_dim = 128;
  Index latent_dim = 64;

  void validate() const {
    require(temperature > 0.0, "temperature must be positive");
    require(batch_size >= 1, "batch_size must be at least 1");
    require(epochs >= 1, "epochs must be at least 1");
    require(learning_rate > 0.0, "learning_rate must be positive");
    require(feature_dim > 0 && latent_dim > 0, "feature_dim and latent_dim must be positive");
  }
};

/// Value and gradient of the contrastive objective.
template <typename Scalar>
struct ContrastiveLoss {
  double value = 0.0;
  Matrix<Scalar> grad;  // same shape as the latents
};

namespace detail {

inline void check_pairing(std::span<const Index> partner, Index count) {
  require(count % 2 == 0 && count >= 2, "contrastive loss needs 2N latents");
  require(static_cast<Index>(partner.size()) == count, "pairing must cover every latent");
  for (Index i = 0; i < count; ++i) {
    const Index j = partner[static_cast<std::size_t>(i)];
    require(j >= 0 && j < count && j != i && partner[static_cast<std::size_t>(j)] == i,
            "pairing must be a perfect matching of the latents");
  }
}

}  // namespace detail

/// Sum over every ordered positive pair (i, j) of
///   -log( exp(sim(z_i, z_j)/tau) / sum_{k != i} exp(sim(z_i, z_k)/tau) ),
/// i.e. 2N terms for N pairs. `latents` holds one latent per column and
/// partner[i] is the index of the other view of sample i.
template <typename Scalar>
ContrastiveLoss<Scalar> nt_xent_with_grad(const Matrix<Scalar>& latents, std::span<const Index> partner,
                                          double temperature) {
  require(temperature > 0.0, "temperature must be positive");
  const Index n = latents.cols();
  detail::check_pairing(partner, n);
  const UnitColumns<Scalar> z(latents);
  const Matrix<Scalar> sim = z.unit.transpose() * z.unit;
  const auto inv_tau = static_cast<Scalar>(1.0 / temperature);

  Matrix<Scalar> grad_sim = Matrix<Scalar>::Zero(n, n);
  double total = 0.0;
  for (Index i = 0; i < n; ++i) {
    Scalar top = -std::numeric_limits<Scalar>::infinity();
    for (Index k = 0; k < n; ++k) {
      if (k != i) top = std::max(top, sim(i, k) * inv_tau);
    }
    Scalar denom = 0;
    for (Index k = 0; k < n; ++k) {
      if (k != i) denom += std::exp(sim(i, k) * inv_tau - top);
    }
    const Index j = partner[static_cast<std::size_t>(i)];
    total += static_cast<double>(std::log(denom) + top - sim(i, j) * inv_tau);
    for (Index k = 0; k < n; ++k) {
      if (k == i) continue;
      const Scalar p = std::exp(sim(i, k) * inv_tau - top) / denom;
      grad_sim(i, k) = inv_tau * (p - (k == j ? Scalar(1) : Scalar(0)));
    }
  }
  const Matrix<Scalar> grad_unit = z.unit * (grad_sim + grad_sim.transpose());
  return {total, z.backprop(grad_unit)};
}

template <typename Scalar>
double nt_xent_loss(const Matrix<Scalar>& latents, std::span<const Index> partner, double temperature) {
  return nt_xent_with_grad(latents, partner, temperature).value;
}

/// Pairing for a batch laid out as [view-a of samples 0..N-1, view-b of 0..N-1].
inline std::vector<Index> split_halves_pairing(Index n) {
  std::vector<Index> partner(static_cast<std::size_t>(2 * n));
  for (Index i = 0; i < n; ++i) {
    partner[static_cast<std::size_t>(i)] = i + n;
    partner[static_cast<std::size_t>(i + n)] = i;
  }
  return partner;
}

template <typename Scalar>
struct PretrainResult {
  Encoder<Scalar> encoder;
  ProjectionHead<Scalar> head;
  /// Mean loss per ordered positive pair, one entry per epoch.
  std::vector<double> epoch_loss;
};

using EpochCallback = std::function<void(int epoch, double mean_loss)>;

/// SimCLR: two augmented views per image, encoder + projection head trained
/// jointly with Adam on the contrastive objective. Every epoch visits
/// floor(|data| / batch_size) shuffled batches.
template <typename Scalar>
PretrainResult<Scalar> pretrain_simclr(std::span<const Image> data, const SimCLRConfig& cfg,
                                       const AugmentationConfig& aug, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  aug.validate();
  require(static_cast<Index>(data.size()) >= cfg.batch_size, "pre-training set is smaller than one batch");
  const Index h = data.front().height();
  const Index w = data.front().width();

  PretrainResult<Scalar> out{
      make_encoder<Scalar>(cfg.architecture, h, w, cfg.feature_dim, derive_seed(cfg.seed, stable_hash("encoder-init"))),
      make_projection_head<Scalar>(cfg.feature_dim, cfg.latent_dim, derive_seed(cfg.seed, stable_hash("head-init"))),
      {}};
  check_input(out.encoder, data);

  nn::Adam<Scalar> optimizer(cfg.learning_rate);
  const auto partner = split_halves_pairing(cfg.batch_size);
  const std::size_t batches = data.size() / static_cast<std::size_t>(cfg.batch_size);
  const auto n = static_cast<std::size_t>(cfg.batch_size);
  std::vector<Image> views(2 * n);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng order_rng(derive_seed(cfg.seed, stable_hash("epoch-order"), epoch));
    const auto order = order_rng.permutation(data.size());
    double epoch_total = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t idx = order[b * n + i];
        views[i] = augment(data[idx], aug, derive_seed(cfg.seed, epoch, idx, 0));
        views[n + i] = augment(data[idx], aug, derive_seed(cfg.seed, epoch, idx, 1));
      }
      out.encoder.network.zero_grad();
      out.head.network.zero_grad();
      const auto features = out.encoder.network.forward(nn::to_feature_map<Scalar>(views), nn::Mode::Train);
      const auto latents = out.head.network.forward(features, nn::Mode::Train);
      const auto loss = nt_xent_with_grad<Scalar>(latents.values, partner, cfg.temperature);
      if (!std::isfinite(loss.value)) throw DivergenceError("contrastive loss is not finite", epoch);
      out.encoder.network.backward(out.head.network.backward(loss.grad));

      auto params = out.encoder.network.parameters();
      for (auto& p : out.head.network.parameters()) params.push_back(p);
      optimizer.step(params);
      epoch_total += loss.value / static_cast<double>(2 * n);
    }
    const double mean = epoch_total / static_cast<double>(batches);
    out.epoch_loss.push_back(mean);
    if (on_epoch) on_epoch(epoch, mean);
  }
  if (!nn::all_finite(out.encoder.network)) throw DivergenceError("encoder parameters are not finite", cfg.epochs);
  return out;
}

}  // namespace badenc

#endif  // BADENC_CONTRASTIVE_HPP
