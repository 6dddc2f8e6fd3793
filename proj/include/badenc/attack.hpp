#ifndef BADENC_ATTACK_HPP
#define BADENC_ATTACK_HPP

#include "badenc/augment.hpp"
#include "badenc/encoder.hpp"
#include "badenc/nn/optim.hpp"
#include "badenc/rng.hpp"
#include "badenc/trigger.hpp"

#include <cmath>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace badenc {

struct ReferenceSet {
  std::vector<Image> inputs;

  std::size_t count() const { return inputs.size(); }
};

/// One (target downstream task, target class) pair with its trigger and
/// reference inputs.
struct TargetPair {
  std::string task_id;
  int target_class = 0;
  Trigger trigger;
  ReferenceSet references;
};

struct AttackSpec {
  std::vector<TargetPair> pairs;
  ShadowDataset shadow;

  std::size_t total_references() const {
    std::size_t r = 0;
    for (const auto& p : pairs) r += p.references.count();
    return r;
  }

  /// Throws ArgumentError unless there is at least one pair, every pair has a
  /// reference, the shadow set is non-empty and all shapes match height x width.
  void validate(Index height, Index width) const;

  /// The pair checks alone; the loss ops take their batch separately.
  void validate_pairs(Index height, Index width) const;
};

enum class AttackOptimizer { GradientDescent, Adam };

struct AttackConfig {
  double lambda1 = 1.0;
  double lambda2 = 1.0;
  double learning_rate = 1e-3;
  Index batch_size = 64;
  int max_epoch = 50;
  bool freeze_batchnorm = true;
  bool augment_references = true;
  std::uint64_t seed = 0;
  AttackOptimizer optimizer = AttackOptimizer::GradientDescent;
  /// Ablation switch. A dropped effectiveness term is not evaluated and is
  /// logged as 0 so the breakdown identity still holds.
  bool include_l0 = true;
  AugmentationConfig reference_augmentation{};

  void validate() const;
};

struct LossBreakdown {
  double l0 = 0.0;
  double l1 = 0.0;
  double l2 = 0.0;
  double total = 0.0;
};

/// Weights applied to the three terms when forming the differentiated loss.
struct TermWeights {
  double l0 = 1.0;
  double l1 = 1.0;
  double l2 = 1.0;
};

inline TermWeights term_weights(const AttackConfig& cfg) {
  return {cfg.include_l0 ? 1.0 : 0.0, cfg.lambda1, cfg.lambda2};
}

template <typename Scalar>
void require_same_architecture(const Encoder<Scalar>& a, const Encoder<Scalar>& b) {
  require(a.architecture == b.architecture && a.feature_dim == b.feature_dim && a.input_height == b.input_height &&
              a.input_width == b.input_width,
          "encoders do not share an architecture");
}

namespace detail {

/// Sum over columns of a of cos(a_col, b_col), the two matrices paired column by column.
template <typename Scalar>
double paired_cosine_sum(const Matrix<Scalar>& a, const Matrix<Scalar>& b) {
  const UnitColumns<Scalar> ua(a);
  const UnitColumns<Scalar> ub(b);
  double s = 0.0;
  for (Index j = 0; j < a.cols(); ++j) s += static_cast<double>(ua.unit.col(j).dot(ub.unit.col(j)));
  return s;
}

}  // namespace detail

/// L0 = -(sum_i sum_j sum_x s(f'(x + e_i), f'(x_ij))) / (|batch| * sum_i r_i)
template <typename Scalar>
double effectiveness_loss_L0(const Encoder<Scalar>& f_prime, std::span<const Image> shadow_batch, const AttackSpec& spec) {
  require(!shadow_batch.empty(), "empty shadow batch");
  spec.validate_pairs(f_prime.input_height, f_prime.input_width);
  check_input(f_prime, shadow_batch);
  double sum = 0.0;
  for (const auto& pair : spec.pairs) {
    std::vector<Image> triggered;
    triggered.reserve(shadow_batch.size());
    for (const Image& x : shadow_batch) triggered.push_back(embed_trigger(x, pair.trigger));
    const UnitColumns<Scalar> trig(encode(f_prime, std::span<const Image>(triggered)));
    const UnitColumns<Scalar> refs(encode(f_prime, std::span<const Image>(pair.references.inputs)));
    // sum over x and j of u_x . w_j = (sum_x u_x) . (sum_j w_j)
    const Vector<Scalar> su = trig.unit.rowwise().sum();
    const Vector<Scalar> sw = refs.unit.rowwise().sum();
    sum += static_cast<double>(su.dot(sw));
  }
  return -sum / (static_cast<double>(shadow_batch.size()) * static_cast<double>(spec.total_references()));
}

/// View of reference j of pair i used by L1: augmented with a seed derived from
/// (seed, i, j) when augmenting, the reference itself otherwise.
inline Image reference_view(const Image& x, const AugmentationConfig& aug, bool augment_view, std::uint64_t seed,
                            std::size_t pair, std::size_t j) {
  return augment_view ? augment(x, aug, derive_seed(seed, pair, j)) : x;
}

/// L1 = -(sum_i sum_j s(f'(view(x_ij)), f(x_ij))) / sum_i r_i
template <typename Scalar>
double reference_alignment_loss_L1(const Encoder<Scalar>& f_prime, const Encoder<Scalar>& f_clean,
                                   const AttackSpec& spec, bool augment_view, std::uint64_t seed,
                                   const AugmentationConfig& aug = {}) {
  require_same_architecture(f_prime, f_clean);
  spec.validate_pairs(f_prime.input_height, f_prime.input_width);
  double sum = 0.0;
  for (std::size_t i = 0; i < spec.pairs.size(); ++i) {
    const auto& refs = spec.pairs[i].references.inputs;
    std::vector<Image> views;
    for (std::size_t j = 0; j < refs.size(); ++j) views.push_back(reference_view(refs[j], aug, augment_view, seed, i, j));
    sum += detail::paired_cosine_sum<Scalar>(encode(f_prime, std::span<const Image>(views)),
                                             encode(f_clean, std::span<const Image>(refs)));
  }
  return -sum / static_cast<double>(spec.total_references());
}

/// L2 = -(1/|batch|) sum_x s(f'(x), f(x))
template <typename Scalar>
double utility_loss_L2(const Encoder<Scalar>& f_prime, const Encoder<Scalar>& f_clean,
                       std::span<const Image> shadow_batch) {
  require_same_architecture(f_prime, f_clean);
  require(!shadow_batch.empty(), "empty shadow batch");
  return -detail::paired_cosine_sum<Scalar>(encode(f_prime, shadow_batch), encode(f_clean, shadow_batch)) /
         static_cast<double>(shadow_batch.size());
}

/// L = L0 + lambda1 * L1 + lambda2 * L2 evaluated with the component ops; L1's
/// reference views use `view_seed`.
template <typename Scalar>
LossBreakdown total_loss(const Encoder<Scalar>& f_prime, const Encoder<Scalar>& f_clean,
                         std::span<const Image> shadow_batch, const AttackSpec& spec, const AttackConfig& cfg,
                         std::uint64_t view_seed) {
  LossBreakdown out;
  out.l0 = cfg.include_l0 ? effectiveness_loss_L0(f_prime, shadow_batch, spec) : 0.0;
  out.l1 = reference_alignment_loss_L1(f_prime, f_clean, spec, cfg.augment_references, view_seed,
                                       cfg.reference_augmentation);
  out.l2 = utility_loss_L2(f_prime, f_clean, shadow_batch);
  out.total = out.l0 + cfg.lambda1 * out.l1 + cfg.lambda2 * out.l2;
  return out;
}

template <typename Scalar>
LossBreakdown total_loss(const Encoder<Scalar>& f_prime, const Encoder<Scalar>& f_clean,
                         std::span<const Image> shadow_batch, const AttackSpec& spec, const AttackConfig& cfg) {
  return total_loss(f_prime, f_clean, shadow_batch, spec, cfg, cfg.seed);
}

/// Differentiable evaluation of the attack objective. Everything f' sees in a
/// step goes through one forward pass laid out as
///   [batch + e_1 | ... | batch + e_t | batch | refs | augmented refs]
/// and one backward pass; the clean encoder's features enter as constants.
template <typename Scalar>
class AttackObjective {
 public:
  /// `clean_refs` holds f(x_ij) for the references of every pair, in order.
  AttackObjective(const AttackSpec& spec, Matrix<Scalar> clean_refs, const AttackConfig& cfg)
      : spec_(spec), clean_refs_(std::move(clean_refs)), cfg_(cfg) {
    require(clean_refs_.cols() == static_cast<Index>(spec.total_references()),
            "clean reference features do not match the reference count");
  }

  /// Computes the breakdown for one mini-batch and accumulates
  /// d(weights . (L0, L1, L2)) into f_prime's parameter gradients.
  LossBreakdown evaluate(Encoder<Scalar>& f_prime, std::span<const Image> batch, const Matrix<Scalar>& clean_batch,
                         std::uint64_t view_seed, const TermWeights& weights) const {
    require(!batch.empty(), "empty shadow batch");
    require(clean_batch.cols() == static_cast<Index>(batch.size()), "clean batch features do not match the batch");
    const auto bsz = static_cast<Index>(batch.size());
    const auto total_refs = static_cast<Index>(spec_.total_references());
    const bool with_l0 = cfg_.include_l0;
    const Index t = with_l0 ? static_cast<Index>(spec_.pairs.size()) : 0;

    std::vector<Image> inputs;
    inputs.reserve(static_cast<std::size_t>(t * bsz + bsz + 2 * total_refs));
    if (with_l0) {
      for (const auto& pair : spec_.pairs) {
        for (const Image& x : batch) inputs.push_back(embed_trigger(x, pair.trigger));
      }
    }
    inputs.insert(inputs.end(), batch.begin(), batch.end());
    const Index refs_at = static_cast<Index>(inputs.size());
    for (const auto& pair : spec_.pairs) {
      inputs.insert(inputs.end(), pair.references.inputs.begin(), pair.references.inputs.end());
    }
    Index views_at = refs_at;
    if (cfg_.augment_references) {
      views_at = static_cast<Index>(inputs.size());
      for (std::size_t i = 0; i < spec_.pairs.size(); ++i) {
        const auto& refs = spec_.pairs[i].references.inputs;
        for (std::size_t j = 0; j < refs.size(); ++j) {
          inputs.push_back(reference_view(refs[j], cfg_.reference_augmentation, true, view_seed, i, j));
        }
      }
    }

    const nn::Mode mode = cfg_.freeze_batchnorm ? nn::Mode::Inference : nn::Mode::Train;
    const auto features = f_prime.network.forward(nn::to_feature_map<Scalar>(inputs), mode).values;
    const UnitColumns<Scalar> unit(features);
    Matrix<Scalar> grad_unit = Matrix<Scalar>::Zero(features.rows(), features.cols());

    LossBreakdown out;
    // L0: each pair's triggered batch against the pair's own references.
    if (with_l0) {
      const double scale = 1.0 / (static_cast<double>(bsz) * static_cast<double>(total_refs));
      Index ref_offset = 0;
      double sum = 0.0;
      for (Index i = 0; i < t; ++i) {
        const auto r = static_cast<Index>(spec_.pairs[static_cast<std::size_t>(i)].references.count());
        const auto trig = unit.unit.middleCols(i * bsz, bsz);
        const auto refs = unit.unit.middleCols(refs_at + ref_offset, r);
        const Vector<Scalar> su = trig.rowwise().sum();
        const Vector<Scalar> sw = refs.rowwise().sum();
        sum += static_cast<double>(su.dot(sw));
        const auto g = static_cast<Scalar>(-weights.l0 * scale);
        grad_unit.middleCols(i * bsz, bsz).colwise() += g * sw;
        grad_unit.middleCols(refs_at + ref_offset, r).colwise() += g * su;
        ref_offset += r;
      }
      out.l0 = -sum * scale;
    }

    // L1: f'(view(x_ij)) against the constant f(x_ij).
    {
      const UnitColumns<Scalar> clean(clean_refs_);
      const auto views = unit.unit.middleCols(views_at, total_refs);
      out.l1 = -static_cast<double>(views.cwiseProduct(clean.unit).sum()) / static_cast<double>(total_refs);
      grad_unit.middleCols(views_at, total_refs) +=
          static_cast<Scalar>(-weights.l1 / static_cast<double>(total_refs)) * clean.unit;
    }

    // L2: f'(x) against the constant f(x).
    {
      const UnitColumns<Scalar> clean(clean_batch);
      const Index at = t * bsz;
      const auto mine = unit.unit.middleCols(at, bsz);
      out.l2 = -static_cast<double>(mine.cwiseProduct(clean.unit).sum()) / static_cast<double>(bsz);
      grad_unit.middleCols(at, bsz) += static_cast<Scalar>(-weights.l2 / static_cast<double>(bsz)) * clean.unit;
    }

    out.total = weights.l0 * out.l0 + weights.l1 * out.l1 + weights.l2 * out.l2;
    f_prime.network.backward(unit.backprop(grad_unit));
    return out;
  }

 private:
  const AttackSpec& spec_;
  Matrix<Scalar> clean_refs_;
  AttackConfig cfg_;
};

template <typename Scalar>
struct AttackResult {
  Encoder<Scalar> backdoored;
  /// Mean breakdown over the iterations of each epoch.
  std::vector<LossBreakdown> epoch_log;
};

using AttackEpochCallback = std::function<void(int epoch, const LossBreakdown&)>;

/// Seed for the mini-batch order of one epoch.
inline std::uint64_t minibatch_seed(std::uint64_t seed, int epoch) {
  return derive_seed(seed, stable_hash("minibatch"), epoch);
}

/// Seed for L1's reference views in one iteration.
inline std::uint64_t view_seed(std::uint64_t seed, int epoch, std::size_t iter) {
  return derive_seed(seed, stable_hash("reference-view"), epoch, iter);
}

/// Injects the backdoor: theta' starts as a copy of theta and takes
/// floor(|D_s| / bs) steps per epoch on shuffled, disjoint mini-batches. The
/// clean encoder is never modified. With freeze_batchnorm the normalisation
/// layers run on their stored statistics and their affine parameters are
/// excluded from the update.
template <typename Scalar>
AttackResult<Scalar> badencoder_finetune(const Encoder<Scalar>& clean, const AttackSpec& spec, const AttackConfig& cfg,
                                         const AttackEpochCallback& on_epoch = {}) {
  cfg.validate();
  spec.validate(clean.input_height, clean.input_width);
  require(static_cast<std::size_t>(cfg.batch_size) <= spec.shadow.size(),
          "batch size " + std::to_string(cfg.batch_size) + " exceeds the shadow dataset size " +
              std::to_string(spec.shadow.size()));

  AttackResult<Scalar> out{clean, {}};
  if (cfg.max_epoch == 0) return out;

  const std::span<const Image> shadow(spec.shadow.images);
  const Matrix<Scalar> clean_shadow = encode(clean, shadow);
  std::vector<Image> all_refs;
  for (const auto& pair : spec.pairs) {
    all_refs.insert(all_refs.end(), pair.references.inputs.begin(), pair.references.inputs.end());
  }
  const AttackObjective<Scalar> objective(spec, encode(clean, std::span<const Image>(all_refs)), cfg);
  const TermWeights weights = term_weights(cfg);

  std::vector<nn::ParamRef<Scalar>> params;
  for (auto& p : out.backdoored.network.parameters()) {
    if (!(cfg.freeze_batchnorm && p.normalization)) params.push_back(p);
  }
  nn::Sgd<Scalar> sgd(cfg.learning_rate);
  nn::Adam<Scalar> adam(cfg.learning_rate);

  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t iterations = spec.shadow.size() / bs;
  std::vector<Image> batch(bs);
  Matrix<Scalar> clean_batch(clean.feature_dim, cfg.batch_size);

  for (int epoch = 0; epoch < cfg.max_epoch; ++epoch) {
    Rng rng(minibatch_seed(cfg.seed, epoch));
    const auto order = rng.permutation(spec.shadow.size());
    LossBreakdown mean;
    for (std::size_t iter = 0; iter < iterations; ++iter) {
      for (std::size_t k = 0; k < bs; ++k) {
        const std::size_t idx = order[iter * bs + k];
        batch[k] = spec.shadow.images[idx];
        clean_batch.col(static_cast<Index>(k)) = clean_shadow.col(static_cast<Index>(idx));
      }
      out.backdoored.network.zero_grad();
      const LossBreakdown step = objective.evaluate(out.backdoored, batch, clean_batch, view_seed(cfg.seed, epoch, iter),
                                                    weights);
      if (!std::isfinite(step.total)) throw DivergenceError("attack loss is not finite", epoch);
      if (cfg.optimizer == AttackOptimizer::Adam) {
        adam.step(params);
      } else {
        sgd.step(params);
      }
      mean.l0 += step.l0;
      mean.l1 += step.l1;
      mean.l2 += step.l2;
      mean.total += step.total;
    }
    const auto n = static_cast<double>(iterations);
    mean = {mean.l0 / n, mean.l1 / n, mean.l2 / n, mean.total / n};
    out.epoch_log.push_back(mean);
    if (on_epoch) on_epoch(epoch, mean);
  }
  if (!nn::all_finite(out.backdoored.network)) {
    throw DivergenceError("backdoored encoder parameters are not finite", cfg.max_epoch);
  }
  return out;
}

/// One line per epoch: "epoch L0 L1 L2 L", whitespace separated, with a
/// leading '#' header line.
void write_loss_log(const std::vector<LossBreakdown>& log, const std::filesystem::path& path);
std::vector<LossBreakdown> read_loss_log(const std::filesystem::path& path);

}  // namespace badenc

#endif  // BADENC_ATTACK_HPP
