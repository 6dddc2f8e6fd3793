#include "badenc/attack.hpp"
#include "badenc/contrastive.hpp"
#include "badenc/datasets.hpp"
#include "oracles.hpp"
#include "support.hpp"

#include <doctest.h>

using namespace badenc;

namespace {

using Enc = Encoder<double>;

Enc toy(std::uint64_t seed, Index side = 4, Index fd = 4) { return make_encoder<double>("toy-cnn", side, side, fd, seed); }

/// Encoder whose parameters are those of `base` nudged by small noise, so f' != f.
Enc perturbed(const Enc& base, std::uint64_t seed, double scale = 0.05) {
  Enc e = base;
  Eigen::VectorXd theta = nn::flatten_parameters(e.network);
  Rng rng(seed);
  for (Index i = 0; i < theta.size(); ++i) theta[i] += scale * rng.normal();
  nn::assign_parameters(e.network, theta);
  return e;
}

/// toy-mlp with hand-set weights: parameters in order W1 (8 x 48), b1, W2 (fd x 8), b2.
Enc hand_mlp(const std::function<void(std::vector<nn::ParamRef<double>>&)>& set) {
  Enc e = make_encoder<double>("toy-mlp", 4, 4, 2, 0);
  auto params = e.network.parameters();
  for (auto& p : params) p.value->setZero();
  set(params);
  return e;
}

/// Hidden unit 0 fires on the red channel of pixel (3,3), unit 1 on its absence.
Enc trigger_detector(bool swap_outputs) {
  return hand_mlp([&](auto& p) {
    const Index red33 = 3 * 4 + 3;  // planar index of channel 0, pixel (3,3)
    (*p[0].value)(0, red33) = 1.0;
    (*p[0].value)(1, red33) = -1.0;
    (*p[1].value)(1, 0) = 1.0;
    (*p[2].value)(swap_outputs ? 1 : 0, 0) = 1.0;
    (*p[2].value)(swap_outputs ? 0 : 1, 1) = 1.0;
  });
}

Eigen::VectorXd objective_gradient(Enc& fp, const oracle::Fixture& fx, const Enc& f, const AttackConfig& cfg,
                                   std::uint64_t seed, const TermWeights& w, LossBreakdown* out = nullptr) {
  std::vector<Image> refs;
  for (const auto& p : fx.spec.pairs) refs.insert(refs.end(), p.references.inputs.begin(), p.references.inputs.end());
  const AttackObjective<double> obj(fx.spec, encode(f, std::span<const Image>(refs)), cfg);
  fp.network.zero_grad();
  const auto b = obj.evaluate(fp, fx.batch, encode(f, std::span<const Image>(fx.batch)), seed, w);
  if (out) *out = b;
  return nn::flatten_gradients(fp.network);
}

AttackConfig no_augmentation() {
  AttackConfig cfg;
  cfg.augment_references = false;
  return cfg;
}

}  // namespace

TEST_CASE("fixed points: f' = f without augmentation") {
  const auto fx = oracle::make_fixture(2, {2, 1}, 4, 1);
  const Enc f = toy(3);
  CHECK(reference_alignment_loss_L1(f, f, fx.spec, false, 0) == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(utility_loss_L2(f, f, std::span<const Image>(fx.batch)) == doctest::Approx(-1.0).epsilon(1e-12));
}

TEST_CASE("constant encoder: every cosine is one") {
  const Enc c = hand_mlp([](auto& p) { *p[3].value << 0.3, -2.0; });
  const auto fx = oracle::make_fixture(2, {1, 2}, 3, 2);
  CHECK(effectiveness_loss_L0(c, std::span<const Image>(fx.batch), fx.spec) == -1.0);
  const auto b = total_loss(c, c, std::span<const Image>(fx.batch), fx.spec, no_augmentation());
  CHECK(b.l0 == -1.0);
  CHECK(b.total == doctest::Approx(-3.0).epsilon(1e-12));
}

TEST_CASE("orthogonal features give zero") {
  const Enc detector = trigger_detector(false);
  oracle::Fixture fx;
  TargetPair p;
  p.trigger = Trigger::square(4, 4, Corner::BottomRight, 1, {1, 1, 1}, "px");
  p.references.inputs = {Image::filled(4, 4, 0.0f)};
  fx.spec.pairs.push_back(p);
  fx.batch = {Image::filled(4, 4, 0.0f), testing::random_image(4, 4, 3)};
  // triggered -> e0, reference -> e1
  CHECK(effectiveness_loss_L0(detector, std::span<const Image>(fx.batch), fx.spec) == 0.0);
  // f' sends the reference to e0 where f sends it to e1
  CHECK(reference_alignment_loss_L1(trigger_detector(true), detector, fx.spec, false, 0) == 0.0);
}

TEST_CASE("negated encoder gives L2 = +1") {
  const Enc f = toy(5);
  Enc neg = f;
  auto params = neg.network.parameters();
  *params[params.size() - 2].value *= -1.0;
  *params[params.size() - 1].value *= -1.0;
  const auto batch = testing::random_images(4, 4, 4, 6);
  CHECK(utility_loss_L2(neg, f, std::span<const Image>(batch)) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("losses match the scalar oracle") {
  const Enc f = toy(7);
  const Enc fp = perturbed(f, 8, 0.3);
  SUBCASE("t=1, r=1, batch 3") {
    const auto fx = oracle::make_fixture(1, {1}, 3, 3);
    CHECK(std::abs(effectiveness_loss_L0(fp, std::span<const Image>(fx.batch), fx.spec) - oracle::L0(fp, fx.batch, fx.spec)) <= 1e-9);
  }
  SUBCASE("t=2, r=(1,2), batch 4") {
    const auto fx = oracle::make_fixture(2, {1, 2}, 4, 4);
    CHECK(std::abs(effectiveness_loss_L0(fp, std::span<const Image>(fx.batch), fx.spec) - oracle::L0(fp, fx.batch, fx.spec)) <= 1e-9);
    CHECK(std::abs(reference_alignment_loss_L1(fp, f, fx.spec, false, 0) - oracle::L1(fp, f, fx.spec)) <= 1e-9);
    CHECK(std::abs(utility_loss_L2(fp, f, std::span<const Image>(fx.batch)) - oracle::L2(fp, f, fx.batch)) <= 1e-9);
  }
}

TEST_CASE("L1 with augmented views matches the oracle on the same views") {
  const Enc f = toy(9);
  const Enc fp = perturbed(f, 10, 0.3);
  const auto fx = oracle::make_fixture(2, {2, 2}, 2, 5);
  const AugmentationConfig aug;
  std::vector<std::vector<Image>> views(2);
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t j = 0; j < 2; ++j) views[i].push_back(reference_view(fx.spec.pairs[i].references.inputs[j], aug, true, 77, i, j));
  }
  CHECK(std::abs(reference_alignment_loss_L1(fp, f, fx.spec, true, 77, aug) - oracle::L1(fp, f, fx.spec, &views)) <= 1e-9);
  CHECK_FALSE(views[0][0] == fx.spec.pairs[0].references.inputs[0]);
}

TEST_CASE("total_loss composes the component ops") {
  const Enc f = toy(11);
  const Enc fp = perturbed(f, 12, 0.2);
  const auto fx = oracle::make_fixture(2, {2, 1}, 4, 6);
  AttackConfig cfg = no_augmentation();
  cfg.lambda1 = 0.7;
  cfg.lambda2 = 1.9;
  const auto batch = std::span<const Image>(fx.batch);
  const auto b = total_loss(fp, f, batch, fx.spec, cfg);
  CHECK(b.l0 == effectiveness_loss_L0(fp, batch, fx.spec));
  CHECK(b.l1 == reference_alignment_loss_L1(fp, f, fx.spec, false, 0));
  CHECK(b.l2 == utility_loss_L2(fp, f, batch));
  CHECK(std::abs(b.total - oracle::L(b.l0, b.l1, b.l2, 0.7, 1.9)) <= 1e-12);
  cfg.lambda1 = cfg.lambda2 = 0;
  const auto only = total_loss(fp, f, batch, fx.spec, cfg);
  CHECK(only.total == only.l0);
}

TEST_CASE("whole-image trigger reduces L0 to the pattern's cosines") {
  const Enc fp = toy(13);
  oracle::Fixture fx;
  TargetPair p;
  const Image pattern = testing::random_image(4, 4, 99);
  p.trigger = Trigger(Trigger::Mask::Ones(4, 4), pattern, "all");
  p.references.inputs = testing::random_images(2, 4, 4, 14);
  fx.spec.pairs.push_back(p);
  fx.batch = testing::random_images(3, 4, 4, 15);
  double mean = 0;
  for (const Image& r : p.references.inputs) {
    mean += testing::scalar_cosine(testing::feature_of(fp, pattern), testing::feature_of(fp, r));
  }
  mean /= 2;
  CHECK(effectiveness_loss_L0(fp, std::span<const Image>(fx.batch), fx.spec) == doctest::Approx(-mean).epsilon(1e-12));
}

TEST_CASE("losses stay within [-1, 1]") {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const Enc f = toy(s);
    const Enc fp = perturbed(f, s + 50, 1.0);
    const auto fx = oracle::make_fixture(2, {2, 2}, 4, s);
    const auto b = total_loss(fp, f, std::span<const Image>(fx.batch), fx.spec, AttackConfig{}, s);
    for (double v : {b.l0, b.l1, b.l2}) {
      CHECK(v >= -1.0);
      CHECK(v <= 1.0);
    }
  }
}

TEST_CASE("loss ops reject bad inputs") {
  const Enc f = toy(1);
  const auto fx = oracle::make_fixture(1, {1}, 2, 1);
  CHECK_THROWS_AS(effectiveness_loss_L0(f, std::span<const Image>(), fx.spec), ArgumentError);
  const Enc other = make_encoder<double>("toy-mlp", 4, 4, 4, 1);
  CHECK_THROWS_AS(reference_alignment_loss_L1(other, f, fx.spec, false, 0), ArgumentError);
  CHECK_THROWS_AS(utility_loss_L2(other, f, std::span<const Image>(fx.batch)), ArgumentError);
  const Enc zero = hand_mlp([](auto&) {});
  CHECK_THROWS_AS(effectiveness_loss_L0(zero, std::span<const Image>(fx.batch), fx.spec), DegenerateError);
  AttackSpec empty;
  empty.shadow.images = fx.batch;
  CHECK_THROWS_AS(effectiveness_loss_L0(f, std::span<const Image>(fx.batch), empty), ArgumentError);
}

TEST_CASE("analytic gradients match central differences") {
  const Enc f = toy(21);
  Enc fp = perturbed(f, 22, 0.2);
  CHECK(fp.network.parameter_count() <= 500);
  const auto fx = oracle::make_fixture(2, {2, 1}, 3, 7);
  const auto batch = std::span<const Image>(fx.batch);
  AttackConfig cfg;
  cfg.lambda1 = 0.8;
  cfg.lambda2 = 1.3;
  const std::uint64_t seed = 31;

  SUBCASE("L0") {
    const auto g = objective_gradient(fp, fx, f, cfg, seed, {1, 0, 0});
    const auto n = testing::numeric_gradient(fp.network, [&] { return effectiveness_loss_L0(fp, batch, fx.spec); });
    CHECK(testing::max_relative_error(g, n) < 1e-4);
  }
  SUBCASE("L1 with augmented views") {
    const auto g = objective_gradient(fp, fx, f, cfg, seed, {0, 1, 0});
    const auto n = testing::numeric_gradient(
        fp.network, [&] { return reference_alignment_loss_L1(fp, f, fx.spec, true, seed, cfg.reference_augmentation); });
    CHECK(testing::max_relative_error(g, n) < 1e-4);
  }
  SUBCASE("L2") {
    const auto g = objective_gradient(fp, fx, f, cfg, seed, {0, 0, 1});
    const auto n = testing::numeric_gradient(fp.network, [&] { return utility_loss_L2(fp, f, batch); });
    CHECK(testing::max_relative_error(g, n) < 1e-4);
  }
  SUBCASE("L") {
    LossBreakdown b;
    const auto g = objective_gradient(fp, fx, f, cfg, seed, term_weights(cfg), &b);
    const auto n = testing::numeric_gradient(fp.network, [&] { return total_loss(fp, f, batch, fx.spec, cfg, seed).total; });
    CHECK(testing::max_relative_error(g, n) < 1e-4);
    const auto direct = total_loss(fp, f, batch, fx.spec, cfg, seed);
    CHECK(b.l0 == doctest::Approx(direct.l0).epsilon(1e-12));
    CHECK(b.l1 == doctest::Approx(direct.l1).epsilon(1e-12));
    CHECK(b.l2 == doctest::Approx(direct.l2).epsilon(1e-12));
  }
  SUBCASE("L with live batch statistics") {
    cfg.freeze_batchnorm = false;
    const auto g = objective_gradient(fp, fx, f, cfg, seed, term_weights(cfg));
    std::vector<Image> refs;
    for (const auto& p : fx.spec.pairs) refs.insert(refs.end(), p.references.inputs.begin(), p.references.inputs.end());
    const AttackObjective<double> obj(fx.spec, encode(f, std::span<const Image>(refs)), cfg);
    const Eigen::MatrixXd clean = encode(f, batch);
    const auto n =
        testing::numeric_gradient(fp.network, [&] { return obj.evaluate(fp, fx.batch, clean, seed, term_weights(cfg)).total; });
    CHECK(testing::max_relative_error(g, n) < 1e-4);
  }
  SUBCASE("L without the effectiveness term") {
    cfg.include_l0 = false;
    LossBreakdown b;
    const auto g = objective_gradient(fp, fx, f, cfg, seed, term_weights(cfg), &b);
    CHECK(b.l0 == 0.0);
    const auto n = testing::numeric_gradient(fp.network, [&] {
      return cfg.lambda1 * reference_alignment_loss_L1(fp, f, fx.spec, true, seed, cfg.reference_augmentation) +
             cfg.lambda2 * utility_loss_L2(fp, f, batch);
    });
    CHECK(testing::max_relative_error(g, n) < 1e-4);
  }
}

TEST_CASE("finetune: zero epochs or zero step leaves the encoder unchanged") {
  const Enc f = toy(40);
  const auto fx = oracle::make_fixture(1, {2}, 8, 8);
  AttackConfig cfg;
  cfg.batch_size = 4;
  cfg.max_epoch = 0;
  auto r = badencoder_finetune(f, fx.spec, cfg);
  CHECK(r.epoch_log.empty());
  Enc copy = f;
  CHECK((nn::flatten_parameters(r.backdoored.network).array() == nn::flatten_parameters(copy.network).array()).all());

  cfg.max_epoch = 5;
  cfg.learning_rate = 0;
  for (bool frozen : {true, false}) {
    cfg.freeze_batchnorm = frozen;
    r = badencoder_finetune(f, fx.spec, cfg);
    CHECK(r.epoch_log.size() == 5);
    CHECK((nn::flatten_parameters(r.backdoored.network).array() == nn::flatten_parameters(copy.network).array()).all());
  }
}

TEST_CASE("finetune never touches the clean encoder and freezes normalisation") {
  const Enc f = toy(41);
  Enc before = f;
  const auto fx = oracle::make_fixture(1, {2}, 8, 9);
  AttackConfig cfg;
  cfg.batch_size = 4;
  cfg.max_epoch = 3;
  cfg.learning_rate = 0.05;
  const auto r = badencoder_finetune(f, fx.spec, cfg);
  Enc after = f;
  CHECK((nn::flatten_parameters(before.network).array() == nn::flatten_parameters(after.network).array()).all());
  const auto clean_tensors = f.network.tensors();
  const auto bd_tensors = r.backdoored.network.tensors();
  REQUIRE(clean_tensors.size() == bd_tensors.size());
  bool some_changed = false;
  for (std::size_t i = 0; i < clean_tensors.size(); ++i) {
    const bool same = (clean_tensors[i].second.array() == bd_tensors[i].second.array()).all();
    // layer 1 is the batch norm of toy-cnn: parameters and buffers all frozen
    if (clean_tensors[i].first.rfind("1.", 0) == 0) {
      CHECK_MESSAGE(same, clean_tensors[i].first);
    } else {
      some_changed = some_changed || !same;
    }
  }
  CHECK(some_changed);
}

TEST_CASE("finetune: breakdown identity on every logged epoch, log round trip") {
  const Enc f = toy(42);
  const auto fx = oracle::make_fixture(2, {1, 2}, 8, 10);
  AttackConfig cfg;
  cfg.batch_size = 4;
  cfg.max_epoch = 4;
  cfg.lambda1 = 0.5;
  cfg.lambda2 = 2.0;
  cfg.learning_rate = 0.01;
  int calls = 0;
  const auto r = badencoder_finetune(f, fx.spec, cfg, [&](int, const LossBreakdown&) { ++calls; });
  CHECK(calls == 4);
  for (const auto& b : r.epoch_log) CHECK(std::abs(b.total - (b.l0 + 0.5 * b.l1 + 2.0 * b.l2)) <= 1e-9);

  testing::TempDir dir("losslog");
  write_loss_log(r.epoch_log, dir.path / "loss.txt");
  const auto back = read_loss_log(dir.path / "loss.txt");
  REQUIRE(back.size() == r.epoch_log.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].l0 == r.epoch_log[i].l0);
    CHECK(back[i].total == r.epoch_log[i].total);
  }
}

TEST_CASE("finetune is deterministic") {
  const Enc f = toy(43);
  const auto fx = oracle::make_fixture(1, {2}, 8, 11);
  AttackConfig cfg;
  cfg.batch_size = 4;
  cfg.max_epoch = 2;
  cfg.optimizer = AttackOptimizer::Adam;
  auto a = badencoder_finetune(f, fx.spec, cfg);
  auto b = badencoder_finetune(f, fx.spec, cfg);
  CHECK((nn::flatten_parameters(a.backdoored.network).array() == nn::flatten_parameters(b.backdoored.network).array()).all());
}

TEST_CASE("finetune preconditions") {
  const Enc f = toy(44);
  const auto fx = oracle::make_fixture(1, {1}, 4, 12);
  AttackConfig cfg;
  cfg.batch_size = 5;
  CHECK_THROWS_AS(badencoder_finetune(f, fx.spec, cfg), ArgumentError);
  cfg.batch_size = 2;
  cfg.lambda1 = -1;
  CHECK_THROWS_AS(badencoder_finetune(f, fx.spec, cfg), ArgumentError);
  cfg.lambda1 = 1;
  cfg.learning_rate = 1e300;
  cfg.max_epoch = 3;
  CHECK_THROWS(badencoder_finetune(f, fx.spec, cfg));
}

TEST_CASE("finetune lowers the loss on a pretrained encoder") {
  double first = 0, last = 0;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const auto data = make_synthetic_dataset(4, 32, 16, seed);
    SimCLRConfig sc;
    sc.epochs = 2;
    sc.batch_size = 32;
    sc.seed = seed;
    sc.architecture = "cnn3-w4";
    sc.feature_dim = 16;
    sc.latent_dim = 8;
    const auto pre = pretrain_simclr<Real>(std::span<const Image>(data.images), sc, AugmentationConfig{});
    AttackSpec spec;
    TargetPair p{"synthetic", 0, Trigger::white_square(16, 16, 4), {}};
    for (auto i : data.indices_of(0)) {
      if (p.references.count() < 2) p.references.inputs.push_back(data.images[i]);
    }
    spec.pairs.push_back(p);
    spec.shadow = sample_shadow(data, 64, seed);
    AttackConfig cfg;
    cfg.max_epoch = 10;
    cfg.batch_size = 16;
    cfg.seed = seed;
    cfg.learning_rate = 0.05;
    const auto r = badencoder_finetune(pre.encoder, spec, cfg);
    first += r.epoch_log.front().total;
    last += r.epoch_log.back().total;
  }
  CHECK(last < first);
}
