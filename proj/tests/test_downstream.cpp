#include "badenc/checkpoint.hpp"
#include "badenc/datasets.hpp"
#include "badenc/downstream.hpp"
#include "badenc/evaluation.hpp"
#include "support.hpp"

#include <doctest.h>

using namespace badenc;

namespace {

/// toy-mlp (4x4 input, 2 features) sending all-zero images to (1, 0) and
/// all-one images to (0, 1).
Encoder<double> brightness_encoder() {
  auto e = make_encoder<double>("toy-mlp", 4, 4, 2, 0);
  auto p = e.network.parameters();
  for (auto& t : p) t.value->setZero();
  p[0].value->row(0).setConstant(1.0 / 48.0);  // h0 = mean pixel
  (*p[1].value)(1, 0) = 1.0;                   // h1 = 1
  (*p[2].value)(0, 0) = -1.0;                  // out0 = h1 - h0
  (*p[2].value)(0, 1) = 1.0;
  (*p[2].value)(1, 0) = 1.0;  // out1 = h0
  return e;
}

/// Single linear layer with the given weight and bias.
Classifier<double> linear_classifier(const Eigen::MatrixXd& w, const Eigen::VectorXd& b) {
  auto clf = make_classifier<double>(w.cols(), {}, static_cast<int>(w.rows()), 0);
  auto p = clf.network.parameters();
  *p[0].value = w;
  *p[1].value = b;
  return clf;
}

LabeledDataset dark_and_light(int per_class) {
  LabeledDataset d;
  d.num_classes = 2;
  for (int k = 0; k < per_class; ++k) {
    d.images.push_back(Image::filled(4, 4, 0.0f));
    d.labels.push_back(0);
    d.images.push_back(Image::filled(4, 4, 1.0f));
    d.labels.push_back(1);
  }
  return d;
}

LabeledDataset random_labeled(int classes, int per_class, Index side, std::uint64_t seed) {
  LabeledDataset d;
  d.num_classes = classes;
  for (int k = 0; k < per_class; ++k) {
    for (int c = 0; c < classes; ++c) {
      d.images.push_back(testing::random_image(side, side, seed * 1000 + static_cast<std::uint64_t>(k * classes + c)));
      d.labels.push_back(c);
    }
  }
  return d;
}

}  // namespace

// ---------------------------------------------------------------------------
// checkpoints

TEST_CASE("encoder checkpoint round trip") {
  auto enc = make_encoder<Real>("cnn3-w4", 32, 32, 16, 3);
  enc.network.forward(nn::to_feature_map<Real>(testing::random_images(4, 32, 32, 1)), nn::Mode::Train);
  testing::TempDir dir("ckpt");
  save_encoder(enc, dir.path / "enc.ckpt", {{"note", "x"}});
  const auto back = load_encoder<Real>(dir.path / "enc.ckpt");
  CHECK(back.architecture == "cnn3-w4");
  CHECK(back.feature_dim == 16);
  const auto a = std::as_const(enc.network).tensors();
  const auto b = back.network.tensors();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].first == b[i].first);
    CHECK((a[i].second.array() == b[i].second.array()).all());
  }
  const Image x = testing::random_image(32, 32, 2);
  CHECK((encode(enc, x).array() == encode(back, x).array()).all());
  // float and double read the same file
  const auto wide = load_encoder<double>(dir.path / "enc.ckpt");
  CHECK((encode(wide, x).cast<float>() - encode(enc, x)).cwiseAbs().maxCoeff() < 1e-4f);
  CHECK(read_checkpoint(dir.path / "enc.ckpt").header.at("config").at("note") == "x");
}

TEST_CASE("checkpoint bytes are stable") {
  const auto enc = make_encoder<Real>("toy-cnn", 4, 4, 3, 1);
  const auto bytes = serialize_checkpoint(encoder_checkpoint(enc));
  CHECK(serialize_checkpoint(parse_checkpoint(bytes)) == bytes);
  CHECK(std::string(bytes.begin(), bytes.begin() + 8) == "BDECKPT1");
}

TEST_CASE("checkpoint corruption is detected") {
  const auto enc = make_encoder<Real>("toy-cnn", 4, 4, 3, 1);
  const auto bytes = serialize_checkpoint(encoder_checkpoint(enc));
  auto truncated = bytes;
  truncated.resize(bytes.size() - 8);
  CHECK_THROWS_AS(parse_checkpoint(truncated), FormatError);
  auto trailing = bytes;
  trailing.push_back(0);
  CHECK_THROWS_AS(parse_checkpoint(trailing), FormatError);
  auto magic = bytes;
  magic[0] = 'X';
  CHECK_THROWS_AS(parse_checkpoint(magic), FormatError);
  CHECK_THROWS_AS(parse_checkpoint({1, 2, 3}), FormatError);
  CHECK_THROWS_AS(read_checkpoint("/nonexistent/enc.ckpt"), FormatError);
  CHECK_THROWS_AS(classifier_from_checkpoint<Real>(parse_checkpoint(bytes)), FormatError);
}

TEST_CASE("projection head and classifier checkpoints") {
  testing::TempDir dir("heads");
  const auto head = make_projection_head<Real>(8, 4, 2);
  save_projection_head(head, dir.path / "head.ckpt");
  auto back = load_projection_head<Real>(dir.path / "head.ckpt");
  CHECK(back.latent_dim == 4);
  auto h = head;
  CHECK((nn::flatten_parameters(h.network).array() == nn::flatten_parameters(back.network).array()).all());

  const auto clf = make_classifier<Real>(8, {16, 8}, 3, 5);
  save_classifier(clf, dir.path / "clf.ckpt");
  auto c2 = load_classifier<Real>(dir.path / "clf.ckpt");
  CHECK(c2.hidden == std::vector<Index>{16, 8});
  CHECK(c2.num_classes == 3);
  auto c1 = clf;
  CHECK((nn::flatten_parameters(c1.network).array() == nn::flatten_parameters(c2.network).array()).all());
  CHECK_THROWS_AS(load_encoder<Real>(dir.path / "clf.ckpt"), FormatError);
}

// ---------------------------------------------------------------------------
// downstream

TEST_CASE("extract_features: shape, purity, per-image agreement") {
  const auto enc = make_encoder<Real>("cnn3-w4", 16, 16, 8, 1);
  auto d = random_labeled(3, 4, 16, 2);
  d.images[5] = d.images[2];
  const auto fs = extract_features(enc, d);
  CHECK(fs.features.rows() == 8);
  CHECK(fs.features.cols() == 12);
  CHECK(fs.labels == d.labels);
  CHECK((fs.features.col(5).array() == fs.features.col(2).array()).all());
  for (std::size_t i = 0; i < d.size(); ++i) {
    CHECK((encode(enc, d.images[i]).array() == fs.features.col(static_cast<Index>(i)).array()).all());
  }
}

TEST_CASE("default head widths") {
  const auto clf = make_classifier<Real>(128, {512, 256}, 10, 1);
  auto c = clf;
  CHECK(c.network.parameter_count() == 128 * 512 + 512 + 512 * 256 + 256 + 256 * 10 + 10);
}

TEST_CASE("train_multishot separates two distant blobs") {
  FeatureSet<Real> fs;
  fs.num_classes = 2;
  fs.features.resize(2, 200);
  Rng rng(3);
  for (Index j = 0; j < 200; ++j) {
    const int y = static_cast<int>(j % 2);
    fs.features(0, j) = static_cast<Real>((y ? 5.0 : -5.0) + rng.normal());
    fs.features(1, j) = static_cast<Real>((y ? -5.0 : 5.0) + rng.normal());
    fs.labels.push_back(y);
  }
  DownstreamConfig cfg;
  cfg.epochs = 20;
  cfg.learning_rate = 1e-3;
  cfg.hidden = {16, 8};
  const auto r = train_multishot(fs, cfg);
  CHECK(r.train_accuracy.back() == 1.0);
  CHECK(r.epoch_loss.size() == 20);
  // least-squares oracle agrees the blobs are separable
  Eigen::MatrixXd x = fs.features.cast<double>();
  CHECK(testing::least_squares_probe(x, fs.labels, x, fs.labels, 2) == 1.0);

  const auto again = train_multishot(fs, cfg);
  auto a = r.classifier;
  auto b = again.classifier;
  CHECK((nn::flatten_parameters(a.network).array() == nn::flatten_parameters(b.network).array()).all());
}

TEST_CASE("train_multishot needs every class") {
  FeatureSet<Real> fs;
  fs.num_classes = 3;
  fs.features = Matrix<Real>::Ones(2, 4);
  fs.labels = {0, 1, 0, 1};
  CHECK_THROWS_AS(train_multishot(fs, DownstreamConfig{}), ArgumentError);
}

TEST_CASE("predict: one-hot logits, tie rule, batch and single paths agree") {
  const auto enc = make_encoder<double>("toy-mlp", 4, 4, 3, 1);
  const Image x = testing::random_image(4, 4, 1);
  CHECK(predict(linear_classifier(Eigen::MatrixXd::Zero(3, 3), Eigen::Vector3d(0, 0, 1)), enc, x) == 2);
  CHECK(predict(linear_classifier(Eigen::MatrixXd::Zero(3, 3), Eigen::Vector3d(0, 1, 1)), enc, x) == 1);
  CHECK(predict(linear_classifier(Eigen::MatrixXd::Zero(3, 3), Eigen::Vector3d(2, 2, 2)), enc, x) == 0);
  CHECK(argmax_first(Eigen::Vector4d(1, 3, 3, 0)) == 1);

  const auto real = make_encoder<Real>("cnn3-w4", 16, 16, 8, 2);
  const auto clf = make_classifier<Real>(8, {16}, 4, 3);
  const auto images = testing::random_images(100, 16, 16, 4);
  const auto batch = predict(clf, real, std::span<const Image>(images));
  for (std::size_t i = 0; i < images.size(); ++i) CHECK(batch[i] == predict(clf, real, images[i]));
}

TEST_CASE("class prototypes") {
  const auto enc = make_encoder<double>("cnn3-w2", 8, 8, 5, 1);
  SUBCASE("one exemplar per class is its normalised feature") {
    const auto d = random_labeled(3, 1, 8, 5);
    const auto t = build_class_prototypes(enc, d);
    for (int c = 0; c < 3; ++c) {
      const Eigen::VectorXd f = encode(enc, d.images[static_cast<std::size_t>(c)]);
      CHECK((t.prototypes.col(c) - f.normalized()).cwiseAbs().maxCoeff() < 1e-12);
      CHECK(t.prototypes.col(c).norm() == doctest::Approx(1.0));
    }
    CHECK(t.class_names[2] == "class-2");
  }
  SUBCASE("duplicated exemplars do not move the mean") {
    const auto d = random_labeled(3, 2, 8, 6);
    auto dup = d;
    dup.images.insert(dup.images.end(), d.images.begin(), d.images.end());
    dup.labels.insert(dup.labels.end(), d.labels.begin(), d.labels.end());
    const auto a = build_class_prototypes(enc, d);
    const auto b = build_class_prototypes(enc, dup);
    CHECK((a.prototypes - b.prototypes).cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("means match a scalar oracle") {
    const auto d = random_labeled(3, 3, 8, 7);
    const auto t = build_class_prototypes(enc, d);
    for (int c = 0; c < 3; ++c) {
      std::vector<double> mean(5, 0.0);
      int n = 0;
      for (std::size_t k = 0; k < d.size(); ++k) {
        if (d.labels[k] != c) continue;
        const auto f = testing::feature_of(enc, d.images[k]);
        for (std::size_t i = 0; i < 5; ++i) mean[i] += f[i];
        ++n;
      }
      double norm = 0;
      for (auto& v : mean) {
        v /= n;
        norm += v * v;
      }
      for (std::size_t i = 0; i < 5; ++i) CHECK(t.prototypes(static_cast<Index>(i), c) == doctest::Approx(mean[i] / std::sqrt(norm)));
    }
  }
  SUBCASE("missing class") {
    auto d = random_labeled(3, 1, 8, 8);
    d.labels[2] = 0;
    CHECK_THROWS_AS(build_class_prototypes(enc, d), ArgumentError);
  }
}

TEST_CASE("zero-shot prediction") {
  PrototypeTable<double> t{Eigen::MatrixXd::Identity(4, 4), {"a", "b", "c", "d"}};
  CHECK(zero_shot_predict_features(t, Eigen::MatrixXd(Eigen::Vector4d(0, 0, 3, 0))) == std::vector<int>{2});
  CHECK(zero_shot_predict_features(t, Eigen::MatrixXd(Eigen::Vector4d(1, 1, 0, 0))) == std::vector<int>{0});

  // exhaustive cosine oracle on a 4-class fixture, and scale invariance
  const auto enc = make_encoder<double>("cnn3-w2", 8, 8, 6, 3);
  const auto protos = build_class_prototypes(enc, random_labeled(4, 2, 8, 9));
  const auto images = testing::random_images(30, 8, 8, 10);
  const Eigen::MatrixXd f = encode(enc, std::span<const Image>(images));
  const auto got = zero_shot_predict(enc, protos, std::span<const Image>(images));
  const auto scaled = zero_shot_predict_features(protos, Eigen::MatrixXd(3.5 * f));
  for (std::size_t k = 0; k < images.size(); ++k) {
    int best = 0;
    double best_cos = -2;
    for (int c = 0; c < 4; ++c) {
      std::vector<double> p(protos.prototypes.col(c).data(), protos.prototypes.col(c).data() + 6);
      const double s = testing::scalar_cosine(testing::feature_of(enc, images[k]), p);
      if (s > best_cos) {
        best_cos = s;
        best = c;
      }
    }
    CHECK(got[k] == best);
    CHECK(scaled[k] == best);
    CHECK(zero_shot_predict(enc, protos, images[k]) == best);
  }
  // a feature equal to prototype k
  CHECK(zero_shot_predict_features(protos, Eigen::MatrixXd(protos.prototypes.col(3))) == std::vector<int>{3});
}

TEST_CASE("prototype JSON round trip") {
  PrototypeTable<double> t{Eigen::MatrixXd::Identity(3, 2), {"cat", "dog"}};
  const auto back = prototypes_from_json<double>(prototypes_to_json(t));
  CHECK(back.class_names == t.class_names);
  CHECK((back.prototypes.array() == t.prototypes.array()).all());
}

// ---------------------------------------------------------------------------
// evaluation

TEST_CASE("accuracy: constant and perfect classifiers") {
  const auto enc = make_encoder<double>("toy-mlp", 4, 4, 3, 1);
  const auto ten = random_labeled(10, 10, 4, 11);
  Eigen::VectorXd bias = Eigen::VectorXd::Zero(10);
  bias[0] = 1;
  const auto constant = linear_classifier(Eigen::MatrixXd::Zero(10, 3), bias);
  CHECK(accuracy(constant, enc, ten) == doctest::Approx(0.1));
  CHECK(accuracy_count(constant, enc, ten) == RateCount{10, 100});

  const auto bright = brightness_encoder();
  const auto identity = linear_classifier(Eigen::MatrixXd::Identity(2, 2), Eigen::VectorXd::Zero(2));
  CHECK(accuracy(identity, bright, dark_and_light(5)) == 1.0);

  CHECK_THROWS_AS(accuracy(identity, bright, LabeledDataset{{}, {}, 2}), ArgumentError);
}

TEST_CASE("attack success rate: constant classifiers") {
  const auto enc = make_encoder<double>("toy-mlp", 4, 4, 3, 1);
  const auto test = random_labeled(3, 5, 4, 12);
  const Trigger e = Trigger::square(4, 4, Corner::BottomRight, 2, {1, 1, 1}, "w2");
  const auto always2 = linear_classifier(Eigen::MatrixXd::Zero(3, 3), Eigen::Vector3d(0, 0, 1));
  CHECK(attack_success_rate(always2, enc, test, e, 2) == 1.0);
  CHECK(attack_success_rate(always2, enc, test, e, 1) == 0.0);
  // target-class images count too
  CHECK(attack_success_count(always2, enc, test, e, 2).total == test.size());
  CHECK_THROWS_AS(attack_success_rate(always2, enc, test, e, 3), ArgumentError);
  CHECK_THROWS_AS(attack_success_rate(always2, enc, test, Trigger::white_square(32, 32), 0), ArgumentError);
}

TEST_CASE("attack success rate on the trigger-sensitive toy pipeline") {
  // the all-white trigger turns every image light: class 1 everywhere
  const auto enc = brightness_encoder();
  const auto clf = linear_classifier(Eigen::MatrixXd::Identity(2, 2), Eigen::VectorXd::Zero(2));
  const Trigger white(Trigger::Mask::Ones(4, 4), Image::filled(4, 4, 1.0f), "all-white");
  const auto test = dark_and_light(4);
  CHECK(attack_success_count(clf, enc, test, white, 1) == RateCount{8, 8});
  PrototypeTable<double> protos{Eigen::MatrixXd::Identity(2, 2), {"dark", "light"}};
  CHECK(attack_success_count(protos, enc, test, white, 1) == RateCount{8, 8});
  CHECK(accuracy_count(protos, enc, test) == RateCount{8, 8});
}

TEST_CASE("similarity_cdf") {
  auto constant = make_encoder<double>("toy-mlp", 4, 4, 2, 0);
  auto p = constant.network.parameters();
  for (auto& t : p) t.value->setZero();
  *p[3].value << 1, 2;
  const auto test = random_labeled(2, 5, 4, 13);
  const Trigger e = Trigger::square(4, 4, Corner::Center, 2, {1, 0, 0}, "red");
  for (double v : similarity_cdf(constant, test.images[0], test, e)) CHECK(v == doctest::Approx(1.0));

  const auto enc = make_encoder<double>("toy-cnn", 4, 4, 4, 2);
  const auto cdf = similarity_cdf(enc, test.images[0], test, e);
  CHECK(cdf.size() == test.size());
  CHECK(std::is_sorted(cdf.begin(), cdf.end()));
  for (double v : cdf) {
    CHECK(v >= -1.0);
    CHECK(v <= 1.0);
  }
  CHECK(median_sorted({1, 2, 3}) == 2);
  CHECK(median_sorted({1, 2, 3, 10}) == 2.5);
  CHECK_THROWS_AS(median_sorted({}), ArgumentError);
}

TEST_CASE("compile_report") {
  ReportInputs in;
  in.experiment_id = "exp";
  in.config_digest = "abc";
  in.pretraining_dataset = "synthetic";
  in.downstream_task = "synthetic";
  in.trigger = "white-br-10";
  in.ca = RateCount{5, 10};
  in.ba = RateCount{6, 10};
  in.asr = RateCount{9, 10};
  in.asr_b = RateCount{1, 10};
  const auto r = compile_report(in);
  CHECK(r.CA() == 0.5);
  CHECK(r.ASR_B() == 0.1);

  const auto back = report_from_json(to_json(r));
  CHECK(back.asr == r.asr);
  CHECK(back.config_digest == "abc");
  CHECK(to_json(back) == to_json(r));

  auto missing = in;
  missing.asr_b.reset();
  CHECK_THROWS_AS(compile_report(missing), IntegrityError);
  auto over = in;
  over.asr = RateCount{11, 10};
  CHECK_THROWS_AS(compile_report(over), IntegrityError);
  auto empty = in;
  empty.ca = RateCount{0, 0};
  CHECK_THROWS_AS(compile_report(empty), IntegrityError);
  auto mismatch = in;
  mismatch.ba = RateCount{6, 11};
  CHECK_THROWS_AS(compile_report(mismatch), IntegrityError);
  auto noid = in;
  noid.experiment_id.clear();
  CHECK_THROWS_AS(compile_report(noid), IntegrityError);

  auto tampered = to_json(r);
  tampered["CA"]["rate"] = 0.7;
  CHECK_THROWS_AS(report_from_json(tampered), IntegrityError);
}

TEST_CASE("report fields equal independently recomputed metrics") {
  const auto data = make_synthetic_dataset(3, 20, 16, 4);
  const auto test = make_synthetic_dataset(3, 10, 16, 5);
  const auto clean = make_encoder<Real>("cnn3-w4", 16, 16, 8, 6);
  const auto bd = make_encoder<Real>("cnn3-w4", 16, 16, 8, 7);
  DownstreamConfig cfg;
  cfg.epochs = 3;
  cfg.hidden = {16};
  const auto clf_c = train_multishot(extract_features(clean, data), cfg).classifier;
  const auto clf_b = train_multishot(extract_features(bd, data), cfg).classifier;
  const Trigger e = Trigger::white_square(16, 16, 4);

  ReportInputs in;
  in.experiment_id = "fixture";
  in.config_digest = "d";
  in.ca = accuracy_count(clf_c, clean, test);
  in.ba = accuracy_count(clf_b, bd, test);
  in.asr = attack_success_count(clf_b, bd, test, e, 1);
  in.asr_b = attack_success_count(clf_c, clean, test, e, 1);
  const auto r = compile_report(in);

  std::size_t ca = 0, ba = 0, asr = 0, asrb = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const Image t = embed_trigger(test.images[i], e);
    ca += predict(clf_c, clean, test.images[i]) == test.labels[i];
    ba += predict(clf_b, bd, test.images[i]) == test.labels[i];
    asr += predict(clf_b, bd, t) == 1;
    asrb += predict(clf_c, clean, t) == 1;
  }
  CHECK(r.ca.hits == ca);
  CHECK(r.ba.hits == ba);
  CHECK(r.asr.hits == asr);
  CHECK(r.asr_b.hits == asrb);
  CHECK(r.CA() == static_cast<double>(ca) / 30.0);
}
