#ifndef BADENC_EVALUATION_HPP
#define BADENC_EVALUATION_HPP

#include "badenc/downstream.hpp"
#include "badenc/trigger.hpp"

#include <json.hpp>

#include <algorithm>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace badenc {

/// An exact hit count; the rate is formed by one final division.
struct RateCount {
  std::size_t hits = 0;
  std::size_t total = 0;

  double rate() const { return static_cast<double>(hits) / static_cast<double>(total); }
  friend bool operator==(const RateCount&, const RateCount&) = default;
};

namespace detail {

inline RateCount count_matches(const std::vector<int>& predicted, const std::vector<int>& expected) {
  RateCount rc{0, predicted.size()};
  for (std::size_t i = 0; i < predicted.size(); ++i) rc.hits += predicted[i] == expected[i] ? 1 : 0;
  return rc;
}

inline RateCount count_equal(const std::vector<int>& predicted, int target) {
  return {static_cast<std::size_t>(std::count(predicted.begin(), predicted.end(), target)), predicted.size()};
}

inline std::vector<Image> triggered_copy(const LabeledDataset& test, const Trigger& trigger) {
  std::vector<Image> out;
  out.reserve(test.size());
  for (const Image& x : test.images) out.push_back(embed_trigger(x, trigger));
  return out;
}

inline void require_non_empty(const LabeledDataset& test) {
  require(!test.images.empty(), "evaluation needs a non-empty test set");
  test.validate();
}

}  // namespace detail

/// Correct predictions on clean test images (CA for a clean pipeline, BA for a
/// backdoored one).
template <typename Scalar>
RateCount accuracy_count(const Classifier<Scalar>& clf, const Encoder<Scalar>& enc, const LabeledDataset& test) {
  detail::require_non_empty(test);
  return detail::count_matches(predict(clf, enc, std::span<const Image>(test.images)), test.labels);
}

template <typename Scalar>
double accuracy(const Classifier<Scalar>& clf, const Encoder<Scalar>& enc, const LabeledDataset& test) {
  return accuracy_count(clf, enc, test).rate();
}

template <typename Scalar>
RateCount accuracy_count(const PrototypeTable<Scalar>& protos, const Encoder<Scalar>& enc, const LabeledDataset& test) {
  detail::require_non_empty(test);
  return detail::count_matches(zero_shot_predict(enc, protos, std::span<const Image>(test.images)), test.labels);
}

/// Fraction of trigger-embedded test images classified as `target`. Every test
/// image counts, including those whose true label is the target class. ASR-B
/// is this same function applied to the clean encoder and classifier.
template <typename Scalar>
RateCount attack_success_count(const Classifier<Scalar>& clf, const Encoder<Scalar>& enc, const LabeledDataset& test,
                               const Trigger& trigger, int target) {
  detail::require_non_empty(test);
  require(target >= 0 && target < clf.num_classes, "target class outside the classifier's classes");
  const auto triggered = detail::triggered_copy(test, trigger);
  return detail::count_equal(predict(clf, enc, std::span<const Image>(triggered)), target);
}

template <typename Scalar>
double attack_success_rate(const Classifier<Scalar>& clf, const Encoder<Scalar>& enc, const LabeledDataset& test,
                           const Trigger& trigger, int target) {
  return attack_success_count(clf, enc, test, trigger, target).rate();
}

template <typename Scalar>
RateCount attack_success_count(const PrototypeTable<Scalar>& protos, const Encoder<Scalar>& enc,
                               const LabeledDataset& test, const Trigger& trigger, int target) {
  detail::require_non_empty(test);
  require(target >= 0 && target < protos.num_classes(), "target class outside the prototype classes");
  const auto triggered = detail::triggered_copy(test, trigger);
  return detail::count_equal(zero_shot_predict(enc, protos, std::span<const Image>(triggered)), target);
}

/// Sorted cosine similarities between the reference's feature and the
/// features of every trigger-embedded test image.
template <typename Scalar>
std::vector<double> similarity_cdf(const Encoder<Scalar>& enc, const Image& reference, const LabeledDataset& test,
                                   const Trigger& trigger) {
  detail::require_non_empty(test);
  const auto triggered = detail::triggered_copy(test, trigger);
  const Vector<Scalar> ref = encode(enc, reference);
  const Matrix<Scalar> f = encode(enc, std::span<const Image>(triggered));
  std::vector<double> out;
  out.reserve(triggered.size());
  for (Index j = 0; j < f.cols(); ++j) out.push_back(static_cast<double>(cosine_similarity(ref, f.col(j))));
  std::sort(out.begin(), out.end());
  return out;
}

/// Median of a sorted sample (mean of the two middle values for even sizes).
double median_sorted(const std::vector<double>& sorted);

struct MetricsReport {
  std::string experiment_id;
  std::string config_digest;
  std::string pretraining_dataset;
  std::string downstream_task;
  std::string classifier_kind;  // "multi-shot" or "zero-shot-prototype-emulation"
  int target_class = 0;
  std::string trigger;
  RateCount ca, ba, asr, asr_b;
  bool asr_includes_target_class = true;

  double CA() const { return ca.rate(); }
  double BA() const { return ba.rate(); }
  double ASR() const { return asr.rate(); }
  double ASR_B() const { return asr_b.rate(); }
};

/// Everything compile_report needs; any unset count is an integrity error.
struct ReportInputs {
  std::string experiment_id;
  std::string config_digest;
  std::string pretraining_dataset;
  std::string downstream_task;
  std::string classifier_kind = "multi-shot";
  int target_class = 0;
  std::string trigger;
  std::optional<RateCount> ca, ba, asr, asr_b;
};

/// Throws IntegrityError when a metric is missing, a count is inconsistent
/// (hits > total, total == 0, clean and backdoored test sizes differ) or the
/// identifying fields are empty.
MetricsReport compile_report(const ReportInputs& inputs);

nlohmann::json to_json(const MetricsReport& report);
MetricsReport report_from_json(const nlohmann::json& j);

}  // namespace badenc

#endif  // BADENC_EVALUATION_HPP
