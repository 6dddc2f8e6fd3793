#include "badenc/evaluation.hpp"

namespace badenc {

double median_sorted(const std::vector<double>& sorted) {
  require(!sorted.empty(), "median of an empty sample");
  const std::size_t n = sorted.size();
  return n % 2 == 1 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
}

namespace {

RateCount checked(const std::optional<RateCount>& rc, const char* name) {
  if (!rc) throw IntegrityError(std::string("report is missing ") + name);
  if (rc->total == 0) throw IntegrityError(std::string(name) + " was measured on an empty test set");
  if (rc->hits > rc->total) throw IntegrityError(std::string(name) + " has more hits than test images");
  return *rc;
}

nlohmann::json count_json(const RateCount& rc) {
  return {{"hits", rc.hits}, {"total", rc.total}, {"rate", rc.rate()}};
}

RateCount count_from_json(const nlohmann::json& j, const char* name) {
  RateCount rc{j.at("hits").get<std::size_t>(), j.at("total").get<std::size_t>()};
  checked(rc, name);
  if (j.at("rate").get<double>() != rc.rate()) throw IntegrityError(std::string(name) + " rate disagrees with its counts");
  return rc;
}

}  // namespace

MetricsReport compile_report(const ReportInputs& in) {
  if (in.experiment_id.empty()) throw IntegrityError("report has no experiment id");
  if (in.config_digest.empty()) throw IntegrityError("report has no config digest");
  MetricsReport r;
  r.experiment_id = in.experiment_id;
  r.config_digest = in.config_digest;
  r.pretraining_dataset = in.pretraining_dataset;
  r.downstream_task = in.downstream_task;
  r.classifier_kind = in.classifier_kind;
  r.target_class = in.target_class;
  r.trigger = in.trigger;
  r.ca = checked(in.ca, "CA");
  r.ba = checked(in.ba, "BA");
  r.asr = checked(in.asr, "ASR");
  r.asr_b = checked(in.asr_b, "ASR-B");
  if (r.ca.total != r.ba.total) throw IntegrityError("CA and BA were measured on different test sets");
  if (r.asr.total != r.asr_b.total) throw IntegrityError("ASR and ASR-B were measured on different test sets");
  return r;
}

nlohmann::json to_json(const MetricsReport& r) {
  return {{"experiment_id", r.experiment_id},
          {"config_digest", r.config_digest},
          {"pretraining_dataset", r.pretraining_dataset},
          {"downstream_task", r.downstream_task},
          {"classifier_kind", r.classifier_kind},
          {"target_class", r.target_class},
          {"trigger", r.trigger},
          {"asr_includes_target_class", r.asr_includes_target_class},
          {"CA", count_json(r.ca)},
          {"BA", count_json(r.ba)},
          {"ASR", count_json(r.asr)},
          {"ASR_B", count_json(r.asr_b)}};
}

MetricsReport report_from_json(const nlohmann::json& j) {
  ReportInputs in;
  in.experiment_id = j.at("experiment_id").get<std::string>();
  in.config_digest = j.at("config_digest").get<std::string>();
  in.pretraining_dataset = j.at("pretraining_dataset").get<std::string>();
  in.downstream_task = j.at("downstream_task").get<std::string>();
  in.classifier_kind = j.at("classifier_kind").get<std::string>();
  in.target_class = j.at("target_class").get<int>();
  in.trigger = j.at("trigger").get<std::string>();
  in.ca = count_from_json(j.at("CA"), "CA");
  in.ba = count_from_json(j.at("BA"), "BA");
  in.asr = count_from_json(j.at("ASR"), "ASR");
  in.asr_b = count_from_json(j.at("ASR_B"), "ASR-B");
  MetricsReport r = compile_report(in);
  r.asr_includes_target_class = j.at("asr_includes_target_class").get<bool>();
  return r;
}

}  // namespace badenc
