#include "badenc/defenses.hpp"

#include <algorithm>

namespace badenc {

AnomalyResult anomaly_index(std::span<const double> l1_norms) {
  require(l1_norms.size() >= 3, "anomaly index needs at least 3 norms");
  for (double v : l1_norms) require(std::isfinite(v), "anomaly index needs finite norms");
  std::vector<double> sorted(l1_norms.begin(), l1_norms.end());
  std::sort(sorted.begin(), sorted.end());
  AnomalyResult r;
  r.median = median_sorted(sorted);
  std::vector<double> dev;
  dev.reserve(sorted.size());
  for (double v : sorted) dev.push_back(std::abs(v - r.median));
  std::sort(dev.begin(), dev.end());
  r.mad = median_sorted(dev);
  const auto it = std::min_element(l1_norms.begin(), l1_norms.end());
  r.min_norm = *it;
  r.flagged_class = static_cast<std::size_t>(it - l1_norms.begin());
  const double spread = std::abs(r.min_norm - r.median);
  if (r.mad == 0.0) {
    r.degenerate = true;
    r.index = std::numeric_limits<double>::infinity();
  } else {
    r.index = spread / (kMadConsistency * r.mad);
  }
  return r;
}

std::vector<Image> MetaClassifier::queries() const {
  const Index plane = height * width;
  std::vector<Image> out;
  for (Index q = 0; q < query_count; ++q) {
    Image::Pixels px(Image::kChannels * plane);
    for (Index c = 0; c < Image::kChannels; ++c) {
      for (Index k = 0; k < plane; ++k) {
        px[c * plane + k] = static_cast<float>(detail::sigmoid(query_raw(c, q * plane + k)));
      }
    }
    out.emplace_back(height, width, std::move(px));
  }
  return out;
}

nlohmann::json to_json(const MetaClassifier& meta) {
  return {{"query_count", meta.query_count},
          {"height", meta.height},
          {"width", meta.width},
          {"outputs", meta.outputs},
          {"bias", meta.bias},
          {"weights", std::vector<double>(meta.weights.begin(), meta.weights.end())},
          {"query_raw", std::vector<double>(meta.query_raw.data(), meta.query_raw.data() + meta.query_raw.size())}};
}

MetaClassifier meta_classifier_from_json(const nlohmann::json& j) {
  MetaClassifier m;
  m.query_count = j.at("query_count").get<Index>();
  m.height = j.at("height").get<Index>();
  m.width = j.at("width").get<Index>();
  m.outputs = j.at("outputs").get<int>();
  m.bias = j.at("bias").get<double>();
  const auto w = j.at("weights").get<std::vector<double>>();
  const auto q = j.at("query_raw").get<std::vector<double>>();
  if (static_cast<Index>(w.size()) != m.query_count * m.outputs ||
      static_cast<Index>(q.size()) != Image::kChannels * m.query_count * m.height * m.width) {
    throw FormatError("meta-classifier record has inconsistent sizes");
  }
  m.weights = Eigen::Map<const Eigen::VectorXd>(w.data(), static_cast<Index>(w.size()));
  m.query_raw = Eigen::Map<const Eigen::MatrixXd>(q.data(), Image::kChannels, m.query_count * m.height * m.width);
  return m;
}

}  // namespace badenc
