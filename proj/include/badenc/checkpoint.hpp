#ifndef BADENC_CHECKPOINT_HPP
#define BADENC_CHECKPOINT_HPP

#include "badenc/encoder.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace badenc {

/// Checkpoint container, version 1:
///
///   bytes 0..7   magic "BDECKPT1"
///   bytes 8..15  header length n, little-endian uint64
///   next n bytes UTF-8 JSON header
///   remainder    tensor payloads, little-endian IEEE float64, column-major,
///                concatenated in header order
///
/// The header carries "kind" (encoder, projection-head, classifier),
/// "architecture", the shape fields of that kind, a free-form "config" object
/// and "tensors": [{"name", "rows", "cols"}...].
struct Checkpoint {
  nlohmann::json header;
  std::vector<std::pair<std::string, Eigen::MatrixXd>> tensors;

  const Eigen::MatrixXd& tensor(const std::string& name) const;
};

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint read_checkpoint(const std::filesystem::path& path);

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes);

template <typename Scalar>
Checkpoint to_checkpoint(const nn::Network<Scalar>& net) {
  Checkpoint ckpt;
  ckpt.header["tensors"] = nlohmann::json::array();
  for (auto& [name, value] : net.tensors()) {
    ckpt.header["tensors"].push_back({{"name", name}, {"rows", value.rows()}, {"cols", value.cols()}});
    ckpt.tensors.emplace_back(name, value.template cast<double>());
  }
  return ckpt;
}

/// Copies every named tensor of the checkpoint into the network; names and
/// shapes must match exactly.
template <typename Scalar>
void load_tensors(nn::Network<Scalar>& net, const Checkpoint& ckpt) {
  auto targets = net.tensors();
  if (targets.size() != ckpt.tensors.size()) {
    throw FormatError("checkpoint holds " + std::to_string(ckpt.tensors.size()) + " tensors, architecture expects " +
                      std::to_string(targets.size()));
  }
  for (auto& t : targets) {
    const Eigen::MatrixXd& src = ckpt.tensor(t.name);
    if (src.rows() != t.value->rows() || src.cols() != t.value->cols()) {
      throw FormatError("checkpoint tensor '" + t.name + "' has the wrong shape");
    }
    *t.value = src.cast<Scalar>();
  }
}

template <typename Scalar>
Checkpoint encoder_checkpoint(const Encoder<Scalar>& enc, const nlohmann::json& config = nlohmann::json::object()) {
  Checkpoint ckpt = to_checkpoint(enc.network);
  ckpt.header["kind"] = "encoder";
  ckpt.header["architecture"] = enc.architecture;
  ckpt.header["feature_dim"] = enc.feature_dim;
  ckpt.header["input_height"] = enc.input_height;
  ckpt.header["input_width"] = enc.input_width;
  ckpt.header["config"] = config;
  return ckpt;
}

inline void require_kind(const Checkpoint& ckpt, const std::string& kind) {
  if (ckpt.header.value("kind", std::string()) != kind) {
    throw FormatError("checkpoint is not of kind '" + kind + "'");
  }
}

template <typename Scalar>
Encoder<Scalar> encoder_from_checkpoint(const Checkpoint& ckpt) {
  require_kind(ckpt, "encoder");
  const auto& h = ckpt.header;
  Encoder<Scalar> enc = make_encoder<Scalar>(h.at("architecture").get<std::string>(), h.at("input_height").get<Index>(),
                                             h.at("input_width").get<Index>(), h.at("feature_dim").get<Index>(), 0);
  load_tensors(enc.network, ckpt);
  return enc;
}

template <typename Scalar>
void save_encoder(const Encoder<Scalar>& enc, const std::filesystem::path& path,
                  const nlohmann::json& config = nlohmann::json::object()) {
  write_checkpoint(encoder_checkpoint(enc, config), path);
}

template <typename Scalar>
Encoder<Scalar> load_encoder(const std::filesystem::path& path) {
  return encoder_from_checkpoint<Scalar>(read_checkpoint(path));
}

template <typename Scalar>
void save_projection_head(const ProjectionHead<Scalar>& head, const std::filesystem::path& path) {
  Checkpoint ckpt = to_checkpoint(head.network);
  ckpt.header["kind"] = "projection-head";
  ckpt.header["architecture"] = "mlp2";
  ckpt.header["feature_dim"] = head.feature_dim;
  ckpt.header["latent_dim"] = head.latent_dim;
  ckpt.header["config"] = nlohmann::json::object();
  write_checkpoint(ckpt, path);
}

template <typename Scalar>
ProjectionHead<Scalar> load_projection_head(const std::filesystem::path& path) {
  const Checkpoint ckpt = read_checkpoint(path);
  require_kind(ckpt, "projection-head");
  auto head = make_projection_head<Scalar>(ckpt.header.at("feature_dim").get<Index>(),
                                           ckpt.header.at("latent_dim").get<Index>(), 0);
  load_tensors(head.network, ckpt);
  return head;
}

}  // namespace badenc

#endif  // BADENC_CHECKPOINT_HPP
