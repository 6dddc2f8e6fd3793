#include "badenc/attack.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>

namespace badenc {

void AttackSpec::validate_pairs(Index height, Index width) const {
  require(!pairs.empty(), "attack needs at least one target pair");
  for (const auto& pair : pairs) {
    require(pair.references.count() >= 1, "target pair '" + pair.task_id + "' has no reference inputs");
    require(pair.trigger.height() == height && pair.trigger.width() == width,
            "trigger '" + pair.trigger.name() + "' does not match the input dimensions");
    for (const Image& r : pair.references.inputs) {
      require(r.height() == height && r.width() == width, "reference input does not match the input dimensions");
    }
  }
}

void AttackSpec::validate(Index height, Index width) const {
  validate_pairs(height, width);
  require(!shadow.images.empty(), "shadow dataset is empty");
  for (const Image& x : shadow.images) {
    require(x.height() == height && x.width() == width, "shadow image does not match the input dimensions");
  }
}

void AttackConfig::validate() const {
  require(lambda1 >= 0.0 && lambda2 >= 0.0, "lambda1 and lambda2 must be non-negative");
  require(learning_rate >= 0.0, "learning rate must be non-negative");
  require(batch_size >= 1, "batch size must be at least 1");
  require(max_epoch >= 0, "max_epoch must be non-negative");
  reference_augmentation.validate();
}

void write_loss_log(const std::vector<LossBreakdown>& log, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << "# epoch L0 L1 L2 L\n" << std::setprecision(17);
  for (std::size_t e = 0; e < log.size(); ++e) {
    out << e + 1 << ' ' << log[e].l0 << ' ' << log[e].l1 << ' ' << log[e].l2 << ' ' << log[e].total << '\n';
  }
}

std::vector<LossBreakdown> read_loss_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<LossBreakdown> log;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream fields(line);
    long epoch = 0;
    LossBreakdown b;
    if (!(fields >> epoch >> b.l0 >> b.l1 >> b.l2 >> b.total)) throw FormatError("malformed loss log line: " + line);
    log.push_back(b);
  }
  return log;
}

}  // namespace badenc
