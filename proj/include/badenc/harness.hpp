#ifndef BADENC_HARNESS_HPP
#define BADENC_HARNESS_HPP

#include "badenc/attack.hpp"
#include "badenc/contrastive.hpp"
#include "badenc/downstream.hpp"
#include "badenc/evaluation.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace badenc {

// ---------------------------------------------------------------------------
// Configuration

/// Where a dataset comes from. Synthetic sets are generated from `seed`
/// (derived from the global seed when the file leaves it out); CIFAR-10 binary
/// batches are read from `files`.
struct DataSource {
  std::string kind = "synthetic";  // "synthetic" or "cifar10"
  int classes = 4;
  int per_class = 100;
  std::uint64_t seed = 0;
  std::vector<std::filesystem::path> files;
  std::size_t limit = 0;  // 0 keeps every record
  std::string name;       // label used in tables
  std::string content_hash;
};

struct TriggerSpec {
  std::string corner = "bottom-right";
  Index size = 10;
  std::array<float, 3> color{1.0f, 1.0f, 1.0f};
  std::filesystem::path mask_file;  // overrides corner/size when set
  std::string mask_hash;
};

struct TargetSpec {
  std::string task_id;
  int target_class = 0;
  TriggerSpec trigger;
  std::size_t reference_count = 3;
};

struct DefenseConfig {
  int nc_steps = 500;
  double nc_lambda = 1e-2;
  double nc_learning_rate = 0.1;
  Index nc_batch_size = 32;
  std::size_t nc_images = 200;
  int mntd_shadow_models = 4;
  Index mntd_queries = 8;
  int mntd_epochs = 300;
  double mntd_learning_rate = 0.05;
  double mntd_poison_fraction = 0.2;
};

struct ExperimentConfig {
  std::string experiment_id;
  std::uint64_t seed = 0;
  int image_size = 32;
  DataSource pretraining, downstream, test;
  std::string shadow_from = "pretraining";
  std::size_t shadow_size = 1000;
  std::uint64_t shadow_seed = 0;

  SimCLRConfig simclr;
  AugmentationConfig augmentation;
  AttackConfig attack;
  std::vector<TargetSpec> targets;
  std::string classifier_kind = "multi-shot";  // or "zero-shot"
  DownstreamConfig downstream_training;
  DefenseConfig defense;
};

/// Keys that must appear at the top level of every config file.
inline const std::vector<std::string> kRequiredKeys{"data", "experiment_id", "seed"};

/// Parses, checks and defaults a config tree. Relative file paths resolve
/// against `base_dir`. Throws ConfigError naming the offending key.
ExperimentConfig config_from_json(const nlohmann::json& tree, const std::filesystem::path& base_dir = {});

/// Reads a config file (JSON; // comments allowed) and resolves it.
ExperimentConfig validate_config(const std::filesystem::path& file);

/// The fully defaulted tree; every semantically meaningful field appears.
nlohmann::json resolved_json(const ExperimentConfig& cfg);

/// 16 hex digits of a stable hash of the canonical dump.
std::string digest_of(const nlohmann::json& tree);

/// Seed stream for one stage: the global seed mixed with a hash of the name.
std::uint64_t stage_seed(std::uint64_t global, std::string_view stage);

// ---------------------------------------------------------------------------
// Pipeline

enum class Stage { Pretrain, Attack, Downstream, Evaluate, Defend };

inline constexpr Stage kAllStages[] = {Stage::Pretrain, Stage::Attack, Stage::Downstream, Stage::Evaluate,
                                       Stage::Defend};

std::string to_string(Stage stage);
Stage parse_stage(const std::string& name);
/// Comma-separated list; "all" selects every stage.
std::vector<Stage> parse_stages(const std::string& list);
/// Stages a stage reads from.
std::vector<Stage> upstream_of(Stage stage);

/// manifest.json in the output directory. Every file the pipeline writes is
/// listed with its stage, the stage digest it was produced under and a
/// content hash; superseded versions stay listed.
struct Manifest {
  nlohmann::json tree;

  static Manifest load(const std::filesystem::path& out_dir);  // empty when absent
  void save(const std::filesystem::path& out_dir) const;

  bool has_stage(Stage stage) const;
  std::string stage_digest(Stage stage) const;
  /// Current artifact path (relative to the output directory) for a role.
  std::filesystem::path artifact(Stage stage, const std::string& role) const;
  std::vector<std::filesystem::path> all_artifacts() const;
};

struct RunOptions {
  bool force = false;
  std::function<void(const std::string&)> log;
};

struct StageOutcome {
  Stage stage;
  bool skipped = false;
  std::string digest;
};

/// Runs `stages` in pipeline order. A stage whose digest and artifacts are
/// already recorded is skipped unless `force`; a rerun writes versioned
/// siblings instead of overwriting. A stage whose inputs are missing or were
/// produced under a different upstream digest raises StageError.
std::vector<StageOutcome> run_pipeline(const ExperimentConfig& cfg, const std::filesystem::path& out_dir,
                                       const std::vector<Stage>& stages, const RunOptions& opts = {});

/// Digest each stage would be recorded under for this config.
std::string expected_digest(const ExperimentConfig& cfg, Stage stage);

/// Files under the output directory that the manifest does not list.
std::vector<std::filesystem::path> find_orphans(const std::filesystem::path& out_dir);

/// Reports written by the evaluate stage.
std::vector<MetricsReport> load_reports(const std::filesystem::path& out_dir);

// ---------------------------------------------------------------------------
// Tables

struct Tables {
  std::string attack_text;   // pre-training dataset, target task, ASR-B, ASR
  std::string attack_csv;
  std::string utility_text;  // pre-training dataset, downstream task, CA, BA
  std::string utility_csv;
};

/// Throws StageError for an empty list and IntegrityError for a repeated
/// experiment id.
Tables emit_tables(const std::vector<MetricsReport>& reports);

/// Tabulates the reports found in `out_dir` and `extra_dirs` into
/// `out_dir`/tables (text and CSV tables plus one CDF file per report) and
/// records the files in `out_dir`'s manifest.
std::vector<std::filesystem::path> write_tables(const std::filesystem::path& out_dir,
                                                const std::vector<std::filesystem::path>& extra_dirs = {});

}  // namespace badenc

#endif  // BADENC_HARNESS_HPP
