#include "badenc/harness.hpp"

#include "badenc/checkpoint.hpp"
#include "badenc/datasets.hpp"
#include "badenc/defenses.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace badenc {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw FormatError("cannot write " + path.string());
}

std::string content_hash(const fs::path& path) { return hex64(stable_hash(read_text(path))); }

std::string sanitize(const std::string& s) {
  std::string out = s;
  for (char& c : out) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_' && c != '.') c = '_';
  }
  return out;
}

std::string real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// ---------------------------------------------------------------------------
// inputs

LabeledDataset load_source(const DataSource& d, int image_size) {
  if (d.kind == "synthetic") return make_synthetic_dataset(d.classes, d.per_class, image_size, d.seed);
  LabeledDataset data = load_cifar10_binary(d.files);
  if (d.limit > 0 && d.limit < data.size()) {
    std::vector<std::size_t> keep(d.limit);
    for (std::size_t i = 0; i < d.limit; ++i) keep[i] = i;
    data = data.subset(keep);
  }
  if (image_size != 32) {
    for (auto& x : data.images) x = resize_bilinear(x, image_size, image_size);
  }
  return data;
}

std::string colour_hex(const std::array<float, 3>& c) {
  char buf[8];
  std::snprintf(buf, sizeof buf, "%02x%02x%02x", static_cast<int>(std::lround(c[0] * 255)),
                static_cast<int>(std::lround(c[1] * 255)), static_cast<int>(std::lround(c[2] * 255)));
  return buf;
}

Trigger make_trigger(const TriggerSpec& t, int image_size) {
  const Index n = image_size;
  if (t.mask_file.empty()) {
    return Trigger::square(n, n, parse_corner(t.corner), t.size, t.color,
                           "square-" + t.corner + "-" + std::to_string(t.size) + "-" + colour_hex(t.color));
  }
  // whitespace-separated 0/1 grid, image_size rows of image_size entries
  std::istringstream in(read_text(t.mask_file));
  Trigger::Mask mask(n, n);
  for (Index r = 0; r < n; ++r) {
    for (Index c = 0; c < n; ++c) {
      int v = -1;
      if (!(in >> v) || (v != 0 && v != 1)) {
        throw ConfigError("trigger mask file " + t.mask_file.string() + " must hold " + std::to_string(n) + "x" +
                          std::to_string(n) + " entries of 0 or 1");
      }
      mask(r, c) = static_cast<std::uint8_t>(v);
    }
  }
  std::string extra;
  if (in >> extra) throw ConfigError("trigger mask file " + t.mask_file.string() + " has trailing data");
  Image pattern(n, n);
  for (Index ch = 0; ch < Image::kChannels; ++ch) {
    for (Index r = 0; r < n; ++r) {
      for (Index c = 0; c < n; ++c) pattern(ch, r, c) = mask(r, c) ? t.color[static_cast<std::size_t>(ch)] : 0.0f;
    }
  }
  return Trigger(std::move(mask), std::move(pattern), "mask-" + t.mask_file.stem().string() + "-" + colour_hex(t.color));
}

std::vector<Image> references_for(const TargetSpec& t, const LabeledDataset& downstream) {
  const auto idx = downstream.indices_of(t.target_class);
  if (idx.size() < t.reference_count) {
    throw ConfigError("target '" + t.task_id + "' asks for " + std::to_string(t.reference_count) +
                      " references but class " + std::to_string(t.target_class) + " has " +
                      std::to_string(idx.size()) + " downstream images");
  }
  std::vector<Image> out;
  for (std::size_t i = 0; i < t.reference_count; ++i) out.push_back(downstream.images[idx[i]]);
  return out;
}

// ---------------------------------------------------------------------------
// manifest bookkeeping

/// Collects the files one stage writes. Paths that already exist get a
/// versioned sibling name so earlier artifacts are never overwritten.
class StageWriter {
 public:
  StageWriter(fs::path out, std::string stage) : out_(std::move(out)), stage_(std::move(stage)) {}

  fs::path claim(const std::string& role, const std::string& filename) {
    const fs::path base = fs::path(stage_) / filename;
    fs::path rel = base;
    for (int v = 2; fs::exists(out_ / rel); ++v) {
      rel = base.parent_path() / (base.stem().string() + ".v" + std::to_string(v) + base.extension().string());
    }
    fs::create_directories((out_ / rel).parent_path());
    roles_.emplace_back(role, rel.generic_string());
    return out_ / rel;
  }

  void commit(Manifest& m, const std::string& digest) const {
    json record{{"digest", digest}, {"artifacts", json::object()}};
    for (const auto& [role, rel] : roles_) {
      record["artifacts"][role] = rel;
      auto& list = m.tree["artifacts"];
      for (auto it = list.begin(); it != list.end();) {
        it = (*it)["path"] == rel ? list.erase(it) : it + 1;
      }
      list.push_back({{"path", rel}, {"stage", stage_}, {"role", role}, {"digest", digest},
                      {"hash", content_hash(out_ / rel)}});
    }
    m.tree["stages"][stage_] = record;
  }

 private:
  fs::path out_;
  std::string stage_;
  std::vector<std::pair<std::string, std::string>> roles_;
};

std::string recorded_hash(const Manifest& m, const std::string& rel) {
  for (const auto& a : m.tree["artifacts"]) {
    if (a["path"] == rel) return a["hash"];
  }
  return {};
}

bool artifacts_intact(const Manifest& m, const fs::path& out, const std::string& stage) {
  for (const auto& [role, rel] : m.tree["stages"][stage]["artifacts"].items()) {
    const fs::path p = out / rel.get<std::string>();
    if (!fs::exists(p) || content_hash(p) != recorded_hash(m, rel.get<std::string>())) return false;
  }
  return true;
}

struct Context {
  const ExperimentConfig& cfg;
  fs::path out;
  Manifest manifest;
  const RunOptions& opts;

  void log(const std::string& msg) const {
    if (opts.log) opts.log(msg);
  }
  fs::path input(Stage stage, const std::string& role) const { return out / manifest.artifact(stage, role); }
};

void require_upstream(const Context& ctx, Stage stage) {
  for (Stage u : upstream_of(stage)) {
    const std::string name = to_string(u);
    if (!ctx.manifest.has_stage(u)) {
      throw StageError("stage '" + to_string(stage) + "' needs the '" + name + "' artifacts, but " +
                       ctx.out.string() + " has none; run '" + name + "' first");
    }
    if (ctx.manifest.stage_digest(u) != expected_digest(ctx.cfg, u)) {
      throw StageError("stage '" + to_string(stage) + "' needs '" + name +
                       "' artifacts for this configuration, but the recorded ones were produced under a different "
                       "configuration; rerun '" + name + "' first");
    }
    if (!artifacts_intact(ctx.manifest, ctx.out, name)) {
      throw StageError("the '" + name + "' artifacts in " + ctx.out.string() + " are missing or modified; rerun '" +
                       name + "'");
    }
  }
}

// ---------------------------------------------------------------------------
// stages

void run_pretrain(Context& ctx, StageWriter& w) {
  const auto& cfg = ctx.cfg;
  const LabeledDataset data = load_source(cfg.pretraining, cfg.image_size);
  const int epochs = cfg.simclr.epochs;
  const auto r = pretrain_simclr<Real>(std::span<const Image>(data.images), cfg.simclr, cfg.augmentation,
                                       [&](int epoch, double loss) {
                                         ctx.log("pretrain: epoch " + std::to_string(epoch + 1) + "/" +
                                                 std::to_string(epochs) + " loss " + real(loss));
                                       });
  save_encoder(r.encoder, w.claim("encoder", "encoder.ckpt"), resolved_json(cfg)["pretrain"]);
  save_projection_head(r.head, w.claim("head", "head.ckpt"));
  std::string log = "# epoch loss\n";
  for (std::size_t e = 0; e < r.epoch_loss.size(); ++e) log += std::to_string(e) + " " + real(r.epoch_loss[e]) + "\n";
  write_text(w.claim("loss", "loss.txt"), log);
}

AttackSpec build_spec(const ExperimentConfig& cfg, const LabeledDataset& downstream) {
  AttackSpec spec;
  for (const auto& t : cfg.targets) {
    TargetPair p;
    p.task_id = t.task_id;
    p.target_class = t.target_class;
    p.trigger = make_trigger(t.trigger, cfg.image_size);
    p.references.inputs = references_for(t, downstream);
    spec.pairs.push_back(std::move(p));
  }
  return spec;
}

void run_attack(Context& ctx, StageWriter& w) {
  const auto& cfg = ctx.cfg;
  const auto clean = load_encoder<Real>(ctx.input(Stage::Pretrain, "encoder"));
  const LabeledDataset downstream = load_source(cfg.downstream, cfg.image_size);
  AttackSpec spec = build_spec(cfg, downstream);
  const LabeledDataset pool =
      cfg.shadow_from == "pretraining" ? load_source(cfg.pretraining, cfg.image_size) : downstream;
  spec.shadow = sample_shadow(pool, cfg.shadow_size, cfg.shadow_seed);
  const int epochs = cfg.attack.max_epoch;
  const auto r = badencoder_finetune<Real>(clean, spec, cfg.attack, [&](int epoch, const LossBreakdown& l) {
    ctx.log("attack: epoch " + std::to_string(epoch + 1) + "/" + std::to_string(epochs) + " L0 " + real(l.l0) +
            " L1 " + real(l.l1) + " L2 " + real(l.l2) + " L " + real(l.total));
  });
  save_encoder(r.backdoored, w.claim("encoder", "backdoored.ckpt"), resolved_json(cfg)["attack"]);
  write_loss_log(r.epoch_log, w.claim("loss", "loss.txt"));
}

void run_downstream(Context& ctx, StageWriter& w) {
  const auto& cfg = ctx.cfg;
  const auto clean = load_encoder<Real>(ctx.input(Stage::Pretrain, "encoder"));
  const auto bd = load_encoder<Real>(ctx.input(Stage::Attack, "encoder"));
  const LabeledDataset data = load_source(cfg.downstream, cfg.image_size);
  if (cfg.classifier_kind == "zero-shot") {
    write_text(w.claim("clean", "clean-prototypes.json"), prototypes_to_json(build_class_prototypes(clean, data)).dump(1) + "\n");
    write_text(w.claim("backdoored", "backdoored-prototypes.json"),
               prototypes_to_json(build_class_prototypes(bd, data)).dump(1) + "\n");
    return;
  }
  const int epochs = cfg.downstream_training.epochs;
  for (const auto& [role, enc] : {std::pair{std::string("clean"), &clean}, std::pair{std::string("backdoored"), &bd}}) {
    const auto r = train_multishot(extract_features(*enc, data), cfg.downstream_training, [&](int epoch, double loss, double acc) {
      if ((epoch + 1) % 10 == 0 || epoch + 1 == epochs) {
        ctx.log("downstream (" + role + "): epoch " + std::to_string(epoch + 1) + "/" + std::to_string(epochs) +
                " loss " + real(loss) + " train accuracy " + real(acc));
      }
    });
    save_classifier(r.classifier, w.claim(role, role + "-classifier.ckpt"), resolved_json(cfg)["downstream"]);
  }
}

/// Per-target-pair counts against the clean and backdoored pipelines.
template <typename Model>
ReportInputs measure(const ExperimentConfig& cfg, const TargetPair& pair, const Model& clean_model,
                     const Encoder<Real>& clean, const Model& bd_model, const Encoder<Real>& bd,
                     const LabeledDataset& test) {
  ReportInputs in;
  in.experiment_id = cfg.targets.size() == 1 ? cfg.experiment_id : cfg.experiment_id + "/" + pair.task_id;
  in.config_digest = expected_digest(cfg, Stage::Evaluate);
  in.pretraining_dataset = cfg.pretraining.name;
  in.downstream_task = pair.task_id;
  in.classifier_kind = cfg.classifier_kind == "zero-shot" ? "zero-shot-prototype-emulation" : "multi-shot";
  in.target_class = pair.target_class;
  in.trigger = pair.trigger.name();
  in.ca = accuracy_count(clean_model, clean, test);
  in.ba = accuracy_count(bd_model, bd, test);
  in.asr = attack_success_count(bd_model, bd, test, pair.trigger, pair.target_class);
  in.asr_b = attack_success_count(clean_model, clean, test, pair.trigger, pair.target_class);
  return in;
}

void run_evaluate(Context& ctx, StageWriter& w) {
  const auto& cfg = ctx.cfg;
  const auto clean = load_encoder<Real>(ctx.input(Stage::Pretrain, "encoder"));
  const auto bd = load_encoder<Real>(ctx.input(Stage::Attack, "encoder"));
  const LabeledDataset test = load_source(cfg.test, cfg.image_size);
  const AttackSpec spec = build_spec(cfg, load_source(cfg.downstream, cfg.image_size));

  json reports = json::array();
  for (const auto& pair : spec.pairs) {
    ReportInputs in;
    if (cfg.classifier_kind == "zero-shot") {
      const auto pc = prototypes_from_json<Real>(json::parse(read_text(ctx.input(Stage::Downstream, "clean"))));
      const auto pb = prototypes_from_json<Real>(json::parse(read_text(ctx.input(Stage::Downstream, "backdoored"))));
      in = measure(cfg, pair, pc, clean, pb, bd, test);
    } else {
      const auto cc = load_classifier<Real>(ctx.input(Stage::Downstream, "clean"));
      const auto cb = load_classifier<Real>(ctx.input(Stage::Downstream, "backdoored"));
      in = measure(cfg, pair, cc, clean, cb, bd, test);
    }
    const MetricsReport report = compile_report(in);
    ctx.log("evaluate: " + report.experiment_id + " CA " + real(report.CA()) + " BA " + real(report.BA()) + " ASR " +
            real(report.ASR()) + " ASR-B " + real(report.ASR_B()));
    reports.push_back(to_json(report));

    const Image& reference = pair.references.inputs.front();
    const auto cdf_clean = similarity_cdf(clean, reference, test, pair.trigger);
    const auto cdf_bd = similarity_cdf(bd, reference, test, pair.trigger);
    std::string csv = "rank,clean,backdoored\n";
    for (std::size_t i = 0; i < cdf_clean.size(); ++i) {
      csv += std::to_string(i) + "," + real(cdf_clean[i]) + "," + real(cdf_bd[i]) + "\n";
    }
    write_text(w.claim("cdf:" + report.experiment_id, "cdf-" + sanitize(pair.task_id) + ".csv"), csv);
  }
  write_text(w.claim("report", "report.json"), json{{"reports", reports}}.dump(2) + "\n");
}

json cleanse(const Classifier<Real>& clf, const Encoder<Real>& enc, const LabeledDataset& clean, const DefenseConfig& d,
             std::uint64_t seed, const std::function<void(const std::string&)>& log) {
  std::vector<double> norms;
  json rates = json::array();
  for (int c = 0; c < clf.num_classes; ++c) {
    const auto r = reverse_engineer_trigger(clf, enc, c, clean, d.nc_steps, d.nc_lambda,
                                            ReverseConfig{d.nc_learning_rate, d.nc_batch_size, seed});
    norms.push_back(r.l1_norm);
    rates.push_back(r.final_attack_rate);
    log("class " + std::to_string(c) + " mask norm " + real(r.l1_norm));
  }
  json out{{"l1_norms", norms}, {"final_attack_rates", rates}};
  if (norms.size() >= 3) {
    const auto a = anomaly_index(norms);
    out["anomaly_index"] = a.degenerate ? json(nullptr) : json(a.index);
    out["degenerate"] = a.degenerate;
    out["flagged_class"] = a.flagged_class;
    out["flagged"] = a.degenerate || a.index > kAnomalyThreshold;
  } else {
    out["anomaly_index"] = nullptr;
    out["note"] = "anomaly index needs at least 3 classes";
  }
  return out;
}

void run_defend(Context& ctx, StageWriter& w) {
  const auto& cfg = ctx.cfg;
  const auto& d = cfg.defense;
  if (cfg.classifier_kind != "multi-shot") {
    throw StageError("stage 'defend' needs multi-shot classifiers; this experiment uses zero-shot prototypes");
  }
  const std::uint64_t seed = stage_seed(cfg.seed, "defend");
  const auto clean = load_encoder<Real>(ctx.input(Stage::Pretrain, "encoder"));
  const auto bd = load_encoder<Real>(ctx.input(Stage::Attack, "encoder"));
  const auto clf_clean = load_classifier<Real>(ctx.input(Stage::Downstream, "clean"));
  const auto clf_bd = load_classifier<Real>(ctx.input(Stage::Downstream, "backdoored"));
  const LabeledDataset downstream = load_source(cfg.downstream, cfg.image_size);

  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < std::min(d.nc_images, downstream.size()); ++i) keep.push_back(i);
  const LabeledDataset nc_data = downstream.subset(keep);
  auto log = [&](const std::string& which) {
    return [&ctx, which](const std::string& m) { ctx.log("defend: neural cleanse (" + which + ") " + m); };
  };
  json nc{{"clean", cleanse(clf_clean, clean, nc_data, d, seed, log("clean"))},
          {"backdoored", cleanse(clf_bd, bd, nc_data, d, seed, log("backdoored"))}};

  // shadow population: heads on the clean encoder, half trained on clean
  // features and half on data poisoned with the first target's trigger
  const Trigger trigger = make_trigger(cfg.targets.front().trigger, cfg.image_size);
  const int target = cfg.targets.front().target_class;
  const auto clean_features = extract_features(clean, downstream);
  std::vector<std::unique_ptr<ModelHandle<Real>>> owned;
  std::vector<ModelHandle<Real>*> shadow_clean, shadow_bd;
  for (int k = 0; k < d.mntd_shadow_models; ++k) {
    DownstreamConfig dc = cfg.downstream_training;
    dc.seed = derive_seed(seed, stable_hash("mntd-clean"), k);
    owned.push_back(std::make_unique<PipelineHandle<Real>>(clean, train_multishot(clean_features, dc).classifier));
    shadow_clean.push_back(owned.back().get());

    LabeledDataset poisoned = downstream;
    Rng rng(derive_seed(seed, stable_hash("mntd-poison"), k));
    const auto order = rng.permutation(poisoned.size());
    const auto n_poison = static_cast<std::size_t>(d.mntd_poison_fraction * static_cast<double>(poisoned.size()));
    for (std::size_t i = 0; i < n_poison; ++i) {
      poisoned.images[order[i]] = embed_trigger(poisoned.images[order[i]], trigger);
      poisoned.labels[order[i]] = target;
    }
    dc.seed = derive_seed(seed, stable_hash("mntd-backdoored"), k);
    owned.push_back(
        std::make_unique<PipelineHandle<Real>>(clean, train_multishot(extract_features(clean, poisoned), dc).classifier));
    shadow_bd.push_back(owned.back().get());
    ctx.log("defend: shadow models " + std::to_string(k + 1) + "/" + std::to_string(d.mntd_shadow_models));
  }
  MntdConfig mc;
  mc.query_count = d.mntd_queries;
  mc.epochs = d.mntd_epochs;
  mc.learning_rate = d.mntd_learning_rate;
  mc.seed = seed;
  const auto meta = mntd_train<Real>(shadow_clean, shadow_bd, mc);
  PipelineHandle<Real> real_clean(clean, clf_clean), real_bd(bd, clf_bd);
  const double s_clean = mntd_score(meta.meta, real_clean);
  const double s_bd = mntd_score(meta.meta, real_bd);
  ctx.log("defend: MNTD scores clean " + real(s_clean) + " backdoored " + real(s_bd));

  json out{{"observational", true},
           {"neural_cleanse", nc},
           {"mntd",
            {{"shadow_models_per_class", d.mntd_shadow_models},
             {"train_accuracy", meta.train_accuracy},
             {"score_clean", s_clean},
             {"score_backdoored", s_bd},
             {"flags_clean", s_clean > 0.5},
             {"flags_backdoored", s_bd > 0.5}}}};
  write_text(w.claim("report", "defense.json"), out.dump(2) + "\n");
  write_text(w.claim("meta", "meta-classifier.json"), to_json(meta.meta).dump() + "\n");
}

json stage_inputs(const ExperimentConfig& cfg, Stage stage) {
  const json r = resolved_json(cfg);
  json j{{"stage", to_string(stage)}};
  switch (stage) {
    case Stage::Pretrain:
      j["image_size"] = r["data"]["image_size"];
      j["data"] = r["data"]["pretraining"];
      j["pretrain"] = r["pretrain"];
      break;
    case Stage::Attack:
      j["attack"] = r["attack"];
      j["shadow"] = r["data"]["shadow"];
      j["shadow_source"] = r["data"][cfg.shadow_from];
      j["references_from"] = r["data"]["downstream"];
      break;
    case Stage::Downstream:
      j["downstream"] = r["downstream"];
      j["data"] = r["data"]["downstream"];
      break;
    case Stage::Evaluate:
      j["experiment_id"] = r["experiment_id"];
      j["test"] = r["data"]["test"];
      j["names"] = {r["data"]["pretraining"]["name"], r["data"]["downstream"]["name"]};
      break;
    case Stage::Defend:
      j["defense"] = r["defense"];
      j["seed"] = stage_seed(cfg.seed, "defend");
      break;
  }
  json up = json::array();
  for (Stage u : upstream_of(stage)) up.push_back(expected_digest(cfg, u));
  j["upstream"] = up;
  return j;
}

}  // namespace

// ---------------------------------------------------------------------------

std::string to_string(Stage stage) {
  switch (stage) {
    case Stage::Pretrain:
      return "pretrain";
    case Stage::Attack:
      return "attack";
    case Stage::Downstream:
      return "downstream";
    case Stage::Evaluate:
      return "evaluate";
    case Stage::Defend:
      return "defend";
  }
  return "?";
}

Stage parse_stage(const std::string& name) {
  for (Stage s : kAllStages) {
    if (to_string(s) == name) return s;
  }
  throw ConfigError("unknown stage '" + name + "' (expected pretrain, attack, downstream, evaluate or defend)");
}

std::vector<Stage> parse_stages(const std::string& list) {
  if (list == "all") return {std::begin(kAllStages), std::end(kAllStages)};
  std::vector<Stage> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(parse_stage(item));
  }
  if (out.empty()) throw ConfigError("empty stage list");
  return out;
}

std::vector<Stage> upstream_of(Stage stage) {
  switch (stage) {
    case Stage::Pretrain:
      return {};
    case Stage::Attack:
      return {Stage::Pretrain};
    case Stage::Downstream:
      return {Stage::Pretrain, Stage::Attack};
    case Stage::Evaluate:
    case Stage::Defend:
      return {Stage::Pretrain, Stage::Attack, Stage::Downstream};
  }
  return {};
}

std::string expected_digest(const ExperimentConfig& cfg, Stage stage) { return digest_of(stage_inputs(cfg, stage)); }

Manifest Manifest::load(const std::filesystem::path& out_dir) {
  const fs::path p = out_dir / "manifest.json";
  if (!fs::exists(p)) return Manifest{{{"stages", json::object()}, {"artifacts", json::array()}}};
  try {
    Manifest m{json::parse(read_text(p))};
    if (!m.tree.contains("stages") || !m.tree.contains("artifacts")) throw FormatError("manifest lacks stages/artifacts");
    return m;
  } catch (const json::exception& e) {
    throw FormatError("cannot parse " + p.string() + ": " + e.what());
  }
}

void Manifest::save(const std::filesystem::path& out_dir) const { write_text(out_dir / "manifest.json", tree.dump(2) + "\n"); }

bool Manifest::has_stage(Stage stage) const { return tree["stages"].contains(to_string(stage)); }

std::string Manifest::stage_digest(Stage stage) const {
  return has_stage(stage) ? tree["stages"][to_string(stage)]["digest"].get<std::string>() : std::string();
}

std::filesystem::path Manifest::artifact(Stage stage, const std::string& role) const {
  const auto& rec = tree["stages"][to_string(stage)]["artifacts"];
  if (!rec.contains(role)) throw StageError("stage '" + to_string(stage) + "' recorded no '" + role + "' artifact");
  return rec[role].get<std::string>();
}

std::vector<std::filesystem::path> Manifest::all_artifacts() const {
  std::vector<fs::path> out;
  for (const auto& a : tree["artifacts"]) out.emplace_back(a["path"].get<std::string>());
  return out;
}

std::vector<StageOutcome> run_pipeline(const ExperimentConfig& cfg, const std::filesystem::path& out_dir,
                                       const std::vector<Stage>& stages, const RunOptions& opts) {
  Context ctx{cfg, out_dir, Manifest::load(out_dir), opts};
  const json& id = ctx.manifest.tree["experiment_id"];
  if (id.is_string() && id.get<std::string>() != cfg.experiment_id) {
    throw StageError(out_dir.string() + " holds experiment '" + id.get<std::string>() + "', not '" +
                     cfg.experiment_id + "'");
  }
  ctx.manifest.tree["experiment_id"] = cfg.experiment_id;

  std::vector<StageOutcome> outcomes;
  for (Stage stage : kAllStages) {
    if (std::find(stages.begin(), stages.end(), stage) == stages.end()) continue;
    const std::string name = to_string(stage);
    const std::string digest = expected_digest(cfg, stage);
    if (!opts.force && ctx.manifest.has_stage(stage) && ctx.manifest.stage_digest(stage) == digest &&
        artifacts_intact(ctx.manifest, out_dir, name)) {
      ctx.log(name + ": up to date");
      outcomes.push_back({stage, true, digest});
      continue;
    }
    require_upstream(ctx, stage);
    ctx.log(name + ": running");
    StageWriter w(out_dir, name);
    switch (stage) {
      case Stage::Pretrain:
        run_pretrain(ctx, w);
        break;
      case Stage::Attack:
        run_attack(ctx, w);
        break;
      case Stage::Downstream:
        run_downstream(ctx, w);
        break;
      case Stage::Evaluate:
        run_evaluate(ctx, w);
        break;
      case Stage::Defend:
        run_defend(ctx, w);
        break;
    }
    w.commit(ctx.manifest, digest);
    ctx.manifest.save(out_dir);
    outcomes.push_back({stage, false, digest});
  }
  ctx.manifest.save(out_dir);
  return outcomes;
}

std::vector<std::filesystem::path> find_orphans(const std::filesystem::path& out_dir) {
  const Manifest m = Manifest::load(out_dir);
  std::set<std::string> listed;
  for (const auto& p : m.all_artifacts()) listed.insert(p.generic_string());
  std::vector<fs::path> orphans;
  if (!fs::exists(out_dir)) return orphans;
  for (const auto& e : fs::recursive_directory_iterator(out_dir)) {
    if (!e.is_regular_file()) continue;
    const std::string rel = fs::relative(e.path(), out_dir).generic_string();
    if (rel != "manifest.json" && !listed.count(rel)) orphans.emplace_back(rel);
  }
  std::sort(orphans.begin(), orphans.end());
  return orphans;
}

std::vector<MetricsReport> load_reports(const std::filesystem::path& out_dir) {
  const Manifest m = Manifest::load(out_dir);
  if (!m.has_stage(Stage::Evaluate)) throw StageError(out_dir.string() + " holds no evaluate reports");
  const json tree = json::parse(read_text(out_dir / m.artifact(Stage::Evaluate, "report")));
  std::vector<MetricsReport> out;
  for (const auto& r : tree.at("reports")) out.push_back(report_from_json(r));
  return out;
}

// ---------------------------------------------------------------------------
// tables

namespace {

std::string percent(double rate) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * rate);
  return buf;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

/// Left-aligned text columns, right-aligned numeric columns.
std::string render(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows,
                   std::size_t numeric_from) {
  std::vector<std::size_t> width(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) {
    width[c] = header[c].size();
    for (const auto& r : rows) width[c] = std::max(width[c], r[c].size());
  }
  auto line = [&](const std::vector<std::string>& cells) {
    std::string s;
    for (std::size_t c = 0; c < cells.size(); ++c) {
      const std::string pad(width[c] - cells[c].size(), ' ');
      s += (c ? "  " : "") + (c >= numeric_from ? pad + cells[c] : cells[c] + pad);
    }
    while (!s.empty() && s.back() == ' ') s.pop_back();
    return s + "\n";
  };
  std::string out = line(header);
  std::size_t total = 2 * (header.size() - 1);
  for (auto w : width) total += w;
  out += std::string(total, '-') + "\n";
  for (const auto& r : rows) out += line(r);
  return out;
}

}  // namespace

Tables emit_tables(const std::vector<MetricsReport>& reports) {
  if (reports.empty()) throw StageError("no reports to tabulate; run the evaluate stage first");
  std::set<std::string> ids;
  for (const auto& r : reports) {
    if (!ids.insert(r.experiment_id).second) throw IntegrityError("duplicate experiment id '" + r.experiment_id + "'");
  }
  Tables t;
  std::vector<std::vector<std::string>> attack_rows, utility_rows;
  t.attack_csv = "pretraining_dataset,downstream_task,asr_b,asr,experiment_id,asr_b_hits,asr_b_total,asr_hits,asr_total\n";
  t.utility_csv = "pretraining_dataset,downstream_task,ca,ba,experiment_id,ca_hits,ca_total,ba_hits,ba_total\n";
  for (const auto& r : reports) {
    attack_rows.push_back({r.pretraining_dataset, r.downstream_task, percent(r.ASR_B()), percent(r.ASR())});
    utility_rows.push_back({r.pretraining_dataset, r.downstream_task, percent(r.CA()), percent(r.BA())});
    t.attack_csv += csv_field(r.pretraining_dataset) + "," + csv_field(r.downstream_task) + "," + real(r.ASR_B()) + "," +
                    real(r.ASR()) + "," + csv_field(r.experiment_id) + "," + std::to_string(r.asr_b.hits) + "," +
                    std::to_string(r.asr_b.total) + "," + std::to_string(r.asr.hits) + "," +
                    std::to_string(r.asr.total) + "\n";
    t.utility_csv += csv_field(r.pretraining_dataset) + "," + csv_field(r.downstream_task) + "," + real(r.CA()) + "," +
                     real(r.BA()) + "," + csv_field(r.experiment_id) + "," + std::to_string(r.ca.hits) + "," +
                     std::to_string(r.ca.total) + "," + std::to_string(r.ba.hits) + "," +
                     std::to_string(r.ba.total) + "\n";
  }
  t.attack_text = render({"Pre-training dataset", "Target downstream dataset", "ASR-B (%)", "ASR (%)"}, attack_rows, 2);
  t.utility_text = render({"Pre-training dataset", "Downstream dataset", "CA (%)", "BA (%)"}, utility_rows, 2);
  return t;
}

std::vector<std::filesystem::path> write_tables(const std::filesystem::path& out_dir,
                                                const std::vector<std::filesystem::path>& extra_dirs) {
  std::vector<fs::path> dirs{out_dir};
  dirs.insert(dirs.end(), extra_dirs.begin(), extra_dirs.end());
  std::vector<MetricsReport> reports;
  std::vector<std::pair<std::string, fs::path>> cdfs;  // report id -> file
  for (const auto& dir : dirs) {
    const auto rs = load_reports(dir);
    reports.insert(reports.end(), rs.begin(), rs.end());
    const Manifest m = Manifest::load(dir);
    for (const auto& r : rs) cdfs.emplace_back(r.experiment_id, dir / m.artifact(Stage::Evaluate, "cdf:" + r.experiment_id));
  }
  const Tables t = emit_tables(reports);

  Manifest manifest = Manifest::load(out_dir);
  std::vector<std::pair<std::string, std::string>> files{{"attack-text", "tables/attack.txt"},
                                                         {"attack-csv", "tables/attack.csv"},
                                                         {"utility-text", "tables/utility.txt"},
                                                         {"utility-csv", "tables/utility.csv"}};
  write_text(out_dir / files[0].second, t.attack_text);
  write_text(out_dir / files[1].second, t.attack_csv);
  write_text(out_dir / files[2].second, t.utility_text);
  write_text(out_dir / files[3].second, t.utility_csv);
  for (const auto& [id, src] : cdfs) {
    const std::string rel = "tables/cdf-" + sanitize(id) + ".csv";
    write_text(out_dir / rel, read_text(src));
    files.emplace_back("cdf:" + id, rel);
  }

  json digests = json::array();
  for (const auto& r : reports) digests.push_back(r.config_digest);
  const std::string digest = digest_of(digests);
  json record{{"digest", digest}, {"artifacts", json::object()}};
  auto& list = manifest.tree["artifacts"];
  std::vector<fs::path> written;
  for (const auto& [role, rel] : files) {
    for (auto it = list.begin(); it != list.end();) it = (*it)["path"] == rel ? list.erase(it) : it + 1;
    list.push_back({{"path", rel}, {"stage", "report"}, {"role", role}, {"digest", digest},
                    {"hash", content_hash(out_dir / rel)}});
    record["artifacts"][role] = rel;
    written.push_back(out_dir / rel);
  }
  manifest.tree["stages"]["report"] = record;
  manifest.save(out_dir);
  return written;
}

}  // namespace badenc
