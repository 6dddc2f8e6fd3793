#include "badenc/harness.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace badenc {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

std::string join(const std::vector<std::string>& parts) {
  std::string out;
  for (const auto& p : parts) out += (out.empty() ? "" : ", ") + p;
  return out;
}

/// One JSON object being read; remembers which keys were consumed so the
/// leftovers can be reported as unknown.
class Section {
 public:
  Section(const json& node, std::string path) : node_(node), path_(std::move(path)) {
    if (!node_.is_object()) throw ConfigError("'" + path_ + "' must be an object");
  }

  const std::string& path() const { return path_; }

  std::string key_name(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const json* find(const std::string& key) {
    seen_.insert(key);
    const auto it = node_.find(key);
    return it == node_.end() ? nullptr : &*it;
  }

  template <typename T>
  T get(const std::string& key, T fallback) {
    const json* v = find(key);
    return v ? convert<T>(*v, key_name(key)) : fallback;
  }

  template <typename T>
  T need(const std::string& key) {
    const json* v = find(key);
    if (!v) throw ConfigError("missing required key '" + key_name(key) + "'");
    return convert<T>(*v, key_name(key));
  }

  Section child(const std::string& key) {
    const json* v = find(key);
    if (!v) throw ConfigError("missing required key '" + key_name(key) + "'");
    return Section(*v, key_name(key));
  }

  void finish() const {
    for (const auto& [key, value] : node_.items()) {
      if (!seen_.count(key)) throw ConfigError("unknown key '" + key_name(key) + "'");
    }
  }

  template <typename T>
  static T convert(const json& v, const std::string& name) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError("'" + name + "' must be true or false");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError("'" + name + "' must be an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0) {
          throw ConfigError("'" + name + "' must be non-negative");
        }
      }
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError("'" + name + "' must be a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError("'" + name + "' must be a string");
    }
    return v.get<T>();
  }

 private:
  const json& node_;
  std::string path_;
  std::set<std::string> seen_;
};

void check(bool ok, const std::string& key, const std::string& message) {
  if (!ok) throw ConfigError("'" + key + "' " + message);
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string file_hash(const fs::path& path, const std::string& key) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("'" + key + "' refers to a missing file: " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return hex64(stable_hash(buf.str()));
}

fs::path resolve(const fs::path& p, const fs::path& base) { return p.is_absolute() || base.empty() ? p : base / p; }

DataSource read_source(Section s, const std::string& role, std::uint64_t global, const fs::path& base) {
  DataSource d;
  d.kind = s.need<std::string>("source");
  if (d.kind == "synthetic") {
    d.classes = s.get<int>("classes", 4);
    d.per_class = s.get<int>("per_class", 100);
    d.seed = s.get<std::uint64_t>("seed", derive_seed(global, stable_hash("data." + role)));
    check(d.classes >= 2, s.key_name("classes"), "must be at least 2");
    check(d.per_class >= 1, s.key_name("per_class"), "must be at least 1");
    d.name = s.get<std::string>("name", "synthetic-" + std::to_string(d.classes));
  } else if (d.kind == "cifar10") {
    const json* files = s.find("files");
    if (!files) throw ConfigError("missing required key '" + s.key_name("files") + "'");
    check(files->is_array() && !files->empty(), s.key_name("files"), "must be a non-empty list of paths");
    std::string hashes;
    for (const auto& f : *files) {
      check(f.is_string(), s.key_name("files"), "must be a non-empty list of paths");
      d.files.push_back(resolve(f.get<std::string>(), base));
      hashes += file_hash(d.files.back(), s.key_name("files"));
    }
    d.content_hash = hex64(stable_hash(hashes));
    d.limit = s.get<std::size_t>("limit", 0);
    d.classes = 10;
    d.name = s.get<std::string>("name", "cifar10");
  } else {
    throw ConfigError("'" + s.key_name("source") + "' must be \"synthetic\" or \"cifar10\", got \"" + d.kind + "\"");
  }
  s.finish();
  return d;
}

std::size_t source_size(const DataSource& d) {
  if (d.kind == "synthetic") return static_cast<std::size_t>(d.classes) * static_cast<std::size_t>(d.per_class);
  return d.limit;  // unknown until read when 0
}

AugmentationConfig read_augmentation(Section s) {
  AugmentationConfig a;
  a.crop_scale_lo = s.get("crop_scale_lo", a.crop_scale_lo);
  a.crop_scale_hi = s.get("crop_scale_hi", a.crop_scale_hi);
  a.flip_probability = s.get("flip_probability", a.flip_probability);
  a.color_jitter_strength = s.get("color_jitter_strength", a.color_jitter_strength);
  a.blur_probability = s.get("blur_probability", a.blur_probability);
  s.finish();
  try {
    a.validate();
  } catch (const ArgumentError& e) {
    throw ConfigError("'" + s.path() + "': " + e.what());
  }
  return a;
}

TriggerSpec read_trigger(Section s, int image_size, const fs::path& base) {
  TriggerSpec t;
  if (const json* mask = s.find("mask_file")) {
    t.mask_file = resolve(Section::convert<std::string>(*mask, s.key_name("mask_file")), base);
    t.mask_hash = file_hash(t.mask_file, s.key_name("mask_file"));
    t.corner.clear();
    t.size = 0;
  } else {
    t.corner = s.get<std::string>("corner", t.corner);
    try {
      parse_corner(t.corner);
    } catch (const ArgumentError& e) {
      throw ConfigError("'" + s.key_name("corner") + "': " + e.what());
    }
    t.size = s.get<Index>("size", t.size);
    check(t.size >= 1 && t.size <= image_size, s.key_name("size"), "must lie in [1, image_size]");
  }
  if (const json* c = s.find("color")) {
    check(c->is_array() && c->size() == 3, s.key_name("color"), "must be a list of three numbers in [0, 1]");
    for (std::size_t i = 0; i < 3; ++i) {
      const auto v = Section::convert<double>((*c)[i], s.key_name("color"));
      check(v >= 0.0 && v <= 1.0, s.key_name("color"), "must be a list of three numbers in [0, 1]");
      t.color[i] = static_cast<float>(v);
    }
  }
  s.finish();
  return t;
}

json source_json(const DataSource& d) {
  json j{{"source", d.kind}, {"name", d.name}};
  if (d.kind == "synthetic") {
    j["classes"] = d.classes;
    j["per_class"] = d.per_class;
    j["seed"] = d.seed;
  } else {
    std::vector<std::string> files;
    for (const auto& f : d.files) files.push_back(f.string());
    j["files"] = files;
    j["content_hash"] = d.content_hash;
    j["limit"] = d.limit;
  }
  return j;
}

json augmentation_json(const AugmentationConfig& a) {
  return {{"crop_scale_lo", a.crop_scale_lo},
          {"crop_scale_hi", a.crop_scale_hi},
          {"flip_probability", a.flip_probability},
          {"color_jitter_strength", a.color_jitter_strength},
          {"blur_probability", a.blur_probability}};
}

}  // namespace

std::string digest_of(const nlohmann::json& tree) { return hex64(stable_hash(tree.dump())); }

std::uint64_t stage_seed(std::uint64_t global, std::string_view stage) { return derive_seed(global, stable_hash(stage)); }

ExperimentConfig config_from_json(const nlohmann::json& tree, const std::filesystem::path& base_dir) {
  if (!tree.is_object()) throw ConfigError("config must be a key/value tree");
  std::vector<std::string> missing;
  for (const auto& k : kRequiredKeys) {
    if (!tree.contains(k)) missing.push_back(k);
  }
  if (!missing.empty()) throw ConfigError("config is missing required keys: " + join(missing));

  Section root(tree, "");
  ExperimentConfig cfg;
  cfg.experiment_id = root.need<std::string>("experiment_id");
  check(!cfg.experiment_id.empty(), "experiment_id", "must not be empty");
  cfg.seed = root.need<std::uint64_t>("seed");

  {
    Section data = root.child("data");
    cfg.image_size = data.get("image_size", cfg.image_size);
    check(cfg.image_size >= 4, "data.image_size", "must be at least 4");
    cfg.pretraining = read_source(data.child("pretraining"), "pretraining", cfg.seed, base_dir);
    cfg.downstream = read_source(data.child("downstream"), "downstream", cfg.seed, base_dir);
    cfg.test = read_source(data.child("test"), "test", cfg.seed, base_dir);
    check(cfg.test.classes == cfg.downstream.classes, "data.test.classes", "must equal data.downstream.classes");
    if (const json* sh = data.find("shadow")) {
      Section s(*sh, "data.shadow");
      cfg.shadow_from = s.get<std::string>("from", cfg.shadow_from);
      check(cfg.shadow_from == "pretraining" || cfg.shadow_from == "downstream", "data.shadow.from",
            "must be \"pretraining\" or \"downstream\"");
      cfg.shadow_size = s.get("size", cfg.shadow_size);
      cfg.shadow_seed = s.get<std::uint64_t>("seed", derive_seed(cfg.seed, stable_hash("data.shadow")));
      s.finish();
    } else {
      cfg.shadow_seed = derive_seed(cfg.seed, stable_hash("data.shadow"));
    }
    check(cfg.shadow_size >= 1, "data.shadow.size", "must be at least 1");
    const auto pool = source_size(cfg.shadow_from == "pretraining" ? cfg.pretraining : cfg.downstream);
    check(pool == 0 || cfg.shadow_size <= pool, "data.shadow.size", "exceeds the size of its source dataset");
    data.finish();
  }

  cfg.simclr.seed = stage_seed(cfg.seed, "pretrain");
  if (const json* p = root.find("pretrain")) {
    Section s(*p, "pretrain");
    auto& c = cfg.simclr;
    c.architecture = s.get("architecture", c.architecture);
    c.feature_dim = s.get("feature_dim", c.feature_dim);
    c.latent_dim = s.get("latent_dim", c.latent_dim);
    c.temperature = s.get("temperature", c.temperature);
    c.batch_size = s.get("batch_size", c.batch_size);
    c.epochs = s.get("epochs", c.epochs);
    c.learning_rate = s.get("learning_rate", c.learning_rate);
    c.seed = s.get("seed", c.seed);
    if (const json* a = s.find("augmentation")) cfg.augmentation = read_augmentation(Section(*a, "pretrain.augmentation"));
    s.finish();
  }
  try {
    cfg.simclr.validate();
    make_encoder<Real>(cfg.simclr.architecture, cfg.image_size, cfg.image_size, cfg.simclr.feature_dim, 0);
  } catch (const ArgumentError& e) {
    throw ConfigError(std::string("pretrain: ") + e.what());
  }
  check(source_size(cfg.pretraining) == 0 || static_cast<Index>(source_size(cfg.pretraining)) >= cfg.simclr.batch_size,
        "pretrain.batch_size", "exceeds the pre-training set size");

  cfg.attack.seed = stage_seed(cfg.seed, "attack");
  std::vector<TargetSpec> targets;
  bool targets_given = false;
  if (const json* a = root.find("attack")) {
    Section s(*a, "attack");
    auto& c = cfg.attack;
    c.lambda1 = s.get("lambda1", c.lambda1);
    c.lambda2 = s.get("lambda2", c.lambda2);
    c.include_l0 = s.get("include_l0", c.include_l0);
    c.learning_rate = s.get("learning_rate", c.learning_rate);
    c.batch_size = s.get("batch_size", c.batch_size);
    c.max_epoch = s.get("epochs", c.max_epoch);
    c.freeze_batchnorm = s.get("freeze_batchnorm", c.freeze_batchnorm);
    c.augment_references = s.get("augment_references", c.augment_references);
    c.seed = s.get("seed", c.seed);
    const auto opt = s.get<std::string>("optimizer", "sgd");
    check(opt == "sgd" || opt == "adam", "attack.optimizer", "must be \"sgd\" or \"adam\"");
    c.optimizer = opt == "adam" ? AttackOptimizer::Adam : AttackOptimizer::GradientDescent;
    if (const json* ra = s.find("reference_augmentation")) {
      c.reference_augmentation = read_augmentation(Section(*ra, "attack.reference_augmentation"));
    }
    if (const json* ts = s.find("targets")) {
      targets_given = true;
      check(ts->is_array() && !ts->empty(), "attack.targets", "must be a non-empty list");
      for (std::size_t i = 0; i < ts->size(); ++i) {
        const std::string key = "attack.targets[" + std::to_string(i) + "]";
        Section t((*ts)[i], key);
        TargetSpec spec;
        spec.task_id = t.get<std::string>("task_id", cfg.downstream.name);
        spec.target_class = t.get("target_class", spec.target_class);
        check(spec.target_class >= 0 && spec.target_class < cfg.downstream.classes, key + ".target_class",
              "must be a class of the downstream dataset");
        spec.reference_count = t.get("references", spec.reference_count);
        check(spec.reference_count >= 1, key + ".references", "must be at least 1");
        if (const json* tr = t.find("trigger")) spec.trigger = read_trigger(Section(*tr, key + ".trigger"), cfg.image_size, base_dir);
        t.finish();
        for (const auto& other : targets) check(other.task_id != spec.task_id, key + ".task_id", "repeats an earlier task id");
        targets.push_back(spec);
      }
    }
    s.finish();
  }
  if (!targets_given) {
    TargetSpec t;
    t.task_id = cfg.downstream.name;
    t.trigger.size = std::min<Index>(10, cfg.image_size);
    targets.push_back(t);
  }
  cfg.targets = targets;
  try {
    cfg.attack.validate();
  } catch (const ArgumentError& e) {
    throw ConfigError(std::string("attack: ") + e.what());
  }
  check(static_cast<std::size_t>(cfg.attack.batch_size) <= cfg.shadow_size, "attack.batch_size",
        "exceeds data.shadow.size");

  cfg.downstream_training.seed = stage_seed(cfg.seed, "downstream");
  if (const json* d = root.find("downstream")) {
    Section s(*d, "downstream");
    auto& c = cfg.downstream_training;
    cfg.classifier_kind = s.get("classifier", cfg.classifier_kind);
    check(cfg.classifier_kind == "multi-shot" || cfg.classifier_kind == "zero-shot", "downstream.classifier",
          "must be \"multi-shot\" or \"zero-shot\"");
    c.epochs = s.get("epochs", c.epochs);
    c.learning_rate = s.get("learning_rate", c.learning_rate);
    c.batch_size = s.get("batch_size", c.batch_size);
    if (const json* h = s.find("hidden")) {
      check(h->is_array(), "downstream.hidden", "must be a list of layer widths");
      c.hidden.clear();
      for (const auto& w : *h) {
        c.hidden.push_back(Section::convert<Index>(w, "downstream.hidden"));
        check(c.hidden.back() >= 1, "downstream.hidden", "widths must be positive");
      }
    }
    c.seed = s.get("seed", c.seed);
    s.finish();
  }
  try {
    cfg.downstream_training.validate();
  } catch (const ArgumentError& e) {
    throw ConfigError(std::string("downstream: ") + e.what());
  }

  if (const json* d = root.find("defense")) {
    Section s(*d, "defense");
    auto& c = cfg.defense;
    c.nc_steps = s.get("nc_steps", c.nc_steps);
    c.nc_lambda = s.get("nc_lambda", c.nc_lambda);
    c.nc_learning_rate = s.get("nc_learning_rate", c.nc_learning_rate);
    c.nc_batch_size = s.get("nc_batch_size", c.nc_batch_size);
    c.nc_images = s.get("nc_images", c.nc_images);
    c.mntd_shadow_models = s.get("mntd_shadow_models", c.mntd_shadow_models);
    c.mntd_queries = s.get("mntd_queries", c.mntd_queries);
    c.mntd_epochs = s.get("mntd_epochs", c.mntd_epochs);
    c.mntd_learning_rate = s.get("mntd_learning_rate", c.mntd_learning_rate);
    c.mntd_poison_fraction = s.get("mntd_poison_fraction", c.mntd_poison_fraction);
    s.finish();
    check(c.nc_steps >= 1, "defense.nc_steps", "must be at least 1");
    check(c.nc_lambda >= 0.0, "defense.nc_lambda", "must be non-negative");
    check(c.nc_learning_rate > 0.0, "defense.nc_learning_rate", "must be positive");
    check(c.nc_batch_size >= 1, "defense.nc_batch_size", "must be at least 1");
    check(c.nc_images >= 1, "defense.nc_images", "must be at least 1");
    check(c.mntd_shadow_models >= 2, "defense.mntd_shadow_models", "must be at least 2");
    check(c.mntd_queries >= 1, "defense.mntd_queries", "must be at least 1");
    check(c.mntd_epochs >= 1, "defense.mntd_epochs", "must be at least 1");
    check(c.mntd_learning_rate > 0.0, "defense.mntd_learning_rate", "must be positive");
    check(c.mntd_poison_fraction > 0.0 && c.mntd_poison_fraction < 1.0, "defense.mntd_poison_fraction",
          "must lie in (0, 1)");
  }
  root.finish();
  return cfg;
}

ExperimentConfig validate_config(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw ConfigError("cannot read config file " + file.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();
  json tree = json::object();
  if (text.find_first_not_of(" \t\r\n") != std::string::npos) {
    try {
      tree = json::parse(text, nullptr, true, true);
    } catch (const json::parse_error& e) {
      throw ConfigError("config file " + file.string() + " is not valid JSON: " + e.what());
    }
  }
  return config_from_json(tree, file.parent_path());
}

nlohmann::json resolved_json(const ExperimentConfig& cfg) {
  json targets = json::array();
  for (const auto& t : cfg.targets) {
    json trig{{"color", t.trigger.color}};
    if (t.trigger.mask_file.empty()) {
      trig["corner"] = t.trigger.corner;
      trig["size"] = t.trigger.size;
    } else {
      trig["mask_file"] = t.trigger.mask_file.string();
      trig["mask_hash"] = t.trigger.mask_hash;
    }
    targets.push_back({{"task_id", t.task_id}, {"target_class", t.target_class}, {"references", t.reference_count},
                       {"trigger", trig}});
  }
  const auto& s = cfg.simclr;
  const auto& a = cfg.attack;
  const auto& d = cfg.downstream_training;
  const auto& f = cfg.defense;
  return {
      {"experiment_id", cfg.experiment_id},
      {"seed", cfg.seed},
      {"data",
       {{"image_size", cfg.image_size},
        {"pretraining", source_json(cfg.pretraining)},
        {"downstream", source_json(cfg.downstream)},
        {"test", source_json(cfg.test)},
        {"shadow", {{"from", cfg.shadow_from}, {"size", cfg.shadow_size}, {"seed", cfg.shadow_seed}}}}},
      {"pretrain",
       {{"architecture", s.architecture},
        {"feature_dim", s.feature_dim},
        {"latent_dim", s.latent_dim},
        {"temperature", s.temperature},
        {"batch_size", s.batch_size},
        {"epochs", s.epochs},
        {"learning_rate", s.learning_rate},
        {"seed", s.seed},
        {"augmentation", augmentation_json(cfg.augmentation)}}},
      {"attack",
       {{"lambda1", a.lambda1},
        {"lambda2", a.lambda2},
        {"include_l0", a.include_l0},
        {"learning_rate", a.learning_rate},
        {"batch_size", a.batch_size},
        {"epochs", a.max_epoch},
        {"freeze_batchnorm", a.freeze_batchnorm},
        {"augment_references", a.augment_references},
        {"optimizer", a.optimizer == AttackOptimizer::Adam ? "adam" : "sgd"},
        {"seed", a.seed},
        {"reference_augmentation", augmentation_json(a.reference_augmentation)},
        {"targets", targets}}},
      {"downstream",
       {{"classifier", cfg.classifier_kind},
        {"epochs", d.epochs},
        {"learning_rate", d.learning_rate},
        {"batch_size", d.batch_size},
        {"hidden", d.hidden},
        {"seed", d.seed}}},
      {"defense",
       {{"nc_steps", f.nc_steps},
        {"nc_lambda", f.nc_lambda},
        {"nc_learning_rate", f.nc_learning_rate},
        {"nc_batch_size", f.nc_batch_size},
        {"nc_images", f.nc_images},
        {"mntd_shadow_models", f.mntd_shadow_models},
        {"mntd_queries", f.mntd_queries},
        {"mntd_epochs", f.mntd_epochs},
        {"mntd_learning_rate", f.mntd_learning_rate},
        {"mntd_poison_fraction", f.mntd_poison_fraction}}},
  };
}

}  // namespace badenc
