// Command-line front end for the experiment pipeline.
//
//   badenc <pretrain|attack|downstream|evaluate|defend|report> --config FILE --out DIR [--force] [--stages LIST]
//
// Exit codes: 0 success, 2 config error, 3 stage-dependency error,
// 4 divergence, 1 anything else.

#include "badenc/harness.hpp"

#include <CLI11.hpp>

#include <cstdio>

namespace {

enum ExitCode { kOk = 0, kOther = 1, kConfig = 2, kStage = 3, kDivergence = 4 };

struct Options {
  std::string config;
  std::string out;
  bool force = false;
  std::string stages;
  std::vector<std::string> include;
};

int run(const std::string& command, const Options& o) {
  using namespace badenc;
  RunOptions opts;
  opts.force = o.force;
  opts.log = [](const std::string& m) { std::fprintf(stderr, "%s\n", m.c_str()); };

  if (command == "report") {
    if (!o.config.empty()) validate_config(o.config);
    std::vector<std::filesystem::path> extra(o.include.begin(), o.include.end());
    for (const auto& p : write_tables(o.out, extra)) std::printf("%s\n", p.string().c_str());
    return kOk;
  }
  const ExperimentConfig cfg = validate_config(o.config);
  const auto stages = o.stages.empty() ? std::vector<Stage>{parse_stage(command)} : parse_stages(o.stages);
  for (const auto& r : run_pipeline(cfg, o.out, stages, opts)) {
    std::printf("%s %s %s\n", to_string(r.stage).c_str(), r.skipped ? "up-to-date" : "done", r.digest.c_str());
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"BadEncoder desk-scale toolkit"};
  app.require_subcommand(1);
  Options o;
  for (const char* name : {"pretrain", "attack", "downstream", "evaluate", "defend", "report"}) {
    auto* sub = app.add_subcommand(name, std::string("run the ") + name + " stage");
    auto* cfg = sub->add_option("--config", o.config, "experiment config (JSON)");
    if (std::string(name) != "report") cfg->required();
    sub->add_option("--out", o.out, "output directory")->required();
    sub->add_flag("--force", o.force, "rerun stages whose artifacts are current");
    sub->add_option("--stages", o.stages, "comma-separated stages to run, or 'all'");
    if (std::string(name) == "report") sub->add_option("--include", o.include, "more experiment directories to tabulate");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kConfig;
  }
  const std::string command = app.get_subcommands().front()->get_name();
  try {
    return run(command, o);
  } catch (const badenc::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfig;
  } catch (const badenc::StageError& e) {
    std::fprintf(stderr, "stage error: %s\n", e.what());
    return kStage;
  } catch (const badenc::DivergenceError& e) {
    std::fprintf(stderr, "diverged: %s\n", e.what());
    return kDivergence;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kOther;
  }
}
