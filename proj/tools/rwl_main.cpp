#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "rwl/experiment.hpp"
#include "rwl/pipeline.hpp"

namespace {

using rwl::experiment::ExperimentConfig;

struct GlobalFlags {
  std::optional<std::uint64_t> seed;
  std::filesystem::path out = "runs/default";
  std::optional<std::filesystem::path> config;
  std::vector<std::string> overrides;
  bool resume = false;
  bool quiet = false;
};

// Explicit flags build the config from defaults; with none, a directory that
// already has a config.ini keeps using it.
ExperimentConfig effective_config(const GlobalFlags& g) {
  const std::filesystem::path bound = g.out / "config.ini";
  const bool explicit_config = g.config || g.seed || !g.overrides.empty();
  if (!explicit_config && std::filesystem::exists(bound)) return rwl::experiment::load_config(bound);
  ExperimentConfig c = g.config ? rwl::experiment::load_config(*g.config) : ExperimentConfig{};
  if (g.seed) c.seed = *g.seed;
  for (const std::string& o : g.overrides) rwl::experiment::apply_override(c, o);
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Representation rewiring experiments on a synthetic speech corpus"};
  app.require_subcommand(1);
  GlobalFlags g;
  app.add_option("--seed", g.seed, "Master seed (overrides experiment.seed)");
  app.add_option("--out", g.out, "Output directory")->capture_default_str();
  app.add_option("--config", g.config, "INI config file")->check(CLI::ExistingFile);
  app.add_option("--set", g.overrides, "Override, section.key=value (repeatable)");
  app.add_flag("--resume", g.resume, "Reuse existing artifacts instead of failing");
  app.add_flag("--quiet", g.quiet, "No progress output");

  auto* generate = app.add_subcommand("generate", "Sample and save the corpus");
  auto* pretrain = app.add_subcommand("pretrain", "Pretrain the baseline encoder");
  auto* rewire = app.add_subcommand("rewire", "Contrastive rewiring of the baseline");
  std::string strategy;
  rewire->add_option("--strategy", strategy, "twin | neutral | mixed")
      ->required()
      ->check(CLI::IsMember({"twin", "neutral", "mixed"}));
  auto* probe = app.add_subcommand("probe", "Fit probes for one task and fraction");
  std::string task;
  double fraction = 1.0;
  std::vector<std::string> encoders;
  probe->add_option("--task", task, "content_cls | intent_cls | speaker_cls | frame_labeling | qbe")->required();
  probe->add_option("--fraction", fraction, "0.01 | 0.05 | 0.10 | 1.0 (ignored for qbe)")->capture_default_str();
  probe->add_option("--encoder", encoders, "Restrict to these encoders (default: all)")
      ->check(CLI::IsMember({"baseline", "twin", "neutral", "mixed"}));
  auto* diagnose = app.add_subcommand("diagnose", "Geometry diagnostics for every encoder");
  auto* report = app.add_subcommand("report", "Rebuild summary CSVs and SVGs");
  auto* all = app.add_subcommand("all", "Run every stage in order");
  auto* show = app.add_subcommand("config", "Print the effective config");

  CLI11_PARSE(app, argc, argv);

  std::string stage = "config";
  try {
    const ExperimentConfig config = effective_config(g);
    if (show->parsed()) {
      std::cout << rwl::experiment::to_ini(config);
      return 0;
    }
    rwl::pipeline::Pipeline p(config, {g.out, g.resume, g.quiet ? nullptr : &std::cerr});
    if (generate->parsed()) p.generate();
    else if (pretrain->parsed()) p.pretrain();
    else if (rewire->parsed()) p.rewire(rwl::rewire::parse_strategy(strategy));
    else if (probe->parsed()) p.probe(rwl::probes::parse_task(task), fraction, encoders);
    else if (diagnose->parsed()) p.diagnose();
    else if (report->parsed()) p.report();
    else if (all->parsed()) p.run_all();
    return 0;
  } catch (const rwl::pipeline::StageError& e) {
    std::cerr << "error in stage " << e.stage() << ": " << e.what() << "\n";
  } catch (const std::exception& e) {
    std::cerr << "error in stage " << stage << ": " << e.what() << "\n";
  }
  return 1;
}
