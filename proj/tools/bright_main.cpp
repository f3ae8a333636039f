// Command-line front end: each subcommand maps onto one pipeline stage, and
// `run` chains them all. Flags override the config file, so
// `bright run --config exp.cfg --seed 7 --out-dir runs/a` reproduces a run
// exactly; the resulting run_manifest.txt records what it saw.
#include <cstdint>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "bright/experiment.hpp"

namespace {

struct GlobalOpts {
  std::string config_path;
  std::string out_dir;
  std::string profile;
  int64_t seed = -1;
  bool deterministic = false;
};

void add_global_flags(CLI::App* cmd, GlobalOpts& g) {
  cmd->add_option("--config", g.config_path, "experiment config file");
  cmd->add_option("--seed", g.seed, "master seed (overrides config)");
  cmd->add_option("--out-dir", g.out_dir, "run directory (overrides config)");
  cmd->add_option("--profile", g.profile, "model profile (overrides config)")
      ->check(CLI::IsMember({"desk", "full"}));
  cmd->add_flag("--deterministic", g.deterministic,
                "force deterministic mode (overrides config)");
}

bright::ExperimentConfig resolve_config(const GlobalOpts& g) {
  bright::ConfigFile cfg = g.config_path.empty()
                               ? bright::ConfigFile::parse_string("", "<defaults>")
                               : bright::ConfigFile::parse_file(g.config_path);
  if (g.seed >= 0) cfg.set("pipeline.seed", std::to_string(g.seed));
  if (!g.out_dir.empty()) cfg.set("pipeline.out_dir", g.out_dir);
  if (!g.profile.empty()) cfg.set("pipeline.profile", g.profile);
  if (g.deterministic) cfg.set("pipeline.deterministic", "true");
  return bright::load_experiment_config(cfg);
}

std::vector<bright::SlideRecord> load_records(const bright::ExperimentConfig& cfg,
                                              const bright::RunLayout& layout) {
  return bright::read_manifest(layout.manifest_path());
}

const bright::StageLog kLog = [](const std::string& m) { std::cout << m << std::endl; };

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"breast-pathology pipeline: synthetic cohorts, adapter pretraining, "
               "dual embeddings, attention-MIL heads, and survival reports"};
  app.require_subcommand(1);

  GlobalOpts g;
  std::string heatmap_slide;
  std::vector<std::pair<std::string, std::function<void(const bright::ExperimentConfig&,
                                                        const bright::RunLayout&)>>>
      stages = {
          {"synth", [](const auto& cfg, const auto& layout) { bright::synth_stage(cfg, layout, kLog); }},
          {"tile",
           [](const auto& cfg, const auto& layout) {
             bright::tile_stage(load_records(cfg, layout), cfg, layout, kLog);
           }},
          {"pretrain",
           [](const auto& cfg, const auto& layout) {
             bright::pretrain_stage(load_records(cfg, layout), cfg, layout, kLog);
           }},
          {"embed",
           [](const auto& cfg, const auto& layout) {
             bright::embed_stage(load_records(cfg, layout),
                                 bright::read_encoder(layout.encoder_path()), cfg, layout, kLog);
           }},
          {"train-mil",
           [](const auto& cfg, const auto& layout) {
             bright::train_mil_stage(load_records(cfg, layout), cfg, layout, kLog);
           }},
          {"evaluate",
           [](const auto& cfg, const auto& layout) {
             bright::evaluate_stage(load_records(cfg, layout), cfg, layout, kLog);
           }},
          {"survival",
           [](const auto& cfg, const auto& layout) {
             bright::survival_stage(load_records(cfg, layout), cfg, layout, kLog);
           }},
          {"ihc-reduce",
           [](const auto& cfg, const auto& layout) {
             bright::ihc_stage(load_records(cfg, layout), cfg, layout, kLog);
           }},
      };

  const std::vector<std::pair<std::string, std::string>> help = {
      {"synth", "generate the synthetic cohort and manifest"},
      {"tile", "index tissue tiles for every slide"},
      {"pretrain", "self-supervised adapter pretraining on pretrain-role tiles"},
      {"embed", "write fused embedding bags for all downstream slides"},
      {"train-mil", "train fused and generalist attention-MIL heads"},
      {"evaluate", "classification reports with bootstrap intervals"},
      {"survival", "c-index, Kaplan-Meier, log-rank and Cox reports"},
      {"ihc-reduce", "confirmatory-test triage sweep and operating point"},
  };
  for (const auto& [name, desc] : help) add_global_flags(app.add_subcommand(name, desc), g);

  CLI::App* hm = app.add_subcommand("heatmap", "re-render attention heatmaps");
  add_global_flags(hm, g);
  hm->add_option("--slide", heatmap_slide, "render a single slide id");

  add_global_flags(app.add_subcommand("run", "full pipeline: synth through reports"), g);

  CLI11_PARSE(app, argc, argv);

  try {
    const bright::ExperimentConfig cfg = resolve_config(g);
    const bright::RunLayout layout(cfg.out_dir);
    const std::string sub = app.get_subcommands().front()->get_name();
    if (sub == "run") {
      bright::run_experiment(cfg, kLog);
      return 0;
    }
    if (sub == "heatmap") {
      bright::heatmap_stage(load_records(cfg, layout), cfg, layout, heatmap_slide, kLog);
      return 0;
    }
    for (const auto& [name, fn] : stages) {
      if (name == sub) {
        bright::ensure_dir(layout.root);
        fn(cfg, layout);
        return 0;
      }
    }
    std::cerr << "unknown subcommand " << sub << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
