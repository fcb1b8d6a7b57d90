// neurogate: train a toy dialogue model with a planted bias, attribute the
// bias to MLP neurons, probe memory carry-over, and evaluate dynamic
// reversible neuron masking against static/hard-zero/random ablations.
//
// Exit codes: 0 success, 1 usage error, 2 pipeline failure, 3 integrity error.

#include <cstdio>
#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ng/pipeline.hpp"

namespace {

int run_stage(const std::string& config_path, const std::vector<std::string>& overrides,
              const std::string& stage) {
  ng::PipelineConfig cfg = ng::load_config_file(config_path, overrides);
  ng::Pipeline pipeline(cfg);
  if (stage == "corpus") {
    pipeline.stage_corpus();
    std::cout << "corpus ready under " << cfg.out_dir << "\n";
  } else if (stage == "train") {
    pipeline.stage_train();
    std::cout << "checkpoint: " << cfg.out_dir << "/model.ckpt (val loss "
              << pipeline.checkpoint().meta.final_val_loss << ")\n";
  } else if (stage == "attribute") {
    pipeline.stage_attribute();
    std::cout << "ranking: " << cfg.out_dir << "/ranking.csv\n";
  } else if (stage == "probe") {
    pipeline.stage_probe();
    auto cls = pipeline.classification(cfg.top_k);
    std::cout << "probe: " << cfg.out_dir << "/probe.csv (" << cls.gate_eligible.size()
              << " gate-eligible of top-" << cfg.top_k << ")\n";
  } else if (stage == "run") {
    std::string manifest = pipeline.run_all();
    std::cout << "manifest: " << manifest << "\n";
  } else if (stage == "ablate") {
    std::string manifest = pipeline.run_ablate();
    std::cout << "manifest: " << manifest << "\n";
  } else if (stage == "report") {
    ng::RunPlan plan = ng::default_run_plan(cfg);
    pipeline.stage_report(plan);
    std::cout << "report under " << cfg.out_dir << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dynamic reversible neuron masking for multi-turn dialogue bias"};
  app.require_subcommand(1);

  std::string config_path = "neurogate.json";
  std::vector<std::string> overrides;
  std::string manifest_path, query = "files";
  int limit = 10;

  const char* stages[] = {"corpus", "train", "attribute", "probe", "run", "ablate", "report"};
  const char* descs[] = {"generate the planted-bias corpus and evaluation scenarios",
                         "train the toy transformer on the corpus",
                         "rank bias neurons by attribution",
                         "run memory probes and classify gate-eligible neurons",
                         "run the full pipeline (baseline + dynamic masking) and report",
                         "run the ablation grid (static, hard-zero, top-k vs random-k sweep)",
                         "rebuild the report from cached evaluation outputs"};
  for (int i = 0; i < 7; ++i) {
    CLI::App* sub = app.add_subcommand(stages[i], descs[i]);
    sub->add_option("--config", config_path, "config file (JSON)")->capture_default_str();
    sub->add_option("--set", overrides, "override config keys: a.b.c=value")->take_all();
  }

  CLI::App* inspect = app.add_subcommand("inspect", "query a run manifest (verifies digests first)");
  inspect->add_option("--manifest", manifest_path, "path to manifest.json")->required();
  inspect->add_option("--query", query, "top-neurons | metrics | gate | files")->capture_default_str();
  inspect->add_option("--limit", limit, "row limit")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    for (const char* stage : stages)
      if (app.got_subcommand(stage)) return run_stage(config_path, overrides, stage);
    if (app.got_subcommand("inspect")) {
      std::cout << ng::inspect_manifest(manifest_path, query, limit);
      return 0;
    }
  } catch (const ng::PipelineError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
