#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "ng/attribution.hpp"
#include "ng/corpus.hpp"
#include "ng/gating.hpp"
#include "ng/judges.hpp"
#include "ng/metrics.hpp"
#include "ng/probe.hpp"
#include "ng/transformer.hpp"
#include "ng/vocab.hpp"

namespace ng {

// Orchestrates corpus -> train -> attribute -> probe -> evaluate -> report
// with content-hash stage caching, one root seed feeding named per-stage
// streams, and a manifest sufficient to re-run bit-identically.

struct PipelineError : std::runtime_error {
  explicit PipelineError(const std::string& msg, int exit_code_ = 2)
      : std::runtime_error(msg), exit_code(exit_code_) {}
  int exit_code;
};

struct EvalConfig {
  std::vector<TaskType> tasks = {TaskType::kAE, TaskType::kSQ, TaskType::kJT,
                                 TaskType::kIM, TaskType::kNF, TaskType::kFF};
  std::vector<AttributeTag> attributes = {AttributeTag::kGender,     AttributeTag::kRace,
                                          AttributeTag::kAppearance, AttributeTag::kDisability,
                                          AttributeTag::kReligion,   AttributeTag::kAge};
  int scenarios_per_cell = 2;  // per (task, attribute)
  int turns = 5;
  int knowledge_checks_per_turn = 2;
  bool trace_cosine = true;
};

struct ProbeConfig {
  int pairs_bias = 12;
  int pairs_knowledge = 12;
  double tau = 0.5;
  int consistency_histories = 2;
};

struct PipelineConfig {
  uint64_t seed = 42;
  std::string out_dir = "runs/default";
  int threads = 0;  // 0: hardware concurrency
  VocabSpec vocab;
  CorpusParams corpus;
  SplitFractions split;
  ModelConfig model;
  TrainParams train_params;
  AttributionParams attribution;
  ProbeConfig probe;
  GateParams gate;
  int top_k = 25;
  DecodeParams decode;
  EvalConfig eval;
  EnsembleConfig ensemble;
  bool external_judge = false;
  int bootstrap_resamples = 10000;
  std::vector<int> sweep_ks = {5, 25, 50, 100};
  int random_k_seeds = 10;
};

// JSON <-> config. parse_config rejects missing required keys and unknown
// keys with the offending dotted path.
PipelineConfig parse_config(const nlohmann::json& j);
nlohmann::json config_to_json(const PipelineConfig& cfg);
PipelineConfig load_config_file(const std::string& path,
                                const std::vector<std::string>& overrides = {});

// --- run plan -----------------------------------------------------------------

struct Condition {
  std::string name;       // row label; unique per plan
  GateMode mode = GateMode::kOff;
  int k = 25;
  uint64_t mask_seed = 0;  // random_k only
  bool probe_log = false;  // compute C_t every turn, beyond gating needs
  bool trace = false;      // record cosine trajectories (one extra forward per turn)
};

struct RunPlan {
  std::vector<Condition> conditions;  // must contain the off baseline
  void validate() const;
};

RunPlan default_run_plan(const PipelineConfig& cfg);
RunPlan ablation_run_plan(const PipelineConfig& cfg);

// --- evaluation records -----------------------------------------------------------

struct DialogueRun {
  int scenario_id = 0;
  TaskType task = TaskType::kSQ;
  AttributeTag attribute = AttributeTag::kGender;
  DialogueHistory history;                 // completed dialogue
  std::vector<TurnRecord> turns;           // one per model turn
  std::vector<double> cosine_per_turn;     // turn t vs t-1 (index 0 unused = nan)
  int fallback_count = 0;
};

struct ConditionResult {
  Condition condition;
  std::vector<DialogueRun> dialogues;
  MetricsBundle bundle;
  double perplexity_neutral = 0.0;
};

// --- the pipeline -------------------------------------------------------------------

class Pipeline {
public:
  explicit Pipeline(PipelineConfig cfg);

  // Individual stages; each consults the on-disk cache first.
  void stage_corpus();
  void stage_train();
  void stage_attribute();
  void stage_probe();
  void stage_evaluate(const RunPlan& plan);
  void stage_report(const RunPlan& plan);

  // Full pipeline with the default plan; returns the manifest path.
  std::string run_all();
  // Ablation sweep (modes x k x random seeds) plus the comparison report.
  std::string run_ablate();

  // Accessors for tests and the acceptance harness.
  const Vocab& vocab();
  const Checkpoint& checkpoint();
  const NeuronRanking& ranking();
  NeuronClassification classification(int k);
  const PipelineConfig& config() const { return cfg_; }
  const std::vector<ConditionResult>& results() const { return results_; }

  // Evaluates one condition over the scenario grid (no files written).
  ConditionResult evaluate_condition(const Condition& condition,
                                     const std::vector<Scenario>& scenarios);
  std::vector<Scenario> scenario_grid();
  // Gate-eligible neurons for a condition (mask construction).
  std::vector<NeuronId> mask_for(const Condition& condition);

private:
  friend struct PipelineTestHook;
  void ensure_judges();
  double score_turn(const std::vector<int>& turn_tokens);
  std::vector<Scenario> make_grid() const;
  bool stage_cached(const std::string& stage, const std::string& input_hash) const;
  void write_stage_record(const std::string& stage, const std::string& input_hash,
                          const std::vector<std::string>& outputs);
  void append_manifest_stage(const std::string& stage, const std::string& input_hash, bool cached);
  void write_manifest(const std::string& status);

  PipelineConfig cfg_;
  std::optional<Vocab> vocab_;
  std::optional<Corpus> corpus_;
  std::optional<CorpusSplit> split_;
  std::optional<Checkpoint> ckpt_;
  std::optional<NeuronRanking> ranking_;
  std::optional<NeuronConsistency> consistency_;
  std::optional<ClassifierJudge> classifier_;
  std::vector<double> probe_scale_by_attr_;
  std::vector<ConditionResult> results_;
  nlohmann::json manifest_stages_ = nlohmann::json::array();
};

// Deterministic static-partition parallel map over [0, n).
void parallel_for(int threads, int64_t n, const std::function<void(int64_t)>& fn);

// inspect queries over a manifest; throws PipelineError(3) on digest
// mismatch, PipelineError(1) on unknown query fields.
std::string inspect_manifest(const std::string& manifest_path, const std::string& query, int limit);

}  // namespace ng
