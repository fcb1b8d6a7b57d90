#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ng/vocab.hpp"

namespace ng {

// Multi-turn interaction shapes, mirrored structurally at toy scale:
// anaphora ellipsis, scattered questions, jailbreak tips, inference
// misinformation, negative feedback, fixed format.
enum class TaskType { kAE, kSQ, kJT, kIM, kNF, kFF };
constexpr int kNumTaskTypes = 6;
const char* task_name(TaskType t);
TaskType task_from_name(const std::string& s);

// --- dialogue state ----------------------------------------------------------

struct DialogueTurn {
  std::vector<int> user;
  std::vector<int> model;
  bool user_cue = false;  // ground truth: template injected biased cues here
};

struct DialogueHistory {
  std::vector<DialogueTurn> turns;
};

// Serializes a history as <bos> (<usr> u* <sep> <mdl> m* <sep>)*. With
// open_last the final turn must await its model response and the sequence
// ends right after its <mdl> marker, ready for generation; otherwise every
// turn is closed (an empty model response serializes as <mdl> <sep>).
// Oldest whole turns are dropped when the result would exceed max_len.
std::vector<int> serialize_dialogue(const Vocab& v, const DialogueHistory& h, int max_len,
                                    bool open_last = false);

// --- planted-bias training corpus ---------------------------------------------

struct CorpusParams {
  int num_sequences = 4000;
  double rho = 0.8;        // stereotype probability at fresh continuation slots
  double toxic_rate = 0.25;  // toxic token rides along with a stereotype
  double carry_rate = 0.9;   // earlier in-sequence stereotype gets repeated
  double neutral_theme_rate = 0.15;  // sequences built only from facts/filler
  bool dissolve_unigrams = true;  // stereotype/neutral tokens double as ordinary words
  int min_exchanges = 2;
  int max_exchanges = 3;
  int max_len = 64;
  uint64_t seed = 0;
};

// Measured over continuation slots: the model-turn positions where the
// grammar draws a stereotype-vs-neutral continuation after an attribute
// echo. "Fresh" slots have no earlier same-group stereotype in the
// sequence; "carry" slots repeat history with probability carry_rate.
// The rho contract is stated on fresh slots.
struct CorpusStats {
  int64_t fresh_slots = 0;
  int64_t fresh_stereo = 0;
  int64_t carry_slots = 0;
  int64_t carry_stereo = 0;
  int64_t total_tokens = 0;
  int64_t neutral_sequences = 0;  // sequences with zero attribute tokens
  double fresh_rate() const { return fresh_slots ? double(fresh_stereo) / double(fresh_slots) : 0.0; }
};

struct Corpus {
  std::vector<std::vector<int>> sequences;
  CorpusParams params;
  CorpusStats stats;
  std::string vocab_digest;
};

Corpus plant_bias(const Vocab& v, const CorpusParams& params);

// --- evaluation scenarios -------------------------------------------------------

struct ScenarioTurn {
  std::vector<int> user;
  bool cue = false;
};

struct Scenario {
  int id = 0;
  TaskType task = TaskType::kSQ;
  AttributeTag attribute = AttributeTag::kGender;
  std::vector<ScenarioTurn> turns;
  std::vector<int> cue_turns;  // placement plan, 0-based turn indices
  uint64_t seed = 0;
};

std::vector<Scenario> generate_scenarios(const Vocab& v, TaskType task, AttributeTag attribute, int n,
                                         uint64_t seed, int num_turns = 5);

// Task-specific structural rule check; returns an empty string when valid,
// otherwise the violated rule.
std::string validate_scenario(const Vocab& v, const Scenario& s);

// --- splits ----------------------------------------------------------------------

struct SplitFractions {
  double train = 0.8;
  double validation = 0.1;
  double neutral_eval = 0.1;
};

struct CorpusSplit {
  std::vector<std::vector<int>> train;
  std::vector<std::vector<int>> validation;
  std::vector<std::vector<int>> neutral_eval;  // contains no attribute tokens
};

// Disjoint, exhaustive over eligible sequences. neutral_eval only draws from
// attribute-free sequences; a nonzero fraction that comes up empty is an
// error.
CorpusSplit split_corpus(const Corpus& corpus, const Vocab& v, const SplitFractions& f, uint64_t seed);

// --- file formats -----------------------------------------------------------------

// One JSON record per line; sidecar manifest carries params, stats and the
// vocab digest.
void write_corpus_jsonl(const Corpus& corpus, const std::string& path);
Corpus read_corpus_jsonl(const std::string& path, const std::string& manifest_path);
void write_corpus_manifest(const Corpus& corpus, const std::string& path);

void write_scenarios_jsonl(const std::vector<Scenario>& scenarios, const std::string& path);
std::vector<Scenario> read_scenarios_jsonl(const std::string& path);

}  // namespace ng
