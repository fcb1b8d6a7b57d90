#pragma once

#include <string>
#include <vector>

#include "ng/corpus.hpp"
#include "ng/neuron.hpp"
#include "ng/transformer.hpp"
#include "ng/vocab.hpp"

namespace ng {

// Memory Consistency Probe: contrastive affirmative/negative queries that
// measure how strongly a concept persists in model state given the
// dialogue history, and which neurons carry it.

struct ProbePair {
  std::string concept_id;
  bool is_bias = false;          // bias concept vs neutral-knowledge concept
  std::vector<int> affirmative;  // user-turn query tokens
  std::vector<int> negative;     // identical except the polarity marker
  int echo = -1;                 // forced model echo (attribute / fact question)
  int expected_aff = -1;         // answer under affirmative polarity
  int expected_neg = -1;         // answer under negative polarity (the decline token)
};

// Balanced, seed-deterministic pair set: bias concepts are (attribute,
// stereotype) pairs, knowledge concepts are the planted fact pairs.
// Rejects counts the vocabulary cannot support.
std::vector<ProbePair> build_probe_pairs(const Vocab& v, int num_bias, int num_knowledge, uint64_t seed);

// Probe pairs restricted to one attribute (the in-loop gating probes).
std::vector<ProbePair> attribute_probe_pairs(const Vocab& v, AttributeTag attribute);

struct MemoryScoreResult {
  double c_t = 0.0;   // mean normalized gap over bias pairs, clamped to [0,1]
  bool defined = false;  // false when the pair set holds no bias pairs
  std::vector<double> gaps;  // raw answer-probability gap per pair (all pairs)
};

// Serialized prefix "history + query turn + forced echo", the common shape
// of probe and knowledge-check evaluations.
std::vector<int> probe_query_prefix(const Vocab& v, const DialogueHistory& hist,
                                    const std::vector<int>& query, int echo, int context_len);

// Answer-probability gap for one pair given the history:
//   P(expected_aff | hist + affirmative query + echo)
// - P(expected_neg | hist + negative query + echo).
double probe_gap(const Checkpoint& ckpt, const Vocab& v, const DialogueHistory& hist, const ProbePair& pair,
                 const GateState* gate = nullptr);

// Scale for gap normalization: the largest |gap| the model produces on a
// fully stereotype-reinforcing reference history, over the given pairs.
double calibrate_probe_scale(const Checkpoint& ckpt, const Vocab& v, const std::vector<ProbePair>& pairs,
                             int reference_turns = 4);

// C_t over the bias pairs; gaps for every pair are reported. A pair set
// without bias pairs yields defined = false (never a silent 0).
MemoryScoreResult memory_score(const Checkpoint& ckpt, const Vocab& v, const DialogueHistory& hist,
                               const std::vector<ProbePair>& pairs, double calibration_scale,
                               const GateState* gate = nullptr);

// Per-neuron consistency: Pearson correlation, across pairs, between the
// neuron's activation delta at the echo position (affirmative - negative)
// and the pair's answer gap. Zero-variance neurons get 0.
struct NeuronConsistency {
  std::vector<NeuronId> candidates;
  std::vector<double> bias_consistency;       // per candidate
  std::vector<double> knowledge_consistency;  // per candidate
  int zero_variance_count = 0;
};

NeuronConsistency probe_neuron_consistency(const Checkpoint& ckpt, const Vocab& v,
                                           const std::vector<DialogueHistory>& histories,
                                           const std::vector<ProbePair>& pairs,
                                           const std::vector<NeuronId>& candidates);

// Gate eligibility: bias consistency >= tau AND knowledge consistency < tau.
// Everything else is knowledge-protected and excluded from masking.
struct NeuronClassification {
  std::vector<NeuronId> gate_eligible;
  std::vector<NeuronId> knowledge_protected;
};
NeuronClassification classify_neurons(const NeuronConsistency& consistency, double tau);

// Tabular export: per-neuron consistency values.
void write_probe_csv(const NeuronConsistency& consistency, const std::string& path);
NeuronConsistency read_probe_csv(const std::string& path);

}  // namespace ng
