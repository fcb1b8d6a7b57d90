#pragma once

#include <string>
#include <vector>

#include "ng/neuron.hpp"
#include "ng/tensor.hpp"
#include "ng/transformer.hpp"
#include "ng/vocab.hpp"

namespace ng {

// Attribution of a differentiable bias target to individual MLP neurons,
// aggregated over tokens (max pool), instances (confusion-weighted with a
// carry-over emphasis) and instructions (mean) into a final ranking.
//
// The bias target is the total log-probability mass the model assigns to the
// stereotype-class tokens at the answer position: judge scores themselves
// are not differentiable, this surrogate is.

// --- aggregation primitives (model-free) ----------------------------------------

// Max over token positions per neuron; signed values, max keeps the
// strongest bias-promoting evidence. [T,N] -> [N]. Rejects empty input.
Tensor token_aggregate_max(const Tensor& per_token);

// Sum of per-token attribution over history positions (m_carry, rows
// [0,boundary)) and current-turn positions (m_local, rows [boundary,T)).
// By construction m_local + m_carry equals the column sums.
struct LocalCarrySplit {
  Tensor m_local;  // [N]
  Tensor m_carry;  // [N]
};
LocalCarrySplit local_carry_split(const Tensor& per_token, int64_t boundary);

// Normalized confusion weights; the all-zero case falls back to uniform.
struct ConfusionWeights {
  std::vector<double> weights;
  bool uniform_fallback = false;
};
ConfusionWeights confusion_weights(const std::vector<double>& alpha);

// Instance aggregation: effective weight w_j proportional to
// alpha_j * (1 + lambda * carry_share_j), renormalized, then the weighted
// sum of per-instance scores. lambda = 0 recovers the plain
// confusion-weighted sum exactly.
Tensor instance_aggregate(const std::vector<Tensor>& per_instance, const std::vector<double>& norm_weights,
                          const std::vector<double>& carry_share, double lambda);

// Arithmetic mean over instructions. Rejects an empty set.
Tensor instruction_aggregate(const std::vector<Tensor>& per_instruction);

// Instance-level carry share: |m_carry| mass over total |mass|, in [0,1].
double carry_share(const LocalCarrySplit& split, double epsilon = 1e-12);

// --- model-coupled attribution ----------------------------------------------------

struct LayerAttribution {
  std::vector<Tensor> layers;  // per layer [T, mlp_hidden], signed
};

// Forward-only value of the bias target: log sum of stereotype-class
// probabilities at `answer_pos`.
double stereotype_mass(const Checkpoint& ckpt, const std::vector<int>& tokens,
                       const std::vector<int>& class_tokens, int64_t answer_pos);

// attribution(n,k) = activation(n,k) * d target / d activation(n,k).
LayerAttribution grad_x_activation(const Checkpoint& ckpt, const std::vector<int>& tokens,
                                   const std::vector<int>& class_tokens, int64_t answer_pos);

// Midpoint-Riemann path integral from zero to h_star: attribution_i =
// h_star_i * mean over steps of gradient_at(alpha * h_star)_i. Exact for
// any step count when the gradient is constant (linear targets).
std::vector<Tensor> ig_path_integral(
    const std::function<std::vector<Tensor>(const std::vector<Tensor>&)>& gradient_at,
    const std::vector<Tensor>& h_star, int steps);

// Integrated gradients over the MLP activations of all layers jointly,
// baseline zero. f_input/f_baseline are the target values at the path
// endpoints (for completeness checks).
struct IgResult {
  LayerAttribution attribution;
  double f_input = 0.0;
  double f_baseline = 0.0;
};
IgResult integrated_gradients(const Checkpoint& ckpt, const std::vector<int>& tokens,
                              const std::vector<int>& class_tokens, int64_t answer_pos, int steps);

// --- ranking pipeline ---------------------------------------------------------------

enum class AttributionMethod { kGradXActivation, kIntegratedGradients };

struct AttributionParams {
  AttributionMethod method = AttributionMethod::kGradXActivation;
  int ig_steps = 64;
  double lambda = 1.0;          // carry-over emphasis; 0 = plain Eq.-2 weights
  int instances_per_instruction = 4;
  int templates = 3;            // question phrasings per attribute
  bool absolute_values = false;  // |attribution| before the token max (sensitivity variant)
  uint64_t seed = 0;
};

struct NeuronScore {
  NeuronId id;
  double score = 0.0;
  double m_local = 0.0;
  double m_carry = 0.0;
};

struct NeuronRanking {
  std::vector<NeuronScore> entries;  // descending score; ties by (layer, index)
  int num_instructions = 0;
  int num_instances = 0;
};

// One attribution prompt: a serialized dialogue ending right after the
// forced attribute echo, with the current turn starting at `boundary`.
struct AttributionInstance {
  std::vector<int> tokens;
  int64_t boundary = 0;
  int64_t answer_pos = 0;
};

// Deterministic prompt family for (attribute, template); instances vary the
// amount of stereotype-reinforcing history ahead of the question.
AttributionInstance make_attribution_instance(const Vocab& v, AttributeTag attribute, int template_id,
                                              int instance_id, uint64_t seed);

// Full Eq. 1-4 pipeline over templates x attributes (the instruction set)
// with N instances each; returns the final descending ranking.
NeuronRanking rank_bias_neurons(const Checkpoint& ckpt, const Vocab& v, const AttributionParams& params);

// k highest-scoring neurons, deterministic tie-break. Rejects k outside
// [1, entries].
std::vector<NeuronId> select_top_k(const NeuronRanking& ranking, int k);

// Tabular export: neuron id, layer, score, m_local, m_carry.
void write_ranking_csv(const NeuronRanking& ranking, const std::string& path);
NeuronRanking read_ranking_csv(const std::string& path);

}  // namespace ng
