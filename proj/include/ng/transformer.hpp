#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ng/autodiff.hpp"
#include "ng/corpus.hpp"
#include "ng/gating.hpp"
#include "ng/tensor.hpp"

namespace ng {

// Decoder-only transformer small enough to train on a CPU in minutes, with
// named hook points at the MLP hidden activations: recorded for attribution,
// rewritten for gating. Pre-LN blocks, learned positional embeddings, GELU
// MLPs. "Neuron" throughout the project means one post-GELU hidden unit.
struct ModelConfig {
  int num_layers = 4;
  int model_dim = 128;
  int mlp_hidden = 256;  // the per-layer neuron population targeted by masking
  int num_heads = 4;
  int vocab_size = 200;
  int context_len = 256;
  // MLP weight init scale relative to 1/sqrt(fan_in). This knob steers
  // where associations are learned: at small scales the MLPs lose the
  // feature race and token associations drift into attention/embedding
  // paths; at 1.0 and above the MLPs capture them.
  double mlp_init_scale = 1.0;
  // Sparse MLP activations: keep only the strongest mlp_topk hidden units
  // per position (0 = dense). Sparse activations pin each learned
  // association to a bounded set of neurons, which is what makes small
  // top-k masking able to reach it.
  int mlp_topk = 24;
  uint64_t seed = 0;

  void validate() const;
  int head_dim() const { return model_dim / num_heads; }
};

struct TrainMeta {
  int64_t steps = 0;
  double final_train_loss = 0.0;
  double final_val_loss = 0.0;
  std::string corpus_digest;
};

struct Checkpoint {
  ModelConfig config;
  std::map<std::string, Tensor> params;  // ordered; iteration order is part of determinism
  TrainMeta meta;
};

// Zero-initialized parameter set (exact shapes, all zeros).
Checkpoint zero_checkpoint(const ModelConfig& config);
// Seeded random initialization.
Checkpoint init_checkpoint(const ModelConfig& config);

// Versioned container: JSON header (config + metadata + tensor directory)
// followed by raw little-endian f64 blobs. Round-trips bit-exactly.
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Recorded hidden activations per (layer, position, neuron); when a hook ran,
// these are the rewritten values, exactly what downstream layers consumed.
struct ActivationTrace {
  std::vector<Tensor> layers;  // per layer [positions, mlp_hidden]
  double at(int layer, int64_t pos, int neuron) const {
    return layers[static_cast<size_t>(layer)].at(pos, neuron);
  }
};

// Rewrites one layer's hidden activations in place ([positions, mlp_hidden]).
using ActivationHook = std::function<void(int layer, Tensor& hidden)>;

struct ForwardResult {
  Tensor logits;  // [T, vocab]
  ActivationTrace trace;
};

// Full forward pass. Token ids outside the vocab are rejected, as are
// sequences past context_len. Deterministic; identical inputs give
// bit-identical logits.
ForwardResult forward(const Checkpoint& ckpt, const std::vector<int>& tokens,
                      const ActivationHook* hook = nullptr, bool want_trace = false);

// Next-token logits only (skips the unembedding of non-final positions).
Tensor forward_last_logits(const Checkpoint& ckpt, const std::vector<int>& tokens,
                           const ActivationHook* hook = nullptr);

// Log-probabilities over the next token after `tokens`.
Tensor next_token_log_probs(const Checkpoint& ckpt, const std::vector<int>& tokens,
                            const ActivationHook* hook = nullptr);

// --- tape forward (for attribution and training) ------------------------------

struct TapeForward {
  Tape tape;
  int logits = -1;                       // node id, [T, vocab]
  std::vector<int> hidden;               // per-layer node ids of the MLP hidden activations
  std::map<std::string, int> param_nodes;
};

// Builds the forward graph on a tape. When `clamp_hidden` is non-null it must
// hold one [T, mlp_hidden] tensor per layer; those values are installed as
// leaves in place of the computed activations (the integrated-gradients
// path), making gradients w.r.t. the clamped activations directly queryable.
TapeForward forward_tape(const Checkpoint& ckpt, const std::vector<int>& tokens,
                         const std::vector<Tensor>* clamp_hidden = nullptr);

// --- generation -----------------------------------------------------------------

struct DecodeParams {
  double temperature = 0.5;
  double top_p = 0.9;
  int max_tokens = 8;
};

struct GenerateResult {
  std::vector<int> tokens;     // the model turn, turn separator excluded
  int fallback_count = 0;      // decode steps that fell back to argmax
};

// One temperature + nucleus sampling step over raw logits. Banned ids are
// excluded. A distribution that degenerates after filtering (zero or
// non-finite mass) falls back to argmax and reports it.
int sample_token(const Tensor& logits, const DecodeParams& decode, Rng& rng,
                 const std::vector<int>& banned, bool* fell_back);

// Samples the next model turn for a history whose last turn has no model
// response yet. The gate hook (when provided) runs at every decode step.
// Structural control tokens (<pad>, <bos>, <usr>, <mdl>) are excluded from
// sampling; <sep> ends the turn. Reproducible under a fixed seed.
GenerateResult generate_turn(const Checkpoint& ckpt, const Vocab& v, const DialogueHistory& history,
                             const GateState* gate, const DecodeParams& decode, uint64_t rng_seed);

// --- training ---------------------------------------------------------------------

struct TrainParams {
  int epochs = 2;
  int batch_size = 16;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_norm = 1.0;
  double weight_decay = 0.0;    // decoupled, weight matrices only
  double activation_l1 = 0.0;   // sparsity pressure on MLP hidden activations
  int warmup_steps = 50;
  double target_val_loss = 4.0;  // nats/token sanity bound
  uint64_t seed = 0;
};

struct TrainLogEntry {
  int64_t step = 0;
  double loss = 0.0;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<TrainLogEntry> log;
};

// Adam training on next-token prediction. Aborts with the step number when
// the loss goes non-finite; fails when the configured validation-loss target
// is not reached. Reproducible from (seed, corpus, config).
TrainResult train(const ModelConfig& config, const std::vector<std::vector<int>>& train_seqs,
                  const std::vector<std::vector<int>>& val_seqs, const TrainParams& params);

// exp(mean negative log-likelihood per predicted token); the gate, when
// provided, is applied during every forward.
double perplexity(const Checkpoint& ckpt, const std::vector<std::vector<int>>& seqs,
                  const GateState* gate = nullptr);

// Mean NLL per token (the log of perplexity).
double mean_nll(const Checkpoint& ckpt, const std::vector<std::vector<int>>& seqs,
                const GateState* gate = nullptr);

// Probability of `answer` under teacher forcing after `prefix`.
double answer_probability(const Checkpoint& ckpt, const std::vector<int>& prefix,
                          const std::vector<int>& answer, const GateState* gate = nullptr);

}  // namespace ng
