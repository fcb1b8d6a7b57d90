#pragma once

#include <string>
#include <vector>

#include "ng/neuron.hpp"
#include "ng/tensor.hpp"

namespace ng {

class Rng;

enum class GateMode { kOff, kDynamic, kStatic, kHardZero, kRandomK };
const char* gate_mode_name(GateMode m);
GateMode gate_mode_from_name(const std::string& s);

struct GateParams {
  double alpha = 1.0;
  double beta = 0.8;
  double theta = 0.05;  // release threshold on S_t: below it, no suppression
};

// g = sigmoid(alpha*S + beta*C).
double compute_gate(double s_t, double c_t, double alpha, double beta);

// Turn-scoped, reversible intervention on MLP hidden activations.
//
// Suppression law: for masked neurons h' = (1-g)*h in dynamic/static modes
// (higher bias/memory scores mean stronger suppression), h' = 0 in
// hard_zero, identity in off. random_k behaves like dynamic over an
// arbitrary mask. The state is immutable during a turn's decode;
// next_turn() derives the state for the following turn.
class GateState {
public:
  GateState() = default;  // off, empty mask

  // Validates the mask against the model dimensions; out-of-range neurons
  // are rejected here, never mid-decode.
  GateState(GateMode mode, std::vector<NeuronId> mask, GateParams params, int num_layers, int mlp_hidden);

  GateMode mode() const { return mode_; }
  const std::vector<NeuronId>& mask() const { return mask_; }
  const GateParams& params() const { return params_; }
  int turn() const { return turn_; }
  double g() const { return g_; }
  double s_t() const { return s_t_; }
  double c_t() const { return c_t_; }
  // True when this turn applies no suppression (off mode, empty mask, or
  // the release rule fired).
  bool released() const;

  // Rewrites one layer's hidden activations in place ([positions, mlp_hidden]).
  void apply(int layer, Tensor& hidden) const;

  // State for the next turn: dynamic recomputes g from fresh S_t/C_t and
  // refreshes mask membership from the eligible set; static keeps the
  // coefficient and mask frozen from construction; hard_zero and off
  // ignore the scores.
  GateState next_turn(double s_t, double c_t, const std::vector<NeuronId>& eligible) const;

  // Seeds g for the first turn (dynamic/random_k); static freezes this value.
  void prime(double s_t, double c_t);

private:
  void rebuild_lookup();

  GateMode mode_ = GateMode::kOff;
  std::vector<NeuronId> mask_;
  GateParams params_;
  int num_layers_ = 0, mlp_hidden_ = 0;
  double g_ = 0.5, s_t_ = 0.0, c_t_ = 0.0;
  int turn_ = 0;
  std::vector<std::vector<uint8_t>> masked_;  // [layer][neuron] membership
};

// k distinct neurons drawn uniformly from the full population.
std::vector<NeuronId> random_mask(int num_layers, int mlp_hidden, int k, Rng& rng);

}  // namespace ng
