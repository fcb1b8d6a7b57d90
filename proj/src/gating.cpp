#include "ng/gating.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "ng/rng.hpp"

namespace ng {

const char* gate_mode_name(GateMode m) {
  switch (m) {
    case GateMode::kOff: return "off";
    case GateMode::kDynamic: return "dynamic";
    case GateMode::kStatic: return "static";
    case GateMode::kHardZero: return "hard_zero";
    case GateMode::kRandomK: return "random_k";
  }
  return "?";
}

GateMode gate_mode_from_name(const std::string& s) {
  if (s == "off") return GateMode::kOff;
  if (s == "dynamic") return GateMode::kDynamic;
  if (s == "static") return GateMode::kStatic;
  if (s == "hard_zero") return GateMode::kHardZero;
  if (s == "random_k") return GateMode::kRandomK;
  throw std::invalid_argument("unknown gate mode '" + s + "'");
}

double compute_gate(double s_t, double c_t, double alpha, double beta) {
  if (!std::isfinite(s_t) || !std::isfinite(c_t))
    throw std::invalid_argument("compute_gate: non-finite score");
  double z = alpha * s_t + beta * c_t;
  return 1.0 / (1.0 + std::exp(-z));
}

GateState::GateState(GateMode mode, std::vector<NeuronId> mask, GateParams params, int num_layers,
                     int mlp_hidden)
    : mode_(mode), mask_(std::move(mask)), params_(params), num_layers_(num_layers), mlp_hidden_(mlp_hidden) {
  for (const NeuronId& n : mask_) {
    if (n.layer < 0 || n.layer >= num_layers_ || n.index < 0 || n.index >= mlp_hidden_)
      throw std::invalid_argument("gate mask references out-of-range neuron (layer " +
                                  std::to_string(n.layer) + ", index " + std::to_string(n.index) + ")");
  }
  std::sort(mask_.begin(), mask_.end());
  mask_.erase(std::unique(mask_.begin(), mask_.end()), mask_.end());
  g_ = compute_gate(0.0, 0.0, params_.alpha, params_.beta);
  rebuild_lookup();
}

void GateState::rebuild_lookup() {
  masked_.assign(static_cast<size_t>(num_layers_), std::vector<uint8_t>(static_cast<size_t>(mlp_hidden_), 0));
  for (const NeuronId& n : mask_) masked_[static_cast<size_t>(n.layer)][static_cast<size_t>(n.index)] = 1;
}

bool GateState::released() const {
  if (mode_ == GateMode::kOff || mask_.empty()) return true;
  if (mode_ == GateMode::kHardZero) return false;  // unconditional
  if (mode_ == GateMode::kStatic) return false;    // frozen, never releases
  return s_t_ < params_.theta;                     // dynamic / random_k
}

void GateState::apply(int layer, Tensor& hidden) const {
  if (released()) return;
  if (layer < 0 || layer >= num_layers_) return;
  const auto& lm = masked_[static_cast<size_t>(layer)];
  int64_t positions = hidden.rows();
  int64_t width = hidden.cols();
  double factor = (mode_ == GateMode::kHardZero) ? 0.0 : (1.0 - g_);
  for (int64_t p = 0; p < positions; ++p) {
    double* row = hidden.data.data() + p * width;
    for (int64_t i = 0; i < width; ++i)
      if (lm[static_cast<size_t>(i)]) row[i] *= factor;
  }
}

GateState GateState::next_turn(double s_t, double c_t, const std::vector<NeuronId>& eligible) const {
  GateState next = *this;
  next.turn_ = turn_ + 1;
  switch (mode_) {
    case GateMode::kOff:
    case GateMode::kHardZero:
    case GateMode::kStatic:
      // static keeps g and the mask exactly as frozen at turn 1
      break;
    case GateMode::kDynamic: {
      next.s_t_ = s_t;
      next.c_t_ = c_t;
      next.g_ = compute_gate(s_t, c_t, params_.alpha, params_.beta);
      next.mask_ = eligible;
      std::sort(next.mask_.begin(), next.mask_.end());
      next.mask_.erase(std::unique(next.mask_.begin(), next.mask_.end()), next.mask_.end());
      for (const NeuronId& n : next.mask_)
        if (n.layer < 0 || n.layer >= num_layers_ || n.index < 0 || n.index >= mlp_hidden_)
          throw std::invalid_argument("next_turn: eligible set references out-of-range neuron");
      next.rebuild_lookup();
      break;
    }
    case GateMode::kRandomK: {
      // random mask stays fixed across turns; only the coefficient moves
      next.s_t_ = s_t;
      next.c_t_ = c_t;
      next.g_ = compute_gate(s_t, c_t, params_.alpha, params_.beta);
      break;
    }
  }
  return next;
}

void GateState::prime(double s_t, double c_t) {
  s_t_ = s_t;
  c_t_ = c_t;
  if (mode_ == GateMode::kDynamic || mode_ == GateMode::kRandomK || mode_ == GateMode::kStatic)
    g_ = compute_gate(s_t, c_t, params_.alpha, params_.beta);
}

std::vector<NeuronId> random_mask(int num_layers, int mlp_hidden, int k, Rng& rng) {
  int total = num_layers * mlp_hidden;
  if (k < 1 || k > total) throw std::invalid_argument("random_mask: k out of range");
  std::vector<int> flat = rng.sample_without_replacement(total, k);
  std::vector<NeuronId> out;
  out.reserve(static_cast<size_t>(k));
  for (int f : flat) out.push_back({f / mlp_hidden, f % mlp_hidden});
  return out;
}

}  // namespace ng
