#include "ng/probe.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "ng/rng.hpp"

namespace ng {

namespace {

ProbePair make_bias_pair(const Vocab& v, AttributeTag attribute, int stereotype_idx) {
  const auto& surf = v.attribute_tokens(attribute);
  const auto& ster = v.stereotype_tokens(attribute);
  ProbePair p;
  p.concept_id = std::string("bias:") + attribute_name(attribute) + ":" + std::to_string(stereotype_idx);
  p.is_bias = true;
  p.echo = surf[0];
  p.affirmative = {v.aff, p.echo, v.question};
  p.negative = {v.neg, p.echo, v.question};
  p.expected_aff = ster[static_cast<size_t>(stereotype_idx)];
  p.expected_neg = v.decline;
  return p;
}

ProbePair make_fact_pair(const Vocab& v, int fact_idx) {
  ProbePair p;
  p.concept_id = "fact:" + std::to_string(fact_idx);
  p.is_bias = false;
  p.echo = v.fact_q(fact_idx);
  p.affirmative = {v.aff, p.echo, v.question};
  p.negative = {v.neg, p.echo, v.question};
  p.expected_aff = v.fact_a(fact_idx);
  p.expected_neg = v.decline;
  return p;
}

}  // namespace

std::vector<ProbePair> build_probe_pairs(const Vocab& v, int num_bias, int num_knowledge, uint64_t seed) {
  int max_bias = kNumAttributes * v.spec().stereotypes_per_attribute;
  if (num_bias < 0 || num_bias > max_bias)
    throw std::invalid_argument("build_probe_pairs: vocabulary supports at most " +
                                std::to_string(max_bias) + " bias concepts");
  if (num_knowledge < 0 || num_knowledge > v.num_facts())
    throw std::invalid_argument("build_probe_pairs: vocabulary supports at most " +
                                std::to_string(v.num_facts()) + " knowledge concepts");

  Rng rng = Rng::stream(seed, "probe_pairs");
  std::vector<int> bias_order(static_cast<size_t>(max_bias));
  for (int i = 0; i < max_bias; ++i) bias_order[static_cast<size_t>(i)] = i;
  rng.shuffle(bias_order);
  std::vector<int> fact_order = rng.sample_without_replacement(v.num_facts(), num_knowledge);

  std::vector<ProbePair> out;
  int per_attr = v.spec().stereotypes_per_attribute;
  for (int i = 0; i < num_bias; ++i) {
    int flat = bias_order[static_cast<size_t>(i)];
    out.push_back(make_bias_pair(v, static_cast<AttributeTag>(flat / per_attr), flat % per_attr));
  }
  for (int f : fact_order) out.push_back(make_fact_pair(v, f));
  return out;
}

std::vector<ProbePair> attribute_probe_pairs(const Vocab& v, AttributeTag attribute) {
  std::vector<ProbePair> out;
  for (int s = 0; s < v.spec().stereotypes_per_attribute; ++s) out.push_back(make_bias_pair(v, attribute, s));
  return out;
}

std::vector<int> probe_query_prefix(const Vocab& v, const DialogueHistory& hist,
                                    const std::vector<int>& query, int echo, int context_len) {
  DialogueHistory h = hist;
  DialogueTurn turn;
  turn.user = query;
  h.turns.push_back(turn);
  std::vector<int> prefix = serialize_dialogue(v, h, context_len - 2, true);
  prefix.push_back(echo);
  return prefix;
}

namespace {

double pearson(const std::vector<double>& xs, const std::vector<double>& ys, bool* zero_variance) {
  double mx = 0, my = 0;
  size_t n = xs.size();
  for (size_t i = 0; i < n; ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxx = 0, syy = 0, sxy = 0;
  for (size_t i = 0; i < n; ++i) {
    sxx += (xs[i] - mx) * (xs[i] - mx);
    syy += (ys[i] - my) * (ys[i] - my);
    sxy += (xs[i] - mx) * (ys[i] - my);
  }
  if (sxx <= 0.0 || syy <= 0.0) {
    if (zero_variance) *zero_variance = true;
    return 0.0;
  }
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace

double probe_gap(const Checkpoint& ckpt, const Vocab& v, const DialogueHistory& hist, const ProbePair& pair,
                 const GateState* gate) {
  ActivationHook hook;
  const ActivationHook* hook_ptr = nullptr;
  if (gate && gate->mode() != GateMode::kOff) {
    hook = [gate](int layer, Tensor& hidden) { gate->apply(layer, hidden); };
    hook_ptr = &hook;
  }
  std::vector<int> aff = probe_query_prefix(v, hist, pair.affirmative, pair.echo, ckpt.config.context_len);
  std::vector<int> neg = probe_query_prefix(v, hist, pair.negative, pair.echo, ckpt.config.context_len);
  Tensor lp_aff = next_token_log_probs(ckpt, aff, hook_ptr);
  Tensor lp_neg = next_token_log_probs(ckpt, neg, hook_ptr);
  return std::exp(lp_aff.at(pair.expected_aff)) - std::exp(lp_neg.at(pair.expected_neg));
}

double calibrate_probe_scale(const Checkpoint& ckpt, const Vocab& v, const std::vector<ProbePair>& pairs,
                             int reference_turns) {
  double scale = 0.0;
  for (const ProbePair& pair : pairs) {
    if (!pair.is_bias) continue;
    DialogueHistory ref;
    for (int t = 0; t < reference_turns; ++t) {
      DialogueTurn turn;
      turn.user = {pair.echo, v.question};
      turn.model = {pair.echo, pair.expected_aff};
      ref.turns.push_back(turn);
    }
    scale = std::max(scale, std::abs(probe_gap(ckpt, v, ref, pair, nullptr)));
  }
  // floor at a 5% probability gap: anything smaller is chance-level noise
  // and must not normalize up to a spurious memory score
  return std::max(scale, 0.05);
}

MemoryScoreResult memory_score(const Checkpoint& ckpt, const Vocab& v, const DialogueHistory& hist,
                               const std::vector<ProbePair>& pairs, double calibration_scale,
                               const GateState* gate) {
  if (!(calibration_scale > 0.0))
    throw std::invalid_argument("memory_score: calibration scale must be positive");
  MemoryScoreResult res;
  double sum = 0.0;
  int bias_count = 0;
  for (const ProbePair& pair : pairs) {
    double gap = probe_gap(ckpt, v, hist, pair, gate);
    res.gaps.push_back(gap);
    if (pair.is_bias) {
      sum += gap;
      ++bias_count;
    }
  }
  if (bias_count == 0) {
    res.defined = false;  // explicit "no bias pairs", not 0
    return res;
  }
  double mean = sum / static_cast<double>(bias_count);
  res.c_t = std::clamp(mean / calibration_scale, 0.0, 1.0);
  res.defined = true;
  return res;
}

NeuronConsistency probe_neuron_consistency(const Checkpoint& ckpt, const Vocab& v,
                                           const std::vector<DialogueHistory>& histories,
                                           const std::vector<ProbePair>& pairs,
                                           const std::vector<NeuronId>& candidates) {
  if (histories.empty()) throw std::invalid_argument("probe_neuron_consistency: no histories");
  for (const NeuronId& n : candidates)
    if (n.layer < 0 || n.layer >= ckpt.config.num_layers || n.index < 0 ||
        n.index >= ckpt.config.mlp_hidden)
      throw std::invalid_argument("probe_neuron_consistency: candidate neuron out of range");

  // one sample per (history, pair): activation delta at the echo position
  // and the answer gap
  struct Sample {
    bool is_bias;
    double gap;
    std::vector<double> delta;  // per candidate
  };
  std::vector<Sample> samples;

  for (const DialogueHistory& hist : histories) {
    for (const ProbePair& pair : pairs) {
      std::vector<int> aff = probe_query_prefix(v, hist, pair.affirmative, pair.echo, ckpt.config.context_len);
      std::vector<int> neg = probe_query_prefix(v, hist, pair.negative, pair.echo, ckpt.config.context_len);
      ForwardResult fa = forward(ckpt, aff, nullptr, true);
      ForwardResult fn = forward(ckpt, neg, nullptr, true);
      Tensor ls_a(fa.logits.shape), ls_n(fn.logits.shape);
      fwd::row_log_softmax(fa.logits.data.data(), ls_a.data.data(), fa.logits.rows(), fa.logits.cols());
      fwd::row_log_softmax(fn.logits.data.data(), ls_n.data.data(), fn.logits.rows(), fn.logits.cols());
      Sample s;
      s.is_bias = pair.is_bias;
      s.gap = std::exp(ls_a.at(fa.logits.rows() - 1, pair.expected_aff)) -
              std::exp(ls_n.at(fn.logits.rows() - 1, pair.expected_neg));
      int64_t pa = static_cast<int64_t>(aff.size()) - 1;
      int64_t pn = static_cast<int64_t>(neg.size()) - 1;
      s.delta.reserve(candidates.size());
      for (const NeuronId& n : candidates)
        s.delta.push_back(fa.trace.at(n.layer, pa, n.index) - fn.trace.at(n.layer, pn, n.index));
      samples.push_back(std::move(s));
    }
  }

  NeuronConsistency out;
  out.candidates = candidates;
  for (size_t ci = 0; ci < candidates.size(); ++ci) {
    for (bool bias_side : {true, false}) {
      std::vector<double> xs, ys;
      for (const Sample& s : samples) {
        if (s.is_bias != bias_side) continue;
        xs.push_back(s.delta[ci]);
        ys.push_back(s.gap);
      }
      double r = 0.0;
      if (xs.size() >= 2) {
        bool zero_var = false;
        r = pearson(xs, ys, &zero_var);
        if (zero_var) ++out.zero_variance_count;
      }
      (bias_side ? out.bias_consistency : out.knowledge_consistency).push_back(r);
    }
  }
  return out;
}

NeuronClassification classify_neurons(const NeuronConsistency& consistency, double tau) {
  NeuronClassification out;
  for (size_t i = 0; i < consistency.candidates.size(); ++i) {
    bool eligible = consistency.bias_consistency[i] >= tau && consistency.knowledge_consistency[i] < tau;
    (eligible ? out.gate_eligible : out.knowledge_protected).push_back(consistency.candidates[i]);
  }
  return out;
}

void write_probe_csv(const NeuronConsistency& consistency, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "layer,neuron,bias_consistency,knowledge_consistency\n";
  char buf[96];
  for (size_t i = 0; i < consistency.candidates.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%d,%d,%.12g,%.12g\n", consistency.candidates[i].layer,
                  consistency.candidates[i].index, consistency.bias_consistency[i],
                  consistency.knowledge_consistency[i]);
    out << buf;
  }
}

NeuronConsistency read_probe_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  NeuronConsistency out;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    size_t pos = 0;
    auto next = [&]() {
      size_t comma = line.find(',', pos);
      std::string f = comma == std::string::npos ? line.substr(pos) : line.substr(pos, comma - pos);
      pos = comma == std::string::npos ? line.size() : comma + 1;
      return f;
    };
    NeuronId id;
    id.layer = std::stoi(next());
    id.index = std::stoi(next());
    out.candidates.push_back(id);
    out.bias_consistency.push_back(std::stod(next()));
    out.knowledge_consistency.push_back(std::stod(next()));
  }
  return out;
}

}  // namespace ng
