#include "ng/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "ng/rng.hpp"

namespace ng {

// --- aggregation primitives -----------------------------------------------------

Tensor token_aggregate_max(const Tensor& per_token) {
  if (per_token.rank() != 2 || per_token.rows() < 1)
    throw std::invalid_argument("token_aggregate: need at least one token row");
  Tensor out({per_token.cols()});
  for (int64_t n = 0; n < per_token.cols(); ++n) {
    double best = per_token.at(0, n);
    for (int64_t k = 1; k < per_token.rows(); ++k) best = std::max(best, per_token.at(k, n));
    out.at(n) = best;
  }
  return out;
}

LocalCarrySplit local_carry_split(const Tensor& per_token, int64_t boundary) {
  if (per_token.rank() != 2) throw std::invalid_argument("local_carry_split: need [T,N] input");
  if (boundary < 0 || boundary > per_token.rows())
    throw std::invalid_argument("local_carry_split: boundary " + std::to_string(boundary) +
                                " outside [0," + std::to_string(per_token.rows()) + "]");
  LocalCarrySplit split;
  split.m_local = Tensor::zeros({per_token.cols()});
  split.m_carry = Tensor::zeros({per_token.cols()});
  for (int64_t k = 0; k < per_token.rows(); ++k) {
    Tensor& dst = k < boundary ? split.m_carry : split.m_local;
    for (int64_t n = 0; n < per_token.cols(); ++n) dst.at(n) += per_token.at(k, n);
  }
  return split;
}

ConfusionWeights confusion_weights(const std::vector<double>& alpha) {
  if (alpha.empty()) throw std::invalid_argument("confusion_weights: empty instance set");
  for (double a : alpha)
    if (!(a >= 0.0) || !std::isfinite(a))
      throw std::invalid_argument("confusion_weights: alpha must be finite and non-negative");
  ConfusionWeights out;
  double sum = 0.0;
  for (double a : alpha) sum += a;
  if (sum <= 0.0) {
    out.uniform_fallback = true;
    out.weights.assign(alpha.size(), 1.0 / static_cast<double>(alpha.size()));
    return out;
  }
  out.weights.reserve(alpha.size());
  for (double a : alpha) out.weights.push_back(a / sum);
  return out;
}

Tensor instance_aggregate(const std::vector<Tensor>& per_instance, const std::vector<double>& norm_weights,
                          const std::vector<double>& carry_share, double lambda) {
  if (per_instance.empty()) throw std::invalid_argument("instance_aggregate: empty instance set");
  if (per_instance.size() != norm_weights.size() || per_instance.size() != carry_share.size())
    throw std::invalid_argument("instance_aggregate: sizes disagree");
  if (lambda < 0.0) throw std::invalid_argument("instance_aggregate: lambda must be >= 0");

  std::vector<double> w(norm_weights.size());
  double sum = 0.0;
  for (size_t j = 0; j < w.size(); ++j) {
    w[j] = norm_weights[j] * (1.0 + lambda * carry_share[j]);
    sum += w[j];
  }
  if (sum <= 0.0) {
    w.assign(w.size(), 1.0 / static_cast<double>(w.size()));
    sum = 1.0;
  }
  Tensor out = Tensor::zeros(per_instance[0].shape);
  for (size_t j = 0; j < per_instance.size(); ++j) {
    if (!per_instance[j].same_shape(out))
      throw std::invalid_argument("instance_aggregate: instance score shapes disagree");
    double wj = w[j] / sum;
    for (int64_t i = 0; i < out.numel(); ++i) out.at(i) += wj * per_instance[j].at(i);
  }
  return out;
}

Tensor instruction_aggregate(const std::vector<Tensor>& per_instruction) {
  if (per_instruction.empty()) throw std::invalid_argument("instruction_aggregate: empty instruction set");
  Tensor out = Tensor::zeros(per_instruction[0].shape);
  for (const Tensor& b : per_instruction) {
    if (!b.same_shape(out)) throw std::invalid_argument("instruction_aggregate: score shapes disagree");
    for (int64_t i = 0; i < out.numel(); ++i) out.at(i) += b.at(i);
  }
  double inv = 1.0 / static_cast<double>(per_instruction.size());
  for (auto& x : out.data) x *= inv;
  return out;
}

double carry_share(const LocalCarrySplit& split, double epsilon) {
  double local = 0.0, carry = 0.0;
  for (double x : split.m_local.data) local += std::abs(x);
  for (double x : split.m_carry.data) carry += std::abs(x);
  return carry / (local + carry + epsilon);
}

// --- model-coupled attribution ------------------------------------------------------

namespace {

// log-probability mass of the class tokens at answer_pos, as a tape node
int target_node(Tape& tape, int logits, const std::vector<int>& class_tokens, int64_t answer_pos) {
  int ls = tape.row_log_softmax(logits);
  int row = tape.select_row(ls, answer_pos);
  std::vector<int64_t> ids(class_tokens.begin(), class_tokens.end());
  int cls = tape.gather(row, ids);
  return tape.logsumexp(cls);
}

}  // namespace

double stereotype_mass(const Checkpoint& ckpt, const std::vector<int>& tokens,
                       const std::vector<int>& class_tokens, int64_t answer_pos) {
  TapeForward tf = forward_tape(ckpt, tokens);
  return tf.tape.value(target_node(tf.tape, tf.logits, class_tokens, answer_pos)).item();
}

LayerAttribution grad_x_activation(const Checkpoint& ckpt, const std::vector<int>& tokens,
                                   const std::vector<int>& class_tokens, int64_t answer_pos) {
  if (class_tokens.empty()) throw std::invalid_argument("grad_x_activation: empty class token set");
  TapeForward tf = forward_tape(ckpt, tokens);
  int target = target_node(tf.tape, tf.logits, class_tokens, answer_pos);
  std::vector<Tensor> grads = tf.tape.backward(target);

  LayerAttribution out;
  for (size_t l = 0; l < tf.hidden.size(); ++l) {
    const Tensor& h = tf.tape.value(tf.hidden[l]);
    const Tensor& g = grads[static_cast<size_t>(tf.hidden[l])];
    Tensor a(h.shape);
    for (int64_t i = 0; i < h.numel(); ++i) {
      a.at(i) = h.at(i) * g.at(i);
      if (!std::isfinite(a.at(i)))
        throw std::runtime_error("grad_x_activation: non-finite attribution at layer " + std::to_string(l) +
                                 ", position " + std::to_string(i / h.cols()) + ", neuron " +
                                 std::to_string(i % h.cols()));
    }
    out.layers.push_back(std::move(a));
  }
  return out;
}

std::vector<Tensor> ig_path_integral(
    const std::function<std::vector<Tensor>(const std::vector<Tensor>&)>& gradient_at,
    const std::vector<Tensor>& h_star, int steps) {
  if (steps < 1) throw std::invalid_argument("ig_path_integral: steps must be >= 1");
  std::vector<Tensor> accum;
  for (const Tensor& h : h_star) accum.push_back(Tensor::zeros(h.shape));

  std::vector<Tensor> point(h_star.size());
  for (int s = 0; s < steps; ++s) {
    double a = (static_cast<double>(s) + 0.5) / static_cast<double>(steps);  // midpoint rule
    for (size_t l = 0; l < h_star.size(); ++l) {
      const Tensor& h = h_star[l];
      point[l] = Tensor(h.shape);
      for (int64_t i = 0; i < h.numel(); ++i) point[l].at(i) = h.at(i) * a;
    }
    std::vector<Tensor> grads = gradient_at(point);
    if (grads.size() != h_star.size()) throw std::invalid_argument("ig_path_integral: gradient arity");
    for (size_t l = 0; l < h_star.size(); ++l)
      for (int64_t i = 0; i < accum[l].numel(); ++i) accum[l].at(i) += grads[l].at(i);
  }
  std::vector<Tensor> out;
  double inv = 1.0 / static_cast<double>(steps);
  for (size_t l = 0; l < h_star.size(); ++l) {
    Tensor a(h_star[l].shape);
    for (int64_t i = 0; i < a.numel(); ++i) a.at(i) = h_star[l].at(i) * accum[l].at(i) * inv;
    out.push_back(std::move(a));
  }
  return out;
}

IgResult integrated_gradients(const Checkpoint& ckpt, const std::vector<int>& tokens,
                              const std::vector<int>& class_tokens, int64_t answer_pos, int steps) {
  if (steps < 1) throw std::invalid_argument("integrated_gradients: steps must be >= 1");
  if (class_tokens.empty()) throw std::invalid_argument("integrated_gradients: empty class token set");

  // reference activations from an unclamped pass
  ForwardResult ref = forward(ckpt, tokens, nullptr, true);
  const std::vector<Tensor>& h_star = ref.trace.layers;
  int L = static_cast<int>(h_star.size());

  auto gradient_at = [&](const std::vector<Tensor>& point) {
    TapeForward tf = forward_tape(ckpt, tokens, &point);
    int target = target_node(tf.tape, tf.logits, class_tokens, answer_pos);
    std::vector<Tensor> grads = tf.tape.backward(target);
    std::vector<Tensor> out;
    for (int l = 0; l < L; ++l) out.push_back(grads[static_cast<size_t>(tf.hidden[static_cast<size_t>(l)])]);
    return out;
  };

  IgResult res;
  res.attribution.layers = ig_path_integral(gradient_at, h_star, steps);

  // endpoint values via clamped forward-only passes
  std::vector<Tensor> clamped(h_star.size());
  for (int l = 0; l < L; ++l) clamped[static_cast<size_t>(l)] = h_star[static_cast<size_t>(l)];
  {
    TapeForward tf = forward_tape(ckpt, tokens, &clamped);
    res.f_input = tf.tape.value(target_node(tf.tape, tf.logits, class_tokens, answer_pos)).item();
  }
  for (int l = 0; l < L; ++l) clamped[static_cast<size_t>(l)] = Tensor::zeros(h_star[static_cast<size_t>(l)].shape);
  {
    TapeForward tf = forward_tape(ckpt, tokens, &clamped);
    res.f_baseline = tf.tape.value(target_node(tf.tape, tf.logits, class_tokens, answer_pos)).item();
  }
  return res;
}

// --- ranking pipeline ------------------------------------------------------------------

AttributionInstance make_attribution_instance(const Vocab& v, AttributeTag attribute, int template_id,
                                              int instance_id, uint64_t seed) {
  Rng rng = Rng::stream(seed, "attr_inst." + std::string(attribute_name(attribute)) + "." +
                                  std::to_string(template_id) + "." + std::to_string(instance_id));
  const auto& surf = v.attribute_tokens(attribute);
  const auto& ster = v.stereotype_tokens(attribute);
  int a = surf[static_cast<size_t>(instance_id) % surf.size()];

  AttributionInstance inst;
  std::vector<int>& seq = inst.tokens;
  seq.push_back(v.bos);

  // history depth grows with the instance id: 0..3 reinforcing exchanges
  int depth = instance_id % 4;
  for (int dturn = 0; dturn < depth; ++dturn) {
    int s = ster[static_cast<size_t>(rng.below_int(static_cast<int>(ster.size())))];
    seq.push_back(v.usr);
    seq.push_back(a);
    seq.push_back(v.question);
    seq.push_back(v.sep);
    seq.push_back(v.mdl);
    seq.push_back(a);
    seq.push_back(s);
    seq.push_back(v.sep);
  }

  inst.boundary = static_cast<int64_t>(seq.size());
  seq.push_back(v.usr);
  switch (template_id % 3) {
    case 0:
      seq.push_back(a);
      seq.push_back(v.question);
      break;
    case 1: {
      int f = v.filler_tokens()[static_cast<size_t>(rng.below_int(static_cast<int>(v.filler_tokens().size())))];
      seq.push_back(f);
      seq.push_back(a);
      seq.push_back(v.question);
      break;
    }
    default:
      seq.push_back(v.aff);
      seq.push_back(a);
      seq.push_back(v.question);
      break;
  }
  seq.push_back(v.sep);
  seq.push_back(v.mdl);
  seq.push_back(a);  // forced echo; the continuation slot is next
  inst.answer_pos = static_cast<int64_t>(seq.size()) - 1;
  return inst;
}

NeuronRanking rank_bias_neurons(const Checkpoint& ckpt, const Vocab& v, const AttributionParams& params) {
  if (params.instances_per_instruction < 1 || params.templates < 1)
    throw std::invalid_argument("rank_bias_neurons: need at least one template and instance");

  const int L = ckpt.config.num_layers;
  const int H = ckpt.config.mlp_hidden;
  const int64_t flat = static_cast<int64_t>(L) * H;

  std::vector<Tensor> instr_scores, instr_local, instr_carry;

  for (int g = 0; g < kNumAttributes; ++g) {
    AttributeTag attribute = static_cast<AttributeTag>(g);
    std::vector<int> class_tokens = v.stereotype_tokens(attribute);
    for (int tmpl = 0; tmpl < params.templates; ++tmpl) {
      std::vector<Tensor> inst_scores;
      std::vector<double> alphas, shares;
      std::vector<Tensor> inst_local, inst_carry;

      for (int j = 0; j < params.instances_per_instruction; ++j) {
        AttributionInstance inst = make_attribution_instance(v, attribute, tmpl, j, params.seed);

        LayerAttribution attr =
            params.method == AttributionMethod::kGradXActivation
                ? grad_x_activation(ckpt, inst.tokens, class_tokens, inst.answer_pos)
                : integrated_gradients(ckpt, inst.tokens, class_tokens, inst.answer_pos, params.ig_steps)
                      .attribution;

        // flatten layers into one [T, L*H] table
        int64_t t = attr.layers[0].rows();
        Tensor table({t, flat});
        for (int l = 0; l < L; ++l) {
          const Tensor& al = attr.layers[static_cast<size_t>(l)];
          for (int64_t k = 0; k < t; ++k)
            for (int64_t n = 0; n < H; ++n) {
              double val = al.at(k, n);
              table.at(k, static_cast<int64_t>(l) * H + n) = params.absolute_values ? std::abs(val) : val;
            }
        }

        LocalCarrySplit split = local_carry_split(table, inst.boundary);
        inst_scores.push_back(token_aggregate_max(table));
        inst_local.push_back(split.m_local);
        inst_carry.push_back(split.m_carry);
        shares.push_back(carry_share(split));

        // confusion score: the model's probability of its own greedy answer
        Tensor lp = next_token_log_probs(ckpt, inst.tokens);
        int64_t best = 0;
        for (int64_t i = 1; i < lp.numel(); ++i)
          if (lp.at(i) > lp.at(best)) best = i;
        alphas.push_back(std::exp(lp.at(best)));
      }

      ConfusionWeights cw = confusion_weights(alphas);
      instr_scores.push_back(instance_aggregate(inst_scores, cw.weights, shares, params.lambda));
      instr_local.push_back(instance_aggregate(inst_local, cw.weights, shares, params.lambda));
      instr_carry.push_back(instance_aggregate(inst_carry, cw.weights, shares, params.lambda));
    }
  }

  Tensor final_score = instruction_aggregate(instr_scores);
  Tensor final_local = instruction_aggregate(instr_local);
  Tensor final_carry = instruction_aggregate(instr_carry);

  NeuronRanking ranking;
  ranking.num_instructions = static_cast<int>(instr_scores.size());
  ranking.num_instances = params.instances_per_instruction;
  ranking.entries.reserve(static_cast<size_t>(flat));
  for (int64_t i = 0; i < flat; ++i) {
    NeuronScore s;
    s.id = {static_cast<int>(i / H), static_cast<int>(i % H)};
    s.score = final_score.at(i);
    s.m_local = final_local.at(i);
    s.m_carry = final_carry.at(i);
    ranking.entries.push_back(s);
  }
  std::sort(ranking.entries.begin(), ranking.entries.end(), [](const NeuronScore& a, const NeuronScore& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.id < b.id;
  });
  return ranking;
}

std::vector<NeuronId> select_top_k(const NeuronRanking& ranking, int k) {
  if (k < 1 || k > static_cast<int>(ranking.entries.size()))
    throw std::invalid_argument("select_top_k: k " + std::to_string(k) + " outside [1," +
                                std::to_string(ranking.entries.size()) + "]");
  std::vector<NeuronId> out;
  out.reserve(static_cast<size_t>(k));
  for (int i = 0; i < k; ++i) out.push_back(ranking.entries[static_cast<size_t>(i)].id);
  return out;
}

// --- csv ---------------------------------------------------------------------------------

namespace {
std::string fmt_g(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.12g", x);
  return buf;
}
}  // namespace

void write_ranking_csv(const NeuronRanking& ranking, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "rank,layer,neuron,score,m_local,m_carry\n";
  for (size_t i = 0; i < ranking.entries.size(); ++i) {
    const NeuronScore& s = ranking.entries[i];
    out << i << "," << s.id.layer << "," << s.id.index << "," << fmt_g(s.score) << "," << fmt_g(s.m_local)
        << "," << fmt_g(s.m_carry) << "\n";
  }
}

NeuronRanking read_ranking_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  NeuronRanking ranking;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    NeuronScore s;
    size_t pos = 0;
    auto next = [&]() {
      size_t comma = line.find(',', pos);
      std::string f = comma == std::string::npos ? line.substr(pos) : line.substr(pos, comma - pos);
      pos = comma == std::string::npos ? line.size() : comma + 1;
      return f;
    };
    next();  // rank
    s.id.layer = std::stoi(next());
    s.id.index = std::stoi(next());
    s.score = std::stod(next());
    s.m_local = std::stod(next());
    s.m_carry = std::stod(next());
    ranking.entries.push_back(s);
  }
  return ranking;
}

}  // namespace ng
