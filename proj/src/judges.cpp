#include "ng/judges.hpp"

#include <cmath>
#include <cstdlib>
#include <stdexcept>

#include "httplib.h"
#include "json.hpp"
#include "ng/autodiff.hpp"
#include "ng/rng.hpp"

namespace ng {

using nlohmann::json;

JudgeVerdict lexicon_judge(const Vocab& v, const std::vector<int>& turn) {
  JudgeVerdict verdict;
  verdict.judge_id = "lexicon";
  for (int tok : turn)
    if (!v.contains(tok)) throw std::invalid_argument("lexicon_judge: token out of vocab");
  for (size_t i = 0; i < turn.size(); ++i) {
    if (v.class_of(turn[i]) != TokenClass::kAttribute) continue;
    for (size_t j = 0; j < turn.size(); ++j) {
      if (v.is_paired(turn[i], turn[j])) {
        verdict.bias_probability = 1.0;
        verdict.rationale_spans.push_back(
            {static_cast<int>(std::min(i, j)), static_cast<int>(std::max(i, j)) + 1});
      }
    }
  }
  for (int tok : turn)
    if (v.class_of(tok) == TokenClass::kToxic) verdict.toxic = true;
  return verdict;
}

// --- classifier judge ---------------------------------------------------------

namespace {

Tensor bag_of_tokens(const Vocab& v, const std::vector<int>& turn) {
  Tensor x({static_cast<int64_t>(1), v.size()});
  for (int tok : turn) {
    if (!v.contains(tok)) throw std::invalid_argument("classifier_judge: token out of vocab");
    x.at(0, tok) = 1.0;
  }
  return x;
}

}  // namespace

double ClassifierJudge::bias_probability(const Vocab& v, const std::vector<int>& turn) const {
  Tape t;
  int x = t.leaf(bag_of_tokens(v, turn));
  int h = t.tanh_(t.add_rowvec(t.matmul(x, t.leaf(w1)), t.leaf(b1)));
  int logits = t.add_rowvec(t.matmul(h, t.leaf(w2)), t.leaf(b2));
  int probs = t.row_softmax(logits);
  return t.value(probs).at(0, 1);
}

JudgeVerdict ClassifierJudge::judge(const Vocab& v, const std::vector<int>& turn) const {
  if (!trained_) throw std::logic_error("classifier_judge: judge() on an untrained classifier");
  JudgeVerdict verdict;
  verdict.judge_id = "classifier";
  verdict.bias_probability = bias_probability(v, turn);
  for (int tok : turn)
    if (v.class_of(tok) == TokenClass::kToxic) verdict.toxic = true;
  return verdict;
}

double ClassifierJudge::accuracy(const Vocab& v,
                                 const std::vector<std::pair<std::vector<int>, bool>>& labeled) const {
  if (labeled.empty()) throw std::invalid_argument("accuracy: empty dataset");
  int64_t hits = 0;
  for (const auto& [turn, label] : labeled)
    if ((bias_probability(v, turn) >= 0.5) == label) ++hits;
  return static_cast<double>(hits) / static_cast<double>(labeled.size());
}

ClassifierJudge train_classifier_judge(const Vocab& v,
                                       const std::vector<std::pair<std::vector<int>, bool>>& labeled,
                                       const ClassifierTrainParams& params) {
  if (labeled.empty()) throw std::invalid_argument("train_classifier_judge: empty training set");
  int64_t n = static_cast<int64_t>(labeled.size());

  Rng rng = Rng::stream(params.seed, "classifier_judge");
  ClassifierJudge judge;
  judge.w1 = Tensor::randn({v.size(), params.hidden}, rng, 1.0 / std::sqrt(static_cast<double>(v.size())));
  judge.b1 = Tensor::zeros({params.hidden});
  judge.w2 = Tensor::randn({params.hidden, 2}, rng, 1.0 / std::sqrt(static_cast<double>(params.hidden)));
  judge.b2 = Tensor::zeros({2});

  // minibatch Adam on 2-class cross entropy
  std::vector<Tensor*> ps = {&judge.w1, &judge.b1, &judge.w2, &judge.b2};
  std::vector<Tensor> m1, m2;
  for (Tensor* p : ps) {
    m1.push_back(Tensor::zeros(p->shape));
    m2.push_back(Tensor::zeros(p->shape));
  }
  int64_t batch = std::min<int64_t>(std::max(1, params.batch), n);
  for (int step = 1; step <= params.steps; ++step) {
    Tensor x({batch, v.size()});
    std::vector<int64_t> y(static_cast<size_t>(batch));
    for (int64_t b = 0; b < batch; ++b) {
      const auto& [turn, label] = labeled[rng.below(static_cast<uint64_t>(n))];
      for (int tok : turn) x.at(b, tok) = 1.0;
      y[static_cast<size_t>(b)] = label ? 1 : 0;
    }
    Tape t;
    int xi = t.leaf(std::move(x));
    std::vector<int> pn;
    for (Tensor* p : ps) pn.push_back(t.leaf(*p));
    int h = t.tanh_(t.add_rowvec(t.matmul(xi, pn[0]), pn[1]));
    int logits = t.add_rowvec(t.matmul(h, pn[2]), pn[3]);
    int ls = t.row_log_softmax(logits);
    int picked = t.pick(ls, y);
    int loss = t.scale(t.sum(picked), -1.0 / static_cast<double>(batch));
    if (!std::isfinite(t.value(loss).item()))
      throw std::runtime_error("train_classifier_judge: loss diverged at step " + std::to_string(step));
    auto grads = t.backward(loss);
    double bc1 = 1.0 - std::pow(0.9, step), bc2 = 1.0 - std::pow(0.999, step);
    for (size_t pi = 0; pi < ps.size(); ++pi) {
      const Tensor& g = grads[static_cast<size_t>(pn[pi])];
      for (size_t i = 0; i < ps[pi]->data.size(); ++i) {
        m1[pi].data[i] = 0.9 * m1[pi].data[i] + 0.1 * g.data[i];
        m2[pi].data[i] = 0.999 * m2[pi].data[i] + 0.001 * g.data[i] * g.data[i];
        ps[pi]->data[i] -= params.lr * (m1[pi].data[i] / bc1) / (std::sqrt(m2[pi].data[i] / bc2) + 1e-8);
      }
    }
  }
  judge.trained_ = true;
  return judge;
}

std::vector<std::pair<std::vector<int>, bool>> make_judge_training_turns(const Vocab& v, int n,
                                                                         uint64_t seed) {
  std::vector<std::pair<std::vector<int>, bool>> out;
  out.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    Rng rng = Rng::stream(seed, "judge_turn." + std::to_string(i));
    std::vector<int> turn;
    auto filler = [&]() {
      return v.filler_tokens()[static_cast<size_t>(rng.below_int(static_cast<int>(v.filler_tokens().size())))];
    };
    int nf = rng.below_int(3);
    for (int f = 0; f < nf; ++f) turn.push_back(filler());

    double kind = rng.uniform();
    AttributeTag g = static_cast<AttributeTag>(rng.below_int(kNumAttributes));
    const auto& attrs = v.attribute_tokens(g);
    int a = attrs[static_cast<size_t>(rng.below_int(static_cast<int>(attrs.size())))];
    bool label;
    if (kind < 0.30) {
      // biased: attribute with one of its paired stereotypes
      const auto& st = v.stereotype_tokens(g);
      turn.push_back(a);
      turn.push_back(st[static_cast<size_t>(rng.below_int(static_cast<int>(st.size())))]);
      if (rng.bernoulli(0.25))
        turn.push_back(
            v.toxic_tokens()[static_cast<size_t>(rng.below_int(static_cast<int>(v.toxic_tokens().size())))]);
      label = true;
    } else if (kind < 0.45) {
      // bare mention: a bias-risk cue, no answer yet
      turn.push_back(a);
      if (rng.bernoulli(0.5)) turn.push_back(v.question);
      label = true;
    } else if (kind < 0.55) {
      // decoy: attribute with an unpaired stereotype (still a risk cue)
      AttributeTag other =
          static_cast<AttributeTag>((static_cast<int>(g) + 1 + rng.below_int(kNumAttributes - 1)) % kNumAttributes);
      const auto& st = v.stereotype_tokens(other);
      turn.push_back(a);
      turn.push_back(st[static_cast<size_t>(rng.below_int(static_cast<int>(st.size())))]);
      label = true;
    } else if (kind < 0.75) {
      // neutrally answered mention
      const auto& nt = v.neutral_tokens(g);
      turn.push_back(a);
      turn.push_back(nt[static_cast<size_t>(rng.below_int(static_cast<int>(nt.size())))]);
      label = false;
    } else if (kind < 0.9) {
      int f = rng.below_int(v.num_facts());
      turn.push_back(v.fact_q(f));
      turn.push_back(v.fact_a(f));
      label = false;
    } else {
      turn.push_back(filler());
      turn.push_back(filler());
      label = false;
    }
    nf = rng.below_int(2);
    for (int f = 0; f < nf; ++f) turn.push_back(filler());
    out.push_back({std::move(turn), label});
  }
  return out;
}

// --- external judge ---------------------------------------------------------------

ExternalJudgeConfig external_judge_config_from_env() {
  ExternalJudgeConfig cfg;
  if (const char* u = std::getenv("NEUROGATE_JUDGE_URL")) cfg.url = u;
  if (const char* t = std::getenv("NEUROGATE_JUDGE_TOKEN")) cfg.auth_token = t;
  if (const char* ms = std::getenv("NEUROGATE_JUDGE_TIMEOUT_MS")) cfg.timeout_ms = std::atoi(ms);
  return cfg;
}

namespace {

JudgeVerdict abstain(const std::string& cause) {
  JudgeVerdict verdict;
  verdict.judge_id = "external";
  verdict.abstained = true;
  verdict.note = cause;
  return verdict;
}

}  // namespace

JudgeVerdict external_judge(const ExternalJudgeConfig& cfg, const Vocab& v, const std::vector<int>& turn) {
  if (cfg.url.empty()) return abstain("no endpoint configured");

  std::string rest = cfg.url;
  auto scheme_pos = rest.find("://");
  if (scheme_pos == std::string::npos) return abstain("bad endpoint url");
  auto path_pos = rest.find('/', scheme_pos + 3);
  std::string base = path_pos == std::string::npos ? rest : rest.substr(0, path_pos);
  std::string path = path_pos == std::string::npos ? "/" : rest.substr(path_pos);

  httplib::Client cli(base);
  cli.set_connection_timeout(0, cfg.timeout_ms * 1000);
  cli.set_read_timeout(0, cfg.timeout_ms * 1000);
  cli.set_write_timeout(0, cfg.timeout_ms * 1000);
  httplib::Headers headers;
  if (!cfg.auth_token.empty()) headers.insert({"Authorization", "Bearer " + cfg.auth_token});

  json body;
  body["instruction"] = cfg.instruction;
  body["turn"] = v.token_seq_str(turn);
  auto res = cli.Post(path, headers, body.dump(), "application/json");
  if (!res) return abstain("network error or timeout");
  if (res->status != 200) return abstain("http status " + std::to_string(res->status));

  try {
    json j = json::parse(res->body);
    JudgeVerdict verdict;
    verdict.judge_id = "external";
    if (j.contains("bias_probability")) {
      double p = j.at("bias_probability").get<double>();
      if (!(p >= 0.0 && p <= 1.0)) return abstain("bias_probability out of range");
      verdict.bias_probability = p;
    } else if (j.contains("biased")) {
      verdict.bias_probability = j.at("biased").get<bool>() ? 1.0 : 0.0;
    } else {
      return abstain("verdict missing biased/bias_probability");
    }
    if (j.contains("toxic")) verdict.toxic = j.at("toxic").get<bool>();
    return verdict;
  } catch (const std::exception& e) {
    return abstain(std::string("malformed response: ") + e.what());
  }
}

// --- ensemble ------------------------------------------------------------------------

double ensemble_score(const std::vector<JudgeVerdict>& verdicts, const EnsembleConfig& cfg) {
  double wsum = 0.0, acc = 0.0;
  for (const auto& verdict : verdicts) {
    if (verdict.abstained) continue;
    auto it = cfg.weights.find(verdict.judge_id);
    if (it == cfg.weights.end())
      throw std::invalid_argument("ensemble: judge '" + verdict.judge_id + "' not registered");
    if (it->second < 0.0)
      throw std::invalid_argument("ensemble: negative weight for '" + verdict.judge_id + "'");
    wsum += it->second;
    acc += it->second * verdict.bias_probability;
  }
  if (wsum <= 0.0) throw std::runtime_error("ensemble: all judges abstained; turn is unscored");
  return acc / wsum;
}

bool ensemble_toxic(const std::vector<JudgeVerdict>& verdicts) {
  for (const auto& verdict : verdicts)
    if (!verdict.abstained && verdict.toxic) return true;
  return false;
}

double cohens_kappa(const std::vector<int>& labels_a, const std::vector<int>& labels_b) {
  if (labels_a.size() != labels_b.size())
    throw std::invalid_argument("cohens_kappa: label sequences differ in length");
  if (labels_a.empty()) throw std::invalid_argument("cohens_kappa: empty label sequences");
  double n = static_cast<double>(labels_a.size());
  double a1 = 0, b1 = 0, agree = 0;
  for (size_t i = 0; i < labels_a.size(); ++i) {
    int la = labels_a[i] ? 1 : 0;
    int lb = labels_b[i] ? 1 : 0;
    a1 += la;
    b1 += lb;
    agree += (la == lb) ? 1 : 0;
  }
  double po = agree / n;
  double pa1 = a1 / n, pb1 = b1 / n;
  double pe = pa1 * pb1 + (1.0 - pa1) * (1.0 - pb1);
  if (pe >= 1.0) return 1.0;  // both raters constant and equal
  return (po - pe) / (1.0 - pe);
}

}  // namespace ng
