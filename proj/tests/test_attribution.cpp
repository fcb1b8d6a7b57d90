#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "ng/attribution.hpp"
#include "ng/rng.hpp"
#include "test_util.hpp"

using namespace ng;

namespace {

VocabSpec tiny_vocab_spec() {
  VocabSpec s;
  s.surface_per_attribute = 2;
  s.stereotypes_per_attribute = 2;
  s.neutral_per_attribute = 4;
  s.num_toxic = 2;
  s.num_facts = 4;
  s.total_size = 104;
  s.seed = 3;
  return s;
}

ModelConfig tiny_config(int layers = 2) {
  ModelConfig c;
  c.num_layers = layers;
  c.model_dim = 32;
  c.mlp_hidden = 48;
  c.num_heads = 2;
  c.vocab_size = 104;
  c.context_len = 96;
  c.seed = 23;
  return c;
}

// single-pass brute-force evaluation of the aggregation pipeline on raw
// per-token tables: max over tokens, confusion weights, carry emphasis,
// instruction mean. Independent of the library composition.
Tensor brute_force_rank(const std::vector<std::vector<Tensor>>& tables,  // [instr][instance] ([T,N])
                        const std::vector<std::vector<double>>& alphas,
                        const std::vector<std::vector<int64_t>>& bounds, double lambda) {
  size_t M = tables.size();
  int64_t N = tables[0][0].cols();
  Tensor final_score({N});
  for (size_t m = 0; m < M; ++m) {
    size_t J = tables[m].size();
    // weights
    double asum = 0;
    for (double a : alphas[m]) asum += a;
    std::vector<double> w(J);
    double wsum = 0;
    for (size_t j = 0; j < J; ++j) {
      double anorm = asum > 0 ? alphas[m][j] / asum : 1.0 / static_cast<double>(J);
      // per-neuron signed sums within each region, absolute mass afterwards
      double local = 0, carry = 0;
      for (int64_t n = 0; n < N; ++n) {
        double lsum = 0, csum = 0;
        for (int64_t k = 0; k < tables[m][j].rows(); ++k)
          (k < bounds[m][j] ? csum : lsum) += tables[m][j].at(k, n);
        local += std::abs(lsum);
        carry += std::abs(csum);
      }
      double share = carry / (local + carry + 1e-12);
      w[j] = anorm * (1.0 + lambda * share);
      wsum += w[j];
    }
    for (int64_t n = 0; n < N; ++n) {
      double b = 0;
      for (size_t j = 0; j < J; ++j) {
        double mx = tables[m][j].at(0, n);
        for (int64_t k = 1; k < tables[m][j].rows(); ++k) mx = std::max(mx, tables[m][j].at(k, n));
        b += w[j] / wsum * mx;
      }
      final_score.at(n) += b / static_cast<double>(M);
    }
  }
  return final_score;
}

// the same pipeline through the library operations
Tensor composed_rank(const std::vector<std::vector<Tensor>>& tables,
                     const std::vector<std::vector<double>>& alphas,
                     const std::vector<std::vector<int64_t>>& bounds, double lambda) {
  std::vector<Tensor> per_instr;
  for (size_t m = 0; m < tables.size(); ++m) {
    std::vector<Tensor> scores;
    std::vector<double> shares;
    for (size_t j = 0; j < tables[m].size(); ++j) {
      scores.push_back(token_aggregate_max(tables[m][j]));
      shares.push_back(carry_share(local_carry_split(tables[m][j], bounds[m][j])));
    }
    ConfusionWeights cw = confusion_weights(alphas[m]);
    per_instr.push_back(instance_aggregate(scores, cw.weights, shares, lambda));
  }
  return instruction_aggregate(per_instr);
}

}  // namespace

TEST_CASE("token aggregation: max over token positions, signed") {
  Tensor t = Tensor::matrix(3, 1, {0.2, 0.5, 0.1});
  CHECK(token_aggregate_max(t).at(0) == 0.5);
  Tensor single = Tensor::matrix(1, 1, {0.7});
  CHECK(token_aggregate_max(single).at(0) == 0.7);
  Tensor neg = Tensor::matrix(2, 1, {-0.4, -0.1});
  CHECK(token_aggregate_max(neg).at(0) == -0.1);
  CHECK_THROWS_AS(token_aggregate_max(Tensor::zeros({0, 3})), std::invalid_argument);
}

TEST_CASE("local/carry split: boundary partition with brute-force agreement") {
  Rng rng(31);
  Tensor table = ngtest::random_tensor({7, 5}, rng);
  // empty history
  LocalCarrySplit s0 = local_carry_split(table, 0);
  for (int64_t n = 0; n < 5; ++n) CHECK(s0.m_carry.at(n) == 0.0);
  // everything in history
  LocalCarrySplit s7 = local_carry_split(table, 7);
  for (int64_t n = 0; n < 5; ++n) CHECK(s7.m_local.at(n) == 0.0);
  // brute-force partition
  for (int64_t b : {1, 3, 6}) {
    LocalCarrySplit s = local_carry_split(table, b);
    for (int64_t n = 0; n < 5; ++n) {
      double carry = 0, local = 0;
      for (int64_t k = 0; k < 7; ++k) (k < b ? carry : local) += table.at(k, n);
      CHECK(s.m_carry.at(n) == doctest::Approx(carry).epsilon(1e-15));
      CHECK(s.m_local.at(n) == doctest::Approx(local).epsilon(1e-15));
      // m_local + m_carry equals total attribution mass by construction
      double total = 0;
      for (int64_t k = 0; k < 7; ++k) total += table.at(k, n);
      CHECK(s.m_local.at(n) + s.m_carry.at(n) == doctest::Approx(total).epsilon(1e-12));
    }
  }
  CHECK_THROWS_AS(local_carry_split(table, 8), std::invalid_argument);
  CHECK_THROWS_AS(local_carry_split(table, -1), std::invalid_argument);
}

TEST_CASE("confusion weights: normalization and uniform fallback") {
  ConfusionWeights w = confusion_weights({0.5, 0.5});
  CHECK(w.weights[0] == doctest::Approx(0.5));
  CHECK_FALSE(w.uniform_fallback);
  w = confusion_weights({0.2, 0.6});
  CHECK(w.weights[0] == doctest::Approx(0.25));
  CHECK(w.weights[1] == doctest::Approx(0.75));
  w = confusion_weights({0.3});
  CHECK(w.weights[0] == doctest::Approx(1.0));
  w = confusion_weights({0.0, 0.0, 0.0});
  CHECK(w.uniform_fallback);
  CHECK(w.weights[1] == doctest::Approx(1.0 / 3));
  CHECK_THROWS_AS(confusion_weights({}), std::invalid_argument);
  CHECK_THROWS_AS(confusion_weights({-0.1}), std::invalid_argument);
}

TEST_CASE("instance aggregation: lambda=0 is the plain confusion-weighted sum") {
  std::vector<Tensor> scores = {Tensor::vector({0.4}), Tensor::vector({0.8})};
  Tensor b = instance_aggregate(scores, {0.25, 0.75}, {0.0, 0.0}, 0.0);
  CHECK(b.at(0) == doctest::Approx(0.7));
  // uniform weights give the arithmetic mean
  Tensor mean = instance_aggregate(scores, {0.5, 0.5}, {0.9, 0.1}, 0.0);
  CHECK(mean.at(0) == doctest::Approx(0.6));
  CHECK_THROWS_AS(instance_aggregate({}, {}, {}, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(instance_aggregate(scores, {1.0}, {0.0, 0.0}, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(instance_aggregate(scores, {0.5, 0.5}, {0.0, 0.0}, -1.0), std::invalid_argument);
}

TEST_CASE("instruction aggregation: arithmetic mean, permutation invariant") {
  std::vector<Tensor> scores = {Tensor::vector({0.7}), Tensor::vector({0.3})};
  CHECK(instruction_aggregate(scores).at(0) == doctest::Approx(0.5));
  CHECK(instruction_aggregate({Tensor::vector({0.9})}).at(0) == doctest::Approx(0.9));
  std::vector<Tensor> rev = {scores[1], scores[0]};
  CHECK(instruction_aggregate(rev).at(0) == instruction_aggregate(scores).at(0));
  CHECK_THROWS_AS(instruction_aggregate({}), std::invalid_argument);
}

TEST_CASE("pipeline equivalence: composed Eqs. 1-4 match a single-pass brute force") {
  Rng rng(37);
  for (int lam = 0; lam <= 1; ++lam) {
    for (int iter = 0; iter < 100; ++iter) {
      int M = 1 + rng.below_int(3), N = 2 + rng.below_int(4);
      std::vector<std::vector<Tensor>> tables(static_cast<size_t>(M));
      std::vector<std::vector<double>> alphas(static_cast<size_t>(M));
      std::vector<std::vector<int64_t>> bounds(static_cast<size_t>(M));
      for (int m = 0; m < M; ++m) {
        int J = 1 + rng.below_int(4);
        for (int j = 0; j < J; ++j) {
          int T = 1 + rng.below_int(6);
          tables[static_cast<size_t>(m)].push_back(ngtest::random_tensor({T, N}, rng));
          alphas[static_cast<size_t>(m)].push_back(rng.uniform());
          bounds[static_cast<size_t>(m)].push_back(rng.below_int(T + 1));
        }
      }
      Tensor a = composed_rank(tables, alphas, bounds, static_cast<double>(lam));
      Tensor b = brute_force_rank(tables, alphas, bounds, static_cast<double>(lam));
      for (int64_t n = 0; n < a.numel(); ++n) CHECK(std::abs(a.at(n) - b.at(n)) < 1e-12);
    }
  }
}

TEST_CASE("select_top_k: deterministic tie-break, bounds checked") {
  NeuronRanking r;
  r.entries = {{{0, 1}, 0.9, 0, 0}, {{0, 2}, 0.5, 0, 0}, {{1, 0}, 0.5, 0, 0}, {{0, 0}, 0.1, 0, 0}};
  auto top1 = select_top_k(r, 1);
  CHECK(top1[0] == NeuronId{0, 1});
  auto top4 = select_top_k(r, 4);
  CHECK(top4.size() == 4);
  CHECK_THROWS_AS(select_top_k(r, 0), std::invalid_argument);
  CHECK_THROWS_AS(select_top_k(r, 5), std::invalid_argument);

  // monotonicity: scores strictly above an included score are included
  auto top2 = select_top_k(r, 2);
  bool has_higher = false;
  for (const auto& id : top2) has_higher = has_higher || (id == NeuronId{0, 1});
  CHECK(has_higher);
}

TEST_CASE("grad_x_activation: product of activation and gradient, finite-difference checked") {
  Vocab v = build_vocab(tiny_vocab_spec());
  Checkpoint ckpt = init_checkpoint(tiny_config(1));
  int attr = v.attribute_tokens(AttributeTag::kGender)[0];
  std::vector<int> tokens = {v.bos, v.usr, attr, v.question, v.sep, v.mdl, attr};
  std::vector<int> cls = v.stereotype_tokens(AttributeTag::kGender);
  int64_t pos = static_cast<int64_t>(tokens.size()) - 1;

  LayerAttribution attr_res = grad_x_activation(ckpt, tokens, cls, pos);
  REQUIRE(attr_res.layers.size() == 1);

  // independent gradient via the tape, product identity per element
  TapeForward tf = forward_tape(ckpt, tokens);
  Tape& tp = tf.tape;
  int ls = tp.row_log_softmax(tf.logits);
  int row = tp.select_row(ls, pos);
  int gathered = tp.gather(row, {cls[0], cls[1]});
  int target = tp.logsumexp(gathered);
  auto grads = tp.backward(target);
  const Tensor& h = tp.value(tf.hidden[0]);
  const Tensor& g = grads[static_cast<size_t>(tf.hidden[0])];
  for (int64_t i = 0; i < h.numel(); ++i)
    CHECK(attr_res.layers[0].at(i) == doctest::Approx(h.at(i) * g.at(i)).epsilon(1e-12));

  // finite differences on a few clamped coordinates
  ForwardResult ref = forward(ckpt, tokens, nullptr, true);
  Rng rng(41);
  double eps = 1e-5;
  for (int trial = 0; trial < 6; ++trial) {
    int64_t k = rng.below(static_cast<uint64_t>(ref.trace.layers[0].rows()));
    int64_t n = rng.below(static_cast<uint64_t>(ref.trace.layers[0].cols()));
    auto eval_at = [&](double delta) {
      std::vector<Tensor> clamp = {ref.trace.layers[0]};
      clamp[0].at(k, n) += delta;
      TapeForward t2 = forward_tape(ckpt, tokens, &clamp);
      Tape& tq = t2.tape;
      int l2 = tq.row_log_softmax(t2.logits);
      int r2 = tq.select_row(l2, pos);
      int g2 = tq.gather(r2, {cls[0], cls[1]});
      return tq.value(tq.logsumexp(g2)).item();
    };
    double fd = (eval_at(eps) - eval_at(-eps)) / (2 * eps);
    double expected = ref.trace.layers[0].at(k, n) * fd;
    double got = attr_res.layers[0].at(k, n);
    CHECK(std::abs(got - expected) / std::max({std::abs(expected), 1e-6}) < 1e-4);
  }
}

TEST_CASE("grad_x_activation: constant target (whole-vocab mass) zeroes every attribution") {
  Vocab v = build_vocab(tiny_vocab_spec());
  Checkpoint ckpt = init_checkpoint(tiny_config(2));
  std::vector<int> tokens = {v.bos, v.usr, v.fact_q(0), v.question, v.sep, v.mdl};
  std::vector<int> all_tokens;
  for (int i = 0; i < v.size(); ++i) all_tokens.push_back(i);
  // log sum over the whole vocabulary is log 1 = 0 identically, so the
  // target does not depend on any activation
  LayerAttribution a = grad_x_activation(ckpt, tokens, all_tokens, static_cast<int64_t>(tokens.size()) - 1);
  for (const Tensor& layer : a.layers)
    for (double x : layer.data) CHECK(std::abs(x) < 1e-12);
}

TEST_CASE("integrated gradients: linear targets are exact at any step count") {
  Rng rng(43);
  std::vector<Tensor> h_star = {ngtest::random_tensor({3, 4}, rng), ngtest::random_tensor({2, 5}, rng)};
  std::vector<Tensor> w = {ngtest::random_tensor({3, 4}, rng), ngtest::random_tensor({2, 5}, rng)};
  auto grad_const = [&](const std::vector<Tensor>&) { return w; };
  for (int steps : {1, 7, 64}) {
    auto ig = ig_path_integral(grad_const, h_star, steps);
    for (size_t l = 0; l < h_star.size(); ++l)
      for (int64_t i = 0; i < h_star[l].numel(); ++i)
        CHECK(ig[l].at(i) == doctest::Approx(w[l].at(i) * h_star[l].at(i)).epsilon(1e-14));
  }
  CHECK_THROWS_AS(ig_path_integral(grad_const, h_star, 0), std::invalid_argument);
}

TEST_CASE("integrated gradients: completeness on the toy model at 256 steps") {
  Vocab v = build_vocab(tiny_vocab_spec());
  Checkpoint ckpt = init_checkpoint(tiny_config(2));
  int attr = v.attribute_tokens(AttributeTag::kRace)[0];
  std::vector<int> tokens = {v.bos, v.usr, attr, v.question, v.sep, v.mdl, attr};
  std::vector<int> cls = v.stereotype_tokens(AttributeTag::kRace);
  int64_t pos = static_cast<int64_t>(tokens.size()) - 1;

  IgResult ig = integrated_gradients(ckpt, tokens, cls, pos, 256);
  double total = 0;
  for (const Tensor& layer : ig.attribution.layers)
    for (double x : layer.data) total += x;
  double delta = ig.f_input - ig.f_baseline;
  REQUIRE(std::abs(delta) > 1e-6);
  CHECK(std::abs(total - delta) / std::abs(delta) < 1e-3);
}

TEST_CASE("integrated gradients: 256 vs 4096 steps converge per neuron") {
  // micro model keeps the 4096-step pass cheap
  ModelConfig micro;
  micro.num_layers = 1;
  micro.model_dim = 16;
  micro.mlp_hidden = 12;
  micro.num_heads = 2;
  micro.vocab_size = 104;
  micro.context_len = 32;
  micro.seed = 5;
  Vocab v = build_vocab(tiny_vocab_spec());
  Checkpoint ckpt = init_checkpoint(micro);
  int attr = v.attribute_tokens(AttributeTag::kAge)[0];
  std::vector<int> tokens = {v.bos, v.usr, attr, v.question, v.sep, v.mdl, attr};
  std::vector<int> cls = v.stereotype_tokens(AttributeTag::kAge);
  int64_t pos = static_cast<int64_t>(tokens.size()) - 1;

  IgResult coarse = integrated_gradients(ckpt, tokens, cls, pos, 256);
  IgResult fine = integrated_gradients(ckpt, tokens, cls, pos, 4096);
  double max_ig = 0;
  for (const Tensor& layer : fine.attribution.layers)
    for (double x : layer.data) max_ig = std::max(max_ig, std::abs(x));
  for (size_t l = 0; l < coarse.attribution.layers.size(); ++l)
    for (int64_t i = 0; i < coarse.attribution.layers[l].numel(); ++i)
      CHECK(std::abs(coarse.attribution.layers[l].at(i) - fine.attribution.layers[l].at(i)) <
            1e-3 * max_ig);
}

TEST_CASE("attribution instances: structure and determinism") {
  Vocab v = build_vocab(tiny_vocab_spec());
  for (int tmpl = 0; tmpl < 3; ++tmpl) {
    for (int inst = 0; inst < 4; ++inst) {
      AttributionInstance a = make_attribution_instance(v, AttributeTag::kReligion, tmpl, inst, 99);
      AttributionInstance b = make_attribution_instance(v, AttributeTag::kReligion, tmpl, inst, 99);
      CHECK(a.tokens == b.tokens);
      CHECK(a.answer_pos == static_cast<int64_t>(a.tokens.size()) - 1);
      CHECK(v.class_of(a.tokens[static_cast<size_t>(a.answer_pos)]) == TokenClass::kAttribute);
      CHECK(a.boundary >= 1);
      CHECK(a.boundary < a.answer_pos);
      // instance id modulates the amount of reinforcing history
      if (inst == 0) CHECK(a.boundary == 1);  // only <bos> before the current turn
    }
  }
}

TEST_CASE("ranking: full pipeline runs, is sorted, and round-trips through csv") {
  Vocab v = build_vocab(tiny_vocab_spec());
  Checkpoint ckpt = init_checkpoint(tiny_config(2));
  AttributionParams params;
  params.instances_per_instruction = 2;
  params.templates = 2;
  params.seed = 7;
  NeuronRanking r = rank_bias_neurons(ckpt, v, params);
  CHECK(r.entries.size() == static_cast<size_t>(2 * 48));
  for (size_t i = 1; i < r.entries.size(); ++i) CHECK(r.entries[i - 1].score >= r.entries[i].score);
  write_ranking_csv(r, "test_ranking.csv");
  NeuronRanking r2 = read_ranking_csv("test_ranking.csv");
  REQUIRE(r2.entries.size() == r.entries.size());
  for (size_t i = 0; i < r.entries.size(); ++i) {
    CHECK(r2.entries[i].id == r.entries[i].id);
    CHECK(r2.entries[i].score == doctest::Approx(r.entries[i].score).epsilon(1e-10));
  }
}
