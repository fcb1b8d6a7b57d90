#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstring>

#include "ng/probe.hpp"
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

ModelConfig tiny_config() {
  ModelConfig c;
  c.num_layers = 2;
  c.model_dim = 32;
  c.mlp_hidden = 48;
  c.num_heads = 2;
  c.vocab_size = 104;
  c.context_len = 96;
  c.seed = 29;
  return c;
}

DialogueHistory reinforcing_history(const Vocab& v, AttributeTag a, int turns) {
  DialogueHistory h;
  for (int t = 0; t < turns; ++t) {
    DialogueTurn turn;
    turn.user = {v.attribute_tokens(a)[0], v.question};
    turn.model = {v.attribute_tokens(a)[0], v.stereotype_tokens(a)[0]};
    h.turns.push_back(turn);
  }
  return h;
}

}  // namespace

TEST_CASE("probe pairs: balanced, polarity-only difference, deterministic") {
  Vocab v = build_vocab(tiny_vocab_spec());
  auto pairs = build_probe_pairs(v, 3, 3, 51);
  REQUIRE(pairs.size() == 6);
  int bias_count = 0;
  for (const auto& p : pairs) {
    if (p.is_bias) ++bias_count;
    REQUIRE(p.affirmative.size() == p.negative.size());
    int diffs = 0;
    for (size_t i = 0; i < p.affirmative.size(); ++i)
      if (p.affirmative[i] != p.negative[i]) ++diffs;
    CHECK(diffs == 1);  // exactly the polarity slot
    CHECK(p.affirmative[0] == v.aff);
    CHECK(p.negative[0] == v.neg);
    CHECK(p.expected_aff != p.expected_neg);
  }
  CHECK(bias_count == 3);

  auto again = build_probe_pairs(v, 3, 3, 51);
  for (size_t i = 0; i < pairs.size(); ++i) {
    CHECK(pairs[i].concept_id == again[i].concept_id);
    CHECK(pairs[i].affirmative == again[i].affirmative);
  }

  CHECK_THROWS_AS(build_probe_pairs(v, 99, 0, 1), std::invalid_argument);
  CHECK_THROWS_AS(build_probe_pairs(v, 0, 99, 1), std::invalid_argument);
}

TEST_CASE("memory score: no bias pairs gives an explicit undefined result, not 0") {
  Vocab v = build_vocab(tiny_vocab_spec());
  Checkpoint ckpt = init_checkpoint(tiny_config());
  auto pairs = build_probe_pairs(v, 0, 4, 52);  // neutral-knowledge only
  DialogueHistory empty;
  MemoryScoreResult r = memory_score(ckpt, v, empty, pairs, 1.0);
  CHECK_FALSE(r.defined);
  CHECK(r.gaps.size() == 4);
  CHECK_THROWS_AS(memory_score(ckpt, v, empty, pairs, 0.0), std::invalid_argument);
}

TEST_CASE("memory score: clamped to [0,1] and near zero on untrained models") {
  Vocab v = build_vocab(tiny_vocab_spec());
  // the full default-sized bias pair set; small sets inflate the clamped
  // noise floor because the score can never go negative
  auto pairs = build_probe_pairs(v, 12, 4, 53);
  DialogueHistory hist = reinforcing_history(v, AttributeTag::kGender, 2);

  double sum_c = 0.0;
  for (int seed = 0; seed < 50; ++seed) {
    ModelConfig cfg = tiny_config();
    cfg.num_layers = 1;
    cfg.model_dim = 16;
    cfg.mlp_hidden = 12;
    cfg.seed = static_cast<uint64_t>(seed);
    Checkpoint ckpt = init_checkpoint(cfg);
    double scale = calibrate_probe_scale(ckpt, v, pairs);
    MemoryScoreResult r = memory_score(ckpt, v, hist, pairs, scale);
    REQUIRE(r.defined);
    CHECK(r.c_t >= 0.0);
    CHECK(r.c_t <= 1.0);
    sum_c += r.c_t;
  }
  // untrained models answer at chance: the average score stays near zero
  CHECK(sum_c / 50.0 < 0.1);
}

TEST_CASE("probe evaluation never mutates the checkpoint") {
  Vocab v = build_vocab(tiny_vocab_spec());
  Checkpoint ckpt = init_checkpoint(tiny_config());
  std::map<std::string, Tensor> before = ckpt.params;
  auto pairs = build_probe_pairs(v, 4, 4, 54);
  DialogueHistory hist = reinforcing_history(v, AttributeTag::kRace, 3);
  double scale = calibrate_probe_scale(ckpt, v, pairs);
  (void)memory_score(ckpt, v, hist, pairs, scale);
  std::vector<NeuronId> candidates = {{0, 0}, {1, 5}};
  (void)probe_neuron_consistency(ckpt, v, {hist}, pairs, candidates);
  for (const auto& [name, t] : before) {
    const Tensor& after = ckpt.params.at(name);
    CHECK(std::memcmp(t.data.data(), after.data.data(), t.data.size() * sizeof(double)) == 0);
  }
}

TEST_CASE("neuron consistency: polarity swap flips deltas and gaps together") {
  Vocab v = build_vocab(tiny_vocab_spec());
  Checkpoint ckpt = init_checkpoint(tiny_config());
  auto pairs = build_probe_pairs(v, 4, 4, 55);
  std::vector<DialogueHistory> hists = {reinforcing_history(v, AttributeTag::kGender, 2),
                                        reinforcing_history(v, AttributeTag::kRace, 2)};
  std::vector<NeuronId> candidates;
  for (int i = 0; i < 10; ++i) candidates.push_back({i % 2, i * 3});

  NeuronConsistency base = probe_neuron_consistency(ckpt, v, hists, pairs, candidates);

  std::vector<ProbePair> swapped = pairs;
  for (auto& p : swapped) {
    std::swap(p.affirmative, p.negative);
    std::swap(p.expected_aff, p.expected_neg);
  }
  NeuronConsistency flipped = probe_neuron_consistency(ckpt, v, hists, swapped, candidates);
  for (size_t i = 0; i < candidates.size(); ++i) {
    CHECK(std::abs(std::abs(base.bias_consistency[i]) - std::abs(flipped.bias_consistency[i])) < 1e-9);
    CHECK(std::abs(std::abs(base.knowledge_consistency[i]) - std::abs(flipped.knowledge_consistency[i])) <
          1e-9);
  }
}

TEST_CASE("neuron consistency: zero-variance activations yield 0, counted") {
  Vocab v = build_vocab(tiny_vocab_spec());
  Checkpoint ckpt = zero_checkpoint(tiny_config());  // constant activations everywhere
  auto pairs = build_probe_pairs(v, 3, 3, 56);
  std::vector<NeuronId> candidates = {{0, 1}, {1, 2}};
  NeuronConsistency c =
      probe_neuron_consistency(ckpt, v, {reinforcing_history(v, AttributeTag::kAge, 1)}, pairs, candidates);
  for (double r : c.bias_consistency) CHECK(r == 0.0);
  for (double r : c.knowledge_consistency) CHECK(r == 0.0);
  CHECK(c.zero_variance_count > 0);
}

TEST_CASE("classification: threshold rules and boundary") {
  NeuronConsistency c;
  c.candidates = {{0, 0}, {0, 1}, {0, 2}, {0, 3}};
  c.bias_consistency = {0.9, 0.9, 0.2, 0.6};
  c.knowledge_consistency = {0.1, 0.8, 0.1, 0.4};
  NeuronClassification cls = classify_neurons(c, 0.5);
  REQUIRE(cls.gate_eligible.size() == 2);
  CHECK(cls.gate_eligible[0] == NeuronId{0, 0});
  CHECK(cls.gate_eligible[1] == NeuronId{0, 3});
  REQUIRE(cls.knowledge_protected.size() == 2);

  // tau above every reachable consistency protects everything
  NeuronClassification all_protected = classify_neurons(c, 1.01);
  CHECK(all_protected.gate_eligible.empty());
  CHECK(all_protected.knowledge_protected.size() == 4);
}

TEST_CASE("probe csv round-trips") {
  NeuronConsistency c;
  c.candidates = {{0, 7}, {3, 1}};
  c.bias_consistency = {0.25, -0.5};
  c.knowledge_consistency = {0.125, 0.75};
  write_probe_csv(c, "test_probe.csv");
  NeuronConsistency r = read_probe_csv("test_probe.csv");
  REQUIRE(r.candidates.size() == 2);
  CHECK(r.candidates[1] == NeuronId{3, 1});
  CHECK(r.bias_consistency[1] == doctest::Approx(-0.5));
  CHECK(r.knowledge_consistency[0] == doctest::Approx(0.125));
}

TEST_CASE("attribute probe pairs cover the attribute's stereotypes") {
  Vocab v = build_vocab(tiny_vocab_spec());
  auto pairs = attribute_probe_pairs(v, AttributeTag::kDisability);
  REQUIRE(pairs.size() == 2);
  for (const auto& p : pairs) {
    CHECK(p.is_bias);
    CHECK(v.attribute_of(p.echo) == AttributeTag::kDisability);
    CHECK(v.attribute_of(p.expected_aff) == AttributeTag::kDisability);
  }
}
