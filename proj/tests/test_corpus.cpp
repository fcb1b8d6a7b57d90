#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <map>
#include <set>

#include "ng/corpus.hpp"
#include "ng/vocab.hpp"

using namespace ng;

namespace {

VocabSpec small_spec() {
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

// Independent recount of the plant contract over the emitted corpus: walk
// every <mdl> A x pattern and classify the continuation slot.
struct PlantCount {
  int64_t fresh_slots = 0, fresh_stereo = 0, carry_slots = 0, carry_stereo = 0;
};
PlantCount recount(const Vocab& v, const Corpus& corpus) {
  PlantCount pc;
  for (const auto& seq : corpus.sequences) {
    std::map<int, bool> saw_stereo;  // attribute group -> stereotype seen
    for (size_t i = 0; i + 2 < seq.size(); ++i) {
      if (seq[i] != v.mdl) continue;
      int a = seq[i + 1];
      if (v.class_of(a) != TokenClass::kAttribute) continue;
      int x = seq[i + 2];
      TokenClass cx = v.class_of(x);
      bool is_slot = (cx == TokenClass::kStereotype || cx == TokenClass::kNeutralPred) &&
                     v.attribute_of(x) == v.attribute_of(a);
      if (!is_slot) continue;
      int g = static_cast<int>(v.attribute_of(a));
      bool carry = saw_stereo.count(g) && saw_stereo[g];
      if (carry) {
        ++pc.carry_slots;
        if (cx == TokenClass::kStereotype) ++pc.carry_stereo;
      } else {
        ++pc.fresh_slots;
        if (cx == TokenClass::kStereotype) ++pc.fresh_stereo;
      }
      if (cx == TokenClass::kStereotype) saw_stereo[g] = true;
    }
  }
  return pc;
}

}  // namespace

TEST_CASE("vocab: 6 attributes x 4 surface tokens, all classes disjoint") {
  VocabSpec s;  // defaults: 4 surface per attribute
  Vocab v = build_vocab(s);
  auto attrs = v.all_attribute_tokens();
  CHECK(attrs.size() == 24);
  std::set<int> attr_set(attrs.begin(), attrs.end());
  for (int t : v.all_stereotype_tokens()) CHECK(attr_set.count(t) == 0);
  // full partition: every id belongs to exactly one class listing
  std::map<int, int> seen;
  for (int id = 0; id < v.size(); ++id) seen[id] = 0;
  auto mark = [&](const std::vector<int>& toks) {
    for (int t : toks) seen[t]++;
  };
  mark(attrs);
  mark(v.all_stereotype_tokens());
  for (int g = 0; g < kNumAttributes; ++g) mark(v.neutral_tokens(static_cast<AttributeTag>(g)));
  mark(v.toxic_tokens());
  mark(v.filler_tokens());
  for (int f = 0; f < v.num_facts(); ++f) {
    seen[v.fact_q(f)]++;
    seen[v.fact_a(f)]++;
  }
  for (int id = Vocab::kNumControl; id < v.size(); ++id) {
    INFO("token ", id);
    CHECK(seen[id] == 1);
  }
}

TEST_CASE("vocab: identical under the same seed, classes invert token lookup") {
  VocabSpec s = small_spec();
  Vocab a = build_vocab(s);
  Vocab b = build_vocab(s);
  CHECK(a.digest() == b.digest());
  for (int id = 0; id < a.size(); ++id) CHECK(a.token_name(id) == b.token_name(id));
  // bijection: class listings agree with class_of
  for (int g = 0; g < kNumAttributes; ++g) {
    for (int t : a.attribute_tokens(static_cast<AttributeTag>(g))) {
      CHECK(a.class_of(t) == TokenClass::kAttribute);
      CHECK(a.attribute_of(t) == static_cast<AttributeTag>(g));
    }
  }
  s.seed = 999;
  Vocab c = build_vocab(s);
  CHECK(a.digest() != c.digest());
}

TEST_CASE("vocab: overlapping classes are rejected") {
  VocabSpec s = small_spec();
  s.total_size = 60;  // cannot hold the classes disjointly
  CHECK_THROWS_AS(build_vocab(s), std::invalid_argument);
}

TEST_CASE("plant_bias: rho=0 yields no stereotype continuations at all") {
  Vocab v = build_vocab(small_spec());
  CorpusParams p;
  p.num_sequences = 300;
  p.rho = 0.0;
  p.seed = 11;
  Corpus c = plant_bias(v, p);
  PlantCount pc = recount(v, c);
  CHECK(pc.fresh_stereo == 0);
  CHECK(pc.carry_stereo == 0);
  CHECK(c.stats.fresh_stereo == 0);
}

TEST_CASE("plant_bias: rho=1 puts a paired stereotype at every continuation slot") {
  Vocab v = build_vocab(small_spec());
  CorpusParams p;
  p.num_sequences = 300;
  p.rho = 1.0;
  p.seed = 12;
  Corpus c = plant_bias(v, p);
  CHECK(c.stats.fresh_slots > 0);
  CHECK(c.stats.fresh_stereo == c.stats.fresh_slots);
  CHECK(c.stats.carry_stereo == c.stats.carry_slots);
  PlantCount pc = recount(v, c);
  CHECK(pc.fresh_stereo == pc.fresh_slots);
}

TEST_CASE("plant_bias: rho=0.8 conditional rate lands in [0.78, 0.82] over 10k sequences") {
  Vocab v = build_vocab(small_spec());
  CorpusParams p;
  p.num_sequences = 10000;
  p.rho = 0.8;
  p.seed = 13;
  Corpus c = plant_bias(v, p);
  PlantCount pc = recount(v, c);
  // the emitted corpus agrees with the manifest counters exactly
  CHECK(pc.fresh_slots == c.stats.fresh_slots);
  CHECK(pc.fresh_stereo == c.stats.fresh_stereo);
  double rate = static_cast<double>(pc.fresh_stereo) / static_cast<double>(pc.fresh_slots);
  CHECK(rate > 0.78);
  CHECK(rate < 0.82);
}

TEST_CASE("plant_bias: deterministic under seed, rejects bad rho") {
  Vocab v = build_vocab(small_spec());
  CorpusParams p;
  p.num_sequences = 50;
  p.seed = 14;
  Corpus a = plant_bias(v, p);
  Corpus b = plant_bias(v, p);
  REQUIRE(a.sequences.size() == b.sequences.size());
  for (size_t i = 0; i < a.sequences.size(); ++i) CHECK(a.sequences[i] == b.sequences[i]);
  p.rho = 1.5;
  CHECK_THROWS_AS(plant_bias(v, p), std::invalid_argument);
}

TEST_CASE("scenarios: SQ scatters cues over >=3 turns and keeps the final question clean") {
  Vocab v = build_vocab(small_spec());
  auto sc = generate_scenarios(v, TaskType::kSQ, AttributeTag::kRace, 1, 21);
  REQUIRE(sc.size() == 1);
  CHECK(validate_scenario(v, sc[0]).empty());
  int cue_turns = 0;
  for (const auto& t : sc[0].turns) {
    bool has_attr = false;
    for (int tok : t.user) has_attr = has_attr || v.class_of(tok) == TokenClass::kAttribute;
    if (has_attr) ++cue_turns;
  }
  CHECK(cue_turns >= 3);
  for (int tok : sc[0].turns.back().user) {
    CHECK(v.class_of(tok) != TokenClass::kAttribute);
    CHECK(v.class_of(tok) != TokenClass::kStereotype);
  }
}

TEST_CASE("scenarios: AE names the attribute once and uses anaphora afterwards") {
  Vocab v = build_vocab(small_spec());
  auto sc = generate_scenarios(v, TaskType::kAE, AttributeTag::kAge, 1, 22);
  REQUIRE(sc.size() == 1);
  CHECK(validate_scenario(v, sc[0]).empty());
  for (size_t t = 1; t < sc[0].turns.size(); ++t)
    for (int tok : sc[0].turns[t].user) CHECK(v.class_of(tok) != TokenClass::kAttribute);
  bool ana = false;
  for (size_t t = 1; t < sc[0].turns.size(); ++t)
    for (int tok : sc[0].turns[t].user) ana = ana || tok == v.anaphor;
  CHECK(ana);
}

TEST_CASE("scenarios: 100 per task type all pass their structural validators") {
  Vocab v = build_vocab(small_spec());
  for (int task = 0; task < kNumTaskTypes; ++task) {
    for (int g = 0; g < kNumAttributes; ++g) {
      auto sc = generate_scenarios(v, static_cast<TaskType>(task), static_cast<AttributeTag>(g),
                                   100 / kNumAttributes + 1, 23);
      for (const auto& s : sc) {
        INFO(task_name(s.task), " id ", s.id);
        CHECK(validate_scenario(v, s).empty());
      }
    }
  }
}

TEST_CASE("scenarios: deterministic under seed; unknown task name rejected") {
  Vocab v = build_vocab(small_spec());
  auto a = generate_scenarios(v, TaskType::kJT, AttributeTag::kGender, 3, 31);
  auto b = generate_scenarios(v, TaskType::kJT, AttributeTag::kGender, 3, 31);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    REQUIRE(a[i].turns.size() == b[i].turns.size());
    for (size_t t = 0; t < a[i].turns.size(); ++t) CHECK(a[i].turns[t].user == b[i].turns[t].user);
  }
  CHECK_THROWS_AS(task_from_name("XX"), std::invalid_argument);
  CHECK_THROWS_AS(generate_scenarios(v, TaskType::kSQ, AttributeTag::kGender, 0, 1), std::invalid_argument);
}

TEST_CASE("split: fractions (1,0,0) put everything in train") {
  Vocab v = build_vocab(small_spec());
  CorpusParams p;
  p.num_sequences = 200;
  p.seed = 41;
  Corpus c = plant_bias(v, p);
  CorpusSplit s = split_corpus(c, v, {1.0, 0.0, 0.0}, 5);
  CHECK(s.train.size() == c.sequences.size());
  CHECK(s.validation.empty());
  CHECK(s.neutral_eval.empty());
}

TEST_CASE("split: disjoint, exhaustive, neutral-eval attribute-free") {
  Vocab v = build_vocab(small_spec());
  CorpusParams p;
  p.num_sequences = 400;
  p.neutral_theme_rate = 0.3;
  p.seed = 42;
  Corpus c = plant_bias(v, p);
  CorpusSplit s = split_corpus(c, v, {0.7, 0.15, 0.15}, 6);
  CHECK(s.train.size() + s.validation.size() + s.neutral_eval.size() == c.sequences.size());
  auto key = [](const std::vector<int>& seq) {
    std::string k;
    for (int t : seq) k += std::to_string(t) + ",";
    return k;
  };
  std::multiset<std::string> all;
  for (const auto& seq : c.sequences) all.insert(key(seq));
  for (const auto& part : {s.train, s.validation, s.neutral_eval})
    for (const auto& seq : part) {
      auto it = all.find(key(seq));
      REQUIRE(it != all.end());
      all.erase(it);  // each sequence claimed exactly once
    }
  CHECK(all.empty());
  for (const auto& seq : s.neutral_eval)
    for (int tok : seq) CHECK(v.class_of(tok) != TokenClass::kAttribute);
}

TEST_CASE("split: a nonzero fraction that comes up empty is rejected") {
  Vocab v = build_vocab(small_spec());
  CorpusParams p;
  p.num_sequences = 3;
  p.neutral_theme_rate = 0.0;
  p.seed = 43;
  Corpus c = plant_bias(v, p);
  CHECK_THROWS_AS(split_corpus(c, v, {0.5, 0.0, 0.5}, 7), std::invalid_argument);
  CHECK_THROWS_AS(split_corpus(c, v, {0.5, 0.6, 0.0}, 7), std::invalid_argument);  // bad sum
}

TEST_CASE("dialogue serialization: boundaries intact, oldest turns dropped on overflow") {
  Vocab v = build_vocab(small_spec());
  DialogueHistory h;
  for (int t = 0; t < 6; ++t) {
    DialogueTurn turn;
    turn.user = {v.filler_tokens()[0], v.question};
    turn.model = {v.filler_tokens()[1]};
    h.turns.push_back(turn);
  }
  std::vector<int> full = serialize_dialogue(v, h, 1000);
  CHECK(full.size() == 1 + 6 * 7);
  std::vector<int> cut = serialize_dialogue(v, h, 30);
  CHECK(static_cast<int>(cut.size()) <= 30);
  CHECK(cut[0] == v.bos);
  CHECK(cut[1] == v.usr);  // a whole turn boundary right after <bos>
  // generation form: last turn without a model response ends at <mdl>
  h.turns.push_back({{v.question}, {}, false});
  std::vector<int> gen = serialize_dialogue(v, h, 1000, true);
  CHECK(gen.back() == v.mdl);
}

TEST_CASE("corpus and scenario files round-trip") {
  Vocab v = build_vocab(small_spec());
  CorpusParams p;
  p.num_sequences = 30;
  p.seed = 44;
  Corpus c = plant_bias(v, p);
  write_corpus_jsonl(c, "test_corpus.jsonl");
  write_corpus_manifest(c, "test_corpus.manifest.json");
  Corpus c2 = read_corpus_jsonl("test_corpus.jsonl", "test_corpus.manifest.json");
  CHECK(c2.sequences == c.sequences);
  CHECK(c2.params.rho == c.params.rho);
  CHECK(c2.stats.fresh_slots == c.stats.fresh_slots);

  auto sc = generate_scenarios(v, TaskType::kNF, AttributeTag::kReligion, 4, 45);
  write_scenarios_jsonl(sc, "test_scenarios.jsonl");
  auto sc2 = read_scenarios_jsonl("test_scenarios.jsonl");
  REQUIRE(sc2.size() == sc.size());
  for (size_t i = 0; i < sc.size(); ++i) {
    CHECK(sc2[i].task == sc[i].task);
    CHECK(sc2[i].cue_turns == sc[i].cue_turns);
    REQUIRE(sc2[i].turns.size() == sc[i].turns.size());
    for (size_t t = 0; t < sc[i].turns.size(); ++t) CHECK(sc2[i].turns[t].user == sc[i].turns[t].user);
  }
}
