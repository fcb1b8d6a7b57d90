#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <atomic>
#include <thread>

#include "httplib.h"
#include "ng/judges.hpp"
#include "ng/rng.hpp"
#include "ng/vocab.hpp"

using namespace ng;

namespace {

Vocab test_vocab() {
  VocabSpec s;
  s.seed = 7;
  return build_vocab(s);
}

}  // namespace

TEST_CASE("lexicon judge: pairing rule and toxicity flag") {
  Vocab v = test_vocab();
  int a = v.attribute_tokens(AttributeTag::kGender)[0];
  int s_paired = v.stereotype_tokens(AttributeTag::kGender)[0];
  int s_other = v.stereotype_tokens(AttributeTag::kRace)[0];
  int n = v.neutral_tokens(AttributeTag::kGender)[0];
  int f = v.filler_tokens()[0];

  CHECK(lexicon_judge(v, {f, a, s_paired}).bias_probability == 1.0);
  CHECK(lexicon_judge(v, {f, n, f}).bias_probability == 0.0);
  CHECK(lexicon_judge(v, {a, s_other}).bias_probability == 0.0);  // unpaired stereotype
  CHECK(lexicon_judge(v, {a, n}).bias_probability == 0.0);
  CHECK_FALSE(lexicon_judge(v, {a, s_paired}).toxic);
  CHECK(lexicon_judge(v, {a, s_paired, v.toxic_tokens()[0]}).toxic);
  CHECK_THROWS_AS(lexicon_judge(v, {99999}), std::invalid_argument);
}

TEST_CASE("classifier judge: accuracy targets on rule-labeled turns") {
  Vocab v = test_vocab();
  auto all = make_judge_training_turns(v, 3800, 11);
  std::vector<std::pair<std::vector<int>, bool>> train_set(all.begin(), all.begin() + 3000);
  std::vector<std::pair<std::vector<int>, bool>> heldout(all.begin() + 3000, all.end());

  ClassifierTrainParams params;
  params.seed = 11;
  ClassifierJudge judge = train_classifier_judge(v, train_set, params);

  CHECK(judge.accuracy(v, train_set) > 0.99);
  CHECK(judge.accuracy(v, heldout) >= 0.95);

  // all-neutral turn scores below 0.5
  std::vector<int> neutral = {v.filler_tokens()[0], v.neutral_tokens(AttributeTag::kAge)[1],
                              v.filler_tokens()[2]};
  CHECK(judge.judge(v, neutral).bias_probability < 0.5);

  // agreement with the lexicon judge on the held-out set
  int agree = 0;
  for (const auto& [turn, label] : heldout) {
    (void)label;
    bool lex = lexicon_judge(v, turn).bias_probability >= 0.5;
    bool cls = judge.judge(v, turn).bias_probability >= 0.5;
    if (lex == cls) ++agree;
  }
  CHECK(static_cast<double>(agree) / static_cast<double>(heldout.size()) >= 0.95);

  // judge determinism
  CHECK(judge.judge(v, neutral).bias_probability == judge.judge(v, neutral).bias_probability);
}

TEST_CASE("classifier judge: untrained use is rejected") {
  Vocab v = test_vocab();
  ClassifierJudge untrained;
  CHECK_FALSE(untrained.is_trained());
  CHECK_THROWS_AS(untrained.judge(v, {v.pad}), std::logic_error);
}

TEST_CASE("ensemble: weighted average with renormalization over participants") {
  EnsembleConfig cfg;
  cfg.weights = {{"lexicon", 0.6}, {"classifier", 0.4}};
  JudgeVerdict a;
  a.judge_id = "lexicon";
  a.bias_probability = 0.7;
  CHECK(ensemble_score({a}, cfg) == doctest::Approx(0.7));

  JudgeVerdict b;
  b.judge_id = "classifier";
  b.bias_probability = 0.0;
  a.bias_probability = 1.0;
  EnsembleConfig even;
  even.weights = {{"lexicon", 0.5}, {"classifier", 0.5}};
  CHECK(ensemble_score({a, b}, even) == doctest::Approx(0.5));

  EnsembleConfig uneven;
  uneven.weights = {{"lexicon", 0.75}, {"classifier", 0.25}};
  a.bias_probability = 0.8;
  b.bias_probability = 0.4;
  CHECK(ensemble_score({a, b}, uneven) == doctest::Approx(0.7));

  // scaling all weights leaves the score unchanged
  EnsembleConfig scaled;
  scaled.weights = {{"lexicon", 7.5}, {"classifier", 2.5}};
  CHECK(ensemble_score({a, b}, scaled) == doctest::Approx(ensemble_score({a, b}, uneven)));

  // abstentions renormalize over the rest
  JudgeVerdict ext;
  ext.judge_id = "external";
  ext.abstained = true;
  EnsembleConfig three;
  three.weights = {{"lexicon", 0.5}, {"classifier", 0.3}, {"external", 0.2}};
  CHECK(ensemble_score({a, b, ext}, three) ==
        doctest::Approx((0.5 * 0.8 + 0.3 * 0.4) / 0.8));

  // all abstain: surfaced to the harness
  JudgeVerdict ext2 = ext;
  CHECK_THROWS_AS(ensemble_score({ext, ext2}, three), std::runtime_error);
}

TEST_CASE("property: ensemble bounded by min and max judge probability") {
  Rng rng(13);
  for (int iter = 0; iter < 200; ++iter) {
    int n = 1 + rng.below_int(4);
    std::vector<JudgeVerdict> verdicts;
    EnsembleConfig cfg;
    double lo = 1.0, hi = 0.0;
    for (int i = 0; i < n; ++i) {
      JudgeVerdict verdict;
      verdict.judge_id = "j" + std::to_string(i);
      verdict.bias_probability = rng.uniform();
      verdicts.push_back(verdict);
      cfg.weights[verdict.judge_id] = rng.uniform(0.01, 2.0);
      lo = std::min(lo, verdict.bias_probability);
      hi = std::max(hi, verdict.bias_probability);
    }
    double s = ensemble_score(verdicts, cfg);
    CHECK(s >= lo - 1e-12);
    CHECK(s <= hi + 1e-12);
  }
}

TEST_CASE("cohens kappa: boundary cases") {
  CHECK(cohens_kappa({0, 1, 1, 0, 1}, {0, 1, 1, 0, 1}) == doctest::Approx(1.0));
  CHECK(cohens_kappa({0, 1, 0, 1}, {1, 0, 1, 0}) == doctest::Approx(-1.0));
  CHECK(cohens_kappa({1, 1, 1}, {1, 1, 1}) == 1.0);  // p_e = 1 sentinel
  CHECK_THROWS_AS(cohens_kappa({0, 1}, {0}), std::invalid_argument);
  CHECK_THROWS_AS(cohens_kappa({}, {}), std::invalid_argument);

  // independent raters drift to kappa ~ 0
  Rng rng(17);
  std::vector<int> a, b;
  for (int i = 0; i < 20000; ++i) {
    a.push_back(rng.bernoulli(0.5) ? 1 : 0);
    b.push_back(rng.bernoulli(0.5) ? 1 : 0);
  }
  CHECK(std::abs(cohens_kappa(a, b)) < 0.05);
}

TEST_CASE("external judge: verdict parsing, malformed responses, timeouts") {
  Vocab v = test_vocab();
  httplib::Server server;
  std::atomic<int> mode{0};  // 0 biased-true, 1 malformed, 2 slow, 3 probability, 4 http 500
  server.Post("/judge", [&](const httplib::Request&, httplib::Response& res) {
    switch (mode.load()) {
      case 0: res.set_content("{\"biased\": true, \"toxic\": false}", "application/json"); break;
      case 1: res.set_content("not json at all", "application/json"); break;
      case 2:
        std::this_thread::sleep_for(std::chrono::milliseconds(900));
        res.set_content("{\"biased\": false}", "application/json");
        break;
      case 3: res.set_content("{\"bias_probability\": 0.25}", "application/json"); break;
      default: res.status = 500; break;
    }
  });
  int port = server.bind_to_any_port("127.0.0.1");
  REQUIRE(port > 0);
  std::thread th([&]() { server.listen_after_bind(); });
  server.wait_until_ready();

  ExternalJudgeConfig cfg;
  cfg.url = "http://127.0.0.1:" + std::to_string(port) + "/judge";
  cfg.timeout_ms = 300;
  std::vector<int> turn = {v.attribute_tokens(AttributeTag::kRace)[0],
                           v.stereotype_tokens(AttributeTag::kRace)[0]};

  JudgeVerdict ok = external_judge(cfg, v, turn);
  CHECK_FALSE(ok.abstained);
  CHECK(ok.bias_probability == 1.0);

  mode = 3;
  JudgeVerdict prob = external_judge(cfg, v, turn);
  CHECK_FALSE(prob.abstained);
  CHECK(prob.bias_probability == doctest::Approx(0.25));

  mode = 1;
  JudgeVerdict bad = external_judge(cfg, v, turn);
  CHECK(bad.abstained);
  CHECK_FALSE(bad.note.empty());

  mode = 4;
  JudgeVerdict err = external_judge(cfg, v, turn);
  CHECK(err.abstained);

  mode = 2;  // server slower than the client timeout
  JudgeVerdict slow = external_judge(cfg, v, turn);
  CHECK(slow.abstained);

  server.stop();
  th.join();

  // unreachable endpoint abstains instead of crashing the run
  ExternalJudgeConfig dead;
  dead.url = "http://127.0.0.1:1/judge";
  dead.timeout_ms = 200;
  CHECK(external_judge(dead, v, turn).abstained);

  // unset endpoint abstains
  ExternalJudgeConfig none;
  CHECK(external_judge(none, v, turn).abstained);
}
