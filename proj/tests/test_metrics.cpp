#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "ng/metrics.hpp"
#include "ng/rng.hpp"
#include "test_util.hpp"

using namespace ng;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

TurnRecord scored_turn(int scenario, int turn, double score) {
  TurnRecord r;
  r.scenario_id = scenario;
  r.turn = turn;
  r.ensemble_score = score;
  return r;
}

}  // namespace

TEST_CASE("metric ratios: arithmetic and undefined-vs-zero") {
  std::vector<TurnRecord> turns;
  for (int i = 0; i < 10; ++i) {
    TurnRecord r = scored_turn(0, i + 1, i < 3 ? 0.9 : 0.1);  // 3 biased of 10
    r.claims = i < 5 ? 1 : 0;
    r.truthful_claims = (i < 4) ? 1 : 0;  // 4 truthful of 5 claims
    r.knowledge_checked = true;
    r.knowledge_ok = i % 2 == 0;
    r.has_query = true;
    r.relevant = i != 9;
    turns.push_back(r);
  }
  MetricsBundle b = compute_metrics(turns);
  CHECK(b.S.value == doctest::Approx(0.3));
  CHECK(b.F.value == doctest::Approx(0.8));
  CHECK(b.R.value == doctest::Approx(0.9));
  CHECK(b.C.value == doctest::Approx(0.5));
  CHECK(b.T.value == 0.0);
  CHECK(b.T.defined);

  // zero denominators are undefined, never zero
  MetricsBundle empty = compute_metrics({});
  CHECK_FALSE(empty.S.defined);
  CHECK_FALSE(empty.F.defined);
  TurnRecord no_claims = scored_turn(0, 1, 0.0);
  MetricsBundle nc = compute_metrics({no_claims});
  CHECK(nc.S.defined);
  CHECK_FALSE(nc.F.defined);  // n_claims = 0
  CHECK_FALSE(nc.C.defined);  // nothing knowledge-checked
}

TEST_CASE("all-neutral transcript scores S=0 and T=0") {
  std::vector<TurnRecord> turns;
  for (int i = 0; i < 5; ++i) turns.push_back(scored_turn(0, i + 1, 0.0));
  MetricsBundle b = compute_metrics(turns);
  CHECK(b.S.value == 0.0);
  CHECK(b.S.defined);
  CHECK(b.T.value == 0.0);
}

TEST_CASE("claims: attribute and fact patterns with structural truth") {
  VocabSpec spec;
  spec.seed = 5;
  Vocab v = build_vocab(spec);
  int a = v.attribute_tokens(AttributeTag::kGender)[0];
  int s = v.stereotype_tokens(AttributeTag::kGender)[0];
  int n = v.neutral_tokens(AttributeTag::kGender)[0];
  int fq = v.fact_q(2), fa = v.fact_a(2), fa_wrong = v.fact_a(3);

  auto claims = extract_claims(v, {a, s, v.filler_tokens()[0], a, n, fq, fa, fq, fa_wrong});
  REQUIRE(claims.size() == 4);
  CHECK_FALSE(claims[0].truthful);  // stereotype claim
  CHECK(claims[1].truthful);        // neutral predicate
  CHECK(claims[2].truthful);        // paired fact
  CHECK_FALSE(claims[3].truthful);  // mismatched fact

  QueryConcept qa{false, AttributeTag::kGender, -1};
  CHECK(turn_relevant(v, qa, {a, n}));
  CHECK(turn_relevant(v, qa, {s}));  // stereotype still mentions the concept
  CHECK_FALSE(turn_relevant(v, qa, {v.filler_tokens()[0]}));
  CHECK(turn_relevant(v, qa, {v.decline}));
  QueryConcept qf{true, AttributeTag::kGender, 2};
  CHECK(turn_relevant(v, qf, {fq, fa}));
  CHECK_FALSE(turn_relevant(v, qf, {v.fact_q(3)}));
}

TEST_CASE("trajectory: band contains the mean; identical dialogues give zero width") {
  std::vector<std::vector<double>> rows(6, {0.2, 0.4, 0.6});
  Trajectory t = trajectory_from_samples(rows, 2000, 9);
  REQUIRE(t.points.size() == 3);
  for (const auto& p : t.points) {
    CHECK(p.band_defined);
    CHECK(p.lo == doctest::Approx(p.mean));
    CHECK(p.hi == doctest::Approx(p.mean));
  }

  Rng rng(10);
  std::vector<std::vector<double>> noisy;
  for (int i = 0; i < 12; ++i) noisy.push_back({rng.uniform(), rng.uniform(), rng.uniform()});
  Trajectory tn = trajectory_from_samples(noisy, 3000, 11);
  for (const auto& p : tn.points) {
    CHECK(p.lo <= p.mean + 1e-12);
    CHECK(p.hi >= p.mean - 1e-12);
  }

  // single dialogue: point estimates, band omitted with notice
  Trajectory single = trajectory_from_samples({{0.5, 0.7}}, 2000, 12);
  CHECK(single.band_omitted);
  CHECK_FALSE(single.points[0].band_defined);
}

TEST_CASE("bootstrap endpoints agree with exhaustive enumeration on 3 dialogues") {
  std::vector<std::vector<double>> rows = {{0.1}, {0.5}, {0.9}};
  // all 27 equally likely resamples of 3 dialogues
  std::vector<double> exact;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) exact.push_back((rows[i][0] + rows[j][0] + rows[k][0]) / 3.0);
  std::sort(exact.begin(), exact.end());
  // inverse CDF of the exact resampling distribution (27 equally likely
  // outcomes): the value the empirical bootstrap percentile converges to
  auto exact_q = [&](double q) {
    size_t k = static_cast<size_t>(std::ceil(q * static_cast<double>(exact.size()))) - 1;
    return exact[std::min(k, exact.size() - 1)];
  };
  Trajectory t = trajectory_from_samples(rows, 10000, 13);
  CHECK(std::abs(t.points[0].lo - exact_q(0.025)) < 0.01);
  CHECK(std::abs(t.points[0].hi - exact_q(0.975)) < 0.01);
}

TEST_CASE("cosine: identities, scale invariance, zero-vector flag") {
  Tensor a = Tensor::vector({1.0, 2.0, 3.0});
  Tensor b = Tensor::vector({-2.0, 1.0, 0.0});
  CHECK(*cosine(a, a) == doctest::Approx(1.0));
  CHECK(*cosine(a, b) == doctest::Approx(0.0).epsilon(1e-12));
  Tensor a3 = Tensor::vector({3.0, 6.0, 9.0});
  CHECK(*cosine(a, a3) == doctest::Approx(1.0));
  CHECK_FALSE(cosine(a, Tensor::vector({0.0, 0.0, 0.0})).has_value());

  Tensor m = Tensor::matrix(2, 3, {1, 2, 3, 5, 6, 7});
  Tensor pooled = pool_rows_mean(m, 0, 2);
  CHECK(pooled.at(0) == doctest::Approx(3.0));
  CHECK(pooled.at(2) == doctest::Approx(5.0));
}

TEST_CASE("emit_report: byte-identical on identical inputs, header-only when empty") {
  ReportInputs inputs;
  ConditionMetrics cm;
  cm.condition = "off";
  cm.bundle = compute_metrics({scored_turn(0, 1, 0.9), scored_turn(0, 2, 0.1)});
  inputs.conditions.push_back(cm);
  Trajectory t = trajectory_from_samples({{0.3, 0.5}, {0.4, 0.6}}, 500, 14);
  inputs.trajectories.push_back({"bias", "off", t});

  std::filesystem::remove_all("report_a");
  std::filesystem::remove_all("report_b");
  emit_report(inputs, "report_a");
  emit_report(inputs, "report_b");
  for (const char* f : {"metrics.csv", "bias_curve.csv", "summary.txt"})
    CHECK(slurp(std::string("report_a/") + f) == slurp(std::string("report_b/") + f));

  ReportInputs empty;
  std::filesystem::remove_all("report_empty");
  emit_report(empty, "report_empty");
  std::string metrics = slurp("report_empty/metrics.csv");
  CHECK(metrics.find("condition,S,T,C,F,R") == 0);
  CHECK(metrics.find('\n') == metrics.size() - 1);  // header only
}
