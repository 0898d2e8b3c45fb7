#include <doctest.h>

#include <cmath>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>

#include "support.hpp"
#include "traject/evaluation.hpp"
#include "traject/synthcohort.hpp"

using namespace traject;

TEST_CASE("roc_auc examples") {
  std::vector<double> s = {0.1, 0.4, 0.35, 0.8};
  std::vector<int> y = {0, 0, 1, 1};
  CHECK(roc_auc(s, y) == 0.75);
  CHECK(roc_auc(std::vector<double>{0.1, 0.2, 0.8, 0.9}, y) == 1.0);
  CHECK(roc_auc(std::vector<double>{0.3, 0.3, 0.3, 0.3}, y) == 0.5);
  CHECK_THROWS_WITH(roc_auc(s, std::vector<int>{1, 1, 1, 1}), "AUC undefined");
  CHECK_THROWS_AS(roc_auc(s, std::vector<int>{0, 1}), Error);
}

TEST_CASE("property: roc_auc equals pairwise counting, complement and monotone invariance") {
  Rng rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = static_cast<std::size_t>(uniform_index(rng, 2, 50));
    std::vector<double> scores(n);
    std::vector<int> labels(n);
    // Coarse score grid so ties are common.
    for (auto& s : scores) s = static_cast<double>(uniform_index(rng, 0, 9)) / 10.0;
    for (auto& l : labels) l = uniform01(rng) < 0.4 ? 1 : 0;
    labels[0] = 1;
    labels[1] = 0;
    const double auc = roc_auc(scores, labels);
    CHECK(auc == testing::brute_force_auc(scores, labels));

    // AUC is a multiple of 1/(2PN); compare the recovered half-pair counts so
    // the complement identity is checked exactly rather than up to rounding.
    std::vector<int> flipped(n);
    for (std::size_t i = 0; i < n; ++i) flipped[i] = 1 - labels[i];
    const double P = std::accumulate(labels.begin(), labels.end(), 0.0);
    const double halves = 2.0 * P * (static_cast<double>(n) - P);
    CHECK(std::llround(auc * halves) + std::llround(roc_auc(scores, flipped) * halves) ==
          std::llround(halves));
    CHECK(std::abs(roc_auc(scores, flipped) - (1.0 - auc)) < 1e-15);
    CHECK(roc_auc(scores, flipped) == testing::brute_force_auc(scores, flipped));

    std::vector<double> transformed(n);
    for (std::size_t i = 0; i < n; ++i) transformed[i] = std::exp(3.0 * scores[i]) - 7.0;
    CHECK(roc_auc(transformed, labels) == auc);
  }
}

TEST_CASE("stratified_kfold") {
  SUBCASE("exact divisibility") {
    std::vector<int> y = {1, 0, 1, 0, 1, 0, 1, 0, 1, 0};
    auto folds = stratified_kfold(y, 5, 3);
    REQUIRE(folds.size() == 5);
    for (const auto& f : folds) {
      REQUIRE(f.size() == 2);
      CHECK(y[f[0]] + y[f[1]] == 1);
    }
  }
  SUBCASE("partition, balance and determinism") {
    Rng rng(5);
    for (int trial = 0; trial < 100; ++trial) {
      const std::size_t k = static_cast<std::size_t>(uniform_index(rng, 2, 6));
      const std::size_t n = static_cast<std::size_t>(uniform_index(rng, 4 * 6, 120));
      std::vector<int> y(n);
      for (auto& l : y) l = uniform01(rng) < 0.3 ? 1 : 0;
      for (std::size_t i = 0; i < k; ++i) {
        y[i] = 1;
        y[n - 1 - i] = 0;
      }
      const std::uint64_t seed = rng();
      auto folds = stratified_kfold(y, k, seed);
      CHECK(folds == stratified_kfold(y, k, seed));
      std::vector<int> seen(n, 0);
      const double pos = std::accumulate(y.begin(), y.end(), 0.0);
      for (const auto& f : folds) {
        double fpos = 0.0;
        for (auto i : f) {
          ++seen[i];
          fpos += y[i];
        }
        CHECK(std::abs(fpos - pos / static_cast<double>(k)) <= 1.0);
        CHECK(std::abs((static_cast<double>(f.size()) - fpos) - (n - pos) / static_cast<double>(k)) <= 1.0);
      }
      for (int s : seen) CHECK(s == 1);
    }
  }
  CHECK_THROWS_AS(stratified_kfold(std::vector<int>{1, 0, 0, 0}, 2, 0), Error);
  CHECK_THROWS_AS(stratified_kfold(std::vector<int>{1, 0, 1, 0}, 1, 0), Error);
}

TEST_CASE("EvalReport summary") {
  auto r = EvalReport::from_folds("m", {0.6, 0.7, 0.8}, {10, 10, 10});
  CHECK(r.mean_auc == doctest::Approx(0.7));
  CHECK(r.std_auc == doctest::Approx(0.1));
  CHECK_THROWS_AS(EvalReport::from_folds("m", {1.2}, {3}), Error);
}

TEST_CASE("pipeline names round trip") {
  for (auto p : all_pipelines()) CHECK(parse_pipeline(pipeline_name(p)) == p);
  CHECK(pipeline_name(Pipeline::DesignMasking) == "design_masking");
  CHECK_THROWS_AS(parse_pipeline("bert"), Error);
}

namespace {

std::vector<PatientTrajectory> noise_cohort(std::size_t n, std::uint64_t seed, bool signal) {
  Rng rng(seed);
  std::vector<PatientTrajectory> out;
  for (std::size_t i = 0; i < n; ++i) {
    auto p = testing::random_trajectory(rng, "p" + std::to_string(i), 4, 12);
    p.label = uniform01(rng) < 0.5 ? 1 : 0;
    if (signal && *p.label == 1) p.events.push_back({"ATC:indicator", SourceId::Medication, p.events.back().visit_index, {}});
    out.push_back(p);
  }
  return out;
}

}  // namespace

TEST_CASE("logistic regression baseline") {
  SUBCASE("single indicator code separates the classes") {
    auto train = noise_cohort(300, 1, true), test = noise_cohort(200, 2, true);
    auto scores = logreg_baseline(train, test, {});
    std::vector<int> y;
    for (const auto& p : test) y.push_back(*p.label);
    CHECK(roc_auc(scores, y) >= 0.95);
    CHECK(scores == logreg_baseline(train, test, {}));
  }
  SUBCASE("zero iterations gives one half") {
    auto train = noise_cohort(20, 1, true), test = noise_cohort(10, 2, true);
    for (double s : logreg_baseline(train, test, {0, 0.1, 1e-3})) CHECK(s == 0.5);
  }
  SUBCASE("labels independent of codes give chance AUC") {
    ExperimentConfig cfg;
    auto cohort = noise_cohort(500, 3, false);
    auto report = evaluate_cv(cohort, Pipeline::LogregBaseline, cfg);
    CHECK(report.fold_auc.size() == 5);
    CHECK(report.mean_auc >= 0.45);
    CHECK(report.mean_auc <= 0.55);
  }
}

TEST_CASE("cross-validation keeps test patients out of training") {
  GeneratorConfig g;
  g.n_patients = 60;
  auto cohort = generate_cohort(g, 2);
  // Give every patient a private code so leaks into the vocabulary show up.
  for (auto& p : cohort) p.events.push_back({"ICD10:own" + p.patient_id, SourceId::Diagnosis, p.events.back().visit_index, {}});

  ExperimentConfig cfg;
  cfg.folds = 3;
  cfg.model.d_model = 8;
  cfg.model.n_heads = 2;
  cfg.model.n_layers = 1;
  cfg.model.d_ff = 16;
  cfg.model.max_len = 64;
  cfg.train.phase1_epochs = 1;
  cfg.train.phase2_epochs = 1;
  cfg.train.finetune_epochs = 1;
  cfg.threads = 2;

  std::mutex mu;
  std::set<std::size_t> tested;
  std::size_t calls = 0;
  auto observer = [&](const FoldSplit& split, const Vocabulary& vocab) {
    std::lock_guard<std::mutex> lock(mu);
    ++calls;
    for (auto i : split.test) {
      tested.insert(i);
      CHECK_FALSE(vocab.contains("ICD10:own" + cohort[i].patient_id));
    }
    for (auto i : split.train) CHECK(vocab.contains("ICD10:own" + cohort[i].patient_id));
    CHECK(split.train.size() + split.test.size() == cohort.size());
  };
  auto reports = evaluate_cohorts({cohort}, all_pipelines(), cfg, observer);
  CHECK(calls == 3);
  CHECK(tested.size() == cohort.size());
  REQUIRE(reports.size() == 1);
  REQUIRE(reports[0].size() == 4);
  for (const auto& r : reports[0]) {
    CHECK(r.fold_auc.size() == 3);
    for (double a : r.fold_auc) {
      CHECK(a >= 0.0);
      CHECK(a <= 1.0);
    }
  }

  // Thread count does not change results.
  cfg.threads = 1;
  auto serial = evaluate_cohorts({cohort}, all_pipelines(), cfg);
  for (std::size_t p = 0; p < 4; ++p) CHECK(serial[0][p].fold_auc == reports[0][p].fold_auc);

  std::stringstream report_csv, compare_csv;
  write_report_csv(report_csv, {"c0"}, reports);
  write_compare_csv(compare_csv, pool_reports(reports));
  std::string line;
  std::getline(report_csv, line);
  CHECK(line == "cohort,method,fold,auc,n_test,std_auc");
  std::size_t rows = 0, summaries = 0;
  while (std::getline(report_csv, line)) {
    ++rows;
    if (line.find(",mean,") != std::string::npos) ++summaries;
  }
  CHECK(rows == 4 * 3 + 4);
  CHECK(summaries == 4);
  std::getline(compare_csv, line);
  CHECK(line == "method,mean_auc,std_auc,n_folds,summary");
  std::vector<std::string> methods;
  while (std::getline(compare_csv, line)) {
    methods.push_back(line.substr(0, line.find(',')));
    CHECK(line.find(" (") != std::string::npos);
  }
  CHECK(methods == std::vector<std::string>{"no_pretrain", "simple_mlm", "design_masking", "logreg_baseline"});
}

TEST_CASE("pool_reports concatenates folds per method") {
  std::vector<std::vector<EvalReport>> per = {
      {EvalReport::from_folds("a", {0.5, 0.7}, {5, 5})},
      {EvalReport::from_folds("a", {0.6, 0.8}, {5, 5})}};
  auto pooled = pool_reports(per);
  REQUIRE(pooled.size() == 1);
  CHECK(pooled[0].fold_auc.size() == 4);
  CHECK(pooled[0].mean_auc == doctest::Approx(0.65));
}
