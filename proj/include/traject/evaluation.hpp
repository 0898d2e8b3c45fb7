#pragma once

#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "traject/training.hpp"
#include "traject/trajectory.hpp"

namespace traject {

// Mann-Whitney AUC: probability that a random positive outscores a random
// negative, ties counted as one half.
double roc_auc(std::span<const double> scores, std::span<const int> labels);

// k disjoint test-index sets covering 0..n-1. Every class is shuffled with the
// seed and dealt round-robin, so each fold holds floor or ceil of its share.
std::vector<std::vector<std::size_t>> stratified_kfold(std::span<const int> labels, std::size_t k,
                                                       std::uint64_t seed);

struct EvalReport {
  std::string method;
  std::vector<double> fold_auc;
  std::vector<std::size_t> n_test;
  double mean_auc = 0.0;
  double std_auc = 0.0;  // sample standard deviation (n - 1)

  static EvalReport from_folds(std::string method, std::vector<double> fold_auc,
                               std::vector<std::size_t> n_test);
};

struct LogregConfig {
  std::size_t iterations = 500;
  double lr = 0.1;
  double l2 = 1e-3;
};

// Bag-of-codes logistic regression; the feature vocabulary comes from train
// only. Returns test-set probabilities.
std::vector<double> logreg_baseline(const std::vector<PatientTrajectory>& train,
                                    const std::vector<PatientTrajectory>& test,
                                    const LogregConfig& cfg);

// Top-1 accuracy on source-span masked targets of one source in held-out
// sequences, next to the accuracy of always guessing that source's most
// frequent training code. Only targets of `source` are scored.
struct ProbeResult {
  double model_accuracy = 0.0;
  double unigram_accuracy = 0.0;
  std::size_t n_targets = 0;
};

ProbeResult masked_source_probe(const ModelParams& params,
                                const std::vector<EncodedSequence>& train,
                                const std::vector<EncodedSequence>& test, SourceId source,
                                const WindowPolicy& window, std::uint64_t seed);

enum class Pipeline { NoPretrain, SimpleMlm, DesignMasking, LogregBaseline };

std::string_view pipeline_name(Pipeline p);  // no_pretrain | simple_mlm | ...
Pipeline parse_pipeline(std::string_view name);
std::vector<Pipeline> all_pipelines();

struct ExperimentConfig {
  ModelConfig model;  // vocab_size is set per fold
  TrainConfig train;
  MaskingConfig masking;
  LogregConfig logreg;
  std::size_t folds = 5;
  std::uint64_t cv_seed = 0;
  std::size_t min_count = 1;
  std::size_t threads = 1;
};

struct FoldSplit {
  std::size_t cohort = 0;
  std::size_t fold = 0;
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

// Called once per fold, before training, with the split and the vocabulary
// built from that fold's training patients. May run on worker threads.
using FoldObserver = std::function<void(const FoldSplit&, const Vocabulary&)>;

// Cross-validates every pipeline on every cohort. Folds are independent and
// run on up to cfg.threads threads; results do not depend on the thread count.
// Result [c][p] is cohort c, pipeline p.
std::vector<std::vector<EvalReport>> evaluate_cohorts(
    const std::vector<std::vector<PatientTrajectory>>& cohorts,
    const std::vector<Pipeline>& pipelines, const ExperimentConfig& cfg,
    const FoldObserver& observer = {});

EvalReport evaluate_cv(const std::vector<PatientTrajectory>& dataset, Pipeline pipeline,
                       const ExperimentConfig& cfg, const FoldObserver& observer = {});

// Pools fold AUCs of the same method across cohorts.
std::vector<EvalReport> pool_reports(const std::vector<std::vector<EvalReport>>& per_cohort);

// report.csv: cohort,method,fold,auc,n_test,std_auc with one summary row per
// (cohort, method) whose fold column reads "mean".
void write_report_csv(std::ostream& out, const std::vector<std::string>& cohort_names,
                      const std::vector<std::vector<EvalReport>>& reports);
// compare.csv: method,mean_auc,std_auc,n_folds,summary where summary is
// "mean (std)" with three decimals.
void write_compare_csv(std::ostream& out, const std::vector<EvalReport>& pooled);

}  // namespace traject
