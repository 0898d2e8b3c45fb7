#include "traject/evaluation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <ostream>
#include <thread>

namespace traject {

double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw Error("roc_auc: scores and labels differ in length");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });

  // Sum of mid-ranks of the positives (ties share the average rank).
  double positive_rank_sum = 0.0;
  std::size_t positives = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double mid_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t t = i; t < j; ++t) {
      if (labels[order[t]] != 0 && labels[order[t]] != 1) throw Error("roc_auc: labels must be 0/1");
      if (labels[order[t]] == 1) {
        positive_rank_sum += mid_rank;
        ++positives;
      }
    }
    i = j;
  }
  const std::size_t negatives = n - positives;
  if (positives == 0 || negatives == 0) throw Error("AUC undefined");
  const double p = static_cast<double>(positives);
  const double u = positive_rank_sum - p * (p + 1.0) / 2.0;
  return u / (p * static_cast<double>(negatives));
}

std::vector<std::vector<std::size_t>> stratified_kfold(std::span<const int> labels, std::size_t k,
                                                       std::uint64_t seed) {
  if (k < 2) throw Error("stratified_kfold: k must be >= 2");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  for (const auto& [label, members] : by_class) {
    if (members.size() < k) {
      throw Error("stratified_kfold: class " + std::to_string(label) + " has " +
                  std::to_string(members.size()) + " examples, fewer than k=" + std::to_string(k));
    }
  }
  std::vector<std::vector<std::size_t>> folds(k);
  for (auto& [label, members] : by_class) {
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(label)}));
    std::shuffle(members.begin(), members.end(), rng);
    for (std::size_t i = 0; i < members.size(); ++i) folds[i % k].push_back(members[i]);
  }
  for (auto& f : folds) std::sort(f.begin(), f.end());
  return folds;
}

EvalReport EvalReport::from_folds(std::string method, std::vector<double> fold_auc,
                                  std::vector<std::size_t> n_test) {
  EvalReport r{std::move(method), std::move(fold_auc), std::move(n_test), 0.0, 0.0};
  for (double a : r.fold_auc) {
    if (!(a >= 0.0 && a <= 1.0)) throw Error("fold AUC outside [0, 1]");
  }
  const auto n = static_cast<double>(r.fold_auc.size());
  if (r.fold_auc.empty()) return r;
  r.mean_auc = std::accumulate(r.fold_auc.begin(), r.fold_auc.end(), 0.0) / n;
  if (r.fold_auc.size() > 1) {
    double ss = 0.0;
    for (double a : r.fold_auc) ss += (a - r.mean_auc) * (a - r.mean_auc);
    r.std_auc = std::sqrt(ss / (n - 1.0));
  }
  return r;
}

std::vector<double> logreg_baseline(const std::vector<PatientTrajectory>& train,
                                    const std::vector<PatientTrajectory>& test,
                                    const LogregConfig& cfg) {
  if (train.empty()) throw Error("empty corpus");
  Vocabulary vocab = build_vocabulary(train, 1);
  const std::size_t features = vocab.size() - special::kCount;
  auto design = [&](const std::vector<PatientTrajectory>& rows) {
    std::vector<double> x(rows.size() * features, 0.0);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      for (const auto& e : rows[i].events) {
        int id = vocab.id(e.code);
        if (id >= special::kCount) x[i * features + static_cast<std::size_t>(id - special::kCount)] += 1.0;
      }
    }
    return Tensor::from({rows.size(), features}, std::move(x));
  };
  std::vector<double> y;
  for (const auto& t : train) {
    if (!t.label) throw Error("logreg_baseline: unlabeled training patient " + t.patient_id);
    y.push_back(static_cast<double>(*t.label));
  }
  if (std::all_of(y.begin(), y.end(), [&](double v) { return v == y.front(); })) {
    throw Error("degenerate labels");
  }

  Tensor x_train = design(train);
  Tensor weight = Tensor::zeros({features, 1}, true);
  Tensor bias = Tensor::zeros({1}, true);
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    weight.zero_grad();
    bias.zero_grad();
    Tensor loss = bce_with_logits(add_bias(matmul(x_train, weight), bias), y);
    backward(loss);
    auto w = weight.data();
    auto gw = weight.grad();
    for (std::size_t j = 0; j < w.size(); ++j) w[j] -= cfg.lr * (gw[j] + cfg.l2 * w[j]);
    bias.data()[0] -= cfg.lr * bias.grad()[0];
  }

  if (test.empty()) return {};
  NoGradGuard no_grad;
  Tensor p = sigmoid(add_bias(matmul(design(test), weight), bias));
  return {p.data().begin(), p.data().end()};
}

ProbeResult masked_source_probe(const ModelParams& params,
                                const std::vector<EncodedSequence>& train,
                                const std::vector<EncodedSequence>& test, SourceId source,
                                const WindowPolicy& window, std::uint64_t seed) {
  const int tag = source_tag(source);
  std::map<int, std::size_t> counts;
  for (const auto& seq : train) {
    for (std::size_t i = 0; i < seq.max_len(); ++i) {
      if (seq.attention_mask[i] && !is_special(seq.token_ids[i]) && seq.source_ids[i] == tag) {
        ++counts[seq.token_ids[i]];
      }
    }
  }
  if (counts.empty()) throw Error("no training tokens for the probed source");
  const int most_frequent =
      std::max_element(counts.begin(), counts.end(),
                       [](const auto& a, const auto& b) { return a.second < b.second; })
          ->first;

  const std::size_t vocab_size = params.config().vocab_size;
  SourceMaskConfig cfg{source, window};
  std::vector<MaskedExample> examples;
  for (std::size_t i = 0; i < test.size(); ++i) {
    if (!has_multiple_sources(test[i])) continue;
    Rng rng(derive_seed(seed, {i}));
    auto ex = source_span_mask(test[i], cfg, vocab_size, rng);
    if (ex.mode != MaskMode::SourceSpan) continue;
    std::erase_if(ex.targets, [&](const auto& t) { return test[i].source_ids[t.first] != tag; });
    if (!ex.targets.empty()) examples.push_back(std::move(ex));
  }

  ProbeResult r;
  std::size_t model_hits = 0, unigram_hits = 0;
  NoGradGuard no_grad;
  for (const auto& batch : make_batches(examples, 64)) {
    auto out = mlm_loss(params, batch);
    const std::size_t V = out.logits.cols();
    for (std::size_t row = 0; row < out.targets.size(); ++row) {
      int best = special::kCount;
      for (std::size_t v = special::kCount; v < V; ++v) {
        if (out.logits[row * V + v] > out.logits[row * V + best]) best = static_cast<int>(v);
      }
      model_hits += best == out.targets[row] ? 1 : 0;
      unigram_hits += most_frequent == out.targets[row] ? 1 : 0;
      ++r.n_targets;
    }
  }
  if (r.n_targets == 0) throw Error("no probe targets");
  r.model_accuracy = static_cast<double>(model_hits) / static_cast<double>(r.n_targets);
  r.unigram_accuracy = static_cast<double>(unigram_hits) / static_cast<double>(r.n_targets);
  return r;
}

std::string_view pipeline_name(Pipeline p) {
  switch (p) {
    case Pipeline::NoPretrain: return "no_pretrain";
    case Pipeline::SimpleMlm: return "simple_mlm";
    case Pipeline::DesignMasking: return "design_masking";
    case Pipeline::LogregBaseline: return "logreg_baseline";
  }
  return "?";
}

Pipeline parse_pipeline(std::string_view name) {
  for (auto p : all_pipelines()) {
    if (pipeline_name(p) == name) return p;
  }
  throw ConfigError("pipeline", "unknown pipeline \"" + std::string(name) + "\"");
}

std::vector<Pipeline> all_pipelines() {
  return {Pipeline::NoPretrain, Pipeline::SimpleMlm, Pipeline::DesignMasking,
          Pipeline::LogregBaseline};
}

namespace {

struct FoldResult {
  std::vector<double> auc;  // one per pipeline
  std::size_t n_test = 0;
};

template <typename T>
std::vector<T> pick(const std::vector<T>& all, const std::vector<std::size_t>& idx) {
  std::vector<T> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(all[i]);
  return out;
}

FoldResult run_fold(const std::vector<PatientTrajectory>& dataset, const FoldSplit& split,
                    const std::vector<Pipeline>& pipelines, const ExperimentConfig& cfg,
                    const FoldObserver& observer) {
  const auto train = pick(dataset, split.train);
  const auto test = pick(dataset, split.test);
  Vocabulary vocab = build_vocabulary(train, cfg.min_count);
  if (observer) observer(split, vocab);

  std::vector<int> train_labels, test_labels;
  for (const auto& t : train) train_labels.push_back(*t.label);
  for (const auto& t : test) test_labels.push_back(*t.label);

  TrainConfig tc = cfg.train;
  tc.seed = derive_seed(cfg.train.seed, {split.cohort, split.fold});

  std::vector<EncodedSequence> train_seq, test_seq;
  const bool needs_model = std::any_of(pipelines.begin(), pipelines.end(),
                                       [](Pipeline p) { return p != Pipeline::LogregBaseline; });
  if (needs_model) {
    for (const auto& t : train) train_seq.push_back(encode_trajectory(t, vocab, cfg.model.max_len));
    for (const auto& t : test) test_seq.push_back(encode_trajectory(t, vocab, cfg.model.max_len));
  }

  auto score_model = [&](const ModelParams& start) {
    auto tuned = fine_tune(start, train_seq, train_labels, tc);
    return roc_auc(predict(tuned.params, test_seq), test_labels);
  };

  // simple_mlm and design_masking share the phase-1 weights under the
  // two-phase schedule.
  std::optional<PretrainResult> phase1;
  auto phase1_state = [&]() -> const PretrainResult& {
    if (!phase1) {
      TrainConfig two_phase = tc;
      two_phase.schedule = Schedule::TwoPhase;
      phase1 = start_pretraining(vocab.size(), cfg.model, two_phase);
      pretrain_stage(*phase1, train_seq, two_phase, cfg.masking, PretrainStage::Phase1);
    }
    return *phase1;
  };

  FoldResult result;
  result.n_test = test.size();
  for (auto p : pipelines) {
    double auc = 0.0;
    switch (p) {
      case Pipeline::NoPretrain:
        auc = score_model(start_pretraining(vocab.size(), cfg.model, tc).params);
        break;
      case Pipeline::SimpleMlm:
        auc = score_model(phase1_state().params);
        break;
      case Pipeline::DesignMasking: {
        if (tc.schedule == Schedule::Mixed) {
          auto state = start_pretraining(vocab.size(), cfg.model, tc);
          pretrain_stage(state, train_seq, tc, cfg.masking, PretrainStage::Both);
          auc = score_model(state.params);
        } else {
          PretrainResult state = phase1_state();
          pretrain_stage(state, train_seq, tc, cfg.masking, PretrainStage::Phase2);
          auc = score_model(state.params);
        }
        break;
      }
      case Pipeline::LogregBaseline:
        auc = roc_auc(logreg_baseline(train, test, cfg.logreg), test_labels);
        break;
    }
    log_info("cohort " + std::to_string(split.cohort) + " fold " + std::to_string(split.fold) +
             " " + std::string(pipeline_name(p)) + " auc " + std::to_string(auc));
    result.auc.push_back(auc);
  }
  return result;
}

}  // namespace

std::vector<std::vector<EvalReport>> evaluate_cohorts(
    const std::vector<std::vector<PatientTrajectory>>& cohorts,
    const std::vector<Pipeline>& pipelines, const ExperimentConfig& cfg,
    const FoldObserver& observer) {
  if (pipelines.empty()) throw Error("no pipelines requested");
  std::vector<FoldSplit> splits;
  for (std::size_t c = 0; c < cohorts.size(); ++c) {
    const auto& dataset = cohorts[c];
    if (dataset.empty()) throw Error("empty corpus");
    std::vector<int> labels;
    for (const auto& t : dataset) {
      if (!t.label) throw Error("patient " + t.patient_id + " has no label");
      labels.push_back(*t.label);
    }
    auto folds = stratified_kfold(labels, cfg.folds, derive_seed(cfg.cv_seed, {c}));
    for (std::size_t f = 0; f < folds.size(); ++f) {
      FoldSplit split{c, f, {}, folds[f]};
      for (std::size_t g = 0; g < folds.size(); ++g) {
        if (g != f) split.train.insert(split.train.end(), folds[g].begin(), folds[g].end());
      }
      std::sort(split.train.begin(), split.train.end());
      splits.push_back(std::move(split));
    }
  }

  std::vector<FoldResult> results(splits.size());
  std::vector<std::exception_ptr> errors(splits.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < splits.size(); i = next++) {
      try {
        results[i] = run_fold(cohorts[splits[i].cohort], splits[i], pipelines, cfg, observer);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t n_threads = std::clamp<std::size_t>(cfg.threads, 1, splits.size());
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  std::vector<std::vector<EvalReport>> out(cohorts.size());
  for (std::size_t c = 0; c < cohorts.size(); ++c) {
    for (std::size_t p = 0; p < pipelines.size(); ++p) {
      std::vector<double> aucs;
      std::vector<std::size_t> n_test;
      for (std::size_t i = 0; i < splits.size(); ++i) {
        if (splits[i].cohort != c) continue;
        aucs.push_back(results[i].auc[p]);
        n_test.push_back(results[i].n_test);
      }
      out[c].push_back(EvalReport::from_folds(std::string(pipeline_name(pipelines[p])),
                                              std::move(aucs), std::move(n_test)));
    }
  }
  return out;
}

EvalReport evaluate_cv(const std::vector<PatientTrajectory>& dataset, Pipeline pipeline,
                       const ExperimentConfig& cfg, const FoldObserver& observer) {
  return evaluate_cohorts({dataset}, {pipeline}, cfg, observer).front().front();
}

std::vector<EvalReport> pool_reports(const std::vector<std::vector<EvalReport>>& per_cohort) {
  std::vector<EvalReport> pooled;
  if (per_cohort.empty()) return pooled;
  for (std::size_t p = 0; p < per_cohort.front().size(); ++p) {
    std::vector<double> aucs;
    std::vector<std::size_t> n_test;
    for (const auto& cohort : per_cohort) {
      const auto& r = cohort.at(p);
      aucs.insert(aucs.end(), r.fold_auc.begin(), r.fold_auc.end());
      n_test.insert(n_test.end(), r.n_test.begin(), r.n_test.end());
    }
    pooled.push_back(EvalReport::from_folds(per_cohort.front()[p].method, std::move(aucs),
                                            std::move(n_test)));
  }
  return pooled;
}

namespace {

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

void write_report_csv(std::ostream& out, const std::vector<std::string>& cohort_names,
                      const std::vector<std::vector<EvalReport>>& reports) {
  out << "cohort,method,fold,auc,n_test,std_auc\n";
  for (std::size_t c = 0; c < reports.size(); ++c) {
    for (const auto& r : reports[c]) {
      std::size_t total = 0;
      for (std::size_t f = 0; f < r.fold_auc.size(); ++f) {
        out << cohort_names.at(c) << ',' << r.method << ',' << f << ',' << fixed(r.fold_auc[f], 6)
            << ',' << r.n_test[f] << ",\n";
        total += r.n_test[f];
      }
      out << cohort_names.at(c) << ',' << r.method << ",mean," << fixed(r.mean_auc, 6) << ','
          << total << ',' << fixed(r.std_auc, 6) << '\n';
    }
  }
}

void write_compare_csv(std::ostream& out, const std::vector<EvalReport>& pooled) {
  out << "method,mean_auc,std_auc,n_folds,summary\n";
  for (const auto& r : pooled) {
    out << r.method << ',' << fixed(r.mean_auc, 6) << ',' << fixed(r.std_auc, 6) << ','
        << r.fold_auc.size() << ",\"" << fixed(r.mean_auc, 3) << " (" << fixed(r.std_auc, 3)
        << ")\"\n";
  }
}

}  // namespace traject
