#pragma once

// Helpers shared by the unit tests and the acceptance binary: hand-rolled
// generators, a central-difference gradient checker and brute-force oracles.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "traject/model.hpp"
#include "traject/trajectory.hpp"

namespace traject::testing {

inline std::vector<double> random_values(Rng& rng, std::size_t n, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  std::vector<double> v(n);
  for (auto& x : v) x = normal(rng);
  return v;
}

inline Tensor random_tensor(Rng& rng, Shape shape, double scale = 1.0, bool requires_grad = true) {
  const std::size_t n = shape_size(shape);
  return Tensor::from(std::move(shape), random_values(rng, n, scale), requires_grad);
}

// Random multi-visit trajectory over a small code pool. Every source in
// `sources` gets at least one event somewhere.
inline PatientTrajectory random_trajectory(Rng& rng, const std::string& id, int max_visits,
                                           int codes_per_source,
                                           std::vector<SourceId> sources = {SourceId::Diagnosis,
                                                                            SourceId::Medication}) {
  PatientTrajectory t;
  t.patient_id = id;
  const int visits = uniform_index(rng, 1, max_visits);
  for (int v = 0; v < visits; ++v) {
    for (SourceId s : sources) {
      const int n = uniform_index(rng, 0, 3);
      for (int i = 0; i < n; ++i) {
        const int c = uniform_index(rng, 0, codes_per_source - 1);
        t.events.push_back({std::string(source_prefix(s)) + "c" + std::to_string(c), s, v, 50 + v});
      }
    }
  }
  for (SourceId s : sources) {
    bool present = std::any_of(t.events.begin(), t.events.end(),
                               [&](const Event& e) { return e.source == s; });
    if (!present) {
      const int v = uniform_index(rng, 0, visits - 1);
      Event e{std::string(source_prefix(s)) + "c0", s, v, 50 + v};
      auto pos = std::find_if(t.events.begin(), t.events.end(),
                              [&](const Event& x) { return x.visit_index > v; });
      t.events.insert(pos, e);
    }
  }
  return t;
}

struct GradCheck {
  double max_rel_error = 0.0;
  std::string worst;  // "<tensor>[index]"
};

// Compares the analytic gradient of `loss` with central differences for every
// element of every tensor. Relative error uses max(|a|, |n|, floor) as the
// denominator so that exact zeros do not blow up.
inline GradCheck check_gradients(const std::function<Tensor()>& loss,
                                 const std::vector<NamedTensor>& params, double eps = 1e-5,
                                 double floor = 1e-6) {
  for (const auto& p : params) p.tensor.node()->grad.clear();
  backward(loss());
  std::vector<std::vector<double>> analytic;
  for (const auto& p : params) {
    auto* node = p.tensor.node();
    analytic.push_back(node->grad.empty() ? std::vector<double>(node->value.size(), 0.0)
                                          : node->grad);
  }
  GradCheck out;
  NoGradGuard no_grad;
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto& value = params[t].tensor.node()->value;
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double saved = value[i];
      value[i] = saved + eps;
      const double up = loss().item();
      value[i] = saved - eps;
      const double down = loss().item();
      value[i] = saved;
      const double numeric = (up - down) / (2 * eps);
      const double a = analytic[t][i];
      const double rel =
          std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      if (rel > out.max_rel_error) {
        out.max_rel_error = rel;
        out.worst = params[t].name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return out;
}

// O(P*N) pairwise AUC, ties counted one half.
inline double brute_force_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  double wins = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      ++pairs;
      if (scores[i] > scores[j]) wins += 1.0;
      else if (scores[i] == scores[j]) wins += 0.5;
    }
  }
  return wins / static_cast<double>(pairs);
}

inline ModelConfig tiny_model_config(std::size_t vocab_size = 12) {
  ModelConfig cfg;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.n_layers = 1;
  cfg.d_ff = 16;
  cfg.max_len = 6;
  cfg.vocab_size = vocab_size;
  cfg.max_visits = 4;
  cfg.dropout_rate = 0.0;
  return cfg;
}

// A hand-built batch for the tiny config: two sequences of length 6, the
// second one padded, three MLM targets.
inline Batch tiny_mlm_batch() {
  Batch b;
  b.batch_size = 2;
  b.seq_len = 6;
  b.token_ids = {2, 4, 7, 3, 4, 3, /**/ 2, 9, 4, 3, 0, 0};
  b.source_ids = {3, 0, 1, 3, 0, 3, /**/ 3, 0, 1, 3, 3, 3};
  b.position_ids = {0, 1, 2, 3, 4, 5, /**/ 0, 1, 2, 3, 4, 5};
  b.visit_ids = {0, 0, 0, 0, 1, 1, /**/ 0, 0, 0, 0, 0, 0};
  b.attention_mask = {1, 1, 1, 1, 1, 1, /**/ 1, 1, 1, 1, 0, 0};
  b.targets = {-1, 5, -1, -1, 11, -1, /**/ -1, -1, 8, -1, -1, -1};
  b.modes = {MaskMode::RandomToken, MaskMode::RandomToken};
  return b;
}

}  // namespace traject::testing
