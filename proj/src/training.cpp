#include "traject/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

namespace traject {

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("train.batch_size", "must be positive");
  if (!(lr > 0.0)) throw ConfigError("train.lr", "must be positive");
  if (!(finetune_lr > 0.0)) throw ConfigError("train.finetune_lr", "must be positive");
  if (beta1 < 0.0 || beta1 >= 1.0) throw ConfigError("train.beta1", "must be in [0, 1)");
  if (beta2 < 0.0 || beta2 >= 1.0) throw ConfigError("train.beta2", "must be in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("train.adam_eps", "must be positive");
  if (mixed_ratio < 0.0 || mixed_ratio > 1.0) {
    throw ConfigError("train.mixed_ratio", "must be in [0, 1]");
  }
}

OptimizerState make_optimizer_state(const std::vector<Tensor>& params) {
  OptimizerState state;
  for (const auto& p : params) {
    state.first_moment.emplace_back(p.size(), 0.0);
    state.second_moment.emplace_back(p.size(), 0.0);
  }
  return state;
}

void adam_step(const std::vector<Tensor>& params, OptimizerState& state, const AdamConfig& cfg,
               double lr) {
  if (state.first_moment.size() != params.size()) {
    throw Error("adam_step: optimizer state does not match parameter list");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.first_moment[i].size() != params[i].size()) {
      throw Error("adam_step: moment shape mismatch for parameter " + std::to_string(i));
    }
    if (!params[i].has_grad()) continue;
    Tensor p = params[i];
    for (double g : p.grad()) {
      if (!std::isfinite(g)) throw Error("non-finite gradient");
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i];
    if (!p.has_grad()) continue;
    auto value = p.data();
    auto grad = p.grad();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    for (std::size_t j = 0; j < value.size(); ++j) {
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * grad[j];
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * grad[j] * grad[j];
      value[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg.eps);
    }
  }
}

std::vector<Tensor> parameter_list(const ModelParams& params) {
  std::vector<Tensor> out;
  for (auto& [name, t] : params.named()) out.push_back(t);
  return out;
}

bool has_multiple_sources(const EncodedSequence& seq) {
  std::set<int> sources;
  for (int pos : eligible_positions(seq)) sources.insert(seq.source_ids[static_cast<std::size_t>(pos)]);
  return sources.size() >= 2;
}

namespace {

std::vector<std::size_t> shuffled(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

AdamConfig adam_config(const TrainConfig& cfg) { return {cfg.beta1, cfg.beta2, cfg.adam_eps}; }

enum class PhaseKind : std::uint64_t { RandomToken = 1, SourceSpan = 2, Mixed = 3, FineTune = 4 };

const char* phase_name(PhaseKind kind) {
  switch (kind) {
    case PhaseKind::RandomToken: return "phase1";
    case PhaseKind::SourceSpan: return "phase2";
    case PhaseKind::Mixed: return "mixed";
    case PhaseKind::FineTune: return "finetune";
  }
  return "?";
}

void run_mlm_phase(PretrainResult& state, const std::vector<EncodedSequence>& data,
                   std::size_t vocab_size, const TrainConfig& cfg, const MaskingConfig& masking,
                   PhaseKind kind, std::size_t epochs, MaskCounters& counters) {
  const auto k = static_cast<std::uint64_t>(kind);
  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (kind == PhaseKind::SourceSpan && !has_multiple_sources(data[i])) continue;
    if (eligible_positions(data[i]).empty()) continue;
    pool.push_back(i);
  }
  if (kind == PhaseKind::SourceSpan) {
    state.phase2_skipped = data.size() - pool.size();
    if (pool.empty() && epochs > 0) throw Error("no multi-source trajectories");
    if (state.phase2_skipped > 0) {
      log_info("phase2: skipped " + std::to_string(state.phase2_skipped) +
               " single-source sequences");
    }
  }
  if (pool.empty() && epochs > 0) throw Error("no maskable sequences");

  auto params = parameter_list(state.params);
  const auto adam = adam_config(cfg);
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    auto order = shuffled(pool.size(), derive_seed(cfg.seed, {k, epoch, 0}));
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const std::size_t batch_index = start / cfg.batch_size;
      bool span_batch = kind == PhaseKind::SourceSpan;
      if (kind == PhaseKind::Mixed) {
        Rng coin(derive_seed(cfg.seed, {k, epoch, 1, batch_index}));
        span_batch = uniform01(coin) < cfg.mixed_ratio;
      }
      std::vector<MaskedExample> examples;
      for (std::size_t j = start; j < end; ++j) {
        const std::size_t idx = pool[order[j]];
        Rng rng(derive_seed(cfg.seed, {k, epoch, 2, idx}));
        if (span_batch && has_multiple_sources(data[idx])) {
          auto ex = source_span_mask(data[idx], masking.source, vocab_size, rng);
          if (kind == PhaseKind::SourceSpan && ex.mode != MaskMode::SourceSpan) {
            ++state.phase2_skipped;
            continue;
          }
          examples.push_back(std::move(ex));
        } else {
          examples.push_back(random_token_mask(data[idx], masking.random, vocab_size, rng));
        }
        if (examples.back().mode == MaskMode::SourceSpan) {
          ++counters.source_span;
        } else {
          ++counters.random_token;
        }
      }
      if (examples.empty()) continue;
      Batch batch = make_batch(examples).trimmed();
      state.params.zero_grad();
      ForwardOptions opts{true, derive_seed(cfg.seed, {k, epoch, 3, batch_index}), nullptr};
      auto out = mlm_loss(state.params, batch, opts);
      backward(out.loss);
      adam_step(params, state.optimizer, adam, cfg.lr);
      loss_sum += out.loss.item();
      ++batches;
    }
    const double mean_loss = batches ? loss_sum / static_cast<double>(batches) : 0.0;
    state.curve.push_back({phase_name(kind), epoch, mean_loss});
    log_info(std::string(phase_name(kind)) + " epoch " + std::to_string(epoch) +
             " loss " + std::to_string(mean_loss));
  }
}

}  // namespace

void pretrain_stage(PretrainResult& state, const std::vector<EncodedSequence>& data,
                    const TrainConfig& cfg, const MaskingConfig& masking, PretrainStage stage) {
  cfg.validate();
  masking.random.validate();
  masking.source.validate();
  const std::size_t vocab_size = state.params.config().vocab_size;
  if (cfg.schedule == Schedule::Mixed) {
    if (stage == PretrainStage::Phase2) return;
    run_mlm_phase(state, data, vocab_size, cfg, masking, PhaseKind::Mixed,
                  cfg.phase1_epochs + cfg.phase2_epochs, state.phase1);
    return;
  }
  if (stage != PretrainStage::Phase2) {
    run_mlm_phase(state, data, vocab_size, cfg, masking, PhaseKind::RandomToken,
                  cfg.phase1_epochs, state.phase1);
  }
  if (stage != PretrainStage::Phase1) {
    run_mlm_phase(state, data, vocab_size, cfg, masking, PhaseKind::SourceSpan,
                  cfg.phase2_epochs, state.phase2);
  }
}

PretrainResult start_pretraining(std::size_t vocab_size, const ModelConfig& model_cfg,
                                 const TrainConfig& train_cfg) {
  train_cfg.validate();
  ModelConfig cfg = model_cfg;
  cfg.vocab_size = vocab_size;
  ModelParams params(cfg, derive_seed(train_cfg.seed, {0xC0FFEE}));
  auto opt = make_optimizer_state(parameter_list(params));
  return PretrainResult{std::move(params), std::move(opt), {}, {}, {}, 0};
}

PretrainResult pretrain(const std::vector<EncodedSequence>& data, std::size_t vocab_size,
                        const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                        const MaskingConfig& masking, const PhaseCallback& on_phase_end) {
  if (data.empty()) throw Error("empty dataset");
  PretrainResult state = start_pretraining(vocab_size, model_cfg, train_cfg);
  if (train_cfg.schedule == Schedule::Mixed) {
    pretrain_stage(state, data, train_cfg, masking, PretrainStage::Both);
    if (on_phase_end) on_phase_end("mixed", state.params);
    return state;
  }
  pretrain_stage(state, data, train_cfg, masking, PretrainStage::Phase1);
  if (on_phase_end) on_phase_end("phase1", state.params);
  pretrain_stage(state, data, train_cfg, masking, PretrainStage::Phase2);
  if (on_phase_end) on_phase_end("phase2", state.params);
  return state;
}

FineTuneResult fine_tune(const ModelParams& pretrained, const std::vector<EncodedSequence>& data,
                         const std::vector<int>& labels, const TrainConfig& cfg) {
  cfg.validate();
  if (data.size() != labels.size()) throw Error("fine_tune: labels do not match sequences");
  if (data.empty()) throw Error("empty dataset");
  bool has0 = false, has1 = false;
  for (int y : labels) {
    if (y != 0 && y != 1) throw Error("fine_tune: labels must be 0 or 1");
    (y ? has1 : has0) = true;
  }
  if (!has0 || !has1) throw Error("degenerate labels");

  FineTuneResult result{pretrained, {}};
  result.params.reset_classifier();
  auto params = parameter_list(result.params);
  auto opt = make_optimizer_state(params);
  const auto adam = adam_config(cfg);
  const auto k = static_cast<std::uint64_t>(PhaseKind::FineTune);
  for (std::size_t epoch = 0; epoch < cfg.finetune_epochs; ++epoch) {
    auto order = shuffled(data.size(), derive_seed(cfg.seed, {k, epoch, 0}));
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<EncodedSequence> seqs;
      std::vector<double> y;
      for (std::size_t j = start; j < end; ++j) {
        seqs.push_back(data[order[j]]);
        y.push_back(static_cast<double>(labels[order[j]]));
      }
      Batch batch = make_batch(seqs).trimmed();
      result.params.zero_grad();
      ForwardOptions opts{true, derive_seed(cfg.seed, {k, epoch, 3, start}), nullptr};
      Tensor loss = bce_with_logits(classifier_logits(result.params, batch, opts), y);
      backward(loss);
      adam_step(params, opt, adam, cfg.finetune_lr);
      loss_sum += loss.item();
      ++batches;
    }
    const double mean_loss = loss_sum / static_cast<double>(batches);
    result.curve.push_back({"finetune", epoch, mean_loss});
    log_info("finetune epoch " + std::to_string(epoch) + " loss " + std::to_string(mean_loss));
  }
  return result;
}

std::vector<double> predict(const ModelParams& params, const std::vector<EncodedSequence>& data,
                            std::size_t batch_size) {
  std::vector<double> out;
  out.reserve(data.size());
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t end = std::min(data.size(), start + batch_size);
    std::vector<EncodedSequence> seqs(data.begin() + static_cast<std::ptrdiff_t>(start),
                                      data.begin() + static_cast<std::ptrdiff_t>(end));
    auto p = classify(params, make_batch(seqs));
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

}  // namespace traject
