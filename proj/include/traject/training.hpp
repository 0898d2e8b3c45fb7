#pragma once

#include <functional>
#include <string>
#include <vector>

#include "traject/masking.hpp"
#include "traject/model.hpp"

namespace traject {

enum class Schedule { TwoPhase, Mixed };

struct TrainConfig {
  std::uint64_t seed = 0;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t phase1_epochs = 10;
  std::size_t phase2_epochs = 10;
  std::size_t finetune_epochs = 5;
  double finetune_lr = 2e-4;
  Schedule schedule = Schedule::TwoPhase;
  double mixed_ratio = 0.5;

  void validate() const;
};

struct MaskingConfig {
  RandomMaskConfig random;
  SourceMaskConfig source;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptimizerState {
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  std::size_t step = 0;
};

OptimizerState make_optimizer_state(const std::vector<Tensor>& params);

// One bias-corrected Adam update using each tensor's accumulated gradient.
// Throws "non-finite gradient" before touching any parameter if a gradient
// holds NaN/Inf.
void adam_step(const std::vector<Tensor>& params, OptimizerState& state, const AdamConfig& cfg,
               double lr);

std::vector<Tensor> parameter_list(const ModelParams& params);

struct LossPoint {
  std::string phase;  // phase1 | phase2 | mixed | finetune
  std::size_t epoch = 0;
  double mean_loss = 0.0;
};

struct MaskCounters {
  std::size_t random_token = 0;
  std::size_t source_span = 0;
};

struct PretrainResult {
  ModelParams params;
  OptimizerState optimizer;
  std::vector<LossPoint> curve;
  MaskCounters phase1;        // or the mixed phase
  MaskCounters phase2;
  std::size_t phase2_skipped = 0;  // single-source sequences or masking fallbacks
};

// Freshly initialized model and optimizer state; pretrain() starts here.
PretrainResult start_pretraining(std::size_t vocab_size, const ModelConfig& model_cfg,
                                 const TrainConfig& train_cfg);

using PhaseCallback = std::function<void(const std::string& phase, const ModelParams& params)>;

enum class PretrainStage { Phase1, Phase2, Both };

// Random-token epochs, then source-span epochs continuing from the phase-1
// weights (or a per-batch mix when schedule == Mixed). Masks are re-drawn
// every epoch.
PretrainResult pretrain(const std::vector<EncodedSequence>& data, std::size_t vocab_size,
                        const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                        const MaskingConfig& masking, const PhaseCallback& on_phase_end = {});

// Runs only the requested two-phase stage on an existing state. Phase2 on
// the result of Phase1 equals a Both run.
void pretrain_stage(PretrainResult& state, const std::vector<EncodedSequence>& data,
                    const TrainConfig& train_cfg, const MaskingConfig& masking,
                    PretrainStage stage);

struct FineTuneResult {
  ModelParams params;
  std::vector<LossPoint> curve;
};

// Fresh zero classifier head, all weights trained with binary cross-entropy.
FineTuneResult fine_tune(const ModelParams& pretrained, const std::vector<EncodedSequence>& data,
                         const std::vector<int>& labels, const TrainConfig& train_cfg);

// Eval-mode probabilities for many sequences, batched.
std::vector<double> predict(const ModelParams& params, const std::vector<EncodedSequence>& data,
                            std::size_t batch_size = 64);

bool has_multiple_sources(const EncodedSequence& seq);

}  // namespace traject
