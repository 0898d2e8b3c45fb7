#pragma once

#include <cstdint>
#include <vector>

#include "traject/checkpoint.hpp"
#include "traject/masking.hpp"
#include "traject/tensor.hpp"
#include "traject/trajectory.hpp"

namespace traject {

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_layers = 2;
  std::size_t d_ff = 256;
  std::size_t max_len = 128;
  std::size_t vocab_size = 0;
  std::size_t n_sources = kSourceCount;
  std::size_t max_visits = 64;  // later visits share the last embedding row
  double dropout_rate = 0.1;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct EncoderLayer {
  Tensor ln1_gain, ln1_bias;
  Tensor wq, wk, wv, wo;  // [d_model, d_model]
  Tensor ln2_gain, ln2_bias;
  Tensor ff1_weight, ff1_bias;  // [d_model, d_ff], [d_ff]
  Tensor ff2_weight, ff2_bias;  // [d_ff, d_model], [d_model]
};

// All learnable tensors. Copies are deep; the MLM output projection reuses
// token_embedding.
class ModelParams {
 public:
  ModelParams(const ModelConfig& cfg, std::uint64_t seed);
  ModelParams(const ModelParams& other);
  ModelParams& operator=(const ModelParams& other);
  ModelParams(ModelParams&&) noexcept = default;
  ModelParams& operator=(ModelParams&&) noexcept = default;

  const ModelConfig& config() const { return config_; }

  // Stable order; names are used by checkpoints and the optimizer.
  std::vector<NamedTensor> named() const;
  void zero_grad();
  void reset_classifier();

  Tensor token_embedding;     // [vocab_size, d_model]
  Tensor source_embedding;    // [n_sources + 1, d_model]
  Tensor position_embedding;  // [max_len, d_model]
  Tensor visit_embedding;     // [max_visits, d_model]
  std::vector<EncoderLayer> layers;
  Tensor final_ln_gain, final_ln_bias;
  Tensor mlm_bias;    // [vocab_size]
  Tensor cls_weight;  // [d_model, 1]
  Tensor cls_bias;    // [1]

 private:
  ModelConfig config_;
};

struct ForwardOptions {
  bool training = false;  // enables dropout
  std::uint64_t seed = 0;
  // If set, receives the attention weights of every layer ([B, H, L, L] each).
  std::vector<std::vector<double>>* attention_weights = nullptr;
};

// Hidden states [batch_size, seq_len, d_model].
Tensor forward_encoder(const ModelParams& params, const Batch& batch,
                       const ForwardOptions& options = {});

struct MlmOutput {
  Tensor loss;                       // scalar mean cross-entropy
  Tensor logits;                     // [n_targets, vocab_size]
  std::vector<std::size_t> positions;  // flat batch positions, row order of logits
  std::vector<int> targets;
};

MlmOutput mlm_loss(const ModelParams& params, const Batch& batch,
                   const ForwardOptions& options = {});

// Logits over the CLS state, [batch_size, 1].
Tensor classifier_logits(const ModelParams& params, const Batch& batch,
                         const ForwardOptions& options = {});

// Eval-mode probabilities sigmoid(w . h_cls + b), one per example.
std::vector<double> classify(const ModelParams& params, const Batch& batch);

void save_model(const std::string& path, const ModelParams& params);
ModelParams load_model(const std::string& path);

}  // namespace traject
