#include "traject/model.hpp"

#include <cmath>
#include <fstream>

#include "traject/config.hpp"

namespace traject {

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* key) {
    if (v == 0) throw ConfigError(key, "must be positive");
  };
  positive(d_model, "model.d_model");
  positive(n_heads, "model.n_heads");
  positive(n_layers, "model.n_layers");
  positive(d_ff, "model.d_ff");
  positive(max_len, "model.max_len");
  positive(n_sources, "model.n_sources");
  positive(max_visits, "model.max_visits");
  if (vocab_size <= static_cast<std::size_t>(special::kCount)) {
    throw ConfigError("model.vocab_size", "must exceed the special-token count");
  }
  if (d_model % n_heads != 0) throw ConfigError("model.n_heads", "must divide model.d_model");
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) {
    throw ConfigError("model.dropout", "must be in [0, 1)");
  }
}

namespace {

Tensor normal_tensor(Shape shape, Rng& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> values(shape_size(shape));
  for (auto& v : values) v = dist(rng);
  return Tensor::from(std::move(shape), std::move(values), true);
}

Tensor constant_tensor(Shape shape, double value) {
  return Tensor::from(shape, std::vector<double>(shape_size(shape), value), true);
}

}  // namespace

ModelParams::ModelParams(const ModelConfig& cfg, std::uint64_t seed) : config_(cfg) {
  cfg.validate();
  constexpr double kInitStd = 0.02;
  Rng rng(seed);
  const std::size_t d = cfg.d_model;
  token_embedding = normal_tensor({cfg.vocab_size, d}, rng, kInitStd);
  source_embedding = normal_tensor({cfg.n_sources + 1, d}, rng, kInitStd);
  position_embedding = normal_tensor({cfg.max_len, d}, rng, kInitStd);
  visit_embedding = normal_tensor({cfg.max_visits, d}, rng, kInitStd);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    EncoderLayer layer;
    layer.ln1_gain = constant_tensor({d}, 1.0);
    layer.ln1_bias = constant_tensor({d}, 0.0);
    layer.wq = normal_tensor({d, d}, rng, kInitStd);
    layer.wk = normal_tensor({d, d}, rng, kInitStd);
    layer.wv = normal_tensor({d, d}, rng, kInitStd);
    layer.wo = normal_tensor({d, d}, rng, kInitStd);
    layer.ln2_gain = constant_tensor({d}, 1.0);
    layer.ln2_bias = constant_tensor({d}, 0.0);
    layer.ff1_weight = normal_tensor({d, cfg.d_ff}, rng, kInitStd);
    layer.ff1_bias = constant_tensor({cfg.d_ff}, 0.0);
    layer.ff2_weight = normal_tensor({cfg.d_ff, d}, rng, kInitStd);
    layer.ff2_bias = constant_tensor({d}, 0.0);
    layers.push_back(std::move(layer));
  }
  final_ln_gain = constant_tensor({d}, 1.0);
  final_ln_bias = constant_tensor({d}, 0.0);
  mlm_bias = constant_tensor({cfg.vocab_size}, 0.0);
  cls_weight = constant_tensor({d, 1}, 0.0);
  cls_bias = constant_tensor({1}, 0.0);
}

ModelParams::ModelParams(const ModelParams& other) : config_(other.config_) {
  auto deep = [](const Tensor& t) { return t.clone(true); };
  token_embedding = deep(other.token_embedding);
  source_embedding = deep(other.source_embedding);
  position_embedding = deep(other.position_embedding);
  visit_embedding = deep(other.visit_embedding);
  for (const auto& l : other.layers) {
    layers.push_back({deep(l.ln1_gain), deep(l.ln1_bias), deep(l.wq), deep(l.wk), deep(l.wv),
                      deep(l.wo), deep(l.ln2_gain), deep(l.ln2_bias), deep(l.ff1_weight),
                      deep(l.ff1_bias), deep(l.ff2_weight), deep(l.ff2_bias)});
  }
  final_ln_gain = deep(other.final_ln_gain);
  final_ln_bias = deep(other.final_ln_bias);
  mlm_bias = deep(other.mlm_bias);
  cls_weight = deep(other.cls_weight);
  cls_bias = deep(other.cls_bias);
}

ModelParams& ModelParams::operator=(const ModelParams& other) {
  if (this != &other) *this = ModelParams(other);
  return *this;
}

std::vector<NamedTensor> ModelParams::named() const {
  std::vector<NamedTensor> out{{"token_embedding", token_embedding},
                               {"source_embedding", source_embedding},
                               {"position_embedding", position_embedding},
                               {"visit_embedding", visit_embedding}};
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    const std::string p = "layer" + std::to_string(i) + ".";
    out.push_back({p + "ln1_gain", l.ln1_gain});
    out.push_back({p + "ln1_bias", l.ln1_bias});
    out.push_back({p + "wq", l.wq});
    out.push_back({p + "wk", l.wk});
    out.push_back({p + "wv", l.wv});
    out.push_back({p + "wo", l.wo});
    out.push_back({p + "ln2_gain", l.ln2_gain});
    out.push_back({p + "ln2_bias", l.ln2_bias});
    out.push_back({p + "ff1_weight", l.ff1_weight});
    out.push_back({p + "ff1_bias", l.ff1_bias});
    out.push_back({p + "ff2_weight", l.ff2_weight});
    out.push_back({p + "ff2_bias", l.ff2_bias});
  }
  out.push_back({"final_ln_gain", final_ln_gain});
  out.push_back({"final_ln_bias", final_ln_bias});
  out.push_back({"mlm_bias", mlm_bias});
  out.push_back({"cls_weight", cls_weight});
  out.push_back({"cls_bias", cls_bias});
  return out;
}

void ModelParams::zero_grad() {
  for (auto& [name, t] : named()) Tensor(t).zero_grad();
}

void ModelParams::reset_classifier() {
  for (auto& v : cls_weight.data()) v = 0.0;
  cls_bias.data()[0] = 0.0;
}

Tensor forward_encoder(const ModelParams& params, const Batch& batch,
                       const ForwardOptions& options) {
  const auto& cfg = params.config();
  const std::size_t B = batch.batch_size, L = batch.seq_len, d = cfg.d_model;
  if (B == 0 || L == 0) throw Error("forward_encoder: empty batch");
  if (L > cfg.max_len) throw Error("forward_encoder: sequence longer than model.max_len");
  for (int s : batch.source_ids) {
    if (s < 0 || static_cast<std::size_t>(s) > cfg.n_sources) {
      throw Error("forward_encoder: source id " + std::to_string(s) + " out of range");
    }
  }
  std::vector<int> visits(batch.visit_ids);
  const int last_visit = static_cast<int>(cfg.max_visits) - 1;
  for (auto& v : visits) v = std::min(v, last_visit);

  Tensor h = add(add(embedding_lookup(params.token_embedding, batch.token_ids),
                     embedding_lookup(params.source_embedding, batch.source_ids)),
                 add(embedding_lookup(params.position_embedding, batch.position_ids),
                     embedding_lookup(params.visit_embedding, visits)));

  const double rate = options.training ? cfg.dropout_rate : 0.0;
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const auto& layer = params.layers[l];
    Tensor a = layer_norm(h, layer.ln1_gain, layer.ln1_bias);
    AttentionSpec spec{B, L, cfg.n_heads, rate, derive_seed(options.seed, {l, 0})};
    std::vector<double> weights;
    Tensor att = multi_head_attention(matmul(a, layer.wq), matmul(a, layer.wk),
                                      matmul(a, layer.wv), batch.attention_mask, spec,
                                      options.attention_weights ? &weights : nullptr);
    if (options.attention_weights) options.attention_weights->push_back(std::move(weights));
    h = add(h, matmul(att, layer.wo));

    Tensor f = layer_norm(h, layer.ln2_gain, layer.ln2_bias);
    f = gelu(add_bias(matmul(f, layer.ff1_weight), layer.ff1_bias));
    f = add_bias(matmul(f, layer.ff2_weight), layer.ff2_bias);
    f = dropout(f, rate, derive_seed(options.seed, {l, 1}));
    h = add(h, f);
  }
  h = layer_norm(h, params.final_ln_gain, params.final_ln_bias);
  return reshape(h, {B, L, d});
}

MlmOutput mlm_loss(const ModelParams& params, const Batch& batch, const ForwardOptions& options) {
  MlmOutput out;
  for (std::size_t i = 0; i < batch.targets.size(); ++i) {
    if (batch.targets[i] == kNoTarget) continue;
    out.positions.push_back(i);
    out.targets.push_back(batch.targets[i]);
  }
  if (out.positions.empty()) throw Error("no MLM targets");
  Tensor hidden = forward_encoder(params, batch, options);
  Tensor rows = gather_rows(hidden, out.positions);
  out.logits = add_bias(matmul(rows, transpose(params.token_embedding)), params.mlm_bias);
  out.loss = cross_entropy(out.logits, out.targets);
  return out;
}

Tensor classifier_logits(const ModelParams& params, const Batch& batch,
                         const ForwardOptions& options) {
  Tensor hidden = forward_encoder(params, batch, options);
  std::vector<std::size_t> cls_rows(batch.batch_size);
  for (std::size_t b = 0; b < batch.batch_size; ++b) cls_rows[b] = b * batch.seq_len;
  return add_bias(matmul(gather_rows(hidden, cls_rows), params.cls_weight), params.cls_bias);
}

std::vector<double> classify(const ModelParams& params, const Batch& batch) {
  NoGradGuard no_grad;
  Tensor p = sigmoid(classifier_logits(params, batch.trimmed()));
  return {p.data().begin(), p.data().end()};
}

void save_model(const std::string& path, const ModelParams& params) {
  save_checkpoint(path, params.named());
  std::ofstream cfg(path + ".cfg");
  if (!cfg) throw Error("cannot write " + path + ".cfg");
  FlatConfig flat;
  store_model_config(params.config(), flat);
  flat.write(cfg);
}

ModelParams load_model(const std::string& path) {
  FlatConfig flat = FlatConfig::load(path + ".cfg");
  ModelParams params(read_model_config(flat), 0);
  load_checkpoint(path, params.named());
  return params;
}

}  // namespace traject
