#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "traject/common.hpp"

namespace traject {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_size(const Shape& shape);

namespace detail {
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};
}  // namespace detail

// Reference-semantics handle to a node of the autograd graph. Copies share the
// same storage; use clone() for an independent copy of the values.
//
// Tensors of rank >= 2 are viewed as a matrix of rows() x cols(), where cols()
// is the last dimension. Row-wise ops (softmax, layer_norm, add_bias) and
// matmul operate on that view.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->value.size(); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t cols() const { return node_->shape.back(); }
  std::size_t rows() const { return size() / cols(); }

  std::span<double> data() { return node_->value; }
  std::span<const double> data() const { return node_->value; }
  double operator[](std::size_t i) const { return node_->value[i]; }
  double item() const;

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  // Gradient buffer; zeros if nothing has been accumulated yet.
  std::span<double> grad();
  void zero_grad();

  Tensor clone(bool requires_grad = false) const;

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// Reverse-mode sweep from a scalar; gradients accumulate into every reachable
// tensor with requires_grad.
void backward(const Tensor& root);

// While alive on a thread, ops on that thread record no graph.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// When set, every op checks its outputs for NaN/Inf and throws. Defaults to
// on in debug builds.
void set_finite_checks(bool enabled);

// --- ops --------------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape);     // same element count
Tensor matmul(const Tensor& a, const Tensor& b);  // [..., k] x [k, n]
Tensor transpose(const Tensor& a);                // 2-D only
Tensor add(const Tensor& a, const Tensor& b);     // equal shapes
Tensor add_bias(const Tensor& a, const Tensor& bias);  // bias [cols] per row
Tensor scale(const Tensor& a, double s);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor concat_cols(const std::vector<Tensor>& parts);  // along last axis
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& rows);
Tensor embedding_lookup(const Tensor& table, std::span<const int> ids);
Tensor softmax(const Tensor& a);  // row-wise
// Row-wise softmax where column j is excluded when key_mask[j] == 0. Rows of
// `a` are grouped into blocks of block_rows; block b uses
// key_mask[b*cols .. (b+1)*cols).
Tensor masked_softmax(const Tensor& a, std::span<const int> key_mask, std::size_t block_rows);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-12);
Tensor gelu(const Tensor& a);  // tanh approximation
Tensor sigmoid(const Tensor& a);
Tensor dropout(const Tensor& a, double rate, std::uint64_t seed);

// Mean cross-entropy of row-wise softmax(logits) against class targets.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);
// Mean binary cross-entropy of sigmoid(logits) (one logit per row) vs labels.
Tensor bce_with_logits(const Tensor& logits, std::span<const double> labels);

struct AttentionSpec {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::size_t heads = 1;
  double dropout_rate = 0.0;  // applied to attention weights
  std::uint64_t dropout_seed = 0;
};

// Fused multi-head scaled dot-product attention over q, k, v of shape
// [batch*seq_len, d]. Keys with key_mask == 0 receive zero weight. Returns the
// concatenated head outputs [batch*seq_len, d]. If weights_out is non-null it
// receives the (pre-dropout) attention weights laid out [batch, heads, L, L].
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            std::span<const int> key_mask, const AttentionSpec& spec,
                            std::vector<double>* weights_out = nullptr);

}  // namespace traject
