#include "traject/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace traject {

namespace {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<Matrix>;
using ConstMatMap = Eigen::Map<const Matrix>;
using Stride = Eigen::OuterStride<>;
using BlockMap = Eigen::Map<Matrix, 0, Stride>;
using ConstBlockMap = Eigen::Map<const Matrix, 0, Stride>;

thread_local bool g_grad_enabled = true;
#ifdef NDEBUG
std::atomic<bool> g_finite_checks{false};
#else
std::atomic<bool> g_finite_checks{true};
#endif

using NodePtr = std::shared_ptr<detail::Node>;

MatMap as_matrix(std::vector<double>& v, std::size_t rows, std::size_t cols) {
  return MatMap(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

ConstMatMap as_matrix(const std::vector<double>& v, std::size_t rows, std::size_t cols) {
  return ConstMatMap(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

void check_finite(const char* op, const std::vector<double>& v) {
  if (!g_finite_checks.load(std::memory_order_relaxed)) return;
  for (double x : v) {
    if (!std::isfinite(x)) throw Error(std::string(op) + ": non-finite value");
  }
}

// Builds an op result. The backward closure receives the result node; it only
// runs when some input needs a gradient.
Tensor make_result(const char* op, Shape shape, std::vector<double> value,
                   std::vector<NodePtr> inputs, std::function<void(detail::Node&)> backward) {
  check_finite(op, value);
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& in : inputs) needs = needs || in->requires_grad;
  }
  if (needs) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw Error(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " +
              shape_string(b));
}

void require_defined(const char* op, const Tensor& t) {
  if (!t.defined()) throw Error(std::string(op) + ": undefined tensor");
}

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "," : "") << shape[i];
  out << ']';
  return out.str();
}

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = shape_size(shape);
  return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape.empty()) throw Error("tensor shape must have rank >= 1");
  for (auto d : shape) {
    if (d == 0) throw Error("tensor dimensions must be positive: " + shape_string(shape));
  }
  if (shape_size(shape) != values.size()) {
    throw Error("tensor data size " + std::to_string(values.size()) + " does not match shape " +
                shape_string(shape));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double v, bool requires_grad) { return from({1}, {v}, requires_grad); }

double Tensor::item() const {
  if (size() != 1) throw Error("item() on tensor of shape " + shape_string(shape()));
  return node_->value[0];
}

std::span<double> Tensor::grad() { return node_->grad_buffer(); }

void Tensor::zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

Tensor Tensor::clone(bool requires_grad) const {
  return from(shape(), node_->value, requires_grad);
}

void backward(const Tensor& root) {
  require_defined("backward", root);
  if (root.size() != 1) throw Error("backward requires a scalar, got " + shape_string(root.shape()));
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{root.node(), 0}};
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }
void set_finite_checks(bool enabled) { g_finite_checks.store(enabled); }

// ---------------------------------------------------------------------------
// Ops

Tensor reshape(const Tensor& a, Shape shape) {
  require_defined("reshape", a);
  if (shape_size(shape) != a.size()) shape_error("reshape", a.shape(), shape);
  auto* an = a.node();
  return make_result("reshape", std::move(shape), an->value, {a.node_ptr()},
                     [an](detail::Node& self) {
                       auto& g = an->grad_buffer();
                       for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                     });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined("matmul", a);
  require_defined("matmul", b);
  if (b.rank() != 2 || a.cols() != b.shape()[0]) shape_error("matmul", a.shape(), b.shape());
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(m * n);
  as_matrix(out, m, n).noalias() = as_matrix(a.node()->value, m, k) * as_matrix(b.node()->value, k, n);
  Shape shape = a.shape();
  shape.back() = n;
  auto* an = a.node();
  auto* bn = b.node();
  return make_result("matmul", std::move(shape), std::move(out), {a.node_ptr(), b.node_ptr()},
                     [an, bn, m, k, n](detail::Node& self) {
                       auto dc = as_matrix(std::as_const(self.grad), m, n);
                       if (an->requires_grad) {
                         as_matrix(an->grad_buffer(), m, k).noalias() +=
                             dc * as_matrix(std::as_const(bn->value), k, n).transpose();
                       }
                       if (bn->requires_grad) {
                         as_matrix(bn->grad_buffer(), k, n).noalias() +=
                             as_matrix(std::as_const(an->value), m, k).transpose() * dc;
                       }
                     });
}

Tensor transpose(const Tensor& a) {
  require_defined("transpose", a);
  if (a.rank() != 2) throw Error("transpose: expected 2-D tensor, got " + shape_string(a.shape()));
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<double> out(m * n);
  as_matrix(out, n, m) = as_matrix(a.node()->value, m, n).transpose();
  auto* an = a.node();
  return make_result("transpose", {n, m}, std::move(out), {a.node_ptr()},
                     [an, m, n](detail::Node& self) {
                       as_matrix(an->grad_buffer(), m, n) +=
                           as_matrix(std::as_const(self.grad), n, m).transpose();
                     });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_defined("add", a);
  require_defined("add", b);
  if (a.shape() != b.shape()) shape_error("add", a.shape(), b.shape());
  std::vector<double> out(a.size());
  const auto& av = a.node()->value;
  const auto& bv = b.node()->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  auto* an = a.node();
  auto* bn = b.node();
  return make_result("add", a.shape(), std::move(out), {a.node_ptr(), b.node_ptr()},
                     [an, bn](detail::Node& self) {
                       for (auto* in : {an, bn}) {
                         if (!in->requires_grad) continue;
                         auto& g = in->grad_buffer();
                         for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                       }
                     });
}

Tensor add_bias(const Tensor& a, const Tensor& bias) {
  require_defined("add_bias", a);
  require_defined("add_bias", bias);
  if (bias.size() != a.cols()) shape_error("add_bias", a.shape(), bias.shape());
  const std::size_t rows = a.rows(), cols = a.cols();
  std::vector<double> out = a.node()->value;
  const auto& bv = bias.node()->value;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += bv[c];
  }
  auto* an = a.node();
  auto* bn = bias.node();
  return make_result("add_bias", a.shape(), std::move(out), {a.node_ptr(), bias.node_ptr()},
                     [an, bn, rows, cols](detail::Node& self) {
                       if (an->requires_grad) {
                         auto& g = an->grad_buffer();
                         for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                       }
                       if (bn->requires_grad) {
                         auto& g = bn->grad_buffer();
                         for (std::size_t r = 0; r < rows; ++r) {
                           for (std::size_t c = 0; c < cols; ++c) g[c] += self.grad[r * cols + c];
                         }
                       }
                     });
}

Tensor scale(const Tensor& a, double s) {
  require_defined("scale", a);
  std::vector<double> out = a.node()->value;
  for (auto& x : out) x *= s;
  auto* an = a.node();
  return make_result("scale", a.shape(), std::move(out), {a.node_ptr()},
                     [an, s](detail::Node& self) {
                       auto& g = an->grad_buffer();
                       for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
                     });
}

Tensor sum(const Tensor& a) {
  require_defined("sum", a);
  const auto& v = a.node()->value;
  double total = std::accumulate(v.begin(), v.end(), 0.0);
  auto* an = a.node();
  return make_result("sum", {1}, {total}, {a.node_ptr()}, [an](detail::Node& self) {
    auto& g = an->grad_buffer();
    for (auto& x : g) x += self.grad[0];
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw Error("concat_cols: no inputs");
  const std::size_t rows = parts[0].rows();
  std::size_t total = 0;
  std::vector<NodePtr> inputs;
  for (const auto& p : parts) {
    require_defined("concat_cols", p);
    if (p.rows() != rows) shape_error("concat_cols", parts[0].shape(), p.shape());
    total += p.cols();
    inputs.push_back(p.node_ptr());
  }
  std::vector<double> out(rows * total);
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const auto& v = p.node()->value;
    const std::size_t c = p.cols();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(r * c), c,
                  out.begin() + static_cast<std::ptrdiff_t>(r * total + offset));
    }
    offset += c;
  }
  Shape shape = parts[0].shape();
  shape.back() = total;
  std::vector<detail::Node*> raw;
  for (const auto& p : parts) raw.push_back(p.node());
  return make_result("concat_cols", std::move(shape), std::move(out), std::move(inputs),
                     [raw, offsets, rows, total](detail::Node& self) {
                       for (std::size_t i = 0; i < raw.size(); ++i) {
                         if (!raw[i]->requires_grad) continue;
                         const std::size_t c = raw[i]->shape.back();
                         auto& g = raw[i]->grad_buffer();
                         for (std::size_t r = 0; r < rows; ++r) {
                           for (std::size_t j = 0; j < c; ++j) {
                             g[r * c + j] += self.grad[r * total + offsets[i] + j];
                           }
                         }
                       }
                     });
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  require_defined("slice_cols", a);
  if (begin >= end || end > a.cols()) {
    throw Error("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(end) +
                ") invalid for shape " + shape_string(a.shape()));
  }
  const std::size_t rows = a.rows(), cols = a.cols(), width = end - begin;
  std::vector<double> out(rows * width);
  const auto& v = a.node()->value;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < width; ++j) out[r * width + j] = v[r * cols + begin + j];
  }
  Shape shape = a.shape();
  shape.back() = width;
  auto* an = a.node();
  return make_result("slice_cols", std::move(shape), std::move(out), {a.node_ptr()},
                     [an, rows, cols, begin, width](detail::Node& self) {
                       auto& g = an->grad_buffer();
                       for (std::size_t r = 0; r < rows; ++r) {
                         for (std::size_t j = 0; j < width; ++j) {
                           g[r * cols + begin + j] += self.grad[r * width + j];
                         }
                       }
                     });
}

Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& rows) {
  require_defined("gather_rows", a);
  if (rows.empty()) throw Error("gather_rows: empty row list");
  const std::size_t cols = a.cols(), n = a.rows();
  std::vector<double> out(rows.size() * cols);
  const auto& v = a.node()->value;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n) throw Error("gather_rows: row " + std::to_string(rows[i]) + " out of range");
    std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(rows[i] * cols), cols,
                out.begin() + static_cast<std::ptrdiff_t>(i * cols));
  }
  auto* an = a.node();
  return make_result("gather_rows", {rows.size(), cols}, std::move(out), {a.node_ptr()},
                     [an, rows, cols](detail::Node& self) {
                       auto& g = an->grad_buffer();
                       for (std::size_t i = 0; i < rows.size(); ++i) {
                         for (std::size_t j = 0; j < cols; ++j) {
                           g[rows[i] * cols + j] += self.grad[i * cols + j];
                         }
                       }
                     });
}

Tensor embedding_lookup(const Tensor& table, std::span<const int> ids) {
  require_defined("embedding_lookup", table);
  if (table.rank() != 2) throw Error("embedding_lookup: table must be 2-D");
  const std::size_t n = table.shape()[0], d = table.shape()[1];
  std::vector<std::size_t> rows(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= n) {
      throw Error("embedding_lookup: id " + std::to_string(ids[i]) + " out of range [0," +
                  std::to_string(n) + ")");
    }
    rows[i] = static_cast<std::size_t>(ids[i]);
  }
  (void)d;
  return gather_rows(table, rows);
}

Tensor softmax(const Tensor& a) {
  std::vector<int> all(a.cols(), 1);
  return masked_softmax(a, all, a.rows());
}

Tensor masked_softmax(const Tensor& a, std::span<const int> key_mask, std::size_t block_rows) {
  require_defined("masked_softmax", a);
  const std::size_t rows = a.rows(), cols = a.cols();
  if (block_rows == 0 || rows % block_rows != 0 ||
      key_mask.size() != (rows / block_rows) * cols) {
    throw Error("masked_softmax: mask of size " + std::to_string(key_mask.size()) +
                " does not fit shape " + shape_string(a.shape()));
  }
  const auto& v = a.node()->value;
  std::vector<double> out(rows * cols, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const int* mask = key_mask.data() + (r / block_rows) * cols;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cols; ++c) {
      if (mask[c]) mx = std::max(mx, v[r * cols + c]);
    }
    if (!std::isfinite(mx)) throw Error("masked_softmax: row with every key masked");
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      if (mask[c]) z += (out[r * cols + c] = std::exp(v[r * cols + c] - mx));
    }
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] /= z;
  }
  auto* an = a.node();
  return make_result("masked_softmax", a.shape(), std::move(out), {a.node_ptr()},
                     [an, rows, cols](detail::Node& self) {
                       auto& g = an->grad_buffer();
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* y = self.value.data() + r * cols;
                         const double* dy = self.grad.data() + r * cols;
                         double dot = 0.0;
                         for (std::size_t c = 0; c < cols; ++c) dot += y[c] * dy[c];
                         for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += y[c] * (dy[c] - dot);
                       }
                     });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_defined("layer_norm", x);
  const std::size_t rows = x.rows(), cols = x.cols();
  if (gain.size() != cols) shape_error("layer_norm", x.shape(), gain.shape());
  if (bias.size() != cols) shape_error("layer_norm", x.shape(), bias.shape());
  const auto& v = x.node()->value;
  const auto& gv = gain.node()->value;
  const auto& bv = bias.node()->value;
  std::vector<double> out(rows * cols), xhat(rows * cols), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = v.data() + r * cols;
    double mu = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mu += row[c];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<double>(cols);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < cols; ++c) {
      double h = (row[c] - mu) * inv_std[r];
      xhat[r * cols + c] = h;
      out[r * cols + c] = gv[c] * h + bv[c];
    }
  }
  auto* xn = x.node();
  auto* gn = gain.node();
  auto* bn = bias.node();
  return make_result(
      "layer_norm", x.shape(), std::move(out), {x.node_ptr(), gain.node_ptr(), bias.node_ptr()},
      [xn, gn, bn, rows, cols, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          detail::Node& self) {
        const auto& dy = self.grad;
        if (gn->requires_grad || bn->requires_grad) {
          auto& gg = gn->grad_buffer();
          auto& gb = bn->grad_buffer();
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < cols; ++c) {
              gg[c] += dy[r * cols + c] * xhat[r * cols + c];
              gb[c] += dy[r * cols + c];
            }
          }
        }
        if (!xn->requires_grad) return;
        auto& gx = xn->grad_buffer();
        const auto& gv = gn->value;
        const double inv_n = 1.0 / static_cast<double>(cols);
        for (std::size_t r = 0; r < rows; ++r) {
          double mean_d = 0.0, mean_dx = 0.0;
          for (std::size_t c = 0; c < cols; ++c) {
            double d = dy[r * cols + c] * gv[c];
            mean_d += d;
            mean_dx += d * xhat[r * cols + c];
          }
          mean_d *= inv_n;
          mean_dx *= inv_n;
          for (std::size_t c = 0; c < cols; ++c) {
            double d = dy[r * cols + c] * gv[c];
            gx[r * cols + c] += inv_std[r] * (d - mean_d - xhat[r * cols + c] * mean_dx);
          }
        }
      });
}

Tensor gelu(const Tensor& a) {
  require_defined("gelu", a);
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  const auto& v = a.node()->value;
  std::vector<double> out(v.size()), th(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    double x = v[i];
    th[i] = std::tanh(kC * (x + kA * x * x * x));
    out[i] = 0.5 * x * (1.0 + th[i]);
  }
  auto* an = a.node();
  return make_result("gelu", a.shape(), std::move(out), {a.node_ptr()},
                     [an, th = std::move(th)](detail::Node& self) {
                       auto& g = an->grad_buffer();
                       const auto& v = an->value;
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         double x = v[i], t = th[i];
                         double d = 0.5 * (1.0 + t) +
                                    0.5 * x * (1.0 - t * t) * kC * (1.0 + 3.0 * kA * x * x);
                         g[i] += d * self.grad[i];
                       }
                     });
}

Tensor sigmoid(const Tensor& a) {
  require_defined("sigmoid", a);
  std::vector<double> out(a.size());
  const auto& v = a.node()->value;
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-v[i]));
  auto* an = a.node();
  return make_result("sigmoid", a.shape(), std::move(out), {a.node_ptr()},
                     [an](detail::Node& self) {
                       auto& g = an->grad_buffer();
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         double y = self.value[i];
                         g[i] += y * (1.0 - y) * self.grad[i];
                       }
                     });
}

Tensor dropout(const Tensor& a, double rate, std::uint64_t seed) {
  require_defined("dropout", a);
  if (rate < 0.0 || rate >= 1.0) throw Error("dropout: rate must be in [0, 1)");
  if (rate == 0.0) return a;
  Rng rng(seed);
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> mask(a.size());
  for (auto& m : mask) m = uniform01(rng) < rate ? 0.0 : keep_scale;
  std::vector<double> out(a.size());
  const auto& v = a.node()->value;
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] * mask[i];
  auto* an = a.node();
  return make_result("dropout", a.shape(), std::move(out), {a.node_ptr()},
                     [an, mask = std::move(mask)](detail::Node& self) {
                       auto& g = an->grad_buffer();
                       for (std::size_t i = 0; i < g.size(); ++i) g[i] += mask[i] * self.grad[i];
                     });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  require_defined("cross_entropy", logits);
  const std::size_t rows = logits.rows(), cols = logits.cols();
  if (targets.size() != rows) {
    throw Error("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                std::to_string(rows) + " rows");
  }
  const auto& v = logits.node()->value;
  std::vector<double> probs(rows * cols);
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= cols) {
      throw Error("cross_entropy: target " + std::to_string(targets[r]) + " out of range");
    }
    const double* row = v.data() + r * cols;
    double mx = *std::max_element(row, row + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += (probs[r * cols + c] = std::exp(row[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) probs[r * cols + c] /= z;
    loss += -(row[targets[r]] - mx - std::log(z));
  }
  loss /= static_cast<double>(rows);
  auto* ln = logits.node();
  std::vector<int> t(targets.begin(), targets.end());
  return make_result("cross_entropy", {1}, {loss}, {logits.node_ptr()},
                     [ln, rows, cols, t = std::move(t), probs = std::move(probs)](detail::Node& self) {
                       auto& g = ln->grad_buffer();
                       const double s = self.grad[0] / static_cast<double>(rows);
                       for (std::size_t r = 0; r < rows; ++r) {
                         for (std::size_t c = 0; c < cols; ++c) {
                           double onehot = static_cast<int>(c) == t[r] ? 1.0 : 0.0;
                           g[r * cols + c] += s * (probs[r * cols + c] - onehot);
                         }
                       }
                     });
}

Tensor bce_with_logits(const Tensor& logits, std::span<const double> labels) {
  require_defined("bce_with_logits", logits);
  const std::size_t n = logits.size();
  if (labels.size() != n) {
    throw Error("bce_with_logits: " + std::to_string(labels.size()) + " labels for " +
                std::to_string(n) + " logits");
  }
  const auto& v = logits.node()->value;
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double z = v[i];
    loss += std::max(z, 0.0) - z * labels[i] + std::log1p(std::exp(-std::abs(z)));
  }
  loss /= static_cast<double>(n);
  auto* ln = logits.node();
  std::vector<double> y(labels.begin(), labels.end());
  return make_result("bce_with_logits", {1}, {loss}, {logits.node_ptr()},
                     [ln, n, y = std::move(y)](detail::Node& self) {
                       auto& g = ln->grad_buffer();
                       const double s = self.grad[0] / static_cast<double>(n);
                       for (std::size_t i = 0; i < n; ++i) {
                         double p = 1.0 / (1.0 + std::exp(-ln->value[i]));
                         g[i] += s * (p - y[i]);
                       }
                     });
}

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            std::span<const int> key_mask, const AttentionSpec& spec,
                            std::vector<double>* weights_out) {
  require_defined("multi_head_attention", q);
  require_defined("multi_head_attention", k);
  require_defined("multi_head_attention", v);
  const std::size_t B = spec.batch, L = spec.seq_len, H = spec.heads;
  const std::size_t d = q.cols();
  if (q.shape() != k.shape()) shape_error("multi_head_attention", q.shape(), k.shape());
  if (q.shape() != v.shape()) shape_error("multi_head_attention", q.shape(), v.shape());
  if (H == 0 || d % H != 0) throw Error("multi_head_attention: d not divisible by heads");
  if (q.rows() != B * L || key_mask.size() != B * L) {
    throw Error("multi_head_attention: batch layout does not match " + shape_string(q.shape()));
  }
  if (spec.dropout_rate < 0.0 || spec.dropout_rate >= 1.0) {
    throw Error("multi_head_attention: dropout rate must be in [0, 1)");
  }
  const std::size_t dh = d / H;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const bool use_dropout = spec.dropout_rate > 0.0;
  const double keep_scale = use_dropout ? 1.0 / (1.0 - spec.dropout_rate) : 1.0;

  // probs: softmax weights; used: weights after dropout (alias when no dropout)
  auto probs = std::make_shared<std::vector<double>>(B * H * L * L, 0.0);
  auto used = use_dropout ? std::make_shared<std::vector<double>>(B * H * L * L, 0.0) : probs;
  std::vector<double> out(B * L * d, 0.0);
  Rng rng(spec.dropout_seed);
  const auto& qv = q.node()->value;
  const auto& kv = k.node()->value;
  const auto& vv = v.node()->value;
  const auto sd = static_cast<Eigen::Index>(d);
  const auto sL = static_cast<Eigen::Index>(L);
  const auto sdh = static_cast<Eigen::Index>(dh);

  Matrix scores(sL, sL);
  for (std::size_t b = 0; b < B; ++b) {
    const int* mask = key_mask.data() + b * L;
    bool any = std::any_of(mask, mask + L, [](int m) { return m != 0; });
    if (!any) throw Error("multi_head_attention: sequence with every key masked");
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t base = b * L * d + h * dh;
      ConstBlockMap Q(qv.data() + base, sL, sdh, Stride(sd));
      ConstBlockMap K(kv.data() + base, sL, sdh, Stride(sd));
      ConstBlockMap V(vv.data() + base, sL, sdh, Stride(sd));
      scores.noalias() = Q * K.transpose();
      double* P = probs->data() + (b * H + h) * L * L;
      for (std::size_t i = 0; i < L; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < L; ++j) {
          if (mask[j]) mx = std::max(mx, scores(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) * inv_sqrt);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < L; ++j) {
          if (!mask[j]) continue;
          double e = std::exp(scores(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) * inv_sqrt - mx);
          P[i * L + j] = e;
          z += e;
        }
        for (std::size_t j = 0; j < L; ++j) P[i * L + j] /= z;
      }
      double* U = used->data() + (b * H + h) * L * L;
      if (use_dropout) {
        for (std::size_t i = 0; i < L * L; ++i) {
          U[i] = uniform01(rng) < spec.dropout_rate ? 0.0 : P[i] * keep_scale;
        }
      }
      BlockMap O(out.data() + base, sL, sdh, Stride(sd));
      O.noalias() = ConstMatMap(U, sL, sL) * V;
    }
  }
  if (weights_out) *weights_out = *probs;

  auto* qn = q.node();
  auto* kn = k.node();
  auto* vn = v.node();
  return make_result(
      "multi_head_attention", q.shape(), std::move(out),
      {q.node_ptr(), k.node_ptr(), v.node_ptr()},
      [qn, kn, vn, probs, used, B, L, H, d, dh, inv_sqrt, use_dropout, keep_scale](
          detail::Node& self) {
        auto& gq = qn->grad_buffer();
        auto& gk = kn->grad_buffer();
        auto& gv = vn->grad_buffer();
        const auto sd = static_cast<Eigen::Index>(d);
        const auto sL = static_cast<Eigen::Index>(L);
        const auto sdh = static_cast<Eigen::Index>(dh);
        Matrix dU(sL, sL), dS(sL, sL);
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t h = 0; h < H; ++h) {
            const std::size_t base = b * L * d + h * dh;
            ConstBlockMap Q(qn->value.data() + base, sL, sdh, Stride(sd));
            ConstBlockMap K(kn->value.data() + base, sL, sdh, Stride(sd));
            ConstBlockMap V(vn->value.data() + base, sL, sdh, Stride(sd));
            ConstBlockMap dO(self.grad.data() + base, sL, sdh, Stride(sd));
            const double* P = probs->data() + (b * H + h) * L * L;
            ConstMatMap U(used->data() + (b * H + h) * L * L, sL, sL);

            dU.noalias() = dO * V.transpose();
            BlockMap(gv.data() + base, sL, sdh, Stride(sd)).noalias() += U.transpose() * dO;
            for (Eigen::Index i = 0; i < sL; ++i) {
              double dot = 0.0;
              for (Eigen::Index j = 0; j < sL; ++j) {
                double p = P[i * sL + j];
                double dp = dU(i, j);
                if (use_dropout) dp = U(i, j) == 0.0 ? 0.0 : dp * keep_scale;
                dS(i, j) = dp;
                dot += dp * p;
              }
              for (Eigen::Index j = 0; j < sL; ++j) {
                dS(i, j) = P[i * sL + j] * (dS(i, j) - dot) * inv_sqrt;
              }
            }
            BlockMap(gq.data() + base, sL, sdh, Stride(sd)).noalias() += dS * K;
            BlockMap(gk.data() + base, sL, sdh, Stride(sd)).noalias() += dS.transpose() * Q;
          }
        }
      });
}

}  // namespace traject
