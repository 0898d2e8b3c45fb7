#include <doctest.h>

#include <numeric>

#include "support.hpp"
#include "traject/tensor.hpp"

using namespace traject;
using testing::check_gradients;
using testing::random_tensor;

namespace {

// Contracts an op's output with fixed random weights so every output element
// influences the scalar being differentiated.
Tensor weighted_sum(const Tensor& out, std::uint64_t seed = 77) {
  Rng rng(seed);
  Tensor w = Tensor::from(out.shape(), testing::random_values(rng, out.size()));
  Tensor row = reshape(out, {1, out.size()});
  Tensor col = reshape(w, {out.size(), 1});
  return sum(matmul(row, col));
}

void expect_gradcheck(const std::function<Tensor()>& f, const std::vector<NamedTensor>& params,
                      double tol = 1e-4) {
  auto r = check_gradients(f, params);
  INFO("worst element " << r.worst << " rel err " << r.max_rel_error);
  CHECK(r.max_rel_error < tol);
}

}  // namespace

TEST_CASE("construction and shape errors") {
  CHECK_THROWS_AS(Tensor::from({2, 2}, {1, 2, 3}), Error);
  CHECK_THROWS_AS(Tensor::zeros({0, 3}), Error);
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({2, 3});
  CHECK_THROWS_WITH(matmul(a, b), doctest::Contains("[2,3]"));
  try {
    add(a, Tensor::zeros({3, 2}));
    FAIL("expected shape error");
  } catch (const Error& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[3,2]") != std::string::npos);
  }
}

TEST_CASE("forward values") {
  Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor x = Tensor::from({2, 2}, {1.5, -2, 3, 4});
  Tensor ex = matmul(eye, x);
  CHECK(std::vector<double>(ex.data().begin(), ex.data().end()) ==
        std::vector<double>{1.5, -2, 3, 4});

  auto s = softmax(Tensor::from({1, 4}, {0.3, 0.3, 0.3, 0.3}));
  for (double v : s.data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));

  CHECK(sigmoid(Tensor::scalar(0.0)).item() == 0.5);
  CHECK(gelu(Tensor::scalar(0.0)).item() == 0.0);
  CHECK(gelu(Tensor::scalar(1.0)).item() == doctest::Approx(0.8411919906082768).epsilon(1e-12));

  auto t = transpose(Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}));
  CHECK(t.shape() == Shape{3, 2});
  CHECK(t[1] == 4);

  auto c = concat_cols({Tensor::from({2, 1}, {1, 2}), Tensor::from({2, 2}, {3, 4, 5, 6})});
  CHECK(std::vector<double>(c.data().begin(), c.data().end()) ==
        std::vector<double>{1, 3, 4, 2, 5, 6});
  auto sl = slice_cols(c, 1, 3);
  CHECK(std::vector<double>(sl.data().begin(), sl.data().end()) ==
        std::vector<double>{3, 4, 5, 6});

  std::vector<int> ids = {2, 0};
  auto e = embedding_lookup(Tensor::from({3, 2}, {1, 2, 3, 4, 5, 6}), ids);
  CHECK(std::vector<double>(e.data().begin(), e.data().end()) == std::vector<double>{5, 6, 1, 2});
  std::vector<int> bad = {3};
  CHECK_THROWS_AS(embedding_lookup(Tensor::zeros({3, 2}), bad), Error);

  // Stable BCE at extreme logits.
  std::vector<double> y = {1.0, 0.0};
  auto bce = bce_with_logits(Tensor::from({2, 1}, {800.0, -800.0}), y);
  CHECK(bce.item() == doctest::Approx(0.0));
  CHECK(bce_with_logits(Tensor::from({1, 1}, {0.0}), std::vector<double>{1.0}).item() ==
        doctest::Approx(std::log(2.0)));

  std::vector<int> target = {1};
  CHECK(cross_entropy(Tensor::from({1, 3}, {-1e3, 1e3, -1e3}), target).item() ==
        doctest::Approx(0.0));
}

TEST_CASE("matmul gradient matches finite differences to 1e-6") {
  Rng rng(1);
  Tensor x = random_tensor(rng, {3, 3}, 1.0, false);
  Tensor w = random_tensor(rng, {3, 3});
  auto r = check_gradients([&] { return sum(matmul(x, w)); }, {{"w", w}});
  CHECK(r.max_rel_error < 1e-6);
  // d/dW sum(XW) = X^T 1: column sums of X broadcast over columns.
  w.zero_grad();
  backward(sum(matmul(x, w)));
  for (std::size_t i = 0; i < 3; ++i) {
    double colsum = x[0 * 3 + i] + x[1 * 3 + i] + x[2 * 3 + i];
    for (std::size_t j = 0; j < 3; ++j) CHECK(w.grad()[i * 3 + j] == doctest::Approx(colsum));
  }
}

TEST_CASE("gradcheck every differentiable op") {
  Rng rng(2024);
  Tensor a = random_tensor(rng, {3, 4});
  Tensor b = random_tensor(rng, {3, 4});
  Tensor m = random_tensor(rng, {4, 2});
  Tensor a3 = random_tensor(rng, {2, 3, 4});
  Tensor bias = random_tensor(rng, {4});
  Tensor gain = random_tensor(rng, {4});
  Tensor table = random_tensor(rng, {5, 4});

  SUBCASE("matmul rank 3") {
    expect_gradcheck([&] { return weighted_sum(matmul(a3, m)); }, {{"a3", a3}, {"m", m}});
  }
  SUBCASE("transpose") { expect_gradcheck([&] { return weighted_sum(transpose(a)); }, {{"a", a}}); }
  SUBCASE("add and scale") {
    expect_gradcheck([&] { return weighted_sum(add(scale(a, -1.7), b)); }, {{"a", a}, {"b", b}});
  }
  SUBCASE("add_bias") {
    expect_gradcheck([&] { return weighted_sum(add_bias(a3, bias)); }, {{"a3", a3}, {"bias", bias}});
  }
  SUBCASE("sum and mean") {
    expect_gradcheck([&] { return add(sum(a), scale(mean(b), 3.0)); }, {{"a", a}, {"b", b}});
  }
  SUBCASE("reshape") {
    expect_gradcheck([&] { return weighted_sum(reshape(a3, {6, 4})); }, {{"a3", a3}});
  }
  SUBCASE("concat and slice") {
    expect_gradcheck(
        [&] { return weighted_sum(slice_cols(concat_cols({a, b, a}), 2, 10)); },
        {{"a", a}, {"b", b}});
  }
  SUBCASE("gather_rows with repeats") {
    expect_gradcheck([&] { return weighted_sum(gather_rows(a, {2, 0, 2})); }, {{"a", a}});
  }
  SUBCASE("embedding_lookup with repeats") {
    std::vector<int> ids = {4, 1, 1, 0};
    expect_gradcheck([&] { return weighted_sum(embedding_lookup(table, ids)); }, {{"table", table}});
  }
  SUBCASE("softmax") { expect_gradcheck([&] { return weighted_sum(softmax(a)); }, {{"a", a}}); }
  SUBCASE("masked_softmax") {
    std::vector<int> key_mask = {1, 1, 0, 1, 1, 0, 0, 1};  // two blocks of 4 keys
    Tensor scores = random_tensor(rng, {2, 2, 4});
    expect_gradcheck([&] { return weighted_sum(masked_softmax(scores, key_mask, 2)); },
                     {{"scores", scores}});
  }
  SUBCASE("layer_norm") {
    expect_gradcheck([&] { return weighted_sum(layer_norm(a3, gain, bias, 1e-12)); },
                     {{"a3", a3}, {"gain", gain}, {"bias", bias}});
  }
  SUBCASE("gelu") { expect_gradcheck([&] { return weighted_sum(gelu(a)); }, {{"a", a}}); }
  SUBCASE("sigmoid") { expect_gradcheck([&] { return weighted_sum(sigmoid(a)); }, {{"a", a}}); }
  SUBCASE("dropout with a fixed seed") {
    expect_gradcheck([&] { return weighted_sum(dropout(a, 0.3, 5)); }, {{"a", a}});
  }
  SUBCASE("cross_entropy") {
    std::vector<int> targets = {0, 3, 1};
    expect_gradcheck([&] { return cross_entropy(a, targets); }, {{"a", a}});
  }
  SUBCASE("bce_with_logits") {
    Tensor logits = random_tensor(rng, {5, 1});
    std::vector<double> y = {1, 0, 0, 1, 1};
    expect_gradcheck([&] { return bce_with_logits(logits, y); }, {{"logits", logits}});
  }
  SUBCASE("multi_head_attention with padding and dropout") {
    Tensor q = random_tensor(rng, {2, 3, 4});
    Tensor k = random_tensor(rng, {2, 3, 4});
    Tensor v = random_tensor(rng, {2, 3, 4});
    std::vector<int> key_mask = {1, 1, 1, 1, 1, 0};
    AttentionSpec spec{2, 3, 2, 0.25, 42};
    expect_gradcheck([&] { return weighted_sum(multi_head_attention(q, k, v, key_mask, spec)); },
                     {{"q", q}, {"k", k}, {"v", v}});
  }
}

TEST_CASE("shared subexpressions accumulate gradients") {
  Tensor x = Tensor::from({1, 2}, {1.0, 2.0}, true);
  Tensor y = add(x, x);
  backward(add(sum(y), sum(x)));
  CHECK(x.grad()[0] == 3.0);
  CHECK(x.grad()[1] == 3.0);
  // A second backward pass adds to the existing gradient.
  backward(sum(x));
  CHECK(x.grad()[0] == 4.0);
  x.zero_grad();
  CHECK(x.grad()[0] == 0.0);
}

TEST_CASE("no-grad mode builds no graph") {
  Tensor x = Tensor::from({1, 2}, {1.0, 2.0}, true);
  NoGradGuard guard;
  CHECK_FALSE(grad_enabled());
  Tensor y = scale(x, 2.0);
  CHECK_FALSE(y.requires_grad());
  CHECK(y.node()->inputs.empty());
}

TEST_CASE("property: softmax and layer_norm invariants") {
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t rows = static_cast<std::size_t>(uniform_index(rng, 1, 5));
    const std::size_t cols = static_cast<std::size_t>(uniform_index(rng, 2, 9));
    Tensor x = random_tensor(rng, {rows, cols}, 1.0 + 5.0 * uniform01(rng), false);

    Tensor s = softmax(x);
    for (std::size_t r = 0; r < rows; ++r) {
      double total = 0.0;
      for (std::size_t c = 0; c < cols; ++c) {
        double p = s[r * cols + c];
        CHECK(p > 0.0);
        CHECK(p < 1.0);
        total += p;
      }
      CHECK(std::abs(total - 1.0) < 1e-9);
    }

    Tensor ones = Tensor::from({cols}, std::vector<double>(cols, 1.0));
    Tensor zeros = Tensor::zeros({cols});
    Tensor n = layer_norm(x, ones, zeros);
    for (std::size_t r = 0; r < rows; ++r) {
      double mu = 0.0, var = 0.0;
      for (std::size_t c = 0; c < cols; ++c) mu += n[r * cols + c];
      mu /= static_cast<double>(cols);
      for (std::size_t c = 0; c < cols; ++c) var += (n[r * cols + c] - mu) * (n[r * cols + c] - mu);
      var /= static_cast<double>(cols);
      CHECK(std::abs(mu) < 1e-9);
      CHECK(std::abs(var - 1.0) < 1e-6);
    }

    std::vector<int> key_mask(cols);
    for (auto& k : key_mask) k = uniform01(rng) < 0.7 ? 1 : 0;
    key_mask[0] = 1;
    Tensor ms = masked_softmax(x, key_mask, rows);
    for (std::size_t r = 0; r < rows; ++r) {
      double total = 0.0;
      for (std::size_t c = 0; c < cols; ++c) {
        if (!key_mask[c]) CHECK(ms[r * cols + c] == 0.0);
        total += ms[r * cols + c];
      }
      CHECK(std::abs(total - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("dropout is seed-deterministic and inverted") {
  Tensor x = Tensor::from({1, 1000}, std::vector<double>(1000, 1.0));
  Tensor a = dropout(x, 0.2, 9), b = dropout(x, 0.2, 9), c = dropout(x, 0.2, 10);
  CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
  CHECK_FALSE(std::equal(a.data().begin(), a.data().end(), c.data().begin()));
  std::size_t zeros = 0;
  for (double v : a.data()) {
    if (v == 0.0) ++zeros;
    else CHECK(v == doctest::Approx(1.25));
  }
  CHECK(zeros > 150);
  CHECK(zeros < 250);
  Tensor same = dropout(x, 0.0, 1);
  CHECK(std::equal(same.data().begin(), same.data().end(), x.data().begin()));
}

TEST_CASE("attention weights: rows sum to one, zero at padded keys") {
  Rng rng(3);
  const std::size_t B = 2, L = 5, H = 2, d = 6;
  Tensor q = random_tensor(rng, {B, L, d}, 1.0, false);
  Tensor k = random_tensor(rng, {B, L, d}, 1.0, false);
  Tensor v = random_tensor(rng, {B, L, d}, 1.0, false);
  std::vector<int> key_mask = {1, 1, 1, 0, 0, 1, 1, 1, 1, 1};
  std::vector<double> w;
  multi_head_attention(q, k, v, key_mask, {B, L, H, 0.0, 0}, &w);
  REQUIRE(w.size() == B * H * L * L);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t i = 0; i < L; ++i) {
        double total = 0.0;
        for (std::size_t j = 0; j < L; ++j) {
          double p = w[((b * H + h) * L + i) * L + j];
          if (!key_mask[b * L + j]) CHECK(p == 0.0);
          total += p;
        }
        CHECK(std::abs(total - 1.0) < 1e-9);
      }
}

TEST_CASE("fused attention equals the per-head reference") {
  Rng rng(4);
  const std::size_t L = 4, H = 2, d = 6, dh = d / H;
  Tensor q = random_tensor(rng, {1, L, d}, 1.0, false);
  Tensor k = random_tensor(rng, {1, L, d}, 1.0, false);
  Tensor v = random_tensor(rng, {1, L, d}, 1.0, false);
  std::vector<int> key_mask = {1, 1, 1, 0};
  Tensor fused = multi_head_attention(q, k, v, key_mask, {1, L, H, 0.0, 0});

  Tensor q2 = reshape(q, {L, d}), k2 = reshape(k, {L, d}), v2 = reshape(v, {L, d});
  std::vector<Tensor> heads;
  for (std::size_t h = 0; h < H; ++h) {
    Tensor qh = slice_cols(q2, h * dh, (h + 1) * dh);
    Tensor kh = slice_cols(k2, h * dh, (h + 1) * dh);
    Tensor vh = slice_cols(v2, h * dh, (h + 1) * dh);
    Tensor scores = scale(matmul(qh, transpose(kh)), 1.0 / std::sqrt(static_cast<double>(dh)));
    heads.push_back(matmul(masked_softmax(scores, key_mask, L), vh));
  }
  Tensor reference = concat_cols(heads);
  for (std::size_t i = 0; i < reference.size(); ++i) {
    CHECK(std::abs(fused[i] - reference[i]) < 1e-10);
  }
}
