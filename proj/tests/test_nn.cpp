#include <cmath>
#include <vector>

#include "doctest.h"
#include "gpnr/nn.hpp"
#include "test_util.hpp"

using namespace gpnr;
using gpnr::testing::check_close;
using gpnr::testing::max_abs_diff;
using gpnr::testing::random_tensor;

namespace {

// Independent scalar GELU used as the oracle for mlp tests.
double gelu_ref(double x) {
  const double u = 0.7978845608028654 * (x + 0.044715 * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

// Brute-force multi-head attention oracle, double everywhere.
std::vector<double> attention_ref(const std::vector<double>& x, int s, int d, int heads,
                                  const std::vector<double>& wq,
                                  const std::vector<double>& wk,
                                  const std::vector<double>& wv,
                                  const std::vector<double>& wo) {
  const int dh = d / heads;
  auto proj = [&](const std::vector<double>& w) {
    std::vector<double> r(static_cast<size_t>(s) * d, 0.0);
    for (int i = 0; i < s; ++i)
      for (int j = 0; j < d; ++j)
        for (int k = 0; k < d; ++k) r[i * d + j] += x[i * d + k] * w[k * d + j];
    return r;
  };
  const auto q = proj(wq), k = proj(wk), v = proj(wv);
  std::vector<double> ctx(static_cast<size_t>(s) * d, 0.0);
  for (int h = 0; h < heads; ++h)
    for (int i = 0; i < s; ++i) {
      std::vector<double> logits(static_cast<size_t>(s));
      for (int j = 0; j < s; ++j) {
        double dot = 0;
        for (int e = 0; e < dh; ++e)
          dot += q[i * d + h * dh + e] * k[j * d + h * dh + e];
        logits[static_cast<size_t>(j)] = dot / std::sqrt(double(dh));
      }
      double mx = logits[0];
      for (double l : logits) mx = std::max(mx, l);
      double sum = 0;
      for (double& l : logits) {
        l = std::exp(l - mx);
        sum += l;
      }
      for (int j = 0; j < s; ++j)
        for (int e = 0; e < dh; ++e)
          ctx[i * d + h * dh + e] += logits[static_cast<size_t>(j)] / sum *
                                     v[j * d + h * dh + e];
    }
  std::vector<double> out(static_cast<size_t>(s) * d, 0.0);
  for (int i = 0; i < s; ++i)
    for (int j = 0; j < d; ++j)
      for (int kk = 0; kk < d; ++kk) out[i * d + j] += ctx[i * d + kk] * wo[kk * d + j];
  return out;
}

}  // namespace

TEST_SUITE_BEGIN("nn");

TEST_CASE("layer_norm examples") {
  auto gain = Tensor<double>::from_data({3}, {1, 1, 1});
  auto bias = Tensor<double>::from_data({3}, {0, 0, 0});
  // constant row -> zeros
  auto y = layer_norm(Tensor<double>::from_data({1, 3}, {5, 5, 5}), gain, bias);
  check_close(y, {0, 0, 0}, 1e-12);

  // [-1, 1]: already zero-mean unit-variance, up to the eps correction
  auto y2 = layer_norm(Tensor<double>::from_data({1, 2}, {-1, 1}),
                       Tensor<double>::from_data({2}, {1, 1}),
                       Tensor<double>::from_data({2}, {0, 0}), 1e-10);
  check_close(y2, {-1, 1}, 1e-9);

  // gain 0 -> bias
  auto y3 = layer_norm(Tensor<double>::from_data({1, 3}, {2, 7, -1}),
                       Tensor<double>::from_data({3}, {0, 0, 0}),
                       Tensor<double>::from_data({3}, {0.3, 0.4, 0.5}));
  check_close(y3, {0.3, 0.4, 0.5}, 1e-12);
}

TEST_CASE("layer_norm rejects mismatched gain") {
  auto x = Tensor<double>::zeros({2, 3});
  CHECK_THROWS_AS(layer_norm(x, Tensor<double>::zeros({2}), Tensor<double>::zeros({3})),
                  config_error);
}

TEST_CASE("self_attention with one row reduces to Wo Wv x") {
  RngStream rng(31);
  const int d = 4;
  auto x = random_tensor<double>(rng, {1, d});
  auto wq = random_tensor<double>(rng, {d, d});
  auto wk = random_tensor<double>(rng, {d, d});
  auto wv = random_tensor<double>(rng, {d, d});
  auto wo = random_tensor<double>(rng, {d, d});
  auto y = self_attention(x, 2, wq, wk, wv, wo);
  auto want = matmul(matmul(x, wv), wo);
  CHECK(max_abs_diff(y, want) < 1e-12);
}

TEST_CASE("self_attention matches brute-force oracle") {
  RngStream rng(33);
  const int s = 5, d = 8, heads = 4;
  auto x = random_tensor<double>(rng, {s, d});
  auto wq = random_tensor<double>(rng, {d, d});
  auto wk = random_tensor<double>(rng, {d, d});
  auto wv = random_tensor<double>(rng, {d, d});
  auto wo = random_tensor<double>(rng, {d, d});
  auto y = self_attention(x, heads, wq, wk, wv, wo);
  auto want = attention_ref(
      std::vector<double>(x.data(), x.data() + x.numel()), s, d, heads,
      {wq.data(), wq.data() + wq.numel()}, {wk.data(), wk.data() + wk.numel()},
      {wv.data(), wv.data() + wv.numel()}, {wo.data(), wo.data() + wo.numel()});
  for (int64_t i = 0; i < y.numel(); ++i)
    CHECK(y.data()[i] == doctest::Approx(want[static_cast<size_t>(i)]).epsilon(1e-10));
}

TEST_CASE("self_attention is permutation-equivariant") {
  RngStream rng(35);
  const int s = 6, d = 8;
  auto x = random_tensor<float>(rng, {s, d});
  auto wq = random_tensor<float>(rng, {d, d});
  auto wk = random_tensor<float>(rng, {d, d});
  auto wv = random_tensor<float>(rng, {d, d});
  auto wo = random_tensor<float>(rng, {d, d});
  auto y = self_attention(x, 4, wq, wk, wv, wo);

  const std::vector<int> perm = {3, 0, 5, 1, 4, 2};
  std::vector<float> xp(static_cast<size_t>(s) * d);
  for (int i = 0; i < s; ++i)
    for (int j = 0; j < d; ++j)
      xp[i * d + j] = x.data()[perm[static_cast<size_t>(i)] * d + j];
  auto yp = self_attention(Tensor<float>::from_data({s, d}, xp), 4, wq, wk, wv, wo);
  for (int i = 0; i < s; ++i)
    for (int j = 0; j < d; ++j)
      CHECK(std::fabs(yp.data()[i * d + j] -
                      y.data()[perm[static_cast<size_t>(i)] * d + j]) <= 1e-6);
}

TEST_CASE("self_attention rejects indivisible head count") {
  auto x = Tensor<float>::zeros({2, 6});
  auto w = Tensor<float>::zeros({6, 6});
  CHECK_THROWS_AS(self_attention(x, 4, w, w, w, w), config_error);
}

TEST_CASE("self_attention batches match per-sequence results") {
  RngStream rng(36);
  const int s = 3, d = 4;
  auto w = [&] { return random_tensor<double>(rng, {d, d}); };
  auto wq = w(), wk = w(), wv = w(), wo = w();
  auto x0 = random_tensor<double>(rng, {s, d});
  auto x1 = random_tensor<double>(rng, {s, d});
  std::vector<double> both(x0.data(), x0.data() + x0.numel());
  both.insert(both.end(), x1.data(), x1.data() + x1.numel());
  auto batched =
      self_attention(Tensor<double>::from_data({2, s, d}, both), 2, wq, wk, wv, wo);
  auto y0 = self_attention(x0, 2, wq, wk, wv, wo);
  auto y1 = self_attention(x1, 2, wq, wk, wv, wo);
  for (int64_t i = 0; i < y0.numel(); ++i) {
    CHECK(batched.data()[i] == doctest::Approx(y0.data()[i]).epsilon(1e-12));
    CHECK(batched.data()[y0.numel() + i] == doctest::Approx(y1.data()[i]).epsilon(1e-12));
  }
}

TEST_CASE("mlp_block examples") {
  // GELU(0) = 0, so zero input with zero biases stays zero.
  auto w1 = Tensor<double>::from_data({1, 1}, {0.5});
  auto b1 = Tensor<double>::from_data({1}, {0.0});
  auto w2 = Tensor<double>::from_data({1, 1}, {2.0});
  auto b2 = Tensor<double>::from_data({1}, {0.0});
  check_close(mlp_block(Tensor<double>::zeros({1, 1}), w1, b1, w2, b2), {0}, 1e-15);

  // all-zero weights -> b2 broadcast
  auto zw = Tensor<double>::zeros({3, 4});
  auto zb = Tensor<double>::zeros({4});
  auto w2z = Tensor<double>::zeros({4, 2});
  auto b2v = Tensor<double>::from_data({2}, {0.7, -0.2});
  auto out = mlp_block(Tensor<double>::from_data({2, 3}, {1, 2, 3, 4, 5, 6}), zw, zb,
                       w2z, b2v);
  check_close(out, {0.7, -0.2, 0.7, -0.2}, 1e-15);

  // 1-d toy against the scalar oracle
  auto b1v = Tensor<double>::from_data({1}, {0.1});
  auto b2s = Tensor<double>::from_data({1}, {-0.3});
  auto y = mlp_block(Tensor<double>::from_data({1, 1}, {2.0}), w1, b1v, w2, b2s);
  const double want = gelu_ref(2.0 * 0.5 + 0.1) * 2.0 - 0.3;
  check_close(y, {want}, 1e-14);
}

TEST_CASE("grad_check: linear, constant, and composite chain") {
  RngStream rng(41);

  auto f_linear = [](const std::vector<Tensor<double>>& ls) {
    return mean_all(mul_scalar(ls[0], 3.25));
  };
  CHECK(grad_check<double>(f_linear, {random_tensor<double>(rng, {3, 3})}) < 1e-10);

  auto f_const = [](const std::vector<Tensor<double>>& ls) {
    return sum_all(mul_scalar(ls[0], 0.0));
  };
  CHECK(grad_check<double>(f_const, {random_tensor<double>(rng, {4})}) == 0.0);

  // LN -> SA -> LN -> MLP chain, gradients w.r.t. every leaf.
  const int s = 3, d = 4;
  auto x = random_tensor<double>(rng, {s, d});
  auto g1 = random_tensor<double>(rng, {d}, 0.5, 1.5);
  auto b1 = random_tensor<double>(rng, {d}, -0.2, 0.2);
  auto wq = random_tensor<double>(rng, {d, d}, -0.5, 0.5);
  auto wk = random_tensor<double>(rng, {d, d}, -0.5, 0.5);
  auto wv = random_tensor<double>(rng, {d, d}, -0.5, 0.5);
  auto wo = random_tensor<double>(rng, {d, d}, -0.5, 0.5);
  auto g2 = random_tensor<double>(rng, {d}, 0.5, 1.5);
  auto b2 = random_tensor<double>(rng, {d}, -0.2, 0.2);
  auto mw1 = random_tensor<double>(rng, {d, 2 * d}, -0.5, 0.5);
  auto mb1 = random_tensor<double>(rng, {2 * d}, -0.2, 0.2);
  auto mw2 = random_tensor<double>(rng, {2 * d, d}, -0.5, 0.5);
  auto mb2 = random_tensor<double>(rng, {d}, -0.2, 0.2);

  auto f_chain = [=](const std::vector<Tensor<double>>& ls) {
    const auto& X = ls[0];
    auto h = add(X, self_attention(layer_norm(X, ls[1], ls[2]), 2, ls[3], ls[4],
                                   ls[5], ls[6]));
    auto y = add(h, mlp_block(layer_norm(h, ls[7], ls[8]), ls[9], ls[10], ls[11],
                              ls[12]));
    return mean_all(mul(y, y));
  };
  const double err = grad_check<double>(
      f_chain, {x, g1, b1, wq, wk, wv, wo, g2, b2, mw1, mb1, mw2, mb2}, 1e-4);
  CHECK(err < 1e-5);
}

TEST_SUITE_END();
