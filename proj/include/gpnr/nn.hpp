#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "gpnr/tensor.hpp"

namespace gpnr {

// Per-row normalization over the last axis: zero mean, unit variance (eps
// added to the variance), then affine gain/bias.
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias,
                     double eps = 1e-5) {
  const int d = x.extent(-1);
  if (gain.numel() != d || bias.numel() != d)
    throw config_error("layer_norm: gain/bias must match last extent " +
                       std::to_string(d) + ", got " + detail::shape_str(gain.shape()) +
                       " and " + detail::shape_str(bias.shape()));
  const int64_t rows = x.numel() / d;
  Tensor<S> out = Tensor<S>::zeros(x.shape());

  std::vector<S> mean(static_cast<size_t>(rows)), rstd(static_cast<size_t>(rows));
  const S* px = x.data();
  const S* pg = gain.data();
  const S* pb = bias.data();
  S* po = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const S* row = px + r * d;
    S m = S(0);
    for (int j = 0; j < d; ++j) m += row[j];
    m /= static_cast<S>(d);
    S v = S(0);
    for (int j = 0; j < d; ++j) {
      const S c = row[j] - m;
      v += c * c;
    }
    v /= static_cast<S>(d);
    const S rs = S(1) / std::sqrt(v + static_cast<S>(eps));
    mean[static_cast<size_t>(r)] = m;
    rstd[static_cast<size_t>(r)] = rs;
    S* orow = po + r * d;
    for (int j = 0; j < d; ++j) orow[j] = (row[j] - m) * rs * pg[j] + pb[j];
  }

  Tape<S>* tape = detail::joint_tape<S>({&x, &gain, &bias}, "layer_norm");
  if (tape) {
    out.bind(tape, tape->add_node(out.numel()));
    Tensor<S> cx = x, cg = gain, cb = bias;
    const int no = out.node();
    tape->record([tape, no, cx, cg, cb, mean = std::move(mean),
                  rstd = std::move(rstd), rows, d] {
      const S* g = tape->grad_buf(no).data();
      const S* px2 = cx.data();
      const S* pg2 = cg.data();
      S* gx = cx.node() >= 0 ? tape->grad_buf(cx.node()).data() : nullptr;
      S* gg = cg.node() >= 0 ? tape->grad_buf(cg.node()).data() : nullptr;
      S* gb = cb.node() >= 0 ? tape->grad_buf(cb.node()).data() : nullptr;
      for (int64_t r = 0; r < rows; ++r) {
        const S* row = px2 + r * d;
        const S* grow = g + r * d;
        const S m = mean[static_cast<size_t>(r)];
        const S rs = rstd[static_cast<size_t>(r)];
        if (gg || gb) {
          for (int j = 0; j < d; ++j) {
            if (gg) gg[j] += grow[j] * (row[j] - m) * rs;
            if (gb) gb[j] += grow[j];
          }
        }
        if (gx) {
          S s1 = S(0), s2 = S(0);
          for (int j = 0; j < d; ++j) {
            const S xh = (row[j] - m) * rs;
            const S gy = grow[j] * pg2[j];
            s1 += gy;
            s2 += gy * xh;
          }
          s1 /= static_cast<S>(d);
          s2 /= static_cast<S>(d);
          S* gxrow = gx + r * d;
          for (int j = 0; j < d; ++j) {
            const S xh = (row[j] - m) * rs;
            const S gy = grow[j] * pg2[j];
            gxrow[j] += rs * (gy - s1 - xh * s2);
          }
        }
      }
    });
  }
  return out;
}

// tanh-approximated GELU.
template <typename S>
Tensor<S> gelu(const Tensor<S>& x) {
  constexpr double kC1 = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kC2 = 0.044715;
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  const S* px = x.data();
  S* po = out.data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) {
    const S v = px[i];
    const S u = static_cast<S>(kC1) * (v + static_cast<S>(kC2) * v * v * v);
    po[i] = S(0.5) * v * (S(1) + std::tanh(u));
  }
  if (x.on_tape()) {
    Tape<S>* tape = x.tape();
    out.bind(tape, tape->add_node(out.numel()));
    Tensor<S> cx = x;
    const int no = out.node();
    tape->record([tape, no, cx, n] {
      const S* g = tape->grad_buf(no).data();
      const S* px2 = cx.data();
      S* gx = tape->grad_buf(cx.node()).data();
      for (int64_t i = 0; i < n; ++i) {
        const S v = px2[i];
        const S u = static_cast<S>(kC1) * (v + static_cast<S>(kC2) * v * v * v);
        const S t = std::tanh(u);
        const S du = static_cast<S>(kC1) * (S(1) + S(3) * static_cast<S>(kC2) * v * v);
        const S d = S(0.5) * (S(1) + t) + S(0.5) * v * (S(1) - t * t) * du;
        gx[i] += g[i] * d;
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  const S* px = x.data();
  S* po = out.data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = S(1) / (S(1) + std::exp(-px[i]));
  if (x.on_tape()) {
    Tape<S>* tape = x.tape();
    out.bind(tape, tape->add_node(out.numel()));
    Tensor<S> co = out;
    const int nx = x.node(), no = out.node();
    tape->record([tape, nx, no, co, n] {
      const S* g = tape->grad_buf(no).data();
      const S* y = co.data();
      S* gx = tape->grad_buf(nx).data();
      for (int64_t i = 0; i < n; ++i) gx[i] += g[i] * y[i] * (S(1) - y[i]);
    });
  }
  return out;
}

// Scaled dot-product multi-head self-attention over the second-to-last axis.
// Inputs are sets, so there is no mask. Leading axes are batch dims.
template <typename S>
Tensor<S> self_attention(const Tensor<S>& x, int heads, const Tensor<S>& wq,
                         const Tensor<S>& wk, const Tensor<S>& wv,
                         const Tensor<S>& wo) {
  const int d = x.extent(-1);
  const int s = x.extent(-2);
  if (heads < 1 || d % heads != 0)
    throw config_error("self_attention: width " + std::to_string(d) +
                       " not divisible by " + std::to_string(heads) + " heads");
  const int dh = d / heads;

  auto split = [&](const Tensor<S>& t) {
    std::vector<int> sh(t.shape().begin(), t.shape().end() - 1);
    sh.push_back(heads);
    sh.push_back(dh);
    // [..., s, H, dh] -> [..., H, s, dh]
    return transpose(reshape(t, sh), -3, -2);
  };

  Tensor<S> q = split(matmul(x, wq));
  Tensor<S> k = split(matmul(x, wk));
  Tensor<S> v = split(matmul(x, wv));

  Tensor<S> scores =
      mul_scalar(matmul(q, transpose(k, -1, -2)), 1.0 / std::sqrt(double(dh)));
  Tensor<S> attn = softmax(scores, -1);
  Tensor<S> ctx = transpose(matmul(attn, v), -3, -2);  // [..., s, H, dh]
  std::vector<int> merged(ctx.shape().begin(), ctx.shape().end() - 2);
  merged.push_back(d);
  (void)s;
  return matmul(reshape(ctx, merged), wo);
}

// linear -> GELU -> linear.
template <typename S>
Tensor<S> mlp_block(const Tensor<S>& x, const Tensor<S>& w1, const Tensor<S>& b1,
                    const Tensor<S>& w2, const Tensor<S>& b2) {
  return add(matmul(gelu(add(matmul(x, w1), b1)), w2), b2);
}

// Max relative error between tape gradients and central differences, taken
// over every element of every leaf. Only meaningful with S = double.
template <typename S>
double grad_check(const std::function<Tensor<S>(const std::vector<Tensor<S>>&)>& f,
                  std::vector<Tensor<S>> leaves, double h = 1e-4) {
  Tape<S> tape;
  std::vector<Tensor<S>> watched;
  watched.reserve(leaves.size());
  for (const auto& l : leaves) watched.push_back(tape.watch(l));
  Tensor<S> loss = f(watched);
  tape.backward(loss);
  std::vector<std::vector<S>> analytic;
  for (const auto& w : watched) analytic.push_back(tape.grad(w));

  double max_err = 0.0;
  for (size_t li = 0; li < leaves.size(); ++li) {
    S* data = leaves[li].data();
    const int64_t n = leaves[li].numel();
    for (int64_t e = 0; e < n; ++e) {
      const S keep = data[e];
      data[e] = keep + static_cast<S>(h);
      const double fp = static_cast<double>(f(leaves).item());
      data[e] = keep - static_cast<S>(h);
      const double fm = static_cast<double>(f(leaves).item());
      data[e] = keep;
      const double numeric = (fp - fm) / (2.0 * h);
      const double an = static_cast<double>(analytic[li][static_cast<size_t>(e)]);
      const double denom = std::max({std::fabs(an), std::fabs(numeric), 1e-8});
      max_err = std::max(max_err, std::fabs(an - numeric) / denom);
    }
  }
  return max_err;
}

}  // namespace gpnr
