#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "gpnr/common.hpp"

namespace gpnr {

template <typename S>
class Tape;

namespace detail {

inline int64_t numel_of(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int e : shape) n *= e;
  return n;
}

inline std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline int normalize_axis(int axis, int rank, const char* op) {
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank)
    throw config_error(std::string(op) + ": axis " + std::to_string(axis) +
                       " out of range for rank " + std::to_string(rank));
  return a;
}

}  // namespace detail

// Dense row-major tensor. Copies are shallow (storage is shared and ops never
// mutate their inputs), so Tensor behaves as a cheap value handle. A tensor
// optionally carries a (tape, node) pair that links it into a reverse-mode
// differentiation tape; constants have no tape.
template <typename S>
class Tensor {
 public:
  using scalar_type = S;

  Tensor() = default;

  static Tensor zeros(std::vector<int> shape) {
    return Tensor(std::move(shape), S(0));
  }
  static Tensor full(std::vector<int> shape, S value) {
    return Tensor(std::move(shape), value);
  }
  static Tensor from_data(std::vector<int> shape, std::vector<S> data) {
    Tensor t;
    t.shape_ = std::move(shape);
    if (detail::numel_of(t.shape_) != static_cast<int64_t>(data.size()))
      throw config_error("from_data: " + std::to_string(data.size()) +
                         " values for shape " + detail::shape_str(t.shape_));
    t.data_ = std::make_shared<std::vector<S>>(std::move(data));
    return t;
  }
  static Tensor scalar(S value) { return from_data({1}, {value}); }

  bool defined() const { return static_cast<bool>(data_); }
  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int extent(int axis) const {
    return shape_[static_cast<size_t>(detail::normalize_axis(axis, rank(), "extent"))];
  }
  int64_t numel() const { return data_ ? static_cast<int64_t>(data_->size()) : 0; }

  S* data() { return data_->data(); }
  const S* data() const { return data_->data(); }
  std::vector<S>& storage() { return *data_; }
  const std::vector<S>& storage() const { return *data_; }

  S item() const {
    if (numel() != 1)
      throw numeric_error("item: tensor has shape " + detail::shape_str(shape_));
    return (*data_)[0];
  }

  Tape<S>* tape() const { return tape_; }
  int node() const { return node_; }
  bool on_tape() const { return tape_ != nullptr; }

  // Same storage, detached from any tape.
  Tensor detached() const {
    Tensor t = *this;
    t.tape_ = nullptr;
    t.node_ = -1;
    return t;
  }

  // Same storage viewed under different extents (row-major layout unchanged).
  Tensor viewed_as(std::vector<int> new_shape) const {
    if (detail::numel_of(new_shape) != numel())
      throw config_error("reshape: cannot view " + detail::shape_str(shape_) +
                         " as " + detail::shape_str(new_shape));
    Tensor t = detached();
    t.shape_ = std::move(new_shape);
    return t;
  }

  template <typename T>
  Tensor<T> cast() const {
    std::vector<T> out(data_->size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>((*data_)[i]);
    return Tensor<T>::from_data(shape_, std::move(out));
  }

  // Internal: attach an op result to a tape.
  void bind(Tape<S>* tape, int node) {
    tape_ = tape;
    node_ = node;
  }

 private:
  Tensor(std::vector<int> shape, S fill) : shape_(std::move(shape)) {
    data_ = std::make_shared<std::vector<S>>(
        static_cast<size_t>(detail::numel_of(shape_)), fill);
  }

  std::vector<int> shape_;
  std::shared_ptr<std::vector<S>> data_;
  Tape<S>* tape_ = nullptr;
  int node_ = -1;
};

// Reverse-mode tape. Single builder thread, single backward pass; parallel
// callers use one tape each. Recording order is a topological order of the
// graph, so replaying closures in reverse visits every node once.
template <typename S>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers a leaf whose gradient should be tracked. Returns a handle bound
  // to this tape that shares the leaf's storage; the input stays untouched,
  // so one parameter tensor can be watched by many tapes concurrently.
  Tensor<S> watch(const Tensor<S>& t) {
    Tensor<S> w = t.detached();
    w.bind(this, add_node(w.numel()));
    return w;
  }

  void backward(const Tensor<S>& loss) {
    if (loss.tape() != this)
      throw numeric_error("backward: loss is not recorded on this tape");
    if (loss.numel() != 1)
      throw numeric_error("backward: loss must be scalar, got shape " +
                          detail::shape_str(loss.shape()));
    if (consumed_) throw numeric_error("backward: tape already consumed");
    grads_.resize(node_numel_.size());
    for (size_t i = 0; i < grads_.size(); ++i)
      grads_[i].assign(static_cast<size_t>(node_numel_[i]), S(0));
    grads_[static_cast<size_t>(loss.node())][0] = S(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    consumed_ = true;
  }

  bool consumed() const { return consumed_; }

  const std::vector<S>& grad(const Tensor<S>& t) const {
    if (t.tape() != this || t.node() < 0)
      throw numeric_error("grad: tensor is not tracked by this tape");
    if (!consumed_) throw numeric_error("grad: backward has not run");
    return grads_[static_cast<size_t>(t.node())];
  }

  // Clears recorded ops for reuse; keeps gradient buffer capacity.
  void reset() {
    ops_.clear();
    node_numel_.clear();
    consumed_ = false;
  }

  // --- recording interface used by ops ---
  int add_node(int64_t numel) {
    if (consumed_) throw numeric_error("tape already consumed; reset() before reuse");
    node_numel_.push_back(numel);
    return static_cast<int>(node_numel_.size()) - 1;
  }
  void record(std::function<void()> fn) { ops_.push_back(std::move(fn)); }
  std::vector<S>& grad_buf(int node) { return grads_[static_cast<size_t>(node)]; }

 private:
  std::vector<int64_t> node_numel_;
  std::vector<std::vector<S>> grads_;
  std::vector<std::function<void()>> ops_;
  bool consumed_ = false;
};

namespace detail {

template <typename S>
Tape<S>* joint_tape(std::initializer_list<const Tensor<S>*> ts, const char* op) {
  Tape<S>* tape = nullptr;
  for (const Tensor<S>* t : ts) {
    if (!t->on_tape()) continue;
    if (!tape)
      tape = t->tape();
    else if (tape != t->tape())
      throw numeric_error(std::string(op) + ": operands recorded on different tapes");
  }
  return tape;
}

inline std::vector<int> broadcast_shape(const std::vector<int>& a,
                                        const std::vector<int>& b, const char* op) {
  const int r = static_cast<int>(std::max(a.size(), b.size()));
  std::vector<int> out(static_cast<size_t>(r));
  for (int d = 0; d < r; ++d) {
    const int ea = d < r - static_cast<int>(a.size()) ? 1 : a[a.size() - (r - d)];
    const int eb = d < r - static_cast<int>(b.size()) ? 1 : b[b.size() - (r - d)];
    if (ea != eb && ea != 1 && eb != 1)
      throw config_error(std::string(op) + ": shapes " + shape_str(a) + " and " +
                         shape_str(b) + " do not broadcast");
    out[static_cast<size_t>(d)] = std::max(ea, eb);
  }
  return out;
}

// Element strides of `in` against broadcast result `out`, 0 on broadcast axes.
inline std::vector<int64_t> broadcast_strides(const std::vector<int>& out,
                                              const std::vector<int>& in) {
  const int r = static_cast<int>(out.size());
  std::vector<int64_t> st(static_cast<size_t>(r), 0);
  int64_t acc = 1;
  for (int d = static_cast<int>(in.size()) - 1, od = r - 1; d >= 0; --d, --od) {
    st[static_cast<size_t>(od)] = (in[static_cast<size_t>(d)] == 1) ? 0 : acc;
    acc *= in[static_cast<size_t>(d)];
  }
  return st;
}

// Visits every element of out_shape as runs along the innermost axis:
// f(out_linear_begin, a_offset, b_offset, run_len, a_step, b_step).
template <typename F>
void broadcast_runs2(const std::vector<int>& out_shape, const std::vector<int>& a_shape,
                     const std::vector<int>& b_shape, F&& f) {
  const int r = static_cast<int>(out_shape.size());
  if (r == 0) {
    f(int64_t{0}, int64_t{0}, int64_t{0}, int64_t{1}, int64_t{0}, int64_t{0});
    return;
  }
  const auto sa = broadcast_strides(out_shape, a_shape);
  const auto sb = broadcast_strides(out_shape, b_shape);
  const int64_t inner = out_shape[static_cast<size_t>(r - 1)];
  const int64_t sa_in = sa[static_cast<size_t>(r - 1)];
  const int64_t sb_in = sb[static_cast<size_t>(r - 1)];
  const int64_t outer = numel_of(out_shape) / inner;
  std::vector<int> counter(static_cast<size_t>(r > 1 ? r - 1 : 1), 0);
  int64_t ao = 0, bo = 0, lin = 0;
  for (int64_t o = 0; o < outer; ++o) {
    f(lin, ao, bo, inner, sa_in, sb_in);
    lin += inner;
    for (int d = r - 2; d >= 0; --d) {
      ++counter[static_cast<size_t>(d)];
      ao += sa[static_cast<size_t>(d)];
      bo += sb[static_cast<size_t>(d)];
      if (counter[static_cast<size_t>(d)] < out_shape[static_cast<size_t>(d)]) break;
      counter[static_cast<size_t>(d)] = 0;
      ao -= sa[static_cast<size_t>(d)] * out_shape[static_cast<size_t>(d)];
      bo -= sb[static_cast<size_t>(d)] * out_shape[static_cast<size_t>(d)];
    }
  }
}

template <typename F>
void broadcast_runs1(const std::vector<int>& out_shape, const std::vector<int>& a_shape,
                     F&& f) {
  broadcast_runs2(out_shape, a_shape, a_shape,
                  [&f](int64_t lin, int64_t ao, int64_t, int64_t len, int64_t sa,
                       int64_t) { f(lin, ao, len, sa); });
}

// C(n x m) += A(n x k) * B(k x m)
template <typename S>
void gemm_nn_acc(const S* A, const S* B, S* C, int n, int k, int m) {
  for (int i = 0; i < n; ++i) {
    const S* a = A + static_cast<size_t>(i) * k;
    S* c = C + static_cast<size_t>(i) * m;
    for (int kk = 0; kk < k; ++kk) {
      const S s = a[kk];
      const S* b = B + static_cast<size_t>(kk) * m;
      for (int j = 0; j < m; ++j) c[j] += s * b[j];
    }
  }
}

// C(k x m) += A(n x k)^T * B(n x m)
template <typename S>
void gemm_tn_acc(const S* A, const S* B, S* C, int n, int k, int m) {
  for (int i = 0; i < n; ++i) {
    const S* a = A + static_cast<size_t>(i) * k;
    const S* b = B + static_cast<size_t>(i) * m;
    for (int kk = 0; kk < k; ++kk) {
      const S s = a[kk];
      S* c = C + static_cast<size_t>(kk) * m;
      for (int j = 0; j < m; ++j) c[j] += s * b[j];
    }
  }
}

template <typename S>
void transpose2d(const S* in, S* out, int rows, int cols) {
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j)
      out[static_cast<size_t>(j) * rows + i] = in[static_cast<size_t>(i) * cols + j];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic with numpy-style trailing broadcast.
// ---------------------------------------------------------------------------

namespace detail {

// kind: 0 add, 1 sub, 2 mul
template <typename S>
Tensor<S> binary_op(const Tensor<S>& a, const Tensor<S>& b, int kind, const char* name) {
  const auto out_shape = broadcast_shape(a.shape(), b.shape(), name);
  Tensor<S> out = Tensor<S>::zeros(out_shape);
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  broadcast_runs2(out_shape, a.shape(), b.shape(),
                  [&](int64_t lin, int64_t ao, int64_t bo, int64_t len, int64_t sa,
                      int64_t sb) {
                    switch (kind) {
                      case 0:
                        for (int64_t j = 0; j < len; ++j)
                          po[lin + j] = pa[ao + j * sa] + pb[bo + j * sb];
                        break;
                      case 1:
                        for (int64_t j = 0; j < len; ++j)
                          po[lin + j] = pa[ao + j * sa] - pb[bo + j * sb];
                        break;
                      default:
                        for (int64_t j = 0; j < len; ++j)
                          po[lin + j] = pa[ao + j * sa] * pb[bo + j * sb];
                    }
                  });
  Tape<S>* tape = joint_tape<S>({&a, &b}, name);
  if (tape) {
    out.bind(tape, tape->add_node(out.numel()));
    Tensor<S> ca = a, cb = b, co = out;
    tape->record([tape, ca, cb, co, kind, out_shape] {
      const S* g = tape->grad_buf(co.node()).data();
      if (ca.node() >= 0) {
        S* ga = tape->grad_buf(ca.node()).data();
        const S* pb2 = cb.data();
        broadcast_runs2(out_shape, ca.shape(), cb.shape(),
                        [&](int64_t lin, int64_t ao, int64_t bo, int64_t len,
                            int64_t sa, int64_t sb) {
                          if (kind == 2)
                            for (int64_t j = 0; j < len; ++j)
                              ga[ao + j * sa] += g[lin + j] * pb2[bo + j * sb];
                          else
                            for (int64_t j = 0; j < len; ++j)
                              ga[ao + j * sa] += g[lin + j];
                        });
      }
      if (cb.node() >= 0) {
        S* gb = tape->grad_buf(cb.node()).data();
        const S* pa2 = ca.data();
        broadcast_runs2(out_shape, ca.shape(), cb.shape(),
                        [&](int64_t lin, int64_t ao, int64_t bo, int64_t len,
                            int64_t sa, int64_t sb) {
                          if (kind == 2)
                            for (int64_t j = 0; j < len; ++j)
                              gb[bo + j * sb] += g[lin + j] * pa2[ao + j * sa];
                          else if (kind == 1)
                            for (int64_t j = 0; j < len; ++j)
                              gb[bo + j * sb] -= g[lin + j];
                          else
                            for (int64_t j = 0; j < len; ++j)
                              gb[bo + j * sb] += g[lin + j];
                        });
      }
    });
  }
  return out;
}

}  // namespace detail

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op(a, b, 0, "add");
}
template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op(a, b, 1, "sub");
}
template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op(a, b, 2, "mul");
}

template <typename S>
Tensor<S> operator+(const Tensor<S>& a, const Tensor<S>& b) { return add(a, b); }
template <typename S>
Tensor<S> operator-(const Tensor<S>& a, const Tensor<S>& b) { return sub(a, b); }
template <typename S>
Tensor<S> operator*(const Tensor<S>& a, const Tensor<S>& b) { return mul(a, b); }

template <typename S>
Tensor<S> mul_scalar(const Tensor<S>& a, double c) {
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const S* pa = a.data();
  S* po = out.data();
  const S cs = static_cast<S>(c);
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * cs;
  if (a.on_tape()) {
    Tape<S>* tape = a.tape();
    out.bind(tape, tape->add_node(out.numel()));
    const int na = a.node(), no = out.node();
    tape->record([tape, na, no, cs, n] {
      const S* g = tape->grad_buf(no).data();
      S* ga = tape->grad_buf(na).data();
      for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * cs;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// matmul: a[..., n, k] x b[..., k, m] -> [..., n, m], leading dims broadcast.
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() < 2 || b.rank() < 2)
    throw config_error("matmul: operands must have rank >= 2, got " +
                       detail::shape_str(a.shape()) + " x " +
                       detail::shape_str(b.shape()));
  const int n = a.extent(-2), ka = a.extent(-1);
  const int kb = b.extent(-2), m = b.extent(-1);
  if (ka != kb)
    throw config_error("matmul: inner extents disagree for " +
                       detail::shape_str(a.shape()) + " x " +
                       detail::shape_str(b.shape()));
  const std::vector<int> lead_a(a.shape().begin(), a.shape().end() - 2);
  const std::vector<int> lead_b(b.shape().begin(), b.shape().end() - 2);
  const auto lead = detail::broadcast_shape(lead_a, lead_b, "matmul");
  std::vector<int> out_shape = lead;
  out_shape.push_back(n);
  out_shape.push_back(m);
  Tensor<S> out = Tensor<S>::zeros(out_shape);

  const int64_t a_mat = static_cast<int64_t>(n) * ka;
  const int64_t b_mat = static_cast<int64_t>(kb) * m;
  const int64_t o_mat = static_cast<int64_t>(n) * m;
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  detail::broadcast_runs2(
      lead, lead_a, lead_b,
      [&](int64_t lin, int64_t ao, int64_t bo, int64_t len, int64_t sa, int64_t sb) {
        for (int64_t j = 0; j < len; ++j)
          detail::gemm_nn_acc(pa + (ao + j * sa) * a_mat, pb + (bo + j * sb) * b_mat,
                              po + (lin + j) * o_mat, n, ka, m);
      });

  Tape<S>* tape = detail::joint_tape<S>({&a, &b}, "matmul");
  if (tape) {
    out.bind(tape, tape->add_node(out.numel()));
    Tensor<S> ca = a, cb = b, co = out;
    tape->record([tape, ca, cb, co, lead, lead_a, lead_b, n, ka, m, a_mat, b_mat,
                  o_mat] {
      const S* g = tape->grad_buf(co.node()).data();
      if (ca.node() >= 0) {
        S* ga = tape->grad_buf(ca.node()).data();
        const S* pb2 = cb.data();
        std::vector<S> bt(static_cast<size_t>(b_mat));
        int64_t cached = -1;
        detail::broadcast_runs2(
            lead, lead_a, lead_b,
            [&](int64_t lin, int64_t ao, int64_t bo, int64_t len, int64_t sa,
                int64_t sb) {
              for (int64_t j = 0; j < len; ++j) {
                const int64_t boff = bo + j * sb;
                if (boff != cached) {
                  detail::transpose2d(pb2 + boff * b_mat, bt.data(), ka, m);
                  cached = boff;
                }
                detail::gemm_nn_acc(g + (lin + j) * o_mat, bt.data(),
                                    ga + (ao + j * sa) * a_mat, n, m, ka);
              }
            });
      }
      if (cb.node() >= 0) {
        S* gb = tape->grad_buf(cb.node()).data();
        const S* pa2 = ca.data();
        detail::broadcast_runs2(
            lead, lead_a, lead_b,
            [&](int64_t lin, int64_t ao, int64_t bo, int64_t len, int64_t sa,
                int64_t sb) {
              for (int64_t j = 0; j < len; ++j)
                detail::gemm_tn_acc(pa2 + (ao + j * sa) * a_mat, g + (lin + j) * o_mat,
                                    gb + (bo + j * sb) * b_mat, n, ka, m);
            });
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape ops.
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> reshape(const Tensor<S>& a, std::vector<int> new_shape) {
  Tensor<S> out = a.viewed_as(std::move(new_shape));
  if (a.on_tape()) {
    Tape<S>* tape = a.tape();
    out.bind(tape, tape->add_node(out.numel()));
    const int na = a.node(), no = out.node();
    const int64_t n = a.numel();
    tape->record([tape, na, no, n] {
      const S* g = tape->grad_buf(no).data();
      S* ga = tape->grad_buf(na).data();
      for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
    });
  }
  return out;
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& a, int axis_a, int axis_b) {
  const int r = a.rank();
  int i = detail::normalize_axis(axis_a, r, "transpose");
  int j = detail::normalize_axis(axis_b, r, "transpose");
  if (i == j) return a;
  if (i > j) std::swap(i, j);
  std::vector<int> out_shape = a.shape();
  std::swap(out_shape[static_cast<size_t>(i)], out_shape[static_cast<size_t>(j)]);
  Tensor<S> out = Tensor<S>::zeros(out_shape);

  int64_t pre = 1, mid = 1, post = 1;
  for (int d = 0; d < i; ++d) pre *= a.shape()[static_cast<size_t>(d)];
  for (int d = i + 1; d < j; ++d) mid *= a.shape()[static_cast<size_t>(d)];
  for (int d = j + 1; d < r; ++d) post *= a.shape()[static_cast<size_t>(d)];
  const int64_t di = a.shape()[static_cast<size_t>(i)];
  const int64_t dj = a.shape()[static_cast<size_t>(j)];

  auto run = [pre, mid, post, di, dj](const S* src, S* dst) {
    // dst has extents (pre, dj, mid, di, post); src (pre, di, mid, dj, post).
    for (int64_t p = 0; p < pre; ++p)
      for (int64_t x = 0; x < di; ++x)
        for (int64_t m0 = 0; m0 < mid; ++m0)
          for (int64_t y = 0; y < dj; ++y) {
            const S* s = src + (((p * di + x) * mid + m0) * dj + y) * post;
            S* d = dst + (((p * dj + y) * mid + m0) * di + x) * post;
            for (int64_t q = 0; q < post; ++q) d[q] = s[q];
          }
  };
  run(a.data(), out.data());

  if (a.on_tape()) {
    Tape<S>* tape = a.tape();
    out.bind(tape, tape->add_node(out.numel()));
    const int na = a.node(), no = out.node();
    tape->record([tape, na, no, pre, mid, post, di, dj] {
      const S* g = tape->grad_buf(no).data();
      S* ga = tape->grad_buf(na).data();
      // Reverse mapping: grad flows back through the inverse permutation.
      for (int64_t p = 0; p < pre; ++p)
        for (int64_t x = 0; x < di; ++x)
          for (int64_t m0 = 0; m0 < mid; ++m0)
            for (int64_t y = 0; y < dj; ++y) {
              S* d = ga + (((p * di + x) * mid + m0) * dj + y) * post;
              const S* s = g + (((p * dj + y) * mid + m0) * di + x) * post;
              for (int64_t q = 0; q < post; ++q) d[q] += s[q];
            }
    });
  }
  return out;
}

template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, int axis) {
  if (parts.empty()) throw config_error("concat: no operands");
  const int r = parts[0].rank();
  const int ax = detail::normalize_axis(axis, r, "concat");
  std::vector<int> out_shape = parts[0].shape();
  int total = 0;
  for (const auto& p : parts) {
    if (p.rank() != r) throw config_error("concat: rank mismatch");
    for (int d = 0; d < r; ++d)
      if (d != ax && p.shape()[static_cast<size_t>(d)] != out_shape[static_cast<size_t>(d)])
        throw config_error("concat: shape mismatch " + detail::shape_str(p.shape()) +
                           " vs " + detail::shape_str(out_shape));
    total += p.shape()[static_cast<size_t>(ax)];
  }
  out_shape[static_cast<size_t>(ax)] = total;
  Tensor<S> out = Tensor<S>::zeros(out_shape);

  int64_t outer = 1, inner = 1;
  for (int d = 0; d < ax; ++d) outer *= out_shape[static_cast<size_t>(d)];
  for (int d = ax + 1; d < r; ++d) inner *= out_shape[static_cast<size_t>(d)];
  const int64_t out_row = static_cast<int64_t>(total) * inner;

  int64_t off = 0;
  for (const auto& p : parts) {
    const int64_t mid = static_cast<int64_t>(p.shape()[static_cast<size_t>(ax)]) * inner;
    const S* src = p.data();
    S* dst = out.data();
    for (int64_t o = 0; o < outer; ++o)
      std::copy(src + o * mid, src + (o + 1) * mid, dst + o * out_row + off);
    off += mid;
  }

  Tape<S>* tape = nullptr;
  for (const auto& p : parts)
    if (p.on_tape()) {
      if (tape && tape != p.tape())
        throw numeric_error("concat: operands recorded on different tapes");
      tape = p.tape();
    }
  if (tape) {
    out.bind(tape, tape->add_node(out.numel()));
    std::vector<int> nodes;
    std::vector<int64_t> mids;
    for (const auto& p : parts) {
      nodes.push_back(p.node());
      mids.push_back(static_cast<int64_t>(p.shape()[static_cast<size_t>(ax)]) * inner);
    }
    const int no = out.node();
    tape->record([tape, no, nodes, mids, outer, out_row] {
      const S* g = tape->grad_buf(no).data();
      int64_t off2 = 0;
      for (size_t pi = 0; pi < nodes.size(); ++pi) {
        const int64_t mid = mids[pi];
        if (nodes[pi] >= 0) {
          S* gp = tape->grad_buf(nodes[pi]).data();
          for (int64_t o = 0; o < outer; ++o) {
            const S* src = g + o * out_row + off2;
            S* dst = gp + o * mid;
            for (int64_t q = 0; q < mid; ++q) dst[q] += src[q];
          }
        }
        off2 += mid;
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> slice(const Tensor<S>& a, int axis, int start, int len) {
  const int r = a.rank();
  const int ax = detail::normalize_axis(axis, r, "slice");
  const int d = a.shape()[static_cast<size_t>(ax)];
  if (start < 0 || len < 0 || start + len > d)
    throw config_error("slice: [" + std::to_string(start) + ", " +
                       std::to_string(start + len) + ") out of range for extent " +
                       std::to_string(d));
  std::vector<int> out_shape = a.shape();
  out_shape[static_cast<size_t>(ax)] = len;
  Tensor<S> out = Tensor<S>::zeros(out_shape);

  int64_t outer = 1, inner = 1;
  for (int dd = 0; dd < ax; ++dd) outer *= a.shape()[static_cast<size_t>(dd)];
  for (int dd = ax + 1; dd < r; ++dd) inner *= a.shape()[static_cast<size_t>(dd)];
  const int64_t in_row = static_cast<int64_t>(d) * inner;
  const int64_t out_row = static_cast<int64_t>(len) * inner;
  const int64_t skip = static_cast<int64_t>(start) * inner;

  const S* src = a.data();
  S* dst = out.data();
  for (int64_t o = 0; o < outer; ++o)
    std::copy(src + o * in_row + skip, src + o * in_row + skip + out_row,
              dst + o * out_row);

  if (a.on_tape()) {
    Tape<S>* tape = a.tape();
    out.bind(tape, tape->add_node(out.numel()));
    const int na = a.node(), no = out.node();
    tape->record([tape, na, no, outer, in_row, out_row, skip] {
      const S* g = tape->grad_buf(no).data();
      S* ga = tape->grad_buf(na).data();
      for (int64_t o = 0; o < outer; ++o) {
        const S* s = g + o * out_row;
        S* dptr = ga + o * in_row + skip;
        for (int64_t q = 0; q < out_row; ++q) dptr[q] += s[q];
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> expand(const Tensor<S>& a, const std::vector<int>& target) {
  // Validate: a must broadcast to target without changing target.
  const auto check = detail::broadcast_shape(a.shape(), target, "expand");
  if (check != target)
    throw config_error("expand: " + detail::shape_str(a.shape()) +
                       " does not broadcast to " + detail::shape_str(target));
  Tensor<S> out = Tensor<S>::zeros(target);
  const S* pa = a.data();
  S* po = out.data();
  detail::broadcast_runs1(target, a.shape(),
                          [&](int64_t lin, int64_t ao, int64_t len, int64_t sa) {
                            for (int64_t j = 0; j < len; ++j)
                              po[lin + j] = pa[ao + j * sa];
                          });
  if (a.on_tape()) {
    Tape<S>* tape = a.tape();
    out.bind(tape, tape->add_node(out.numel()));
    const int na = a.node(), no = out.node();
    const auto ashape = a.shape();
    tape->record([tape, na, no, target, ashape] {
      const S* g = tape->grad_buf(no).data();
      S* ga = tape->grad_buf(na).data();
      detail::broadcast_runs1(target, ashape,
                              [&](int64_t lin, int64_t ao, int64_t len, int64_t sa) {
                                for (int64_t j = 0; j < len; ++j)
                                  ga[ao + j * sa] += g[lin + j];
                              });
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions and softmax.
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> sum_axis(const Tensor<S>& a, int axis, bool keepdim = false) {
  const int r = a.rank();
  const int ax = detail::normalize_axis(axis, r, "sum_axis");
  std::vector<int> out_shape;
  for (int d = 0; d < r; ++d) {
    if (d == ax) {
      if (keepdim) out_shape.push_back(1);
    } else {
      out_shape.push_back(a.shape()[static_cast<size_t>(d)]);
    }
  }
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor<S> out = Tensor<S>::zeros(out_shape);

  int64_t outer = 1, inner = 1;
  const int64_t nax = a.shape()[static_cast<size_t>(ax)];
  for (int d = 0; d < ax; ++d) outer *= a.shape()[static_cast<size_t>(d)];
  for (int d = ax + 1; d < r; ++d) inner *= a.shape()[static_cast<size_t>(d)];

  const S* pa = a.data();
  S* po = out.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t t = 0; t < nax; ++t) {
      const S* src = pa + (o * nax + t) * inner;
      S* dst = po + o * inner;
      for (int64_t q = 0; q < inner; ++q) dst[q] += src[q];
    }

  if (a.on_tape()) {
    Tape<S>* tape = a.tape();
    out.bind(tape, tape->add_node(out.numel()));
    const int na = a.node(), no = out.node();
    tape->record([tape, na, no, outer, nax, inner] {
      const S* g = tape->grad_buf(no).data();
      S* ga = tape->grad_buf(na).data();
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t t = 0; t < nax; ++t) {
          S* dst = ga + (o * nax + t) * inner;
          const S* src = g + o * inner;
          for (int64_t q = 0; q < inner; ++q) dst[q] += src[q];
        }
    });
  }
  return out;
}

template <typename S>
Tensor<S> sum_all(const Tensor<S>& a) {
  Tensor<S> out = Tensor<S>::zeros({1});
  const S* pa = a.data();
  S acc = S(0);
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) acc += pa[i];
  out.data()[0] = acc;
  if (a.on_tape()) {
    Tape<S>* tape = a.tape();
    out.bind(tape, tape->add_node(1));
    const int na = a.node(), no = out.node();
    tape->record([tape, na, no, n] {
      const S g = tape->grad_buf(no)[0];
      S* ga = tape->grad_buf(na).data();
      for (int64_t i = 0; i < n; ++i) ga[i] += g;
    });
  }
  return out;
}

template <typename S>
Tensor<S> mean_all(const Tensor<S>& a) {
  return mul_scalar(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

// Normalized exponential along an axis, computed with max-subtraction.
template <typename S>
Tensor<S> softmax(const Tensor<S>& a, int axis) {
  const int r = a.rank();
  const int ax = detail::normalize_axis(axis, r, "softmax");
  Tensor<S> out = Tensor<S>::zeros(a.shape());

  int64_t outer = 1, inner = 1;
  const int64_t nax = a.shape()[static_cast<size_t>(ax)];
  for (int d = 0; d < ax; ++d) outer *= a.shape()[static_cast<size_t>(d)];
  for (int d = ax + 1; d < r; ++d) inner *= a.shape()[static_cast<size_t>(d)];

  const S* pa = a.data();
  S* po = out.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t q = 0; q < inner; ++q) {
      const int64_t base = o * nax * inner + q;
      S mx = pa[base];
      for (int64_t t = 1; t < nax; ++t) mx = std::max(mx, pa[base + t * inner]);
      S sum = S(0);
      for (int64_t t = 0; t < nax; ++t) {
        const S e = std::exp(pa[base + t * inner] - mx);
        po[base + t * inner] = e;
        sum += e;
      }
      const S rsum = S(1) / sum;
      for (int64_t t = 0; t < nax; ++t) po[base + t * inner] *= rsum;
    }

  if (a.on_tape()) {
    Tape<S>* tape = a.tape();
    out.bind(tape, tape->add_node(out.numel()));
    Tensor<S> co = out;
    const int na = a.node(), no = out.node();
    tape->record([tape, na, no, co, outer, nax, inner] {
      const S* g = tape->grad_buf(no).data();
      const S* y = co.data();
      S* ga = tape->grad_buf(na).data();
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t q = 0; q < inner; ++q) {
          const int64_t base = o * nax * inner + q;
          S dot = S(0);
          for (int64_t t = 0; t < nax; ++t)
            dot += y[base + t * inner] * g[base + t * inner];
          for (int64_t t = 0; t < nax; ++t)
            ga[base + t * inner] +=
                y[base + t * inner] * (g[base + t * inner] - dot);
        }
    });
  }
  return out;
}

}  // namespace gpnr
