#pragma once

// Dense tensor engine with reverse-mode autodiff on a recording tape.
// Tensors are shared handles onto contiguous row-major storage; ops append a
// backward closure to the active tape. Replaying the tape in reverse order
// (which equals reverse execution order) accumulates gradients into every
// requires_grad leaf. Gradients accumulate with += across fan-out; callers
// zero them explicitly between iterations.
//
// A tape and the tensors recorded on it belong to one logical thread.
// Independent tapes may run concurrently.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "pdt/common.hpp"
#include "pdt/kernels.hpp"

namespace pdt {

template <class T>
struct Storage {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool needs_grad = false;  // requires_grad, or derived from such on a tape
  const void* src_tape = nullptr;
  uint64_t src_gen = 0;
};

template <class T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : st_(std::make_shared<Storage<T>>()) {
    check_shape(shape);
    st_->shape = std::move(shape);
    st_->data.assign(shape_numel(st_->shape), fill);
  }

  Tensor(Shape shape, std::vector<T> values) : st_(std::make_shared<Storage<T>>()) {
    check_shape(shape);
    if (shape_numel(shape) != static_cast<int64_t>(values.size()))
      throw ShapeError("tensor: " + shape_str(shape) + " does not hold " +
                       std::to_string(values.size()) + " values");
    st_->shape = std::move(shape);
    st_->data = std::move(values);
  }

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  static Tensor uniform(Shape shape, double lo, double hi, Rng& rng,
                        bool requires_grad = false) {
    Tensor t(std::move(shape));
    for (auto& x : t.st_->data) x = static_cast<T>(rand_uniform(rng, lo, hi));
    t.set_requires_grad(requires_grad);
    return t;
  }

  bool defined() const { return st_ != nullptr; }
  const Shape& shape() const { return st_->shape; }
  size_t ndim() const { return st_->shape.size(); }
  int64_t dim(size_t i) const { return st_->shape[i]; }
  int64_t numel() const { return static_cast<int64_t>(st_->data.size()); }
  T* data() { return st_->data.data(); }
  const T* data() const { return st_->data.data(); }
  std::vector<T>& values() { return st_->data; }
  const std::vector<T>& values() const { return st_->data; }

  T item() const {
    if (numel() != 1) throw ContractError("item: tensor " + shape_str(shape()) + " is not a scalar");
    return st_->data[0];
  }

  bool requires_grad() const { return st_->requires_grad; }
  void set_requires_grad(bool b) {
    st_->requires_grad = b;
    st_->needs_grad = b;
  }

  bool has_grad() const { return !st_->grad.empty(); }
  void ensure_grad() {
    if (st_->grad.empty()) st_->grad.assign(st_->data.size(), T(0));
  }
  void zero_grad() {
    if (!st_->grad.empty()) std::fill(st_->grad.begin(), st_->grad.end(), T(0));
  }
  T* grad() {
    ensure_grad();
    return st_->grad.data();
  }
  const std::vector<T>& grad_values() const { return st_->grad; }

  std::shared_ptr<Storage<T>>& storage() { return st_; }
  const std::shared_ptr<Storage<T>>& storage() const { return st_; }

  bool same_storage(const Tensor& o) const { return st_ == o.st_; }

 private:
  static void check_shape(const Shape& s) {
    for (int64_t d : s)
      if (d < 1) throw ShapeError("tensor: dimension sizes must be >= 1, got " + shape_str(s));
  }
  std::shared_ptr<Storage<T>> st_;
};

// Integer index tensor for vocab ids and masks; never differentiable.
struct IntTensor {
  Shape shape;
  std::vector<int64_t> data;

  IntTensor() = default;
  IntTensor(Shape s, std::vector<int64_t> v) : shape(std::move(s)), data(std::move(v)) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size()))
      throw ShapeError("int tensor: shape " + shape_str(shape) + " does not hold " +
                       std::to_string(data.size()) + " values");
  }
  int64_t dim(size_t i) const { return shape[i]; }
  int64_t numel() const { return static_cast<int64_t>(data.size()); }
};

template <class T>
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  size_t size() const { return ops_.size(); }
  uint64_t generation() const { return generation_; }

  void record(std::function<void()> backward_fn) {
    ops_.push_back(std::move(backward_fn));
  }

  // Marks `out` as produced by this tape at the current generation.
  template <class S>
  void stamp(Tensor<S>& out) {
    out.storage()->src_tape = this;
    out.storage()->src_gen = generation_;
  }

  bool owns(const Tensor<T>& t) const {
    return t.storage()->src_tape == this && t.storage()->src_gen == generation_;
  }

  // Seeds d(loss)/d(loss) = 1 and runs every recorded op once, in reverse
  // execution order. The tape is consumed afterwards.
  void backward(Tensor<T>& loss) {
    if (!loss.defined() || loss.numel() != 1 || !loss.shape().empty())
      throw ContractError("backward: loss must be a scalar, got " +
                          (loss.defined() ? shape_str(loss.shape()) : std::string("<null>")));
    if (!recording_ || ops_.empty() || !owns(loss))
      throw ContractError("backward: loss is not connected to this tape");
    loss.ensure_grad();
    loss.grad()[0] += T(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    ops_.clear();
    ++generation_;
  }

  // Drops recorded ops without running them (e.g. a forward-only probe on a
  // recording tape).
  void discard() {
    ops_.clear();
    ++generation_;
  }

 private:
  std::vector<std::function<void()>> ops_;
  bool recording_;
  uint64_t generation_ = 1;
};

namespace detail {

template <class T>
inline bool want_grad(const Tape<T>& tp, std::initializer_list<const Tensor<T>*> ins) {
  if (!tp.recording()) return false;
  for (auto* t : ins)
    if ((*t).storage()->needs_grad) return true;
  return false;
}

template <class T>
inline Tensor<T> make_out(Tape<T>& tp, Shape shape, bool needs) {
  Tensor<T> out(std::move(shape));
  out.storage()->needs_grad = needs;
  if (needs) tp.stamp(out);
  return out;
}

template <class T>
inline void collapse_rows(const Tensor<T>& a, int64_t& rows, int64_t& cols) {
  if (a.ndim() < 1) throw ShapeError("expected at least 1-d tensor, got scalar");
  cols = a.shape().back();
  rows = a.numel() / cols;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

// a: [..., K] with leading dims collapsed row-wise, b: [K, N] -> [..., N]
template <class T>
Tensor<T> matmul(Tape<T>& tp, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() < 2 || b.ndim() != 2 || a.shape().back() != b.dim(0))
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  int64_t m, k;
  detail::collapse_rows(a, m, k);
  int64_t n = b.dim(1);
  Shape out_shape = a.shape();
  out_shape.back() = n;
  bool needs = detail::want_grad(tp, {&a, &b});
  Tensor<T> out = detail::make_out(tp, out_shape, needs);
  detail::matmul_nn(a.data(), b.data(), out.data(), m, k, n, false);
  if (needs) {
    Tensor<T> av = a, bv = b, ov = out;
    tp.record([av, bv, ov, m, k, n]() mutable {
      const T* dc = ov.grad();
      if (av.storage()->needs_grad) {
        av.ensure_grad();
        detail::matmul_nt(dc, bv.data(), av.grad(), m, n, k, true);
      }
      if (bv.storage()->needs_grad) {
        bv.ensure_grad();
        detail::matmul_tn(av.data(), dc, bv.grad(), k, m, n, true);
      }
    });
  }
  return out;
}

// a: [..., K], b: [N, K] -> [..., N]   (C = A * B^T)
template <class T>
Tensor<T> matmul_nt(Tape<T>& tp, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() < 1 || b.ndim() != 2 || a.shape().back() != b.dim(1))
    throw ShapeError("matmul_nt: incompatible shapes " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()) + "^T");
  int64_t m, k;
  detail::collapse_rows(a, m, k);
  int64_t n = b.dim(0);
  Shape out_shape = a.shape();
  out_shape.back() = n;
  bool needs = detail::want_grad(tp, {&a, &b});
  Tensor<T> out = detail::make_out(tp, out_shape, needs);
  detail::matmul_nt(a.data(), b.data(), out.data(), m, k, n, false);
  if (needs) {
    Tensor<T> av = a, bv = b, ov = out;
    tp.record([av, bv, ov, m, k, n]() mutable {
      const T* dc = ov.grad();
      if (av.storage()->needs_grad) {
        av.ensure_grad();
        detail::matmul_nn(dc, bv.data(), av.grad(), m, n, k, true);
      }
      if (bv.storage()->needs_grad) {
        bv.ensure_grad();
        detail::matmul_tn(dc, av.data(), bv.grad(), n, m, k, true);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise and broadcast arithmetic.
// Broadcasting is limited to scalar-tensor and bias-vector over the last axis.

namespace detail {
enum class BroadcastKind { Same, Bias, Scalar };

template <class T>
inline BroadcastKind classify_broadcast(const Tensor<T>& a, const Tensor<T>& b,
                                        const char* op) {
  if (a.shape() == b.shape()) return BroadcastKind::Same;
  if (b.numel() == 1 && b.ndim() == 0) return BroadcastKind::Scalar;
  if (b.ndim() == 1 && a.ndim() >= 1 && a.shape().back() == b.dim(0))
    return BroadcastKind::Bias;
  throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(b.shape()) +
                   " onto " + shape_str(a.shape()));
}
}  // namespace detail

template <class T>
Tensor<T> add(Tape<T>& tp, const Tensor<T>& a, const Tensor<T>& b) {
  auto kind = detail::classify_broadcast(a, b, "add");
  bool needs = detail::want_grad(tp, {&a, &b});
  Tensor<T> out = detail::make_out(tp, a.shape(), needs);
  const int64_t n = a.numel();
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  if (kind == detail::BroadcastKind::Same) {
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  } else if (kind == detail::BroadcastKind::Scalar) {
    T s = pb[0];
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + s;
  } else {
    int64_t d = b.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i % d];
  }
  if (needs) {
    Tensor<T> av = a, bv = b, ov = out;
    tp.record([av, bv, ov, kind]() mutable {
      const T* dc = ov.grad();
      int64_t n = ov.numel();
      if (av.storage()->needs_grad) {
        av.ensure_grad();
        T* da = av.grad();
        for (int64_t i = 0; i < n; ++i) da[i] += dc[i];
      }
      if (bv.storage()->needs_grad) {
        bv.ensure_grad();
        T* db = bv.grad();
        if (kind == detail::BroadcastKind::Same) {
          for (int64_t i = 0; i < n; ++i) db[i] += dc[i];
        } else if (kind == detail::BroadcastKind::Scalar) {
          T s = T(0);
          for (int64_t i = 0; i < n; ++i) s += dc[i];
          db[0] += s;
        } else {
          int64_t d = bv.numel();
          for (int64_t i = 0; i < n; ++i) db[i % d] += dc[i];
        }
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> sub(Tape<T>& tp, const Tensor<T>& a, const Tensor<T>& b) {
  auto kind = detail::classify_broadcast(a, b, "sub");
  bool needs = detail::want_grad(tp, {&a, &b});
  Tensor<T> out = detail::make_out(tp, a.shape(), needs);
  const int64_t n = a.numel();
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  if (kind == detail::BroadcastKind::Same) {
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
  } else if (kind == detail::BroadcastKind::Scalar) {
    T s = pb[0];
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - s;
  } else {
    int64_t d = b.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i % d];
  }
  if (needs) {
    Tensor<T> av = a, bv = b, ov = out;
    tp.record([av, bv, ov, kind]() mutable {
      const T* dc = ov.grad();
      int64_t n = ov.numel();
      if (av.storage()->needs_grad) {
        av.ensure_grad();
        T* da = av.grad();
        for (int64_t i = 0; i < n; ++i) da[i] += dc[i];
      }
      if (bv.storage()->needs_grad) {
        bv.ensure_grad();
        T* db = bv.grad();
        if (kind == detail::BroadcastKind::Same) {
          for (int64_t i = 0; i < n; ++i) db[i] -= dc[i];
        } else if (kind == detail::BroadcastKind::Scalar) {
          T s = T(0);
          for (int64_t i = 0; i < n; ++i) s += dc[i];
          db[0] -= s;
        } else {
          int64_t d = bv.numel();
          for (int64_t i = 0; i < n; ++i) db[i % d] -= dc[i];
        }
      }
    });
  }
  return out;
}

// Hadamard product; also supports scalar b.
template <class T>
Tensor<T> mul(Tape<T>& tp, const Tensor<T>& a, const Tensor<T>& b) {
  auto kind = detail::classify_broadcast(a, b, "mul");
  if (kind == detail::BroadcastKind::Bias)
    throw ShapeError("mul: bias broadcast not supported, shapes " + shape_str(a.shape()) +
                     " * " + shape_str(b.shape()));
  bool needs = detail::want_grad(tp, {&a, &b});
  Tensor<T> out = detail::make_out(tp, a.shape(), needs);
  const int64_t n = a.numel();
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  if (kind == detail::BroadcastKind::Same) {
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
  } else {
    T s = pb[0];
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * s;
  }
  if (needs) {
    Tensor<T> av = a, bv = b, ov = out;
    tp.record([av, bv, ov, kind]() mutable {
      const T* dc = ov.grad();
      int64_t n = ov.numel();
      if (av.storage()->needs_grad) {
        av.ensure_grad();
        T* da = av.grad();
        if (kind == detail::BroadcastKind::Same) {
          const T* pb = bv.data();
          for (int64_t i = 0; i < n; ++i) da[i] += dc[i] * pb[i];
        } else {
          T s = bv.data()[0];
          for (int64_t i = 0; i < n; ++i) da[i] += dc[i] * s;
        }
      }
      if (bv.storage()->needs_grad) {
        bv.ensure_grad();
        T* db = bv.grad();
        const T* pa = av.data();
        if (kind == detail::BroadcastKind::Same) {
          for (int64_t i = 0; i < n; ++i) db[i] += dc[i] * pa[i];
        } else {
          T s = T(0);
          for (int64_t i = 0; i < n; ++i) s += dc[i] * pa[i];
          db[0] += s;
        }
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> scale(Tape<T>& tp, const Tensor<T>& a, double c) {
  bool needs = detail::want_grad(tp, {&a});
  Tensor<T> out = detail::make_out(tp, a.shape(), needs);
  const int64_t n = a.numel();
  const T* pa = a.data();
  T* po = out.data();
  const T tc = static_cast<T>(c);
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * tc;
  if (needs) {
    Tensor<T> av = a, ov = out;
    tp.record([av, ov, tc]() mutable {
      av.ensure_grad();
      const T* dc = ov.grad();
      T* da = av.grad();
      int64_t n = ov.numel();
      for (int64_t i = 0; i < n; ++i) da[i] += dc[i] * tc;
    });
  }
  return out;
}

template <class T>
Tensor<T> neg(Tape<T>& tp, const Tensor<T>& a) {
  return scale(tp, a, -1.0);
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Tensor<T> sum(Tape<T>& tp, const Tensor<T>& a) {
  bool needs = detail::want_grad(tp, {&a});
  Tensor<T> out = detail::make_out(tp, Shape{}, needs);
  T s = T(0);
  const T* pa = a.data();
  for (int64_t i = 0; i < a.numel(); ++i) s += pa[i];
  out.data()[0] = s;
  if (needs) {
    Tensor<T> av = a, ov = out;
    tp.record([av, ov]() mutable {
      av.ensure_grad();
      T g = ov.grad()[0];
      T* da = av.grad();
      for (int64_t i = 0; i < av.numel(); ++i) da[i] += g;
    });
  }
  return out;
}

template <class T>
Tensor<T> mean(Tape<T>& tp, const Tensor<T>& a) {
  Tensor<T> s = sum(tp, a);
  return scale(tp, s, 1.0 / static_cast<double>(a.numel()));
}

// Mean of the entries where mask != 0. `mask` runs over the same flat layout.
template <class T>
Tensor<T> masked_mean(Tape<T>& tp, const Tensor<T>& a, const std::vector<uint8_t>& mask) {
  if (static_cast<int64_t>(mask.size()) != a.numel())
    throw ShapeError("masked_mean: mask size " + std::to_string(mask.size()) +
                     " != numel " + std::to_string(a.numel()));
  int64_t cnt = 0;
  for (uint8_t m : mask) cnt += (m != 0);
  if (cnt == 0) throw ContractError("masked_mean: mask selects no entries");
  bool needs = detail::want_grad(tp, {&a});
  Tensor<T> out = detail::make_out(tp, Shape{}, needs);
  T s = T(0);
  const T* pa = a.data();
  for (int64_t i = 0; i < a.numel(); ++i)
    if (mask[i]) s += pa[i];
  out.data()[0] = s / static_cast<T>(cnt);
  if (needs) {
    Tensor<T> av = a, ov = out;
    auto mk = std::make_shared<std::vector<uint8_t>>(mask);
    tp.record([av, ov, mk, cnt]() mutable {
      av.ensure_grad();
      T g = ov.grad()[0] / static_cast<T>(cnt);
      T* da = av.grad();
      for (int64_t i = 0; i < av.numel(); ++i)
        if ((*mk)[i]) da[i] += g;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Nonlinearities

// Softmax along `axis`; max-subtraction for stability. NaN inputs propagate.
template <class T>
Tensor<T> softmax(Tape<T>& tp, const Tensor<T>& a, int axis) {
  if (a.ndim() == 0) throw ShapeError("softmax: scalar input");
  if (axis < 0) axis += static_cast<int>(a.ndim());
  if (axis < 0 || axis >= static_cast<int>(a.ndim()))
    throw ShapeError("softmax: axis out of range for " + shape_str(a.shape()));
  int64_t n = a.dim(axis);
  int64_t inner = 1;
  for (size_t i = axis + 1; i < a.ndim(); ++i) inner *= a.dim(i);
  int64_t outer = a.numel() / (n * inner);

  bool needs = detail::want_grad(tp, {&a});
  Tensor<T> out = detail::make_out(tp, a.shape(), needs);
  const T* pa = a.data();
  T* po = out.data();
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      const T* x = pa + o * n * inner + in;
      T* y = po + o * n * inner + in;
      T mx = x[0];
      for (int64_t i = 1; i < n; ++i) mx = std::max(mx, x[i * inner]);
      T denom = T(0);
      for (int64_t i = 0; i < n; ++i) {
        T e = std::exp(x[i * inner] - mx);
        y[i * inner] = e;
        denom += e;
      }
      for (int64_t i = 0; i < n; ++i) y[i * inner] /= denom;
    }
  }
  if (needs) {
    Tensor<T> av = a, ov = out;
    tp.record([av, ov, n, inner, outer]() mutable {
      av.ensure_grad();
      const T* y = ov.data();
      const T* dy = ov.grad();
      T* dx = av.grad();
      for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
          int64_t base = o * n * inner + in;
          T dot = T(0);
          for (int64_t i = 0; i < n; ++i) dot += y[base + i * inner] * dy[base + i * inner];
          for (int64_t i = 0; i < n; ++i)
            dx[base + i * inner] += y[base + i * inner] * (dy[base + i * inner] - dot);
        }
      }
    });
  }
  return out;
}

// Per-last-axis normalization (x-mean)/sqrt(var+eps) * gamma + beta.
template <class T>
Tensor<T> layer_norm(Tape<T>& tp, const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, double eps) {
  if (x.ndim() < 1) throw ShapeError("layer_norm: scalar input");
  int64_t d = x.shape().back();
  if (gamma.numel() != d || beta.numel() != d)
    throw ShapeError("layer_norm: gamma/beta must be [" + std::to_string(d) + "]");
  if (eps <= 0) throw ContractError("layer_norm: eps must be positive");
  int64_t rows = x.numel() / d;
  bool needs = detail::want_grad(tp, {&x, &gamma, &beta});
  Tensor<T> out = detail::make_out(tp, x.shape(), needs);
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto rstd = std::make_shared<std::vector<T>>(rows);
  const T* px = x.data();
  const T* pg = gamma.data();
  const T* pb = beta.data();
  T* po = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = px + r * d;
    T mu = T(0);
    for (int64_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<T>(d);
    T var = T(0);
    for (int64_t j = 0; j < d; ++j) {
      T c = xr[j] - mu;
      var += c * c;
    }
    var /= static_cast<T>(d);
    T rs = T(1) / std::sqrt(var + static_cast<T>(eps));
    (*rstd)[r] = rs;
    T* hr = xhat->data() + r * d;
    T* yr = po + r * d;
    for (int64_t j = 0; j < d; ++j) {
      hr[j] = (xr[j] - mu) * rs;
      yr[j] = hr[j] * pg[j] + pb[j];
    }
  }
  if (needs) {
    Tensor<T> xv = x, gv = gamma, bv = beta, ov = out;
    tp.record([xv, gv, bv, ov, xhat, rstd, rows, d]() mutable {
      const T* dy = ov.grad();
      const T* pg = gv.data();
      if (bv.storage()->needs_grad) {
        bv.ensure_grad();
        T* db = bv.grad();
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t j = 0; j < d; ++j) db[j] += dy[r * d + j];
      }
      if (gv.storage()->needs_grad) {
        gv.ensure_grad();
        T* dg = gv.grad();
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t j = 0; j < d; ++j) dg[j] += dy[r * d + j] * (*xhat)[r * d + j];
      }
      if (xv.storage()->needs_grad) {
        xv.ensure_grad();
        T* dx = xv.grad();
        for (int64_t r = 0; r < rows; ++r) {
          const T* dyr = dy + r * d;
          const T* hr = xhat->data() + r * d;
          T m1 = T(0), m2 = T(0);
          for (int64_t j = 0; j < d; ++j) {
            T t = dyr[j] * pg[j];
            m1 += t;
            m2 += t * hr[j];
          }
          m1 /= static_cast<T>(d);
          m2 /= static_cast<T>(d);
          T rs = (*rstd)[r];
          for (int64_t j = 0; j < d; ++j)
            dx[r * d + j] += rs * (dyr[j] * pg[j] - m1 - hr[j] * m2);
        }
      }
    });
  }
  return out;
}

// Exact-erf GELU: x * Phi(x).
template <class T>
Tensor<T> gelu(Tape<T>& tp, const Tensor<T>& a) {
  bool needs = detail::want_grad(tp, {&a});
  Tensor<T> out = detail::make_out(tp, a.shape(), needs);
  const int64_t n = a.numel();
  const T* pa = a.data();
  T* po = out.data();
  const T inv_sqrt2 = static_cast<T>(0.7071067811865475244);
  for (int64_t i = 0; i < n; ++i) {
    T x = pa[i];
    po[i] = static_cast<T>(0.5) * x * (T(1) + std::erf(x * inv_sqrt2));
  }
  if (needs) {
    Tensor<T> av = a, ov = out;
    tp.record([av, ov, inv_sqrt2]() mutable {
      av.ensure_grad();
      const T* dc = ov.grad();
      const T* pa = av.data();
      T* da = av.grad();
      const T inv_sqrt2pi = static_cast<T>(0.3989422804014326779);
      for (int64_t i = 0; i < av.numel(); ++i) {
        T x = pa[i];
        T phi = static_cast<T>(0.5) * (T(1) + std::erf(x * inv_sqrt2));
        T dens = inv_sqrt2pi * std::exp(static_cast<T>(-0.5) * x * x);
        da[i] += dc[i] * (phi + x * dens);
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> sigmoid(Tape<T>& tp, const Tensor<T>& a) {
  bool needs = detail::want_grad(tp, {&a});
  Tensor<T> out = detail::make_out(tp, a.shape(), needs);
  const T* pa = a.data();
  T* po = out.data();
  for (int64_t i = 0; i < a.numel(); ++i) {
    T x = pa[i];
    if (x >= T(0)) {
      po[i] = T(1) / (T(1) + std::exp(-x));
    } else {
      T e = std::exp(x);
      po[i] = e / (T(1) + e);
    }
  }
  if (needs) {
    Tensor<T> av = a, ov = out;
    tp.record([av, ov]() mutable {
      av.ensure_grad();
      const T* y = ov.data();
      const T* dc = ov.grad();
      T* da = av.grad();
      for (int64_t i = 0; i < av.numel(); ++i) da[i] += dc[i] * y[i] * (T(1) - y[i]);
    });
  }
  return out;
}

// Stable softplus log(1+e^x); derivative is sigmoid(x).
template <class T>
Tensor<T> softplus(Tape<T>& tp, const Tensor<T>& a) {
  bool needs = detail::want_grad(tp, {&a});
  Tensor<T> out = detail::make_out(tp, a.shape(), needs);
  const T* pa = a.data();
  T* po = out.data();
  for (int64_t i = 0; i < a.numel(); ++i) {
    T x = pa[i];
    po[i] = std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
  }
  if (needs) {
    Tensor<T> av = a, ov = out;
    tp.record([av, ov]() mutable {
      av.ensure_grad();
      const T* pa = av.data();
      const T* dc = ov.grad();
      T* da = av.grad();
      for (int64_t i = 0; i < av.numel(); ++i) {
        T x = pa[i];
        T s;
        if (x >= T(0)) {
          s = T(1) / (T(1) + std::exp(-x));
        } else {
          T e = std::exp(x);
          s = e / (T(1) + e);
        }
        da[i] += dc[i] * s;
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> log_op(Tape<T>& tp, const Tensor<T>& a) {
  bool needs = detail::want_grad(tp, {&a});
  Tensor<T> out = detail::make_out(tp, a.shape(), needs);
  const T* pa = a.data();
  T* po = out.data();
  for (int64_t i = 0; i < a.numel(); ++i) po[i] = std::log(pa[i]);
  if (needs) {
    Tensor<T> av = a, ov = out;
    tp.record([av, ov]() mutable {
      av.ensure_grad();
      const T* pa = av.data();
      const T* dc = ov.grad();
      T* da = av.grad();
      for (int64_t i = 0; i < av.numel(); ++i) da[i] += dc[i] / pa[i];
    });
  }
  return out;
}

// max(x, c); gradient passes where x >= c.
template <class T>
Tensor<T> clamp_min(Tape<T>& tp, const Tensor<T>& a, double c) {
  bool needs = detail::want_grad(tp, {&a});
  Tensor<T> out = detail::make_out(tp, a.shape(), needs);
  const T tc = static_cast<T>(c);
  const T* pa = a.data();
  T* po = out.data();
  for (int64_t i = 0; i < a.numel(); ++i) po[i] = std::max(pa[i], tc);
  if (needs) {
    Tensor<T> av = a, ov = out;
    tp.record([av, ov, tc]() mutable {
      av.ensure_grad();
      const T* pa = av.data();
      const T* dc = ov.grad();
      T* da = av.grad();
      for (int64_t i = 0; i < av.numel(); ++i)
        if (pa[i] >= tc) da[i] += dc[i];
    });
  }
  return out;
}

// Inverted dropout: zero with probability p, scale survivors by 1/(1-p).
// Identity when not training or p == 0.
template <class T>
Tensor<T> dropout(Tape<T>& tp, const Tensor<T>& a, double p, bool training, Rng& rng) {
  if (p < 0 || p >= 1) throw ContractError("dropout: p must be in [0,1)");
  if (!training || p == 0.0) return a;
  bool needs = detail::want_grad(tp, {&a});
  Tensor<T> out = detail::make_out(tp, a.shape(), needs);
  auto mult = std::make_shared<std::vector<T>>(a.numel());
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  const T* pa = a.data();
  T* po = out.data();
  for (int64_t i = 0; i < a.numel(); ++i) {
    T m = (rand_unit(rng) < p) ? T(0) : keep_scale;
    (*mult)[i] = m;
    po[i] = pa[i] * m;
  }
  if (needs) {
    Tensor<T> av = a, ov = out;
    tp.record([av, ov, mult]() mutable {
      av.ensure_grad();
      const T* dc = ov.grad();
      T* da = av.grad();
      for (int64_t i = 0; i < av.numel(); ++i) da[i] += dc[i] * (*mult)[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gather / scatter ops

// Row gather over a [V, d] table; pad_index rows come back zero and receive
// no gradient. indices: [B, L] -> output [B, L, d].
template <class T>
Tensor<T> embedding_seq(Tape<T>& tp, const Tensor<T>& table, const IntTensor& idx,
                        int64_t pad_index) {
  if (table.ndim() != 2) throw ShapeError("embedding_seq: table must be 2-d");
  if (idx.shape.size() != 2) throw ShapeError("embedding_seq: indices must be [B, L]");
  int64_t v = table.dim(0), d = table.dim(1);
  for (int64_t id : idx.data)
    if (id < 0 || id >= v)
      throw IndexError("embedding_seq: index " + std::to_string(id) +
                       " out of range [0," + std::to_string(v) + ")");
  int64_t b = idx.dim(0), l = idx.dim(1);
  bool needs = detail::want_grad(tp, {&table});
  Tensor<T> out = detail::make_out(tp, Shape{b, l, d}, needs);
  const T* pt = table.data();
  T* po = out.data();
  for (int64_t i = 0; i < b * l; ++i) {
    int64_t id = idx.data[i];
    if (id == pad_index) {
      std::fill(po + i * d, po + (i + 1) * d, T(0));
    } else {
      std::memcpy(po + i * d, pt + id * d, sizeof(T) * d);
    }
  }
  if (needs) {
    Tensor<T> tv = table, ov = out;
    auto ids = std::make_shared<std::vector<int64_t>>(idx.data);
    tp.record([tv, ov, ids, pad_index, d]() mutable {
      tv.ensure_grad();
      const T* dc = ov.grad();
      T* dt = tv.grad();
      for (size_t i = 0; i < ids->size(); ++i) {
        int64_t id = (*ids)[i];
        if (id == pad_index) continue;
        detail::axpy(dt + id * d, T(1), dc + i * d, d);
      }
    });
  }
  return out;
}

// Row gather for anchor ids; pad (or any out-of-vocab) id is a caller bug.
template <class T>
Tensor<T> embedding_rows(Tape<T>& tp, const Tensor<T>& table, const std::vector<int64_t>& ids) {
  if (table.ndim() != 2) throw ShapeError("embedding_rows: table must be 2-d");
  if (ids.empty()) throw ContractError("embedding_rows: empty id list");
  int64_t v = table.dim(0), d = table.dim(1);
  for (int64_t id : ids)
    if (id < 1 || id >= v)
      throw ContractError("embedding_rows: id " + std::to_string(id) +
                          " is pad or out of range [1," + std::to_string(v) + ")");
  int64_t b = static_cast<int64_t>(ids.size());
  bool needs = detail::want_grad(tp, {&table});
  Tensor<T> out = detail::make_out(tp, Shape{b, d}, needs);
  const T* pt = table.data();
  T* po = out.data();
  for (int64_t i = 0; i < b; ++i) std::memcpy(po + i * d, pt + ids[i] * d, sizeof(T) * d);
  if (needs) {
    Tensor<T> tv = table, ov = out;
    auto idv = std::make_shared<std::vector<int64_t>>(ids);
    tp.record([tv, ov, idv, d]() mutable {
      tv.ensure_grad();
      const T* dc = ov.grad();
      T* dt = tv.grad();
      for (size_t i = 0; i < idv->size(); ++i)
        detail::axpy(dt + (*idv)[i] * d, T(1), dc + i * d, d);
    });
  }
  return out;
}

// table[row, :] as a [d] tensor.
template <class T>
Tensor<T> slice_row(Tape<T>& tp, const Tensor<T>& table, int64_t row) {
  if (table.ndim() != 2) throw ShapeError("slice_row: table must be 2-d");
  if (row < 0 || row >= table.dim(0))
    throw IndexError("slice_row: row " + std::to_string(row) + " out of range");
  int64_t d = table.dim(1);
  bool needs = detail::want_grad(tp, {&table});
  Tensor<T> out = detail::make_out(tp, Shape{d}, needs);
  std::memcpy(out.data(), table.data() + row * d, sizeof(T) * d);
  if (needs) {
    Tensor<T> tv = table, ov = out;
    tp.record([tv, ov, row, d]() mutable {
      tv.ensure_grad();
      detail::axpy(tv.grad() + row * d, T(1), ov.grad(), d);
    });
  }
  return out;
}

// x[b, pos[b], :] for each row -> [B, d].
template <class T>
Tensor<T> gather_slots(Tape<T>& tp, const Tensor<T>& x, const std::vector<int64_t>& pos) {
  if (x.ndim() != 3) throw ShapeError("gather_slots: input must be [B, L, d]");
  int64_t b = x.dim(0), l = x.dim(1), d = x.dim(2);
  if (static_cast<int64_t>(pos.size()) != b)
    throw ShapeError("gather_slots: need one position per batch row");
  for (int64_t p : pos)
    if (p < 0 || p >= l) throw IndexError("gather_slots: position " + std::to_string(p) + " out of range");
  bool needs = detail::want_grad(tp, {&x});
  Tensor<T> out = detail::make_out(tp, Shape{b, d}, needs);
  const T* px = x.data();
  T* po = out.data();
  for (int64_t i = 0; i < b; ++i)
    std::memcpy(po + i * d, px + (i * l + pos[i]) * d, sizeof(T) * d);
  if (needs) {
    Tensor<T> xv = x, ov = out;
    auto pv = std::make_shared<std::vector<int64_t>>(pos);
    tp.record([xv, ov, pv, l, d]() mutable {
      xv.ensure_grad();
      const T* dc = ov.grad();
      T* dx = xv.grad();
      for (size_t i = 0; i < pv->size(); ++i)
        detail::axpy(dx + (i * l + (*pv)[i]) * d, T(1), dc + i * d, d);
    });
  }
  return out;
}

// Adds table[start_row + j] to every batch row at slot j.
template <class T>
Tensor<T> add_pos_rows(Tape<T>& tp, const Tensor<T>& x, const Tensor<T>& table,
                       int64_t start_row) {
  if (x.ndim() != 3 || table.ndim() != 2 || x.dim(2) != table.dim(1))
    throw ShapeError("add_pos_rows: shapes " + shape_str(x.shape()) + " + " +
                     shape_str(table.shape()));
  int64_t b = x.dim(0), l = x.dim(1), d = x.dim(2);
  if (start_row < 0 || start_row + l > table.dim(0))
    throw ContractError("add_pos_rows: rows [" + std::to_string(start_row) + "," +
                        std::to_string(start_row + l) + ") exceed table of " +
                        std::to_string(table.dim(0)));
  bool needs = detail::want_grad(tp, {&x, &table});
  Tensor<T> out = detail::make_out(tp, x.shape(), needs);
  const T* px = x.data();
  const T* pt = table.data();
  T* po = out.data();
  for (int64_t i = 0; i < b; ++i)
    for (int64_t j = 0; j < l; ++j) {
      const T* xr = px + (i * l + j) * d;
      const T* tr = pt + (start_row + j) * d;
      T* yr = po + (i * l + j) * d;
      for (int64_t q = 0; q < d; ++q) yr[q] = xr[q] + tr[q];
    }
  if (needs) {
    Tensor<T> xv = x, tv = table, ov = out;
    tp.record([xv, tv, ov, b, l, d, start_row]() mutable {
      const T* dc = ov.grad();
      if (xv.storage()->needs_grad) {
        xv.ensure_grad();
        detail::axpy(xv.grad(), T(1), dc, b * l * d);
      }
      if (tv.storage()->needs_grad) {
        tv.ensure_grad();
        T* dt = tv.grad();
        for (int64_t i = 0; i < b; ++i)
          for (int64_t j = 0; j < l; ++j)
            detail::axpy(dt + (start_row + j) * d, T(1), dc + (i * l + j) * d, d);
      }
    });
  }
  return out;
}

// Prepends `vec` (broadcast over the batch) as slot 0: [B,L,d] -> [B,L+1,d].
template <class T>
Tensor<T> prepend_row(Tape<T>& tp, const Tensor<T>& vec, const Tensor<T>& x) {
  if (x.ndim() != 3 || vec.ndim() != 1 || vec.dim(0) != x.dim(2))
    throw ShapeError("prepend_row: shapes " + shape_str(vec.shape()) + " + " +
                     shape_str(x.shape()));
  int64_t b = x.dim(0), l = x.dim(1), d = x.dim(2);
  bool needs = detail::want_grad(tp, {&vec, &x});
  Tensor<T> out = detail::make_out(tp, Shape{b, l + 1, d}, needs);
  const T* pv = vec.data();
  const T* px = x.data();
  T* po = out.data();
  for (int64_t i = 0; i < b; ++i) {
    std::memcpy(po + i * (l + 1) * d, pv, sizeof(T) * d);
    std::memcpy(po + (i * (l + 1) + 1) * d, px + i * l * d, sizeof(T) * l * d);
  }
  if (needs) {
    Tensor<T> vv = vec, xv = x, ov = out;
    tp.record([vv, xv, ov, b, l, d]() mutable {
      const T* dc = ov.grad();
      if (vv.storage()->needs_grad) {
        vv.ensure_grad();
        for (int64_t i = 0; i < b; ++i)
          detail::axpy(vv.grad(), T(1), dc + i * (l + 1) * d, d);
      }
      if (xv.storage()->needs_grad) {
        xv.ensure_grad();
        T* dx = xv.grad();
        for (int64_t i = 0; i < b; ++i)
          detail::axpy(dx + i * l * d, T(1), dc + (i * (l + 1) + 1) * d, l * d);
      }
    });
  }
  return out;
}

// Row-wise inner product over the last axis: [..., d] x [..., d] -> [...].
template <class T>
Tensor<T> rows_dot(Tape<T>& tp, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape() || a.ndim() < 1)
    throw ShapeError("rows_dot: shapes " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  int64_t rows, d;
  detail::collapse_rows(a, rows, d);
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  bool needs = detail::want_grad(tp, {&a, &b});
  Tensor<T> out = detail::make_out(tp, out_shape, needs);
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (int64_t r = 0; r < rows; ++r) po[r] = detail::dot(pa + r * d, pb + r * d, d);
  if (needs) {
    Tensor<T> av = a, bv = b, ov = out;
    tp.record([av, bv, ov, rows, d]() mutable {
      const T* dc = ov.grad();
      if (av.storage()->needs_grad) {
        av.ensure_grad();
        T* da = av.grad();
        const T* pb = bv.data();
        for (int64_t r = 0; r < rows; ++r) detail::axpy(da + r * d, dc[r], pb + r * d, d);
      }
      if (bv.storage()->needs_grad) {
        bv.ensure_grad();
        T* db = bv.grad();
        const T* pa = av.data();
        for (int64_t r = 0; r < rows; ++r) detail::axpy(db + r * d, dc[r], pa + r * d, d);
      }
    });
  }
  return out;
}

// Row-wise log(sum(exp)); optionally excludes the diagonal entry (requires a
// square matrix). InfoNCE denominators are built from this.
template <class T>
Tensor<T> logsumexp_rows(Tape<T>& tp, const Tensor<T>& x, bool exclude_diag) {
  if (x.ndim() != 2) throw ShapeError("logsumexp_rows: input must be 2-d");
  int64_t b = x.dim(0), n = x.dim(1);
  if (exclude_diag && b != n)
    throw ShapeError("logsumexp_rows: exclude_diag requires a square matrix");
  if (exclude_diag && n < 2)
    throw ContractError("logsumexp_rows: exclude_diag on a 1-column matrix leaves nothing");
  bool needs = detail::want_grad(tp, {&x});
  Tensor<T> out = detail::make_out(tp, Shape{b}, needs);
  const T* px = x.data();
  T* po = out.data();
  for (int64_t i = 0; i < b; ++i) {
    const T* row = px + i * n;
    T mx = -std::numeric_limits<T>::infinity();
    for (int64_t j = 0; j < n; ++j)
      if (!(exclude_diag && j == i)) mx = std::max(mx, row[j]);
    T s = T(0);
    for (int64_t j = 0; j < n; ++j)
      if (!(exclude_diag && j == i)) s += std::exp(row[j] - mx);
    po[i] = mx + std::log(s);
  }
  if (needs) {
    Tensor<T> xv = x, ov = out;
    tp.record([xv, ov, b, n, exclude_diag]() mutable {
      xv.ensure_grad();
      const T* px = xv.data();
      const T* lse = ov.data();
      const T* dc = ov.grad();
      T* dx = xv.grad();
      for (int64_t i = 0; i < b; ++i)
        for (int64_t j = 0; j < n; ++j)
          if (!(exclude_diag && j == i))
            dx[i * n + j] += dc[i] * std::exp(px[i * n + j] - lse[i]);
    });
  }
  return out;
}

template <class T>
Tensor<T> take_diag(Tape<T>& tp, const Tensor<T>& x) {
  if (x.ndim() != 2 || x.dim(0) != x.dim(1))
    throw ShapeError("take_diag: input must be square, got " + shape_str(x.shape()));
  int64_t b = x.dim(0);
  bool needs = detail::want_grad(tp, {&x});
  Tensor<T> out = detail::make_out(tp, Shape{b}, needs);
  for (int64_t i = 0; i < b; ++i) out.data()[i] = x.data()[i * b + i];
  if (needs) {
    Tensor<T> xv = x, ov = out;
    tp.record([xv, ov, b]() mutable {
      xv.ensure_grad();
      const T* dc = ov.grad();
      T* dx = xv.grad();
      for (int64_t i = 0; i < b; ++i) dx[i * b + i] += dc[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fused scaled dot-product attention over heads.
//
// q, k, v: [B, L, d] with d = heads * head_dim; head h occupies columns
// [h*hd, (h+1)*hd). key_mask[b*L+j] != 0 marks a real (non-pad) key.
// Masked keys, and keys j > i under `causal`, get -inf before the softmax.
// Rows whose query is itself a pad slot produce zeros and are skipped; a
// non-pad query with no attendable key raises a contract error.
template <class T>
Tensor<T> attention_core(Tape<T>& tp, const Tensor<T>& q, const Tensor<T>& k,
                         const Tensor<T>& v, const std::vector<uint8_t>& key_mask,
                         int64_t heads, bool causal, double dropout_p = 0.0,
                         bool training = false, Rng* rng = nullptr) {
  if (q.ndim() != 3 || q.shape() != k.shape() || q.shape() != v.shape())
    throw ShapeError("attention: q/k/v must share shape [B,L,d]");
  int64_t b = q.dim(0), l = q.dim(1), d = q.dim(2);
  if (heads < 1 || d % heads != 0)
    throw ShapeError("attention: d=" + std::to_string(d) + " not divisible by heads=" +
                     std::to_string(heads));
  if (static_cast<int64_t>(key_mask.size()) != b * l)
    throw ShapeError("attention: key mask must be [B, L]");
  int64_t hd = d / heads;
  const T inv_scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));

  bool needs = detail::want_grad(tp, {&q, &k, &v});
  Tensor<T> out = detail::make_out(tp, q.shape(), needs);
  // probs saved for backward: [B, heads, L, L]
  auto probs = std::make_shared<std::vector<T>>(static_cast<size_t>(b) * heads * l * l, T(0));
  std::shared_ptr<std::vector<T>> drop_mult;
  bool use_drop = dropout_p > 0.0 && training;
  if (use_drop) {
    if (!rng) throw ContractError("attention: dropout requires an rng");
    drop_mult = std::make_shared<std::vector<T>>(probs->size(), T(0));
  }

  const T* pq = q.data();
  const T* pk = k.data();
  const T* pv = v.data();
  T* po = out.data();
  std::fill(po, po + b * l * d, T(0));
  std::vector<T> srow(l);
  const T keep_scale = use_drop ? static_cast<T>(1.0 / (1.0 - dropout_p)) : T(1);

  for (int64_t bi = 0; bi < b; ++bi) {
    const uint8_t* msk = key_mask.data() + bi * l;
    for (int64_t h = 0; h < heads; ++h) {
      int64_t hoff = h * hd;
      T* pr = probs->data() + ((bi * heads + h) * l) * l;
      for (int64_t i = 0; i < l; ++i) {
        if (!msk[i]) continue;  // pad query: output stays zero
        const T* qrow = pq + (bi * l + i) * d + hoff;
        int64_t jmax = causal ? i + 1 : l;
        T mx = -std::numeric_limits<T>::infinity();
        for (int64_t j = 0; j < jmax; ++j) {
          if (!msk[j]) continue;
          T s = detail::dot(qrow, pk + (bi * l + j) * d + hoff, hd) * inv_scale;
          srow[j] = s;
          mx = std::max(mx, s);
        }
        if (mx == -std::numeric_limits<T>::infinity())
          throw ContractError("attention: non-pad query at (batch " + std::to_string(bi) +
                              ", pos " + std::to_string(i) + ") has no attendable keys");
        T denom = T(0);
        T* prow = pr + i * l;
        for (int64_t j = 0; j < jmax; ++j) {
          if (!msk[j]) continue;
          T e = std::exp(srow[j] - mx);
          prow[j] = e;
          denom += e;
        }
        T* orow = po + (bi * l + i) * d + hoff;
        for (int64_t j = 0; j < jmax; ++j) {
          if (!msk[j]) continue;
          prow[j] /= denom;
          T w = prow[j];
          if (use_drop) {
            T m = (rand_unit(*rng) < dropout_p) ? T(0) : keep_scale;
            (*drop_mult)[(pr - probs->data()) + i * l + j] = m;
            w *= m;
          }
          if (w != T(0)) detail::axpy(orow, w, pv + (bi * l + j) * d + hoff, hd);
        }
      }
    }
  }

  if (needs) {
    Tensor<T> qv = q, kv = k, vv = v, ov = out;
    auto mk = std::make_shared<std::vector<uint8_t>>(key_mask);
    tp.record([qv, kv, vv, ov, probs, drop_mult, mk, b, l, d, hd, heads, causal,
               inv_scale]() mutable {
      bool wq = qv.storage()->needs_grad;
      bool wk = kv.storage()->needs_grad;
      bool wv = vv.storage()->needs_grad;
      if (wq) qv.ensure_grad();
      if (wk) kv.ensure_grad();
      if (wv) vv.ensure_grad();
      const T* dout = ov.grad();
      const T* pq = qv.data();
      const T* pk = kv.data();
      const T* pv = vv.data();
      std::vector<T> dp(l), ds(l);
      for (int64_t bi = 0; bi < b; ++bi) {
        const uint8_t* msk = mk->data() + bi * l;
        for (int64_t h = 0; h < heads; ++h) {
          int64_t hoff = h * hd;
          const T* pr = probs->data() + ((bi * heads + h) * l) * l;
          for (int64_t i = 0; i < l; ++i) {
            if (!msk[i]) continue;
            const T* prow = pr + i * l;
            const T* dorow = dout + (bi * l + i) * d + hoff;
            int64_t jmax = causal ? i + 1 : l;
            // dP = dO . V^T, through attention dropout when present
            for (int64_t j = 0; j < jmax; ++j) {
              if (!msk[j]) {
                dp[j] = T(0);
                continue;
              }
              T g = detail::dot(dorow, pv + (bi * l + j) * d + hoff, hd);
              if (drop_mult) g *= (*drop_mult)[(pr - probs->data()) + i * l + j];
              dp[j] = g;
            }
            // softmax backward on the row
            T dot = T(0);
            for (int64_t j = 0; j < jmax; ++j)
              if (msk[j]) dot += dp[j] * prow[j];
            for (int64_t j = 0; j < jmax; ++j)
              ds[j] = msk[j] ? prow[j] * (dp[j] - dot) : T(0);
            // dV += P'^T dO ; dQ += dS K / sqrt(hd) ; dK += dS^T Q / sqrt(hd)
            if (wv) {
              T* dvb = vv.grad();
              for (int64_t j = 0; j < jmax; ++j) {
                if (!msk[j]) continue;
                T w = prow[j];
                if (drop_mult) w *= (*drop_mult)[(pr - probs->data()) + i * l + j];
                if (w != T(0)) detail::axpy(dvb + (bi * l + j) * d + hoff, w, dorow, hd);
              }
            }
            const T* qrow = pq + (bi * l + i) * d + hoff;
            for (int64_t j = 0; j < jmax; ++j) {
              if (!msk[j] || ds[j] == T(0)) continue;
              T c = ds[j] * inv_scale;
              if (wq) detail::axpy(qv.grad() + (bi * l + i) * d + hoff, c,
                                   pk + (bi * l + j) * d + hoff, hd);
              if (wk) detail::axpy(kv.grad() + (bi * l + j) * d + hoff, c, qrow, hd);
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gradient checking

// Central finite differences against the tape's analytic gradients.
// f must be deterministic (dropout off, fixed rng state per call); two probe
// evaluations are compared bit-for-bit first. Returns the max relative error
// |analytic - numeric| / max(|analytic|, |numeric|, 1e-12) over all elements
// of all params.
template <class T>
double grad_check(const std::function<Tensor<T>(Tape<T>&)>& f,
                  std::span<Tensor<T>> params, double eps) {
  auto eval = [&]() -> T {
    Tape<T> probe(false);
    return f(probe).item();
  };
  T v1 = eval();
  T v2 = eval();
  if (std::memcmp(&v1, &v2, sizeof(T)) != 0)
    throw ContractError("grad_check: f is not deterministic (two forward passes differ)");

  Tape<T> tp(true);
  for (auto& p : params) p.zero_grad();
  Tensor<T> loss = f(tp);
  tp.backward(loss);

  std::vector<std::vector<T>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) {
    p.ensure_grad();
    analytic.push_back(p.grad_values());
  }

  double max_rel = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor<T>& p = params[pi];
    for (int64_t i = 0; i < p.numel(); ++i) {
      T saved = p.data()[i];
      p.data()[i] = saved + static_cast<T>(eps);
      double up = static_cast<double>(eval());
      p.data()[i] = saved - static_cast<T>(eps);
      double dn = static_cast<double>(eval());
      p.data()[i] = saved;
      double numeric = (up - dn) / (2.0 * eps);
      double a = static_cast<double>(analytic[pi][i]);
      double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-12});
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

template <class T>
void zero_grads(std::span<Tensor<T>> params) {
  for (auto& p : params) p.zero_grad();
}

}  // namespace pdt
