#pragma once

// Dense tensor type with a minimal reverse-mode differentiation tape.
//
// Tensors are immutable once an op has produced them; every op allocates a
// fresh output. When a Tape is active (see Tape::Scope) and an input requires
// gradients, the op records a backward step; Tape::backward replays the steps
// in reverse execution order, which is a reverse topological order of the
// graph. The scalar type is a template parameter: float for training, double
// for finite-difference gradient checks.

#include <cassert>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "centermask/common.hpp"
#include "centermask/parallel.hpp"

namespace centermask {

namespace detail {

inline std::int64_t numel_of(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

inline std::string shape_str(const std::vector<int>& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

template <typename T>
struct TensorNode {
  std::vector<int> shape;
  std::vector<T> data;
  bool requires_grad = false;
  std::vector<T> grad;  // empty until the first accumulation

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
  }
};

}  // namespace detail

template <typename T>
class Tape;

template <typename T>
class Tensor {
 public:
  using Node = detail::TensorNode<T>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(std::vector<int> shape) { return full(std::move(shape), T(0)); }

  static Tensor full(std::vector<int> shape, T value) {
    auto n = std::make_shared<Node>();
    std::int64_t count = detail::numel_of(shape);
    if (count < 0) throw ShapeError("tensor shape has a negative dimension");
    n->shape = std::move(shape);
    n->data.assign(static_cast<std::size_t>(count), value);
    return Tensor(std::move(n));
  }

  static Tensor from_data(std::vector<int> shape, std::vector<T> values) {
    if (detail::numel_of(shape) != static_cast<std::int64_t>(values.size())) {
      throw ShapeError(detail::cat("tensor data length ", values.size(),
                                   " does not match shape ", detail::shape_str(shape)));
    }
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->data = std::move(values);
    return Tensor(std::move(n));
  }

  static Tensor scalar(T value) { return from_data({1}, {value}); }

  // A trainable leaf: gradients accumulate here during backward.
  static Tensor param(std::vector<int> shape, std::vector<T> values) {
    Tensor t = from_data(std::move(shape), std::move(values));
    t.node_->requires_grad = true;
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node_->shape; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const { return static_cast<std::int64_t>(node_->data.size()); }
  const std::vector<T>& values() const { return node_->data; }
  const T* data() const { return node_->data.data(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }

  const std::vector<T>& grad() const {
    if (node_->grad.empty()) {
      throw std::runtime_error("tensor has no gradient (backward not run or unreachable)");
    }
    return node_->grad;
  }

  T item() const {
    if (numel() != 1) {
      throw ShapeError(detail::cat("item() on non-scalar tensor ", detail::shape_str(shape())));
    }
    return node_->data[0];
  }

  void zero_grad() const { node_->grad.clear(); }

  // Leaf mutation hook for the optimizer. Tensors on a live tape must not be
  // mutated, so this refuses to run while a tape is active. (The handle is
  // shared; mutation targets the node, hence const.)
  std::vector<T>& mutable_values() const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Ordered record of executed ops for one forward pass. backward() replays the
// record once, in reverse, then clears it; a Tape instance must only be driven
// from one thread.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // RAII activation: ops executed while a Scope is alive record onto the tape.
  class Scope {
   public:
    explicit Scope(Tape& tape) : prev_(current_) { current_ = &tape; }
    ~Scope() { current_ = prev_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* prev_;
  };

  static Tape* current() { return current_; }

  void record(std::function<void()> backward_step) { steps_.push_back(std::move(backward_step)); }

  std::size_t size() const { return steps_.size(); }
  void clear() { steps_.clear(); }

  // Populates grad on every requires_grad tensor reachable from loss.
  // Consumes the tape: each recorded step runs exactly once.
  void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1) {
      throw ShapeError(detail::cat("backward: loss must be scalar, got shape ",
                                   detail::shape_str(loss.shape())));
    }
    if (steps_.empty()) throw std::runtime_error("backward: tape is empty");
    if (!loss.requires_grad()) {
      throw std::runtime_error("backward: loss is not connected to any trainable input");
    }
    loss.node()->ensure_grad();
    loss.node()->grad[0] += T(1);
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
    steps_.clear();
  }

 private:
  inline static thread_local Tape* current_ = nullptr;
  std::vector<std::function<void()>> steps_;
};

template <typename T>
std::vector<T>& Tensor<T>::mutable_values() const {
  if (Tape<T>::current() != nullptr) {
    throw std::runtime_error("mutable_values: tensors may not be mutated while a tape is active");
  }
  return node_->data;
}

namespace detail {

template <typename T>
std::shared_ptr<TensorNode<T>> alloc_node(std::vector<int> shape) {
  auto n = std::make_shared<TensorNode<T>>();
  n->shape = std::move(shape);
  n->data.resize(static_cast<std::size_t>(numel_of(n->shape)));
  return n;
}

template <typename T>
void check_finite(const char* op, const TensorNode<T>& node) {
#ifndef NDEBUG
  for (T v : node.data) {
    if (!std::isfinite(static_cast<double>(v))) {
      throw std::runtime_error(cat(op, ": non-finite value in op output"));
    }
  }
#else
  (void)op;
  (void)node;
#endif
}

// Finalizes an op: debug finiteness check, and backward recording when a tape
// is active and some input requires gradients.
template <typename T>
Tensor<T> finish_op(const char* op, std::shared_ptr<TensorNode<T>> out,
                    std::initializer_list<const Tensor<T>*> inputs,
                    std::function<void()> backward_step) {
  check_finite(op, *out);
  bool needs_grad = false;
  for (const Tensor<T>* in : inputs) {
    if (in->defined() && in->requires_grad()) needs_grad = true;
  }
  if (needs_grad && Tape<T>::current() != nullptr) {
    out->requires_grad = true;
    Tape<T>::current()->record(std::move(backward_step));
  }
  return Tensor<T>(out);
}

// Broadcast layout for binary elementwise ops: equal shapes, a 1-element
// operand, or one operand whose shape is a trailing suffix of the other's
// (the short operand repeats across the leading dimensions).
struct Broadcast {
  bool a_small = false;  // which side is repeated
  bool b_small = false;
  std::int64_t repeat = 1;  // leading block count
  std::int64_t tail = 1;    // elements per block in the small operand
};

inline bool is_suffix(const std::vector<int>& small, const std::vector<int>& big) {
  if (small.size() > big.size()) return false;
  std::size_t off = big.size() - small.size();
  for (std::size_t i = 0; i < small.size(); ++i) {
    if (small[i] != big[off + i]) return false;
  }
  return true;
}

template <typename T>
Broadcast broadcast_layout(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  Broadcast bc;
  if (a.shape() == b.shape()) return bc;
  if (b.numel() == 1) {
    bc.b_small = true;
    bc.repeat = a.numel();
    bc.tail = 1;
    return bc;
  }
  if (a.numel() == 1) {
    bc.a_small = true;
    bc.repeat = b.numel();
    bc.tail = 1;
    return bc;
  }
  if (is_suffix(b.shape(), a.shape())) {
    bc.b_small = true;
    bc.tail = b.numel();
    bc.repeat = a.numel() / b.numel();
    return bc;
  }
  if (is_suffix(a.shape(), b.shape())) {
    bc.a_small = true;
    bc.tail = a.numel();
    bc.repeat = b.numel() / a.numel();
    return bc;
  }
  throw ShapeError(cat(op, ": shapes ", shape_str(a.shape()), " and ", shape_str(b.shape()),
                       " are not broadcast-compatible"));
}

// Reduces a full-size gradient onto a suffix-broadcast operand.
template <typename T>
void reduce_into(const std::vector<T>& g, std::int64_t repeat, std::int64_t tail,
                 std::vector<T>* out) {
  for (std::int64_t r = 0; r < repeat; ++r) {
    const T* src = g.data() + r * tail;
    for (std::int64_t i = 0; i < tail; ++i) (*out)[static_cast<std::size_t>(i)] += src[i];
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

namespace detail {

template <typename T, typename FwdFn, typename AccumFn>
Tensor<T> binary_elementwise(const char* op, const Tensor<T>& a, const Tensor<T>& b, FwdFn fwd,
                             AccumFn accum_grads) {
  Broadcast bc = broadcast_layout(op, a, b);
  const std::vector<int>& out_shape = bc.a_small ? b.shape() : a.shape();
  auto out = alloc_node<T>(out_shape);
  const T* ad = a.data();
  const T* bd = b.data();
  T* od = out->data.data();
  std::int64_t n = static_cast<std::int64_t>(out->data.size());
  for (std::int64_t i = 0; i < n; ++i) {
    std::int64_t ia = bc.a_small ? (i % bc.tail) : i;
    std::int64_t ib = bc.b_small ? (i % bc.tail) : i;
    od[i] = fwd(ad[ia], bd[ib]);
  }
  auto an = a.node();
  auto bn = b.node();
  return finish_op<T>(op, out, {&a, &b},
                      [an, bn, on = out, bc, accum_grads]() {
                        if (on->grad.empty()) return;
                        accum_grads(*an, *bn, *on, bc);
                      });
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_elementwise<T>(
      "add", a, b, [](T x, T y) { return x + y; },
      [](detail::TensorNode<T>& an, detail::TensorNode<T>& bn, const detail::TensorNode<T>& on,
         detail::Broadcast bc) {
        std::int64_t n = static_cast<std::int64_t>(on.grad.size());
        if (an.requires_grad) {
          an.ensure_grad();
          if (bc.a_small) {
            detail::reduce_into(on.grad, bc.repeat, bc.tail, &an.grad);
          } else {
            for (std::int64_t i = 0; i < n; ++i) an.grad[i] += on.grad[i];
          }
        }
        if (bn.requires_grad) {
          bn.ensure_grad();
          if (bc.b_small) {
            detail::reduce_into(on.grad, bc.repeat, bc.tail, &bn.grad);
          } else {
            for (std::int64_t i = 0; i < n; ++i) bn.grad[i] += on.grad[i];
          }
        }
      });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_elementwise<T>(
      "sub", a, b, [](T x, T y) { return x - y; },
      [](detail::TensorNode<T>& an, detail::TensorNode<T>& bn, const detail::TensorNode<T>& on,
         detail::Broadcast bc) {
        std::int64_t n = static_cast<std::int64_t>(on.grad.size());
        if (an.requires_grad) {
          an.ensure_grad();
          if (bc.a_small) {
            detail::reduce_into(on.grad, bc.repeat, bc.tail, &an.grad);
          } else {
            for (std::int64_t i = 0; i < n; ++i) an.grad[i] += on.grad[i];
          }
        }
        if (bn.requires_grad) {
          bn.ensure_grad();
          if (bc.b_small) {
            for (std::int64_t r = 0; r < bc.repeat; ++r) {
              const T* src = on.grad.data() + r * bc.tail;
              for (std::int64_t i = 0; i < bc.tail; ++i) bn.grad[static_cast<std::size_t>(i)] -= src[i];
            }
          } else {
            for (std::int64_t i = 0; i < n; ++i) bn.grad[i] -= on.grad[i];
          }
        }
      });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_elementwise<T>(
      "mul", a, b, [](T x, T y) { return x * y; },
      [](detail::TensorNode<T>& an, detail::TensorNode<T>& bn, const detail::TensorNode<T>& on,
         detail::Broadcast bc) {
        std::int64_t n = static_cast<std::int64_t>(on.grad.size());
        if (an.requires_grad) {
          an.ensure_grad();
          for (std::int64_t i = 0; i < n; ++i) {
            std::int64_t ia = bc.a_small ? (i % bc.tail) : i;
            std::int64_t ib = bc.b_small ? (i % bc.tail) : i;
            an.grad[ia] += on.grad[i] * bn.data[ib];
          }
        }
        if (bn.requires_grad) {
          bn.ensure_grad();
          for (std::int64_t i = 0; i < n; ++i) {
            std::int64_t ia = bc.a_small ? (i % bc.tail) : i;
            std::int64_t ib = bc.b_small ? (i % bc.tail) : i;
            bn.grad[ib] += on.grad[i] * an.data[ia];
          }
        }
      });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  auto out = detail::alloc_node<T>(x.shape());
  const T* xd = x.data();
  for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = xd[i] * factor;
  return detail::finish_op<T>("scale", out, {&x}, [xn = x.node(), on = out, factor]() {
    if (on->grad.empty() || !xn->requires_grad) return;
    xn->ensure_grad();
    for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i] * factor;
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  auto out = detail::alloc_node<T>(x.shape());
  const T* xd = x.data();
  for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = xd[i] > T(0) ? xd[i] : T(0);
  return detail::finish_op<T>("relu", out, {&x}, [xn = x.node(), on = out]() {
    if (on->grad.empty() || !xn->requires_grad) return;
    xn->ensure_grad();
    for (std::size_t i = 0; i < on->grad.size(); ++i) {
      if (xn->data[i] > T(0)) xn->grad[i] += on->grad[i];
    }
  });
}

namespace detail {

template <typename T>
T stable_sigmoid(T v) {
  if (v >= T(0)) {
    return T(1) / (T(1) + std::exp(-v));
  }
  T e = std::exp(v);
  return e / (T(1) + e);
}

// log(1 + exp(v)) without overflow.
template <typename T>
T stable_softplus(T v) {
  if (v > T(30)) return v;
  if (v < T(-30)) return std::exp(v);
  return std::log1p(std::exp(v));
}

}  // namespace detail

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  auto out = detail::alloc_node<T>(x.shape());
  const T* xd = x.data();
  for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = detail::stable_sigmoid(xd[i]);
  return detail::finish_op<T>("sigmoid", out, {&x}, [xn = x.node(), on = out]() {
    if (on->grad.empty() || !xn->requires_grad) return;
    xn->ensure_grad();
    for (std::size_t i = 0; i < on->grad.size(); ++i) {
      T s = on->data[i];
      xn->grad[i] += on->grad[i] * s * (T(1) - s);
    }
  });
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
  auto out = detail::alloc_node<T>(x.shape());
  const T* xd = x.data();
  for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = detail::stable_softplus(xd[i]);
  return detail::finish_op<T>("softplus", out, {&x}, [xn = x.node(), on = out]() {
    if (on->grad.empty() || !xn->requires_grad) return;
    xn->ensure_grad();
    for (std::size_t i = 0; i < on->grad.size(); ++i) {
      xn->grad[i] += on->grad[i] * detail::stable_sigmoid(xn->data[i]);
    }
  });
}

// |x| elementwise; subgradient 0 at x == 0.
template <typename T>
Tensor<T> abs(const Tensor<T>& x) {
  auto out = detail::alloc_node<T>(x.shape());
  const T* xd = x.data();
  for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = std::fabs(xd[i]);
  return detail::finish_op<T>("abs", out, {&x}, [xn = x.node(), on = out]() {
    if (on->grad.empty() || !xn->requires_grad) return;
    xn->ensure_grad();
    for (std::size_t i = 0; i < on->grad.size(); ++i) {
      T v = xn->data[i];
      if (v > T(0)) {
        xn->grad[i] += on->grad[i];
      } else if (v < T(0)) {
        xn->grad[i] -= on->grad[i];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions and reshaping
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  auto out = detail::alloc_node<T>({1});
  T acc = T(0);
  for (T v : x.values()) acc += v;
  out->data[0] = acc;
  return detail::finish_op<T>("sum", out, {&x}, [xn = x.node(), on = out]() {
    if (on->grad.empty() || !xn->requires_grad) return;
    xn->ensure_grad();
    T g = on->grad[0];
    for (std::size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += g;
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, std::vector<int> new_shape) {
  if (detail::numel_of(new_shape) != x.numel()) {
    throw ShapeError(detail::cat("reshape: cannot view ", detail::shape_str(x.shape()), " as ",
                                 detail::shape_str(new_shape)));
  }
  auto out = detail::alloc_node<T>(std::move(new_shape));
  out->data = x.values();
  return detail::finish_op<T>("reshape", out, {&x}, [xn = x.node(), on = out]() {
    if (on->grad.empty() || !xn->requires_grad) return;
    xn->ensure_grad();
    for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
  });
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

namespace detail {

// out[o,oy,ox] += wv * x[c, oy*s+ky-p, ox*s+kx-p] over the valid ox range.
inline void conv_valid_range(int out_size, int in_size, int k_off, int stride, int pad, int* begin,
                             int* end) {
  // need 0 <= o*stride + k_off - pad < in_size
  int lo = pad - k_off;
  int b = lo <= 0 ? 0 : (lo + stride - 1) / stride;
  int hi = in_size - 1 + pad - k_off;  // inclusive upper bound on o*stride
  int e = hi < 0 ? 0 : hi / stride + 1;
  *begin = std::min(b, out_size);
  *end = std::min(e, out_size);
}

}  // namespace detail

// 2D convolution, NCHW input, OIKK weight, bias of length O.
// Output spatial size: floor((in + 2*pad - k) / stride) + 1.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 int stride, int padding) {
  if (input.ndim() != 4) {
    throw ShapeError(detail::cat("conv2d: input must be NCHW (4-d), got ",
                                 detail::shape_str(input.shape())));
  }
  if (weight.ndim() != 4) {
    throw ShapeError(detail::cat("conv2d: weight must be OIKK (4-d), got ",
                                 detail::shape_str(weight.shape())));
  }
  const int batch = input.dim(0), in_ch = input.dim(1), in_h = input.dim(2), in_w = input.dim(3);
  const int out_ch = weight.dim(0), w_in_ch = weight.dim(1), kh = weight.dim(2), kw = weight.dim(3);
  if (in_ch != w_in_ch) {
    throw ShapeError(detail::cat("conv2d: channel axis mismatch: input dim 1 = ", in_ch,
                                 ", weight dim 1 = ", w_in_ch));
  }
  if (bias.ndim() != 1 || bias.dim(0) != out_ch) {
    throw ShapeError(detail::cat("conv2d: bias must have shape (", out_ch, "), got ",
                                 detail::shape_str(bias.shape())));
  }
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  if (padding < 0) throw ShapeError("conv2d: padding must be >= 0");
  if (in_h + 2 * padding < kh || in_w + 2 * padding < kw) {
    throw ShapeError(detail::cat("conv2d: spatial axes too small: input ", in_h, "x", in_w,
                                 " with padding ", padding, " cannot fit kernel ", kh, "x", kw));
  }
  const int out_h = (in_h + 2 * padding - kh) / stride + 1;
  const int out_w = (in_w + 2 * padding - kw) / stride + 1;

  auto out = detail::alloc_node<T>({batch, out_ch, out_h, out_w});
  const T* xd = input.data();
  const T* wd = weight.data();
  const T* bd = bias.data();
  T* od = out->data.data();

  const std::int64_t in_plane = static_cast<std::int64_t>(in_h) * in_w;
  const std::int64_t out_plane = static_cast<std::int64_t>(out_h) * out_w;

  parallel_for(static_cast<std::int64_t>(batch) * out_ch, [&](std::int64_t no) {
    const int n = static_cast<int>(no / out_ch);
    const int o = static_cast<int>(no % out_ch);
    T* out_base = od + no * out_plane;
    for (std::int64_t i = 0; i < out_plane; ++i) out_base[i] = bd[o];
    const T* x_img = xd + static_cast<std::int64_t>(n) * in_ch * in_plane;
    for (int c = 0; c < in_ch; ++c) {
      const T* x_plane = x_img + static_cast<std::int64_t>(c) * in_plane;
      const T* w_plane = wd + (static_cast<std::int64_t>(o) * in_ch + c) * kh * kw;
      for (int ky = 0; ky < kh; ++ky) {
        int oy_begin, oy_end;
        detail::conv_valid_range(out_h, in_h, ky, stride, padding, &oy_begin, &oy_end);
        for (int kx = 0; kx < kw; ++kx) {
          const T wv = w_plane[ky * kw + kx];
          if (wv == T(0)) continue;
          int ox_begin, ox_end;
          detail::conv_valid_range(out_w, in_w, kx, stride, padding, &ox_begin, &ox_end);
          for (int oy = oy_begin; oy < oy_end; ++oy) {
            const int iy = oy * stride + ky - padding;
            const T* x_row = x_plane + static_cast<std::int64_t>(iy) * in_w;
            T* out_row = out_base + static_cast<std::int64_t>(oy) * out_w;
            const int x_off = kx - padding;
            for (int ox = ox_begin; ox < ox_end; ++ox) {
              out_row[ox] += wv * x_row[ox * stride + x_off];
            }
          }
        }
      }
    }
  });

  auto xn = input.node();
  auto wn = weight.node();
  auto bn = bias.node();
  return detail::finish_op<T>(
      "conv2d", out, {&input, &weight, &bias},
      [xn, wn, bn, on = out, batch, in_ch, in_h, in_w, out_ch, kh, kw, out_h, out_w, stride,
       padding]() {
        if (on->grad.empty()) return;
        const T* gd = on->grad.data();
        const std::int64_t in_plane = static_cast<std::int64_t>(in_h) * in_w;
        const std::int64_t out_plane = static_cast<std::int64_t>(out_h) * out_w;

        if (xn->requires_grad) {
          xn->ensure_grad();
          T* dx = xn->grad.data();
          parallel_for(static_cast<std::int64_t>(batch) * in_ch, [&](std::int64_t nc) {
            const int n = static_cast<int>(nc / in_ch);
            const int c = static_cast<int>(nc % in_ch);
            T* dx_plane = dx + nc * in_plane;
            for (int o = 0; o < out_ch; ++o) {
              const T* g_plane =
                  gd + (static_cast<std::int64_t>(n) * out_ch + o) * out_plane;
              const T* w_plane =
                  wn->data.data() + (static_cast<std::int64_t>(o) * in_ch + c) * kh * kw;
              for (int ky = 0; ky < kh; ++ky) {
                int oy_begin, oy_end;
                detail::conv_valid_range(out_h, in_h, ky, stride, padding, &oy_begin, &oy_end);
                for (int kx = 0; kx < kw; ++kx) {
                  const T wv = w_plane[ky * kw + kx];
                  if (wv == T(0)) continue;
                  int ox_begin, ox_end;
                  detail::conv_valid_range(out_w, in_w, kx, stride, padding, &ox_begin, &ox_end);
                  for (int oy = oy_begin; oy < oy_end; ++oy) {
                    const int iy = oy * stride + ky - padding;
                    const T* g_row = g_plane + static_cast<std::int64_t>(oy) * out_w;
                    T* dx_row = dx_plane + static_cast<std::int64_t>(iy) * in_w;
                    const int x_off = kx - padding;
                    for (int ox = ox_begin; ox < ox_end; ++ox) {
                      dx_row[ox * stride + x_off] += wv * g_row[ox];
                    }
                  }
                }
              }
            }
          });
        }

        if (wn->requires_grad) {
          wn->ensure_grad();
          T* dw = wn->grad.data();
          parallel_for(static_cast<std::int64_t>(out_ch) * in_ch, [&](std::int64_t oc) {
            const int o = static_cast<int>(oc / in_ch);
            const int c = static_cast<int>(oc % in_ch);
            T* dw_plane = dw + oc * kh * kw;
            for (int n = 0; n < batch; ++n) {
              const T* g_plane =
                  gd + (static_cast<std::int64_t>(n) * out_ch + o) * out_plane;
              const T* x_plane =
                  xn->data.data() + (static_cast<std::int64_t>(n) * in_ch + c) * in_plane;
              for (int ky = 0; ky < kh; ++ky) {
                int oy_begin, oy_end;
                detail::conv_valid_range(out_h, in_h, ky, stride, padding, &oy_begin, &oy_end);
                for (int kx = 0; kx < kw; ++kx) {
                  int ox_begin, ox_end;
                  detail::conv_valid_range(out_w, in_w, kx, stride, padding, &ox_begin, &ox_end);
                  T acc = T(0);
                  for (int oy = oy_begin; oy < oy_end; ++oy) {
                    const int iy = oy * stride + ky - padding;
                    const T* g_row = g_plane + static_cast<std::int64_t>(oy) * out_w;
                    const T* x_row = x_plane + static_cast<std::int64_t>(iy) * in_w;
                    const int x_off = kx - padding;
                    for (int ox = ox_begin; ox < ox_end; ++ox) {
                      acc += g_row[ox] * x_row[ox * stride + x_off];
                    }
                  }
                  dw_plane[ky * kw + kx] += acc;
                }
              }
            }
          });
        }

        if (bn->requires_grad) {
          bn->ensure_grad();
          for (int n = 0; n < batch; ++n) {
            for (int o = 0; o < out_ch; ++o) {
              const T* g_plane = gd + (static_cast<std::int64_t>(n) * out_ch + o) * out_plane;
              T acc = T(0);
              for (std::int64_t i = 0; i < out_plane; ++i) acc += g_plane[i];
              bn->grad[o] += acc;
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// bilinear_resize
// ---------------------------------------------------------------------------

namespace detail {

struct ResizeAxis {
  int lo;
  int hi;
  double frac;
};

// Half-pixel-center (align-corners-false) source coordinate for output index i.
inline ResizeAxis resize_axis(int i, int in_size, int out_size) {
  double src = (i + 0.5) * static_cast<double>(in_size) / out_size - 0.5;
  double f = std::floor(src);
  ResizeAxis a;
  a.frac = src - f;
  int lo = static_cast<int>(f);
  a.lo = std::min(std::max(lo, 0), in_size - 1);
  a.hi = std::min(std::max(lo + 1, 0), in_size - 1);
  return a;
}

}  // namespace detail

// Bilinear resample of a CHW tensor to (out_h, out_w), half-pixel centers.
// Interpolation is computed in lerp form, so constant inputs reproduce exactly.
template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, int out_h, int out_w) {
  if (x.ndim() != 3) {
    throw ShapeError(
        detail::cat("bilinear_resize: input must be CHW (3-d), got ", detail::shape_str(x.shape())));
  }
  if (out_h < 1 || out_w < 1) {
    throw ShapeError(detail::cat("bilinear_resize: output size must be >= 1, got ", out_h, "x", out_w));
  }
  const int ch = x.dim(0), in_h = x.dim(1), in_w = x.dim(2);
  if (in_h < 1 || in_w < 1) throw ShapeError("bilinear_resize: input spatial size must be >= 1");

  std::vector<detail::ResizeAxis> ys(static_cast<std::size_t>(out_h));
  std::vector<detail::ResizeAxis> xs(static_cast<std::size_t>(out_w));
  for (int i = 0; i < out_h; ++i) ys[static_cast<std::size_t>(i)] = detail::resize_axis(i, in_h, out_h);
  for (int j = 0; j < out_w; ++j) xs[static_cast<std::size_t>(j)] = detail::resize_axis(j, in_w, out_w);

  auto out = detail::alloc_node<T>({ch, out_h, out_w});
  const T* xd = x.data();
  T* od = out->data.data();
  const std::int64_t in_plane = static_cast<std::int64_t>(in_h) * in_w;
  const std::int64_t out_plane = static_cast<std::int64_t>(out_h) * out_w;
  for (int c = 0; c < ch; ++c) {
    const T* src = xd + c * in_plane;
    T* dst = od + c * out_plane;
    for (int i = 0; i < out_h; ++i) {
      const auto& ay = ys[static_cast<std::size_t>(i)];
      for (int j = 0; j < out_w; ++j) {
        const auto& ax = xs[static_cast<std::size_t>(j)];
        T v00 = src[ay.lo * in_w + ax.lo];
        T v01 = src[ay.lo * in_w + ax.hi];
        T v10 = src[ay.hi * in_w + ax.lo];
        T v11 = src[ay.hi * in_w + ax.hi];
        T top = v00 + static_cast<T>(ax.frac) * (v01 - v00);
        T bot = v10 + static_cast<T>(ax.frac) * (v11 - v10);
        dst[i * out_w + j] = top + static_cast<T>(ay.frac) * (bot - top);
      }
    }
  }

  return detail::finish_op<T>(
      "bilinear_resize", out, {&x},
      [xn = x.node(), on = out, ys, xs, ch, in_h, in_w, out_h, out_w]() {
        if (on->grad.empty() || !xn->requires_grad) return;
        xn->ensure_grad();
        const std::int64_t in_plane = static_cast<std::int64_t>(in_h) * in_w;
        const std::int64_t out_plane = static_cast<std::int64_t>(out_h) * out_w;
        for (int c = 0; c < ch; ++c) {
          const T* g = on->grad.data() + c * out_plane;
          T* dx = xn->grad.data() + c * in_plane;
          for (int i = 0; i < out_h; ++i) {
            const auto& ay = ys[static_cast<std::size_t>(i)];
            const T fy = static_cast<T>(ay.frac);
            for (int j = 0; j < out_w; ++j) {
              const auto& ax = xs[static_cast<std::size_t>(j)];
              const T fx = static_cast<T>(ax.frac);
              const T gv = g[i * out_w + j];
              dx[ay.lo * in_w + ax.lo] += gv * (T(1) - fy) * (T(1) - fx);
              dx[ay.lo * in_w + ax.hi] += gv * (T(1) - fy) * fx;
              dx[ay.hi * in_w + ax.lo] += gv * fy * (T(1) - fx);
              dx[ay.hi * in_w + ax.hi] += gv * fy * fx;
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// crop
// ---------------------------------------------------------------------------

// Sub-array copy of a CHW tensor; the window must already be clipped to the
// map. Gradient scatters back into the window only.
template <typename T>
Tensor<T> crop(const Tensor<T>& x, int y0, int x0, int h, int w) {
  if (x.ndim() != 3) {
    throw ShapeError(detail::cat("crop: input must be CHW (3-d), got ", detail::shape_str(x.shape())));
  }
  const int ch = x.dim(0), in_h = x.dim(1), in_w = x.dim(2);
  if (h < 1 || w < 1) {
    throw ShapeError(detail::cat("crop: empty window ", h, "x", w));
  }
  if (y0 < 0 || x0 < 0 || y0 + h > in_h || x0 + w > in_w) {
    throw ShapeError(detail::cat("crop: window (", y0, ",", x0, ",", h, ",", w,
                                 ") out of bounds for map ", in_h, "x", in_w));
  }
  auto out = detail::alloc_node<T>({ch, h, w});
  const T* xd = x.data();
  T* od = out->data.data();
  const std::int64_t in_plane = static_cast<std::int64_t>(in_h) * in_w;
  for (int c = 0; c < ch; ++c) {
    for (int i = 0; i < h; ++i) {
      const T* src = xd + c * in_plane + static_cast<std::int64_t>(y0 + i) * in_w + x0;
      T* dst = od + (static_cast<std::int64_t>(c) * h + i) * w;
      for (int j = 0; j < w; ++j) dst[j] = src[j];
    }
  }
  return detail::finish_op<T>("crop", out, {&x},
                              [xn = x.node(), on = out, y0, x0, h, w, in_h, in_w, ch]() {
                                if (on->grad.empty() || !xn->requires_grad) return;
                                xn->ensure_grad();
                                const std::int64_t in_plane = static_cast<std::int64_t>(in_h) * in_w;
                                for (int c = 0; c < ch; ++c) {
                                  for (int i = 0; i < h; ++i) {
                                    const T* g = on->grad.data() +
                                                 (static_cast<std::int64_t>(c) * h + i) * w;
                                    T* dst = xn->grad.data() + c * in_plane +
                                             static_cast<std::int64_t>(y0 + i) * in_w + x0;
                                    for (int j = 0; j < w; ++j) dst[j] += g[j];
                                  }
                                }
                              });
}

// ---------------------------------------------------------------------------
// sample_box_grid
// ---------------------------------------------------------------------------

// Logit fill for grid cells whose sample point falls outside the map; sigmoid
// of this is exactly 0 in both precisions.
inline constexpr double kOutsideLogit = -1e4;

// Nearest-neighbor resample of one channel of a CHW map onto a (gh x gw) grid
// spanning `box` (given in the map's own coordinate units). Cell (i,j) reads
// the map cell containing the grid cell's center; out-of-map cells read
// kOutsideLogit and receive no gradient.
template <typename T>
Tensor<T> sample_box_grid(const Tensor<T>& map, int channel, const Box& box, int gh, int gw) {
  if (map.ndim() != 3) {
    throw ShapeError(
        detail::cat("sample_box_grid: map must be CHW (3-d), got ", detail::shape_str(map.shape())));
  }
  if (channel < 0 || channel >= map.dim(0)) {
    throw ShapeError(detail::cat("sample_box_grid: channel ", channel, " out of range [0,",
                                 map.dim(0), ")"));
  }
  if (gh < 1 || gw < 1) throw ShapeError("sample_box_grid: grid must be at least 1x1");
  const int mh = map.dim(1), mw = map.dim(2);

  auto out = detail::alloc_node<T>({gh, gw});
  // -1 marks cells outside the map.
  std::vector<std::int32_t> src_index(static_cast<std::size_t>(gh) * gw, -1);
  const T* md = map.data() + static_cast<std::int64_t>(channel) * mh * mw;
  for (int i = 0; i < gh; ++i) {
    double sy = box.y + (i + 0.5) * box.h / gh;
    int iy = static_cast<int>(std::floor(sy));
    for (int j = 0; j < gw; ++j) {
      double sx = box.x + (j + 0.5) * box.w / gw;
      int ix = static_cast<int>(std::floor(sx));
      std::size_t oi = static_cast<std::size_t>(i) * gw + j;
      if (iy < 0 || iy >= mh || ix < 0 || ix >= mw) {
        out->data[oi] = static_cast<T>(kOutsideLogit);
      } else {
        src_index[oi] = iy * mw + ix;
        out->data[oi] = md[src_index[oi]];
      }
    }
  }
  return detail::finish_op<T>("sample_box_grid", out, {&map},
                              [mn = map.node(), on = out, src_index = std::move(src_index),
                               channel, mh, mw]() {
                                if (on->grad.empty() || !mn->requires_grad) return;
                                mn->ensure_grad();
                                T* dm = mn->grad.data() + static_cast<std::int64_t>(channel) * mh * mw;
                                for (std::size_t i = 0; i < src_index.size(); ++i) {
                                  if (src_index[i] >= 0) dm[src_index[i]] += on->grad[i];
                                }
                              });
}

}  // namespace centermask
