#pragma once

// Differentiable primitives. Every op validates shapes, computes the forward
// value, rejects non-finite results immediately (so a NaN is reported at the
// op that created it, not three modules later), and—when a tape is active and
// an input requires grad—records a backward closure.
//
// Conventions:
//   * tensors are row-major; matrices are [rows, cols]
//   * images are [C, H, W]; token matrices are [N, C] with N = H*W, row-major
//     over (y, x)
//   * backward closures accumulate (+=) into input grads

#include <cmath>
#include <cstring>
#include <initializer_list>

#include "mwformer/tensor.hpp"

namespace mwf {
namespace detail {

template <typename T>
inline void check_finite(const char* op, const std::vector<T>& v) {
  for (const T x : v) {
    if (!std::isfinite(x))
      throw NumericError(std::string(op) + ": produced a non-finite value");
  }
}

template <typename T>
inline bool want_grad(std::initializer_list<const Tensor<T>*> ins) {
  if (!Tape<T>::recording()) return false;
  for (const Tensor<T>* t : ins)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

template <typename T>
inline std::vector<std::shared_ptr<Node<T>>> node_list(
    std::initializer_list<const Tensor<T>*> ins) {
  std::vector<std::shared_ptr<Node<T>>> v;
  v.reserve(ins.size());
  for (const Tensor<T>* t : ins)
    if (t->defined()) v.push_back(t->node());
  return v;
}

inline Shape permuted_shape(const Shape& in, const std::vector<std::size_t>& perm) {
  Shape out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[perm[i]];
  return out;
}

/// Raw permute on a flat buffer; used by both forward and backward.
template <typename T>
std::vector<T> permute_raw(const std::vector<T>& in, const Shape& shape,
                           const std::vector<std::size_t>& perm) {
  const std::size_t r = shape.size();
  Shape out_shape = permuted_shape(shape, perm);
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * shape[i];
  // stride to advance in the input when out axis j increments
  std::vector<std::size_t> strides(r);
  for (std::size_t j = 0; j < r; ++j) strides[j] = in_strides[perm[j]];

  std::vector<T> out(in.size());
  std::vector<std::size_t> idx(r, 0);
  std::size_t src = 0;
  for (std::size_t dst = 0; dst < out.size(); ++dst) {
    out[dst] = in[src];
    for (std::size_t j = r; j-- > 0;) {
      ++idx[j];
      src += strides[j];
      if (idx[j] < out_shape[j]) break;
      idx[j] = 0;
      src -= strides[j] * out_shape[j];
    }
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise binary (strict same-shape; no implicit broadcasting)
// ---------------------------------------------------------------------------

template <typename T, typename FwdFn, typename BwdFn>
Tensor<T> elementwise_binary(const char* op, const Tensor<T>& a, const Tensor<T>& b,
                             FwdFn fwd, BwdFn bwd) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  const std::size_t n = a.numel();
  std::vector<T> v(n);
  const T* pa = a.data();
  const T* pb = b.data();
  for (std::size_t i = 0; i < n; ++i) v[i] = fwd(pa[i], pb[i]);
  Tensor<T> out = Tensor<T>::from(a.shape(), std::move(v));
  detail::check_finite(op, out.values());

  if (detail::want_grad<T>({&a, &b})) {
    auto an = a.node(), bn = b.node(), on = out.node();
    Tape<T>::active()->record(op, on, {an, bn}, [an, bn, on, bwd] {
      const std::vector<T>& g = on->grad;
      const std::size_t n = g.size();
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          an->grad[i] += bwd(g[i], an->value[i], bn->value[i], on->value[i], true);
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          bn->grad[i] += bwd(g[i], an->value[i], bn->value[i], on->value[i], false);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise_binary<T>(
      "add", a, b, [](T x, T y) { return x + y; },
      [](T g, T, T, T, bool) { return g; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise_binary<T>(
      "sub", a, b, [](T x, T y) { return x - y; },
      [](T g, T, T, T, bool wrt_a) { return wrt_a ? g : -g; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise_binary<T>(
      "mul", a, b, [](T x, T y) { return x * y; },
      [](T g, T x, T y, T, bool wrt_a) { return wrt_a ? g * y : g * x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise_binary<T>(
      "div", a, b, [](T x, T y) { return x / y; },
      [](T g, T x, T y, T, bool wrt_a) { return wrt_a ? g / y : -g * x / (y * y); });
}

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }

// ---------------------------------------------------------------------------
// scalar / unary
// ---------------------------------------------------------------------------

template <typename T, typename FwdFn, typename BwdFn>
Tensor<T> elementwise_unary(const char* op, const Tensor<T>& a, FwdFn fwd, BwdFn bwd) {
  const std::size_t n = a.numel();
  std::vector<T> v(n);
  const T* pa = a.data();
  for (std::size_t i = 0; i < n; ++i) v[i] = fwd(pa[i]);
  Tensor<T> out = Tensor<T>::from(a.shape(), std::move(v));
  detail::check_finite(op, out.values());

  if (detail::want_grad<T>({&a})) {
    auto an = a.node(), on = out.node();
    Tape<T>::active()->record(op, on, {an}, [an, on, bwd] {
      const std::vector<T>& g = on->grad;
      an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i)
        an->grad[i] += bwd(g[i], an->value[i], on->value[i]);
    });
  }
  return out;
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  return elementwise_unary<T>(
      "add_scalar", a, [c](T x) { return x + c; }, [](T g, T, T) { return g; });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T c) {
  return elementwise_unary<T>(
      "mul_scalar", a, [c](T x) { return x * c; }, [c](T g, T, T) { return g * c; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return elementwise_unary<T>(
      "relu", a, [](T x) { return x > T(0) ? x : T(0); },
      [](T g, T x, T) { return x > T(0) ? g : T(0); });
}

/// Exact GELU: x * Phi(x) with the Gaussian CDF (erf form, not tanh approx).
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr T kInvSqrt2 = T(0.7071067811865475);
  constexpr T kInvSqrt2Pi = T(0.3989422804014327);
  return elementwise_unary<T>(
      "gelu", a,
      [](T x) { return T(0.5) * x * (T(1) + std::erf(x * kInvSqrt2)); },
      [](T g, T x, T) {
        const T cdf = T(0.5) * (T(1) + std::erf(x * kInvSqrt2));
        const T pdf = kInvSqrt2Pi * std::exp(T(-0.5) * x * x);
        return g * (cdf + x * pdf);
      });
}

/// Elementwise square root. Backward is 1/(2*sqrt(x)); calling it at x == 0 is
/// outside the contract (the derivative does not exist there).
template <typename T>
Tensor<T> sqrt_t(const Tensor<T>& a) {
  return elementwise_unary<T>(
      "sqrt", a, [](T x) { return std::sqrt(x); },
      [](T g, T, T y) { return g * T(0.5) / y; });
}

// ---------------------------------------------------------------------------
// matmul / linear
// ---------------------------------------------------------------------------

namespace detail {

/// C[m,n] += A[m,k] * B[k,n], plain i-k-j loops (contiguous inner stride).
template <typename T>
void matmul_accum(const T* A, const T* B, T* C, std::size_t m, std::size_t k,
                  std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* a = A + i * k;
    T* c = C + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T s = a[p];
      const T* b = B + p * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += s * b[j];
    }
  }
}

}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw DimensionError("matmul: expects rank-2 operands, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  const std::size_t m = a.size(0), k = a.size(1), n = b.size(1);
  if (b.size(0) != k)
    throw DimensionError("matmul: inner dimensions differ: " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  std::vector<T> v(m * n, T(0));
  detail::matmul_accum(a.data(), b.data(), v.data(), m, k, n);
  Tensor<T> out = Tensor<T>::from({m, n}, std::move(v));
  detail::check_finite("matmul", out.values());

  if (detail::want_grad<T>({&a, &b})) {
    auto an = a.node(), bn = b.node(), on = out.node();
    Tape<T>::active()->record("matmul", on, {an, bn}, [an, bn, on, m, k, n] {
      const T* g = on->grad.data();
      if (an->requires_grad) {
        an->ensure_grad();
        T* da = an->grad.data();
        const T* B = bn->value.data();
        // dA[i,p] += sum_j g[i,j] * B[p,j]
        for (std::size_t i = 0; i < m; ++i) {
          const T* gi = g + i * n;
          T* dai = da + i * k;
          for (std::size_t p = 0; p < k; ++p) {
            const T* bp = B + p * n;
            T acc = T(0);
            for (std::size_t j = 0; j < n; ++j) acc += gi[j] * bp[j];
            dai[p] += acc;
          }
        }
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        T* db = bn->grad.data();
        const T* A = an->value.data();
        // dB[p,j] += sum_i A[i,p] * g[i,j]
        for (std::size_t i = 0; i < m; ++i) {
          const T* ai = A + i * k;
          const T* gi = g + i * n;
          for (std::size_t p = 0; p < k; ++p) {
            const T s = ai[p];
            T* dbp = db + p * n;
            for (std::size_t j = 0; j < n; ++j) dbp[j] += s * gi[j];
          }
        }
      }
    });
  }
  return out;
}

/// y = x @ W + b with b broadcast over rows. x:[N,in], W:[in,out], b:[out].
/// Pass an empty (default) Tensor for b to skip the bias.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.rank() != 2 || w.rank() != 2)
    throw DimensionError("linear: expects rank-2 x and W, got " + shape_str(x.shape()) +
                         " and " + shape_str(w.shape()));
  const std::size_t n_rows = x.size(0), fan_in = x.size(1), fan_out = w.size(1);
  if (w.size(0) != fan_in)
    throw DimensionError("linear: x " + shape_str(x.shape()) + " does not match W " +
                         shape_str(w.shape()));
  const bool with_bias = b.defined();
  if (with_bias && (b.rank() != 1 || b.size(0) != fan_out))
    throw DimensionError("linear: bias " + shape_str(b.shape()) + " does not match W " +
                         shape_str(w.shape()));

  std::vector<T> v(n_rows * fan_out, T(0));
  if (with_bias) {
    const T* pb = b.data();
    for (std::size_t i = 0; i < n_rows; ++i)
      std::memcpy(v.data() + i * fan_out, pb, fan_out * sizeof(T));
  }
  detail::matmul_accum(x.data(), w.data(), v.data(), n_rows, fan_in, fan_out);
  Tensor<T> out = Tensor<T>::from({n_rows, fan_out}, std::move(v));
  detail::check_finite("linear", out.values());

  if (detail::want_grad<T>({&x, &w, &b})) {
    auto xn = x.node(), wn = w.node(), on = out.node();
    auto bn = with_bias ? b.node() : nullptr;
    std::vector<typename Tape<T>::NodePtr> ins{xn, wn};
    if (bn) ins.push_back(bn);
    Tape<T>::active()->record("linear", on, std::move(ins),
                              [xn, wn, bn, on, n_rows, fan_in, fan_out] {
      const T* g = on->grad.data();
      if (xn->requires_grad) {
        xn->ensure_grad();
        T* dx = xn->grad.data();
        const T* W = wn->value.data();
        for (std::size_t i = 0; i < n_rows; ++i) {
          const T* gi = g + i * fan_out;
          T* dxi = dx + i * fan_in;
          for (std::size_t p = 0; p < fan_in; ++p) {
            const T* wp = W + p * fan_out;
            T acc = T(0);
            for (std::size_t j = 0; j < fan_out; ++j) acc += gi[j] * wp[j];
            dxi[p] += acc;
          }
        }
      }
      if (wn->requires_grad) {
        wn->ensure_grad();
        T* dw = wn->grad.data();
        const T* X = xn->value.data();
        for (std::size_t i = 0; i < n_rows; ++i) {
          const T* xi = X + i * fan_in;
          const T* gi = g + i * fan_out;
          for (std::size_t p = 0; p < fan_in; ++p) {
            const T s = xi[p];
            T* dwp = dw + p * fan_out;
            for (std::size_t j = 0; j < fan_out; ++j) dwp[j] += s * gi[j];
          }
        }
      }
      if (bn && bn->requires_grad) {
        bn->ensure_grad();
        T* db = bn->grad.data();
        for (std::size_t i = 0; i < n_rows; ++i) {
          const T* gi = g + i * fan_out;
          for (std::size_t j = 0; j < fan_out; ++j) db[j] += gi[j];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w) {
  return linear(x, w, Tensor<T>());
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape new_shape) {
  if (shape_numel(new_shape) != a.numel())
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(new_shape));
  Tensor<T> out = Tensor<T>::from(std::move(new_shape), a.values());

  if (detail::want_grad<T>({&a})) {
    auto an = a.node(), on = out.node();
    Tape<T>::active()->record("reshape", on, {an}, [an, on] {
      an->ensure_grad();
      const std::vector<T>& g = on->grad;
      for (std::size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> permute(const Tensor<T>& a, std::vector<std::size_t> perm) {
  const std::size_t r = a.rank();
  if (perm.size() != r)
    throw DimensionError("permute: permutation size " + std::to_string(perm.size()) +
                         " does not match rank of " + shape_str(a.shape()));
  std::vector<bool> seen(r, false);
  for (std::size_t p : perm) {
    if (p >= r || seen[p])
      throw DimensionError("permute: invalid permutation for " + shape_str(a.shape()));
    seen[p] = true;
  }
  Tensor<T> out = Tensor<T>::from(detail::permuted_shape(a.shape(), perm),
                                  detail::permute_raw(a.values(), a.shape(), perm));

  if (detail::want_grad<T>({&a})) {
    std::vector<std::size_t> inv(r);
    for (std::size_t j = 0; j < r; ++j) inv[perm[j]] = j;
    auto an = a.node(), on = out.node();
    Tape<T>::active()->record("permute", on, {an}, [an, on, inv] {
      std::vector<T> gin = detail::permute_raw(on->grad, on->shape, inv);
      an->ensure_grad();
      for (std::size_t i = 0; i < gin.size(); ++i) an->grad[i] += gin[i];
    });
  }
  return out;
}

/// 2-D transpose convenience.
template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  return permute(a, {1, 0});
}

template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t start, std::size_t len) {
  if (axis >= a.rank())
    throw DimensionError("slice: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(a.shape()));
  if (len == 0 || start + len > a.size(axis))
    throw DimensionError("slice: range [" + std::to_string(start) + ", " +
                         std::to_string(start + len) + ") invalid for " +
                         shape_str(a.shape()) + " axis " + std::to_string(axis));
  const Shape& s = a.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t ax = s[axis];

  Shape out_shape = s;
  out_shape[axis] = len;
  std::vector<T> v(outer * len * inner);
  const T* src = a.data();
  for (std::size_t o = 0; o < outer; ++o)
    std::memcpy(v.data() + o * len * inner, src + (o * ax + start) * inner,
                len * inner * sizeof(T));
  Tensor<T> out = Tensor<T>::from(std::move(out_shape), std::move(v));

  if (detail::want_grad<T>({&a})) {
    auto an = a.node(), on = out.node();
    Tape<T>::active()->record("slice", on, {an}, [an, on, outer, inner, ax, start, len] {
      an->ensure_grad();
      const T* g = on->grad.data();
      T* da = an->grad.data();
      for (std::size_t o = 0; o < outer; ++o) {
        const T* gsrc = g + o * len * inner;
        T* dst = da + (o * ax + start) * inner;
        for (std::size_t i = 0; i < len * inner; ++i) dst[i] += gsrc[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no operands");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size())
    throw DimensionError("concat: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(s0));
  std::size_t axis_total = 0;
  for (const Tensor<T>& p : parts) {
    if (p.rank() != s0.size())
      throw DimensionError("concat: rank mismatch between operands");
    for (std::size_t i = 0; i < s0.size(); ++i)
      if (i != axis && p.shape()[i] != s0[i])
        throw DimensionError("concat: shape mismatch " + shape_str(p.shape()) + " vs " +
                             shape_str(s0) + " outside axis " + std::to_string(axis));
    axis_total += p.size(axis);
  }

  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
  for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];

  Shape out_shape = s0;
  out_shape[axis] = axis_total;
  std::vector<T> v(outer * axis_total * inner);
  std::size_t offset = 0;
  for (const Tensor<T>& p : parts) {
    const std::size_t pa = p.size(axis);
    const T* src = p.data();
    for (std::size_t o = 0; o < outer; ++o)
      std::memcpy(v.data() + (o * axis_total + offset) * inner, src + o * pa * inner,
                  pa * inner * sizeof(T));
    offset += pa;
  }
  Tensor<T> out = Tensor<T>::from(std::move(out_shape), std::move(v));

  bool any_grad = false;
  for (const Tensor<T>& p : parts) any_grad = any_grad || p.requires_grad();
  if (Tape<T>::recording() && any_grad) {
    std::vector<typename Tape<T>::NodePtr> ins;
    ins.reserve(parts.size());
    for (const Tensor<T>& p : parts) ins.push_back(p.node());
    auto on = out.node();
    std::vector<std::size_t> widths;
    for (const Tensor<T>& p : parts) widths.push_back(p.size(axis));
    Tape<T>::active()->record("concat", on, ins,
                              [ins, on, outer, inner, axis_total, widths] {
      const T* g = on->grad.data();
      std::size_t offset = 0;
      for (std::size_t pi = 0; pi < ins.size(); ++pi) {
        const std::size_t pa = widths[pi];
        if (ins[pi]->requires_grad) {
          ins[pi]->ensure_grad();
          T* da = ins[pi]->grad.data();
          for (std::size_t o = 0; o < outer; ++o) {
            const T* gsrc = g + (o * axis_total + offset) * inner;
            T* dst = da + o * pa * inner;
            for (std::size_t i = 0; i < pa * inner; ++i) dst[i] += gsrc[i];
          }
        }
        offset += pa;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
  T acc = T(0);
  const T* p = a.data();
  for (std::size_t i = 0; i < a.numel(); ++i) acc += p[i];
  Tensor<T> out = Tensor<T>::from({}, {acc});
  detail::check_finite("sum_all", out.values());

  if (detail::want_grad<T>({&a})) {
    auto an = a.node(), on = out.node();
    Tape<T>::active()->record("sum_all", on, {an}, [an, on] {
      const T g = on->grad[0];
      an->ensure_grad();
      for (std::size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
  return mul_scalar(sum_all(a), T(1) / static_cast<T>(a.numel()));
}

// ---------------------------------------------------------------------------
// softmax / layer norm
// ---------------------------------------------------------------------------

/// Numerically stable softmax along `axis` (max-subtracted).
template <typename T>
Tensor<T> softmax(const Tensor<T>& a, std::size_t axis) {
  if (axis >= a.rank())
    throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(a.shape()));
  const Shape& s = a.shape();
  const std::size_t ax = s[axis];
  if (ax == 0)
    throw DimensionError("softmax: empty axis " + std::to_string(axis) + " in " +
                         shape_str(a.shape()));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];

  std::vector<T> v(a.numel());
  const T* p = a.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * ax * inner + in;
      T mx = p[base];
      for (std::size_t j = 1; j < ax; ++j) mx = std::max(mx, p[base + j * inner]);
      T denom = T(0);
      for (std::size_t j = 0; j < ax; ++j) {
        const T e = std::exp(p[base + j * inner] - mx);
        v[base + j * inner] = e;
        denom += e;
      }
      const T inv = T(1) / denom;
      for (std::size_t j = 0; j < ax; ++j) v[base + j * inner] *= inv;
    }
  }
  Tensor<T> out = Tensor<T>::from(s, std::move(v));
  detail::check_finite("softmax", out.values());

  if (detail::want_grad<T>({&a})) {
    auto an = a.node(), on = out.node();
    Tape<T>::active()->record("softmax", on, {an}, [an, on, outer, inner, ax] {
      an->ensure_grad();
      const T* y = on->value.data();
      const T* g = on->grad.data();
      T* da = an->grad.data();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * ax * inner + in;
          T dot = T(0);
          for (std::size_t j = 0; j < ax; ++j)
            dot += g[base + j * inner] * y[base + j * inner];
          for (std::size_t j = 0; j < ax; ++j) {
            const std::size_t k = base + j * inner;
            da[k] += y[k] * (g[k] - dot);
          }
        }
      }
    });
  }
  return out;
}

/// Layer normalization over the LAST axis, with learnable per-feature scale
/// and shift. x: [..., C], gamma/beta: [C]. Uses the biased variance.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5)) {
  if (x.rank() < 1)
    throw DimensionError("layer_norm: input must have rank >= 1");
  const std::size_t c = x.shape().back();
  if (gamma.rank() != 1 || gamma.size(0) != c || beta.rank() != 1 || beta.size(0) != c)
    throw DimensionError("layer_norm: gamma " + shape_str(gamma.shape()) + " / beta " +
                         shape_str(beta.shape()) + " do not match last axis of " +
                         shape_str(x.shape()));
  const std::size_t rows = x.numel() / c;

  std::vector<T> v(x.numel());
  std::vector<T> xhat(x.numel());
  std::vector<T> inv_std(rows);
  const T* p = x.data();
  const T* pg = gamma.data();
  const T* pb = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = p + r * c;
    T mean = T(0);
    for (std::size_t j = 0; j < c; ++j) mean += row[j];
    mean /= static_cast<T>(c);
    T var = T(0);
    for (std::size_t j = 0; j < c; ++j) {
      const T d = row[j] - mean;
      var += d * d;
    }
    var /= static_cast<T>(c);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < c; ++j) {
      const T xh = (row[j] - mean) * is;
      xhat[r * c + j] = xh;
      v[r * c + j] = pg[j] * xh + pb[j];
    }
  }
  Tensor<T> out = Tensor<T>::from(x.shape(), std::move(v));
  detail::check_finite("layer_norm", out.values());

  if (detail::want_grad<T>({&x, &gamma, &beta})) {
    auto xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node();
    Tape<T>::active()->record(
        "layer_norm", on, {xn, gn, bn},
        [xn, gn, bn, on, rows, c, xhat = std::move(xhat), inv_std = std::move(inv_std)] {
          const T* g = on->grad.data();
          const T* pg = gn->value.data();
          if (gn->requires_grad) {
            gn->ensure_grad();
            T* dg = gn->grad.data();
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t j = 0; j < c; ++j) dg[j] += g[r * c + j] * xhat[r * c + j];
          }
          if (bn->requires_grad) {
            bn->ensure_grad();
            T* db = bn->grad.data();
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t j = 0; j < c; ++j) db[j] += g[r * c + j];
          }
          if (xn->requires_grad) {
            xn->ensure_grad();
            T* dx = xn->grad.data();
            const T invc = T(1) / static_cast<T>(c);
            for (std::size_t r = 0; r < rows; ++r) {
              // dl/dxhat_j = g_j * gamma_j; project out mean and xhat component
              T m1 = T(0), m2 = T(0);
              for (std::size_t j = 0; j < c; ++j) {
                const T dxh = g[r * c + j] * pg[j];
                m1 += dxh;
                m2 += dxh * xhat[r * c + j];
              }
              m1 *= invc;
              m2 *= invc;
              for (std::size_t j = 0; j < c; ++j) {
                const T dxh = g[r * c + j] * pg[j];
                dx[r * c + j] += (dxh - m1 - xhat[r * c + j] * m2) * inv_std[r];
              }
            }
          }
        });
  }
  return out;
}

// ---------------------------------------------------------------------------
// convolutions (NCHW single image: [C,H,W])
// ---------------------------------------------------------------------------

/// 2-D convolution. x: [Cin,H,W], w: [Cout,Cin,kh,kw], optional b: [Cout].
/// Zero padding `pad` on all sides, stride `stride` in both dims.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 std::size_t stride, std::size_t pad) {
  if (x.rank() != 3 || w.rank() != 4)
    throw DimensionError("conv2d: expects x [C,H,W] and w [Co,Ci,kh,kw], got " +
                         shape_str(x.shape()) + " and " + shape_str(w.shape()));
  const std::size_t ci = x.size(0), h = x.size(1), wd = x.size(2);
  const std::size_t co = w.size(0), kh = w.size(2), kw = w.size(3);
  if (w.size(1) != ci)
    throw DimensionError("conv2d: input channels " + shape_str(x.shape()) +
                         " do not match kernel " + shape_str(w.shape()));
  if (stride == 0) throw DimensionError("conv2d: stride must be positive");
  if (h + 2 * pad < kh || wd + 2 * pad < kw)
    throw DimensionError("conv2d: kernel larger than padded input");
  const std::size_t ho = (h + 2 * pad - kh) / stride + 1;
  const std::size_t wo = (wd + 2 * pad - kw) / stride + 1;
  const bool with_bias = b.defined();
  if (with_bias && (b.rank() != 1 || b.size(0) != co))
    throw DimensionError("conv2d: bias " + shape_str(b.shape()) + " does not match " +
                         shape_str(w.shape()));

  std::vector<T> v(co * ho * wo, T(0));
  const T* px = x.data();
  const T* pw = w.data();
  for (std::size_t o = 0; o < co; ++o) {
    T* out_map = v.data() + o * ho * wo;
    if (with_bias) {
      const T bias = b.data()[o];
      for (std::size_t i = 0; i < ho * wo; ++i) out_map[i] = bias;
    }
    for (std::size_t c = 0; c < ci; ++c) {
      const T* in_map = px + c * h * wd;
      const T* ker = pw + (o * ci + c) * kh * kw;
      for (std::size_t ky = 0; ky < kh; ++ky) {
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const T wv = ker[ky * kw + kx];
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const std::ptrdiff_t iy =
                static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            T* orow = out_map + oy * wo;
            const T* irow = in_map + iy * wd;
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const std::ptrdiff_t ix =
                  static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
              orow[ox] += wv * irow[ix];
            }
          }
        }
      }
    }
  }
  Tensor<T> out = Tensor<T>::from({co, ho, wo}, std::move(v));
  detail::check_finite("conv2d", out.values());

  if (detail::want_grad<T>({&x, &w, &b})) {
    auto xn = x.node(), wn = w.node(), on = out.node();
    auto bn = with_bias ? b.node() : nullptr;
    std::vector<typename Tape<T>::NodePtr> ins{xn, wn};
    if (bn) ins.push_back(bn);
    Tape<T>::active()->record(
        "conv2d", on, std::move(ins),
        [xn, wn, bn, on, ci, h, wd, co, kh, kw, stride, pad, ho, wo] {
          const T* g = on->grad.data();
          const T* px = xn->value.data();
          const T* pw = wn->value.data();
          const bool need_dx = xn->requires_grad;
          const bool need_dw = wn->requires_grad;
          if (need_dx) xn->ensure_grad();
          if (need_dw) wn->ensure_grad();
          T* dx = need_dx ? xn->grad.data() : nullptr;
          T* dw = need_dw ? wn->grad.data() : nullptr;
          for (std::size_t o = 0; o < co; ++o) {
            const T* gmap = g + o * ho * wo;
            for (std::size_t c = 0; c < ci; ++c) {
              const T* in_map = px + c * h * wd;
              const T* ker = pw + (o * ci + c) * kh * kw;
              T* dker = need_dw ? dw + (o * ci + c) * kh * kw : nullptr;
              T* din_map = need_dx ? dx + c * h * wd : nullptr;
              for (std::size_t ky = 0; ky < kh; ++ky) {
                for (std::size_t kx = 0; kx < kw; ++kx) {
                  const T wv = ker[ky * kw + kx];
                  T wacc = T(0);
                  for (std::size_t oy = 0; oy < ho; ++oy) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                              static_cast<std::ptrdiff_t>(pad);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                    const T* grow = gmap + oy * wo;
                    const T* irow = in_map + iy * wd;
                    T* dirow = need_dx ? din_map + iy * wd : nullptr;
                    for (std::size_t ox = 0; ox < wo; ++ox) {
                      const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                                static_cast<std::ptrdiff_t>(pad);
                      if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
                      const T gv = grow[ox];
                      if (need_dw) wacc += gv * irow[ix];
                      if (need_dx) dirow[ix] += gv * wv;
                    }
                  }
                  if (need_dw) dker[ky * kw + kx] += wacc;
                }
              }
            }
          }
          if (bn && bn->requires_grad) {
            bn->ensure_grad();
            T* db = bn->grad.data();
            for (std::size_t o = 0; o < co; ++o) {
              const T* gmap = g + o * ho * wo;
              T acc = T(0);
              for (std::size_t i = 0; i < ho * wo; ++i) acc += gmap[i];
              db[o] += acc;
            }
          }
        });
  }
  return out;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, std::size_t stride,
                 std::size_t pad) {
  return conv2d(x, w, Tensor<T>(), stride, pad);
}

/// Depthwise convolution, stride 1, "same" zero padding. x: [C,H,W],
/// w: [C,1,k,k] (one k x k kernel per channel, odd k).
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& w) {
  if (x.rank() != 3 || w.rank() != 4 || w.size(1) != 1)
    throw DimensionError("depthwise_conv2d: expects x [C,H,W] and w [C,1,k,k], got " +
                         shape_str(x.shape()) + " and " + shape_str(w.shape()));
  const std::size_t c = x.size(0), h = x.size(1), wd = x.size(2);
  const std::size_t k = w.size(2);
  if (w.size(0) != c || w.size(3) != k)
    throw DimensionError("depthwise_conv2d: kernel " + shape_str(w.shape()) +
                         " does not match input " + shape_str(x.shape()));
  if (k % 2 == 0)
    throw DimensionError("depthwise_conv2d: kernel size must be odd, got " +
                         std::to_string(k));
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);

  std::vector<T> v(c * h * wd, T(0));
  const T* px = x.data();
  const T* pw = w.data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    const T* in_map = px + ch * h * wd;
    const T* ker = pw + ch * k * k;
    T* out_map = v.data() + ch * h * wd;
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T wv = ker[ky * k + kx];
        for (std::size_t oy = 0; oy < h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ky) - pad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          T* orow = out_map + oy * wd;
          const T* irow = in_map + iy * wd;
          for (std::size_t ox = 0; ox < wd; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + kx) - pad;
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
            orow[ox] += wv * irow[ix];
          }
        }
      }
    }
  }
  Tensor<T> out = Tensor<T>::from({c, h, wd}, std::move(v));
  detail::check_finite("depthwise_conv2d", out.values());

  if (detail::want_grad<T>({&x, &w})) {
    auto xn = x.node(), wn = w.node(), on = out.node();
    Tape<T>::active()->record("depthwise_conv2d", on, {xn, wn},
                              [xn, wn, on, c, h, wd, k, pad] {
      const T* g = on->grad.data();
      const T* px = xn->value.data();
      const T* pw = wn->value.data();
      const bool need_dx = xn->requires_grad;
      const bool need_dw = wn->requires_grad;
      if (need_dx) xn->ensure_grad();
      if (need_dw) wn->ensure_grad();
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T* gmap = g + ch * h * wd;
        const T* in_map = px + ch * h * wd;
        const T* ker = pw + ch * k * k;
        T* dker = need_dw ? wn->grad.data() + ch * k * k : nullptr;
        T* din = need_dx ? xn->grad.data() + ch * h * wd : nullptr;
        for (std::size_t ky = 0; ky < k; ++ky) {
          for (std::size_t kx = 0; kx < k; ++kx) {
            const T wv = ker[ky * k + kx];
            T wacc = T(0);
            for (std::size_t oy = 0; oy < h; ++oy) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ky) - pad;
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
              const T* grow = gmap + oy * wd;
              const T* irow = in_map + iy * wd;
              T* dirow = need_dx ? din + iy * wd : nullptr;
              for (std::size_t ox = 0; ox < wd; ++ox) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + kx) - pad;
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
                const T gv = grow[ox];
                if (need_dw) wacc += gv * irow[ix];
                if (need_dx) dirow[ix] += gv * wv;
              }
            }
            if (need_dw) dker[ky * k + kx] += wacc;
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// resampling / modulation
// ---------------------------------------------------------------------------

/// Bilinear 2x upsampling of [C,H,W] -> [C,2H,2W], half-pixel centers.
template <typename T>
Tensor<T> upsample_bilinear2x(const Tensor<T>& x) {
  if (x.rank() != 3)
    throw DimensionError("upsample_bilinear2x: expects [C,H,W], got " +
                         shape_str(x.shape()));
  const std::size_t c = x.size(0), h = x.size(1), w = x.size(2);
  const std::size_t ho = 2 * h, wo = 2 * w;

  // Precompute the 1-D interpolation taps once per axis.
  auto taps = [](std::size_t out_n, std::size_t in_n) {
    std::vector<std::size_t> i0(out_n), i1(out_n);
    std::vector<T> w1(out_n);
    for (std::size_t o = 0; o < out_n; ++o) {
      const double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
      const double f = std::floor(src);
      std::ptrdiff_t a = static_cast<std::ptrdiff_t>(f);
      double frac = src - f;
      if (a < 0) { a = 0; frac = 0.0; }
      std::ptrdiff_t b = a + 1;
      if (b >= static_cast<std::ptrdiff_t>(in_n)) { b = static_cast<std::ptrdiff_t>(in_n) - 1; frac = 0.0; }
      i0[o] = static_cast<std::size_t>(a);
      i1[o] = static_cast<std::size_t>(b);
      w1[o] = static_cast<T>(frac);
    }
    return std::tuple(i0, i1, w1);
  };
  auto [y0, y1, fy] = taps(ho, h);
  auto [x0, x1, fx] = taps(wo, w);

  std::vector<T> v(c * ho * wo);
  const T* px = x.data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    const T* in_map = px + ch * h * w;
    T* out_map = v.data() + ch * ho * wo;
    for (std::size_t oy = 0; oy < ho; ++oy) {
      const T* r0 = in_map + y0[oy] * w;
      const T* r1 = in_map + y1[oy] * w;
      const T wy = fy[oy];
      T* orow = out_map + oy * wo;
      for (std::size_t ox = 0; ox < wo; ++ox) {
        const T wxf = fx[ox];
        const T top = r0[x0[ox]] * (T(1) - wxf) + r0[x1[ox]] * wxf;
        const T bot = r1[x0[ox]] * (T(1) - wxf) + r1[x1[ox]] * wxf;
        orow[ox] = top * (T(1) - wy) + bot * wy;
      }
    }
  }
  Tensor<T> out = Tensor<T>::from({c, ho, wo}, std::move(v));

  if (detail::want_grad<T>({&x})) {
    auto xn = x.node(), on = out.node();
    Tape<T>::active()->record(
        "upsample_bilinear2x", on, {xn},
        [xn, on, c, h, w, ho, wo, y0 = y0, y1 = y1, fy = fy, x0 = x0, x1 = x1, fx = fx] {
          xn->ensure_grad();
          const T* g = on->grad.data();
          T* dx = xn->grad.data();
          for (std::size_t ch = 0; ch < c; ++ch) {
            const T* gmap = g + ch * ho * wo;
            T* dmap = dx + ch * h * w;
            for (std::size_t oy = 0; oy < ho; ++oy) {
              const T wy = fy[oy];
              for (std::size_t ox = 0; ox < wo; ++ox) {
                const T gv = gmap[oy * wo + ox];
                const T wxf = fx[ox];
                dmap[y0[oy] * w + x0[ox]] += gv * (T(1) - wy) * (T(1) - wxf);
                dmap[y0[oy] * w + x1[ox]] += gv * (T(1) - wy) * wxf;
                dmap[y1[oy] * w + x0[ox]] += gv * wy * (T(1) - wxf);
                dmap[y1[oy] * w + x1[ox]] += gv * wy * wxf;
              }
            }
          }
        });
  }
  return out;
}

/// Per-channel affine feature modulation: y[c,h,w] = gamma[c]*x[c,h,w] + beta[c].
template <typename T>
Tensor<T> film(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta) {
  if (x.rank() != 3)
    throw DimensionError("film: expects [C,H,W], got " + shape_str(x.shape()));
  const std::size_t c = x.size(0), hw = x.size(1) * x.size(2);
  if (gamma.rank() != 1 || gamma.size(0) != c || beta.rank() != 1 || beta.size(0) != c)
    throw DimensionError("film: gamma " + shape_str(gamma.shape()) + " / beta " +
                         shape_str(beta.shape()) + " do not match channels of " +
                         shape_str(x.shape()));

  std::vector<T> v(x.numel());
  const T* px = x.data();
  const T* pg = gamma.data();
  const T* pb = beta.data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    const T gm = pg[ch], bt = pb[ch];
    const T* in_map = px + ch * hw;
    T* out_map = v.data() + ch * hw;
    for (std::size_t i = 0; i < hw; ++i) out_map[i] = gm * in_map[i] + bt;
  }
  Tensor<T> out = Tensor<T>::from(x.shape(), std::move(v));
  detail::check_finite("film", out.values());

  if (detail::want_grad<T>({&x, &gamma, &beta})) {
    auto xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node();
    Tape<T>::active()->record("film", on, {xn, gn, bn}, [xn, gn, bn, on, c, hw] {
      const T* g = on->grad.data();
      const T* px = xn->value.data();
      const T* pg = gn->value.data();
      if (xn->requires_grad) {
        xn->ensure_grad();
        T* dx = xn->grad.data();
        for (std::size_t ch = 0; ch < c; ++ch) {
          const T gm = pg[ch];
          for (std::size_t i = 0; i < hw; ++i) dx[ch * hw + i] += gm * g[ch * hw + i];
        }
      }
      if (gn->requires_grad) {
        gn->ensure_grad();
        T* dg = gn->grad.data();
        for (std::size_t ch = 0; ch < c; ++ch) {
          T acc = T(0);
          for (std::size_t i = 0; i < hw; ++i) acc += g[ch * hw + i] * px[ch * hw + i];
          dg[ch] += acc;
        }
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        T* db = bn->grad.data();
        for (std::size_t ch = 0; ch < c; ++ch) {
          T acc = T(0);
          for (std::size_t i = 0; i < hw; ++i) acc += g[ch * hw + i];
          db[ch] += acc;
        }
      }
    });
  }
  return out;
}

/// Adds a row vector to every row of a matrix: y[i,j] = x[i,j] + r[j].
template <typename T>
Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& r) {
  if (x.rank() != 2 || r.rank() != 1 || r.size(0) != x.size(1))
    throw DimensionError("add_rowvec: incompatible shapes " + shape_str(x.shape()) +
                         " and " + shape_str(r.shape()));
  const std::size_t n = x.size(0), c = x.size(1);
  std::vector<T> v(x.numel());
  const T* px = x.data();
  const T* pr = r.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) v[i * c + j] = px[i * c + j] + pr[j];
  Tensor<T> out = Tensor<T>::from(x.shape(), std::move(v));
  detail::check_finite("add_rowvec", out.values());

  if (detail::want_grad<T>({&x, &r})) {
    auto xn = x.node(), rn = r.node(), on = out.node();
    Tape<T>::active()->record("add_rowvec", on, {xn, rn}, [xn, rn, on, n, c] {
      const T* g = on->grad.data();
      if (xn->requires_grad) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < n * c; ++i) xn->grad[i] += g[i];
      }
      if (rn->requires_grad) {
        rn->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < c; ++j) rn->grad[j] += g[i * c + j];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// losses and similarity
// ---------------------------------------------------------------------------

/// Smooth L1 (Huber), mean over all elements:
///   |e| <  beta: 0.5*e^2/beta
///   |e| >= beta: |e| - 0.5*beta
template <typename T>
Tensor<T> smooth_l1(const Tensor<T>& pred, const Tensor<T>& target, T beta = T(1)) {
  if (pred.shape() != target.shape())
    throw DimensionError("smooth_l1: shape mismatch " + shape_str(pred.shape()) + " vs " +
                         shape_str(target.shape()));
  if (!(beta > T(0))) throw ContractError("smooth_l1: beta must be positive");
  const std::size_t n = pred.numel();
  const T* pp = pred.data();
  const T* pt = target.data();
  T acc = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    const T e = pp[i] - pt[i];
    const T ae = std::abs(e);
    acc += ae < beta ? T(0.5) * e * e / beta : ae - T(0.5) * beta;
  }
  acc /= static_cast<T>(n);
  Tensor<T> out = Tensor<T>::from({}, {acc});
  detail::check_finite("smooth_l1", out.values());

  if (detail::want_grad<T>({&pred, &target})) {
    auto pn = pred.node(), tn = target.node(), on = out.node();
    Tape<T>::active()->record("smooth_l1", on, {pn, tn}, [pn, tn, on, n, beta] {
      const T g = on->grad[0] / static_cast<T>(n);
      const T* pp = pn->value.data();
      const T* pt = tn->value.data();
      const bool need_dp = pn->requires_grad;
      const bool need_dt = tn->requires_grad;
      if (need_dp) pn->ensure_grad();
      if (need_dt) tn->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        const T e = pp[i] - pt[i];
        T d = e / beta;
        if (d > T(1)) d = T(1);
        if (d < T(-1)) d = T(-1);
        if (need_dp) pn->grad[i] += g * d;
        if (need_dt) tn->grad[i] -= g * d;
      }
    });
  }
  return out;
}

/// Gathers the upper triangle (including the diagonal) of a square matrix
/// into a vector, row-major: (0,0),(0,1),...,(0,C-1),(1,1),...
template <typename T>
Tensor<T> upper_tri_vec(const Tensor<T>& g) {
  if (g.rank() != 2 || g.size(0) != g.size(1))
    throw DimensionError("upper_tri_vec: expects a square matrix, got " +
                         shape_str(g.shape()));
  const std::size_t c = g.size(0);
  std::vector<T> v;
  v.reserve(c * (c + 1) / 2);
  const T* p = g.data();
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t j = i; j < c; ++j) v.push_back(p[i * c + j]);
  Tensor<T> out = Tensor<T>::from({c * (c + 1) / 2}, std::move(v));

  if (detail::want_grad<T>({&g})) {
    auto gn = g.node(), on = out.node();
    Tape<T>::active()->record("upper_tri_vec", on, {gn}, [gn, on, c] {
      gn->ensure_grad();
      const T* gr = on->grad.data();
      std::size_t k = 0;
      for (std::size_t i = 0; i < c; ++i)
        for (std::size_t j = i; j < c; ++j) gn->grad[i * c + j] += gr[k++];
    });
  }
  return out;
}

/// Cosine similarity of two equal-length vectors, with an epsilon guard in
/// the denominator. Built from differentiable primitives.
template <typename T>
Tensor<T> cosine_similarity(const Tensor<T>& a, const Tensor<T>& b, T eps = T(1e-12)) {
  if (a.rank() != 1 || b.rank() != 1 || a.size(0) != b.size(0))
    throw DimensionError("cosine_similarity: expects equal-length vectors, got " +
                         shape_str(a.shape()) + " and " + shape_str(b.shape()));
  Tensor<T> dot = sum_all(mul(a, b));
  Tensor<T> na = sqrt_t(sum_all(mul(a, a)));
  Tensor<T> nb = sqrt_t(sum_all(mul(b, b)));
  return div(dot, add_scalar(mul(na, nb), eps));
}

// ---------------------------------------------------------------------------
// token/image layout composites
// ---------------------------------------------------------------------------

/// [N,C] token matrix (N = h*w, row-major over y then x) -> [C,h,w] image.
template <typename T>
Tensor<T> tokens_to_image(const Tensor<T>& t, std::size_t h, std::size_t w) {
  if (t.rank() != 2 || t.size(0) != h * w)
    throw DimensionError("tokens_to_image: " + shape_str(t.shape()) +
                         " does not hold " + std::to_string(h * w) + " tokens");
  return reshape(permute(t, {1, 0}), {t.size(1), h, w});
}

/// [C,h,w] image -> [N,C] token matrix.
template <typename T>
Tensor<T> image_to_tokens(const Tensor<T>& x) {
  if (x.rank() != 3)
    throw DimensionError("image_to_tokens: expects [C,H,W], got " + shape_str(x.shape()));
  return permute(reshape(x, {x.size(0), x.size(1) * x.size(2)}), {1, 0});
}

/// [C,h,w] -> [C/4, 2h, 2w]; each group of four channels becomes a 2x2
/// spatial patch. Requires C divisible by 4.
template <typename T>
Tensor<T> pixel_shuffle2(const Tensor<T>& x) {
  if (x.rank() != 3 || x.size(0) % 4 != 0)
    throw DimensionError("pixel_shuffle2: channels of " + shape_str(x.shape()) +
                         " not divisible by 4");
  const std::size_t c = x.size(0) / 4, h = x.size(1), w = x.size(2);
  Tensor<T> r = reshape(x, {c, 2, 2, h, w});
  r = permute(r, {0, 3, 1, 4, 2});  // [c, h, 2, w, 2]
  return reshape(r, {c, 2 * h, 2 * w});
}

/// Inverse of pixel_shuffle2: [C,2h,2w] -> [4C,h,w].
template <typename T>
Tensor<T> pixel_unshuffle2(const Tensor<T>& x) {
  if (x.rank() != 3 || x.size(1) % 2 != 0 || x.size(2) % 2 != 0)
    throw DimensionError("pixel_unshuffle2: spatial dims of " + shape_str(x.shape()) +
                         " not even");
  const std::size_t c = x.size(0), h = x.size(1) / 2, w = x.size(2) / 2;
  Tensor<T> r = reshape(x, {c, h, 2, w, 2});
  r = permute(r, {0, 2, 4, 1, 3});  // [c, 2, 2, h, w]
  return reshape(r, {4 * c, h, w});
}

/// Column mean of a [N,C] matrix -> [C]. Built on matmul so it is
/// differentiable without a dedicated op.
template <typename T>
Tensor<T> mean_rows(const Tensor<T>& x) {
  if (x.rank() != 2)
    throw DimensionError("mean_rows: expects rank-2, got " + shape_str(x.shape()));
  Tensor<T> ones = Tensor<T>::full({1, x.size(0)}, T(1) / static_cast<T>(x.size(0)));
  return reshape(matmul(ones, x), {x.size(1)});
}

}  // namespace mwf
