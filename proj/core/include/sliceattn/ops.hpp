#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "sliceattn/tensor.hpp"

namespace sliceattn {

enum class BinaryKind { Add, Sub, Mul, Div };
enum class UnaryKind { Relu, Exp, Log, Neg, Sigmoid, Tanh };
enum class ReduceKind { Sum, Mean, Max };

namespace detail {

// Broadcasting is limited to scalars and shapes that, after stripping leading
// 1-extents, are a suffix of the other operand's shape.
inline Shape strip_leading_ones(const Shape& s) {
  std::size_t i = 0;
  while (i < s.size() && s[i] == 1) ++i;
  return Shape(s.begin() + static_cast<std::ptrdiff_t>(i), s.end());
}

inline bool is_suffix_of(const Shape& suffix, const Shape& full) {
  if (suffix.size() > full.size()) return false;
  return std::equal(suffix.rbegin(), suffix.rend(), full.rbegin());
}

template <typename S>
inline S binary_eval(BinaryKind k, S a, S b) {
  switch (k) {
    case BinaryKind::Add: return a + b;
    case BinaryKind::Sub: return a - b;
    case BinaryKind::Mul: return a * b;
    case BinaryKind::Div: return a / b;
  }
  return S(0);
}

inline std::vector<std::int64_t> row_major_strides(const Shape& s) {
  std::vector<std::int64_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) {
    st[i - 1] = st[i] * s[i];
  }
  return st;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise binary ops with suffix broadcasting

template <typename S>
TensorT<S> elementwise(BinaryKind kind, const TensorT<S>& a, const TensorT<S>& b) {
  const Shape sa = detail::strip_leading_ones(a.shape);
  const Shape sb = detail::strip_leading_ones(b.shape);
  bool a_big;
  if (sa == sb) {
    a_big = true;
  } else if (detail::is_suffix_of(sb, sa)) {
    a_big = true;
  } else if (detail::is_suffix_of(sa, sb)) {
    a_big = false;
  } else {
    throw ShapeError("elementwise op shape mismatch: " + shape_str(a.shape) + " vs " +
                     shape_str(b.shape));
  }
  const TensorT<S>& big = a_big ? a : b;
  const std::int64_t n = big.numel();
  const std::int64_t an = a.numel();
  const std::int64_t bn = b.numel();
  if (an == 0 || bn == 0) {
    throw ShapeError("elementwise op on empty tensor: " + shape_str(a.shape) + " vs " +
                     shape_str(b.shape));
  }

  TensorT<S> out(big.shape);
  S* od = out.ptr();
  const S* ad = a.ptr();
  const S* bd = b.ptr();
  for (std::int64_t i = 0; i < n; ++i) {
    od[i] = detail::binary_eval(kind, ad[an == n ? i : i % an], bd[bn == n ? i : i % bn]);
  }
  detail::check_finite(out, "elementwise");

  auto* tape = TapeT<S>::active();
  if (tape && (a.requires_grad || b.requires_grad)) {
    const int pa = tape->ensure_node(a);
    const int pb = tape->ensure_node(b);
    auto ga = pa >= 0 ? a.grad : nullptr;
    auto gb = pb >= 0 ? b.grad : nullptr;
    auto adp = a.data;
    auto bdp = b.data;
    out.grad = detail::zeros_like_buffer(out);
    auto go = out.grad;
    tape->emit(out, {pa, pb}, [kind, ga, gb, adp, bdp, go, n, an, bn]() {
      const S* gop = go->data();
      const S* av = adp->data();
      const S* bv = bdp->data();
      for (std::int64_t i = 0; i < n; ++i) {
        const std::int64_t ia = an == n ? i : i % an;
        const std::int64_t ib = bn == n ? i : i % bn;
        const S g = gop[i];
        switch (kind) {
          case BinaryKind::Add:
            if (ga) (*ga)[ia] += g;
            if (gb) (*gb)[ib] += g;
            break;
          case BinaryKind::Sub:
            if (ga) (*ga)[ia] += g;
            if (gb) (*gb)[ib] -= g;
            break;
          case BinaryKind::Mul:
            if (ga) (*ga)[ia] += g * bv[ib];
            if (gb) (*gb)[ib] += g * av[ia];
            break;
          case BinaryKind::Div:
            if (ga) (*ga)[ia] += g / bv[ib];
            if (gb) (*gb)[ib] -= g * av[ia] / (bv[ib] * bv[ib]);
            break;
        }
      }
    });
  }
  return out;
}

// tensor (op) scalar
template <typename S>
TensorT<S> elementwise(BinaryKind kind, const TensorT<S>& a, S c) {
  const std::int64_t n = a.numel();
  TensorT<S> out(a.shape);
  S* od = out.ptr();
  const S* ad = a.ptr();
  for (std::int64_t i = 0; i < n; ++i) od[i] = detail::binary_eval(kind, ad[i], c);
  detail::check_finite(out, "elementwise-scalar");

  auto* tape = TapeT<S>::active();
  if (tape && a.requires_grad) {
    tape->ensure_node(a);
    auto ga = a.grad;
    out.grad = detail::zeros_like_buffer(out);
    auto go = out.grad;
    tape->emit(out, {a.node_id}, [kind, ga, go, c, n]() {
      const S* gop = go->data();
      for (std::int64_t i = 0; i < n; ++i) {
        switch (kind) {
          case BinaryKind::Add:
          case BinaryKind::Sub: (*ga)[i] += gop[i]; break;
          case BinaryKind::Mul: (*ga)[i] += gop[i] * c; break;
          case BinaryKind::Div: (*ga)[i] += gop[i] / c; break;
        }
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) { return elementwise(BinaryKind::Add, a, b); }
template <typename S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) { return elementwise(BinaryKind::Sub, a, b); }
template <typename S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) { return elementwise(BinaryKind::Mul, a, b); }
template <typename S>
TensorT<S> div(const TensorT<S>& a, const TensorT<S>& b) { return elementwise(BinaryKind::Div, a, b); }
template <typename S>
TensorT<S> add(const TensorT<S>& a, S c) { return elementwise(BinaryKind::Add, a, c); }
template <typename S>
TensorT<S> sub(const TensorT<S>& a, S c) { return elementwise(BinaryKind::Sub, a, c); }
template <typename S>
TensorT<S> mul(const TensorT<S>& a, S c) { return elementwise(BinaryKind::Mul, a, c); }
template <typename S>
TensorT<S> div(const TensorT<S>& a, S c) { return elementwise(BinaryKind::Div, a, c); }

// ---------------------------------------------------------------------------
// elementwise unary ops

template <typename S>
TensorT<S> unary(UnaryKind kind, const TensorT<S>& x) {
  const std::int64_t n = x.numel();
  TensorT<S> out(x.shape);
  S* od = out.ptr();
  const S* xd = x.ptr();
  for (std::int64_t i = 0; i < n; ++i) {
    const S v = xd[i];
    switch (kind) {
      case UnaryKind::Relu: od[i] = v > S(0) ? v : S(0); break;
      case UnaryKind::Exp: od[i] = std::exp(v); break;
      case UnaryKind::Log: od[i] = std::log(v); break;
      case UnaryKind::Neg: od[i] = -v; break;
      case UnaryKind::Sigmoid: od[i] = S(1) / (S(1) + std::exp(-v)); break;
      case UnaryKind::Tanh: od[i] = std::tanh(v); break;
    }
  }
  detail::check_finite(out, "unary");

  auto* tape = TapeT<S>::active();
  if (tape && x.requires_grad) {
    tape->ensure_node(x);
    auto gx = x.grad;
    auto xd_p = x.data;
    auto yd_p = out.data;
    out.grad = detail::zeros_like_buffer(out);
    auto go = out.grad;
    tape->emit(out, {x.node_id}, [kind, gx, go, xd_p, yd_p, n]() {
      const S* gop = go->data();
      const S* xv = xd_p->data();
      const S* yv = yd_p->data();
      for (std::int64_t i = 0; i < n; ++i) {
        const S g = gop[i];
        switch (kind) {
          case UnaryKind::Relu: (*gx)[i] += xv[i] > S(0) ? g : S(0); break;
          case UnaryKind::Exp: (*gx)[i] += g * yv[i]; break;
          case UnaryKind::Log: (*gx)[i] += g / xv[i]; break;
          case UnaryKind::Neg: (*gx)[i] -= g; break;
          case UnaryKind::Sigmoid: (*gx)[i] += g * yv[i] * (S(1) - yv[i]); break;
          case UnaryKind::Tanh: (*gx)[i] += g * (S(1) - yv[i] * yv[i]); break;
        }
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> relu(const TensorT<S>& x) { return unary(UnaryKind::Relu, x); }
template <typename S>
TensorT<S> exp(const TensorT<S>& x) { return unary(UnaryKind::Exp, x); }
template <typename S>
TensorT<S> log(const TensorT<S>& x) { return unary(UnaryKind::Log, x); }
template <typename S>
TensorT<S> neg(const TensorT<S>& x) { return unary(UnaryKind::Neg, x); }
template <typename S>
TensorT<S> sigmoid(const TensorT<S>& x) { return unary(UnaryKind::Sigmoid, x); }
template <typename S>
TensorT<S> tanh(const TensorT<S>& x) { return unary(UnaryKind::Tanh, x); }

// ---------------------------------------------------------------------------
// matmul with batch broadcasting over the leading dimensions

namespace detail {

struct MatmulDims {
  std::int64_t m, k, n;
  Shape out_batch;
  std::vector<std::int64_t> a_batch, b_batch;  // per out-batch flat offsets in matrices
};

template <typename S>
MatmulDims matmul_dims(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw ShapeError("matmul needs rank >= 2 operands, got " + shape_str(a.shape) + " and " +
                     shape_str(b.shape));
  }
  MatmulDims d;
  d.m = a.shape[a.rank() - 2];
  d.k = a.shape[a.rank() - 1];
  const std::int64_t k2 = b.shape[b.rank() - 2];
  d.n = b.shape[b.rank() - 1];
  if (d.k != k2) {
    throw ShapeError("matmul inner dimension mismatch: " + shape_str(a.shape) + " x " +
                     shape_str(b.shape));
  }
  Shape ab(a.shape.begin(), a.shape.end() - 2);
  Shape bb(b.shape.begin(), b.shape.end() - 2);
  const std::size_t r = std::max(ab.size(), bb.size());
  Shape ab_p(r, 1), bb_p(r, 1), ob(r, 1);
  std::copy(ab.begin(), ab.end(), ab_p.begin() + static_cast<std::ptrdiff_t>(r - ab.size()));
  std::copy(bb.begin(), bb.end(), bb_p.begin() + static_cast<std::ptrdiff_t>(r - bb.size()));
  for (std::size_t i = 0; i < r; ++i) {
    if (ab_p[i] == bb_p[i] || ab_p[i] == 1 || bb_p[i] == 1) {
      ob[i] = std::max(ab_p[i], bb_p[i]);
    } else {
      throw ShapeError("matmul batch dimension mismatch: " + shape_str(a.shape) + " x " +
                       shape_str(b.shape));
    }
  }
  d.out_batch = ob;
  const std::int64_t nb = shape_numel(ob);
  const auto ob_st = row_major_strides(ob);
  const auto ab_st = row_major_strides(ab_p);
  const auto bb_st = row_major_strides(bb_p);
  d.a_batch.resize(static_cast<std::size_t>(nb));
  d.b_batch.resize(static_cast<std::size_t>(nb));
  for (std::int64_t t = 0; t < nb; ++t) {
    std::int64_t ai = 0, bi = 0, rem = t;
    for (std::size_t i = 0; i < r; ++i) {
      const std::int64_t idx = ob_st[i] ? rem / ob_st[i] : 0;
      rem -= idx * ob_st[i];
      ai += (ab_p[i] == 1 ? 0 : idx) * ab_st[i];
      bi += (bb_p[i] == 1 ? 0 : idx) * bb_st[i];
    }
    d.a_batch[static_cast<std::size_t>(t)] = ai;
    d.b_batch[static_cast<std::size_t>(t)] = bi;
  }
  return d;
}

}  // namespace detail

template <typename S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
  const auto dims = detail::matmul_dims(a, b);
  Shape out_shape = dims.out_batch;
  out_shape.push_back(static_cast<int>(dims.m));
  out_shape.push_back(static_cast<int>(dims.n));
  TensorT<S> out(out_shape);

  const std::int64_t m = dims.m, k = dims.k, n = dims.n;
  const std::int64_t nb = static_cast<std::int64_t>(dims.a_batch.size());
  const S* ad = a.ptr();
  const S* bd = b.ptr();
  S* od = out.ptr();
  for (std::int64_t t = 0; t < nb; ++t) {
    const S* A = ad + dims.a_batch[static_cast<std::size_t>(t)] * m * k;
    const S* B = bd + dims.b_batch[static_cast<std::size_t>(t)] * k * n;
    S* C = od + t * m * n;
    for (std::int64_t i = 0; i < m; ++i) {
      for (std::int64_t j = 0; j < n; ++j) C[i * n + j] = S(0);
      for (std::int64_t kk = 0; kk < k; ++kk) {
        const S av = A[i * k + kk];
        if (av == S(0)) continue;
        const S* Brow = B + kk * n;
        S* Crow = C + i * n;
        for (std::int64_t j = 0; j < n; ++j) Crow[j] += av * Brow[j];
      }
    }
  }
  detail::check_finite(out, "matmul");

  auto* tape = TapeT<S>::active();
  if (tape && (a.requires_grad || b.requires_grad)) {
    const int pa = tape->ensure_node(a);
    const int pb = tape->ensure_node(b);
    auto ga = pa >= 0 ? a.grad : nullptr;
    auto gb = pb >= 0 ? b.grad : nullptr;
    auto adp = a.data;
    auto bdp = b.data;
    out.grad = detail::zeros_like_buffer(out);
    auto go = out.grad;
    tape->emit(out, {pa, pb}, [dims, ga, gb, adp, bdp, go]() {
      const std::int64_t m = dims.m, k = dims.k, n = dims.n;
      const std::int64_t nb = static_cast<std::int64_t>(dims.a_batch.size());
      const S* av = adp->data();
      const S* bv = bdp->data();
      const S* gov = go->data();
      for (std::int64_t t = 0; t < nb; ++t) {
        const S* A = av + dims.a_batch[static_cast<std::size_t>(t)] * m * k;
        const S* B = bv + dims.b_batch[static_cast<std::size_t>(t)] * k * n;
        const S* G = gov + t * m * n;
        if (ga) {
          S* GA = ga->data() + dims.a_batch[static_cast<std::size_t>(t)] * m * k;
          for (std::int64_t i = 0; i < m; ++i) {
            for (std::int64_t kk = 0; kk < k; ++kk) {
              S acc = S(0);
              const S* Grow = G + i * n;
              const S* Brow = B + kk * n;
              for (std::int64_t j = 0; j < n; ++j) acc += Grow[j] * Brow[j];
              GA[i * k + kk] += acc;
            }
          }
        }
        if (gb) {
          S* GB = gb->data() + dims.b_batch[static_cast<std::size_t>(t)] * k * n;
          for (std::int64_t kk = 0; kk < k; ++kk) {
            for (std::int64_t i = 0; i < m; ++i) {
              const S av2 = A[i * k + kk];
              if (av2 == S(0)) continue;
              const S* Grow = G + i * n;
              S* GBrow = GB + kk * n;
              for (std::int64_t j = 0; j < n; ++j) GBrow[j] += av2 * Grow[j];
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// softmax along one axis, stabilized by max subtraction

template <typename S>
TensorT<S> softmax(const TensorT<S>& x, int axis) {
  if (axis < 0) axis += x.rank();
  if (axis < 0 || axis >= x.rank()) {
    throw ShapeError("softmax axis out of range for shape " + shape_str(x.shape));
  }
  const std::int64_t n_axis = x.shape[static_cast<std::size_t>(axis)];
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.shape[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < x.rank(); ++i) inner *= x.shape[static_cast<std::size_t>(i)];

  TensorT<S> out(x.shape);
  const S* xd = x.ptr();
  S* od = out.ptr();
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t i = 0; i < inner; ++i) {
      const std::int64_t base = o * n_axis * inner + i;
      S mx = xd[base];
      for (std::int64_t j = 1; j < n_axis; ++j) mx = std::max(mx, xd[base + j * inner]);
      S sum = S(0);
      for (std::int64_t j = 0; j < n_axis; ++j) {
        const S e = std::exp(xd[base + j * inner] - mx);
        od[base + j * inner] = e;
        sum += e;
      }
      for (std::int64_t j = 0; j < n_axis; ++j) od[base + j * inner] /= sum;
    }
  }
  detail::check_finite(out, "softmax");

  auto* tape = TapeT<S>::active();
  if (tape && x.requires_grad) {
    tape->ensure_node(x);
    auto gx = x.grad;
    auto yd = out.data;
    out.grad = detail::zeros_like_buffer(out);
    auto go = out.grad;
    tape->emit(out, {x.node_id}, [gx, go, yd, outer, inner, n_axis]() {
      const S* y = yd->data();
      const S* g = go->data();
      for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t i = 0; i < inner; ++i) {
          const std::int64_t base = o * n_axis * inner + i;
          S dot = S(0);
          for (std::int64_t j = 0; j < n_axis; ++j) {
            dot += g[base + j * inner] * y[base + j * inner];
          }
          for (std::int64_t j = 0; j < n_axis; ++j) {
            const std::int64_t idx = base + j * inner;
            (*gx)[idx] += y[idx] * (g[idx] - dot);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// reductions over one axis (the axis is dropped from the shape)

template <typename S>
TensorT<S> reduce(ReduceKind kind, const TensorT<S>& x, int axis) {
  if (axis < 0) axis += x.rank();
  if (axis < 0 || axis >= x.rank()) {
    throw ShapeError("reduce axis out of range for shape " + shape_str(x.shape));
  }
  const std::int64_t n_axis = x.shape[static_cast<std::size_t>(axis)];
  if (n_axis == 0) throw ValueError("reduce over empty axis in shape " + shape_str(x.shape));
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.shape[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < x.rank(); ++i) inner *= x.shape[static_cast<std::size_t>(i)];

  Shape out_shape;
  for (int i = 0; i < x.rank(); ++i) {
    if (i != axis) out_shape.push_back(x.shape[static_cast<std::size_t>(i)]);
  }
  TensorT<S> out(out_shape);
  const S* xd = x.ptr();
  S* od = out.ptr();
  std::vector<std::int64_t> argmax;
  if (kind == ReduceKind::Max) argmax.resize(static_cast<std::size_t>(outer * inner));
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t i = 0; i < inner; ++i) {
      const std::int64_t base = o * n_axis * inner + i;
      if (kind == ReduceKind::Max) {
        S best = xd[base];
        std::int64_t bj = 0;
        for (std::int64_t j = 1; j < n_axis; ++j) {
          const S v = xd[base + j * inner];
          if (v > best) {  // ties keep the first maximal index
            best = v;
            bj = j;
          }
        }
        od[o * inner + i] = best;
        argmax[static_cast<std::size_t>(o * inner + i)] = bj;
      } else {
        S acc = S(0);
        for (std::int64_t j = 0; j < n_axis; ++j) acc += xd[base + j * inner];
        od[o * inner + i] = kind == ReduceKind::Mean ? acc / static_cast<S>(n_axis) : acc;
      }
    }
  }
  detail::check_finite(out, "reduce");

  auto* tape = TapeT<S>::active();
  if (tape && x.requires_grad) {
    tape->ensure_node(x);
    auto gx = x.grad;
    out.grad = detail::zeros_like_buffer(out);
    auto go = out.grad;
    tape->emit(out, {x.node_id},
               [kind, gx, go, outer, inner, n_axis, argmax = std::move(argmax)]() {
      const S* g = go->data();
      for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t i = 0; i < inner; ++i) {
          const std::int64_t base = o * n_axis * inner + i;
          const S gv = g[o * inner + i];
          switch (kind) {
            case ReduceKind::Sum:
              for (std::int64_t j = 0; j < n_axis; ++j) (*gx)[base + j * inner] += gv;
              break;
            case ReduceKind::Mean:
              for (std::int64_t j = 0; j < n_axis; ++j) {
                (*gx)[base + j * inner] += gv / static_cast<S>(n_axis);
              }
              break;
            case ReduceKind::Max:
              (*gx)[base + argmax[static_cast<std::size_t>(o * inner + i)] * inner] += gv;
              break;
          }
        }
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> reduce_sum(const TensorT<S>& x, int axis) { return reduce(ReduceKind::Sum, x, axis); }
template <typename S>
TensorT<S> reduce_mean(const TensorT<S>& x, int axis) { return reduce(ReduceKind::Mean, x, axis); }
template <typename S>
TensorT<S> reduce_max(const TensorT<S>& x, int axis) { return reduce(ReduceKind::Max, x, axis); }

template <typename S>
TensorT<S> sum_all(const TensorT<S>& x) {
  TensorT<S> out(Shape{});
  const S* xd = x.ptr();
  S acc = S(0);
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) acc += xd[i];
  (*out.data)[0] = acc;
  detail::check_finite(out, "sum_all");

  auto* tape = TapeT<S>::active();
  if (tape && x.requires_grad) {
    tape->ensure_node(x);
    auto gx = x.grad;
    out.grad = detail::zeros_like_buffer(out);
    auto go = out.grad;
    tape->emit(out, {x.node_id}, [gx, go, n]() {
      const S g = (*go)[0];
      for (std::int64_t i = 0; i < n; ++i) (*gx)[i] += g;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// shape ops; all materialize their result

template <typename S>
TensorT<S> reshape(const TensorT<S>& x, Shape new_shape) {
  if (shape_numel(new_shape) != x.numel()) {
    throw ShapeError("reshape from " + shape_str(x.shape) + " to " + shape_str(new_shape) +
                     " changes element count");
  }
  TensorT<S> out(std::move(new_shape), std::vector<S>(*x.data));

  auto* tape = TapeT<S>::active();
  if (tape && x.requires_grad) {
    tape->ensure_node(x);
    auto gx = x.grad;
    out.grad = detail::zeros_like_buffer(out);
    auto go = out.grad;
    const std::int64_t n = x.numel();
    tape->emit(out, {x.node_id}, [gx, go, n]() {
      for (std::int64_t i = 0; i < n; ++i) (*gx)[i] += (*go)[i];
    });
  }
  return out;
}

template <typename S>
TensorT<S> transpose(const TensorT<S>& x, const std::vector<int>& perm) {
  const int r = x.rank();
  if (static_cast<int>(perm.size()) != r) {
    throw ShapeError("transpose permutation rank mismatch for " + shape_str(x.shape));
  }
  std::vector<bool> seen(static_cast<std::size_t>(r), false);
  for (int p : perm) {
    if (p < 0 || p >= r || seen[static_cast<std::size_t>(p)]) {
      throw ShapeError("invalid transpose permutation");
    }
    seen[static_cast<std::size_t>(p)] = true;
  }
  Shape out_shape(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) {
    out_shape[static_cast<std::size_t>(i)] = x.shape[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
  }
  const auto in_st = detail::row_major_strides(x.shape);
  const auto out_st = detail::row_major_strides(out_shape);
  // out[j0..jr] = x[j_{perm^-1}] ; walk the input and scatter to the output
  std::vector<std::int64_t> scatter(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) {
    scatter[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])] = out_st[static_cast<std::size_t>(i)];
  }
  const std::int64_t n = x.numel();
  TensorT<S> out(out_shape);
  const S* xd = x.ptr();
  S* od = out.ptr();
  std::vector<std::int64_t> out_index(static_cast<std::size_t>(n));
  {
    std::vector<std::int64_t> idx(static_cast<std::size_t>(r), 0);
    std::int64_t oi = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      out_index[static_cast<std::size_t>(i)] = oi;
      od[oi] = xd[i];
      for (int d = r - 1; d >= 0; --d) {
        const auto du = static_cast<std::size_t>(d);
        if (++idx[du] < x.shape[du]) {
          oi += scatter[du];
          break;
        }
        idx[du] = 0;
        oi -= scatter[du] * (x.shape[du] - 1);
      }
    }
  }

  auto* tape = TapeT<S>::active();
  if (tape && x.requires_grad) {
    tape->ensure_node(x);
    auto gx = x.grad;
    out.grad = detail::zeros_like_buffer(out);
    auto go = out.grad;
    tape->emit(out, {x.node_id}, [gx, go, out_index = std::move(out_index), n]() {
      for (std::int64_t i = 0; i < n; ++i) {
        (*gx)[i] += (*go)[out_index[static_cast<std::size_t>(i)]];
      }
    });
  }
  return out;
}

// Contiguous slab along the first axis.
template <typename S>
TensorT<S> slice_first(const TensorT<S>& x, int offset, int len) {
  if (x.rank() < 1) throw ShapeError("slice_first on rank-0 tensor");
  const int e = x.shape[0];
  if (offset < 0 || len <= 0 || offset + len > e) {
    throw ShapeError("slice_first range [" + std::to_string(offset) + "," +
                     std::to_string(offset + len) + ") out of extent " + std::to_string(e));
  }
  const std::int64_t block = x.numel() / e;
  Shape out_shape = x.shape;
  out_shape[0] = len;
  TensorT<S> out(out_shape);
  std::copy_n(x.ptr() + offset * block, len * block, out.ptr());

  auto* tape = TapeT<S>::active();
  if (tape && x.requires_grad) {
    tape->ensure_node(x);
    auto gx = x.grad;
    out.grad = detail::zeros_like_buffer(out);
    auto go = out.grad;
    tape->emit(out, {x.node_id}, [gx, go, offset, len, block]() {
      for (std::int64_t i = 0; i < len * block; ++i) {
        (*gx)[offset * block + i] += (*go)[i];
      }
    });
  }
  return out;
}

// Slice along the last axis.
template <typename S>
TensorT<S> slice_last(const TensorT<S>& x, int offset, int len) {
  if (x.rank() < 1) throw ShapeError("slice_last on rank-0 tensor");
  const int e = x.shape.back();
  if (offset < 0 || len <= 0 || offset + len > e) {
    throw ShapeError("slice_last range [" + std::to_string(offset) + "," +
                     std::to_string(offset + len) + ") out of extent " + std::to_string(e));
  }
  const std::int64_t outer = x.numel() / e;
  Shape out_shape = x.shape;
  out_shape.back() = len;
  TensorT<S> out(out_shape);
  const S* xd = x.ptr();
  S* od = out.ptr();
  for (std::int64_t o = 0; o < outer; ++o) {
    std::copy_n(xd + o * e + offset, len, od + o * len);
  }

  auto* tape = TapeT<S>::active();
  if (tape && x.requires_grad) {
    tape->ensure_node(x);
    auto gx = x.grad;
    out.grad = detail::zeros_like_buffer(out);
    auto go = out.grad;
    tape->emit(out, {x.node_id}, [gx, go, offset, len, e, outer]() {
      for (std::int64_t o = 0; o < outer; ++o) {
        for (int i = 0; i < len; ++i) {
          (*gx)[o * e + offset + i] += (*go)[o * len + i];
        }
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> concat(const std::vector<TensorT<S>>& xs, int axis) {
  if (xs.empty()) throw ShapeError("concat of zero tensors");
  const int r = xs[0].rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("concat axis out of range");
  int total = 0;
  for (const auto& t : xs) {
    if (t.rank() != r) throw ShapeError("concat rank mismatch");
    for (int i = 0; i < r; ++i) {
      if (i != axis && t.shape[static_cast<std::size_t>(i)] != xs[0].shape[static_cast<std::size_t>(i)]) {
        throw ShapeError("concat shape mismatch: " + shape_str(t.shape) + " vs " +
                         shape_str(xs[0].shape));
      }
    }
    total += t.shape[static_cast<std::size_t>(axis)];
  }
  Shape out_shape = xs[0].shape;
  out_shape[static_cast<std::size_t>(axis)] = total;
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= out_shape[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < r; ++i) inner *= out_shape[static_cast<std::size_t>(i)];

  TensorT<S> out(out_shape);
  S* od = out.ptr();
  std::vector<int> offsets;
  {
    int off = 0;
    for (const auto& t : xs) {
      offsets.push_back(off);
      const int e = t.shape[static_cast<std::size_t>(axis)];
      const S* td = t.ptr();
      for (std::int64_t o = 0; o < outer; ++o) {
        std::copy_n(td + o * e * inner, e * inner, od + (o * total + off) * inner);
      }
      off += e;
    }
  }

  auto* tape = TapeT<S>::active();
  bool any = false;
  for (const auto& t : xs) any = any || t.requires_grad;
  if (tape && any) {
    std::vector<int> parents;
    std::vector<std::shared_ptr<std::vector<S>>> grads;
    std::vector<int> extents;
    for (const auto& t : xs) {
      parents.push_back(tape->ensure_node(t));
      grads.push_back(parents.back() >= 0 ? t.grad : nullptr);
      extents.push_back(t.shape[static_cast<std::size_t>(axis)]);
    }
    out.grad = detail::zeros_like_buffer(out);
    auto go = out.grad;
    tape->emit(out, parents, [go, grads, extents, offsets, outer, inner, total]() {
      for (std::size_t s = 0; s < grads.size(); ++s) {
        if (!grads[s]) continue;
        const int e = extents[s];
        const int off = offsets[s];
        for (std::int64_t o = 0; o < outer; ++o) {
          for (std::int64_t i = 0; i < e * inner; ++i) {
            (*grads[s])[o * e * inner + i] += (*go)[(o * total + off) * inner + i];
          }
        }
      }
    });
  }
  return out;
}

}  // namespace sliceattn
