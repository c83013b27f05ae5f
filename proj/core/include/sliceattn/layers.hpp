#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "sliceattn/ops.hpp"
#include "sliceattn/rng.hpp"
#include "sliceattn/tensor.hpp"

namespace sliceattn {

// Named handle on a model tensor; buffers (running stats) are not trainable.
template <typename S>
struct ParamRef {
  std::string name;
  TensorT<S>* tensor;
  bool trainable;
};

// ---------------------------------------------------------------------------
// init

template <typename S>
void kaiming_uniform(TensorT<S>& w, std::int64_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (auto& v : *w.data) v = static_cast<S>(rng.uniform(-bound, bound));
}

// Orthonormal rows via modified Gram-Schmidt on a Gaussian matrix.
template <typename S>
void orthogonal_rows(TensorT<S>& w, Rng& rng) {
  const int rows = w.shape[0];
  const int cols = w.shape[1];
  std::vector<double> g(static_cast<std::size_t>(rows) * cols);
  for (auto& v : g) v = rng.normal();
  for (int r = 0; r < rows; ++r) {
    double* row = g.data() + static_cast<std::size_t>(r) * cols;
    for (int q = 0; q < r; ++q) {
      const double* prev = g.data() + static_cast<std::size_t>(q) * cols;
      double dot = 0.0;
      for (int c = 0; c < cols; ++c) dot += row[c] * prev[c];
      for (int c = 0; c < cols; ++c) row[c] -= dot * prev[c];
    }
    double norm = 0.0;
    for (int c = 0; c < cols; ++c) norm += row[c] * row[c];
    norm = std::sqrt(norm);
    if (norm < 1e-12) norm = 1.0;
    for (int c = 0; c < cols; ++c) row[c] /= norm;
  }
  for (std::size_t i = 0; i < g.size(); ++i) (*w.data)[i] = static_cast<S>(g[i]);
}

// ---------------------------------------------------------------------------
// convolution geometry

inline int conv_out_extent(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

namespace detail {

// Valid output range [lo, hi] for one spatial axis so that the input index
// o*stride - pad + kq stays inside [0, in).
inline std::pair<int, int> conv_span(int out, int in, int stride, int pad, int kq) {
  const int shift = kq - pad;
  int lo = shift >= 0 ? 0 : (-shift + stride - 1) / stride;
  int hi = (in - 1 - shift) / stride;
  if (hi > out - 1) hi = out - 1;
  return {lo, hi};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d: x[b, ci, h, w] * w[co, ci, k, k] + bias[co]

template <typename S>
TensorT<S> conv2d(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& b, int stride,
                  int padding) {
  if (x.rank() != 4 || w.rank() != 4) {
    throw ShapeError("conv2d expects x[b,c,h,w] and w[co,ci,k,k], got " + shape_str(x.shape) +
                     " and " + shape_str(w.shape));
  }
  const int B = x.shape[0], Ci = x.shape[1], H = x.shape[2], W = x.shape[3];
  const int Co = w.shape[0], K = w.shape[2];
  if (w.shape[1] != Ci) {
    throw ShapeError("conv2d channel mismatch: input has " + std::to_string(Ci) +
                     ", kernel expects " + std::to_string(w.shape[1]));
  }
  const int OH = conv_out_extent(H, K, stride, padding);
  const int OW = conv_out_extent(W, K, stride, padding);
  if (OH <= 0 || OW <= 0) {
    throw ShapeError("conv2d non-positive output extent for input " + shape_str(x.shape) +
                     " with k=" + std::to_string(K) + " s=" + std::to_string(stride) +
                     " p=" + std::to_string(padding));
  }

  TensorT<S> out(Shape{B, Co, OH, OW});
  const S* xd = x.ptr();
  const S* wd = w.ptr();
  const S* bd = b.ptr();
  S* od = out.ptr();
  for (int n = 0; n < B; ++n) {
    for (int co = 0; co < Co; ++co) {
      S* oplane = od + (static_cast<std::int64_t>(n) * Co + co) * OH * OW;
      for (std::int64_t i = 0; i < static_cast<std::int64_t>(OH) * OW; ++i) oplane[i] = bd[co];
      for (int ci = 0; ci < Ci; ++ci) {
        const S* xplane = xd + (static_cast<std::int64_t>(n) * Ci + ci) * H * W;
        const S* wk = wd + (static_cast<std::int64_t>(co) * Ci + ci) * K * K;
        for (int kh = 0; kh < K; ++kh) {
          const auto [oh_lo, oh_hi] = detail::conv_span(OH, H, stride, padding, kh);
          for (int kw = 0; kw < K; ++kw) {
            const S wv = wk[kh * K + kw];
            if (wv == S(0)) continue;
            const auto [ow_lo, ow_hi] = detail::conv_span(OW, W, stride, padding, kw);
            for (int oh = oh_lo; oh <= oh_hi; ++oh) {
              const S* xrow = xplane + (oh * stride - padding + kh) * W + (kw - padding);
              S* orow = oplane + oh * OW;
              for (int ow = ow_lo; ow <= ow_hi; ++ow) orow[ow] += wv * xrow[ow * stride];
            }
          }
        }
      }
    }
  }
  detail::check_finite(out, "conv2d");

  auto* tape = TapeT<S>::active();
  if (tape && (x.requires_grad || w.requires_grad || b.requires_grad)) {
    const int px = tape->ensure_node(x);
    const int pw = tape->ensure_node(w);
    const int pb = tape->ensure_node(b);
    auto gx = px >= 0 ? x.grad : nullptr;
    auto gw = pw >= 0 ? w.grad : nullptr;
    auto gb = pb >= 0 ? b.grad : nullptr;
    auto xdp = x.data;
    auto wdp = w.data;
    out.grad = detail::zeros_like_buffer(out);
    auto go = out.grad;
    tape->emit(out, {px, pw, pb},
               [gx, gw, gb, xdp, wdp, go, B, Ci, H, W, Co, K, OH, OW, stride, padding]() {
      const S* xv = xdp->data();
      const S* wv = wdp->data();
      const S* gov = go->data();
      for (int n = 0; n < B; ++n) {
        for (int co = 0; co < Co; ++co) {
          const S* gplane = gov + (static_cast<std::int64_t>(n) * Co + co) * OH * OW;
          if (gb) {
            S acc = S(0);
            for (std::int64_t i = 0; i < static_cast<std::int64_t>(OH) * OW; ++i) acc += gplane[i];
            (*gb)[static_cast<std::size_t>(co)] += acc;
          }
          for (int ci = 0; ci < Ci; ++ci) {
            const S* xplane = xv + (static_cast<std::int64_t>(n) * Ci + ci) * H * W;
            const S* wk = wv + (static_cast<std::int64_t>(co) * Ci + ci) * K * K;
            S* gxplane = gx ? gx->data() + (static_cast<std::int64_t>(n) * Ci + ci) * H * W : nullptr;
            S* gwk = gw ? gw->data() + (static_cast<std::int64_t>(co) * Ci + ci) * K * K : nullptr;
            for (int kh = 0; kh < K; ++kh) {
              const auto [oh_lo, oh_hi] = detail::conv_span(OH, H, stride, padding, kh);
              for (int kw = 0; kw < K; ++kw) {
                const auto [ow_lo, ow_hi] = detail::conv_span(OW, W, stride, padding, kw);
                const S wval = wk[kh * K + kw];
                S wacc = S(0);
                for (int oh = oh_lo; oh <= oh_hi; ++oh) {
                  const int ih = oh * stride - padding + kh;
                  const S* xrow = xplane + ih * W + (kw - padding);
                  S* gxrow = gxplane ? gxplane + ih * W + (kw - padding) : nullptr;
                  const S* grow = gplane + oh * OW;
                  for (int ow = ow_lo; ow <= ow_hi; ++ow) {
                    const S g = grow[ow];
                    if (gxrow) gxrow[ow * stride] += wval * g;
                    wacc += xrow[ow * stride] * g;
                  }
                }
                if (gwk) gwk[kh * K + kw] += wacc;
              }
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// conv3d: x[b, ci, d, h, w] * w[co, ci, k, k, k] + bias[co]

template <typename S>
TensorT<S> conv3d(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& b, int stride,
                  int padding) {
  if (x.rank() != 5 || w.rank() != 5) {
    throw ShapeError("conv3d expects x[b,c,d,h,w] and w[co,ci,k,k,k], got " + shape_str(x.shape) +
                     " and " + shape_str(w.shape));
  }
  const int B = x.shape[0], Ci = x.shape[1], D = x.shape[2], H = x.shape[3], W = x.shape[4];
  const int Co = w.shape[0], K = w.shape[2];
  if (w.shape[1] != Ci) {
    throw ShapeError("conv3d channel mismatch: input has " + std::to_string(Ci) +
                     ", kernel expects " + std::to_string(w.shape[1]));
  }
  const int OD = conv_out_extent(D, K, stride, padding);
  const int OH = conv_out_extent(H, K, stride, padding);
  const int OW = conv_out_extent(W, K, stride, padding);
  if (OD <= 0 || OH <= 0 || OW <= 0) {
    throw ShapeError("conv3d non-positive output extent for input " + shape_str(x.shape));
  }

  TensorT<S> out(Shape{B, Co, OD, OH, OW});
  const S* xd = x.ptr();
  const S* wd = w.ptr();
  const S* bd = b.ptr();
  S* od = out.ptr();
  const std::int64_t ovol = static_cast<std::int64_t>(OD) * OH * OW;
  for (int n = 0; n < B; ++n) {
    for (int co = 0; co < Co; ++co) {
      S* ovolp = od + (static_cast<std::int64_t>(n) * Co + co) * ovol;
      for (std::int64_t i = 0; i < ovol; ++i) ovolp[i] = bd[co];
      for (int ci = 0; ci < Ci; ++ci) {
        const S* xvol = xd + (static_cast<std::int64_t>(n) * Ci + ci) * D * H * W;
        const S* wk = wd + (static_cast<std::int64_t>(co) * Ci + ci) * K * K * K;
        for (int kd = 0; kd < K; ++kd) {
          const auto [od_lo, od_hi] = detail::conv_span(OD, D, stride, padding, kd);
          for (int kh = 0; kh < K; ++kh) {
            const auto [oh_lo, oh_hi] = detail::conv_span(OH, H, stride, padding, kh);
            for (int kw = 0; kw < K; ++kw) {
              const S wv = wk[(kd * K + kh) * K + kw];
              if (wv == S(0)) continue;
              const auto [ow_lo, ow_hi] = detail::conv_span(OW, W, stride, padding, kw);
              for (int odx = od_lo; odx <= od_hi; ++odx) {
                const int id = odx * stride - padding + kd;
                for (int oh = oh_lo; oh <= oh_hi; ++oh) {
                  const int ih = oh * stride - padding + kh;
                  const S* xrow = xvol + (static_cast<std::int64_t>(id) * H + ih) * W + (kw - padding);
                  S* orow = ovolp + (static_cast<std::int64_t>(odx) * OH + oh) * OW;
                  for (int ow = ow_lo; ow <= ow_hi; ++ow) orow[ow] += wv * xrow[ow * stride];
                }
              }
            }
          }
        }
      }
    }
  }
  detail::check_finite(out, "conv3d");

  auto* tape = TapeT<S>::active();
  if (tape && (x.requires_grad || w.requires_grad || b.requires_grad)) {
    const int px = tape->ensure_node(x);
    const int pw = tape->ensure_node(w);
    const int pb = tape->ensure_node(b);
    auto gx = px >= 0 ? x.grad : nullptr;
    auto gw = pw >= 0 ? w.grad : nullptr;
    auto gb = pb >= 0 ? b.grad : nullptr;
    auto xdp = x.data;
    auto wdp = w.data;
    out.grad = detail::zeros_like_buffer(out);
    auto go = out.grad;
    tape->emit(out, {px, pw, pb},
               [gx, gw, gb, xdp, wdp, go, B, Ci, D, H, W, Co, K, OD, OH, OW, stride, padding]() {
      const S* xv = xdp->data();
      const S* wv = wdp->data();
      const S* gov = go->data();
      const std::int64_t ovol = static_cast<std::int64_t>(OD) * OH * OW;
      for (int n = 0; n < B; ++n) {
        for (int co = 0; co < Co; ++co) {
          const S* gvol = gov + (static_cast<std::int64_t>(n) * Co + co) * ovol;
          if (gb) {
            S acc = S(0);
            for (std::int64_t i = 0; i < ovol; ++i) acc += gvol[i];
            (*gb)[static_cast<std::size_t>(co)] += acc;
          }
          for (int ci = 0; ci < Ci; ++ci) {
            const S* xvol = xv + (static_cast<std::int64_t>(n) * Ci + ci) * D * H * W;
            const S* wk = wv + (static_cast<std::int64_t>(co) * Ci + ci) * K * K * K;
            S* gxvol = gx ? gx->data() + (static_cast<std::int64_t>(n) * Ci + ci) * D * H * W : nullptr;
            S* gwk = gw ? gw->data() + (static_cast<std::int64_t>(co) * Ci + ci) * K * K * K : nullptr;
            for (int kd = 0; kd < K; ++kd) {
              const auto [od_lo, od_hi] = detail::conv_span(OD, D, stride, padding, kd);
              for (int kh = 0; kh < K; ++kh) {
                const auto [oh_lo, oh_hi] = detail::conv_span(OH, H, stride, padding, kh);
                for (int kw = 0; kw < K; ++kw) {
                  const auto [ow_lo, ow_hi] = detail::conv_span(OW, W, stride, padding, kw);
                  const S wval = wk[(kd * K + kh) * K + kw];
                  S wacc = S(0);
                  for (int odx = od_lo; odx <= od_hi; ++odx) {
                    const int id = odx * stride - padding + kd;
                    for (int oh = oh_lo; oh <= oh_hi; ++oh) {
                      const int ih = oh * stride - padding + kh;
                      const S* xrow = xvol + (static_cast<std::int64_t>(id) * H + ih) * W + (kw - padding);
                      S* gxrow = gxvol
                          ? gxvol + (static_cast<std::int64_t>(id) * H + ih) * W + (kw - padding)
                          : nullptr;
                      const S* grow = gvol + (static_cast<std::int64_t>(odx) * OH + oh) * OW;
                      for (int ow = ow_lo; ow <= ow_hi; ++ow) {
                        const S g = grow[ow];
                        if (gxrow) gxrow[ow * stride] += wval * g;
                        wacc += xrow[ow * stride] * g;
                      }
                    }
                  }
                  if (gwk) gwk[(kd * K + kh) * K + kw] += wacc;
                }
              }
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// ACS convolution: one shared 2D kernel bank applied along the axial, coronal,
// and sagittal axes, with output channels partitioned among the three axes.

// Even partition; remainders go to the earlier axes: 8 -> (3, 3, 2).
inline std::array<int, 3> acs_default_split(int c_out) {
  const int base = c_out / 3;
  const int rem = c_out % 3;
  return {base + (rem > 0 ? 1 : 0), base + (rem > 1 ? 1 : 0), base};
}

namespace detail {

// Per-group kernel extents along (d, h, w): axis 0 keeps depth thin, etc.
inline std::array<std::array<int, 3>, 3> acs_kernel_dims(int k) {
  return {{{1, k, k}, {k, 1, k}, {k, k, 1}}};
}

inline std::array<std::array<int, 3>, 3> acs_pad_dims(int p) {
  return {{{0, p, p}, {p, 0, p}, {p, p, 0}}};
}

}  // namespace detail

template <typename S>
TensorT<S> acs_conv3d(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& b, int stride,
                      int padding, const std::array<int, 3>& split) {
  if (x.rank() != 5 || w.rank() != 4) {
    throw ShapeError("acs_conv3d expects x[b,c,d,h,w] and w[co,ci,k,k], got " +
                     shape_str(x.shape) + " and " + shape_str(w.shape));
  }
  const int B = x.shape[0], Ci = x.shape[1], D = x.shape[2], H = x.shape[3], W = x.shape[4];
  const int Co = w.shape[0], K = w.shape[2];
  if (w.shape[1] != Ci) {
    throw ShapeError("acs_conv3d channel mismatch: input has " + std::to_string(Ci) +
                     ", kernel expects " + std::to_string(w.shape[1]));
  }
  if (split[0] + split[1] + split[2] != Co || split[0] < 0 || split[1] < 0 || split[2] < 0) {
    throw ShapeError("acs_conv3d axis split (" + std::to_string(split[0]) + "," +
                     std::to_string(split[1]) + "," + std::to_string(split[2]) +
                     ") does not partition " + std::to_string(Co) + " output channels");
  }
  const auto kd = detail::acs_kernel_dims(K);
  const auto pd = detail::acs_pad_dims(padding);
  const std::array<int, 3> in = {D, H, W};
  std::array<std::array<int, 3>, 3> out_ext{};
  for (int g = 0; g < 3; ++g) {
    for (int a = 0; a < 3; ++a) {
      out_ext[static_cast<std::size_t>(g)][static_cast<std::size_t>(a)] =
          conv_out_extent(in[static_cast<std::size_t>(a)], kd[static_cast<std::size_t>(g)][static_cast<std::size_t>(a)],
                          stride, pd[static_cast<std::size_t>(g)][static_cast<std::size_t>(a)]);
    }
  }
  for (int g = 0; g < 3; ++g) {
    for (int a = 0; a < 3; ++a) {
      if (out_ext[static_cast<std::size_t>(g)][static_cast<std::size_t>(a)] <= 0) {
        throw ShapeError("acs_conv3d non-positive output extent for input " + shape_str(x.shape));
      }
    }
    if (out_ext[static_cast<std::size_t>(g)] != out_ext[0]) {
      throw ShapeError("acs_conv3d invalid geometry: axis groups disagree on output shape (k=" +
                       std::to_string(K) + ", p=" + std::to_string(padding) +
                       " requires 2p == k-1)");
    }
  }
  const int OD = out_ext[0][0], OH = out_ext[0][1], OW = out_ext[0][2];

  // Group boundaries in output-channel space.
  const std::array<int, 3> group_lo = {0, split[0], split[0] + split[1]};

  // The shared kernel bank is interpreted per group: the 2D kernel's (row, col)
  // map onto the plane spanned by the two non-slicing axes.
  auto run = [&](const S* xd, const S* wd, const S* bd, S* od, S* gxd, S* gwd, S* gbd,
                 const S* god) {
    const std::int64_t ovol = static_cast<std::int64_t>(OD) * OH * OW;
    const std::int64_t ivol = static_cast<std::int64_t>(D) * H * W;
    for (int g = 0; g < 3; ++g) {
      const int co_lo = group_lo[static_cast<std::size_t>(g)];
      const int co_hi = co_lo + split[static_cast<std::size_t>(g)];
      const auto kdim = kd[static_cast<std::size_t>(g)];
      const auto pdim = pd[static_cast<std::size_t>(g)];
      for (int n = 0; n < B; ++n) {
        for (int co = co_lo; co < co_hi; ++co) {
          S* oc = od ? od + (static_cast<std::int64_t>(n) * Co + co) * ovol : nullptr;
          const S* gc = god ? god + (static_cast<std::int64_t>(n) * Co + co) * ovol : nullptr;
          if (oc) {
            for (std::int64_t i = 0; i < ovol; ++i) oc[i] = bd[co];
          }
          if (gbd && gc) {
            S acc = S(0);
            for (std::int64_t i = 0; i < ovol; ++i) acc += gc[i];
            gbd[co] += acc;
          }
          for (int ci = 0; ci < Ci; ++ci) {
            const S* xvol = xd + (static_cast<std::int64_t>(n) * Ci + ci) * ivol;
            S* gxvol = gxd ? gxd + (static_cast<std::int64_t>(n) * Ci + ci) * ivol : nullptr;
            const S* wk = wd + (static_cast<std::int64_t>(co) * Ci + ci) * K * K;
            S* gwk = gwd ? gwd + (static_cast<std::int64_t>(co) * Ci + ci) * K * K : nullptr;
            for (int k0 = 0; k0 < kdim[0]; ++k0) {
              const auto [d_lo, d_hi] = detail::conv_span(OD, D, stride, pdim[0], k0);
              for (int k1 = 0; k1 < kdim[1]; ++k1) {
                const auto [h_lo, h_hi] = detail::conv_span(OH, H, stride, pdim[1], k1);
                for (int k2 = 0; k2 < kdim[2]; ++k2) {
                  const auto [w_lo, w_hi] = detail::conv_span(OW, W, stride, pdim[2], k2);
                  // 2D bank index: the two axes with kernel extent K
                  int krow, kcol;
                  if (g == 0) { krow = k1; kcol = k2; }
                  else if (g == 1) { krow = k0; kcol = k2; }
                  else { krow = k0; kcol = k1; }
                  const S wval = wk[krow * K + kcol];
                  if (oc && wval == S(0)) continue;
                  S wacc = S(0);
                  for (int odx = d_lo; odx <= d_hi; ++odx) {
                    const int id = odx * stride - pdim[0] + k0;
                    for (int oh = h_lo; oh <= h_hi; ++oh) {
                      const int ih = oh * stride - pdim[1] + k1;
                      const std::int64_t xbase = (static_cast<std::int64_t>(id) * H + ih) * W + (k2 - pdim[2]);
                      const std::int64_t obase = (static_cast<std::int64_t>(odx) * OH + oh) * OW;
                      for (int ow = w_lo; ow <= w_hi; ++ow) {
                        const int iw = ow * stride;
                        if (oc) {
                          oc[obase + ow] += wval * xvol[xbase + iw];
                        } else {
                          const S gv = gc[obase + ow];
                          if (gxvol) gxvol[xbase + iw] += wval * gv;
                          wacc += xvol[xbase + iw] * gv;
                        }
                      }
                    }
                  }
                  if (gwk) gwk[krow * K + kcol] += wacc;
                }
              }
            }
          }
        }
      }
    }
  };

  TensorT<S> out(Shape{B, Co, OD, OH, OW});
  run(x.ptr(), w.ptr(), b.ptr(), out.ptr(), nullptr, nullptr, nullptr, nullptr);
  detail::check_finite(out, "acs_conv3d");

  auto* tape = TapeT<S>::active();
  if (tape && (x.requires_grad || w.requires_grad || b.requires_grad)) {
    const int px = tape->ensure_node(x);
    const int pw = tape->ensure_node(w);
    const int pb = tape->ensure_node(b);
    auto gx = px >= 0 ? x.grad : nullptr;
    auto gw = pw >= 0 ? w.grad : nullptr;
    auto gb = pb >= 0 ? b.grad : nullptr;
    auto xdp = x.data;
    auto wdp = w.data;
    auto bdp = b.data;
    out.grad = detail::zeros_like_buffer(out);
    auto go = out.grad;
    tape->emit(out, {px, pw, pb}, [run, gx, gw, gb, xdp, wdp, bdp, go]() {
      run(xdp->data(), wdp->data(), bdp->data(), nullptr, gx ? gx->data() : nullptr,
          gw ? gw->data() : nullptr, gb ? gb->data() : nullptr, go->data());
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// max pooling (padding contributes nothing; ties go to the first scan index)

template <typename S>
TensorT<S> maxpool2d(const TensorT<S>& x, int k, int stride, int padding) {
  if (x.rank() != 4) throw ShapeError("maxpool2d expects x[b,c,h,w]");
  const int B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  const int OH = conv_out_extent(H, k, stride, padding);
  const int OW = conv_out_extent(W, k, stride, padding);
  if (OH <= 0 || OW <= 0) throw ShapeError("maxpool2d non-positive output extent");
  TensorT<S> out(Shape{B, C, OH, OW});
  std::vector<std::int64_t> argmax(static_cast<std::size_t>(out.numel()));
  const S* xd = x.ptr();
  S* od = out.ptr();
  std::int64_t oi = 0;
  for (int n = 0; n < B; ++n) {
    for (int c = 0; c < C; ++c) {
      const S* xplane = xd + (static_cast<std::int64_t>(n) * C + c) * H * W;
      const std::int64_t pbase = (static_cast<std::int64_t>(n) * C + c) * H * W;
      for (int oh = 0; oh < OH; ++oh) {
        for (int ow = 0; ow < OW; ++ow, ++oi) {
          S best = S(0);
          std::int64_t bidx = -1;
          for (int kh = 0; kh < k; ++kh) {
            const int ih = oh * stride - padding + kh;
            if (ih < 0 || ih >= H) continue;
            for (int kw = 0; kw < k; ++kw) {
              const int iw = ow * stride - padding + kw;
              if (iw < 0 || iw >= W) continue;
              const S v = xplane[ih * W + iw];
              if (bidx < 0 || v > best) {
                best = v;
                bidx = pbase + ih * W + iw;
              }
            }
          }
          od[oi] = best;
          argmax[static_cast<std::size_t>(oi)] = bidx;
        }
      }
    }
  }

  auto* tape = TapeT<S>::active();
  if (tape && x.requires_grad) {
    tape->ensure_node(x);
    auto gx = x.grad;
    out.grad = detail::zeros_like_buffer(out);
    auto go = out.grad;
    const std::int64_t n = out.numel();
    tape->emit(out, {x.node_id}, [gx, go, argmax = std::move(argmax), n]() {
      for (std::int64_t i = 0; i < n; ++i) {
        const std::int64_t a = argmax[static_cast<std::size_t>(i)];
        if (a >= 0) (*gx)[static_cast<std::size_t>(a)] += (*go)[static_cast<std::size_t>(i)];
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> maxpool3d(const TensorT<S>& x, int k, int stride, int padding) {
  if (x.rank() != 5) throw ShapeError("maxpool3d expects x[b,c,d,h,w]");
  const int B = x.shape[0], C = x.shape[1], D = x.shape[2], H = x.shape[3], W = x.shape[4];
  const int OD = conv_out_extent(D, k, stride, padding);
  const int OH = conv_out_extent(H, k, stride, padding);
  const int OW = conv_out_extent(W, k, stride, padding);
  if (OD <= 0 || OH <= 0 || OW <= 0) throw ShapeError("maxpool3d non-positive output extent");
  TensorT<S> out(Shape{B, C, OD, OH, OW});
  std::vector<std::int64_t> argmax(static_cast<std::size_t>(out.numel()));
  const S* xd = x.ptr();
  S* od = out.ptr();
  std::int64_t oi = 0;
  for (int n = 0; n < B; ++n) {
    for (int c = 0; c < C; ++c) {
      const std::int64_t pbase = (static_cast<std::int64_t>(n) * C + c) * D * H * W;
      const S* xvol = xd + pbase;
      for (int odx = 0; odx < OD; ++odx) {
        for (int oh = 0; oh < OH; ++oh) {
          for (int ow = 0; ow < OW; ++ow, ++oi) {
            S best = S(0);
            std::int64_t bidx = -1;
            for (int kd = 0; kd < k; ++kd) {
              const int id = odx * stride - padding + kd;
              if (id < 0 || id >= D) continue;
              for (int kh = 0; kh < k; ++kh) {
                const int ih = oh * stride - padding + kh;
                if (ih < 0 || ih >= H) continue;
                for (int kw = 0; kw < k; ++kw) {
                  const int iw = ow * stride - padding + kw;
                  if (iw < 0 || iw >= W) continue;
                  const S v = xvol[(static_cast<std::int64_t>(id) * H + ih) * W + iw];
                  if (bidx < 0 || v > best) {
                    best = v;
                    bidx = pbase + (static_cast<std::int64_t>(id) * H + ih) * W + iw;
                  }
                }
              }
            }
            od[oi] = best;
            argmax[static_cast<std::size_t>(oi)] = bidx;
          }
        }
      }
    }
  }

  auto* tape = TapeT<S>::active();
  if (tape && x.requires_grad) {
    tape->ensure_node(x);
    auto gx = x.grad;
    out.grad = detail::zeros_like_buffer(out);
    auto go = out.grad;
    const std::int64_t n = out.numel();
    tape->emit(out, {x.node_id}, [gx, go, argmax = std::move(argmax), n]() {
      for (std::int64_t i = 0; i < n; ++i) {
        const std::int64_t a = argmax[static_cast<std::size_t>(i)];
        if (a >= 0) (*gx)[static_cast<std::size_t>(a)] += (*go)[static_cast<std::size_t>(i)];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// batch normalization over channel axis 1 (rank 4 or 5 inputs)

template <typename S>
TensorT<S> batchnorm(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta,
                     TensorT<S>& running_mean, TensorT<S>& running_var, bool training,
                     S momentum, S eps) {
  if (x.rank() < 2) throw ShapeError("batchnorm expects rank >= 2 input");
  const int C = x.shape[1];
  if (x.shape[0] == 0) throw ValueError("batchnorm on empty batch");
  if (gamma.numel() != C || beta.numel() != C) {
    throw ShapeError("batchnorm parameter size mismatch for " + std::to_string(C) + " channels");
  }
  std::int64_t inner = 1;
  for (int i = 2; i < x.rank(); ++i) inner *= x.shape[static_cast<std::size_t>(i)];
  const int B = x.shape[0];
  const std::int64_t count = static_cast<std::int64_t>(B) * inner;  // samples per channel

  const S* xd = x.ptr();
  std::vector<S> mean(static_cast<std::size_t>(C)), inv_std(static_cast<std::size_t>(C));
  if (training) {
    std::vector<S> var(static_cast<std::size_t>(C));
    for (int c = 0; c < C; ++c) {
      S acc = S(0);
      for (int n = 0; n < B; ++n) {
        const S* p = xd + (static_cast<std::int64_t>(n) * C + c) * inner;
        for (std::int64_t i = 0; i < inner; ++i) acc += p[i];
      }
      mean[static_cast<std::size_t>(c)] = acc / static_cast<S>(count);
      S vacc = S(0);
      for (int n = 0; n < B; ++n) {
        const S* p = xd + (static_cast<std::int64_t>(n) * C + c) * inner;
        for (std::int64_t i = 0; i < inner; ++i) {
          const S dlt = p[i] - mean[static_cast<std::size_t>(c)];
          vacc += dlt * dlt;
        }
      }
      var[static_cast<std::size_t>(c)] = vacc / static_cast<S>(count);
      inv_std[static_cast<std::size_t>(c)] = S(1) / std::sqrt(var[static_cast<std::size_t>(c)] + eps);
    }
    // running stats track the unbiased variance estimate
    for (int c = 0; c < C; ++c) {
      const S ub = count > 1 ? var[static_cast<std::size_t>(c)] * static_cast<S>(count) /
                                   static_cast<S>(count - 1)
                             : var[static_cast<std::size_t>(c)];
      (*running_mean.data)[static_cast<std::size_t>(c)] =
          (S(1) - momentum) * (*running_mean.data)[static_cast<std::size_t>(c)] +
          momentum * mean[static_cast<std::size_t>(c)];
      (*running_var.data)[static_cast<std::size_t>(c)] =
          (S(1) - momentum) * (*running_var.data)[static_cast<std::size_t>(c)] + momentum * ub;
    }
  } else {
    for (int c = 0; c < C; ++c) {
      mean[static_cast<std::size_t>(c)] = (*running_mean.data)[static_cast<std::size_t>(c)];
      inv_std[static_cast<std::size_t>(c)] =
          S(1) / std::sqrt((*running_var.data)[static_cast<std::size_t>(c)] + eps);
    }
  }

  TensorT<S> out(x.shape);
  auto xhat = std::make_shared<std::vector<S>>(x.data->size());
  {
    S* od = out.ptr();
    const S* gd = gamma.ptr();
    const S* bd = beta.ptr();
    for (int n = 0; n < B; ++n) {
      for (int c = 0; c < C; ++c) {
        const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * inner;
        const S m = mean[static_cast<std::size_t>(c)];
        const S is = inv_std[static_cast<std::size_t>(c)];
        for (std::int64_t i = 0; i < inner; ++i) {
          const S xh = (xd[base + i] - m) * is;
          (*xhat)[static_cast<std::size_t>(base + i)] = xh;
          od[base + i] = gd[c] * xh + bd[c];
        }
      }
    }
  }
  detail::check_finite(out, "batchnorm");

  auto* tape = TapeT<S>::active();
  if (tape && (x.requires_grad || gamma.requires_grad || beta.requires_grad)) {
    const int px = tape->ensure_node(x);
    const int pg = tape->ensure_node(gamma);
    const int pb = tape->ensure_node(beta);
    auto gx = px >= 0 ? x.grad : nullptr;
    auto gg = pg >= 0 ? gamma.grad : nullptr;
    auto gb = pb >= 0 ? beta.grad : nullptr;
    auto gmd = gamma.data;
    out.grad = detail::zeros_like_buffer(out);
    auto go = out.grad;
    tape->emit(out, {px, pg, pb},
               [gx, gg, gb, gmd, go, xhat, inv_std, B, C, inner, count, training]() {
      const S* g = go->data();
      const S* xh = xhat->data();
      const S* gam = gmd->data();
      for (int c = 0; c < C; ++c) {
        S sum_g = S(0), sum_gx = S(0);
        for (int n = 0; n < B; ++n) {
          const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * inner;
          for (std::int64_t i = 0; i < inner; ++i) {
            sum_g += g[base + i];
            sum_gx += g[base + i] * xh[base + i];
          }
        }
        if (gg) (*gg)[static_cast<std::size_t>(c)] += sum_gx;
        if (gb) (*gb)[static_cast<std::size_t>(c)] += sum_g;
        if (gx) {
          const S is = inv_std[static_cast<std::size_t>(c)];
          const S gc = gam[c];
          for (int n = 0; n < B; ++n) {
            const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * inner;
            for (std::int64_t i = 0; i < inner; ++i) {
              if (training) {
                // through the batch statistics
                (*gx)[static_cast<std::size_t>(base + i)] +=
                    gc * is / static_cast<S>(count) *
                    (static_cast<S>(count) * g[base + i] - sum_g - xh[base + i] * sum_gx);
              } else {
                (*gx)[static_cast<std::size_t>(base + i)] += gc * is * g[base + i];
              }
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// layer normalization over the last axis

template <typename S>
TensorT<S> layernorm(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta, S eps) {
  if (x.rank() < 1) throw ShapeError("layernorm expects rank >= 1 input");
  const int F = x.shape.back();
  if (gamma.numel() != F || beta.numel() != F) {
    throw ShapeError("layernorm parameter size mismatch for dim " + std::to_string(F));
  }
  const std::int64_t rows = x.numel() / F;
  TensorT<S> out(x.shape);
  auto xhat = std::make_shared<std::vector<S>>(x.data->size());
  std::vector<S> inv_std(static_cast<std::size_t>(rows));
  {
    const S* xd = x.ptr();
    S* od = out.ptr();
    const S* gd = gamma.ptr();
    const S* bd = beta.ptr();
    for (std::int64_t r = 0; r < rows; ++r) {
      const S* row = xd + r * F;
      S m = S(0);
      for (int i = 0; i < F; ++i) m += row[i];
      m /= static_cast<S>(F);
      S v = S(0);
      for (int i = 0; i < F; ++i) {
        const S d = row[i] - m;
        v += d * d;
      }
      v /= static_cast<S>(F);
      const S is = S(1) / std::sqrt(v + eps);
      inv_std[static_cast<std::size_t>(r)] = is;
      for (int i = 0; i < F; ++i) {
        const S xh = (row[i] - m) * is;
        (*xhat)[static_cast<std::size_t>(r * F + i)] = xh;
        od[r * F + i] = gd[i] * xh + bd[i];
      }
    }
  }
  detail::check_finite(out, "layernorm");

  auto* tape = TapeT<S>::active();
  if (tape && (x.requires_grad || gamma.requires_grad || beta.requires_grad)) {
    const int px = tape->ensure_node(x);
    const int pg = tape->ensure_node(gamma);
    const int pb = tape->ensure_node(beta);
    auto gx = px >= 0 ? x.grad : nullptr;
    auto gg = pg >= 0 ? gamma.grad : nullptr;
    auto gb = pb >= 0 ? beta.grad : nullptr;
    auto gmd = gamma.data;
    out.grad = detail::zeros_like_buffer(out);
    auto go = out.grad;
    tape->emit(out, {px, pg, pb},
               [gx, gg, gb, gmd, go, xhat, inv_std = std::move(inv_std), rows, F]() {
      const S* g = go->data();
      const S* xh = xhat->data();
      const S* gam = gmd->data();
      for (std::int64_t r = 0; r < rows; ++r) {
        const std::int64_t base = r * F;
        S m1 = S(0), m2 = S(0);
        for (int i = 0; i < F; ++i) {
          const S dxh = g[base + i] * gam[i];
          m1 += dxh;
          m2 += dxh * xh[base + i];
        }
        m1 /= static_cast<S>(F);
        m2 /= static_cast<S>(F);
        for (int i = 0; i < F; ++i) {
          const S dxh = g[base + i] * gam[i];
          if (gx) {
            (*gx)[static_cast<std::size_t>(base + i)] +=
                inv_std[static_cast<std::size_t>(r)] * (dxh - m1 - xh[base + i] * m2);
          }
          if (gg) (*gg)[static_cast<std::size_t>(i)] += g[base + i] * xh[base + i];
          if (gb) (*gb)[static_cast<std::size_t>(i)] += g[base + i];
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// layer containers

template <typename S>
struct Conv2dT {
  int in_channels = 0, out_channels = 0, kernel = 0, stride = 1, padding = 0;
  TensorT<S> weight, bias;

  Conv2dT() = default;
  Conv2dT(int ci, int co, int k, int s, int p)
      : in_channels(ci), out_channels(co), kernel(k), stride(s), padding(p),
        weight(Shape{co, ci, k, k}), bias(Shape{co}) {
    if (k < 1 || p < 0 || s < 1) throw ShapeError("conv2d layer: invalid kernel/stride/padding");
  }

  void init(Rng& rng) {
    kaiming_uniform(weight, static_cast<std::int64_t>(in_channels) * kernel * kernel, rng);
    bias.fill(S(0));
  }

  TensorT<S> forward(const TensorT<S>& x) const { return conv2d(x, weight, bias, stride, padding); }

  std::int64_t parameter_count() const { return weight.numel() + bias.numel(); }

  void collect(const std::string& prefix, std::vector<ParamRef<S>>& out) {
    out.push_back({prefix + ".weight", &weight, true});
    out.push_back({prefix + ".bias", &bias, true});
  }
};

template <typename S>
struct Conv3dT {
  int in_channels = 0, out_channels = 0, kernel = 0, stride = 1, padding = 0;
  TensorT<S> weight, bias;

  Conv3dT() = default;
  Conv3dT(int ci, int co, int k, int s, int p)
      : in_channels(ci), out_channels(co), kernel(k), stride(s), padding(p),
        weight(Shape{co, ci, k, k, k}), bias(Shape{co}) {
    if (k < 1 || p < 0 || s < 1) throw ShapeError("conv3d layer: invalid kernel/stride/padding");
  }

  void init(Rng& rng) {
    kaiming_uniform(weight, static_cast<std::int64_t>(in_channels) * kernel * kernel * kernel, rng);
    bias.fill(S(0));
  }

  TensorT<S> forward(const TensorT<S>& x) const { return conv3d(x, weight, bias, stride, padding); }

  std::int64_t parameter_count() const { return weight.numel() + bias.numel(); }

  void collect(const std::string& prefix, std::vector<ParamRef<S>>& out) {
    out.push_back({prefix + ".weight", &weight, true});
    out.push_back({prefix + ".bias", &bias, true});
  }
};

template <typename S>
struct AcsConv3dT {
  int in_channels = 0, out_channels = 0, kernel = 0, stride = 1, padding = 0;
  std::array<int, 3> axis_split{};
  TensorT<S> weight, bias;  // shared 2D kernel bank

  AcsConv3dT() = default;
  AcsConv3dT(int ci, int co, int k, int s, int p)
      : in_channels(ci), out_channels(co), kernel(k), stride(s), padding(p),
        axis_split(acs_default_split(co)), weight(Shape{co, ci, k, k}), bias(Shape{co}) {
    if (k < 1 || p < 0 || s < 1) throw ShapeError("acs conv layer: invalid kernel/stride/padding");
  }

  void init(Rng& rng) {
    kaiming_uniform(weight, static_cast<std::int64_t>(in_channels) * kernel * kernel, rng);
    bias.fill(S(0));
  }

  TensorT<S> forward(const TensorT<S>& x) const {
    return acs_conv3d(x, weight, bias, stride, padding, axis_split);
  }

  std::int64_t parameter_count() const { return weight.numel() + bias.numel(); }

  void collect(const std::string& prefix, std::vector<ParamRef<S>>& out) {
    out.push_back({prefix + ".weight", &weight, true});
    out.push_back({prefix + ".bias", &bias, true});
  }
};

template <typename S>
struct BatchNormT {
  int channels = 0;
  S momentum = S(0.1), eps = S(1e-5);
  TensorT<S> gamma, beta, running_mean, running_var;

  BatchNormT() = default;
  explicit BatchNormT(int c)
      : channels(c), gamma(Shape{c}, S(1)), beta(Shape{c}), running_mean(Shape{c}),
        running_var(Shape{c}, S(1)) {}

  void init(Rng&) {
    gamma.fill(S(1));
    beta.fill(S(0));
    running_mean.fill(S(0));
    running_var.fill(S(1));
  }

  TensorT<S> forward(const TensorT<S>& x, bool training) {
    return batchnorm(x, gamma, beta, running_mean, running_var, training, momentum, eps);
  }

  std::int64_t parameter_count() const { return gamma.numel() + beta.numel(); }

  void collect(const std::string& prefix, std::vector<ParamRef<S>>& out) {
    out.push_back({prefix + ".gamma", &gamma, true});
    out.push_back({prefix + ".beta", &beta, true});
    out.push_back({prefix + ".running_mean", &running_mean, false});
    out.push_back({prefix + ".running_var", &running_var, false});
  }
};

template <typename S>
struct LayerNormT {
  int dim = 0;
  S eps = S(1e-5);
  TensorT<S> gamma, beta;

  LayerNormT() = default;
  explicit LayerNormT(int d) : dim(d), gamma(Shape{d}, S(1)), beta(Shape{d}) {}

  void init(Rng&) {
    gamma.fill(S(1));
    beta.fill(S(0));
  }

  TensorT<S> forward(const TensorT<S>& x) const { return layernorm(x, gamma, beta, eps); }

  std::int64_t parameter_count() const { return gamma.numel() + beta.numel(); }

  void collect(const std::string& prefix, std::vector<ParamRef<S>>& out) {
    out.push_back({prefix + ".gamma", &gamma, true});
    out.push_back({prefix + ".beta", &beta, true});
  }
};

template <typename S>
struct LinearT {
  int in_dim = 0, out_dim = 0;
  TensorT<S> weight, bias;  // weight[in, out]

  LinearT() = default;
  LinearT(int in, int out) : in_dim(in), out_dim(out), weight(Shape{in, out}), bias(Shape{out}) {}

  void init(Rng& rng) {
    kaiming_uniform(weight, in_dim, rng);
    bias.fill(S(0));
  }

  TensorT<S> forward(const TensorT<S>& x) const { return add(matmul(x, weight), bias); }

  std::int64_t parameter_count() const { return weight.numel() + bias.numel(); }

  void collect(const std::string& prefix, std::vector<ParamRef<S>>& out) {
    out.push_back({prefix + ".weight", &weight, true});
    out.push_back({prefix + ".bias", &bias, true});
  }
};

// Gate order in the packed 4H dimension: input, forget, cell, output.
template <typename S>
struct LstmCellT {
  int input_dim = 0, hidden_dim = 0;
  TensorT<S> w_ih, w_hh, b_ih, b_hh;  // [in,4H], [H,4H], [4H], [4H]

  LstmCellT() = default;
  LstmCellT(int in, int hidden)
      : input_dim(in), hidden_dim(hidden), w_ih(Shape{in, 4 * hidden}),
        w_hh(Shape{hidden, 4 * hidden}), b_ih(Shape{4 * hidden}), b_hh(Shape{4 * hidden}) {}

  void init(Rng& rng) {
    kaiming_uniform(w_ih, input_dim, rng);
    orthogonal_rows(w_hh, rng);
    b_ih.fill(S(0));
    b_hh.fill(S(0));
  }

  std::pair<TensorT<S>, TensorT<S>> step(const TensorT<S>& x, const TensorT<S>& h,
                                         const TensorT<S>& c) const {
    const int H = hidden_dim;
    TensorT<S> gates = add(add(matmul(x, w_ih), matmul(h, w_hh)), add(b_ih, b_hh));
    TensorT<S> i = sigmoid(slice_last(gates, 0, H));
    TensorT<S> f = sigmoid(slice_last(gates, H, H));
    TensorT<S> g = tanh(slice_last(gates, 2 * H, H));
    TensorT<S> o = sigmoid(slice_last(gates, 3 * H, H));
    TensorT<S> c_next = add(mul(f, c), mul(i, g));
    TensorT<S> h_next = mul(o, tanh(c_next));
    return {h_next, c_next};
  }

  std::int64_t parameter_count() const {
    return w_ih.numel() + w_hh.numel() + b_ih.numel() + b_hh.numel();
  }

  void collect(const std::string& prefix, std::vector<ParamRef<S>>& out) {
    out.push_back({prefix + ".w_ih", &w_ih, true});
    out.push_back({prefix + ".w_hh", &w_hh, true});
    out.push_back({prefix + ".b_ih", &b_ih, true});
    out.push_back({prefix + ".b_hh", &b_hh, true});
  }
};

// Scaled dot-product multihead attention; returns the attention weights
// alongside the output so that pooling heads can surface them.
template <typename S>
struct MultiheadAttentionT {
  int n_heads = 0, d_model = 0;
  TensorT<S> wq, wk, wv, wo;  // [d, d]
  TensorT<S> bq, bk, bv, bo;  // [d]

  MultiheadAttentionT() = default;
  MultiheadAttentionT(int heads, int d)
      : n_heads(heads), d_model(d), wq(Shape{d, d}), wk(Shape{d, d}), wv(Shape{d, d}),
        wo(Shape{d, d}), bq(Shape{d}), bk(Shape{d}), bv(Shape{d}), bo(Shape{d}) {
    if (heads < 1 || d % heads != 0) {
      throw ShapeError("multihead attention: d_model " + std::to_string(d) +
                       " not divisible by n_heads " + std::to_string(heads));
    }
  }

  void init(Rng& rng) {
    kaiming_uniform(wq, d_model, rng);
    kaiming_uniform(wk, d_model, rng);
    kaiming_uniform(wv, d_model, rng);
    kaiming_uniform(wo, d_model, rng);
    bq.fill(S(0));
    bk.fill(S(0));
    bv.fill(S(0));
    bo.fill(S(0));
  }

  // query [b, nq, d], key/value [b, nk, d] -> (output [b, nq, d],
  // weights [b, n_heads, nq, nk]); weight rows sum to one.
  std::pair<TensorT<S>, TensorT<S>> forward(const TensorT<S>& query, const TensorT<S>& key,
                                            const TensorT<S>& value) const {
    if (query.rank() != 3 || key.rank() != 3 || value.rank() != 3) {
      throw ShapeError("multihead attention expects rank-3 inputs [b, n, d]");
    }
    if (query.shape[2] != d_model || key.shape[2] != d_model || value.shape[2] != d_model) {
      throw ShapeError("multihead attention dimension mismatch: d_model=" +
                       std::to_string(d_model) + ", got query " + shape_str(query.shape) +
                       ", key " + shape_str(key.shape));
    }
    if (key.shape[0] != query.shape[0] || value.shape[0] != query.shape[0] ||
        key.shape[1] != value.shape[1]) {
      throw ShapeError("multihead attention batch/sequence mismatch");
    }
    if (key.shape[1] < 1) throw ShapeError("multihead attention requires at least one key");
    const int B = query.shape[0], nq = query.shape[1], nk = key.shape[1];
    const int dh = d_model / n_heads;

    TensorT<S> Q = add(matmul(query, wq), bq);
    TensorT<S> K = add(matmul(key, wk), bk);
    TensorT<S> V = add(matmul(value, wv), bv);
    TensorT<S> Qh = transpose(reshape(Q, {B, nq, n_heads, dh}), {0, 2, 1, 3});
    TensorT<S> Kt = transpose(reshape(K, {B, nk, n_heads, dh}), {0, 2, 3, 1});
    TensorT<S> Vh = transpose(reshape(V, {B, nk, n_heads, dh}), {0, 2, 1, 3});
    TensorT<S> scores = mul(matmul(Qh, Kt), static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh))));
    TensorT<S> weights = softmax(scores, 3);
    TensorT<S> ctx = matmul(weights, Vh);
    TensorT<S> merged = reshape(transpose(ctx, {0, 2, 1, 3}), {B, nq, d_model});
    TensorT<S> out = add(matmul(merged, wo), bo);
    return {out, weights};
  }

  std::int64_t parameter_count() const {
    return 4 * (static_cast<std::int64_t>(d_model) * d_model + d_model);
  }

  void collect(const std::string& prefix, std::vector<ParamRef<S>>& out) {
    out.push_back({prefix + ".wq", &wq, true});
    out.push_back({prefix + ".bq", &bq, true});
    out.push_back({prefix + ".wk", &wk, true});
    out.push_back({prefix + ".bk", &bk, true});
    out.push_back({prefix + ".wv", &wv, true});
    out.push_back({prefix + ".bv", &bv, true});
    out.push_back({prefix + ".wo", &wo, true});
    out.push_back({prefix + ".bo", &bo, true});
  }
};

}  // namespace sliceattn
