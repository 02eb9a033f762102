// SPDX-License-Identifier: Apache-2.0
//
// Differentiable primitives. Layout is fixed to batch x channel x height x
// width, row-major. Every op validates shapes up front and throws ConfigError
// on mismatch; non-finite outputs raise NumericError from make_op.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "dmf/kernels.hpp"
#include "dmf/tensor.hpp"

namespace dmf {

namespace detail {
inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ConfigError(msg);
}
inline std::size_t axis_index(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw ConfigError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  return static_cast<std::size_t>(a);
}
inline std::size_t prod(const Shape& s, std::size_t begin, std::size_t end) {
  std::size_t p = 1;
  for (std::size_t i = begin; i < end; ++i) p *= s[i];
  return p;
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(), "add: shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_op<T>("add", a.shape(), std::move(out), {a, b}, [a, b](const std::vector<T>& g) {
    accumulate<T>(a, g);
    accumulate<T>(b, g);
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(), "sub: shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_op<T>("sub", a.shape(), std::move(out), {a, b}, [a, b](const std::vector<T>& g) {
    accumulate<T>(a, g);
    if (b.requires_grad()) {
      std::vector<T> ng(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) ng[i] = -g[i];
      accumulate<T>(b, ng);
    }
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(), "mul: shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_op<T>("mul", a.shape(), std::move(out), {a, b}, [a, b](const std::vector<T>& g) {
    if (a.requires_grad()) {
      std::vector<T> ga(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * b[i];
      accumulate<T>(a, ga);
    }
    if (b.requires_grad()) {
      std::vector<T> gb(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] = g[i] * a[i];
      accumulate<T>(b, gb);
    }
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  return make_op<T>("scale", a.shape(), std::move(out), {a}, [a, s](const std::vector<T>& g) {
    std::vector<T> ga(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * s;
    accumulate<T>(a, ga);
  });
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = T(0);
  for (T v : a.data()) s += v;
  return make_op<T>("sum", {}, {s}, {a}, [a](const std::vector<T>& g) {
    accumulate<T>(a, std::vector<T>(a.numel(), g[0]));
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

/// x[B,C,...] + bias[C] broadcast over the trailing extents.
template <class T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  detail::require(x.rank() >= 2 && bias.rank() == 1 && bias.dim(0) == x.dim(1),
                  "add_channel_bias: bias " + shape_str(bias.shape()) + " vs input " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), C = x.dim(1), S = detail::prod(x.shape(), 2, x.rank());
  std::vector<T> out(x.vec());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t s = 0; s < S; ++s) out[(b * C + c) * S + s] += bias[c];
  return make_op<T>("add_channel_bias", x.shape(), std::move(out), {x, bias},
                    [x, bias, B, C, S](const std::vector<T>& g) {
                      accumulate<T>(x, g);
                      if (bias.requires_grad()) {
                        std::vector<T> gb(C, T(0));
                        for (std::size_t b = 0; b < B; ++b)
                          for (std::size_t c = 0; c < C; ++c)
                            for (std::size_t s = 0; s < S; ++s) gb[c] += g[(b * C + c) * S + s];
                        accumulate<T>(bias, gb);
                      }
                    });
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  detail::require(numel_of(shape) == a.numel(),
                  "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  return make_op<T>("reshape", std::move(shape), a.vec(), {a},
                    [a](const std::vector<T>& g) { accumulate<T>(a, g); });
}

/// out.shape[i] = a.shape[perm[i]]
template <class T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<std::size_t>& perm) {
  const std::size_t r = a.rank();
  detail::require(perm.size() == r, "permute: rank mismatch");
  std::vector<bool> used(r, false);
  for (auto p : perm) {
    detail::require(p < r && !used[p], "permute: invalid permutation");
    used[p] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = a.shape()[perm[i]];
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * a.shape()[i];
  // Source flat index for each destination flat index.
  std::vector<std::size_t> src(a.numel());
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t flat = 0; flat < src.size(); ++flat) {
    std::size_t s = 0;
    for (std::size_t i = 0; i < r; ++i) s += idx[i] * in_stride[perm[i]];
    src[flat] = s;
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[src[i]];
  return make_op<T>("permute", out_shape, std::move(out), {a},
                    [a, src = std::move(src)](const std::vector<T>& g) {
                      std::vector<T> ga(g.size());
                      for (std::size_t i = 0; i < g.size(); ++i) ga[src[i]] = g[i];
                      accumulate<T>(a, ga);
                    });
}

template <class T>
Tensor<T> slice(const Tensor<T>& a, int axis, std::size_t start, std::size_t length) {
  const std::size_t ax = detail::axis_index(axis, a.rank());
  detail::require(start + length <= a.shape()[ax], "slice: range exceeds extent of axis " + std::to_string(ax));
  const std::size_t outer = detail::prod(a.shape(), 0, ax);
  const std::size_t inner = detail::prod(a.shape(), ax + 1, a.rank());
  const std::size_t extent = a.shape()[ax];
  Shape shape = a.shape();
  shape[ax] = length;
  std::vector<T> out(outer * length * inner);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(a.data().begin() + static_cast<long>((o * extent + start) * inner), length * inner,
                out.begin() + static_cast<long>(o * length * inner));
  return make_op<T>("slice", shape, std::move(out), {a},
                    [a, outer, inner, extent, start, length](const std::vector<T>& g) {
                      std::vector<T> ga(a.numel(), T(0));
                      for (std::size_t o = 0; o < outer; ++o)
                        std::copy_n(g.begin() + static_cast<long>(o * length * inner), length * inner,
                                    ga.begin() + static_cast<long>((o * extent + start) * inner));
                      accumulate<T>(a, ga);
                    });
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  detail::require(!parts.empty(), "concat: no inputs");
  const std::size_t ax = detail::axis_index(axis, parts[0].rank());
  Shape shape = parts[0].shape();
  shape[ax] = 0;
  for (const auto& p : parts) {
    detail::require(p.rank() == shape.size(), "concat: rank mismatch");
    for (std::size_t i = 0; i < shape.size(); ++i)
      if (i != ax) detail::require(p.shape()[i] == parts[0].shape()[i], "concat: extent mismatch on axis " + std::to_string(i));
    shape[ax] += p.shape()[ax];
  }
  const std::size_t outer = detail::prod(shape, 0, ax);
  const std::size_t inner = detail::prod(shape, ax + 1, shape.size());
  const std::size_t total = shape[ax];
  std::vector<T> out(numel_of(shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t len = p.shape()[ax];
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(p.data().begin() + static_cast<long>(o * len * inner), len * inner,
                  out.begin() + static_cast<long>((o * total + off) * inner));
    offsets.push_back(off);
    off += len;
  }
  return make_op<T>("concat", shape, std::move(out), parts,
                    [parts, offsets, outer, inner, total, ax](const std::vector<T>& g) {
                      for (std::size_t k = 0; k < parts.size(); ++k) {
                        const auto& p = parts[k];
                        if (!p.requires_grad()) continue;
                        const std::size_t len = p.shape()[ax];
                        std::vector<T> gp(p.numel());
                        for (std::size_t o = 0; o < outer; ++o)
                          std::copy_n(g.begin() + static_cast<long>((o * total + offsets[k]) * inner), len * inner,
                                      gp.begin() + static_cast<long>(o * len * inner));
                        accumulate<T>(p, gp);
                      }
                    });
}

/// Repeats a along a new leading axis: [..] -> [n, ..].
template <class T>
Tensor<T> expand_leading(const Tensor<T>& a, std::size_t n) {
  Shape shape{n};
  shape.insert(shape.end(), a.shape().begin(), a.shape().end());
  std::vector<T> out;
  out.reserve(n * a.numel());
  for (std::size_t i = 0; i < n; ++i) out.insert(out.end(), a.data().begin(), a.data().end());
  return make_op<T>("expand_leading", shape, std::move(out), {a}, [a, n](const std::vector<T>& g) {
    std::vector<T> ga(a.numel(), T(0));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < ga.size(); ++j) ga[j] += g[i * ga.size() + j];
    accumulate<T>(a, ga);
  });
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

/// Batched product over equal leading extents: a[...,m,k] x b[...,k,n].
/// trans_b reads b as [...,n,k].
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_b = false) {
  detail::require(a.rank() >= 2 && a.rank() == b.rank(), "matmul: ranks " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::size_t r = a.rank();
  for (std::size_t i = 0; i + 2 < r; ++i)
    detail::require(a.shape()[i] == b.shape()[i], "matmul: batch extents differ");
  const std::size_t batch = detail::prod(a.shape(), 0, r - 2);
  const std::size_t M = a.shape()[r - 2], K = a.shape()[r - 1];
  const std::size_t N = trans_b ? b.shape()[r - 2] : b.shape()[r - 1];
  const std::size_t Kb = trans_b ? b.shape()[r - 1] : b.shape()[r - 2];
  detail::require(K == Kb, "matmul: inner extents " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Shape shape = a.shape();
  shape[r - 1] = N;
  std::vector<T> out(batch * M * N, T(0));
  for (std::size_t s = 0; s < batch; ++s) {
    const T* A = a.data().data() + s * M * K;
    const T* Bm = b.data().data() + s * K * N;
    T* C = out.data() + s * M * N;
    if (trans_b) kernels::gemm_nt(M, N, K, A, Bm, C);
    else kernels::gemm_nn(M, N, K, A, Bm, C);
  }
  return make_op<T>("matmul", shape, std::move(out), {a, b},
                    [a, b, batch, M, N, K, trans_b](const std::vector<T>& g) {
                      if (a.requires_grad()) {
                        std::vector<T> ga(a.numel(), T(0));
                        for (std::size_t s = 0; s < batch; ++s) {
                          const T* G = g.data() + s * M * N;
                          const T* Bm = b.data().data() + s * K * N;
                          // dA = G * B^T  (or G * B when b was read transposed)
                          if (trans_b) kernels::gemm_nn(M, K, N, G, Bm, ga.data() + s * M * K);
                          else kernels::gemm_nt(M, K, N, G, Bm, ga.data() + s * M * K);
                        }
                        accumulate<T>(a, ga);
                      }
                      if (b.requires_grad()) {
                        std::vector<T> gb(b.numel(), T(0));
                        for (std::size_t s = 0; s < batch; ++s) {
                          const T* G = g.data() + s * M * N;
                          const T* A = a.data().data() + s * M * K;
                          // dB = A^T * G, or (G^T * A) for the transposed read
                          if (trans_b) kernels::gemm_tn(N, K, M, G, A, gb.data() + s * K * N);
                          else kernels::gemm_tn(K, N, M, A, G, gb.data() + s * K * N);
                        }
                        accumulate<T>(b, gb);
                      }
                    });
}

/// Affine map over the trailing axis: x[...,Din] * w[Din,Dout] + bias[Dout].
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias = {}) {
  detail::require(x.rank() >= 1 && w.rank() == 2 && x.dim(-1) == w.dim(0),
                  "linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  const std::size_t Din = w.dim(0), Dout = w.dim(1), rows = x.numel() / Din;
  if (bias.defined())
    detail::require(bias.rank() == 1 && bias.dim(0) == Dout, "linear: bias shape " + shape_str(bias.shape()));
  Shape shape = x.shape();
  shape.back() = Dout;
  std::vector<T> out(rows * Dout, T(0));
  kernels::gemm_nn(rows, Dout, Din, x.data().data(), w.data().data(), out.data());
  if (bias.defined())
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < Dout; ++j) out[r * Dout + j] += bias[j];
  return make_op<T>("linear", shape, std::move(out), {x, w, bias},
                    [x, w, bias, rows, Din, Dout](const std::vector<T>& g) {
                      if (x.requires_grad()) {
                        std::vector<T> gx(rows * Din, T(0));
                        kernels::gemm_nt(rows, Din, Dout, g.data(), w.data().data(), gx.data());
                        accumulate<T>(x, gx);
                      }
                      if (w.requires_grad()) {
                        std::vector<T> gw(Din * Dout, T(0));
                        kernels::gemm_tn(Din, Dout, rows, x.data().data(), g.data(), gw.data());
                        accumulate<T>(w, gw);
                      }
                      if (bias.defined() && bias.requires_grad()) {
                        std::vector<T> gb(Dout, T(0));
                        for (std::size_t r = 0; r < rows; ++r)
                          for (std::size_t j = 0; j < Dout; ++j) gb[j] += g[r * Dout + j];
                        accumulate<T>(bias, gb);
                      }
                    });
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t padding) {
  if (stride == 0) throw ConfigError("conv2d: stride must be positive");
  if (in + 2 * padding < k)
    throw ConfigError("conv2d: kernel " + std::to_string(k) + " larger than padded input " +
                      std::to_string(in + 2 * padding));
  return (in + 2 * padding - k) / stride + 1;
}

/// Grouped 2-D cross-correlation via im2col + GEMM.
/// x[B,Cin,H,W], w[Cout,Cin/groups,kh,kw], optional bias[Cout].
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias = {},
                 std::size_t stride = 1, std::size_t padding = 0, std::size_t groups = 1) {
  detail::require(x.rank() == 4, "conv2d: input must be [B,C,H,W], got " + shape_str(x.shape()));
  detail::require(w.rank() == 4, "conv2d: weight must be [Cout,Cin/g,kh,kw], got " + shape_str(w.shape()));
  detail::require(groups >= 1, "conv2d: groups must be positive");
  const std::size_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  detail::require(Cin % groups == 0 && Cout % groups == 0,
                  "conv2d: channels " + std::to_string(Cin) + "->" + std::to_string(Cout) +
                      " not divisible by groups " + std::to_string(groups));
  const std::size_t cin_g = Cin / groups, cout_g = Cout / groups;
  detail::require(w.dim(1) == cin_g, "conv2d: weight " + shape_str(w.shape()) + " expects " +
                                         std::to_string(w.dim(1)) + " input channels per group, input gives " +
                                         std::to_string(cin_g));
  if (bias.defined())
    detail::require(bias.rank() == 1 && bias.dim(0) == Cout, "conv2d: bias shape " + shape_str(bias.shape()));

  kernels::ConvGeometry geo{cin_g, H, W, kh, kw, stride, padding,
                            conv_out_extent(H, kh, stride, padding), conv_out_extent(W, kw, stride, padding)};
  const std::size_t P = geo.positions(), R = geo.patch();
  std::vector<T> out(B * Cout * P, T(0));
  std::vector<T> col(geo.is_pointwise() ? 0 : R * P);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t g = 0; g < groups; ++g) {
      const T* xg = x.data().data() + (b * Cin + g * cin_g) * H * W;
      const T* cols = xg;
      if (!geo.is_pointwise()) {
        kernels::im2col(geo, xg, col.data());
        cols = col.data();
      }
      kernels::gemm_nn(cout_g, P, R, w.data().data() + g * cout_g * R, cols,
                       out.data() + (b * Cout + g * cout_g) * P);
    }
  }
  if (bias.defined())
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t o = 0; o < Cout; ++o)
        for (std::size_t p = 0; p < P; ++p) out[(b * Cout + o) * P + p] += bias[o];

  Shape shape{B, Cout, geo.out_h, geo.out_w};
  return make_op<T>(
      "conv2d", shape, std::move(out), {x, w, bias},
      [x, w, bias, geo, B, Cin, Cout, groups, cin_g, cout_g](const std::vector<T>& g) {
        const std::size_t P = geo.positions(), R = geo.patch(), HW = geo.height * geo.width;
        std::vector<T> gx(x.requires_grad() ? x.numel() : 0, T(0));
        std::vector<T> gw(w.requires_grad() ? w.numel() : 0, T(0));
        std::vector<T> col(R * P), dcol(R * P);
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t grp = 0; grp < groups; ++grp) {
            const T* dout = g.data() + (b * Cout + grp * cout_g) * P;
            const std::size_t xoff = (b * Cin + grp * cin_g) * HW;
            if (w.requires_grad()) {
              const T* cols = x.data().data() + xoff;
              if (!geo.is_pointwise()) {
                kernels::im2col(geo, cols, col.data());
                cols = col.data();
              }
              kernels::gemm_nt(cout_g, R, P, dout, cols, gw.data() + grp * cout_g * R);
            }
            if (x.requires_grad()) {
              if (geo.is_pointwise()) {
                kernels::gemm_tn(R, P, cout_g, w.data().data() + grp * cout_g * R, dout, gx.data() + xoff);
              } else {
                std::fill(dcol.begin(), dcol.end(), T(0));
                kernels::gemm_tn(R, P, cout_g, w.data().data() + grp * cout_g * R, dout, dcol.data());
                kernels::col2im(geo, dcol.data(), gx.data() + xoff);
              }
            }
          }
        }
        if (x.requires_grad()) accumulate<T>(x, gx);
        if (w.requires_grad()) accumulate<T>(w, gw);
        if (bias.defined() && bias.requires_grad()) {
          std::vector<T> gb(Cout, T(0));
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t o = 0; o < Cout; ++o)
              for (std::size_t p = 0; p < P; ++p) gb[o] += g[(b * Cout + o) * P + p];
          accumulate<T>(bias, gb);
        }
      });
}

// ---------------------------------------------------------------------------
// Pooling, activations, softmax
// ---------------------------------------------------------------------------

/// [B,C,H,W] -> [B,C], mean over spatial positions.
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  detail::require(x.rank() == 4, "global_avg_pool: input must be [B,C,H,W], got " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), C = x.dim(1), S = x.dim(2) * x.dim(3);
  detail::require(S >= 1, "global_avg_pool: empty spatial extent");
  std::vector<T> out(B * C);
  for (std::size_t i = 0; i < B * C; ++i) {
    T s = T(0);
    for (std::size_t p = 0; p < S; ++p) s += x[i * S + p];
    out[i] = s / static_cast<T>(S);
  }
  return make_op<T>("global_avg_pool", {B, C}, std::move(out), {x}, [x, B, C, S](const std::vector<T>& g) {
    std::vector<T> gx(x.numel());
    const T inv = T(1) / static_cast<T>(S);
    for (std::size_t i = 0; i < B * C; ++i)
      for (std::size_t p = 0; p < S; ++p) gx[i * S + p] = g[i] * inv;
    accumulate<T>(x, gx);
  });
}

enum class Activation { gelu, relu, sigmoid, hard_swish };

inline Activation parse_activation(std::string_view name) {
  if (name == "gelu") return Activation::gelu;
  if (name == "relu") return Activation::relu;
  if (name == "sigmoid") return Activation::sigmoid;
  if (name == "hard_swish") return Activation::hard_swish;
  throw ConfigError("unknown activation '" + std::string(name) + "'");
}

inline const char* activation_name(Activation a) {
  switch (a) {
    case Activation::gelu: return "gelu";
    case Activation::relu: return "relu";
    case Activation::sigmoid: return "sigmoid";
    case Activation::hard_swish: return "hard_swish";
  }
  return "?";
}

namespace detail {
inline constexpr double kGeluC = 0.7978845608;  // sqrt(2/pi)
inline constexpr double kGeluA = 0.044715;

template <class T>
T sigmoid_scalar(T v) {
  if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
  const T e = std::exp(v);
  return e / (T(1) + e);
}
}  // namespace detail

template <class T>
Tensor<T> activation(const Tensor<T>& x, Activation kind) {
  const T c = static_cast<T>(detail::kGeluC), a3 = static_cast<T>(detail::kGeluA);
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = x[i];
    switch (kind) {
      case Activation::gelu: out[i] = T(0.5) * v * (T(1) + std::tanh(c * (v + a3 * v * v * v))); break;
      case Activation::relu: out[i] = v > T(0) ? v : T(0); break;
      case Activation::sigmoid: out[i] = detail::sigmoid_scalar(v); break;
      case Activation::hard_swish: out[i] = v * std::clamp(v + T(3), T(0), T(6)) / T(6); break;
    }
  }
  auto y = out;
  return make_op<T>(activation_name(kind), x.shape(), std::move(out), {x},
                    [x, kind, c, a3, y = std::move(y)](const std::vector<T>& g) {
                      std::vector<T> gx(g.size());
                      for (std::size_t i = 0; i < g.size(); ++i) {
                        const T v = x[i];
                        T d = T(0);
                        switch (kind) {
                          case Activation::gelu: {
                            const T t = std::tanh(c * (v + a3 * v * v * v));
                            d = T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * c * (T(1) + T(3) * a3 * v * v);
                            break;
                          }
                          case Activation::relu: d = v > T(0) ? T(1) : T(0); break;
                          case Activation::sigmoid: d = y[i] * (T(1) - y[i]); break;
                          case Activation::hard_swish:
                            d = v < T(-3) ? T(0) : (v > T(3) ? T(1) : (T(2) * v + T(3)) / T(6));
                            break;
                        }
                        gx[i] = g[i] * d;
                      }
                      accumulate<T>(x, gx);
                    });
}

template <class T>
Tensor<T> softmax(const Tensor<T>& x, int axis = -1) {
  const std::size_t ax = detail::axis_index(axis, x.rank());
  const std::size_t outer = detail::prod(x.shape(), 0, ax);
  const std::size_t n = x.shape()[ax];
  const std::size_t inner = detail::prod(x.shape(), ax + 1, x.rank());
  std::vector<T> out(x.numel());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      T mx = x[base];
      for (std::size_t k = 1; k < n; ++k) mx = std::max(mx, x[base + k * inner]);
      T s = T(0);
      for (std::size_t k = 0; k < n; ++k) {
        const T e = std::exp(x[base + k * inner] - mx);
        out[base + k * inner] = e;
        s += e;
      }
      for (std::size_t k = 0; k < n; ++k) out[base + k * inner] /= s;
    }
  }
  auto y = out;
  return make_op<T>("softmax", x.shape(), std::move(out), {x},
                    [x, y = std::move(y), outer, n, inner](const std::vector<T>& g) {
                      std::vector<T> gx(g.size());
                      for (std::size_t o = 0; o < outer; ++o) {
                        for (std::size_t in = 0; in < inner; ++in) {
                          const std::size_t base = o * n * inner + in;
                          T dot = T(0);
                          for (std::size_t k = 0; k < n; ++k) dot += g[base + k * inner] * y[base + k * inner];
                          for (std::size_t k = 0; k < n; ++k) {
                            const std::size_t i = base + k * inner;
                            gx[i] = y[i] * (g[i] - dot);
                          }
                        }
                      }
                      accumulate<T>(x, gx);
                    });
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Per-channel batch-norm parameters and running statistics.
template <class T>
struct BatchNormState {
  Tensor<T> gamma, beta;                  // learnable
  Tensor<T> running_mean, running_var;    // buffers
  T eps = T(1e-5);
  T momentum = T(0.1);  // running = (1 - momentum) * running + momentum * batch
  bool stats_ready = true;

  BatchNormState() = default;
  explicit BatchNormState(std::size_t channels)
      : gamma(Tensor<T>::full({channels}, T(1), true)),
        beta(Tensor<T>::zeros({channels}, true)),
        running_mean(Tensor<T>::zeros({channels})),
        running_var(Tensor<T>::full({channels}, T(1))) {}

  std::size_t channels() const { return gamma.numel(); }

  /// gamma=1, beta=0, running (0, v) with v + eps == 1 exactly, so eval mode is
  /// the identity map.
  void make_pass_through() {
    std::fill(gamma.mutable_data().begin(), gamma.mutable_data().end(), T(1));
    std::fill(beta.mutable_data().begin(), beta.mutable_data().end(), T(0));
    std::fill(running_mean.mutable_data().begin(), running_mean.mutable_data().end(), T(0));
    T v = T(1) - eps;
    while (v + eps > T(1)) v = std::nextafter(v, T(0));
    while (v + eps < T(1)) v = std::nextafter(v, T(2));
    std::fill(running_var.mutable_data().begin(), running_var.mutable_data().end(), v);
    stats_ready = true;
  }
};

/// Batch normalization over [B,C,...]. Training mode normalizes by batch
/// statistics and updates the running averages (unbiased variance); eval mode
/// uses the running statistics.
template <class T>
Tensor<T> batch_norm(const Tensor<T>& x, BatchNormState<T>& st, bool training) {
  detail::require(x.rank() >= 2 && x.dim(1) == st.channels(),
                  "batch_norm: input " + shape_str(x.shape()) + " vs " + std::to_string(st.channels()) + " channels");
  const std::size_t B = x.dim(0), C = x.dim(1), S = detail::prod(x.shape(), 2, x.rank());
  const std::size_t n = B * S;
  std::vector<T> mean(C, T(0)), inv_std(C, T(0));
  if (training) {
    detail::require(n >= 2, "batch_norm: training mode needs at least 2 values per channel");
    for (std::size_t c = 0; c < C; ++c) {
      T s = T(0);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t p = 0; p < S; ++p) s += x[(b * C + c) * S + p];
      const T m = s / static_cast<T>(n);
      T v = T(0);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t p = 0; p < S; ++p) {
          const T d = x[(b * C + c) * S + p] - m;
          v += d * d;
        }
      v /= static_cast<T>(n);
      mean[c] = m;
      inv_std[c] = T(1) / std::sqrt(v + st.eps);
      auto rm = st.running_mean.mutable_data();
      auto rv = st.running_var.mutable_data();
      rm[c] = (T(1) - st.momentum) * rm[c] + st.momentum * m;
      rv[c] = (T(1) - st.momentum) * rv[c] + st.momentum * v * static_cast<T>(n) / static_cast<T>(n - 1);
    }
    st.stats_ready = true;
  } else {
    if (!st.stats_ready) throw ConfigError("batch_norm: eval mode before any running statistics were recorded");
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = st.running_mean[c];
      inv_std[c] = T(1) / std::sqrt(st.running_var[c] + st.eps);
    }
  }
  std::vector<T> xhat(x.numel()), out(x.numel());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < S; ++p) {
        const std::size_t i = (b * C + c) * S + p;
        xhat[i] = (x[i] - mean[c]) * inv_std[c];
        out[i] = xhat[i] * st.gamma[c] + st.beta[c];
      }
  Tensor<T> gamma = st.gamma, beta = st.beta;
  return make_op<T>(
      "batch_norm", x.shape(), std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), training, B, C, S,
       n](const std::vector<T>& g) {
        if (gamma.requires_grad() || beta.requires_grad()) {
          std::vector<T> gg(C, T(0)), gb(C, T(0));
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c)
              for (std::size_t p = 0; p < S; ++p) {
                const std::size_t i = (b * C + c) * S + p;
                gg[c] += g[i] * xhat[i];
                gb[c] += g[i];
              }
          accumulate<T>(gamma, gg);
          accumulate<T>(beta, gb);
        }
        if (!x.requires_grad()) return;
        std::vector<T> gx(x.numel());
        for (std::size_t c = 0; c < C; ++c) {
          const T gam = gamma[c];
          if (!training) {
            for (std::size_t b = 0; b < B; ++b)
              for (std::size_t p = 0; p < S; ++p) {
                const std::size_t i = (b * C + c) * S + p;
                gx[i] = g[i] * gam * inv_std[c];
              }
            continue;
          }
          T mean_d = T(0), mean_dx = T(0);
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t p = 0; p < S; ++p) {
              const std::size_t i = (b * C + c) * S + p;
              const T d = g[i] * gam;
              mean_d += d;
              mean_dx += d * xhat[i];
            }
          mean_d /= static_cast<T>(n);
          mean_dx /= static_cast<T>(n);
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t p = 0; p < S; ++p) {
              const std::size_t i = (b * C + c) * S + p;
              gx[i] = inv_std[c] * (g[i] * gam - mean_d - xhat[i] * mean_dx);
            }
        }
        accumulate<T>(x, gx);
      });
}

/// Layer normalization over the trailing axis.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
  const std::size_t D = x.dim(-1);
  detail::require(gamma.numel() == D && beta.numel() == D, "layer_norm: affine size mismatch");
  const std::size_t rows = x.numel() / D;
  std::vector<T> xhat(x.numel()), out(x.numel()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T m = T(0);
    for (std::size_t j = 0; j < D; ++j) m += x[r * D + j];
    m /= static_cast<T>(D);
    T v = T(0);
    for (std::size_t j = 0; j < D; ++j) {
      const T d = x[r * D + j] - m;
      v += d * d;
    }
    v /= static_cast<T>(D);
    inv_std[r] = T(1) / std::sqrt(v + eps);
    for (std::size_t j = 0; j < D; ++j) {
      const std::size_t i = r * D + j;
      xhat[i] = (x[i] - m) * inv_std[r];
      out[i] = xhat[i] * gamma[j] + beta[j];
    }
  }
  return make_op<T>("layer_norm", x.shape(), std::move(out), {x, gamma, beta},
                    [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), rows,
                     D](const std::vector<T>& g) {
                      if (gamma.requires_grad() || beta.requires_grad()) {
                        std::vector<T> gg(D, T(0)), gb(D, T(0));
                        for (std::size_t r = 0; r < rows; ++r)
                          for (std::size_t j = 0; j < D; ++j) {
                            gg[j] += g[r * D + j] * xhat[r * D + j];
                            gb[j] += g[r * D + j];
                          }
                        accumulate<T>(gamma, gg);
                        accumulate<T>(beta, gb);
                      }
                      if (!x.requires_grad()) return;
                      std::vector<T> gx(x.numel());
                      for (std::size_t r = 0; r < rows; ++r) {
                        T md = T(0), mdx = T(0);
                        for (std::size_t j = 0; j < D; ++j) {
                          const T d = g[r * D + j] * gamma[j];
                          md += d;
                          mdx += d * xhat[r * D + j];
                        }
                        md /= static_cast<T>(D);
                        mdx /= static_cast<T>(D);
                        for (std::size_t j = 0; j < D; ++j) {
                          const std::size_t i = r * D + j;
                          gx[i] = inv_std[r] * (g[i] * gamma[j] - md - xhat[i] * mdx);
                        }
                      }
                      accumulate<T>(x, gx);
                    });
}

// ---------------------------------------------------------------------------
// Losses and regularizers
// ---------------------------------------------------------------------------

/// Mean cross-entropy of logits[B,K] against integer labels, with optional
/// label smoothing (target = (1-s) one_hot + s/K).
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels, T smoothing = T(0)) {
  detail::require(logits.rank() == 2 && logits.dim(0) == labels.size(),
                  "cross_entropy: logits " + shape_str(logits.shape()) + " vs " + std::to_string(labels.size()) + " labels");
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  std::vector<T> prob(B * K);
  T loss = T(0);
  for (std::size_t b = 0; b < B; ++b) {
    const int y = labels[b];
    detail::require(y >= 0 && static_cast<std::size_t>(y) < K, "cross_entropy: label out of range");
    T mx = logits[b * K];
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, logits[b * K + k]);
    T s = T(0);
    for (std::size_t k = 0; k < K; ++k) s += std::exp(logits[b * K + k] - mx);
    const T lse = mx + std::log(s);
    for (std::size_t k = 0; k < K; ++k) {
      prob[b * K + k] = std::exp(logits[b * K + k] - lse);
      const T target = (T(1) - smoothing) * (k == static_cast<std::size_t>(y) ? T(1) : T(0)) + smoothing / static_cast<T>(K);
      loss -= target * (logits[b * K + k] - lse);
    }
  }
  loss /= static_cast<T>(B);
  return make_op<T>("cross_entropy", {}, {loss}, {logits},
                    [logits, labels, prob = std::move(prob), smoothing, B, K](const std::vector<T>& g) {
                      std::vector<T> gl(B * K);
                      for (std::size_t b = 0; b < B; ++b)
                        for (std::size_t k = 0; k < K; ++k) {
                          const T target = (T(1) - smoothing) * (k == static_cast<std::size_t>(labels[b]) ? T(1) : T(0)) +
                                           smoothing / static_cast<T>(K);
                          gl[b * K + k] = g[0] * (prob[b * K + k] - target) / static_cast<T>(B);
                        }
                      accumulate<T>(logits, gl);
                    });
}

/// Elementwise dropout (inverted scaling). Identity when not training or rate 0.
template <class T, class Rng>
Tensor<T> dropout(const Tensor<T>& x, double rate, bool training, Rng& rng) {
  detail::require(rate >= 0.0 && rate < 1.0, "dropout: rate must be in [0,1)");
  if (!training || rate == 0.0) return x;
  std::bernoulli_distribution keep(1.0 - rate);
  const T s = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> mask(x.numel());
  for (auto& m : mask) m = keep(rng) ? s : T(0);
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * mask[i];
  return make_op<T>("dropout", x.shape(), std::move(out), {x}, [x, mask = std::move(mask)](const std::vector<T>& g) {
    std::vector<T> gx(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * mask[i];
    accumulate<T>(x, gx);
  });
}

}  // namespace dmf
