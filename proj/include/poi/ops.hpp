#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "poi/tape.hpp"

// Differentiable operations on Tape values. Shapes are explicit; the only
// broadcasting is bias-add and per-row scaling.

namespace poi {

namespace detail {

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw DimensionError(msg);
}

inline double dot(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
#pragma omp simd reduction(+ : s)
  for (std::size_t k = 0; k < n; ++k) s += a[k] * b[k];
  return s;
}

inline void axpy(double alpha, const double* x, double* y, std::size_t n) {
#pragma omp simd
  for (std::size_t k = 0; k < n; ++k) y[k] += alpha * x[k];
}

// Accumulate into input `in` if it takes a gradient.
template <class F>
inline void with_grad(Tape& t, Var in, F&& f) {
  if (t.needs_grad(in)) f(t.grad_of(in));
}

// C[M x N] += A[M x K] B[K x N], four rows of C per pass over B.
inline void gemm_acc(const double* A, const double* B, double* C, std::size_t M, std::size_t K, std::size_t N) {
  std::size_t i = 0;
  for (; i + 4 <= M; i += 4) {
    double *c0 = C + i * N, *c1 = c0 + N, *c2 = c1 + N, *c3 = c2 + N;
    for (std::size_t k = 0; k < K; ++k) {
      const double a0 = A[i * K + k], a1 = A[(i + 1) * K + k], a2 = A[(i + 2) * K + k], a3 = A[(i + 3) * K + k];
      const double* b = B + k * N;
#pragma omp simd
      for (std::size_t j = 0; j < N; ++j) {
        c0[j] += a0 * b[j];
        c1[j] += a1 * b[j];
        c2[j] += a2 * b[j];
        c3[j] += a3 * b[j];
      }
    }
  }
  for (; i < M; ++i)
    for (std::size_t k = 0; k < K; ++k) axpy(A[i * K + k], B + k * N, C + i * N, N);
}

// C[M x K] += A[M x N] B[K x N]^T
inline void gemm_abt_acc(const double* A, const double* B, double* C, std::size_t M, std::size_t K, std::size_t N) {
  std::size_t i = 0;
  for (; i + 4 <= M; i += 4) {
    const double *a0 = A + i * N, *a1 = a0 + N, *a2 = a1 + N, *a3 = a2 + N;
    for (std::size_t k = 0; k < K; ++k) {
      const double* b = B + k * N;
      double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
#pragma omp simd reduction(+ : s0, s1, s2, s3)
      for (std::size_t j = 0; j < N; ++j) {
        s0 += a0[j] * b[j];
        s1 += a1[j] * b[j];
        s2 += a2[j] * b[j];
        s3 += a3[j] * b[j];
      }
      C[i * K + k] += s0;
      C[(i + 1) * K + k] += s1;
      C[(i + 2) * K + k] += s2;
      C[(i + 3) * K + k] += s3;
    }
  }
  for (; i < M; ++i)
    for (std::size_t k = 0; k < K; ++k) C[i * K + k] += dot(A + i * N, B + k * N, N);
}

// C[K x N] += A[M x K]^T B[M x N]
inline void gemm_atb_acc(const double* A, const double* B, double* C, std::size_t M, std::size_t K, std::size_t N) {
  std::size_t i = 0;
  for (; i + 4 <= M; i += 4) {
    const double *b0 = B + i * N, *b1 = b0 + N, *b2 = b1 + N, *b3 = b2 + N;
    for (std::size_t k = 0; k < K; ++k) {
      const double a0 = A[i * K + k], a1 = A[(i + 1) * K + k], a2 = A[(i + 2) * K + k], a3 = A[(i + 3) * K + k];
      double* c = C + k * N;
#pragma omp simd
      for (std::size_t j = 0; j < N; ++j) c[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
    }
  }
  for (; i < M; ++i)
    for (std::size_t k = 0; k < K; ++k) axpy(A[i * K + k], B + i * N, C + k * N, N);
}

// Rows of `cols` are (channel, tap) pairs, each an H*W map of the input
// shifted by that tap with zero padding.
inline void im2col_3x3(const double* x, std::size_t C, std::size_t H, std::size_t W, double* cols) {
  const std::size_t HW = H * W;
  for (std::size_t c = 0; c < C; ++c)
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        double* row = cols + (c * 9 + static_cast<std::size_t>(ky * 3 + kx)) * HW;
        std::fill(row, row + HW, 0.0);
        const std::ptrdiff_t dy = ky - 1, dx = kx - 1;
        const std::size_t x0 = dx < 0 ? 1 : 0, x1 = dx > 0 ? W - 1 : W;
        if (x0 >= x1) continue;
        for (std::size_t y = dy < 0 ? 1 : 0; y < (dy > 0 ? H - 1 : H); ++y) {
          const double* src = x + c * HW + (y + dy) * W + (x0 + dx);
          std::copy(src, src + (x1 - x0), row + y * W + x0);
        }
      }
}

// Adjoint of im2col_3x3: accumulates every row back onto its source pixels.
inline void col2im_3x3(const double* cols, std::size_t C, std::size_t H, std::size_t W, double* gx) {
  const std::size_t HW = H * W;
  for (std::size_t c = 0; c < C; ++c)
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        const double* row = cols + (c * 9 + static_cast<std::size_t>(ky * 3 + kx)) * HW;
        const std::ptrdiff_t dy = ky - 1, dx = kx - 1;
        const std::size_t x0 = dx < 0 ? 1 : 0, x1 = dx > 0 ? W - 1 : W;
        if (x0 >= x1) continue;
        for (std::size_t y = dy < 0 ? 1 : 0; y < (dy > 0 ? H - 1 : H); ++y) {
          double* dst = gx + c * HW + (y + dy) * W + (x0 + dx);
          const double* src = row + y * W + x0;
          for (std::size_t k = 0; k < x1 - x0; ++k) dst[k] += src[k];
        }
      }
}

}  // namespace detail

/// out[i,j] = sum_k W[j,k] x[i,k] + b[j]
inline Var linear(Var x, Var W, Var b) {
  using detail::require;
  require(x.shape().size() == 2 && W.shape().size() == 2 && b.shape().size() == 1,
          "linear: expected x[BxD_in], W[D_out x D_in], b[D_out]");
  const std::size_t B = x.dim(0), Din = x.dim(1), Dout = W.dim(0);
  require(W.dim(1) == Din, "linear: W has " + std::to_string(W.dim(1)) + " inputs, x has " + std::to_string(Din));
  require(b.dim(0) == Dout, "linear: bias length " + std::to_string(b.dim(0)) + " != " + std::to_string(Dout));

  Tape& t = *x.tape;
  const auto xv = x.value();
  const auto wv = W.value();
  const auto bv = b.value();
  std::vector<double> out(B * Dout);
  for (std::size_t i = 0; i < B; ++i) {
    for (std::size_t j = 0; j < Dout; ++j) {
      out[i * Dout + j] = bv[j] + detail::dot(&wv[j * Din], &xv[i * Din], Din);
    }
  }
  return t.record("linear", {B, Dout}, std::move(out), {x, W, b}, [x, W, b, B, Din, Dout](Tape& t, std::size_t self) {
    const auto& g = t.node(self).grad;
    const auto& xv = t.value_of(x);
    const auto& wv = t.value_of(W);
    detail::with_grad(t, x, [&](std::vector<double>& gx) {
      for (std::size_t i = 0; i < B; ++i)
        for (std::size_t j = 0; j < Dout; ++j) detail::axpy(g[i * Dout + j], &wv[j * Din], &gx[i * Din], Din);
    });
    detail::with_grad(t, W, [&](std::vector<double>& gw) {
      for (std::size_t i = 0; i < B; ++i)
        for (std::size_t j = 0; j < Dout; ++j) detail::axpy(g[i * Dout + j], &xv[i * Din], &gw[j * Din], Din);
    });
    detail::with_grad(t, b, [&](std::vector<double>& gb) {
      for (std::size_t i = 0; i < B; ++i)
        for (std::size_t j = 0; j < Dout; ++j) gb[j] += g[i * Dout + j];
    });
  });
}

/// 3x3 cross-correlation, stride 1, zero padding 1.
inline Var conv2d_3x3(Var x, Var K, Var b) {
  using detail::require;
  require(x.shape().size() == 4, "conv2d_3x3: input must be BxCxHxW, got " + to_string(x.shape()));
  require(K.shape().size() == 4 && K.dim(2) == 3 && K.dim(3) == 3,
          "conv2d_3x3: kernel must be C_out x C_in x 3 x 3, got " + to_string(K.shape()));
  const std::size_t B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3), Co = K.dim(0);
  require(K.dim(1) == Ci, "conv2d_3x3: kernel expects " + std::to_string(K.dim(1)) + " input channels, got " +
                              std::to_string(Ci));
  require(b.shape().size() == 1 && b.dim(0) == Co, "conv2d_3x3: bias must have C_out entries");

  Tape& t = *x.tape;
  const std::size_t HW = H * W, R = Ci * 9;
  std::vector<double> out(B * Co * HW);
  {
    const auto xv = x.value();
    const auto kv = K.value();
    const auto bv = b.value();
    std::vector<double> cols(R * HW);
    for (std::size_t n = 0; n < B; ++n) {
      detail::im2col_3x3(&xv[n * Ci * HW], Ci, H, W, cols.data());
      double* o = &out[n * Co * HW];
      for (std::size_t co = 0; co < Co; ++co) std::fill(o + co * HW, o + (co + 1) * HW, bv[co]);
      detail::gemm_acc(kv.data(), cols.data(), o, Co, R, HW);
    }
  }

  return t.record("conv2d_3x3", {B, Co, H, W}, std::move(out), {x, K, b},
                  [x, K, b, B, Ci, Co, H, W](Tape& t, std::size_t self) {
                    const std::size_t HW = H * W, R = Ci * 9;
                    const auto& g = t.node(self).grad;
                    const auto& xv = t.value_of(x);
                    const auto& kv = t.value_of(K);
                    const bool need_x = t.needs_grad(x), need_k = t.needs_grad(K);
                    std::vector<double> cols(R * HW), gcols;
                    if (need_x) gcols.resize(R * HW);
                    for (std::size_t n = 0; n < B; ++n) {
                      const double* gn = &g[n * Co * HW];
                      if (need_k) {
                        auto& gk = t.grad_of(K);
                        detail::im2col_3x3(&xv[n * Ci * HW], Ci, H, W, cols.data());
                        detail::gemm_abt_acc(gn, cols.data(), gk.data(), Co, R, HW);
                      }
                      if (need_x) {
                        std::fill(gcols.begin(), gcols.end(), 0.0);
                        detail::gemm_atb_acc(kv.data(), gn, gcols.data(), Co, R, HW);
                        detail::col2im_3x3(gcols.data(), Ci, H, W, &t.grad_of(x)[n * Ci * HW]);
                      }
                    }
                    detail::with_grad(t, b, [&](std::vector<double>& gb) {
                      for (std::size_t n = 0; n < B; ++n)
                        for (std::size_t co = 0; co < Co; ++co) {
                          const double* go = &g[(n * Co + co) * HW];
                          double s = 0.0;
                          for (std::size_t k = 0; k < HW; ++k) s += go[k];
                          gb[co] += s;
                        }
                    });
                  });
}

inline Var relu(Var x) {
  Tape& t = *x.tape;
  std::vector<double> out(x.value().begin(), x.value().end());
  for (double& v : out) v = v > 0.0 ? v : 0.0;
  return t.record("relu", x.shape(), std::move(out), {x}, [x](Tape& t, std::size_t self) {
    const auto& g = t.node(self).grad;
    const auto& xv = t.value_of(x);
    auto& gx = t.grad_of(x);
    for (std::size_t k = 0; k < g.size(); ++k)
      if (xv[k] > 0.0) gx[k] += g[k];
  });
}

inline Var sigmoid(Var x) {
  Tape& t = *x.tape;
  std::vector<double> out(x.size());
  const auto xv = x.value();
  for (std::size_t k = 0; k < out.size(); ++k) {
    // Split by sign so exp never overflows.
    const double v = xv[k];
    if (v >= 0.0) {
      out[k] = 1.0 / (1.0 + std::exp(-v));
    } else {
      const double e = std::exp(v);
      out[k] = e / (1.0 + e);
    }
  }
  return t.record("sigmoid", x.shape(), std::move(out), {x}, [x](Tape& t, std::size_t self) {
    const auto& g = t.node(self).grad;
    const auto& y = t.node(self).value;
    auto& gx = t.grad_of(x);
    for (std::size_t k = 0; k < g.size(); ++k) gx[k] += g[k] * y[k] * (1.0 - y[k]);
  });
}

/// Row-wise softmax of logits / T over the last axis of a BxC tensor.
inline Var softmax_t(Var logits, double T) {
  if (!(T > 0.0) || !std::isfinite(T)) throw ParameterError("softmax_t: temperature must be positive, got " + std::to_string(T));
  detail::require(logits.shape().size() == 2, "softmax_t: expected BxC logits, got " + to_string(logits.shape()));
  const std::size_t B = logits.dim(0), C = logits.dim(1);
  Tape& t = *logits.tape;
  const auto lv = logits.value();
  std::vector<double> out(B * C);
  for (std::size_t i = 0; i < B; ++i) {
    const double* row = &lv[i * C];
    const double mx = *std::max_element(row, row + C);
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      out[i * C + c] = std::exp((row[c] - mx) / T);
      z += out[i * C + c];
    }
    for (std::size_t c = 0; c < C; ++c) out[i * C + c] /= z;
  }
  return t.record("softmax_t", {B, C}, std::move(out), {logits}, [logits, B, C, T](Tape& t, std::size_t self) {
    const auto& g = t.node(self).grad;
    const auto& p = t.node(self).value;
    auto& gx = t.grad_of(logits);
    for (std::size_t i = 0; i < B; ++i) {
      double s = 0.0;
      for (std::size_t c = 0; c < C; ++c) s += g[i * C + c] * p[i * C + c];
      for (std::size_t c = 0; c < C; ++c) gx[i * C + c] += p[i * C + c] * (g[i * C + c] - s) / T;
    }
  });
}

inline Var global_avg_pool(Var x) {
  detail::require(x.shape().size() == 4, "global_avg_pool: expected BxCxHxW, got " + to_string(x.shape()));
  const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  Tape& t = *x.tape;
  const auto xv = x.value();
  std::vector<double> out(B * C);
  for (std::size_t k = 0; k < B * C; ++k) {
    double s = 0.0;
    for (std::size_t p = 0; p < HW; ++p) s += xv[k * HW + p];
    out[k] = s / static_cast<double>(HW);
  }
  return t.record("global_avg_pool", {B, C}, std::move(out), {x}, [x, B, C, HW](Tape& t, std::size_t self) {
    const auto& g = t.node(self).grad;
    auto& gx = t.grad_of(x);
    const double inv = 1.0 / static_cast<double>(HW);
    for (std::size_t k = 0; k < B * C; ++k)
      for (std::size_t p = 0; p < HW; ++p) gx[k * HW + p] += g[k] * inv;
  });
}

/// Non-overlapping k x k mean pooling; H and W must be multiples of k.
inline Var avg_pool2d(Var x, std::size_t k) {
  detail::require(x.shape().size() == 4, "avg_pool2d: expected BxCxHxW");
  if (k == 1) return x;
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  detail::require(k > 0 && H % k == 0 && W % k == 0,
                  "avg_pool2d: spatial size " + std::to_string(H) + "x" + std::to_string(W) +
                      " not divisible by " + std::to_string(k));
  const std::size_t Ho = H / k, Wo = W / k;
  Tape& t = *x.tape;
  const auto xv = x.value();
  const double inv = 1.0 / static_cast<double>(k * k);
  std::vector<double> out(B * C * Ho * Wo, 0.0);
  for (std::size_t p = 0; p < B * C; ++p)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t xx = 0; xx < W; ++xx) out[(p * Ho + y / k) * Wo + xx / k] += xv[(p * H + y) * W + xx] * inv;
  return t.record("avg_pool2d", {B, C, Ho, Wo}, std::move(out), {x},
                  [x, B, C, H, W, Ho, Wo, k, inv](Tape& t, std::size_t self) {
                    const auto& g = t.node(self).grad;
                    auto& gx = t.grad_of(x);
                    for (std::size_t p = 0; p < B * C; ++p)
                      for (std::size_t y = 0; y < H; ++y)
                        for (std::size_t xx = 0; xx < W; ++xx)
                          gx[(p * H + y) * W + xx] += g[(p * Ho + y / k) * Wo + xx / k] * inv;
                  });
}

enum class Corner { UpperLeft, UpperRight, LowerLeft, LowerRight };

/// Copies the size x size window anchored at `corner` of every BxC plane.
inline Var crop2d(Var x, Corner corner, std::size_t size) {
  detail::require(x.shape().size() == 4, "crop2d: expected BxCxHxW");
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  detail::require(size >= 1 && size <= std::min(H, W),
                  "crop2d: window " + std::to_string(size) + " exceeds map " + std::to_string(H) + "x" +
                      std::to_string(W));
  const std::size_t r0 = (corner == Corner::LowerLeft || corner == Corner::LowerRight) ? H - size : 0;
  const std::size_t c0 = (corner == Corner::UpperRight || corner == Corner::LowerRight) ? W - size : 0;
  Tape& t = *x.tape;
  const auto xv = x.value();
  std::vector<double> out(B * C * size * size);
  for (std::size_t p = 0; p < B * C; ++p)
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t xx = 0; xx < size; ++xx)
        out[(p * size + y) * size + xx] = xv[(p * H + r0 + y) * W + c0 + xx];
  return t.record("crop2d", {B, C, size, size}, std::move(out), {x},
                  [x, B, C, H, W, size, r0, c0](Tape& t, std::size_t self) {
                    const auto& g = t.node(self).grad;
                    auto& gx = t.grad_of(x);
                    for (std::size_t p = 0; p < B * C; ++p)
                      for (std::size_t y = 0; y < size; ++y)
                        for (std::size_t xx = 0; xx < size; ++xx)
                          gx[(p * H + r0 + y) * W + c0 + xx] += g[(p * size + y) * size + xx];
                  });
}

/// Reverses the last axis.
inline Var hflip2d(Var x) {
  detail::require(!x.shape().empty(), "hflip2d: rank-0 input");
  const std::size_t W = x.shape().back();
  const std::size_t rows = x.size() / W;
  Tape& t = *x.tape;
  const auto xv = x.value();
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < W; ++c) out[r * W + c] = xv[r * W + (W - 1 - c)];
  return t.record("hflip2d", x.shape(), std::move(out), {x}, [x, rows, W](Tape& t, std::size_t self) {
    const auto& g = t.node(self).grad;
    auto& gx = t.grad_of(x);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < W; ++c) gx[r * W + (W - 1 - c)] += g[r * W + c];
  });
}

/// Concatenates BxD_i tensors along the feature axis.
inline Var concat_cols(std::span<const Var> parts) {
  detail::require(!parts.empty(), "concat_cols: no inputs");
  const std::size_t B = parts[0].dim(0);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var& v : parts) {
    detail::require(v.shape().size() == 2 && v.dim(0) == B, "concat_cols: inputs must be BxD with equal B");
    widths.push_back(v.dim(1));
    total += v.dim(1);
  }
  Tape& t = *parts[0].tape;
  std::vector<double> out(B * total);
  std::size_t off = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto v = parts[p].value();
    for (std::size_t i = 0; i < B; ++i) std::copy_n(&v[i * widths[p]], widths[p], &out[i * total + off]);
    off += widths[p];
  }
  std::vector<Var> ins(parts.begin(), parts.end());
  return t.record("concat_cols", {B, total}, std::move(out), parts, [ins, widths, B, total](Tape& t, std::size_t self) {
    const auto& g = t.node(self).grad;
    std::size_t off = 0;
    for (std::size_t p = 0; p < ins.size(); ++p) {
      detail::with_grad(t, ins[p], [&](std::vector<double>& gp) {
        for (std::size_t i = 0; i < B; ++i)
          for (std::size_t k = 0; k < widths[p]; ++k) gp[i * widths[p] + k] += g[i * total + off + k];
      });
      off += widths[p];
    }
  });
}

inline Var concat_cols(std::initializer_list<Var> parts) {
  return concat_cols(std::span<const Var>(parts.begin(), parts.size()));
}

/// Stacks tensors along axis 0; trailing dimensions must agree.
inline Var concat_rows(std::span<const Var> parts) {
  detail::require(!parts.empty(), "concat_rows: no inputs");
  Shape shape = parts[0].shape();
  const Shape tail(shape.begin() + 1, shape.end());
  std::size_t rows = 0;
  for (const Var& v : parts) {
    detail::require(Shape(v.shape().begin() + 1, v.shape().end()) == tail, "concat_rows: trailing shapes differ");
    rows += v.dim(0);
  }
  shape[0] = rows;
  Tape& t = *parts[0].tape;
  std::vector<double> out;
  out.reserve(numel(shape));
  for (const Var& v : parts) out.insert(out.end(), v.value().begin(), v.value().end());
  std::vector<Var> ins(parts.begin(), parts.end());
  return t.record("concat_rows", shape, std::move(out), parts, [ins](Tape& t, std::size_t self) {
    const auto& g = t.node(self).grad;
    std::size_t off = 0;
    for (const Var& v : ins) {
      const std::size_t n = v.size();
      detail::with_grad(t, v, [&](std::vector<double>& gv) {
        for (std::size_t k = 0; k < n; ++k) gv[k] += g[off + k];
      });
      off += n;
    }
  });
}

inline Var concat_rows(std::initializer_list<Var> parts) {
  return concat_rows(std::span<const Var>(parts.begin(), parts.size()));
}

/// Rows [begin, end) along axis 0.
inline Var slice_rows(Var x, std::size_t begin, std::size_t end) {
  detail::require(begin < end && end <= x.dim(0), "slice_rows: bad range");
  Shape shape = x.shape();
  const std::size_t stride = x.size() / shape[0];
  shape[0] = end - begin;
  Tape& t = *x.tape;
  const auto xv = x.value();
  std::vector<double> out(xv.begin() + begin * stride, xv.begin() + end * stride);
  return t.record("slice_rows", shape, std::move(out), {x}, [x, begin, stride](Tape& t, std::size_t self) {
    const auto& g = t.node(self).grad;
    auto& gx = t.grad_of(x);
    for (std::size_t k = 0; k < g.size(); ++k) gx[begin * stride + k] += g[k];
  });
}

/// Elementwise x * s where s is either BxD (same shape) or Bx1 (row scale).
inline Var scale_rows(Var x, Var s) {
  detail::require(x.shape().size() == 2 && s.shape().size() == 2 && s.dim(0) == x.dim(0) &&
                      (s.dim(1) == 1 || s.dim(1) == x.dim(1)),
                  "scale_rows: scale must be Bx1 or BxD");
  const std::size_t B = x.dim(0), D = x.dim(1);
  const bool per_row = s.dim(1) == 1 && D != 1;
  Tape& t = *x.tape;
  const auto xv = x.value();
  const auto sv = s.value();
  std::vector<double> out(B * D);
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t k = 0; k < D; ++k) out[i * D + k] = xv[i * D + k] * (per_row ? sv[i] : sv[i * D + k]);
  return t.record("scale_rows", {B, D}, std::move(out), {x, s}, [x, s, B, D, per_row](Tape& t, std::size_t self) {
    const auto& g = t.node(self).grad;
    const auto& xv = t.value_of(x);
    const auto& sv = t.value_of(s);
    detail::with_grad(t, x, [&](std::vector<double>& gx) {
      for (std::size_t i = 0; i < B; ++i)
        for (std::size_t k = 0; k < D; ++k) gx[i * D + k] += g[i * D + k] * (per_row ? sv[i] : sv[i * D + k]);
    });
    detail::with_grad(t, s, [&](std::vector<double>& gs) {
      for (std::size_t i = 0; i < B; ++i)
        for (std::size_t k = 0; k < D; ++k) {
          const double v = g[i * D + k] * xv[i * D + k];
          if (per_row) gs[i] += v;
          else gs[i * D + k] += v;
        }
    });
  });
}

/// Elementwise product of equally shaped tensors.
inline Var mul(Var a, Var b) {
  detail::require(a.shape() == b.shape(), "mul: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  Tape& t = *a.tape;
  std::vector<double> out(a.size());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = a.value()[k] * b.value()[k];
  return t.record("mul", a.shape(), std::move(out), {a, b}, [a, b](Tape& t, std::size_t self) {
    const auto& g = t.node(self).grad;
    const auto& av = t.value_of(a);
    const auto& bv = t.value_of(b);
    detail::with_grad(t, a, [&](std::vector<double>& ga) {
      for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k] * bv[k];
    });
    detail::with_grad(t, b, [&](std::vector<double>& gb) {
      for (std::size_t k = 0; k < g.size(); ++k) gb[k] += g[k] * av[k];
    });
  });
}

/// Per-row convex mixture: out[i] = sum_n w[i,n] * parts[n][i].
inline Var mix(Var w, std::span<const Var> parts) {
  detail::require(w.shape().size() == 2 && w.dim(1) == parts.size(), "mix: weights must be B x N_parts");
  const std::size_t B = w.dim(0), N = parts.size();
  const std::size_t C = parts[0].dim(1);
  for (const Var& p : parts) detail::require(p.shape() == Shape{B, C}, "mix: parts must all be BxC");
  Tape& t = *w.tape;
  const auto wv = w.value();
  std::vector<double> out(B * C, 0.0);
  for (std::size_t n = 0; n < N; ++n) {
    const auto pv = parts[n].value();
    for (std::size_t i = 0; i < B; ++i)
      for (std::size_t c = 0; c < C; ++c) out[i * C + c] += wv[i * N + n] * pv[i * C + c];
  }
  std::vector<Var> ins{w};
  ins.insert(ins.end(), parts.begin(), parts.end());
  std::vector<Var> ps(parts.begin(), parts.end());
  return t.record("mix", {B, C}, std::move(out), ins, [w, ps, B, N, C](Tape& t, std::size_t self) {
    const auto& g = t.node(self).grad;
    const auto& wv = t.value_of(w);
    detail::with_grad(t, w, [&](std::vector<double>& gw) {
      for (std::size_t n = 0; n < N; ++n) {
        const auto& pv = t.value_of(ps[n]);
        for (std::size_t i = 0; i < B; ++i) gw[i * N + n] += detail::dot(&g[i * C], &pv[i * C], C);
      }
    });
    for (std::size_t n = 0; n < N; ++n) {
      detail::with_grad(t, ps[n], [&](std::vector<double>& gp) {
        for (std::size_t i = 0; i < B; ++i)
          for (std::size_t c = 0; c < C; ++c) gp[i * C + c] += wv[i * N + n] * g[i * C + c];
      });
    }
  });
}

inline Var mix(Var w, std::initializer_list<Var> parts) {
  return mix(w, std::span<const Var>(parts.begin(), parts.size()));
}

/// Stop-gradient: same value, no path back to `x`.
inline Var detach(Var x) { return x.tape->stop_gradient(x); }

inline Var sum(Var x) {
  Tape& t = *x.tape;
  double s = 0.0;
  for (double v : x.value()) s += v;
  return t.record("sum", {1}, {s}, {x}, [x](Tape& t, std::size_t self) {
    const double g = t.node(self).grad[0];
    for (double& v : t.grad_of(x)) v += g;
  });
}

inline Var scale(Var x, double c) {
  Tape& t = *x.tape;
  std::vector<double> out(x.value().begin(), x.value().end());
  for (double& v : out) v *= c;
  return t.record("scale", x.shape(), std::move(out), {x}, [x, c](Tape& t, std::size_t self) {
    const auto& g = t.node(self).grad;
    auto& gx = t.grad_of(x);
    for (std::size_t k = 0; k < g.size(); ++k) gx[k] += c * g[k];
  });
}

/// sum_k weights[k] * terms[k] over scalar terms.
inline Var weighted_sum(std::span<const Var> terms, std::span<const double> weights) {
  detail::require(!terms.empty() && terms.size() == weights.size(), "weighted_sum: terms/weights mismatch");
  Tape& t = *terms[0].tape;
  double s = 0.0;
  for (std::size_t k = 0; k < terms.size(); ++k) s += weights[k] * terms[k].item();
  std::vector<Var> ins(terms.begin(), terms.end());
  std::vector<double> ws(weights.begin(), weights.end());
  return t.record("weighted_sum", {1}, {s}, terms, [ins, ws](Tape& t, std::size_t self) {
    const double g = t.node(self).grad[0];
    for (std::size_t k = 0; k < ins.size(); ++k) {
      detail::with_grad(t, ins[k], [&](std::vector<double>& gk) { gk[0] += ws[k] * g; });
    }
  });
}

}  // namespace poi
