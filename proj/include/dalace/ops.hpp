#pragma once

// Differentiable tensor ops. Layout is NCHW row-major throughout.
// Convolutions run as im2col + GEMM per sample; the per-sample work is
// spread across the thread pool and every cross-sample reduction is a
// serial loop in sample order, so results do not depend on thread count.

#include <cmath>
#include <cstring>

#include "dalace/autodiff.hpp"
#include "dalace/gemm.hpp"
#include "dalace/parallel.hpp"

namespace dalace {

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename T>
VarPtr<T> add(const VarPtr<T>& a, const VarPtr<T>& b) {
  check_same_shape(a->val, b->val, "add");
  auto out = make_node(Tensor<T>(a->val.shape()));
  const int64_t n = out->val.numel();
  const T* pa = a->val.data();
  const T* pb = b->val.data();
  T* po = out->val.data();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  out->needs_grad = a->needs_grad || b->needs_grad;
  if (out->needs_grad) {
    out->parents = {a, b};
    out->backfn = [a, b, n](VarNode<T>& self) {
      const T* g = self.grad.data();
      for (const auto& p : {a, b}) {
        if (!p->needs_grad) continue;
        p->ensure_grad();
        T* pg = p->grad.data();
        for (int64_t i = 0; i < n; ++i) pg[i] += g[i];
      }
    };
  }
  return out;
}

template <typename T>
VarPtr<T> scale(const VarPtr<T>& x, T c) {
  auto out = make_node(Tensor<T>(x->val.shape()));
  const int64_t n = out->val.numel();
  const T* px = x->val.data();
  T* po = out->val.data();
  for (int64_t i = 0; i < n; ++i) po[i] = c * px[i];
  out->needs_grad = x->needs_grad;
  if (out->needs_grad) {
    out->parents = {x};
    out->backfn = [x, c, n](VarNode<T>& self) {
      x->ensure_grad();
      const T* g = self.grad.data();
      T* pg = x->grad.data();
      for (int64_t i = 0; i < n; ++i) pg[i] += c * g[i];
    };
  }
  return out;
}

template <typename T>
VarPtr<T> add_const(const VarPtr<T>& x, T c) {
  auto out = make_node(Tensor<T>(x->val.shape()));
  const int64_t n = out->val.numel();
  const T* px = x->val.data();
  T* po = out->val.data();
  for (int64_t i = 0; i < n; ++i) po[i] = px[i] + c;
  out->needs_grad = x->needs_grad;
  if (out->needs_grad) {
    out->parents = {x};
    out->backfn = [x, n](VarNode<T>& self) {
      x->ensure_grad();
      const T* g = self.grad.data();
      T* pg = x->grad.data();
      for (int64_t i = 0; i < n; ++i) pg[i] += g[i];
    };
  }
  return out;
}

template <typename T>
VarPtr<T> relu(const VarPtr<T>& x) {
  auto out = make_node(Tensor<T>(x->val.shape()));
  const int64_t n = out->val.numel();
  const T* px = x->val.data();
  T* po = out->val.data();
  for (int64_t i = 0; i < n; ++i) po[i] = px[i] > T(0) ? px[i] : T(0);
  out->needs_grad = x->needs_grad;
  if (out->needs_grad) {
    out->parents = {x};
    out->backfn = [x, n](VarNode<T>& self) {
      x->ensure_grad();
      const T* g = self.grad.data();
      const T* px2 = x->val.data();
      T* pg = x->grad.data();
      for (int64_t i = 0; i < n; ++i)
        if (px2[i] > T(0)) pg[i] += g[i];
    };
  }
  return out;
}

template <typename T>
VarPtr<T> leaky_relu(const VarPtr<T>& x, T slope) {
  auto out = make_node(Tensor<T>(x->val.shape()));
  const int64_t n = out->val.numel();
  const T* px = x->val.data();
  T* po = out->val.data();
  for (int64_t i = 0; i < n; ++i) po[i] = px[i] > T(0) ? px[i] : slope * px[i];
  out->needs_grad = x->needs_grad;
  if (out->needs_grad) {
    out->parents = {x};
    out->backfn = [x, slope, n](VarNode<T>& self) {
      x->ensure_grad();
      const T* g = self.grad.data();
      const T* px2 = x->val.data();
      T* pg = x->grad.data();
      for (int64_t i = 0; i < n; ++i) pg[i] += (px2[i] > T(0) ? g[i] : slope * g[i]);
    };
  }
  return out;
}

template <typename T>
VarPtr<T> sigmoid(const VarPtr<T>& x) {
  auto out = make_node(Tensor<T>(x->val.shape()));
  const int64_t n = out->val.numel();
  const T* px = x->val.data();
  T* po = out->val.data();
  for (int64_t i = 0; i < n; ++i) po[i] = T(1) / (T(1) + std::exp(-px[i]));
  out->needs_grad = x->needs_grad;
  if (out->needs_grad) {
    out->parents = {x};
    auto y = out->val;
    out->backfn = [x, y, n](VarNode<T>& self) {
      x->ensure_grad();
      const T* g = self.grad.data();
      const T* py = y.data();
      T* pg = x->grad.data();
      for (int64_t i = 0; i < n; ++i) pg[i] += g[i] * py[i] * (T(1) - py[i]);
    };
  }
  return out;
}

template <typename T>
VarPtr<T> tanh_op(const VarPtr<T>& x) {
  auto out = make_node(Tensor<T>(x->val.shape()));
  const int64_t n = out->val.numel();
  const T* px = x->val.data();
  T* po = out->val.data();
  for (int64_t i = 0; i < n; ++i) po[i] = std::tanh(px[i]);
  out->needs_grad = x->needs_grad;
  if (out->needs_grad) {
    out->parents = {x};
    auto y = out->val;
    out->backfn = [x, y, n](VarNode<T>& self) {
      x->ensure_grad();
      const T* g = self.grad.data();
      const T* py = y.data();
      T* pg = x->grad.data();
      for (int64_t i = 0; i < n; ++i) pg[i] += g[i] * (T(1) - py[i] * py[i]);
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void im2col(const T* x, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw, int64_t stride,
            int64_t pad, int64_t OH, int64_t OW, T* col) {
  // col is [C*kh*kw, OH*OW]
  for (int64_t c = 0; c < C; ++c) {
    for (int64_t ky = 0; ky < kh; ++ky) {
      for (int64_t kx = 0; kx < kw; ++kx) {
        T* row = col + ((c * kh + ky) * kw + kx) * OH * OW;
        for (int64_t oy = 0; oy < OH; ++oy) {
          const int64_t iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) {
            std::memset(row + oy * OW, 0, size_t(OW) * sizeof(T));
            continue;
          }
          const T* src = x + (c * H + iy) * W;
          T* dst = row + oy * OW;
          int64_t ix = -pad + kx;
          for (int64_t ox = 0; ox < OW; ++ox, ix += stride) {
            dst[ox] = (ix >= 0 && ix < W) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_accum(const T* col, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
                  int64_t stride, int64_t pad, int64_t OH, int64_t OW, T* x) {
  for (int64_t c = 0; c < C; ++c) {
    for (int64_t ky = 0; ky < kh; ++ky) {
      for (int64_t kx = 0; kx < kw; ++kx) {
        const T* row = col + ((c * kh + ky) * kw + kx) * OH * OW;
        for (int64_t oy = 0; oy < OH; ++oy) {
          const int64_t iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) continue;
          T* dst = x + (c * H + iy) * W;
          const T* src = row + oy * OW;
          int64_t ix = -pad + kx;
          for (int64_t ox = 0; ox < OW; ++ox, ix += stride) {
            if (ix >= 0 && ix < W) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// x: [B,C,H,W], w: [K,C,kh,kw], b: [K]. Padding is symmetric.
template <typename T>
VarPtr<T> conv2d(const VarPtr<T>& x, const VarPtr<T>& w, const VarPtr<T>& b, int64_t stride,
                 int64_t pad) {
  require(x->val.rank() == 4 && w->val.rank() == 4, ErrorCode::ShapeMismatch, "conv2d rank");
  const int64_t B = x->val.dim(0), C = x->val.dim(1), H = x->val.dim(2), W = x->val.dim(3);
  const int64_t K = w->val.dim(0), kh = w->val.dim(2), kw = w->val.dim(3);
  require(w->val.dim(1) == C, ErrorCode::ShapeMismatch,
          "conv2d channels: " + x->val.shape_str() + " vs " + w->val.shape_str());
  const int64_t OH = (H + 2 * pad - kh) / stride + 1;
  const int64_t OW = (W + 2 * pad - kw) / stride + 1;
  require(OH > 0 && OW > 0, ErrorCode::ShapeMismatch, "conv2d output collapsed");

  auto out = make_node(Tensor<T>({B, K, OH, OW}));
  const int64_t ck2 = C * kh * kw, ohw = OH * OW;
  const bool track = x->needs_grad || w->needs_grad || b->needs_grad;

  // Columns are cached per sample when a backward pass will need them.
  auto cols = std::make_shared<Tensor<T>>(Tensor<T>({B, ck2 * ohw}));

  const T* px = x->val.data();
  const T* pw = w->val.data();
  const T* pb = b->val.data();
  T* po = out->val.data();
  T* pcols = cols->data();

  parallel_for(B, [&](int64_t bi) {
    T* col = pcols + bi * ck2 * ohw;
    detail::im2col(px + bi * C * H * W, C, H, W, kh, kw, stride, pad, OH, OW, col);
    T* ob = po + bi * K * ohw;
    gemm_nn(pw, col, ob, K, ck2, ohw);
    for (int64_t k = 0; k < K; ++k) {
      const T bias = pb[k];
      T* row = ob + k * ohw;
      for (int64_t i = 0; i < ohw; ++i) row[i] += bias;
    }
  });

  out->needs_grad = track;
  if (track) {
    out->parents = {x, w, b};
    out->backfn = [x, w, b, cols, B, C, H, W, K, kh, kw, stride, pad, OH, OW, ck2,
                   ohw](VarNode<T>& self) {
      const T* g = self.grad.data();
      const T* pcols2 = cols->data();
      if (x->needs_grad) {
        x->ensure_grad();
        T* gx = x->grad.data();
        const T* pw2 = w->val.data();
        Tensor<T> dcol({ck2 * ohw});
        // dX is per-sample disjoint but needs a per-thread dcol scratch, so
        // parallelize by contiguous sample ranges.
        parallel_ranges(B, [&](int64_t lo, int64_t hi) {
          Tensor<T> scratch({ck2 * ohw});
          for (int64_t bi = lo; bi < hi; ++bi) {
            gemm_tn(pw2, g + bi * K * ohw, scratch.data(), ck2, K, ohw);
            detail::col2im_accum(scratch.data(), C, H, W, kh, kw, stride, pad, OH, OW,
                                 gx + bi * C * H * W);
          }
        });
      }
      if (w->needs_grad) {
        w->ensure_grad();
        Tensor<T> dwb({B, K * ck2});
        T* pdwb = dwb.data();
        parallel_for(B, [&](int64_t bi) {
          gemm_nt(g + bi * K * ohw, pcols2 + bi * ck2 * ohw, pdwb + bi * K * ck2, K, ohw, ck2);
        });
        T* gw = w->grad.data();
        for (int64_t bi = 0; bi < B; ++bi) {
          const T* src = pdwb + bi * K * ck2;
          for (int64_t i = 0; i < K * ck2; ++i) gw[i] += src[i];
        }
      }
      if (b->needs_grad) {
        b->ensure_grad();
        T* gb = b->grad.data();
        for (int64_t bi = 0; bi < B; ++bi) {
          for (int64_t k = 0; k < K; ++k) {
            const T* row = g + (bi * K + k) * ohw;
            T s = 0;
            for (int64_t i = 0; i < ohw; ++i) s += row[i];
            gb[k] += s;
          }
        }
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// linear / pooling / resampling
// ---------------------------------------------------------------------------

// x: [B,N], w: [M,N], b: [M] -> [B,M]
template <typename T>
VarPtr<T> linear(const VarPtr<T>& x, const VarPtr<T>& w, const VarPtr<T>& b) {
  require(x->val.rank() == 2 && w->val.rank() == 2, ErrorCode::ShapeMismatch, "linear rank");
  const int64_t B = x->val.dim(0), N = x->val.dim(1), M = w->val.dim(0);
  require(w->val.dim(1) == N && b->val.numel() == M, ErrorCode::ShapeMismatch, "linear shapes");
  auto out = make_node(Tensor<T>({B, M}));
  gemm_nt(x->val.data(), w->val.data(), out->val.data(), B, N, M);
  T* po = out->val.data();
  const T* pb = b->val.data();
  for (int64_t i = 0; i < B; ++i)
    for (int64_t m = 0; m < M; ++m) po[i * M + m] += pb[m];
  out->needs_grad = x->needs_grad || w->needs_grad || b->needs_grad;
  if (out->needs_grad) {
    out->parents = {x, w, b};
    out->backfn = [x, w, b, B, N, M](VarNode<T>& self) {
      const T* g = self.grad.data();
      if (x->needs_grad) {
        x->ensure_grad();
        gemm_nn(g, w->val.data(), x->grad.data(), B, M, N, /*accum=*/true);
      }
      if (w->needs_grad) {
        w->ensure_grad();
        gemm_tn(g, x->val.data(), w->grad.data(), M, B, N, /*accum=*/true);
      }
      if (b->needs_grad) {
        b->ensure_grad();
        T* gb = b->grad.data();
        for (int64_t i = 0; i < B; ++i)
          for (int64_t m = 0; m < M; ++m) gb[m] += g[i * M + m];
      }
    };
  }
  return out;
}

template <typename T>
VarPtr<T> global_avg_pool(const VarPtr<T>& x) {
  require(x->val.rank() == 4, ErrorCode::ShapeMismatch, "gap rank");
  const int64_t B = x->val.dim(0), C = x->val.dim(1), HW = x->val.dim(2) * x->val.dim(3);
  auto out = make_node(Tensor<T>({B, C}));
  const T* px = x->val.data();
  T* po = out->val.data();
  for (int64_t i = 0; i < B * C; ++i) {
    const T* src = px + i * HW;
    T s = 0;
    for (int64_t j = 0; j < HW; ++j) s += src[j];
    po[i] = s / T(HW);
  }
  out->needs_grad = x->needs_grad;
  if (out->needs_grad) {
    out->parents = {x};
    out->backfn = [x, B, C, HW](VarNode<T>& self) {
      x->ensure_grad();
      const T* g = self.grad.data();
      T* gx = x->grad.data();
      for (int64_t i = 0; i < B * C; ++i) {
        const T gi = g[i] / T(HW);
        T* dst = gx + i * HW;
        for (int64_t j = 0; j < HW; ++j) dst[j] += gi;
      }
    };
  }
  return out;
}

template <typename T>
VarPtr<T> max_pool2x2(const VarPtr<T>& x) {
  require(x->val.rank() == 4, ErrorCode::ShapeMismatch, "maxpool rank");
  const int64_t B = x->val.dim(0), C = x->val.dim(1), H = x->val.dim(2), W = x->val.dim(3);
  require(H % 2 == 0 && W % 2 == 0, ErrorCode::ShapeMismatch, "maxpool needs even extent");
  const int64_t OH = H / 2, OW = W / 2;
  auto out = make_node(Tensor<T>({B, C, OH, OW}));
  auto argmax = std::make_shared<std::vector<uint8_t>>(size_t(B * C * OH * OW));
  const T* px = x->val.data();
  T* po = out->val.data();
  uint8_t* pam = argmax->data();
  for (int64_t bc = 0; bc < B * C; ++bc) {
    const T* plane = px + bc * H * W;
    T* oplane = po + bc * OH * OW;
    uint8_t* aplane = pam + bc * OH * OW;
    for (int64_t oy = 0; oy < OH; ++oy) {
      for (int64_t ox = 0; ox < OW; ++ox) {
        const int64_t base = (2 * oy) * W + 2 * ox;
        T best = plane[base];
        uint8_t arg = 0;
        const T cand1 = plane[base + 1];
        if (cand1 > best) { best = cand1; arg = 1; }
        const T cand2 = plane[base + W];
        if (cand2 > best) { best = cand2; arg = 2; }
        const T cand3 = plane[base + W + 1];
        if (cand3 > best) { best = cand3; arg = 3; }
        oplane[oy * OW + ox] = best;
        aplane[oy * OW + ox] = arg;
      }
    }
  }
  out->needs_grad = x->needs_grad;
  if (out->needs_grad) {
    out->parents = {x};
    out->backfn = [x, argmax, B, C, H, W, OH, OW](VarNode<T>& self) {
      x->ensure_grad();
      const T* g = self.grad.data();
      T* gx = x->grad.data();
      const uint8_t* pam2 = argmax->data();
      for (int64_t bc = 0; bc < B * C; ++bc) {
        T* plane = gx + bc * H * W;
        const T* oplane = g + bc * OH * OW;
        const uint8_t* aplane = pam2 + bc * OH * OW;
        for (int64_t oy = 0; oy < OH; ++oy) {
          for (int64_t ox = 0; ox < OW; ++ox) {
            const uint8_t a = aplane[oy * OW + ox];
            const int64_t base = (2 * oy) * W + 2 * ox;
            plane[base + (a & 1) + W * (a >> 1)] += oplane[oy * OW + ox];
          }
        }
      }
    };
  }
  return out;
}

template <typename T>
VarPtr<T> upsample_nearest2x(const VarPtr<T>& x) {
  require(x->val.rank() == 4, ErrorCode::ShapeMismatch, "upsample rank");
  const int64_t B = x->val.dim(0), C = x->val.dim(1), H = x->val.dim(2), W = x->val.dim(3);
  auto out = make_node(Tensor<T>({B, C, 2 * H, 2 * W}));
  const T* px = x->val.data();
  T* po = out->val.data();
  for (int64_t bc = 0; bc < B * C; ++bc) {
    const T* plane = px + bc * H * W;
    T* oplane = po + bc * 4 * H * W;
    for (int64_t y = 0; y < H; ++y) {
      for (int64_t xw = 0; xw < W; ++xw) {
        const T v = plane[y * W + xw];
        T* d = oplane + (2 * y) * (2 * W) + 2 * xw;
        d[0] = v;
        d[1] = v;
        d[2 * W] = v;
        d[2 * W + 1] = v;
      }
    }
  }
  out->needs_grad = x->needs_grad;
  if (out->needs_grad) {
    out->parents = {x};
    out->backfn = [x, B, C, H, W](VarNode<T>& self) {
      x->ensure_grad();
      const T* g = self.grad.data();
      T* gx = x->grad.data();
      for (int64_t bc = 0; bc < B * C; ++bc) {
        T* plane = gx + bc * H * W;
        const T* oplane = g + bc * 4 * H * W;
        for (int64_t y = 0; y < H; ++y) {
          for (int64_t xw = 0; xw < W; ++xw) {
            const T* s = oplane + (2 * y) * (2 * W) + 2 * xw;
            plane[y * W + xw] += s[0] + s[1] + s[2 * W] + s[2 * W + 1];
          }
        }
      }
    };
  }
  return out;
}

template <typename T>
VarPtr<T> concat_channels(const VarPtr<T>& a, const VarPtr<T>& b) {
  require(a->val.rank() == 4 && b->val.rank() == 4, ErrorCode::ShapeMismatch, "concat rank");
  const int64_t B = a->val.dim(0), C1 = a->val.dim(1), C2 = b->val.dim(1);
  const int64_t H = a->val.dim(2), W = a->val.dim(3);
  require(b->val.dim(0) == B && b->val.dim(2) == H && b->val.dim(3) == W,
          ErrorCode::ShapeMismatch, "concat spatial");
  auto out = make_node(Tensor<T>({B, C1 + C2, H, W}));
  const int64_t plane = H * W;
  const T* pa = a->val.data();
  const T* pb = b->val.data();
  T* po = out->val.data();
  for (int64_t bi = 0; bi < B; ++bi) {
    std::memcpy(po + bi * (C1 + C2) * plane, pa + bi * C1 * plane, size_t(C1 * plane) * sizeof(T));
    std::memcpy(po + (bi * (C1 + C2) + C1) * plane, pb + bi * C2 * plane,
                size_t(C2 * plane) * sizeof(T));
  }
  out->needs_grad = a->needs_grad || b->needs_grad;
  if (out->needs_grad) {
    out->parents = {a, b};
    out->backfn = [a, b, B, C1, C2, plane](VarNode<T>& self) {
      const T* g = self.grad.data();
      if (a->needs_grad) {
        a->ensure_grad();
        T* ga = a->grad.data();
        for (int64_t bi = 0; bi < B; ++bi) {
          const T* src = g + bi * (C1 + C2) * plane;
          T* dst = ga + bi * C1 * plane;
          for (int64_t i = 0; i < C1 * plane; ++i) dst[i] += src[i];
        }
      }
      if (b->needs_grad) {
        b->ensure_grad();
        T* gb = b->grad.data();
        for (int64_t bi = 0; bi < B; ++bi) {
          const T* src = g + (bi * (C1 + C2) + C1) * plane;
          T* dst = gb + bi * C2 * plane;
          for (int64_t i = 0; i < C2 * plane; ++i) dst[i] += src[i];
        }
      }
    };
  }
  return out;
}

// x: [B,N] -> [B, hi-lo]
template <typename T>
VarPtr<T> slice_cols(const VarPtr<T>& x, int64_t lo, int64_t hi) {
  require(x->val.rank() == 2 && lo >= 0 && hi <= x->val.dim(1) && lo < hi,
          ErrorCode::ShapeMismatch, "slice_cols range");
  const int64_t B = x->val.dim(0), N = x->val.dim(1), M = hi - lo;
  auto out = make_node(Tensor<T>({B, M}));
  const T* px = x->val.data();
  T* po = out->val.data();
  for (int64_t i = 0; i < B; ++i)
    std::memcpy(po + i * M, px + i * N + lo, size_t(M) * sizeof(T));
  out->needs_grad = x->needs_grad;
  if (out->needs_grad) {
    out->parents = {x};
    out->backfn = [x, lo, B, N, M](VarNode<T>& self) {
      x->ensure_grad();
      const T* g = self.grad.data();
      T* gx = x->grad.data();
      for (int64_t i = 0; i < B; ++i) {
        T* dst = gx + i * N + lo;
        const T* src = g + i * M;
        for (int64_t j = 0; j < M; ++j) dst[j] += src[j];
      }
    };
  }
  return out;
}

// [C] -> [B,C] row broadcast; backward sums over rows.
template <typename T>
VarPtr<T> broadcast_rows(const VarPtr<T>& x, int64_t rows) {
  require(x->val.rank() == 1, ErrorCode::ShapeMismatch, "broadcast_rows expects a vector");
  const int64_t C = x->val.dim(0);
  auto out = make_node(Tensor<T>({rows, C}));
  const T* px = x->val.data();
  T* po = out->val.data();
  for (int64_t r = 0; r < rows; ++r) std::memcpy(po + r * C, px, size_t(C) * sizeof(T));
  out->needs_grad = x->needs_grad;
  if (out->needs_grad) {
    out->parents = {x};
    out->backfn = [x, rows, C](VarNode<T>& self) {
      x->ensure_grad();
      const T* g = self.grad.data();
      T* gx = x->grad.data();
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < C; ++c) gx[c] += g[r * C + c];
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

// Per-channel batch statistics over (B,H,W) when training; running averages
// otherwise. Running buffers are updated in place as a side effect of the
// forward pass, outside the autodiff graph. With B == 1 the batch statistics
// reduce to instance statistics, which is the documented small-batch
// behavior.
template <typename T>
VarPtr<T> batch_norm(const VarPtr<T>& x, const VarPtr<T>& gamma, const VarPtr<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var, bool training, T momentum,
                     T eps) {
  require(x->val.rank() == 4, ErrorCode::ShapeMismatch, "batch_norm rank");
  const int64_t B = x->val.dim(0), C = x->val.dim(1), H = x->val.dim(2), W = x->val.dim(3);
  require(gamma->val.numel() == C && beta->val.numel() == C, ErrorCode::ShapeMismatch,
          "batch_norm affine size");
  const int64_t HW = H * W, N = B * HW;
  auto out = make_node(Tensor<T>({B, C, H, W}));
  auto mean = std::make_shared<Tensor<T>>(Tensor<T>({C}));
  auto invstd = std::make_shared<Tensor<T>>(Tensor<T>({C}));

  const T* px = x->val.data();
  T* po = out->val.data();
  T* pmean = mean->data();
  T* pinv = invstd->data();
  const T* pg = gamma->val.data();
  const T* pbeta = beta->val.data();

  parallel_for(C, [&](int64_t c) {
    T mu, var;
    if (training) {
      T s = 0;
      for (int64_t b = 0; b < B; ++b) {
        const T* plane = px + (b * C + c) * HW;
        for (int64_t i = 0; i < HW; ++i) s += plane[i];
      }
      mu = s / T(N);
      T v = 0;
      for (int64_t b = 0; b < B; ++b) {
        const T* plane = px + (b * C + c) * HW;
        for (int64_t i = 0; i < HW; ++i) {
          const T d = plane[i] - mu;
          v += d * d;
        }
      }
      var = v / T(N);
    } else {
      mu = running_mean[c];
      var = running_var[c];
    }
    pmean[c] = mu;
    const T is = T(1) / std::sqrt(var + eps);
    pinv[c] = is;
    const T a = pg[c] * is;
    const T b0 = pbeta[c] - a * mu;
    for (int64_t b = 0; b < B; ++b) {
      const T* splane = px + (b * C + c) * HW;
      T* dplane = po + (b * C + c) * HW;
      for (int64_t i = 0; i < HW; ++i) dplane[i] = a * splane[i] + b0;
    }
    if (training) {
      running_mean[c] = (T(1) - momentum) * running_mean[c] + momentum * mu;
      running_var[c] = (T(1) - momentum) * running_var[c] + momentum * var;
    }
  });

  out->needs_grad = x->needs_grad || gamma->needs_grad || beta->needs_grad;
  if (out->needs_grad) {
    out->parents = {x, gamma, beta};
    out->backfn = [x, gamma, beta, mean, invstd, training, B, C, HW, N](VarNode<T>& self) {
      const T* g = self.grad.data();
      const T* px2 = x->val.data();
      const T* pm = mean->data();
      const T* pi = invstd->data();
      const T* pgm = gamma->val.data();
      if (x->needs_grad) x->ensure_grad();
      if (gamma->needs_grad) gamma->ensure_grad();
      if (beta->needs_grad) beta->ensure_grad();
      T* gx = x->needs_grad ? x->grad.data() : nullptr;
      T* ggm = gamma->needs_grad ? gamma->grad.data() : nullptr;
      T* gbt = beta->needs_grad ? beta->grad.data() : nullptr;
      parallel_for(C, [&](int64_t c) {
        const T mu = pm[c], is = pi[c], gm = pgm[c];
        T sum_dy = 0, sum_dy_xhat = 0;
        for (int64_t b = 0; b < B; ++b) {
          const T* gp = g + (b * C + c) * HW;
          const T* xp = px2 + (b * C + c) * HW;
          for (int64_t i = 0; i < HW; ++i) {
            sum_dy += gp[i];
            sum_dy_xhat += gp[i] * (xp[i] - mu) * is;
          }
        }
        if (ggm) ggm[c] += sum_dy_xhat;
        if (gbt) gbt[c] += sum_dy;
        if (gx) {
          if (training) {
            const T k = gm * is / T(N);
            for (int64_t b = 0; b < B; ++b) {
              const T* gp = g + (b * C + c) * HW;
              const T* xp = px2 + (b * C + c) * HW;
              T* dp = gx + (b * C + c) * HW;
              for (int64_t i = 0; i < HW; ++i) {
                const T xhat = (xp[i] - mu) * is;
                dp[i] += k * (T(N) * gp[i] - sum_dy - xhat * sum_dy_xhat);
              }
            }
          } else {
            const T a = gm * is;
            for (int64_t b = 0; b < B; ++b) {
              const T* gp = g + (b * C + c) * HW;
              T* dp = gx + (b * C + c) * HW;
              for (int64_t i = 0; i < HW; ++i) dp[i] += a * gp[i];
            }
          }
        }
      });
    };
  }
  return out;
}

// Adaptive instance normalization. gamma/beta are per-sample per-channel
// [B,C]; statistics are per (sample, channel) over spatial positions.
template <typename T>
VarPtr<T> adain(const VarPtr<T>& x, const VarPtr<T>& gamma, const VarPtr<T>& beta, T eps) {
  require(eps > T(0), ErrorCode::DomainError, "adain eps must be positive");
  require(x->val.rank() == 4, ErrorCode::ShapeMismatch, "adain rank");
  const int64_t B = x->val.dim(0), C = x->val.dim(1), HW = x->val.dim(2) * x->val.dim(3);
  require(gamma->val.rank() == 2 && gamma->val.dim(0) == B && gamma->val.dim(1) == C,
          ErrorCode::ShapeMismatch, "adain gamma shape");
  check_same_shape(gamma->val, beta->val, "adain affine");
  auto out = make_node(Tensor<T>(x->val.shape()));
  auto mean = std::make_shared<Tensor<T>>(Tensor<T>({B, C}));
  auto invstd = std::make_shared<Tensor<T>>(Tensor<T>({B, C}));

  const T* px = x->val.data();
  const T* pgm = gamma->val.data();
  const T* pbt = beta->val.data();
  T* po = out->val.data();
  T* pm = mean->data();
  T* pi = invstd->data();

  parallel_for(B * C, [&](int64_t bc) {
    const T* sp = px + bc * HW;
    T s = 0;
    for (int64_t i = 0; i < HW; ++i) s += sp[i];
    const T mu = s / T(HW);
    T v = 0;
    for (int64_t i = 0; i < HW; ++i) {
      const T d = sp[i] - mu;
      v += d * d;
    }
    const T is = T(1) / std::sqrt(v / T(HW) + eps);
    pm[bc] = mu;
    pi[bc] = is;
    const T a = pgm[bc] * is;
    const T b0 = pbt[bc] - a * mu;
    T* dp = po + bc * HW;
    for (int64_t i = 0; i < HW; ++i) dp[i] = a * sp[i] + b0;
  });

  out->needs_grad = x->needs_grad || gamma->needs_grad || beta->needs_grad;
  if (out->needs_grad) {
    out->parents = {x, gamma, beta};
    out->backfn = [x, gamma, beta, mean, invstd, B, C, HW](VarNode<T>& self) {
      const T* g = self.grad.data();
      const T* px2 = x->val.data();
      const T* pm2 = mean->data();
      const T* pi2 = invstd->data();
      const T* pgm2 = gamma->val.data();
      if (x->needs_grad) x->ensure_grad();
      if (gamma->needs_grad) gamma->ensure_grad();
      if (beta->needs_grad) beta->ensure_grad();
      T* gx = x->needs_grad ? x->grad.data() : nullptr;
      T* ggm = gamma->needs_grad ? gamma->grad.data() : nullptr;
      T* gbt = beta->needs_grad ? beta->grad.data() : nullptr;
      parallel_for(B * C, [&](int64_t bc) {
        const T mu = pm2[bc], is = pi2[bc], gm = pgm2[bc];
        const T* gp = g + bc * HW;
        const T* xp = px2 + bc * HW;
        T sum_dy = 0, sum_dy_xhat = 0;
        for (int64_t i = 0; i < HW; ++i) {
          sum_dy += gp[i];
          sum_dy_xhat += gp[i] * (xp[i] - mu) * is;
        }
        if (ggm) ggm[bc] += sum_dy_xhat;
        if (gbt) gbt[bc] += sum_dy;
        if (gx) {
          const T k = gm * is / T(HW);
          T* dp = gx + bc * HW;
          for (int64_t i = 0; i < HW; ++i) {
            const T xhat = (xp[i] - mu) * is;
            dp[i] += k * (T(HW) * gp[i] - sum_dy - xhat * sum_dy_xhat);
          }
        }
      });
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// softmax / reductions / losses
// ---------------------------------------------------------------------------

template <typename T>
VarPtr<T> softmax_channels(const VarPtr<T>& x) {
  require(x->val.rank() == 4, ErrorCode::ShapeMismatch, "softmax rank");
  const int64_t B = x->val.dim(0), C = x->val.dim(1), HW = x->val.dim(2) * x->val.dim(3);
  auto out = make_node(Tensor<T>(x->val.shape()));
  const T* px = x->val.data();
  T* po = out->val.data();
  parallel_for(B, [&](int64_t b) {
    const T* xb = px + b * C * HW;
    T* ob = po + b * C * HW;
    for (int64_t i = 0; i < HW; ++i) {
      T mx = xb[i];
      for (int64_t c = 1; c < C; ++c) mx = std::max(mx, xb[c * HW + i]);
      T z = 0;
      for (int64_t c = 0; c < C; ++c) {
        const T e = std::exp(xb[c * HW + i] - mx);
        ob[c * HW + i] = e;
        z += e;
      }
      const T iz = T(1) / z;
      for (int64_t c = 0; c < C; ++c) ob[c * HW + i] *= iz;
    }
  });
  out->needs_grad = x->needs_grad;
  if (out->needs_grad) {
    out->parents = {x};
    auto y = out->val;
    out->backfn = [x, y, B, C, HW](VarNode<T>& self) {
      x->ensure_grad();
      const T* g = self.grad.data();
      const T* py = y.data();
      T* gx = x->grad.data();
      parallel_for(B, [&](int64_t b) {
        const T* gb = g + b * C * HW;
        const T* yb = py + b * C * HW;
        T* db = gx + b * C * HW;
        for (int64_t i = 0; i < HW; ++i) {
          T dot = 0;
          for (int64_t c = 0; c < C; ++c) dot += gb[c * HW + i] * yb[c * HW + i];
          for (int64_t c = 0; c < C; ++c)
            db[c * HW + i] += yb[c * HW + i] * (gb[c * HW + i] - dot);
        }
      });
    };
  }
  return out;
}

template <typename T>
VarPtr<T> sum_all(const VarPtr<T>& x) {
  auto out = make_node(Tensor<T>({1}));
  const int64_t n = x->val.numel();
  const T* px = x->val.data();
  T s = 0;
  for (int64_t i = 0; i < n; ++i) s += px[i];
  out->val[0] = s;
  out->needs_grad = x->needs_grad;
  if (out->needs_grad) {
    out->parents = {x};
    out->backfn = [x, n](VarNode<T>& self) {
      x->ensure_grad();
      const T g = self.grad[0];
      T* gx = x->grad.data();
      for (int64_t i = 0; i < n; ++i) gx[i] += g;
    };
  }
  return out;
}

// Mean of |a - b| over every element.
template <typename T>
VarPtr<T> l1_mean(const VarPtr<T>& a, const VarPtr<T>& b) {
  check_same_shape(a->val, b->val, "l1_mean");
  auto out = make_node(Tensor<T>({1}));
  const int64_t n = a->val.numel();
  const T* pa = a->val.data();
  const T* pb = b->val.data();
  T s = 0;
  for (int64_t i = 0; i < n; ++i) s += std::abs(pa[i] - pb[i]);
  out->val[0] = s / T(n);
  out->needs_grad = a->needs_grad || b->needs_grad;
  if (out->needs_grad) {
    out->parents = {a, b};
    out->backfn = [a, b, n](VarNode<T>& self) {
      const T g = self.grad[0] / T(n);
      const T* pa2 = a->val.data();
      const T* pb2 = b->val.data();
      if (a->needs_grad) a->ensure_grad();
      if (b->needs_grad) b->ensure_grad();
      T* ga = a->needs_grad ? a->grad.data() : nullptr;
      T* gb = b->needs_grad ? b->grad.data() : nullptr;
      for (int64_t i = 0; i < n; ++i) {
        const T d = pa2[i] - pb2[i];
        const T sgn = d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0));
        if (ga) ga[i] += g * sgn;
        if (gb) gb[i] -= g * sgn;
      }
    };
  }
  return out;
}

// Scalar combination c1*x1 + c2*x2 + ... of scalar variables.
template <typename T>
VarPtr<T> weighted_sum(const std::vector<std::pair<T, VarPtr<T>>>& terms) {
  auto out = make_node(Tensor<T>({1}));
  T s = 0;
  bool track = false;
  for (const auto& [c, v] : terms) {
    require(v->val.numel() == 1, ErrorCode::ShapeMismatch, "weighted_sum expects scalars");
    s += c * v->val[0];
    track = track || v->needs_grad;
  }
  out->val[0] = s;
  out->needs_grad = track;
  if (track) {
    for (const auto& [c, v] : terms) out->parents.push_back(v);
    auto coeffs = terms;
    out->backfn = [coeffs](VarNode<T>& self) {
      const T g = self.grad[0];
      for (const auto& [c, v] : coeffs) {
        if (!v->needs_grad) continue;
        v->ensure_grad();
        v->grad[0] += c * g;
      }
    };
  }
  return out;
}

// Pixel-wise cross entropy on probabilities: mean over (B,H,W) of
// -log(max(p_true, floor)).
template <typename T>
VarPtr<T> ce_mean(const VarPtr<T>& probs, const Tensor<uint8_t>& labels, T floor_eps) {
  require(probs->val.rank() == 4, ErrorCode::ShapeMismatch, "ce_mean probs rank");
  const int64_t B = probs->val.dim(0), C = probs->val.dim(1);
  const int64_t H = probs->val.dim(2), W = probs->val.dim(3);
  require(labels.rank() == 3 && labels.dim(0) == B && labels.dim(1) == H && labels.dim(2) == W,
          ErrorCode::ShapeMismatch, "ce_mean labels shape");
  const int64_t HW = H * W, N = B * HW;
  auto out = make_node(Tensor<T>({1}));
  const T* pp = probs->val.data();
  const uint8_t* pl = labels.data();
  T s = 0;
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t i = 0; i < HW; ++i) {
      const uint8_t cls = pl[b * HW + i];
      require(cls < C, ErrorCode::DomainError, "ce_mean label out of range");
      const T p = pp[(b * C + cls) * HW + i];
      s += -std::log(std::max(p, floor_eps));
    }
  }
  out->val[0] = s / T(N);
  out->needs_grad = probs->needs_grad;
  if (out->needs_grad) {
    out->parents = {probs};
    auto lab = labels;
    out->backfn = [probs, lab, floor_eps, B, C, HW, N](VarNode<T>& self) {
      probs->ensure_grad();
      const T g = self.grad[0] / T(N);
      const T* pp2 = probs->val.data();
      const uint8_t* pl2 = lab.data();
      T* gp = probs->grad.data();
      for (int64_t b = 0; b < B; ++b) {
        for (int64_t i = 0; i < HW; ++i) {
          const uint8_t cls = pl2[b * HW + i];
          const T p = pp2[(b * C + cls) * HW + i];
          if (p >= floor_eps) gp[(b * C + cls) * HW + i] -= g / p;
        }
      }
    };
  }
  return out;
}

namespace detail {
template <typename T>
void check_probability(const Tensor<T>& p, const char* where) {
  const T* pp = p.data();
  for (int64_t i = 0; i < p.numel(); ++i) {
    require(std::isfinite(double(pp[i])) && pp[i] >= T(0) && pp[i] <= T(1),
            ErrorCode::DomainError, std::string(where) + ": probability outside [0,1]");
  }
}
}  // namespace detail

// mean(-log(max(p, floor))): the "real" half of a discriminator objective,
// and the non-saturating generator objective.
template <typename T>
VarPtr<T> neg_log_mean(const VarPtr<T>& p, T floor_eps) {
  detail::check_probability(p->val, "neg_log_mean");
  auto out = make_node(Tensor<T>({1}));
  const int64_t n = p->val.numel();
  const T* pp = p->val.data();
  T s = 0;
  for (int64_t i = 0; i < n; ++i) s += -std::log(std::max(pp[i], floor_eps));
  out->val[0] = s / T(n);
  out->needs_grad = p->needs_grad;
  if (out->needs_grad) {
    out->parents = {p};
    out->backfn = [p, floor_eps, n](VarNode<T>& self) {
      p->ensure_grad();
      const T g = self.grad[0] / T(n);
      const T* pp2 = p->val.data();
      T* gp = p->grad.data();
      for (int64_t i = 0; i < n; ++i)
        if (pp2[i] >= floor_eps) gp[i] -= g / pp2[i];
    };
  }
  return out;
}

// mean(-log(max(1 - p, floor))): the "fake" half of a discriminator objective.
template <typename T>
VarPtr<T> neg_log1m_mean(const VarPtr<T>& p, T floor_eps) {
  detail::check_probability(p->val, "neg_log1m_mean");
  auto out = make_node(Tensor<T>({1}));
  const int64_t n = p->val.numel();
  const T* pp = p->val.data();
  T s = 0;
  for (int64_t i = 0; i < n; ++i) s += -std::log(std::max(T(1) - pp[i], floor_eps));
  out->val[0] = s / T(n);
  out->needs_grad = p->needs_grad;
  if (out->needs_grad) {
    out->parents = {p};
    out->backfn = [p, floor_eps, n](VarNode<T>& self) {
      p->ensure_grad();
      const T g = self.grad[0] / T(n);
      const T* pp2 = p->val.data();
      T* gp = p->grad.data();
      for (int64_t i = 0; i < n; ++i) {
        const T q = T(1) - pp2[i];
        if (q >= floor_eps) gp[i] += g / q;
      }
    };
  }
  return out;
}

// Literal saturating generator objective mean(log(max(1 - p, floor))),
// kept behind a config switch for fidelity experiments.
template <typename T>
VarPtr<T> log1m_mean(const VarPtr<T>& p, T floor_eps) {
  auto out = neg_log1m_mean(p, floor_eps);
  return scale(out, T(-1));
}

}  // namespace dalace
