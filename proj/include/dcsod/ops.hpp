#pragma once

// Primitive forward/backward kernels: convolution (dense + depthwise),
// normalization, pooling, linear, concat, ReLU, tempered softmax. All kernels
// are shape-preserving convs (stride 1, pad floor(k/2)) per the cell contract.
// Gradients accumulate (+=) into destination buffers so a graph node can
// receive contributions from several consumers.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "dcsod/blas.hpp"
#include "dcsod/common.hpp"
#include "dcsod/tensor.hpp"

namespace dcsod {

// im2col for one sample: x (C,H,W) -> col (C*k*k, H*W), zero padding pad.
template <class S>
void im2col(const S* x, int c, int h, int w, int k, int pad, S* col) {
  const int hw = h * w;
  for (int ci = 0; ci < c; ++ci) {
    for (int kh = 0; kh < k; ++kh) {
      for (int kw = 0; kw < k; ++kw) {
        S* dst = col + (size_t(ci) * k * k + size_t(kh) * k + kw) * hw;
        const int ih0 = kh - pad;
        for (int oh = 0; oh < h; ++oh) {
          const int ih = oh + ih0;
          if (ih < 0 || ih >= h) {
            std::fill(dst + oh * w, dst + oh * w + w, S(0));
            continue;
          }
          const S* src = x + (size_t(ci) * h + ih) * w;
          const int iw0 = kw - pad;
          for (int ow = 0; ow < w; ++ow) {
            const int iw = ow + iw0;
            dst[oh * w + ow] = (iw >= 0 && iw < w) ? src[iw] : S(0);
          }
        }
      }
    }
  }
}

// Scatter-add counterpart of im2col.
template <class S>
void col2im_add(const S* col, int c, int h, int w, int k, int pad, S* x) {
  const int hw = h * w;
  for (int ci = 0; ci < c; ++ci) {
    for (int kh = 0; kh < k; ++kh) {
      for (int kw = 0; kw < k; ++kw) {
        const S* src = col + (size_t(ci) * k * k + size_t(kh) * k + kw) * hw;
        const int ih0 = kh - pad;
        const int iw0 = kw - pad;
        for (int oh = 0; oh < h; ++oh) {
          const int ih = oh + ih0;
          if (ih < 0 || ih >= h) continue;
          S* dst = x + (size_t(ci) * h + ih) * w;
          for (int ow = 0; ow < w; ++ow) {
            const int iw = ow + iw0;
            if (iw >= 0 && iw < w) dst[iw] += src[oh * w + ow];
          }
        }
      }
    }
  }
}

// Dense conv: x (N,Ci,H,W), w (Co, Ci*k*k) -> y (N,Co,H,W). 1x1 skips im2col.
template <class S>
void conv2d_forward(const Tensor<S>& x, const Tensor<S>& w, int k, Tensor<S>& y,
                    std::vector<S>& col) {
  const int n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int co = w.dim(0);
  const int hw = h * wd;
  const int pad = k / 2;
  if (w.dim(1) != ci * k * k) throw internal_error("conv2d weight/input channel mismatch");
  if (k == 1) {
    for (int i = 0; i < n; ++i) {
      gemm(false, false, co, hw, ci, S(1), w.data(), ci, x.data() + size_t(i) * ci * hw, hw, S(0),
           y.data() + size_t(i) * co * hw, hw);
    }
    return;
  }
  col.resize(size_t(ci) * k * k * hw);
  for (int i = 0; i < n; ++i) {
    im2col(x.data() + size_t(i) * ci * hw, ci, h, wd, k, pad, col.data());
    gemm(false, false, co, hw, ci * k * k, S(1), w.data(), ci * k * k, col.data(), hw, S(0),
         y.data() + size_t(i) * co * hw, hw);
  }
}

template <class S>
void conv2d_backward(const Tensor<S>& x, const Tensor<S>& w, int k, const Tensor<S>& dy,
                     Tensor<S>* dx, Tensor<S>& dw, std::vector<S>& col) {
  const int n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int co = w.dim(0);
  const int hw = h * wd;
  const int pad = k / 2;
  if (k == 1) {
    for (int i = 0; i < n; ++i) {
      const S* xi = x.data() + size_t(i) * ci * hw;
      const S* dyi = dy.data() + size_t(i) * co * hw;
      gemm(false, true, co, ci, hw, S(1), dyi, hw, xi, hw, S(1), dw.data(), ci);
      if (dx) {
        gemm(true, false, ci, hw, co, S(1), w.data(), ci, dyi, hw, S(1),
             dx->data() + size_t(i) * ci * hw, hw);
      }
    }
    return;
  }
  const int kk = ci * k * k;
  col.resize(size_t(kk) * hw);
  std::vector<S> dcol(size_t(kk) * hw);
  for (int i = 0; i < n; ++i) {
    const S* xi = x.data() + size_t(i) * ci * hw;
    const S* dyi = dy.data() + size_t(i) * co * hw;
    im2col(xi, ci, h, wd, k, pad, col.data());
    gemm(false, true, co, kk, hw, S(1), dyi, hw, col.data(), hw, S(1), dw.data(), kk);
    if (dx) {
      gemm(true, false, kk, hw, co, S(1), w.data(), kk, dyi, hw, S(0), dcol.data(), hw);
      col2im_add(dcol.data(), ci, h, wd, k, pad, dx->data() + size_t(i) * ci * hw);
    }
  }
}

// Depthwise conv: x (N,C,H,W), w (C, k*k) -> y (N,C,H,W).
template <class S>
void depthwise_forward(const Tensor<S>& x, const Tensor<S>& w, int k, Tensor<S>& y) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int pad = k / 2;
  if (w.dim(0) != c) throw internal_error("depthwise weight/channel mismatch");
  for (int i = 0; i < n; ++i) {
    for (int ch = 0; ch < c; ++ch) {
      const S* xi = x.data() + (size_t(i) * c + ch) * h * wd;
      const S* wc = w.data() + size_t(ch) * k * k;
      S* yi = y.data() + (size_t(i) * c + ch) * h * wd;
      for (int oh = 0; oh < h; ++oh) {
        for (int ow = 0; ow < wd; ++ow) {
          S acc = 0;
          for (int kh = 0; kh < k; ++kh) {
            const int ih = oh + kh - pad;
            if (ih < 0 || ih >= h) continue;
            for (int kw = 0; kw < k; ++kw) {
              const int iw = ow + kw - pad;
              if (iw < 0 || iw >= wd) continue;
              acc += wc[kh * k + kw] * xi[ih * wd + iw];
            }
          }
          yi[oh * wd + ow] = acc;
        }
      }
    }
  }
}

template <class S>
void depthwise_backward(const Tensor<S>& x, const Tensor<S>& w, int k, const Tensor<S>& dy,
                        Tensor<S>* dx, Tensor<S>& dw) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int pad = k / 2;
  for (int i = 0; i < n; ++i) {
    for (int ch = 0; ch < c; ++ch) {
      const S* xi = x.data() + (size_t(i) * c + ch) * h * wd;
      const S* dyi = dy.data() + (size_t(i) * c + ch) * h * wd;
      const S* wc = w.data() + size_t(ch) * k * k;
      S* dwc = dw.data() + size_t(ch) * k * k;
      S* dxi = dx ? dx->data() + (size_t(i) * c + ch) * h * wd : nullptr;
      for (int oh = 0; oh < h; ++oh) {
        for (int ow = 0; ow < wd; ++ow) {
          const S g = dyi[oh * wd + ow];
          for (int kh = 0; kh < k; ++kh) {
            const int ih = oh + kh - pad;
            if (ih < 0 || ih >= h) continue;
            for (int kw = 0; kw < k; ++kw) {
              const int iw = ow + kw - pad;
              if (iw < 0 || iw >= wd) continue;
              dwc[kh * k + kw] += g * xi[ih * wd + iw];
              if (dxi) dxi[ih * wd + iw] += g * wc[kh * k + kw];
            }
          }
        }
      }
    }
  }
}

template <class S>
void relu_forward(const Tensor<S>& x, Tensor<S>& y) {
  for (int64_t i = 0; i < x.size(); ++i) y.v[size_t(i)] = x.v[size_t(i)] > S(0) ? x.v[size_t(i)] : S(0);
}

template <class S>
void relu_backward(const Tensor<S>& x, const Tensor<S>& dy, Tensor<S>& dx) {
  for (int64_t i = 0; i < x.size(); ++i)
    if (x.v[size_t(i)] > S(0)) dx.v[size_t(i)] += dy.v[size_t(i)];
}

// Per-channel normalization over (N,H,W) with affine (gamma, beta).
// Statistics come either from the current batch or from frozen buffers; the
// backward pass must match whichever mode produced the forward values.
inline constexpr double kNormEps = 1e-5;

template <class S>
struct NormCache {
  std::vector<S> mean, inv_std;
  bool frozen = false;
};

template <class S>
void channel_norm_forward(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                          const std::vector<S>* frozen_mean, const std::vector<S>* frozen_var,
                          Tensor<S>& y, NormCache<S>& cache) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int64_t m = int64_t(n) * h * w;
  cache.mean.assign(size_t(c), S(0));
  cache.inv_std.assign(size_t(c), S(0));
  cache.frozen = frozen_mean != nullptr;
  for (int ch = 0; ch < c; ++ch) {
    S mu, var;
    if (frozen_mean) {
      mu = (*frozen_mean)[size_t(ch)];
      var = (*frozen_var)[size_t(ch)];
    } else {
      double sum = 0, sq = 0;
      for (int i = 0; i < n; ++i) {
        const S* p = x.data() + (size_t(i) * c + ch) * h * w;
        for (int64_t j = 0; j < int64_t(h) * w; ++j) {
          sum += double(p[j]);
          sq += double(p[j]) * double(p[j]);
        }
      }
      mu = S(sum / double(m));
      var = S(std::max(0.0, sq / double(m) - double(mu) * double(mu)));
    }
    const S istd = S(1.0 / std::sqrt(double(var) + kNormEps));
    cache.mean[size_t(ch)] = mu;
    cache.inv_std[size_t(ch)] = istd;
    const S g = gamma.v[size_t(ch)] * istd;
    const S b = beta.v[size_t(ch)] - mu * g;
    for (int i = 0; i < n; ++i) {
      const S* p = x.data() + (size_t(i) * c + ch) * h * w;
      S* q = y.data() + (size_t(i) * c + ch) * h * w;
      for (int64_t j = 0; j < int64_t(h) * w; ++j) q[j] = g * p[j] + b;
    }
  }
}

template <class S>
void channel_norm_backward(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& dy,
                           const NormCache<S>& cache, Tensor<S>* dx, Tensor<S>& dgamma,
                           Tensor<S>& dbeta) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int64_t m = int64_t(n) * h * w;
  for (int ch = 0; ch < c; ++ch) {
    const S mu = cache.mean[size_t(ch)];
    const S istd = cache.inv_std[size_t(ch)];
    double sum_dy = 0, sum_dy_xhat = 0;
    for (int i = 0; i < n; ++i) {
      const S* px = x.data() + (size_t(i) * c + ch) * h * w;
      const S* pd = dy.data() + (size_t(i) * c + ch) * h * w;
      for (int64_t j = 0; j < int64_t(h) * w; ++j) {
        const double xhat = double(px[j] - mu) * double(istd);
        sum_dy += double(pd[j]);
        sum_dy_xhat += double(pd[j]) * xhat;
      }
    }
    dgamma.v[size_t(ch)] += S(sum_dy_xhat);
    dbeta.v[size_t(ch)] += S(sum_dy);
    if (!dx) continue;
    const S g = gamma.v[size_t(ch)];
    if (cache.frozen) {
      const S scale = g * istd;
      for (int i = 0; i < n; ++i) {
        const S* pd = dy.data() + (size_t(i) * c + ch) * h * w;
        S* pq = dx->data() + (size_t(i) * c + ch) * h * w;
        for (int64_t j = 0; j < int64_t(h) * w; ++j) pq[j] += scale * pd[j];
      }
    } else {
      const double mean_dy = sum_dy / double(m);
      const double mean_dy_xhat = sum_dy_xhat / double(m);
      const S scale = g * istd;
      for (int i = 0; i < n; ++i) {
        const S* px = x.data() + (size_t(i) * c + ch) * h * w;
        const S* pd = dy.data() + (size_t(i) * c + ch) * h * w;
        S* pq = dx->data() + (size_t(i) * c + ch) * h * w;
        for (int64_t j = 0; j < int64_t(h) * w; ++j) {
          const double xhat = double(px[j] - mu) * double(istd);
          pq[j] += S(double(scale) * (double(pd[j]) - mean_dy - xhat * mean_dy_xhat));
        }
      }
    }
  }
}

// 2x2 average pool, stride 2 (spatial dims must be even).
template <class S>
void avgpool2_forward(const Tensor<S>& x, Tensor<S>& y) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 || w % 2) throw internal_error("avgpool2 needs even spatial dims");
  const int oh = h / 2, ow = w / 2;
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      const S* p = x.data() + (size_t(i) * c + ch) * h * w;
      S* q = y.data() + (size_t(i) * c + ch) * oh * ow;
      for (int a = 0; a < oh; ++a)
        for (int b = 0; b < ow; ++b)
          q[a * ow + b] = S(0.25) * (p[(2 * a) * w + 2 * b] + p[(2 * a) * w + 2 * b + 1] +
                                     p[(2 * a + 1) * w + 2 * b] + p[(2 * a + 1) * w + 2 * b + 1]);
    }
}

template <class S>
void avgpool2_backward(const Tensor<S>& x, const Tensor<S>& dy, Tensor<S>& dx) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int oh = h / 2, ow = w / 2;
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      const S* pd = dy.data() + (size_t(i) * c + ch) * oh * ow;
      S* q = dx.data() + (size_t(i) * c + ch) * h * w;
      for (int a = 0; a < oh; ++a)
        for (int b = 0; b < ow; ++b) {
          const S g = S(0.25) * pd[a * ow + b];
          q[(2 * a) * w + 2 * b] += g;
          q[(2 * a) * w + 2 * b + 1] += g;
          q[(2 * a + 1) * w + 2 * b] += g;
          q[(2 * a + 1) * w + 2 * b + 1] += g;
        }
    }
}

// (N,C,H,W) -> (N,C)
template <class S>
void global_avg_pool_forward(const Tensor<S>& x, Tensor<S>& y) {
  const int n = x.dim(0), c = x.dim(1);
  const int64_t hw = int64_t(x.dim(2)) * x.dim(3);
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      const S* p = x.data() + (size_t(i) * c + ch) * hw;
      double acc = 0;
      for (int64_t j = 0; j < hw; ++j) acc += double(p[j]);
      y.v[size_t(i) * c + ch] = S(acc / double(hw));
    }
}

template <class S>
void global_avg_pool_backward(const Tensor<S>& x, const Tensor<S>& dy, Tensor<S>& dx) {
  const int n = x.dim(0), c = x.dim(1);
  const int64_t hw = int64_t(x.dim(2)) * x.dim(3);
  const S inv = S(1.0 / double(hw));
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      const S g = dy.v[size_t(i) * c + ch] * inv;
      S* q = dx.data() + (size_t(i) * c + ch) * hw;
      for (int64_t j = 0; j < hw; ++j) q[j] += g;
    }
}

// x (N,F), w (G,F), b (G) -> y (N,G)
template <class S>
void linear_forward(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b, Tensor<S>& y) {
  const int n = x.dim(0), f = x.dim(1), g = w.dim(0);
  if (w.dim(1) != f) throw internal_error("linear weight/input mismatch");
  gemm(false, true, n, g, f, S(1), x.data(), f, w.data(), f, S(0), y.data(), g);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < g; ++j) y.v[size_t(i) * g + j] += b.v[size_t(j)];
}

template <class S>
void linear_backward(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& dy, Tensor<S>* dx,
                     Tensor<S>& dw, Tensor<S>& db) {
  const int n = x.dim(0), f = x.dim(1), g = w.dim(0);
  gemm(true, false, g, f, n, S(1), dy.data(), g, x.data(), f, S(1), dw.data(), f);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < g; ++j) db.v[size_t(j)] += dy.v[size_t(i) * g + j];
  if (dx) gemm(false, false, n, f, g, S(1), dy.data(), g, w.data(), f, S(1), dx->data(), f);
}

// Channel concat of NCHW tensors sharing (N,H,W).
template <class S>
void concat_forward(const std::vector<const Tensor<S>*>& xs, Tensor<S>& y) {
  const int n = xs[0]->dim(0), h = xs[0]->dim(2), w = xs[0]->dim(3);
  const int64_t hw = int64_t(h) * w;
  int co = y.dim(1);
  for (int i = 0; i < n; ++i) {
    int64_t off = 0;
    for (const Tensor<S>* x : xs) {
      const int c = x->dim(1);
      std::memcpy(y.data() + (size_t(i) * co) * hw + size_t(off) * hw,
                  x->data() + size_t(i) * c * hw, size_t(c) * hw * sizeof(S));
      off += c;
    }
  }
}

template <class S>
void concat_backward(const Tensor<S>& dy, const std::vector<Tensor<S>*>& dxs) {
  const int n = dy.dim(0), co = dy.dim(1);
  const int64_t hw = int64_t(dy.dim(2)) * dy.dim(3);
  for (int i = 0; i < n; ++i) {
    int64_t off = 0;
    for (Tensor<S>* dx : dxs) {
      const int c = dx->dim(1);
      const S* src = dy.data() + (size_t(i) * co + size_t(off)) * hw;
      S* dst = dx->data() + size_t(i) * c * hw;
      for (int64_t j = 0; j < int64_t(c) * hw; ++j) dst[j] += src[j];
      off += c;
    }
  }
}

// Row-wise tempered softmax with max-subtraction: P_i = exp(z_i/T)/sum_j exp(z_j/T).
template <class S>
void tempered_softmax_rows(const S* z, int rows, int cols, double temperature, S* p) {
  if (!(temperature > 0)) throw config_error("tempered_softmax requires T > 0");
  for (int r = 0; r < rows; ++r) {
    const S* zr = z + size_t(r) * cols;
    S* pr = p + size_t(r) * cols;
    double mx = -1e300;
    for (int j = 0; j < cols; ++j) mx = std::max(mx, double(zr[j]));
    double sum = 0;
    for (int j = 0; j < cols; ++j) {
      const double e = std::exp((double(zr[j]) - mx) / temperature);
      pr[j] = S(e);
      sum += e;
    }
    const S inv = S(1.0 / sum);
    for (int j = 0; j < cols; ++j) pr[j] *= inv;
  }
}

template <class S>
Tensor<S> tempered_softmax(const Tensor<S>& logits, double temperature) {
  if (logits.ndim() != 2) throw internal_error("tempered_softmax expects (N,C) logits");
  Tensor<S> p(logits.shape);
  tempered_softmax_rows(logits.data(), logits.dim(0), logits.dim(1), temperature, p.data());
  return p;
}

}  // namespace dcsod
