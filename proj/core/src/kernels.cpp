#include "kernels.hpp"

#include <algorithm>
#include <cstring>

namespace l2aot::kernels {

namespace {

// Column-block size: keeps a K x JB panel of B inside L2 for the K values
// this project sees (K <= ~600).
constexpr int64_t kColBlock = 192;

void transpose(const double* src, int64_t rows, int64_t cols, double* dst) {
  // dst is [cols x rows]
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
  }
}

}  // namespace

void gemm_nn(int64_t M, int64_t N, int64_t K, const double* A, const double* B, double* C,
             bool accumulate) {
  if (!accumulate) std::fill(C, C + M * N, 0.0);
  for (int64_t j0 = 0; j0 < N; j0 += kColBlock) {
    const int64_t j1 = std::min(N, j0 + kColBlock);
    for (int64_t i = 0; i < M; ++i) {
      double* __restrict__ c = C + i * N;
      const double* a = A + i * K;
      for (int64_t k = 0; k < K; ++k) {
        const double aik = a[k];
        const double* __restrict__ b = B + k * N;
        for (int64_t j = j0; j < j1; ++j) c[j] += aik * b[j];
      }
    }
  }
}

void gemm_nt(int64_t M, int64_t N, int64_t K, const double* A, const double* B, double* C,
             bool accumulate) {
  // B is [N x K]; transpose once and reuse the nn kernel. The copy is O(NK),
  // negligible against O(MNK).
  std::vector<double> bt(static_cast<size_t>(K * N));
  transpose(B, N, K, bt.data());
  gemm_nn(M, N, K, A, bt.data(), C, accumulate);
}

void gemm_tn(int64_t M, int64_t N, int64_t K, const double* A, const double* B, double* C,
             bool accumulate) {
  // A is [K x M]
  std::vector<double> at(static_cast<size_t>(M * K));
  transpose(A, K, M, at.data());
  gemm_nn(M, N, K, at.data(), B, C, accumulate);
}

void im2col(const double* x, const Conv2dGeom& g, double* cols) {
  const int64_t ohw = g.out_h * g.out_w;
  for (int64_t ci = 0; ci < g.in_c; ++ci) {
    const double* xc = x + ci * g.in_h * g.in_w;
    for (int64_t kh = 0; kh < g.kernel; ++kh) {
      for (int64_t kw = 0; kw < g.kernel; ++kw) {
        double* row = cols + ((ci * g.kernel + kh) * g.kernel + kw) * ohw;
        for (int64_t oh = 0; oh < g.out_h; ++oh) {
          const int64_t ih = oh * g.stride - g.padding + kh;
          if (ih < 0 || ih >= g.in_h) {
            std::fill(row + oh * g.out_w, row + (oh + 1) * g.out_w, 0.0);
            continue;
          }
          const double* xr = xc + ih * g.in_w;
          for (int64_t ow = 0; ow < g.out_w; ++ow) {
            const int64_t iw = ow * g.stride - g.padding + kw;
            row[oh * g.out_w + ow] = (iw >= 0 && iw < g.in_w) ? xr[iw] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_acc(const double* cols, const Conv2dGeom& g, double* x) {
  const int64_t ohw = g.out_h * g.out_w;
  for (int64_t ci = 0; ci < g.in_c; ++ci) {
    double* xc = x + ci * g.in_h * g.in_w;
    for (int64_t kh = 0; kh < g.kernel; ++kh) {
      for (int64_t kw = 0; kw < g.kernel; ++kw) {
        const double* row = cols + ((ci * g.kernel + kh) * g.kernel + kw) * ohw;
        for (int64_t oh = 0; oh < g.out_h; ++oh) {
          const int64_t ih = oh * g.stride - g.padding + kh;
          if (ih < 0 || ih >= g.in_h) continue;
          double* xr = xc + ih * g.in_w;
          for (int64_t ow = 0; ow < g.out_w; ++ow) {
            const int64_t iw = ow * g.stride - g.padding + kw;
            if (iw >= 0 && iw < g.in_w) xr[iw] += row[oh * g.out_w + ow];
          }
        }
      }
    }
  }
}

void conv2d_forward(const double* x, const double* w, const double* b, double* y, int64_t n,
                    const Conv2dGeom& g) {
  const int64_t in_sz = g.in_c * g.in_h * g.in_w;
  const int64_t out_sz = g.out_c * g.out_h * g.out_w;
  const int64_t ohw = g.out_h * g.out_w;
  const int64_t krows = g.in_c * g.kernel * g.kernel;
  std::vector<double> cols(static_cast<size_t>(krows * ohw));
  for (int64_t s = 0; s < n; ++s) {
    im2col(x + s * in_sz, g, cols.data());
    double* ys = y + s * out_sz;
    gemm_nn(g.out_c, ohw, krows, w, cols.data(), ys, false);
    if (b) {
      for (int64_t co = 0; co < g.out_c; ++co) {
        double* yc = ys + co * ohw;
        const double bias = b[co];
        for (int64_t i = 0; i < ohw; ++i) yc[i] += bias;
      }
    }
  }
}

void conv2d_backward(const double* x, const double* w, const double* dy, double* dx, double* dw,
                     double* db, int64_t n, const Conv2dGeom& g) {
  const int64_t in_sz = g.in_c * g.in_h * g.in_w;
  const int64_t out_sz = g.out_c * g.out_h * g.out_w;
  const int64_t ohw = g.out_h * g.out_w;
  const int64_t krows = g.in_c * g.kernel * g.kernel;
  std::vector<double> cols(static_cast<size_t>(krows * ohw));
  std::vector<double> dcols;
  if (dx) dcols.resize(static_cast<size_t>(krows * ohw));
  for (int64_t s = 0; s < n; ++s) {
    const double* dys = dy + s * out_sz;
    if (dw) {
      im2col(x + s * in_sz, g, cols.data());
      gemm_nt(g.out_c, krows, ohw, dys, cols.data(), dw, true);
    }
    if (dx) {
      gemm_tn(krows, ohw, g.out_c, w, dys, dcols.data(), false);
      col2im_acc(dcols.data(), g, dx + s * in_sz);
    }
    if (db) {
      for (int64_t co = 0; co < g.out_c; ++co) {
        const double* dyc = dys + co * ohw;
        double acc = 0.0;
        for (int64_t i = 0; i < ohw; ++i) acc += dyc[i];
        db[co] += acc;
      }
    }
  }
}

namespace {

// The conv2d geometry whose adjoint realizes a given transposed conv:
// it maps the deconv OUTPUT [out_c, out_h, out_w] to the deconv INPUT
// spatial grid [in_c, in_h, in_w].
Conv2dGeom adjoint_geom(const ConvT2dGeom& t) {
  Conv2dGeom g;
  g.in_c = t.out_c;
  g.in_h = t.out_h;
  g.in_w = t.out_w;
  g.out_c = t.in_c;
  g.out_h = t.in_h;
  g.out_w = t.in_w;
  g.kernel = t.kernel;
  g.stride = t.stride;
  g.padding = t.padding;
  return g;
}

}  // namespace

void conv_transpose2d_forward(const double* x, const double* w, const double* b, double* y,
                              int64_t n, const ConvT2dGeom& t) {
  const Conv2dGeom g = adjoint_geom(t);
  const int64_t in_sz = t.in_c * t.in_h * t.in_w;
  const int64_t out_sz = t.out_c * t.out_h * t.out_w;
  const int64_t hw = t.in_h * t.in_w;
  const int64_t krows = t.out_c * t.kernel * t.kernel;
  std::vector<double> cols(static_cast<size_t>(krows * hw));
  std::fill(y, y + n * out_sz, 0.0);
  for (int64_t s = 0; s < n; ++s) {
    // cols = w^T [out_c*k*k x in_c] * x_s [in_c x hw]
    gemm_tn(krows, hw, t.in_c, w, x + s * in_sz, cols.data(), false);
    col2im_acc(cols.data(), g, y + s * out_sz);
    if (b) {
      double* ys = y + s * out_sz;
      const int64_t ohw = t.out_h * t.out_w;
      for (int64_t co = 0; co < t.out_c; ++co) {
        double* yc = ys + co * ohw;
        const double bias = b[co];
        for (int64_t i = 0; i < ohw; ++i) yc[i] += bias;
      }
    }
  }
}

void conv_transpose2d_backward(const double* x, const double* w, const double* dy, double* dx,
                               double* dw, double* db, int64_t n, const ConvT2dGeom& t) {
  const Conv2dGeom g = adjoint_geom(t);
  const int64_t in_sz = t.in_c * t.in_h * t.in_w;
  const int64_t out_sz = t.out_c * t.out_h * t.out_w;
  const int64_t hw = t.in_h * t.in_w;
  const int64_t ohw = t.out_h * t.out_w;
  const int64_t krows = t.out_c * t.kernel * t.kernel;
  std::vector<double> cols(static_cast<size_t>(krows * hw));
  for (int64_t s = 0; s < n; ++s) {
    const double* dys = dy + s * out_sz;
    im2col(dys, g, cols.data());
    if (dx) gemm_nn(t.in_c, hw, krows, w, cols.data(), dx + s * in_sz, true);
    if (dw) gemm_nt(t.in_c, krows, hw, x + s * in_sz, cols.data(), dw, true);
    if (db) {
      for (int64_t co = 0; co < t.out_c; ++co) {
        const double* dyc = dys + co * ohw;
        double acc = 0.0;
        for (int64_t i = 0; i < ohw; ++i) acc += dyc[i];
        db[co] += acc;
      }
    }
  }
}

}  // namespace l2aot::kernels
