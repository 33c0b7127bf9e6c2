#pragma once

#include <cstdint>
#include <vector>

// Internal fp64 kernels. All loops have a fixed reduction order so results
// are bit-identical across runs of the same binary.
namespace l2aot::kernels {

// C[M x N] = A[M x K] * B[K x N], row-major. accumulate=false zero-fills first.
void gemm_nn(int64_t M, int64_t N, int64_t K, const double* A, const double* B, double* C,
             bool accumulate);

// C[M x N] = A[M x K] * B[N x K]^T
void gemm_nt(int64_t M, int64_t N, int64_t K, const double* A, const double* B, double* C,
             bool accumulate);

// C[M x N] = A[K x M]^T * B[K x N]
void gemm_tn(int64_t M, int64_t N, int64_t K, const double* A, const double* B, double* C,
             bool accumulate);

struct Conv2dGeom {
  int64_t in_c = 0, in_h = 0, in_w = 0;
  int64_t out_c = 0, out_h = 0, out_w = 0;
  int64_t kernel = 0, stride = 1, padding = 0;
};

// cols is [(in_c*k*k) x (out_h*out_w)] for ONE sample.
void im2col(const double* x, const Conv2dGeom& g, double* cols);
// adjoint scatter-add of im2col; x must be zeroed by the caller.
void col2im_acc(const double* cols, const Conv2dGeom& g, double* x);

// x [N,Ci,H,W], w [Co,Ci,K,K], b [Co] or null -> y [N,Co,OH,OW]
void conv2d_forward(const double* x, const double* w, const double* b, double* y, int64_t n,
                    const Conv2dGeom& g);
// gradients; dx/dw/db may be null to skip. dw/db are accumulated into.
void conv2d_backward(const double* x, const double* w, const double* dy, double* dx, double* dw,
                     double* db, int64_t n, const Conv2dGeom& g);

// Transposed conv: x [N,Ci,H,W], w [Ci,Co,K,K], b [Co] -> y [N,Co,OH,OW]
// with OH = (H-1)*stride - 2*padding + K + output_padding. Exactly the
// adjoint of conv2d_forward in its x argument when geometries match.
struct ConvT2dGeom {
  int64_t in_c = 0, in_h = 0, in_w = 0;
  int64_t out_c = 0, out_h = 0, out_w = 0;
  int64_t kernel = 0, stride = 1, padding = 0, output_padding = 0;
};
void conv_transpose2d_forward(const double* x, const double* w, const double* b, double* y,
                              int64_t n, const ConvT2dGeom& g);
void conv_transpose2d_backward(const double* x, const double* w, const double* dy, double* dx,
                               double* dw, double* db, int64_t n, const ConvT2dGeom& g);

}  // namespace l2aot::kernels
