#pragma once

// Internal numeric kernels shared by the differentiable ops.

#include <cstddef>
#include <vector>

namespace smn::kernels {

// C[MxN] += A[MxK] * B[KxN]
void gemm_nn(int m, int n, int k, const double* a, const double* b, double* c);
// C[MxN] += A^T * B, with A stored KxM
void gemm_tn(int m, int n, int k, const double* a, const double* b, double* c);
// C[MxN] += A * B^T, with B stored NxK
void gemm_nt(int m, int n, int k, const double* a, const double* b, double* c);

struct ConvGeometry {
  int in_h, in_w, in_c;
  int k_h, k_w, out_c;
  int stride, pad;
  int out_h, out_w;
  int patch() const { return k_h * k_w * in_c; }
  int pixels() const { return out_h * out_w; }
};

// col is pixels() x patch(), HWC input.
void im2col(const ConvGeometry& g, const double* input, double* col);
// Scatter-add of col back into the input gradient.
void col2im(const ConvGeometry& g, const double* col, double* input_grad);

/// One interpolation tap pair along an axis. w1 == 0 means a single-cell tap.
struct Tap {
  int i0 = 0, i1 = 0;
  double w0 = 1.0, w1 = 0.0;
};

// Linear-interpolation taps for continuous coordinate pos on a grid of n cells
// whose centers sit at integer coordinates.
Tap make_tap(double pos, int n);

// n align-corners sample positions spanning [start, end]; n == 1 gives the midpoint.
std::vector<double> sample_positions(double start, double end, int n);

std::vector<Tap> axis_taps(double start, double end, int samples, int cells);

}  // namespace smn::kernels
