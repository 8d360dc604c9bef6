#include "kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace smn::kernels {

void gemm_nn(int m, int n, int k, const double* __restrict a, const double* __restrict b,
             double* __restrict c) {
  for (int i = 0; i < m; ++i) {
    double* crow = c + static_cast<std::size_t>(i) * n;
    const double* arow = a + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void gemm_tn(int m, int n, int k, const double* __restrict a, const double* __restrict b,
             double* __restrict c) {
  for (int p = 0; p < k; ++p) {
    const double* arow = a + static_cast<std::size_t>(p) * m;
    const double* brow = b + static_cast<std::size_t>(p) * n;
    for (int i = 0; i < m; ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      double* crow = c + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void gemm_nt(int m, int n, int k, const double* a, const double* b, double* c) {
  // Transpose B to KxN so the inner loop stays contiguous.
  std::vector<double> bt(static_cast<std::size_t>(k) * n);
  for (int j = 0; j < n; ++j)
    for (int p = 0; p < k; ++p) bt[static_cast<std::size_t>(p) * n + j] = b[static_cast<std::size_t>(j) * k + p];
  gemm_nn(m, n, k, a, bt.data(), c);
}

void im2col(const ConvGeometry& g, const double* input, double* col) {
  const int patch = g.patch();
  for (int oy = 0; oy < g.out_h; ++oy) {
    for (int ox = 0; ox < g.out_w; ++ox) {
      double* dst = col + (static_cast<std::size_t>(oy) * g.out_w + ox) * patch;
      for (int ky = 0; ky < g.k_h; ++ky) {
        const int iy = oy * g.stride - g.pad + ky;
        for (int kx = 0; kx < g.k_w; ++kx) {
          const int ix = ox * g.stride - g.pad + kx;
          double* d = dst + (ky * g.k_w + kx) * g.in_c;
          if (iy < 0 || iy >= g.in_h || ix < 0 || ix >= g.in_w) {
            std::fill(d, d + g.in_c, 0.0);
          } else {
            std::memcpy(d, input + (static_cast<std::size_t>(iy) * g.in_w + ix) * g.in_c,
                        sizeof(double) * g.in_c);
          }
        }
      }
    }
  }
}

void col2im(const ConvGeometry& g, const double* col, double* input_grad) {
  const int patch = g.patch();
  for (int oy = 0; oy < g.out_h; ++oy) {
    for (int ox = 0; ox < g.out_w; ++ox) {
      const double* src = col + (static_cast<std::size_t>(oy) * g.out_w + ox) * patch;
      for (int ky = 0; ky < g.k_h; ++ky) {
        const int iy = oy * g.stride - g.pad + ky;
        if (iy < 0 || iy >= g.in_h) continue;
        for (int kx = 0; kx < g.k_w; ++kx) {
          const int ix = ox * g.stride - g.pad + kx;
          if (ix < 0 || ix >= g.in_w) continue;
          const double* s = src + (ky * g.k_w + kx) * g.in_c;
          double* d = input_grad + (static_cast<std::size_t>(iy) * g.in_w + ix) * g.in_c;
          for (int c = 0; c < g.in_c; ++c) d[c] += s[c];
        }
      }
    }
  }
}

Tap make_tap(double pos, int n) {
  Tap t;
  if (n <= 1 || pos <= 0.0) {
    t.i0 = t.i1 = 0;
    return t;
  }
  const double last = n - 1;
  if (pos >= last) {
    t.i0 = t.i1 = n - 1;
    return t;
  }
  const double fl = std::floor(pos);
  const double frac = pos - fl;
  t.i0 = static_cast<int>(fl);
  if (frac == 0.0) {
    t.i1 = t.i0;
    return t;
  }
  t.i1 = t.i0 + 1;
  t.w0 = 1.0 - frac;
  t.w1 = frac;
  return t;
}

std::vector<double> sample_positions(double start, double end, int n) {
  std::vector<double> pos(n);
  if (n == 1) {
    pos[0] = 0.5 * (start + end);
    return pos;
  }
  const double step = (end - start) / (n - 1);
  for (int i = 0; i < n; ++i) pos[i] = start + step * i;
  pos[n - 1] = end;
  return pos;
}

std::vector<Tap> axis_taps(double start, double end, int samples, int cells) {
  std::vector<Tap> taps;
  taps.reserve(samples);
  for (double p : sample_positions(start, end, samples)) taps.push_back(make_tap(p, cells));
  return taps;
}

}  // namespace smn::kernels
