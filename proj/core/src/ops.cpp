#include "smn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>

#include "kernels.hpp"
#include "smn/error.hpp"

namespace smn {

namespace k = kernels;

namespace {

Tape& tape_of(const Var& v) {
  if (!v.valid()) throw Error("operation on an unbound Var");
  return *v.tape();
}

void require_rank(const Var& v, int rank, const char* op, const char* what) {
  if (v.value().rank() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                     ", got " + shape_str(v.shape()));
  }
}

void require_dim(const char* op, const char* what, int axis, int got, int expected) {
  if (got != expected) {
    throw ShapeError(std::string(op) + ": dimension " + std::to_string(axis) + " of " + what +
                     " is " + std::to_string(got) + ", expected " + std::to_string(expected));
  }
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (sa.size() != sb.size()) {
      throw ShapeError(std::string(op) + ": rank mismatch " + shape_str(sa) + " vs " +
                       shape_str(sb));
    }
    for (std::size_t i = 0; i < sa.size(); ++i) {
      if (sa[i] != sb[i]) require_dim(op, "second operand", static_cast<int>(i), sb[i], sa[i]);
    }
  }
}

void add_into(Tensor* dst, const Tensor& src) {
  if (!dst) return;
  double* d = dst->data();
  const double* s = src.data();
  for (std::size_t i = 0; i < src.size(); ++i) d[i] += s[i];
}

void check_roi_box(const BoundingBox& box, int h, int w, const char* op, bool allow_flat) {
  constexpr double kSlack = 1e-9;
  const bool inside = box.x1 >= -kSlack && box.y1 >= -kSlack && box.x2 <= (w - 1) + kSlack &&
                      box.y2 <= (h - 1) + kSlack;
  if (!inside) throw ValueError(std::string(op) + ": box outside map bounds");
  const bool ok = allow_flat ? (box.x2 >= box.x1 && box.y2 >= box.y1)
                             : (box.x2 > box.x1 && box.y2 > box.y1);
  if (!ok) throw ValueError(std::string(op) + ": degenerate (zero-area) box");
}

// out[i,j,:] = sum over taps of map values.
Tensor bilinear_gather(const Tensor& map, const std::vector<k::Tap>& ty,
                       const std::vector<k::Tap>& tx) {
  const int w = map.dim(1), c = map.dim(2);
  const int oh = static_cast<int>(ty.size()), ow = static_cast<int>(tx.size());
  Tensor out({oh, ow, c}, 0.0);
  for (int i = 0; i < oh; ++i) {
    const k::Tap& a = ty[i];
    for (int j = 0; j < ow; ++j) {
      const k::Tap& b = tx[j];
      double* o = &out.at(i, j, 0);
      const int ys[2] = {a.i0, a.i1};
      const double wy[2] = {a.w0, a.w1};
      const int xs[2] = {b.i0, b.i1};
      const double wx[2] = {b.w0, b.w1};
      for (int u = 0; u < 2; ++u) {
        if (wy[u] == 0.0) continue;
        for (int v = 0; v < 2; ++v) {
          if (wx[v] == 0.0) continue;
          const double wt = wy[u] * wx[v];
          const double* src = map.data() + (static_cast<std::size_t>(ys[u]) * w + xs[v]) * c;
          for (int ch = 0; ch < c; ++ch) o[ch] += wt * src[ch];
        }
      }
    }
  }
  return out;
}

// Adjoint of bilinear_gather: dst[cell] += sum of tap weights * patch.
void bilinear_scatter(const Tensor& patch, const std::vector<k::Tap>& ty,
                      const std::vector<k::Tap>& tx, Tensor& dst) {
  const int w = dst.dim(1), c = dst.dim(2);
  for (std::size_t i = 0; i < ty.size(); ++i) {
    const k::Tap& a = ty[i];
    for (std::size_t j = 0; j < tx.size(); ++j) {
      const k::Tap& b = tx[j];
      const double* p = patch.data() + (i * tx.size() + j) * c;
      const int ys[2] = {a.i0, a.i1};
      const double wy[2] = {a.w0, a.w1};
      const int xs[2] = {b.i0, b.i1};
      const double wx[2] = {b.w0, b.w1};
      for (int u = 0; u < 2; ++u) {
        if (wy[u] == 0.0) continue;
        for (int v = 0; v < 2; ++v) {
          if (wx[v] == 0.0) continue;
          const double wt = wy[u] * wx[v];
          double* d = dst.data() + (static_cast<std::size_t>(ys[u]) * w + xs[v]) * c;
          for (int ch = 0; ch < c; ++ch) d[ch] += wt * p[ch];
        }
      }
    }
  }
}

// Total tap weight landing on each grid index along one axis.
std::vector<double> axis_weight(const std::vector<k::Tap>& taps, int n) {
  std::vector<double> wsum(n, 0.0);
  for (const auto& t : taps) {
    if (t.w0 != 0.0) wsum[t.i0] += t.w0;
    if (t.w1 != 0.0) wsum[t.i1] += t.w1;
  }
  return wsum;
}

struct WriteFootprint {
  std::vector<k::Tap> ty, tx;
  std::vector<double> wy, wx;
  bool touched(int y, int x) const { return wy[y] > 0.0 && wx[x] > 0.0; }
  double weight(int y, int x) const { return wy[y] * wx[x]; }
};

WriteFootprint footprint(const BoundingBox& box, int ph, int pw, int h, int w) {
  WriteFootprint f;
  f.ty = k::axis_taps(box.y1, box.y2, ph, h);
  f.tx = k::axis_taps(box.x1, box.x2, pw, w);
  f.wy = axis_weight(f.ty, h);
  f.wx = axis_weight(f.tx, w);
  return f;
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Tensor softmax_rows(const Tensor& logits) {
  if (logits.rank() == 0 || logits.empty()) return logits;
  const int kdim = logits.dim(-1);
  const std::size_t rows = logits.size() / kdim;
  Tensor out(logits.shape(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = logits.data() + r * kdim;
    double* y = out.data() + r * kdim;
    double m = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < kdim; ++i) m = std::max(m, x[i]);
    double s = 0.0;
    for (int i = 0; i < kdim; ++i) {
      y[i] = std::exp(x[i] - m);
      s += y[i];
    }
    for (int i = 0; i < kdim; ++i) y[i] /= s;
  }
  return out;
}

Var conv2d(const Var& input, const Var& weight, const Var& bias, int stride, int pad) {
  static constexpr const char* op = "conv2d";
  require_rank(input, 3, op, "input");
  require_rank(weight, 4, op, "weight");
  require_rank(bias, 1, op, "bias");
  const Tensor& x = input.value();
  const Tensor& wt = weight.value();
  k::ConvGeometry g{};
  g.in_h = x.dim(0);
  g.in_w = x.dim(1);
  g.in_c = x.dim(2);
  g.k_h = wt.dim(0);
  g.k_w = wt.dim(1);
  g.out_c = wt.dim(3);
  g.stride = stride;
  g.pad = pad;
  require_dim(op, "weight", 2, wt.dim(2), g.in_c);
  require_dim(op, "bias", 0, bias.value().dim(0), g.out_c);
  if (g.k_h % 2 == 0 || g.k_w % 2 == 0) throw ShapeError("conv2d: kernel extents must be odd");
  if (stride < 1 || pad < 0) throw ShapeError("conv2d: stride must be >= 1 and pad >= 0");
  g.out_h = (g.in_h + 2 * pad - g.k_h) / stride + 1;
  g.out_w = (g.in_w + 2 * pad - g.k_w) / stride + 1;
  if (g.out_h < 1 || g.out_w < 1) throw ShapeError("conv2d: output would be empty");

  const bool direct = g.k_h == 1 && g.k_w == 1 && stride == 1 && pad == 0;
  auto col = std::make_shared<std::vector<double>>();
  const double* col_ptr = x.data();
  if (!direct) {
    col->resize(static_cast<std::size_t>(g.pixels()) * g.patch());
    k::im2col(g, x.data(), col->data());
    col_ptr = col->data();
  }
  Tensor out({g.out_h, g.out_w, g.out_c}, 0.0);
  const double* b = bias.value().data();
  for (int p = 0; p < g.pixels(); ++p)
    std::copy(b, b + g.out_c, out.data() + static_cast<std::size_t>(p) * g.out_c);
  k::gemm_nn(g.pixels(), g.out_c, g.patch(), col_ptr, wt.data(), out.data());

  Tape& tape = tape_of(input);
  return tape.record(std::move(out), {input, weight, bias},
                     [=, &tape](const Tensor& gout, const Tensor&) {
                       const double* cols = direct ? input.value().data() : col->data();
                       if (Tensor* gw = tape.grad_buffer(weight)) {
                         k::gemm_tn(g.patch(), g.out_c, g.pixels(), cols, gout.data(), gw->data());
                       }
                       if (Tensor* gb = tape.grad_buffer(bias)) {
                         for (int p = 0; p < g.pixels(); ++p)
                           for (int c = 0; c < g.out_c; ++c)
                             (*gb)[c] += gout[static_cast<std::size_t>(p) * g.out_c + c];
                       }
                       if (Tensor* gi = tape.grad_buffer(input)) {
                         if (direct) {
                           k::gemm_nt(g.pixels(), g.patch(), g.out_c, gout.data(),
                                      weight.value().data(), gi->data());
                         } else {
                           std::vector<double> dcol(static_cast<std::size_t>(g.pixels()) * g.patch(), 0.0);
                           k::gemm_nt(g.pixels(), g.patch(), g.out_c, gout.data(),
                                      weight.value().data(), dcol.data());
                           k::col2im(g, dcol.data(), gi->data());
                         }
                       }
                     });
}

Var fully_connected(const Var& input, const Var& weight, const Var& bias) {
  static constexpr const char* op = "fully_connected";
  const Tensor& x = input.value();
  if (x.rank() != 1 && x.rank() != 2) {
    throw ShapeError("fully_connected: input must be [Din] or [N x Din], got " + shape_str(x.shape()));
  }
  require_rank(weight, 2, op, "weight");
  require_rank(bias, 1, op, "bias");
  const int n = x.rank() == 1 ? 1 : x.dim(0);
  const int din = x.dim(-1);
  const int dout = weight.value().dim(1);
  require_dim(op, "weight", 0, weight.value().dim(0), din);
  require_dim(op, "bias", 0, bias.value().dim(0), dout);

  Shape out_shape = x.rank() == 1 ? Shape{dout} : Shape{n, dout};
  Tensor out(out_shape, 0.0);
  for (int r = 0; r < n; ++r)
    std::copy(bias.value().data(), bias.value().data() + dout,
              out.data() + static_cast<std::size_t>(r) * dout);
  k::gemm_nn(n, dout, din, x.data(), weight.value().data(), out.data());

  Tape& tape = tape_of(input);
  return tape.record(std::move(out), {input, weight, bias},
                     [=, &tape](const Tensor& gout, const Tensor&) {
                       if (Tensor* gi = tape.grad_buffer(input)) {
                         k::gemm_nt(n, din, dout, gout.data(), weight.value().data(), gi->data());
                       }
                       if (Tensor* gw = tape.grad_buffer(weight)) {
                         k::gemm_tn(din, dout, n, input.value().data(), gout.data(), gw->data());
                       }
                       if (Tensor* gb = tape.grad_buffer(bias)) {
                         for (int r = 0; r < n; ++r)
                           for (int c = 0; c < dout; ++c)
                             (*gb)[c] += gout[static_cast<std::size_t>(r) * dout + c];
                       }
                     });
}

Var activation(const Var& x, Activation kind) {
  const Tensor& in = x.value();
  Tensor out;
  switch (kind) {
    case Activation::relu:
      out = in;
      for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
      break;
    case Activation::sigmoid:
      out = in;
      for (double& v : out.values()) v = stable_sigmoid(v);
      break;
    case Activation::tanh:
      out = in;
      for (double& v : out.values()) v = std::tanh(v);
      break;
    case Activation::softmax:
      out = softmax_rows(in);
      break;
  }
  Tape& tape = tape_of(x);
  return tape.record(std::move(out), {x}, [x, kind, &tape](const Tensor& g, const Tensor& y) {
    Tensor* gi = tape.grad_buffer(x);
    if (!gi) return;
    double* d = gi->data();
    const std::size_t n = g.size();
    switch (kind) {
      case Activation::relu:
        for (std::size_t i = 0; i < n; ++i)
          if (y[i] > 0.0) d[i] += g[i];
        break;
      case Activation::sigmoid:
        for (std::size_t i = 0; i < n; ++i) d[i] += g[i] * y[i] * (1.0 - y[i]);
        break;
      case Activation::tanh:
        for (std::size_t i = 0; i < n; ++i) d[i] += g[i] * (1.0 - y[i] * y[i]);
        break;
      case Activation::softmax: {
        const int kdim = y.dim(-1);
        for (std::size_t r = 0; r < n / kdim; ++r) {
          const std::size_t o = r * kdim;
          double dot = 0.0;
          for (int i = 0; i < kdim; ++i) dot += g[o + i] * y[o + i];
          for (int i = 0; i < kdim; ++i) d[o + i] += y[o + i] * (g[o + i] - dot);
        }
        break;
      }
    }
  });
}

Var bilinear_resize(const Var& input, int out_h, int out_w) {
  require_rank(input, 3, "bilinear_resize", "input");
  if (out_h < 1 || out_w < 1) throw ShapeError("bilinear_resize: output extents must be >= 1");
  const int h = input.value().dim(0), w = input.value().dim(1);
  auto ty = k::axis_taps(0.0, h - 1.0, out_h, h);
  auto tx = k::axis_taps(0.0, w - 1.0, out_w, w);
  if (out_h == 1) ty.assign(1, k::make_tap(0.5 * (h - 1), h));
  if (out_w == 1) tx.assign(1, k::make_tap(0.5 * (w - 1), w));
  Tensor out = bilinear_gather(input.value(), ty, tx);
  Tape& tape = tape_of(input);
  return tape.record(std::move(out), {input}, [=, &tape](const Tensor& g, const Tensor&) {
    if (Tensor* gi = tape.grad_buffer(input)) bilinear_scatter(g, ty, tx, *gi);
  });
}

Var roi_read(const Var& map, const BoundingBox& box, int out_h, int out_w) {
  require_rank(map, 3, "roi_read", "map");
  if (out_h < 1 || out_w < 1) throw ShapeError("roi_read: output extents must be >= 1");
  const int h = map.value().dim(0), w = map.value().dim(1);
  check_roi_box(box, h, w, "roi_read", false);
  auto ty = k::axis_taps(box.y1, box.y2, out_h, h);
  auto tx = k::axis_taps(box.x1, box.x2, out_w, w);
  Tensor out = bilinear_gather(map.value(), ty, tx);
  Tape& tape = tape_of(map);
  return tape.record(std::move(out), {map}, [=, &tape](const Tensor& g, const Tensor&) {
    if (Tensor* gm = tape.grad_buffer(map)) bilinear_scatter(g, ty, tx, *gm);
  });
}

Var roi_write(const Var& map, const BoundingBox& box, const Var& patch) {
  static constexpr const char* op = "roi_write";
  require_rank(map, 3, op, "map");
  require_rank(patch, 3, op, "patch");
  const Tensor& m = map.value();
  const int h = m.dim(0), w = m.dim(1), c = m.dim(2);
  require_dim(op, "patch", 2, patch.value().dim(2), c);
  check_roi_box(box, h, w, op, false);
  const int ph = patch.value().dim(0), pw = patch.value().dim(1);
  auto fp = std::make_shared<WriteFootprint>(footprint(box, ph, pw, h, w));

  Tensor acc({h, w, c}, 0.0);
  bilinear_scatter(patch.value(), fp->ty, fp->tx, acc);
  Tensor out = m;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!fp->touched(y, x)) continue;
      const double inv = 1.0 / fp->weight(y, x);
      for (int ch = 0; ch < c; ++ch) out.at(y, x, ch) = acc.at(y, x, ch) * inv;
    }

  Tape& tape = tape_of(map);
  return tape.record(std::move(out), {map, patch}, [=, &tape](const Tensor& g, const Tensor&) {
    Tensor scaled({h, w, c}, 0.0);
    Tensor* gm = tape.grad_buffer(map);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        if (fp->touched(y, x)) {
          const double inv = 1.0 / fp->weight(y, x);
          for (int ch = 0; ch < c; ++ch) scaled.at(y, x, ch) = g.at(y, x, ch) * inv;
        } else if (gm) {
          for (int ch = 0; ch < c; ++ch) gm->at(y, x, ch) += g.at(y, x, ch);
        }
      }
    if (Tensor* gp = tape.grad_buffer(patch)) add_into(gp, bilinear_gather(scaled, fp->ty, fp->tx));
  });
}

Var roi_gated_write(const Var& map, const BoundingBox& box, const Var& gate,
                    const Var& candidate) {
  static constexpr const char* op = "roi_gated_write";
  require_rank(map, 3, op, "map");
  require_rank(gate, 3, op, "gate");
  require_same_shape(gate, candidate, op);
  const Tensor& m = map.value();
  const int h = m.dim(0), w = m.dim(1), c = m.dim(2);
  require_dim(op, "gate", 2, gate.value().dim(2), c);
  check_roi_box(box, h, w, op, false);
  const int ph = gate.value().dim(0), pw = gate.value().dim(1);
  auto fp = std::make_shared<WriteFootprint>(footprint(box, ph, pw, h, w));

  const Tensor& z = gate.value();
  const Tensor& cand = candidate.value();
  Tensor zc = z;
  for (std::size_t i = 0; i < zc.size(); ++i) zc[i] *= cand[i];
  auto zsum = std::make_shared<Tensor>(Shape{h, w, c}, 0.0);
  Tensor qsum({h, w, c}, 0.0);
  bilinear_scatter(z, fp->ty, fp->tx, *zsum);
  bilinear_scatter(zc, fp->ty, fp->tx, qsum);

  Tensor out = m;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!fp->touched(y, x)) continue;
      const double inv = 1.0 / fp->weight(y, x);
      for (int ch = 0; ch < c; ++ch) {
        double& zz = zsum->at(y, x, ch);
        zz *= inv;
        out.at(y, x, ch) = m.at(y, x, ch) * (1.0 - zz) + qsum.at(y, x, ch) * inv;
      }
    }

  Tape& tape = tape_of(map);
  return tape.record(
      std::move(out), {map, gate, candidate}, [=, &tape](const Tensor& g, const Tensor&) {
        const Tensor& old = map.value();
        Tensor* gm = tape.grad_buffer(map);
        Tensor scaled({h, w, c}, 0.0);
        Tensor scaled_old({h, w, c}, 0.0);
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x) {
            if (fp->touched(y, x)) {
              const double inv = 1.0 / fp->weight(y, x);
              for (int ch = 0; ch < c; ++ch) {
                const double gv = g.at(y, x, ch);
                scaled.at(y, x, ch) = gv * inv;
                scaled_old.at(y, x, ch) = gv * inv * old.at(y, x, ch);
                if (gm) gm->at(y, x, ch) += gv * (1.0 - zsum->at(y, x, ch));
              }
            } else if (gm) {
              for (int ch = 0; ch < c; ++ch) gm->at(y, x, ch) += g.at(y, x, ch);
            }
          }
        Tensor gs = bilinear_gather(scaled, fp->ty, fp->tx);
        Tensor* gz = tape.grad_buffer(gate);
        Tensor* gc = tape.grad_buffer(candidate);
        if (gz) {
          Tensor gso = bilinear_gather(scaled_old, fp->ty, fp->tx);
          const Tensor& cv = candidate.value();
          for (std::size_t i = 0; i < gs.size(); ++i) (*gz)[i] += cv[i] * gs[i] - gso[i];
        }
        if (gc) {
          const Tensor& zv = gate.value();
          for (std::size_t i = 0; i < gs.size(); ++i) (*gc)[i] += zv[i] * gs[i];
        }
      });
}

Var roi_max_pool(const Var& map, std::span<const BoundingBox> boxes, int out_h, int out_w,
                 int samples) {
  static constexpr const char* op = "roi_max_pool";
  require_rank(map, 3, op, "map");
  if (out_h < 1 || out_w < 1 || samples < 1) throw ShapeError("roi_max_pool: bad pooling extents");
  const Tensor& m = map.value();
  const int h = m.dim(0), w = m.dim(1), c = m.dim(2);
  const int r = static_cast<int>(boxes.size());
  for (const auto& b : boxes) check_roi_box(b, h, w, op, true);

  // Per box: taps for every (bin, sample) along each axis.
  auto taps_y = std::make_shared<std::vector<k::Tap>>();
  auto taps_x = std::make_shared<std::vector<k::Tap>>();
  taps_y->reserve(static_cast<std::size_t>(r) * out_h * samples);
  taps_x->reserve(static_cast<std::size_t>(r) * out_w * samples);
  for (const auto& b : boxes) {
    const double bh = (b.y2 - b.y1) / out_h, bw = (b.x2 - b.x1) / out_w;
    for (int p = 0; p < out_h; ++p)
      for (int s = 0; s < samples; ++s)
        taps_y->push_back(k::make_tap(b.y1 + bh * (p + (s + 0.5) / samples), h));
    for (int p = 0; p < out_w; ++p)
      for (int s = 0; s < samples; ++s)
        taps_x->push_back(k::make_tap(b.x1 + bw * (p + (s + 0.5) / samples), w));
  }

  Tensor out({r, out_h, out_w, c}, 0.0);
  auto arg = std::make_shared<std::vector<std::uint16_t>>(out.size(), 0);
  std::vector<double> val(c);
  const int ss = samples * samples;
  for (int ri = 0; ri < r; ++ri) {
    for (int py = 0; py < out_h; ++py) {
      for (int px = 0; px < out_w; ++px) {
        const std::size_t obase = ((static_cast<std::size_t>(ri) * out_h + py) * out_w + px) * c;
        for (int si = 0; si < ss; ++si) {
          const k::Tap& a = (*taps_y)[(static_cast<std::size_t>(ri) * out_h + py) * samples + si / samples];
          const k::Tap& bt = (*taps_x)[(static_cast<std::size_t>(ri) * out_w + px) * samples + si % samples];
          std::fill(val.begin(), val.end(), 0.0);
          const int ys[2] = {a.i0, a.i1};
          const double wy[2] = {a.w0, a.w1};
          const int xs[2] = {bt.i0, bt.i1};
          const double wx[2] = {bt.w0, bt.w1};
          for (int u = 0; u < 2; ++u) {
            if (wy[u] == 0.0) continue;
            for (int v = 0; v < 2; ++v) {
              if (wx[v] == 0.0) continue;
              const double wt = wy[u] * wx[v];
              const double* src = m.data() + (static_cast<std::size_t>(ys[u]) * w + xs[v]) * c;
              for (int ch = 0; ch < c; ++ch) val[ch] += wt * src[ch];
            }
          }
          for (int ch = 0; ch < c; ++ch) {
            if (si == 0 || val[ch] > out[obase + ch]) {
              out[obase + ch] = val[ch];
              (*arg)[obase + ch] = static_cast<std::uint16_t>(si);
            }
          }
        }
      }
    }
  }

  Tape& tape = tape_of(map);
  return tape.record(std::move(out), {map}, [=, &tape](const Tensor& g, const Tensor&) {
    Tensor* gm = tape.grad_buffer(map);
    if (!gm) return;
    for (int ri = 0; ri < r; ++ri)
      for (int py = 0; py < out_h; ++py)
        for (int px = 0; px < out_w; ++px) {
          const std::size_t obase = ((static_cast<std::size_t>(ri) * out_h + py) * out_w + px) * c;
          for (int ch = 0; ch < c; ++ch) {
            const double gv = g[obase + ch];
            if (gv == 0.0) continue;
            const int si = (*arg)[obase + ch];
            const k::Tap& a = (*taps_y)[(static_cast<std::size_t>(ri) * out_h + py) * samples + si / samples];
            const k::Tap& bt = (*taps_x)[(static_cast<std::size_t>(ri) * out_w + px) * samples + si % samples];
            const int ys[2] = {a.i0, a.i1};
            const double wy[2] = {a.w0, a.w1};
            const int xs[2] = {bt.i0, bt.i1};
            const double wx[2] = {bt.w0, bt.w1};
            for (int u = 0; u < 2; ++u) {
              if (wy[u] == 0.0) continue;
              for (int v = 0; v < 2; ++v) {
                if (wx[v] == 0.0) continue;
                gm->at(ys[u], xs[v], ch) += wy[u] * wx[v] * gv;
              }
            }
          }
        }
  });
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  Tape& tape = tape_of(a);
  return tape.record(std::move(out), {a, b}, [a, b, &tape](const Tensor& g, const Tensor&) {
    add_into(tape.grad_buffer(a), g);
    add_into(tape.grad_buffer(b), g);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  Tape& tape = tape_of(a);
  return tape.record(std::move(out), {a, b}, [a, b, &tape](const Tensor& g, const Tensor&) {
    add_into(tape.grad_buffer(a), g);
    if (Tensor* gb = tape.grad_buffer(b))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  Tape& tape = tape_of(a);
  return tape.record(std::move(out), {a, b}, [a, b, &tape](const Tensor& g, const Tensor&) {
    if (Tensor* ga = tape.grad_buffer(a))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * b.value()[i];
    if (Tensor* gb = tape.grad_buffer(b))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * a.value()[i];
  });
}

Var scale(const Var& x, double s) {
  Tensor out = x.value();
  for (double& v : out.values()) v *= s;
  Tape& tape = tape_of(x);
  return tape.record(std::move(out), {x}, [x, s, &tape](const Tensor& g, const Tensor&) {
    if (Tensor* gi = tape.grad_buffer(x))
      for (std::size_t i = 0; i < g.size(); ++i) (*gi)[i] += s * g[i];
  });
}

Var one_minus(const Var& x) {
  Tensor out = x.value();
  for (double& v : out.values()) v = 1.0 - v;
  Tape& tape = tape_of(x);
  return tape.record(std::move(out), {x}, [x, &tape](const Tensor& g, const Tensor&) {
    if (Tensor* gi = tape.grad_buffer(x))
      for (std::size_t i = 0; i < g.size(); ++i) (*gi)[i] -= g[i];
  });
}

Var concat_last(const Var& a, const Var& b) {
  const Tensor& ta = a.value();
  const Tensor& tb = b.value();
  if (ta.rank() != tb.rank() || ta.rank() == 0) {
    throw ShapeError("concat_last: rank mismatch " + shape_str(ta.shape()) + " vs " +
                     shape_str(tb.shape()));
  }
  for (int i = 0; i + 1 < ta.rank(); ++i) require_dim("concat_last", "second operand", i, tb.dim(i), ta.dim(i));
  const int ka = ta.dim(-1), kb = tb.dim(-1);
  const std::size_t rows = ta.size() / std::max(ka, 1);
  Shape shape = ta.shape();
  shape.back() = ka + kb;
  Tensor out(shape, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy(ta.data() + r * ka, ta.data() + (r + 1) * ka, out.data() + r * (ka + kb));
    std::copy(tb.data() + r * kb, tb.data() + (r + 1) * kb, out.data() + r * (ka + kb) + ka);
  }
  Tape& tape = tape_of(a);
  return tape.record(std::move(out), {a, b}, [=, &tape](const Tensor& g, const Tensor&) {
    Tensor* ga = tape.grad_buffer(a);
    Tensor* gb = tape.grad_buffer(b);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* src = g.data() + r * (ka + kb);
      if (ga)
        for (int i = 0; i < ka; ++i) (*ga)[r * ka + i] += src[i];
      if (gb)
        for (int i = 0; i < kb; ++i) (*gb)[r * kb + i] += src[ka + i];
    }
  });
}

Var tile_hw(const Var& vec, int h, int w) {
  require_rank(vec, 1, "tile_hw", "vector");
  const int kdim = vec.value().dim(0);
  Tensor out({h, w, kdim}, 0.0);
  for (int p = 0; p < h * w; ++p)
    std::copy(vec.value().data(), vec.value().data() + kdim, out.data() + static_cast<std::size_t>(p) * kdim);
  Tape& tape = tape_of(vec);
  return tape.record(std::move(out), {vec}, [=, &tape](const Tensor& g, const Tensor&) {
    if (Tensor* gv = tape.grad_buffer(vec))
      for (int p = 0; p < h * w; ++p)
        for (int i = 0; i < kdim; ++i) (*gv)[i] += g[static_cast<std::size_t>(p) * kdim + i];
  });
}

Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  Tape& tape = tape_of(x);
  return tape.record(std::move(out), {x}, [x, &tape](const Tensor& g, const Tensor&) {
    add_into(tape.grad_buffer(x), g);
  });
}

Var gather_rows(const Var& x, std::span<const int> rows) {
  const Tensor& t = x.value();
  if (t.rank() < 1) throw ShapeError("gather_rows: need rank >= 1");
  const int n = t.dim(0);
  const std::size_t width = n > 0 ? t.size() / n : 0;
  Shape shape = t.shape();
  shape[0] = static_cast<int>(rows.size());
  Tensor out(shape, 0.0);
  std::vector<int> idx(rows.begin(), rows.end());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= n) throw ShapeError("gather_rows: row index out of range");
    std::copy(t.data() + idx[i] * width, t.data() + (idx[i] + 1) * width, out.data() + i * width);
  }
  Tape& tape = tape_of(x);
  return tape.record(std::move(out), {x}, [=, &tape](const Tensor& g, const Tensor&) {
    if (Tensor* gi = tape.grad_buffer(x))
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < width; ++j) (*gi)[idx[i] * width + j] += g[i * width + j];
  });
}

Var sum(const Var& x) {
  Tape& tape = tape_of(x);
  return tape.record(Tensor::scalar(x.value().sum()), {x}, [x, &tape](const Tensor& g, const Tensor&) {
    if (Tensor* gi = tape.grad_buffer(x))
      for (double& v : gi->values()) v += g[0];
  });
}

Var weighted_sum(const Var& x, const Tensor& weights) {
  if (weights.size() != x.value().size()) throw ShapeError("weighted_sum: weight count mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) s += x.value()[i] * weights[i];
  Tape& tape = tape_of(x);
  return tape.record(Tensor::scalar(s), {x}, [x, weights, &tape](const Tensor& g, const Tensor&) {
    if (Tensor* gi = tape.grad_buffer(x))
      for (std::size_t i = 0; i < weights.size(); ++i) (*gi)[i] += g[0] * weights[i];
  });
}

Var add_n(std::span<const Var> terms) {
  if (terms.empty()) throw ShapeError("add_n: no terms");
  Var acc = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return acc;
}

Var softmax_cross_entropy(const Var& logits, std::span<const int> labels, double normalizer) {
  const Tensor& x = logits.value();
  if (x.rank() != 2) throw ShapeError("softmax_cross_entropy: logits must be [N x K]");
  const int n = x.dim(0), kdim = x.dim(1);
  if (static_cast<int>(labels.size()) != n) throw ShapeError("softmax_cross_entropy: label count mismatch");
  std::vector<int> lab(labels.begin(), labels.end());
  Tensor prob = softmax_rows(x);
  double loss = 0.0;
  for (int r = 0; r < n; ++r) {
    if (lab[r] < 0) continue;
    if (lab[r] >= kdim) throw ValueError("softmax_cross_entropy: label out of range");
    const double* row = x.data() + static_cast<std::size_t>(r) * kdim;
    double m = row[0];
    for (int i = 1; i < kdim; ++i) m = std::max(m, row[i]);
    double s = 0.0;
    for (int i = 0; i < kdim; ++i) s += std::exp(row[i] - m);
    loss += (m + std::log(s)) - row[lab[r]];
  }
  const double inv = normalizer > 0 ? 1.0 / normalizer : 0.0;
  Tape& tape = tape_of(logits);
  return tape.record(Tensor::scalar(loss * inv), {logits},
                     [=, &tape](const Tensor& g, const Tensor&) {
                       Tensor* gi = tape.grad_buffer(logits);
                       if (!gi) return;
                       for (int r = 0; r < n; ++r) {
                         if (lab[r] < 0) continue;
                         for (int i = 0; i < kdim; ++i) {
                           const std::size_t o = static_cast<std::size_t>(r) * kdim + i;
                           (*gi)[o] += g[0] * inv * (prob[o] - (i == lab[r] ? 1.0 : 0.0));
                         }
                       }
                     });
}

Var sigmoid_bce(const Var& logits, const Tensor& targets, const Tensor& weights,
                double normalizer) {
  const Tensor& x = logits.value();
  if (targets.size() != x.size() || weights.size() != x.size())
    throw ShapeError("sigmoid_bce: target/weight count mismatch");
  double loss = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (weights[i] == 0.0) continue;
    const double v = x[i];
    const double softplus = std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v)));
    loss += weights[i] * (softplus - targets[i] * v);
  }
  const double inv = normalizer > 0 ? 1.0 / normalizer : 0.0;
  Tape& tape = tape_of(logits);
  return tape.record(Tensor::scalar(loss * inv), {logits},
                     [=, &tape](const Tensor& g, const Tensor&) {
                       Tensor* gi = tape.grad_buffer(logits);
                       if (!gi) return;
                       const Tensor& xv = logits.value();
                       for (std::size_t i = 0; i < xv.size(); ++i) {
                         if (weights[i] == 0.0) continue;
                         (*gi)[i] += g[0] * inv * weights[i] * (stable_sigmoid(xv[i]) - targets[i]);
                       }
                     });
}

Var smooth_l1(const Var& pred, const Tensor& target, const Tensor& weights, double beta,
              double normalizer) {
  const Tensor& p = pred.value();
  if (target.size() != p.size() || weights.size() != p.size())
    throw ShapeError("smooth_l1: target/weight count mismatch");
  double loss = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (weights[i] == 0.0) continue;
    const double d = std::abs(p[i] - target[i]);
    loss += weights[i] * (d < beta ? 0.5 * d * d / beta : d - 0.5 * beta);
  }
  const double inv = normalizer > 0 ? 1.0 / normalizer : 0.0;
  Tape& tape = tape_of(pred);
  return tape.record(Tensor::scalar(loss * inv), {pred},
                     [=, &tape](const Tensor& g, const Tensor&) {
                       Tensor* gi = tape.grad_buffer(pred);
                       if (!gi) return;
                       const Tensor& pv = pred.value();
                       for (std::size_t i = 0; i < pv.size(); ++i) {
                         if (weights[i] == 0.0) continue;
                         const double d = pv[i] - target[i];
                         const double gd = std::abs(d) < beta ? d / beta : (d > 0 ? 1.0 : -1.0);
                         (*gi)[i] += g[0] * inv * weights[i] * gd;
                       }
                     });
}

}  // namespace smn
