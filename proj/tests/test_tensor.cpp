#include <cmath>
#include <sstream>

#include "doctest.h"
#include "fixtures.hpp"
#include "smn/autodiff.hpp"
#include "smn/error.hpp"
#include "smn/gradcheck.hpp"
#include "smn/ops.hpp"

using namespace smn;
using fixture::random_tensor;

namespace {

Tensor naive_conv(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  const int H = x.dim(0), W = x.dim(1), C = x.dim(2);
  const int K = w.dim(0), O = w.dim(3);
  const int oh = (H + 2 * pad - K) / stride + 1, ow = (W + 2 * pad - K) / stride + 1;
  Tensor out({oh, ow, O});
  for (int y = 0; y < oh; ++y)
    for (int x0 = 0; x0 < ow; ++x0)
      for (int o = 0; o < O; ++o) {
        double s = b[o];
        for (int ky = 0; ky < K; ++ky)
          for (int kx = 0; kx < K; ++kx)
            for (int c = 0; c < C; ++c) {
              const int iy = y * stride + ky - pad, ix = x0 * stride + kx - pad;
              if (iy < 0 || ix < 0 || iy >= H || ix >= W) continue;
              s += x.at(iy, ix, c) * w[((ky * K + kx) * C + c) * O + o];
            }
        out.at(y, x0, o) = s;
      }
  return out;
}

// Align-corners bilinear sample of channel c at (y, x), clamped to the map.
double sample(const Tensor& m, double y, double x, int c) {
  const int h = m.dim(0), w = m.dim(1);
  y = std::clamp(y, 0.0, h - 1.0);
  x = std::clamp(x, 0.0, w - 1.0);
  const int y0 = static_cast<int>(std::floor(y)), x0 = static_cast<int>(std::floor(x));
  const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double fy = y - y0, fx = x - x0;
  return (1 - fy) * ((1 - fx) * m.at(y0, x0, c) + fx * m.at(y0, x1, c)) +
         fy * ((1 - fx) * m.at(y1, x0, c) + fx * m.at(y1, x1, c));
}

double pos(double a, double b, int i, int n) { return n == 1 ? 0.5 * (a + b) : a + (b - a) * i / (n - 1); }

Tensor oracle_read(const Tensor& m, const BoundingBox& box, int oh, int ow) {
  Tensor out({oh, ow, m.dim(2)});
  for (int i = 0; i < oh; ++i)
    for (int j = 0; j < ow; ++j)
      for (int c = 0; c < m.dim(2); ++c)
        out.at(i, j, c) = sample(m, pos(box.y1, box.y2, i, oh), pos(box.x1, box.x2, j, ow), c);
  return out;
}

// Each touched cell becomes the bilinear-weighted mean of the patch samples.
Tensor oracle_write(const Tensor& m, const BoundingBox& box, const Tensor& p) {
  const int h = m.dim(0), w = m.dim(1), C = m.dim(2), ph = p.dim(0), pw = p.dim(1);
  Tensor acc({h, w, C}), wt({h, w, 1});
  for (int i = 0; i < ph; ++i)
    for (int j = 0; j < pw; ++j) {
      const double y = pos(box.y1, box.y2, i, ph), x = pos(box.x1, box.x2, j, pw);
      for (int cy = 0; cy < h; ++cy)
        for (int cx = 0; cx < w; ++cx) {
          const double k = std::max(0.0, 1 - std::abs(y - cy)) * std::max(0.0, 1 - std::abs(x - cx));
          if (k == 0) continue;
          wt.at(cy, cx, 0) += k;
          for (int c = 0; c < C; ++c) acc.at(cy, cx, c) += k * p.at(i, j, c);
        }
    }
  Tensor out = m;
  for (int cy = 0; cy < h; ++cy)
    for (int cx = 0; cx < w; ++cx)
      if (wt.at(cy, cx, 0) > 0)
        for (int c = 0; c < C; ++c) out.at(cy, cx, c) = acc.at(cy, cx, c) / wt.at(cy, cx, 0);
  return out;
}

double max_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

}  // namespace

TEST_CASE("tensor: value count equals the product of extents") {
  Tensor t({2, 3, 4});
  CHECK(t.size() == 24);
  CHECK(shape_numel({5, 1, 7}) == 35);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
}

TEST_CASE("conv2d: identity kernel, zero input and the naive oracle") {
  Rng rng(3);
  Tape tape;
  const Tensor x = random_tensor({3, 3, 1}, rng);
  Var out = conv2d(tape.constant(x), tape.constant(Tensor({1, 1, 1, 1}, 1.0)),
                   tape.constant(Tensor({1}, 0.0)), 1, 0);
  CHECK(out.value() == x);

  Var z = conv2d(tape.constant(Tensor({4, 4, 2}, 0.0)), tape.constant(random_tensor({3, 3, 2, 3}, rng)),
                 tape.constant(Tensor({3}, std::vector<double>{0.5, -1, 2})), 1, 1);
  for (int y = 0; y < 4; ++y)
    for (int x0 = 0; x0 < 4; ++x0) {
      CHECK(z.value().at(y, x0, 0) == 0.5);
      CHECK(z.value().at(y, x0, 2) == 2.0);
    }

  for (int stride : {1, 2}) {
    const Tensor in = random_tensor({5, 5, 2}, rng), w = random_tensor({3, 3, 2, 3}, rng),
                 b = random_tensor({3}, rng);
    Var y = conv2d(tape.constant(in), tape.constant(w), tape.constant(b), stride, 1);
    CHECK(max_diff(y.value(), naive_conv(in, w, b, stride, 1)) <= 1e-12);
  }
}

TEST_CASE("fully_connected: identity, bias only and explicit sums") {
  Rng rng(4);
  Tape tape;
  const Tensor x = random_tensor({3}, rng);
  Tensor eye({3, 3});
  for (int i = 0; i < 3; ++i) eye[i * 3 + i] = 1;
  CHECK(fully_connected(tape.constant(x), tape.constant(eye), tape.constant(Tensor({3})))
            .value()
            .vec() == x.vec());
  const Tensor bias = random_tensor({2}, rng);
  CHECK(fully_connected(tape.constant(x), tape.constant(Tensor({3, 2})), tape.constant(bias))
            .value()
            .vec() == bias.vec());

  const Tensor rows = random_tensor({4, 5}, rng), w = random_tensor({5, 3}, rng),
               b = random_tensor({3}, rng);
  const Tensor y = fully_connected(tape.constant(rows), tape.constant(w), tape.constant(b)).value();
  for (int n = 0; n < 4; ++n)
    for (int o = 0; o < 3; ++o) {
      double s = b[o];
      for (int i = 0; i < 5; ++i) s += rows[n * 5 + i] * w[i * 3 + o];
      CHECK(std::abs(y[n * 3 + o] - s) <= 1e-12);
    }
}

TEST_CASE("activations: fixed points and range bounds") {
  Tape tape;
  CHECK(sigmoid(tape.constant(Tensor({1}, 0.0))).value()[0] == 0.5);
  const Tensor eq = softmax(tape.constant(Tensor({2, 5}, 3.0))).value();
  for (double v : eq.values()) CHECK(v == doctest::Approx(0.2).epsilon(1e-15));

  Rng rng(5);
  const Tensor wild = random_tensor({50, 7}, rng, -800, 800);
  for (double v : tanh(tape.constant(wild)).value().values()) CHECK((v >= -1 && v <= 1));
  for (double v : sigmoid(tape.constant(wild)).value().values()) CHECK((v >= 0 && v <= 1));
  const Tensor p = softmax(tape.constant(wild)).value();
  CHECK(p.all_finite());
  for (int r = 0; r < 50; ++r) {
    double s = 0;
    for (int c = 0; c < 7; ++c) s += p[r * 7 + c];
    CHECK(std::abs(s - 1) <= 1e-9);
  }
}

TEST_CASE("bilinear_resize: identity, constants and the 2x2 to 3x3 example") {
  Rng rng(6);
  Tape tape;
  const Tensor x = random_tensor({4, 5, 2}, rng);
  CHECK(bilinear_resize(tape.constant(x), 4, 5).value() == x);
  for (double v : bilinear_resize(tape.constant(Tensor({3, 3, 1}, 0.7)), 7, 2).value().values())
    CHECK(v == doctest::Approx(0.7).epsilon(1e-15));
  const Tensor sq({2, 2, 1}, std::vector<double>{0, 1, 2, 3});
  const Tensor up = bilinear_resize(tape.constant(sq), 3, 3).value();
  CHECK(up.vec() == std::vector<double>{0, .5, 1, 1, 1.5, 2, 2, 2.5, 3});
}

TEST_CASE("roi_read: constant map, aligned crop and the bilinear oracle") {
  Rng rng(7);
  Tape tape;
  for (double v : roi_read(tape.constant(Tensor({6, 6, 2}, -0.3)), {0, 0, 5, 5}, 4, 3).value().values())
    CHECK(v == doctest::Approx(-0.3).epsilon(1e-15));

  const Tensor m = random_tensor({6, 7, 2}, rng);
  const Tensor crop = roi_read(tape.constant(m), {2, 1, 5, 3}, 3, 4).value();
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j)
      for (int c = 0; c < 2; ++c) CHECK(crop.at(i, j, c) == m.at(1 + i, 2 + j, c));

  for (int trial = 0; trial < 20; ++trial) {
    const Tensor m4 = random_tensor({4, 4, 3}, rng);
    const double x1 = rng.uniform(0, 1.5), y1 = rng.uniform(0, 1.5);
    const BoundingBox b{x1, y1, rng.uniform(x1 + 0.2, 3), rng.uniform(y1 + 0.2, 3)};
    CHECK(max_diff(roi_read(tape.constant(m4), b, 5, 3).value(), oracle_read(m4, b, 5, 3)) <= 1e-12);
  }
}

TEST_CASE("roi_write: aligned round trip, zeros and the weighted-mean oracle") {
  Rng rng(8);
  Tape tape;
  const Tensor m = random_tensor({6, 6, 2}, rng), p = random_tensor({3, 3, 2}, rng);
  const BoundingBox aligned{1, 2, 3, 4};
  const Var written = roi_write(tape.constant(m), aligned, tape.constant(p));
  CHECK(roi_read(written, aligned, 3, 3).value() == p);
  for (int y = 0; y < 6; ++y)
    for (int x = 0; x < 6; ++x)
      if (y < 2 || y > 4 || x < 1 || x > 3) CHECK(written.value().at(y, x, 0) == m.at(y, x, 0));

  const Tensor zero({5, 5, 2});
  CHECK(roi_write(tape.constant(zero), {0.5, 0.5, 3.5, 2.5}, tape.constant(Tensor({4, 4, 2})))
            .value() == zero);

  for (int trial = 0; trial < 20; ++trial) {
    const Tensor mm = random_tensor({5, 6, 2}, rng), pp = random_tensor({4, 3, 2}, rng);
    const double x1 = rng.uniform(0, 2), y1 = rng.uniform(0, 2);
    const BoundingBox b{x1, y1, rng.uniform(x1 + 0.3, 5), rng.uniform(y1 + 0.3, 4)};
    const Tensor got = roi_write(tape.constant(mm), b, tape.constant(pp)).value();
    const Tensor want = oracle_write(mm, b, pp);
    CHECK(max_diff(got, want) <= 1e-12);
    // Fractional round trip against the composed oracle.
    CHECK(max_diff(roi_read(tape.constant(got), b, 4, 3).value(), oracle_read(want, b, 4, 3)) <= 1e-6);
    // A constant patch comes back exactly wherever it lands.
    const Tensor flat({4, 3, 2}, 0.25);
    const Tensor back = roi_read(roi_write(tape.constant(mm), b, tape.constant(flat)), b, 4, 3).value();
    for (double v : back.values()) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));
  }
}

TEST_CASE("roi_gated_write: zero gate is a no-op, unit gate equals roi_write on aligned boxes") {
  Rng rng(9);
  Tape tape;
  const Tensor m = random_tensor({6, 6, 3}, rng), cand = random_tensor({3, 3, 3}, rng);
  const BoundingBox b{1.3, 0.7, 4.1, 3.9};
  CHECK(roi_gated_write(tape.constant(m), b, tape.constant(Tensor({3, 3, 3})), tape.constant(cand))
            .value() == m);
  const BoundingBox aligned{2, 1, 4, 3};
  const Tensor gated =
      roi_gated_write(tape.constant(m), aligned, tape.constant(Tensor({3, 3, 3}, 1.0)), tape.constant(cand)).value();
  CHECK(max_diff(gated, roi_write(tape.constant(m), aligned, tape.constant(cand)).value()) <= 1e-15);
  // Values stay in [-1, 1] when the map and candidates do.
  const Tensor z = random_tensor({3, 3, 3}, rng, 0, 1);
  for (double v : roi_gated_write(tape.constant(m), b, tape.constant(z), tape.constant(cand)).value().values())
    CHECK((v >= -1 && v <= 1));
}

TEST_CASE("autodiff: shared inputs accumulate and stop_gradient blocks the branch") {
  Tape tape;
  Var x = tape.variable(Tensor({3}, std::vector<double>{1, -2, 3}));
  Var y = sum(add(mul(x, x), scale(x, 3)));  // sum(x^2 + 3x)
  tape.backward(y);
  CHECK(tape.grad(x).vec() == std::vector<double>{5, -1, 9});

  Tape t2;
  Var a = t2.variable(Tensor({2}, 1.5));
  Var b = t2.variable(Tensor({2}, -0.5));
  Var loss = sum(add(mul(a, a), mul(t2.stop_gradient(b), a)));
  t2.backward(loss);
  const Tensor gb = t2.grad(b);
  for (double g : gb.values()) CHECK(g == 0.0);
  CHECK(t2.stop_markers() == 1);
  CHECK_THROWS(t2.backward(a));  // not a single element
}

TEST_CASE("forward passes are bit-identical across runs") {
  Rng rng(10);
  const Tensor x = random_tensor({9, 9, 4}, rng), w = random_tensor({3, 3, 4, 5}, rng),
               b = random_tensor({5}, rng);
  auto run = [&] {
    Tape tape;
    Var y = relu(conv2d(tape.constant(x), tape.constant(w), tape.constant(b), 2, 1));
    return softmax(reshape(y, {25, 5})).value();
  };
  CHECK(run() == run());
}

TEST_CASE("grad_check: linear graph, conv+sigmoid and the stop-gradient marker") {
  Rng rng(11);
  auto linear = [](Tape&, std::span<const Var> in) { return scale(add(in[0], in[1]), 2.5); };
  const auto lin = grad_check(linear, {random_tensor({4, 3}, rng), random_tensor({4, 3}, rng)});
  CHECK(lin.max_rel_error < 1e-9);

  auto conv = [](Tape&, std::span<const Var> in) {
    return sigmoid(conv2d(in[0], in[1], in[2], 1, 1));
  };
  const auto cs = grad_check(conv, {random_tensor({5, 5, 2}, rng), random_tensor({3, 3, 2, 3}, rng),
                                    random_tensor({3}, rng)});
  CHECK(cs.max_rel_error < 1e-4);

  Tape tape;
  Var a = tape.variable(random_tensor({3}, rng));
  Var b = tape.variable(random_tensor({3}, rng));
  tape.backward(sum(add(tanh(a), tanh(tape.stop_gradient(b)))));
  const Tensor gb = tape.grad(b);
  for (double g : gb.values()) CHECK(g == 0.0);
}

TEST_CASE("tensor io: round trip, f32 payload and truncation") {
  Rng rng(12);
  const Tensor t = random_tensor({3, 4, 2}, rng);
  std::stringstream s;
  write_tensor(s, t);
  CHECK(read_tensor(s) == t);

  std::stringstream f;
  write_tensor(f, t, Precision::f32);
  const Tensor r = read_tensor(f);
  for (std::size_t i = 0; i < t.size(); ++i) CHECK(r[i] == static_cast<double>(static_cast<float>(t[i])));

  std::stringstream full;
  write_tensor(full, t);
  const std::string bytes = full.str();
  for (std::size_t cut = 0; cut < bytes.size(); cut += 7) {
    std::stringstream part(bytes.substr(0, cut));
    CHECK_THROWS_AS(read_tensor(part), Error);
  }
  CHECK(digest(t) != digest(r));
}
