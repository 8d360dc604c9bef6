#pragma once

// Differentiable operators over Var. All image-like tensors are H x W x C.

#include <span>
#include <vector>

#include "smn/autodiff.hpp"
#include "smn/box.hpp"

namespace smn {

enum class Activation { relu, sigmoid, tanh, softmax };

/// Cross-correlation. weight is kh x kw x Cin x Cout, bias is Cout; kh, kw odd.
Var conv2d(const Var& input, const Var& weight, const Var& bias, int stride, int pad);

/// Affine map. input is [Din] or a row batch [N x Din]; weight is Din x Dout.
Var fully_connected(const Var& input, const Var& weight, const Var& bias);

/// Elementwise, or per last-axis slice for softmax.
Var activation(const Var& x, Activation kind);
inline Var relu(const Var& x) { return activation(x, Activation::relu); }
inline Var sigmoid(const Var& x) { return activation(x, Activation::sigmoid); }
inline Var tanh(const Var& x) { return activation(x, Activation::tanh); }
inline Var softmax(const Var& x) { return activation(x, Activation::softmax); }

/// Align-corners bilinear resize of an H x W x C map.
Var bilinear_resize(const Var& input, int out_h, int out_w);

/// Bilinear crop-and-resize of the box region (map coordinates, cell centers at
/// integers). No max. Box must lie in [0, W-1] x [0, H-1] with positive area.
/// Not differentiable w.r.t. box coordinates.
Var roi_read(const Var& map, const BoundingBox& box, int out_h, int out_w);

/// Weight-normalized adjoint of roi_read: patch samples are scattered with their
/// bilinear weights and every touched cell becomes the weighted mean of the
/// samples landing on it. Untouched cells keep their value.
Var roi_write(const Var& map, const BoundingBox& box, const Var& patch);

/// Gated form of roi_write used by the memory: a touched cell c becomes
///   old_c + sum_s w_sc * gate_s * (candidate_s - old_c) / sum_s w_sc
/// which reduces to the GRU interpolation for cell-aligned boxes, leaves the
/// map bit-identical when the gate is zero, and keeps values in [-1, 1] when
/// both old values and candidates are.
Var roi_gated_write(const Var& map, const BoundingBox& box, const Var& gate,
                    const Var& candidate);

/// Max pooling over out_h x out_w bins per box, each bin taking the max over a
/// samples x samples grid of bilinear samples. Returns [R x out_h x out_w x C].
/// Boxes are in map coordinates and may have zero extent.
Var roi_max_pool(const Var& map, std::span<const BoundingBox> boxes, int out_h, int out_w,
                 int samples = 2);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& x, double s);
// 1 - x
Var one_minus(const Var& x);

/// Concatenate along the last axis; leading extents must agree.
Var concat_last(const Var& a, const Var& b);
/// [K] -> [h x w x K], the vector repeated at every location.
Var tile_hw(const Var& vec, int h, int w);
Var reshape(const Var& x, Shape shape);
/// Rows of a tensor viewed as [N x rest].
Var gather_rows(const Var& x, std::span<const int> rows);

/// Single-element sum of all entries.
Var sum(const Var& x);
/// Single-element sum of x * weights.
Var weighted_sum(const Var& x, const Tensor& weights);
Var add_n(std::span<const Var> terms);

/// Mean-style cross entropy: sum over rows with label >= 0 of -log softmax(row)[label],
/// divided by normalizer. logits [N x K].
Var softmax_cross_entropy(const Var& logits, std::span<const int> labels, double normalizer);
/// sum_i w_i * BCE(sigmoid(x_i), t_i) / normalizer.
Var sigmoid_bce(const Var& logits, const Tensor& targets, const Tensor& weights,
                double normalizer);
/// sum_i w_i * smoothL1_beta(p_i - t_i) / normalizer.
Var smooth_l1(const Var& pred, const Tensor& target, const Tensor& weights, double beta,
              double normalizer);

// Forward-only helpers.
Tensor softmax_rows(const Tensor& logits);

}  // namespace smn
