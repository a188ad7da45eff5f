#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "eevit/tensor.hpp"

namespace eevit {

// Elementwise arithmetic with numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);
Tensor square(const Tensor& x);
Tensor log(const Tensor& x);

// a: [..., p, q], b: [..., q, r] or [q, r] (shared across the batch).
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& order);
// Swaps the last two axes.
Tensor transpose_last(const Tensor& x);
Tensor slice(const Tensor& x, int axis, std::size_t begin, std::size_t end);
Tensor concat(const std::vector<Tensor>& parts, int axis);
// out[i] = x[indices[i]]; backward scatters (adds) into x.
Tensor gather(const Tensor& x, std::vector<std::size_t> indices, Shape out_shape);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_axis(const Tensor& x, int axis, bool keepdim = false);
// Global average over one axis; errors on an empty axis.
Tensor avg_pool_global(const Tensor& x, int axis, bool keepdim = false);

// Max-subtracted softmax along `axis`.
Tensor softmax(const Tensor& x, int axis);
Tensor log_softmax(const Tensor& x, int axis);

// Exact (erf) GELU.
Tensor gelu(const Tensor& x);

// Normalizes over the last axis, then applies per-feature gain and bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-6);

enum class NormMode { Train, Eval, Identity };

struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double eps = 1e-5;
};

// Channels-last batch norm: channel is the last axis, statistics run over all
// other axes. Train mode with a leading (sample) extent of 1 uses the running
// statistics instead of batch statistics. Identity mode returns x unchanged.
Tensor batch_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, BatchNormState& state,
                  NormMode mode);

// x: [batch, side*side, C] token grid. Non-overlapping window x window
// averaging with stride `window`; edge windows that fall off the grid average
// over the elements they actually cover. Output: [batch, ceil(side/window)^2, C].
Tensor avg_pool_window(const Tensor& x, std::size_t window);

// Depthwise 2-D convolution over a square token grid, channels last.
// x: [batch, side*side, C], weight: [k, k, C], bias: [C] (may be undefined).
// Zero padding of `pad` on every border.
Tensor depthwise_conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride,
                        std::size_t pad);

// Side length of a square token grid; throws ShapeError if `tokens` is not square.
std::size_t grid_side(std::size_t tokens);

// Mean cross entropy of logits [rows, classes] against integer labels.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

// KL(target || student) summed over the last axis and averaged over the
// leading rows. `target` holds probabilities, `student_log_probs`
// log-probabilities; detach the target to hold it constant.
Tensor kl_divergence(const Tensor& target, const Tensor& student_log_probs);

// KL(target || student) for explicit probability vectors (last axis); both
// arguments are validated as distributions.
Tensor loss_kl(const Tensor& target, const Tensor& student);

Tensor mse(const Tensor& a, const Tensor& b);

// Throws ValueError unless every row along the last axis is nonnegative and
// sums to 1 within `tol`.
void check_distribution(const Tensor& p, double tol = 1e-6);

}  // namespace eevit
