#pragma once

// Differentiable operations on Tensor. Binary elementwise operations broadcast
// with numpy rules. Axis arguments accept negative values.

#include <vector>

#include "mtsc/tensor.hpp"

namespace mtsc::ops {

// Elementwise arithmetic.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);
Tensor neg(const Tensor& x);
Tensor square(const Tensor& x);

// Elementwise functions.
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
// Subgradient at 0 is 0.
Tensor abs(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

// Reductions.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum(const Tensor& x, int axis, bool keepdim = false);
Tensor mean(const Tensor& x, int axis, bool keepdim = false);

// Matrix product over the last two axes. Leading (batch) axes must agree, or
// one operand may be a plain matrix that is broadcast across the batch.
Tensor matmul(const Tensor& a, const Tensor& b);
// x[..., in] -> x * weight^T + bias, weight [out, in], bias [out] (optional).
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = {});

// Shape manipulation.
Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose(const Tensor& x, int axis0, int axis1);
Tensor slice(const Tensor& x, int axis, std::size_t start, std::size_t length);
Tensor concat(const std::vector<Tensor>& parts, int axis);

// Normalized exponentials along an axis, stabilized by max subtraction.
Tensor softmax(const Tensor& x, int axis);
Tensor log_softmax(const Tensor& x, int axis);

// Length-preserving cross-correlation. x is [C_in, N] or [B, C_in, N]; kernels
// are [C_out, C_in, k]; bias is [C_out] or undefined. Padding puts
// floor((k-1)/2) zeros on the left and the remainder on the right.
Tensor conv1d(const Tensor& x, const Tensor& kernels, const Tensor& bias = {});

enum class NormMode { train, eval };

// Per-channel normalization of x [C, N] or [B, C, N]. In train mode the batch
// statistics (over batch and time) are used and the running buffers are
// updated in place with the given momentum; in eval mode the running buffers
// are used.
Tensor batch_norm1d(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                    Tensor& running_var, NormMode mode, double momentum = 0.1, double eps = 1e-5);

// Normalization over the last axis.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// Mean over the last (time) axis: [.., d, N] -> [.., d].
Tensor global_avg_pool(const Tensor& x);

}  // namespace mtsc::ops
