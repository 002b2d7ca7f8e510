#pragma once

// Differentiable tensor ops used by the field regressor. Images are
// C x D x H x W; conv weights are C_out x C_in x k x k x k; transposed-conv
// weights are C_in x C_out x k x k x k.

#include <span>

#include "pulsereg/graph.hpp"

namespace pulsereg {

/// 3-D cross-correlation. Output extent per axis is (in + 2*padding - k) / stride + 1.
template <typename T>
Tensor<T> conv3(Graph<T>& g, const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias, int stride,
                int padding);

/// Transposed convolution with kernel extent equal to its stride (non-overlapping
/// scatter). With the default kernel 2 / stride 2 each output extent is exactly
/// twice the input extent. A non-empty `target` (D, H, W) must match that.
template <typename T>
Tensor<T> tconv3(Graph<T>& g, const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias, int stride,
                 std::span<const std::int64_t> target = {});

/// 2x2x2 average pooling with stride 2. Every spatial extent must be even.
template <typename T>
Tensor<T> avgpool3(Graph<T>& g, const Tensor<T>& input);

template <typename T>
Tensor<T> add(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b);

/// Rectified linear unit; the derivative at exactly zero is taken as zero.
template <typename T>
Tensor<T> relu(Graph<T>& g, const Tensor<T>& a);

/// Channels [first, first + count) of a 4-D tensor.
template <typename T>
Tensor<T> slice_channels(Graph<T>& g, const Tensor<T>& a, std::int64_t first, std::int64_t count);

/// bias + sum_i weights[i] * terms[i] over scalar tensors.
template <typename T>
Tensor<T> linear_combination(Graph<T>& g, std::span<const Tensor<T>> terms, std::span<const double> weights,
                             double bias = 0.0);

/// sum_i a_i * x_i for a constant array x of the same shape.
template <typename T>
Tensor<T> dot_const(Graph<T>& g, const Tensor<T>& a, const Array<T>& x);

/// Sum of all elements.
template <typename T>
Tensor<T> sum(Graph<T>& g, const Tensor<T>& a);

/// Human-readable axis name for diagnostics of C x D x H x W tensors.
const char* image_axis_name(std::size_t axis);

}  // namespace pulsereg
