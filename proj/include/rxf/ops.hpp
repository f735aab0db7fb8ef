#pragma once

#include <span>
#include <vector>

#include "rxf/tape.hpp"
#include "rxf/tensor.hpp"

// Differentiable primitives. Every op checks its output for NaN/Inf and
// throws NumericalError naming itself; every op records into the active tape
// when one of its inputs is tracked. Reductions accumulate in double.
namespace rxf::ops {

enum class Aggregation { sum, convex };

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T s);
template <typename T> Tensor<T> reshape(const Tensor<T>& a, Shape shape);
/// Collapses every axis after the first: (N, ...) -> (N, prod(...)).
template <typename T> Tensor<T> flatten(const Tensor<T>& a);

template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a);
template <typename T> Tensor<T> sum_squares(const Tensor<T>& a);

/// max(x, 0); the subgradient at 0 is 0.
template <typename T> Tensor<T> relu(const Tensor<T>& a);

/// y = x W^T + b with x (N, in), W (out, in), b (out) or undefined.
template <typename T> Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

/// 2-D cross-correlation, x (N, Cin, H, W), w (Cout, Cin, K, K), zero padding.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride, int padding);

/// Non-overlapping max pooling with window = stride = k. Ties pick the first.
template <typename T> Tensor<T> max_pool2d(const Tensor<T>& x, int k);
/// (N, C, H, W) -> (N, C).
template <typename T> Tensor<T> global_avg_pool(const Tensor<T>& x);

/// Batch-statistics normalization over every axis except 1 (channels), with
/// biased variance. The batch mean and variance are written to the out spans
/// (length C) for the caller's running-statistics update.
template <typename T>
Tensor<T> batch_norm_train(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, double eps,
                           std::span<double> batch_mean, std::span<double> batch_var);

/// Normalization by fixed statistics; mean/var are constants.
template <typename T>
Tensor<T> batch_norm_infer(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                           const Tensor<T>& running_mean, const Tensor<T>& running_var, double eps);

/// Sum of the inputs, or their mean with fixed weights 1/n in convex mode.
template <typename T> Tensor<T> aggregate(const std::vector<Tensor<T>>& inputs, Aggregation mode);

/// Mean softmax cross-entropy over the batch; logits (N, C).
template <typename T> Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels);

/// Sum over rows of ||a_i - b_i||_2 with rows = leading axis. The gradient of
/// a zero-distance row is 0.
template <typename T> Tensor<T> row_l2_distance_sum(const Tensor<T>& a, const Tensor<T>& b);

/// beta * W / sigma with sigma = u^T W v, W viewed as (shape[0], rest).
/// u and v are treated as constants; the gradient flows through sigma.
template <typename T>
Tensor<T> spectral_scale(const Tensor<T>& w, std::span<const double> u, std::span<const double> v, double beta);

// Non-differentiable helpers.
template <typename T> std::vector<double> cross_entropy_per_example(const Tensor<T>& logits, std::span<const int> labels);
template <typename T> std::vector<int> argmax_rows(const Tensor<T>& logits);

}  // namespace rxf::ops
