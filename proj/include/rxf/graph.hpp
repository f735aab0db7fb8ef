#pragma once

#include <functional>
#include <string>
#include <vector>

#include "rxf/tape.hpp"
#include "rxf/tensor.hpp"

namespace rxf {

/// A composed primitive sequence with a declared input signature.
template <typename T>
struct Graph {
  std::vector<Shape> input_shapes;
  std::function<Tensor<T>(const std::vector<Tensor<T>>&)> fn;
};

/// Validates the input signature and evaluates the graph. Records into the
/// thread's active tape, if any.
template <typename T>
Tensor<T> forward_eval(const Graph<T>& graph, const std::vector<Tensor<T>>& inputs);

/// Backward pass from a scalar loss; gradients land in the grad slots of
/// tracked tensors.
template <typename T>
void reverse_grad(Tape<T>& tape, const Tensor<T>& loss) {
  tape.backward(loss);
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  /// Coordinates sitting on a kink (one-sided slopes disagree), skipped.
  std::size_t excluded = 0;
  std::string worst;  // "input[i][j]" of the largest error
};

/// Compares reverse-mode gradients of a scalar graph against central
/// differences, coordinate by coordinate over every input, in 64-bit mode.
/// Relative error is |analytic - numeric| / max(|analytic|, |numeric|, eps_div).
GradCheckResult finite_diff_check(const Graph<double>& graph, std::vector<TensorD> inputs, double h,
                                  double eps_div = 1e-6);

extern template TensorF forward_eval(const Graph<float>&, const std::vector<TensorF>&);
extern template TensorD forward_eval(const Graph<double>&, const std::vector<TensorD>&);

}  // namespace rxf
