#include "rxf/graph.hpp"

#include <algorithm>
#include <cmath>

#include "rxf/error.hpp"

namespace rxf {

template <typename T>
Tensor<T> forward_eval(const Graph<T>& graph, const std::vector<Tensor<T>>& inputs) {
  if (inputs.size() != graph.input_shapes.size()) {
    throw ShapeError("graph expects " + std::to_string(graph.input_shapes.size()) + " inputs, got " +
                     std::to_string(inputs.size()));
  }
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (inputs[i].shape() != graph.input_shapes[i]) {
      throw ShapeError("graph input " + std::to_string(i) + " expects shape " + shape_str(graph.input_shapes[i]) +
                       ", got " + shape_str(inputs[i].shape()));
    }
  }
  return graph.fn(inputs);
}

template TensorF forward_eval(const Graph<float>&, const std::vector<TensorF>&);
template TensorD forward_eval(const Graph<double>&, const std::vector<TensorD>&);

GradCheckResult finite_diff_check(const Graph<double>& graph, std::vector<TensorD> inputs, double h,
                                  double eps_div) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_check: step size must be positive");

  Tape<double> tape(false);
  for (auto& t : inputs) {
    t.clear_grad();
    tape.watch(t);
  }
  TensorD loss;
  {
    GradScope<double> scope(tape);
    loss = forward_eval(graph, inputs);
  }
  if (loss.numel() != 1) throw ShapeError("finite_diff_check: graph output must be scalar, got " + shape_str(loss.shape()));
  tape.backward(loss);

  auto evaluate = [&]() {
    NoGradScope<double> off;
    return forward_eval(graph, inputs).item();
  };

  GradCheckResult result;
  const double f0 = evaluate();
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto& t = inputs[i];
    for (std::size_t j = 0; j < t.numel(); ++j) {
      const double analytic = t.has_grad() ? t.grad()[j] : 0.0;
      const double saved = t[j];
      t[j] = saved + h;
      const double fp = evaluate();
      t[j] = saved - h;
      const double fm = evaluate();
      t[j] = saved;

      const double numeric = (fp - fm) / (2.0 * h);
      const double err = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), eps_div});
      if (err > 1e-3) {
        // A kink shows up as disagreeing one-sided slopes; smooth points do not.
        const double forward = (fp - f0) / h;
        const double backward = (f0 - fm) / h;
        const double spread = std::abs(forward - backward);
        if (spread > 1e-2 * std::max({std::abs(forward), std::abs(backward), eps_div})) {
          ++result.excluded;
          continue;
        }
      }
      ++result.checked;
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst = "input[" + std::to_string(i) + "][" + std::to_string(j) + "]";
      }
    }
  }
  return result;
}

}  // namespace rxf
