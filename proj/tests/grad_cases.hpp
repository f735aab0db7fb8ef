#pragma once

// Randomized scalar graphs, one per differentiable layer type, used by the
// gradient-check unit tests and the acceptance suite.

#include <string>
#include <vector>

#include "rxf/graph.hpp"
#include "rxf/ops.hpp"
#include "test_util.hpp"

namespace rxf::testing {

struct GradCase {
  Graph<double> graph;
  std::vector<TensorD> inputs;
};

// Scalarizes a layer output with a fixed random projection so no gradient
// cancels by symmetry (a plain sum of a batch-norm output is constant in x).
inline TensorD project(const TensorD& out, const TensorD& probe) { return ops::sum(ops::mul(out, probe)); }

inline const std::vector<std::string>& grad_case_names() {
  static const std::vector<std::string> names = {"dense",    "conv",      "bn_train",       "bn_eval",
                                                 "relu",     "pool",      "residual_convex", "softmax_ce",
                                                 "avg_pool", "spectral",  "fdm_distance"};
  return names;
}

inline GradCase make_grad_case(const std::string& name, std::uint64_t seed) {
  Rng rng(seed, 77);
  GradCase gc;
  auto add_input = [&](Shape s, double lo = -1.0, double hi = 1.0) {
    gc.inputs.push_back(random_tensor<double>(s, rng, lo, hi));
    gc.graph.input_shapes.push_back(std::move(s));
  };
  if (name == "dense") {
    add_input({3, 4});
    add_input({5, 4});
    add_input({5});
    auto probe = random_tensor<double>({3, 5}, rng);
    gc.graph.fn = [probe](const std::vector<TensorD>& in) { return project(ops::linear(in[0], in[1], in[2]), probe); };
  } else if (name == "conv") {
    add_input({2, 2, 5, 5});
    add_input({3, 2, 3, 3});
    add_input({3});
    const int stride = 1 + static_cast<int>(rng.below(2));
    const int pad = static_cast<int>(rng.below(2));
    const std::int64_t o = (5 + 2 * pad - 3) / stride + 1;
    auto probe = random_tensor<double>({2, 3, o, o}, rng);
    gc.graph.fn = [probe, stride, pad](const std::vector<TensorD>& in) {
      return project(ops::conv2d(in[0], in[1], in[2], stride, pad), probe);
    };
  } else if (name == "bn_train") {
    add_input({8, 3, 2, 2});
    add_input({3}, 0.5, 1.5);
    add_input({3});
    auto probe = random_tensor<double>({8, 3, 2, 2}, rng);
    gc.graph.fn = [probe](const std::vector<TensorD>& in) {
      std::vector<double> m(3), v(3);
      return project(ops::batch_norm_train(in[0], in[1], in[2], 1e-5, m, v), probe);
    };
  } else if (name == "bn_eval") {
    add_input({4, 3});
    add_input({3}, 0.5, 1.5);
    add_input({3});
    auto mu = random_tensor<double>({3}, rng);
    auto var = random_tensor<double>({3}, rng, 0.2, 2.0);
    auto probe = random_tensor<double>({4, 3}, rng);
    gc.graph.fn = [probe, mu, var](const std::vector<TensorD>& in) {
      return project(ops::batch_norm_infer(in[0], in[1], in[2], mu, var, 1e-5), probe);
    };
  } else if (name == "relu") {
    add_input({4, 6});
    auto probe = random_tensor<double>({4, 6}, rng);
    gc.graph.fn = [probe](const std::vector<TensorD>& in) { return project(ops::relu(in[0]), probe); };
  } else if (name == "pool") {
    add_input({2, 2, 4, 4});
    auto probe = random_tensor<double>({2, 2, 2, 2}, rng);
    gc.graph.fn = [probe](const std::vector<TensorD>& in) { return project(ops::max_pool2d(in[0], 2), probe); };
  } else if (name == "avg_pool") {
    add_input({2, 3, 3, 3});
    auto probe = random_tensor<double>({2, 3}, rng);
    gc.graph.fn = [probe](const std::vector<TensorD>& in) { return project(ops::global_avg_pool(in[0]), probe); };
  } else if (name == "residual_convex") {
    add_input({3, 4});
    add_input({3, 4});
    add_input({3, 4});
    auto probe = random_tensor<double>({3, 4}, rng);
    gc.graph.fn = [probe](const std::vector<TensorD>& in) {
      return project(ops::aggregate(in, ops::Aggregation::convex), probe);
    };
  } else if (name == "softmax_ce") {
    add_input({5, 4}, -3.0, 3.0);
    std::vector<int> labels(5);
    for (auto& y : labels) y = static_cast<int>(rng.below(4));
    gc.graph.fn = [labels](const std::vector<TensorD>& in) { return ops::softmax_cross_entropy(in[0], labels); };
  } else if (name == "spectral") {
    add_input({4, 2, 2, 2});
    std::vector<double> u(4), v(8);
    for (auto& x : u) x = rng.normal();
    for (auto& x : v) x = rng.normal();
    auto probe = random_tensor<double>({4, 2, 2, 2}, rng);
    const double beta = rng.uniform(0.3, 1.0);
    gc.graph.fn = [probe, u, v, beta](const std::vector<TensorD>& in) {
      return project(ops::spectral_scale(in[0], u, v, beta), probe);
    };
  } else if (name == "fdm_distance") {
    add_input({3, 5});
    add_input({3, 5});
    gc.graph.fn = [](const std::vector<TensorD>& in) { return ops::row_l2_distance_sum(in[0], in[1]); };
  } else {
    throw std::invalid_argument("unknown gradient case " + name);
  }
  return gc;
}

}  // namespace rxf::testing
