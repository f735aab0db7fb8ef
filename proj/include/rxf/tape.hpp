#pragma once

#include <functional>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "rxf/tensor.hpp"

namespace rxf {

/// Ordered record of executed primitives. Ops record themselves into the
/// tape installed on the current thread (see GradScope) whenever one of their
/// inputs is tracked. A tape supports exactly one backward pass.
///
/// A tensor is tracked when it was produced by a recorded op, was explicitly
/// watch()ed, or (with watch_parameters) has requires_grad set.
template <typename T>
class Tape {
 public:
  struct Node {
    std::string op;
    std::vector<Tensor<T>> inputs;
    std::vector<bool> needs_grad;
    Tensor<T> output;
    /// Accumulates d(loss)/d(input) into inputs[i].grad() for every i with
    /// needs_grad[i]; `gout` is d(loss)/d(output).
    std::function<void(Node&, std::span<const T> gout)> backward;
  };

  explicit Tape(bool watch_parameters = true) : watch_parameters_(watch_parameters) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void watch(const Tensor<T>& t);
  bool tracks(const Tensor<T>& t) const;

  /// Records an op if any input is tracked; returns whether it did.
  bool record(std::string op, std::vector<Tensor<T>> inputs, const Tensor<T>& output,
              std::function<void(Node&, std::span<const T>)> backward);

  /// Reverse sweep from a scalar loss. Gradients accumulate into the grad
  /// slots of every tracked tensor (including leaves).
  void backward(const Tensor<T>& loss);

  bool consumed() const { return consumed_; }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }

 private:
  bool watch_parameters_;
  bool consumed_ = false;
  std::unordered_set<const TensorImpl<T>*> tracked_;
  std::vector<Node> nodes_;
};

/// Tape active on this thread, or nullptr.
template <typename T>
Tape<T>* active_tape();

/// Installs a tape for the current thread for the lifetime of the scope.
template <typename T>
class GradScope {
 public:
  explicit GradScope(Tape<T>& tape);
  ~GradScope();
  GradScope(const GradScope&) = delete;
  GradScope& operator=(const GradScope&) = delete;

 private:
  Tape<T>* previous_;
};

/// Disables recording for the current thread for the lifetime of the scope.
template <typename T>
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<T>* previous_;
};

extern template class Tape<float>;
extern template class Tape<double>;
extern template class GradScope<float>;
extern template class GradScope<double>;
extern template class NoGradScope<float>;
extern template class NoGradScope<double>;

}  // namespace rxf
