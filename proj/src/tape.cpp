#include "rxf/tape.hpp"

#include <cmath>

#include "rxf/error.hpp"

namespace rxf {

namespace {

template <typename T>
Tape<T>*& current_tape() {
  thread_local Tape<T>* tape = nullptr;
  return tape;
}

}  // namespace

template <typename T>
Tape<T>* active_tape() {
  return current_tape<T>();
}

template <typename T>
void Tape<T>::watch(const Tensor<T>& t) {
  if (consumed_) throw std::logic_error("tape already consumed by backward()");
  tracked_.insert(t.impl());
}

template <typename T>
bool Tape<T>::tracks(const Tensor<T>& t) const {
  if (!t.defined()) return false;
  if (watch_parameters_ && t.requires_grad()) return true;
  return tracked_.count(t.impl()) != 0;
}

template <typename T>
bool Tape<T>::record(std::string op, std::vector<Tensor<T>> inputs, const Tensor<T>& output,
                     std::function<void(Node&, std::span<const T>)> backward) {
  std::vector<bool> needs(inputs.size());
  bool any = false;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    needs[i] = tracks(inputs[i]);
    any = any || needs[i];
  }
  if (!any) return false;
  if (consumed_) throw std::logic_error("recording '" + op + "' into a tape already consumed by backward()");
  tracked_.insert(output.impl());
  nodes_.push_back(Node{std::move(op), std::move(inputs), std::move(needs), output, std::move(backward)});
  return true;
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (consumed_) throw std::logic_error("tape already consumed by backward()");
  if (loss.numel() != 1) throw ShapeError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  consumed_ = true;
  if (!tracks(loss)) return;
  Tensor<T> seed = loss;
  seed.ensure_grad()[0] += T{1};
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node& node = *it;
    if (!node.output.has_grad()) continue;  // not on a path to the loss
    for (std::size_t i = 0; i < node.inputs.size(); ++i) {
      if (node.needs_grad[i]) node.inputs[i].ensure_grad();
    }
    node.backward(node, node.output.grad());
    for (std::size_t i = 0; i < node.inputs.size(); ++i) {
      if (!node.needs_grad[i]) continue;
      for (T g : node.inputs[i].grad()) {
        if (!std::isfinite(g)) throw NumericalError("non-finite gradient produced by backward of '" + node.op + "'");
      }
    }
  }
  // Release intermediate buffers; leaves keep their accumulated gradients.
  for (auto& node : nodes_) node.output.clear_grad();
}

template <typename T>
GradScope<T>::GradScope(Tape<T>& tape) : previous_(current_tape<T>()) {
  current_tape<T>() = &tape;
}

template <typename T>
GradScope<T>::~GradScope() {
  current_tape<T>() = previous_;
}

template <typename T>
NoGradScope<T>::NoGradScope() : previous_(current_tape<T>()) {
  current_tape<T>() = nullptr;
}

template <typename T>
NoGradScope<T>::~NoGradScope() {
  current_tape<T>() = previous_;
}

template class Tape<float>;
template class Tape<double>;
template class GradScope<float>;
template class GradScope<double>;
template class NoGradScope<float>;
template class NoGradScope<double>;
template Tape<float>* active_tape<float>();
template Tape<double>* active_tape<double>();

}  // namespace rxf
