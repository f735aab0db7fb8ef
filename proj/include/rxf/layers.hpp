#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "rxf/ops.hpp"
#include "rxf/rng.hpp"
#include "rxf/spectral.hpp"
#include "rxf/tensor.hpp"

namespace rxf {

/// How a forward pass treats batch normalization.
///  train:       batch statistics, running statistics updated
///  inference:   running statistics
///  batch_stats: batch statistics, running statistics left untouched
enum class Mode { train, inference, batch_stats };

struct NamedTensor {
  std::string name;
  TensorF tensor;
  bool parameter;  // false for buffers (running statistics)
};

/// Forward-time spectral normalization attached to a dense or conv layer.
struct SpectralNorm {
  SpectralState state;
  double beta = 1.0;
};

class Layer {
 public:
  virtual ~Layer() = default;
  virtual std::string kind() const = 0;
  virtual TensorF forward(const TensorF& x, Mode mode) = 0;
  /// Per-sample output shape for a per-sample input shape.
  virtual Shape output_shape(const Shape& in) const = 0;
  /// Upper bound on the l2 Lipschitz constant in inference mode.
  virtual double lipschitz_bound(const Shape& in) const = 0;
  virtual std::unique_ptr<Layer> clone() const = 0;
  virtual void collect(const std::string& prefix, std::vector<NamedTensor>& out) = 0;
  /// Pre-order traversal over this layer and every nested layer.
  virtual void visit(const std::function<void(Layer&)>& fn) { fn(*this); }
};

/// Shared machinery of dense and conv layers: weight, bias and an optional
/// forward-time spectral normalization. The bias never enters a Lipschitz bound.
class WeightedLayer : public Layer {
 public:
  TensorF weight;
  TensorF bias;
  std::optional<SpectralNorm> spectral;

  /// Weight used by forward(): normalized when spectral normalization is on.
  TensorF effective_weight(Mode mode);
  /// Spectral norm of the weight as the forward pass would apply it (inference).
  double effective_spectral_norm() const;
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) override;
};

class Dense : public WeightedLayer {
 public:
  Dense(std::int64_t in, std::int64_t out, Rng& rng);
  Dense(TensorF w, TensorF b);
  std::string kind() const override { return "dense"; }
  TensorF forward(const TensorF& x, Mode mode) override;
  Shape output_shape(const Shape& in) const override;
  double lipschitz_bound(const Shape& in) const override;
  std::unique_ptr<Layer> clone() const override;
};

class Conv2D : public WeightedLayer {
 public:
  Conv2D(std::int64_t cin, std::int64_t cout, int kernel, int stride, int padding, Rng& rng);
  std::string kind() const override { return "conv2d"; }
  TensorF forward(const TensorF& x, Mode mode) override;
  Shape output_shape(const Shape& in) const override;
  /// Reshaped-matrix spectral norm times ceil(K / stride): each input pixel
  /// enters at most that many patches per axis.
  double lipschitz_bound(const Shape& in) const override;
  std::unique_ptr<Layer> clone() const override;

  std::int64_t in_channels() const { return weight.dim(1); }
  std::int64_t out_channels() const { return weight.dim(0); }
  int kernel() const { return static_cast<int>(weight.dim(2)); }
  int stride = 1;
  int padding = 0;
};

/// Filters as a C_out x (C_in*K*K) matrix sharing storage with the bank. Row r
/// is filter r flattened channel-major, then kernel row, then kernel column.
MatrixView conv_weight_as_matrix(const Conv2D& layer);
/// Inverse of conv_weight_as_matrix: copies a matrix back into a filter bank.
TensorF matrix_as_conv_weight(const MatrixView& m, std::int64_t in_channels, int kernel);

class BatchNorm : public Layer {
 public:
  explicit BatchNorm(std::int64_t channels);
  std::string kind() const override { return "batchnorm"; }
  TensorF forward(const TensorF& x, Mode mode) override;
  Shape output_shape(const Shape& in) const override { return in; }
  double lipschitz_bound(const Shape& in) const override;
  std::unique_ptr<Layer> clone() const override;
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) override;

  bool affine_frozen() const { return !weight.requires_grad(); }
  void set_affine_frozen(bool frozen);

  TensorF weight;  // affine scale
  TensorF bias;    // affine shift
  TensorF running_mean;
  TensorF running_var;
  double momentum = 0.1;
  double eps = 1e-5;
  /// Frozen statistics: always normalize by the running statistics and never
  /// update them, whatever the forward mode.
  bool stats_frozen = false;
};

class ReLU : public Layer {
 public:
  std::string kind() const override { return "relu"; }
  TensorF forward(const TensorF& x, Mode) override { return ops::relu(x); }
  Shape output_shape(const Shape& in) const override { return in; }
  double lipschitz_bound(const Shape&) const override { return 1.0; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<ReLU>(); }
  void collect(const std::string&, std::vector<NamedTensor>&) override {}
};

class MaxPool : public Layer {
 public:
  explicit MaxPool(int window) : window(window) {}
  std::string kind() const override { return "maxpool"; }
  TensorF forward(const TensorF& x, Mode) override { return ops::max_pool2d(x, window); }
  Shape output_shape(const Shape& in) const override;
  double lipschitz_bound(const Shape&) const override { return 1.0; }  // windows do not overlap
  std::unique_ptr<Layer> clone() const override { return std::make_unique<MaxPool>(window); }
  void collect(const std::string&, std::vector<NamedTensor>&) override {}
  int window;
};

class GlobalAvgPool : public Layer {
 public:
  std::string kind() const override { return "avgpool"; }
  TensorF forward(const TensorF& x, Mode) override { return ops::global_avg_pool(x); }
  Shape output_shape(const Shape& in) const override { return Shape{in.at(0)}; }
  double lipschitz_bound(const Shape& in) const override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<GlobalAvgPool>(); }
  void collect(const std::string&, std::vector<NamedTensor>&) override {}
};

class Flatten : public Layer {
 public:
  std::string kind() const override { return "flatten"; }
  TensorF forward(const TensorF& x, Mode) override { return ops::flatten(x); }
  Shape output_shape(const Shape& in) const override { return Shape{shape_numel(in)}; }
  double lipschitz_bound(const Shape&) const override { return 1.0; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Flatten>(); }
  void collect(const std::string&, std::vector<NamedTensor>&) override {}
};

class Sequential : public Layer {
 public:
  Sequential() = default;
  explicit Sequential(std::vector<std::unique_ptr<Layer>> layers) : layers(std::move(layers)) {}
  std::string kind() const override { return "sequential"; }
  TensorF forward(const TensorF& x, Mode mode) override;
  Shape output_shape(const Shape& in) const override;
  double lipschitz_bound(const Shape& in) const override;
  std::unique_ptr<Layer> clone() const override;
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) override;
  void visit(const std::function<void(Layer&)>& fn) override;

  std::vector<std::unique_ptr<Layer>> layers;
};

/// relu(aggregate(main(x), shortcut(x))); an empty shortcut is the identity.
class ResidualBlock : public Layer {
 public:
  ResidualBlock(Sequential main, Sequential shortcut);
  std::string kind() const override { return "residual"; }
  TensorF forward(const TensorF& x, Mode mode) override;
  Shape output_shape(const Shape& in) const override;
  /// Sum mode adds the branch bounds; convex mode averages them.
  double lipschitz_bound(const Shape& in) const override;
  std::unique_ptr<Layer> clone() const override;
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) override;
  void visit(const std::function<void(Layer&)>& fn) override;

  Sequential main;
  Sequential shortcut;
  ops::Aggregation aggregation = ops::Aggregation::sum;
};

/// Tensor copy that keeps the requires_grad flag.
TensorF copy_parameter(const TensorF& t);

}  // namespace rxf
