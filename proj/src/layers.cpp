#include "rxf/layers.hpp"

#include <algorithm>
#include <cmath>

#include "rxf/error.hpp"

namespace rxf {

namespace {

TensorF kaiming(const Shape& shape, std::int64_t fan_in, Rng& rng) {
  TensorF t(shape);
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& v : t.data()) v = static_cast<float>(rng.normal(0.0, stddev));
  return t;
}

}  // namespace

TensorF copy_parameter(const TensorF& t) {
  if (!t.defined()) return t;
  auto c = t.clone();
  c.set_requires_grad(t.requires_grad());
  return c;
}

TensorF WeightedLayer::effective_weight(Mode mode) {
  if (!spectral) return weight;
  return neft_normalize(weight, spectral->state, spectral->beta, mode == Mode::train);
}

double WeightedLayer::effective_spectral_norm() const {
  const double raw = exact_spectral_norm(as_matrix(weight));
  if (!spectral || spectral->state.degenerate || spectral->state.sigma == 0.0) return raw;
  // The forward pass applies beta / (u^T W v) with the stored u, v.
  double sigma = 0.0;
  const auto m = as_matrix(weight);
  for (std::int64_t r = 0; r < m.rows; ++r) {
    double acc = 0.0;
    for (std::int64_t c = 0; c < m.cols; ++c) acc += m.at(r, c) * spectral->state.v[c];
    sigma += spectral->state.u[r] * acc;
  }
  return raw * spectral->beta / std::abs(sigma);
}

void WeightedLayer::collect(const std::string& prefix, std::vector<NamedTensor>& out) {
  out.push_back({prefix + "weight", weight, true});
  if (bias.defined()) out.push_back({prefix + "bias", bias, true});
}

Dense::Dense(std::int64_t in, std::int64_t out, Rng& rng) {
  weight = kaiming({out, in}, in, rng).set_requires_grad(true);
  bias = TensorF(Shape{out}).set_requires_grad(true);
}

Dense::Dense(TensorF w, TensorF b) {
  weight = std::move(w);
  bias = std::move(b);
}

TensorF Dense::forward(const TensorF& x, Mode mode) { return ops::linear(x, effective_weight(mode), bias); }

Shape Dense::output_shape(const Shape& in) const {
  if (in.size() != 1 || in[0] != weight.dim(1)) {
    throw ShapeError("dense: input " + shape_str(in) + " for weight " + shape_str(weight.shape()));
  }
  return Shape{weight.dim(0)};
}

double Dense::lipschitz_bound(const Shape&) const { return effective_spectral_norm(); }

std::unique_ptr<Layer> Dense::clone() const {
  auto d = std::make_unique<Dense>(copy_parameter(weight), copy_parameter(bias));
  d->spectral = spectral;
  return d;
}

Conv2D::Conv2D(std::int64_t cin, std::int64_t cout, int kernel, int stride_, int padding_, Rng& rng)
    : stride(stride_), padding(padding_) {
  if (kernel < 1) throw ShapeError("conv2d: kernel size must be >= 1");
  weight = kaiming({cout, cin, kernel, kernel}, cin * kernel * kernel, rng).set_requires_grad(true);
  bias = TensorF(Shape{cout}).set_requires_grad(true);
}

TensorF Conv2D::forward(const TensorF& x, Mode mode) {
  return ops::conv2d(x, effective_weight(mode), bias, stride, padding);
}

Shape Conv2D::output_shape(const Shape& in) const {
  if (in.size() != 3 || in[0] != in_channels()) {
    throw ShapeError("conv2d: input " + shape_str(in) + " for filters " + shape_str(weight.shape()));
  }
  const std::int64_t ho = (in[1] + 2 * padding - kernel()) / stride + 1;
  const std::int64_t wo = (in[2] + 2 * padding - kernel()) / stride + 1;
  if (ho < 1 || wo < 1) throw ShapeError("conv2d: input " + shape_str(in) + " smaller than kernel");
  return Shape{out_channels(), ho, wo};
}

double Conv2D::lipschitz_bound(const Shape&) const {
  const double overlap = std::ceil(static_cast<double>(kernel()) / stride);
  return effective_spectral_norm() * overlap;
}

std::unique_ptr<Layer> Conv2D::clone() const {
  Rng unused;
  auto c = std::make_unique<Conv2D>(in_channels(), out_channels(), kernel(), stride, padding, unused);
  c->weight = copy_parameter(weight);
  c->bias = copy_parameter(bias);
  c->spectral = spectral;
  return c;
}

MatrixView conv_weight_as_matrix(const Conv2D& layer) { return as_matrix(layer.weight); }

TensorF matrix_as_conv_weight(const MatrixView& m, std::int64_t in_channels, int kernel) {
  if (m.cols != in_channels * kernel * kernel) {
    throw ShapeError("matrix_as_conv_weight: " + std::to_string(m.cols) + " columns do not hold " +
                     std::to_string(in_channels) + "x" + std::to_string(kernel) + "x" + std::to_string(kernel));
  }
  return TensorF(Shape{m.rows, in_channels, kernel, kernel}, std::vector<float>(m.data, m.data + m.rows * m.cols));
}

BatchNorm::BatchNorm(std::int64_t channels)
    : weight(Shape{channels}, 1.0f),
      bias(Shape{channels}, 0.0f),
      running_mean(Shape{channels}, 0.0f),
      running_var(Shape{channels}, 1.0f) {
  weight.set_requires_grad(true);
  bias.set_requires_grad(true);
}

void BatchNorm::set_affine_frozen(bool frozen) {
  weight.set_requires_grad(!frozen);
  bias.set_requires_grad(!frozen);
}

TensorF BatchNorm::forward(const TensorF& x, Mode mode) {
  if (stats_frozen || mode == Mode::inference) {
    return ops::batch_norm_infer(x, weight, bias, running_mean, running_var, eps);
  }
  const auto ch = static_cast<std::size_t>(weight.numel());
  std::vector<double> mean(ch), var(ch);
  auto y = ops::batch_norm_train(x, weight, bias, eps, mean, var);
  if (mode == Mode::train) {
    for (std::size_t c = 0; c < ch; ++c) {
      running_mean[c] = static_cast<float>((1.0 - momentum) * running_mean[c] + momentum * mean[c]);
      running_var[c] = static_cast<float>((1.0 - momentum) * running_var[c] + momentum * var[c]);
    }
  }
  return y;
}

double BatchNorm::lipschitz_bound(const Shape&) const {
  double m = 0.0;
  for (std::size_t c = 0; c < weight.numel(); ++c) {
    m = std::max(m, std::abs(double(weight[c])) / std::sqrt(double(running_var[c]) + eps));
  }
  return m;
}

std::unique_ptr<Layer> BatchNorm::clone() const {
  auto b = std::make_unique<BatchNorm>(weight.numel());
  b->weight = copy_parameter(weight);
  b->bias = copy_parameter(bias);
  b->running_mean = running_mean.clone();
  b->running_var = running_var.clone();
  b->momentum = momentum;
  b->eps = eps;
  b->stats_frozen = stats_frozen;
  return b;
}

void BatchNorm::collect(const std::string& prefix, std::vector<NamedTensor>& out) {
  out.push_back({prefix + "weight", weight, true});
  out.push_back({prefix + "bias", bias, true});
  out.push_back({prefix + "running_mean", running_mean, false});
  out.push_back({prefix + "running_var", running_var, false});
}

Shape MaxPool::output_shape(const Shape& in) const {
  if (in.size() != 3) throw ShapeError("maxpool: input " + shape_str(in));
  return Shape{in[0], in[1] / window, in[2] / window};
}

double GlobalAvgPool::lipschitz_bound(const Shape& in) const {
  // Averaging n entries has l2 gain 1/sqrt(n).
  return 1.0 / std::sqrt(static_cast<double>(in.at(1) * in.at(2)));
}

TensorF Sequential::forward(const TensorF& x, Mode mode) {
  TensorF h = x;
  for (auto& l : layers) h = l->forward(h, mode);
  return h;
}

Shape Sequential::output_shape(const Shape& in) const {
  Shape s = in;
  for (const auto& l : layers) s = l->output_shape(s);
  return s;
}

double Sequential::lipschitz_bound(const Shape& in) const {
  double bound = 1.0;
  Shape s = in;
  for (const auto& l : layers) {
    bound *= l->lipschitz_bound(s);
    s = l->output_shape(s);
  }
  return bound;
}

std::unique_ptr<Layer> Sequential::clone() const {
  auto s = std::make_unique<Sequential>();
  for (const auto& l : layers) s->layers.push_back(l->clone());
  return s;
}

void Sequential::collect(const std::string& prefix, std::vector<NamedTensor>& out) {
  for (std::size_t i = 0; i < layers.size(); ++i) layers[i]->collect(prefix + std::to_string(i) + ".", out);
}

void Sequential::visit(const std::function<void(Layer&)>& fn) {
  fn(*this);
  for (auto& l : layers) l->visit(fn);
}

ResidualBlock::ResidualBlock(Sequential main_, Sequential shortcut_)
    : main(std::move(main_)), shortcut(std::move(shortcut_)) {}

TensorF ResidualBlock::forward(const TensorF& x, Mode mode) {
  auto a = main.forward(x, mode);
  auto b = shortcut.layers.empty() ? x : shortcut.forward(x, mode);
  return ops::relu(ops::aggregate<float>({a, b}, aggregation));
}

Shape ResidualBlock::output_shape(const Shape& in) const {
  const Shape a = main.output_shape(in);
  const Shape b = shortcut.layers.empty() ? in : shortcut.output_shape(in);
  if (a != b) throw ShapeError("residual: branch shapes " + shape_str(a) + " and " + shape_str(b) + " differ");
  return a;
}

double ResidualBlock::lipschitz_bound(const Shape& in) const {
  const double a = main.lipschitz_bound(in);
  const double b = shortcut.layers.empty() ? 1.0 : shortcut.lipschitz_bound(in);
  return aggregation == ops::Aggregation::convex ? 0.5 * (a + b) : a + b;
}

std::unique_ptr<Layer> ResidualBlock::clone() const {
  auto m = main.clone();
  auto s = shortcut.clone();
  auto r = std::make_unique<ResidualBlock>(std::move(static_cast<Sequential&>(*m)), std::move(static_cast<Sequential&>(*s)));
  r->aggregation = aggregation;
  return r;
}

void ResidualBlock::collect(const std::string& prefix, std::vector<NamedTensor>& out) {
  main.collect(prefix + "main.", out);
  shortcut.collect(prefix + "short.", out);
}

void ResidualBlock::visit(const std::function<void(Layer&)>& fn) {
  fn(*this);
  main.visit(fn);
  shortcut.visit(fn);
}

}  // namespace rxf
