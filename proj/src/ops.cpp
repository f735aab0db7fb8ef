#include "rxf/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "rxf/error.hpp"

namespace rxf::ops {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
using Node = typename Tape<T>::Node;

template <typename T>
void check_finite(const char* op, const Tensor<T>& t) {
  for (T v : t.data()) {
    if (!std::isfinite(v)) throw NumericalError(std::string("non-finite value produced by '") + op + "'");
  }
}

// Tape to record into, or nullptr when nothing needs a gradient.
template <typename T>
Tape<T>* recording(std::initializer_list<const Tensor<T>*> inputs) {
  Tape<T>* tape = active_tape<T>();
  if (!tape) return nullptr;
  for (const auto* t : inputs) {
    if (t->defined() && tape->tracks(*t)) return tape;
  }
  return nullptr;
}

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

template <typename T>
void require_rank(const char* op, const Tensor<T>& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                     shape_str(t.shape()));
  }
}

// Channel count and the number of elements per (sample, channel) for (N, C, ...) tensors.
template <typename T>
std::pair<std::int64_t, std::int64_t> channel_layout(const Tensor<T>& x) {
  std::int64_t inner = 1;
  for (std::size_t i = 2; i < x.rank(); ++i) inner *= x.dim(i);
  return {x.dim(1), inner};
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("add", a, b);
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] + b[i];
  check_finite("add", out);
  if (auto* tape = recording({&a, &b})) {
    tape->record("add", {a, b}, out, [](Node<T>& n, std::span<const T> g) {
      for (int k = 0; k < 2; ++k) {
        if (!n.needs_grad[k]) continue;
        auto gi = n.inputs[k].grad();
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("sub", a, b);
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] - b[i];
  check_finite("sub", out);
  if (auto* tape = recording({&a, &b})) {
    tape->record("sub", {a, b}, out, [](Node<T>& n, std::span<const T> g) {
      if (n.needs_grad[0]) {
        auto ga = n.inputs[0].grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (n.needs_grad[1]) {
        auto gb = n.inputs[1].grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("mul", a, b);
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] * b[i];
  check_finite("mul", out);
  if (auto* tape = recording({&a, &b})) {
    tape->record("mul", {a, b}, out, [](Node<T>& n, std::span<const T> g) {
      const auto& a = n.inputs[0];
      const auto& b = n.inputs[1];
      if (n.needs_grad[0]) {
        auto ga = n.inputs[0].grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
      }
      if (n.needs_grad[1]) {
        auto gb = n.inputs[1].grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] * s;
  check_finite("scale", out);
  if (auto* tape = recording({&a})) {
    tape->record("scale", {a}, out, [s](Node<T>& n, std::span<const T> g) {
      auto ga = n.inputs[0].grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
    });
  }
  return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != static_cast<std::int64_t>(a.numel())) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  Tensor<T> out(std::move(shape), std::vector<T>(a.data().begin(), a.data().end()));
  if (auto* tape = recording({&a})) {
    tape->record("reshape", {a}, out, [](Node<T>& n, std::span<const T> g) {
      auto ga = n.inputs[0].grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> flatten(const Tensor<T>& a) {
  if (a.rank() < 1) throw ShapeError("flatten: scalar input");
  const auto n = a.dim(0);
  return reshape(a, Shape{n, static_cast<std::int64_t>(a.numel()) / n});
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  double acc = 0.0;
  for (T v : a.data()) acc += v;
  auto out = Tensor<T>::scalar(static_cast<T>(acc));
  check_finite("sum", out);
  if (auto* tape = recording({&a})) {
    tape->record("sum", {a}, out, [](Node<T>& n, std::span<const T> g) {
      for (auto& gi : n.inputs[0].grad()) gi += g[0];
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  double acc = 0.0;
  for (T v : a.data()) acc += v;
  const double count = static_cast<double>(a.numel());
  auto out = Tensor<T>::scalar(static_cast<T>(acc / count));
  check_finite("mean", out);
  if (auto* tape = recording({&a})) {
    tape->record("mean", {a}, out, [count](Node<T>& n, std::span<const T> g) {
      const T s = static_cast<T>(g[0] / count);
      for (auto& gi : n.inputs[0].grad()) gi += s;
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum_squares(const Tensor<T>& a) {
  double acc = 0.0;
  for (T v : a.data()) acc += static_cast<double>(v) * v;
  auto out = Tensor<T>::scalar(static_cast<T>(acc));
  check_finite("sum_squares", out);
  if (auto* tape = recording({&a})) {
    tape->record("sum_squares", {a}, out, [](Node<T>& n, std::span<const T> g) {
      auto ga = n.inputs[0].grad();
      const auto& x = n.inputs[0];
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += T{2} * x[i] * g[0];
    });
  }
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] > T{0} ? a[i] : T{0};
  check_finite("relu", out);
  if (auto* tape = recording({&a})) {
    tape->record("relu", {a}, out, [](Node<T>& n, std::span<const T> g) {
      auto ga = n.inputs[0].grad();
      const auto& x = n.inputs[0];
      for (std::size_t i = 0; i < ga.size(); ++i) {
        if (x[i] > T{0}) ga[i] += g[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  require_rank("linear", x, 2);
  require_rank("linear", w, 2);
  const auto batch = x.dim(0), in = x.dim(1), outd = w.dim(0);
  if (w.dim(1) != in) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(w.shape()));
  }
  if (b.defined() && (b.rank() != 1 || b.dim(0) != outd)) {
    throw ShapeError("linear: bias " + shape_str(b.shape()) + " for weight " + shape_str(w.shape()));
  }
  Tensor<T> out(Shape{batch, outd});
  MapMat<T> y(out.ptr(), batch, outd);
  y.noalias() = CMapMat<T>(x.ptr(), batch, in) * CMapMat<T>(w.ptr(), outd, in).transpose();
  if (b.defined()) {
    for (std::int64_t r = 0; r < batch; ++r) {
      for (std::int64_t c = 0; c < outd; ++c) y(r, c) += b[c];
    }
  }
  check_finite("linear", out);
  if (auto* tape = recording({&x, &w, &b})) {
    std::vector<Tensor<T>> inputs = {x, w};
    if (b.defined()) inputs.push_back(b);
    tape->record("linear", std::move(inputs), out, [batch, in, outd](Node<T>& n, std::span<const T> g) {
      CMapMat<T> gy(g.data(), batch, outd);
      if (n.needs_grad[0]) {
        MapMat<T>(n.inputs[0].grad().data(), batch, in).noalias() += gy * CMapMat<T>(n.inputs[1].ptr(), outd, in);
      }
      if (n.needs_grad[1]) {
        MapMat<T>(n.inputs[1].grad().data(), outd, in).noalias() +=
            gy.transpose() * CMapMat<T>(n.inputs[0].ptr(), batch, in);
      }
      if (n.inputs.size() > 2 && n.needs_grad[2]) {
        auto gb = n.inputs[2].grad();
        for (std::int64_t c = 0; c < outd; ++c) {
          double acc = 0.0;
          for (std::int64_t r = 0; r < batch; ++r) acc += gy(r, c);
          gb[c] += static_cast<T>(acc);
        }
      }
    });
  }
  return out;
}

namespace {

struct ConvGeometry {
  std::int64_t batch, cin, h, w, cout, k, stride, pad, ho, wo;
  std::int64_t patch() const { return cin * k * k; }
  std::int64_t positions() const { return ho * wo; }
};

// cols: (Cin*K*K, N*Ho*Wo); column index = n*Ho*Wo + oy*Wo + ox.
template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* cols) {
  const std::int64_t total = g.batch * g.positions();
  for (std::int64_t c = 0; c < g.cin; ++c) {
    for (std::int64_t ky = 0; ky < g.k; ++ky) {
      for (std::int64_t kx = 0; kx < g.k; ++kx) {
        T* row = cols + ((c * g.k + ky) * g.k + kx) * total;
        for (std::int64_t n = 0; n < g.batch; ++n) {
          const T* plane = x + (n * g.cin + c) * g.h * g.w;
          T* dst = row + n * g.positions();
          for (std::int64_t oy = 0; oy < g.ho; ++oy) {
            const std::int64_t iy = oy * g.stride - g.pad + ky;
            for (std::int64_t ox = 0; ox < g.wo; ++ox) {
              const std::int64_t ix = ox * g.stride - g.pad + kx;
              dst[oy * g.wo + ox] = (iy >= 0 && iy < g.h && ix >= 0 && ix < g.w) ? plane[iy * g.w + ix] : T{0};
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, const ConvGeometry& g, T* dx) {
  const std::int64_t total = g.batch * g.positions();
  for (std::int64_t c = 0; c < g.cin; ++c) {
    for (std::int64_t ky = 0; ky < g.k; ++ky) {
      for (std::int64_t kx = 0; kx < g.k; ++kx) {
        const T* row = cols + ((c * g.k + ky) * g.k + kx) * total;
        for (std::int64_t n = 0; n < g.batch; ++n) {
          T* plane = dx + (n * g.cin + c) * g.h * g.w;
          const T* src = row + n * g.positions();
          for (std::int64_t oy = 0; oy < g.ho; ++oy) {
            const std::int64_t iy = oy * g.stride - g.pad + ky;
            if (iy < 0 || iy >= g.h) continue;
            for (std::int64_t ox = 0; ox < g.wo; ++ox) {
              const std::int64_t ix = ox * g.stride - g.pad + kx;
              if (ix >= 0 && ix < g.w) plane[iy * g.w + ix] += src[oy * g.wo + ox];
            }
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride, int padding) {
  require_rank("conv2d", x, 4);
  require_rank("conv2d", w, 4);
  if (stride < 1 || padding < 0) throw ShapeError("conv2d: stride must be >= 1 and padding >= 0");
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), stride, padding, 0, 0};
  if (w.dim(1) != g.cin || w.dim(3) != g.k) {
    throw ShapeError("conv2d: input " + shape_str(x.shape()) + " incompatible with filters " + shape_str(w.shape()));
  }
  if (b.defined() && (b.rank() != 1 || b.dim(0) != g.cout)) {
    throw ShapeError("conv2d: bias " + shape_str(b.shape()) + " for filters " + shape_str(w.shape()));
  }
  g.ho = (g.h + 2 * g.pad - g.k) / g.stride + 1;
  g.wo = (g.w + 2 * g.pad - g.k) / g.stride + 1;
  if (g.h + 2 * g.pad < g.k || g.w + 2 * g.pad < g.k) {
    throw ShapeError("conv2d: kernel larger than padded input " + shape_str(x.shape()));
  }
  const std::int64_t total = g.batch * g.positions();
  auto cols = std::make_shared<std::vector<T>>(static_cast<std::size_t>(g.patch() * total));
  im2col(x.ptr(), g, cols->data());
  RowMat<T> y = CMapMat<T>(w.ptr(), g.cout, g.patch()) * CMapMat<T>(cols->data(), g.patch(), total);

  Tensor<T> out(Shape{g.batch, g.cout, g.ho, g.wo});
  T* o = out.ptr();
  for (std::int64_t n = 0; n < g.batch; ++n) {
    for (std::int64_t c = 0; c < g.cout; ++c) {
      const T bias = b.defined() ? b[c] : T{0};
      const T* src = y.data() + c * total + n * g.positions();
      T* dst = o + (n * g.cout + c) * g.positions();
      for (std::int64_t p = 0; p < g.positions(); ++p) dst[p] = src[p] + bias;
    }
  }
  check_finite("conv2d", out);

  if (auto* tape = recording({&x, &w, &b})) {
    std::vector<Tensor<T>> inputs = {x, w};
    if (b.defined()) inputs.push_back(b);
    if (!tape->tracks(w)) cols.reset();  // only the filter gradient needs the patches
    tape->record("conv2d", std::move(inputs), out, [g, cols](Node<T>& n, std::span<const T> gout) {
      const std::int64_t total = g.batch * g.positions();
      // (N, Cout, P) -> (Cout, N*P)
      RowMat<T> gy(g.cout, total);
      for (std::int64_t s = 0; s < g.batch; ++s) {
        for (std::int64_t c = 0; c < g.cout; ++c) {
          std::copy_n(gout.data() + (s * g.cout + c) * g.positions(), g.positions(),
                      gy.data() + c * total + s * g.positions());
        }
      }
      if (n.needs_grad[0]) {
        RowMat<T> dcols = CMapMat<T>(n.inputs[1].ptr(), g.cout, g.patch()).transpose() * gy;
        col2im(dcols.data(), g, n.inputs[0].grad().data());
      }
      if (n.needs_grad[1]) {
        MapMat<T>(n.inputs[1].grad().data(), g.cout, g.patch()).noalias() +=
            gy * CMapMat<T>(cols->data(), g.patch(), total).transpose();
      }
      if (n.inputs.size() > 2 && n.needs_grad[2]) {
        auto gb = n.inputs[2].grad();
        for (std::int64_t c = 0; c < g.cout; ++c) {
          double acc = 0.0;
          const T* row = gy.data() + c * total;
          for (std::int64_t i = 0; i < total; ++i) acc += row[i];
          gb[c] += static_cast<T>(acc);
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, int k) {
  require_rank("max_pool2d", x, 4);
  if (k < 1) throw ShapeError("max_pool2d: window must be >= 1");
  const auto batch = x.dim(0), ch = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t ho = h / k, wo = w / k;
  if (ho < 1 || wo < 1) throw ShapeError("max_pool2d: window larger than input " + shape_str(x.shape()));
  Tensor<T> out(Shape{batch, ch, ho, wo});
  auto argmax = std::make_shared<std::vector<std::int64_t>>(out.numel());
  for (std::int64_t p = 0; p < batch * ch; ++p) {
    const T* plane = x.ptr() + p * h * w;
    for (std::int64_t oy = 0; oy < ho; ++oy) {
      for (std::int64_t ox = 0; ox < wo; ++ox) {
        std::int64_t best = (oy * k) * w + ox * k;
        for (int dy = 0; dy < k; ++dy) {
          for (int dx = 0; dx < k; ++dx) {
            const std::int64_t idx = (oy * k + dy) * w + ox * k + dx;
            if (plane[idx] > plane[best]) best = idx;
          }
        }
        const std::int64_t o = (p * ho + oy) * wo + ox;
        out[o] = plane[best];
        (*argmax)[o] = p * h * w + best;
      }
    }
  }
  check_finite("max_pool2d", out);
  if (auto* tape = recording({&x})) {
    tape->record("max_pool2d", {x}, out, [argmax](Node<T>& n, std::span<const T> g) {
      auto gx = n.inputs[0].grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[(*argmax)[i]] += g[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  require_rank("global_avg_pool", x, 4);
  const auto batch = x.dim(0), ch = x.dim(1), area = x.dim(2) * x.dim(3);
  Tensor<T> out(Shape{batch, ch});
  for (std::int64_t p = 0; p < batch * ch; ++p) {
    double acc = 0.0;
    for (std::int64_t i = 0; i < area; ++i) acc += x[p * area + i];
    out[p] = static_cast<T>(acc / static_cast<double>(area));
  }
  check_finite("global_avg_pool", out);
  if (auto* tape = recording({&x})) {
    tape->record("global_avg_pool", {x}, out, [area](Node<T>& n, std::span<const T> g) {
      auto gx = n.inputs[0].grad();
      for (std::size_t p = 0; p < g.size(); ++p) {
        const T s = static_cast<T>(g[p] / static_cast<double>(area));
        for (std::int64_t i = 0; i < area; ++i) gx[p * area + i] += s;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> batch_norm_train(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, double eps,
                           std::span<double> batch_mean, std::span<double> batch_var) {
  if (x.rank() < 2) throw ShapeError("batch_norm: input needs a channel axis, got " + shape_str(x.shape()));
  const auto [ch, inner] = channel_layout(x);
  const auto batch = x.dim(0);
  if (weight.numel() != static_cast<std::size_t>(ch) || bias.numel() != static_cast<std::size_t>(ch) ||
      batch_mean.size() != static_cast<std::size_t>(ch) || batch_var.size() != static_cast<std::size_t>(ch)) {
    throw ShapeError("batch_norm: parameter length does not match channel count " + std::to_string(ch));
  }
  if (batch < 2) throw ShapeError("batch_norm: training mode needs a batch of at least 2 samples");
  const double count = static_cast<double>(batch * inner);
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto invstd = std::make_shared<std::vector<double>>(ch);
  Tensor<T> out(x.shape());
  for (std::int64_t c = 0; c < ch; ++c) {
    double s = 0.0;
    for (std::int64_t n = 0; n < batch; ++n) {
      const T* p = x.ptr() + (n * ch + c) * inner;
      for (std::int64_t i = 0; i < inner; ++i) s += p[i];
    }
    const double mu = s / count;
    double ss = 0.0;
    for (std::int64_t n = 0; n < batch; ++n) {
      const T* p = x.ptr() + (n * ch + c) * inner;
      for (std::int64_t i = 0; i < inner; ++i) {
        const double d = p[i] - mu;
        ss += d * d;
      }
    }
    const double var = ss / count;
    const double is = 1.0 / std::sqrt(var + eps);
    batch_mean[c] = mu;
    batch_var[c] = var;
    (*invstd)[c] = is;
    for (std::int64_t n = 0; n < batch; ++n) {
      const std::int64_t off = (n * ch + c) * inner;
      for (std::int64_t i = 0; i < inner; ++i) {
        const T xh = static_cast<T>((x[off + i] - mu) * is);
        (*xhat)[off + i] = xh;
        out[off + i] = weight[c] * xh + bias[c];
      }
    }
  }
  check_finite("batch_norm_train", out);
  if (auto* tape = recording({&x, &weight, &bias})) {
    tape->record("batch_norm_train", {x, weight, bias}, out,
                 [xhat, invstd, batch, ch, inner, count](Node<T>& n, std::span<const T> g) {
                   const auto& w = n.inputs[1];
                   for (std::int64_t c = 0; c < ch; ++c) {
                     double sum_g = 0.0, sum_gx = 0.0;
                     for (std::int64_t s = 0; s < batch; ++s) {
                       const std::int64_t off = (s * ch + c) * inner;
                       for (std::int64_t i = 0; i < inner; ++i) {
                         sum_g += g[off + i];
                         sum_gx += static_cast<double>(g[off + i]) * (*xhat)[off + i];
                       }
                     }
                     if (n.needs_grad[1]) n.inputs[1].grad()[c] += static_cast<T>(sum_gx);
                     if (n.needs_grad[2]) n.inputs[2].grad()[c] += static_cast<T>(sum_g);
                     if (!n.needs_grad[0]) continue;
                     auto gx = n.inputs[0].grad();
                     const double k = w[c] * (*invstd)[c] / count;
                     for (std::int64_t s = 0; s < batch; ++s) {
                       const std::int64_t off = (s * ch + c) * inner;
                       for (std::int64_t i = 0; i < inner; ++i) {
                         gx[off + i] += static_cast<T>(k * (count * g[off + i] - sum_g - (*xhat)[off + i] * sum_gx));
                       }
                     }
                   }
                 });
  }
  return out;
}

template <typename T>
Tensor<T> batch_norm_infer(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                           const Tensor<T>& running_mean, const Tensor<T>& running_var, double eps) {
  if (x.rank() < 2) throw ShapeError("batch_norm: input needs a channel axis, got " + shape_str(x.shape()));
  const auto [ch, inner] = channel_layout(x);
  const auto batch = x.dim(0);
  for (const auto* t : {&weight, &bias, &running_mean, &running_var}) {
    if (t->numel() != static_cast<std::size_t>(ch)) {
      throw ShapeError("batch_norm: parameter length does not match channel count " + std::to_string(ch));
    }
  }
  std::vector<T> invstd(ch);
  for (std::int64_t c = 0; c < ch; ++c) invstd[c] = static_cast<T>(1.0 / std::sqrt(double(running_var[c]) + eps));
  Tensor<T> out(x.shape());
  for (std::int64_t s = 0; s < batch; ++s) {
    for (std::int64_t c = 0; c < ch; ++c) {
      const std::int64_t off = (s * ch + c) * inner;
      for (std::int64_t i = 0; i < inner; ++i) {
        out[off + i] = weight[c] * ((x[off + i] - running_mean[c]) * invstd[c]) + bias[c];
      }
    }
  }
  check_finite("batch_norm_infer", out);
  if (auto* tape = recording({&x, &weight, &bias})) {
    tape->record("batch_norm_infer", {x, weight, bias, running_mean}, out,
                 [invstd, batch, ch, inner](Node<T>& n, std::span<const T> g) {
                   const auto& x = n.inputs[0];
                   const auto& w = n.inputs[1];
                   const auto& mu = n.inputs[3];
                   for (std::int64_t c = 0; c < ch; ++c) {
                     double gw = 0.0, gb = 0.0;
                     for (std::int64_t s = 0; s < batch; ++s) {
                       const std::int64_t off = (s * ch + c) * inner;
                       for (std::int64_t i = 0; i < inner; ++i) {
                         gb += g[off + i];
                         gw += static_cast<double>(g[off + i]) * ((x[off + i] - mu[c]) * invstd[c]);
                         if (n.needs_grad[0]) n.inputs[0].grad()[off + i] += g[off + i] * w[c] * invstd[c];
                       }
                     }
                     if (n.needs_grad[1]) n.inputs[1].grad()[c] += static_cast<T>(gw);
                     if (n.needs_grad[2]) n.inputs[2].grad()[c] += static_cast<T>(gb);
                   }
                 });
  }
  return out;
}

template <typename T>
Tensor<T> aggregate(const std::vector<Tensor<T>>& inputs, Aggregation mode) {
  if (inputs.size() < 2) throw ShapeError("aggregate: needs at least 2 inputs");
  for (const auto& t : inputs) require_same_shape("aggregate", inputs.front(), t);
  const T weight = mode == Aggregation::convex ? static_cast<T>(1.0 / static_cast<double>(inputs.size())) : T{1};
  Tensor<T> out(inputs.front().shape());
  for (const auto& t : inputs) {
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += mode == Aggregation::convex ? weight * t[i] : t[i];
  }
  check_finite("aggregate", out);
  Tape<T>* tape = active_tape<T>();
  if (tape && std::any_of(inputs.begin(), inputs.end(), [&](const Tensor<T>& t) { return tape->tracks(t); })) {
    tape->record("aggregate", inputs, out, [weight](Node<T>& n, std::span<const T> g) {
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        if (!n.needs_grad[k]) continue;
        auto gi = n.inputs[k].grad();
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] += weight * g[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  require_rank("softmax_cross_entropy", logits, 2);
  const auto batch = logits.dim(0), classes = logits.dim(1);
  if (labels.size() != static_cast<std::size_t>(batch)) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                     std::to_string(batch));
  }
  auto probs = std::make_shared<std::vector<double>>(logits.numel());
  double total = 0.0;
  for (std::int64_t r = 0; r < batch; ++r) {
    const int y = labels[r];
    if (y < 0 || y >= classes) throw ShapeError("softmax_cross_entropy: label " + std::to_string(y) + " out of range");
    const T* row = logits.ptr() + r * classes;
    const double mx = *std::max_element(row, row + classes);
    double z = 0.0;
    for (std::int64_t c = 0; c < classes; ++c) z += std::exp(row[c] - mx);
    for (std::int64_t c = 0; c < classes; ++c) (*probs)[r * classes + c] = std::exp(row[c] - mx) / z;
    total += std::log(z) + mx - row[y];
  }
  auto out = Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(batch)));
  check_finite("softmax_cross_entropy", out);
  if (auto* tape = recording({&logits})) {
    std::vector<int> ys(labels.begin(), labels.end());
    tape->record("softmax_cross_entropy", {logits}, out,
                 [probs, ys = std::move(ys), batch, classes](Node<T>& n, std::span<const T> g) {
                   auto gl = n.inputs[0].grad();
                   const double s = g[0] / static_cast<double>(batch);
                   for (std::int64_t r = 0; r < batch; ++r) {
                     for (std::int64_t c = 0; c < classes; ++c) {
                       const double d = (*probs)[r * classes + c] - (c == ys[r] ? 1.0 : 0.0);
                       gl[r * classes + c] += static_cast<T>(s * d);
                     }
                   }
                 });
  }
  return out;
}

template <typename T>
Tensor<T> row_l2_distance_sum(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("row_l2_distance_sum", a, b);
  if (a.rank() < 1) throw ShapeError("row_l2_distance_sum: needs a leading batch axis");
  const auto rows = a.dim(0);
  const std::int64_t width = static_cast<std::int64_t>(a.numel()) / rows;
  auto norms = std::make_shared<std::vector<double>>(rows);
  double total = 0.0;
  for (std::int64_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::int64_t i = 0; i < width; ++i) {
      const double d = static_cast<double>(a[r * width + i]) - b[r * width + i];
      ss += d * d;
    }
    (*norms)[r] = std::sqrt(ss);
    total += (*norms)[r];
  }
  auto out = Tensor<T>::scalar(static_cast<T>(total));
  check_finite("row_l2_distance_sum", out);
  if (auto* tape = recording({&a, &b})) {
    tape->record("row_l2_distance_sum", {a, b}, out, [norms, rows, width](Node<T>& n, std::span<const T> g) {
      const auto& a = n.inputs[0];
      const auto& b = n.inputs[1];
      for (std::int64_t r = 0; r < rows; ++r) {
        const double nr = (*norms)[r];
        if (nr == 0.0) continue;
        for (std::int64_t i = 0; i < width; ++i) {
          const std::int64_t idx = r * width + i;
          const T d = static_cast<T>(g[0] * (static_cast<double>(a[idx]) - b[idx]) / nr);
          if (n.needs_grad[0]) n.inputs[0].grad()[idx] += d;
          if (n.needs_grad[1]) n.inputs[1].grad()[idx] -= d;
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> spectral_scale(const Tensor<T>& w, std::span<const double> u, std::span<const double> v, double beta) {
  if (w.rank() < 2) throw ShapeError("spectral_scale: weight must have rank >= 2, got " + shape_str(w.shape()));
  const std::int64_t rows = w.dim(0);
  const std::int64_t cols = static_cast<std::int64_t>(w.numel()) / rows;
  if (u.size() != static_cast<std::size_t>(rows) || v.size() != static_cast<std::size_t>(cols)) {
    throw ShapeError("spectral_scale: singular vectors do not match weight " + shape_str(w.shape()));
  }
  double sigma = 0.0;
  for (std::int64_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::int64_t c = 0; c < cols; ++c) acc += w[r * cols + c] * v[c];
    sigma += u[r] * acc;
  }
  if (!(std::abs(sigma) > 0.0)) throw NumericalError("spectral_scale: degenerate spectral norm estimate");
  const double factor = beta / sigma;
  Tensor<T> out(w.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = static_cast<T>(factor * w[i]);
  check_finite("spectral_scale", out);
  if (auto* tape = recording({&w})) {
    std::vector<double> uu(u.begin(), u.end()), vv(v.begin(), v.end());
    tape->record("spectral_scale", {w}, out,
                 [uu = std::move(uu), vv = std::move(vv), sigma, beta, rows, cols](Node<T>& n, std::span<const T> g) {
                   const auto& w = n.inputs[0];
                   double gw_dot = 0.0;
                   for (std::size_t i = 0; i < g.size(); ++i) gw_dot += static_cast<double>(g[i]) * w[i];
                   const double a = beta / sigma;
                   const double b = beta * gw_dot / (sigma * sigma);
                   auto gx = n.inputs[0].grad();
                   for (std::int64_t r = 0; r < rows; ++r) {
                     for (std::int64_t c = 0; c < cols; ++c) {
                       const std::int64_t i = r * cols + c;
                       gx[i] += static_cast<T>(a * g[i] - b * uu[r] * vv[c]);
                     }
                   }
                 });
  }
  return out;
}

template <typename T>
std::vector<double> cross_entropy_per_example(const Tensor<T>& logits, std::span<const int> labels) {
  require_rank("cross_entropy_per_example", logits, 2);
  const auto batch = logits.dim(0), classes = logits.dim(1);
  std::vector<double> out(batch);
  for (std::int64_t r = 0; r < batch; ++r) {
    const T* row = logits.ptr() + r * classes;
    const double mx = *std::max_element(row, row + classes);
    double z = 0.0;
    for (std::int64_t c = 0; c < classes; ++c) z += std::exp(row[c] - mx);
    out[r] = std::log(z) + mx - row[labels[r]];
  }
  return out;
}

template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits) {
  require_rank("argmax_rows", logits, 2);
  const auto batch = logits.dim(0), classes = logits.dim(1);
  std::vector<int> out(batch);
  for (std::int64_t r = 0; r < batch; ++r) {
    const T* row = logits.ptr() + r * classes;
    out[r] = static_cast<int>(std::max_element(row, row + classes) - row);
  }
  return out;
}

#define RXF_INSTANTIATE_OPS(T)                                                                                    \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                                    \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                                    \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                                    \
  template Tensor<T> scale(const Tensor<T>&, T);                                                                 \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                           \
  template Tensor<T> flatten(const Tensor<T>&);                                                                  \
  template Tensor<T> sum(const Tensor<T>&);                                                                      \
  template Tensor<T> mean(const Tensor<T>&);                                                                     \
  template Tensor<T> sum_squares(const Tensor<T>&);                                                              \
  template Tensor<T> relu(const Tensor<T>&);                                                                     \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int);                     \
  template Tensor<T> max_pool2d(const Tensor<T>&, int);                                                          \
  template Tensor<T> global_avg_pool(const Tensor<T>&);                                                          \
  template Tensor<T> batch_norm_train(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double,              \
                                      std::span<double>, std::span<double>);                                     \
  template Tensor<T> batch_norm_infer(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,    \
                                      const Tensor<T>&, double);                                                 \
  template Tensor<T> aggregate(const std::vector<Tensor<T>>&, Aggregation);                                      \
  template Tensor<T> softmax_cross_entropy(const Tensor<T>&, std::span<const int>);                              \
  template Tensor<T> row_l2_distance_sum(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> spectral_scale(const Tensor<T>&, std::span<const double>, std::span<const double>, double); \
  template std::vector<double> cross_entropy_per_example(const Tensor<T>&, std::span<const int>);                \
  template std::vector<int> argmax_rows(const Tensor<T>&);

RXF_INSTANTIATE_OPS(float)
RXF_INSTANTIATE_OPS(double)

}  // namespace rxf::ops
