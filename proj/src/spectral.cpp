#include "rxf/spectral.hpp"

#include <Eigen/Dense>
#include <cmath>

#include "rxf/error.hpp"
#include "rxf/ops.hpp"

namespace rxf {

namespace {

double normalize(std::vector<double>& x) {
  double ss = 0.0;
  for (double v : x) ss += v * v;
  const double n = std::sqrt(ss);
  if (n > 0.0) {
    for (double& v : x) v /= n;
  }
  return n;
}

}  // namespace

MatrixView as_matrix(const TensorF& w) {
  if (w.rank() < 2) throw ShapeError("as_matrix: weight must have rank >= 2, got " + shape_str(w.shape()));
  return MatrixView{w.ptr(), w.dim(0), static_cast<std::int64_t>(w.numel()) / w.dim(0)};
}

SpectralState SpectralState::init(std::int64_t rows, std::int64_t cols, Rng& rng) {
  SpectralState s;
  s.u.resize(rows);
  s.v.resize(cols);
  for (auto& x : s.u) x = rng.normal();
  for (auto& x : s.v) x = rng.normal();
  normalize(s.u);
  normalize(s.v);
  return s;
}

double power_iteration(const MatrixView& w, SpectralState& state, int iters) {
  if (state.u.size() != static_cast<std::size_t>(w.rows) || state.v.size() != static_cast<std::size_t>(w.cols)) {
    throw ShapeError("power_iteration: state dimensioned for a different matrix");
  }
  std::vector<double> wtu(w.cols), wv(w.rows);
  for (int it = 0; it < iters; ++it) {
    std::fill(wtu.begin(), wtu.end(), 0.0);
    for (std::int64_t r = 0; r < w.rows; ++r) {
      const double ur = state.u[r];
      for (std::int64_t c = 0; c < w.cols; ++c) wtu[c] += w.at(r, c) * ur;
    }
    if (normalize(wtu) == 0.0) break;
    state.v = wtu;
    for (std::int64_t r = 0; r < w.rows; ++r) {
      double acc = 0.0;
      for (std::int64_t c = 0; c < w.cols; ++c) acc += w.at(r, c) * state.v[c];
      wv[r] = acc;
    }
    if (normalize(wv) == 0.0) break;
    state.u = wv;
  }
  double sigma = 0.0;
  for (std::int64_t r = 0; r < w.rows; ++r) {
    double acc = 0.0;
    for (std::int64_t c = 0; c < w.cols; ++c) acc += w.at(r, c) * state.v[c];
    sigma += state.u[r] * acc;
  }
  state.degenerate = !(sigma > state.eps_div);
  state.sigma = state.degenerate ? state.eps_div : sigma;
  return state.sigma;
}

double exact_spectral_norm(const MatrixView& w) {
  Eigen::MatrixXd m(w.rows, w.cols);
  for (std::int64_t r = 0; r < w.rows; ++r)
    for (std::int64_t c = 0; c < w.cols; ++c) m(r, c) = w.at(r, c);
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
  return svd.singularValues().size() ? svd.singularValues()(0) : 0.0;
}

TensorF neft_normalize(const TensorF& w, SpectralState& state, double beta, bool update) {
  if (update || state.sigma == 0.0) power_iteration(as_matrix(w), state, update ? state.iters_per_step : 0);
  if (state.degenerate) return w;
  return ops::spectral_scale(w, state.u, state.v, beta);
}

}  // namespace rxf
