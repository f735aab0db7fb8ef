#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "rxf/rng.hpp"
#include "rxf/tensor.hpp"

namespace rxf {

/// Row-major matrix view over existing storage (no ownership).
struct MatrixView {
  const float* data = nullptr;
  std::int64_t rows = 0;
  std::int64_t cols = 0;

  float at(std::int64_t r, std::int64_t c) const { return data[r * cols + c]; }
};

/// Views any weight tensor of rank >= 2 as (shape[0], numel / shape[0]).
MatrixView as_matrix(const TensorF& w);

/// Power-iteration state for one constrained parameter. u and v stay unit
/// length and persist across training steps (warm start).
struct SpectralState {
  std::vector<double> u;
  std::vector<double> v;
  int iters_per_step = 1;
  double eps_div = 1e-12;
  double sigma = 0.0;       // most recent estimate
  bool degenerate = false;  // most recent estimate fell to eps_div or below

  /// u, v from seeded Gaussian draws, normalized.
  static SpectralState init(std::int64_t rows, std::int64_t cols, Rng& rng);
};

/// Runs `iters` rounds of v <- W^T u / |W^T u|, u <- W v / |W v| and returns
/// sigma = u^T W v. A zero matrix yields eps_div with the degeneracy flag set.
double power_iteration(const MatrixView& w, SpectralState& state, int iters);

/// Largest singular value via a full SVD; used for reporting and bounds.
double exact_spectral_norm(const MatrixView& w);

/// Effective weight beta * W / sigma. With `update`, the state first advances
/// by its per-step iteration count. A degenerate estimate returns W unchanged
/// (normalization skipped for this step, flag set in the state).
TensorF neft_normalize(const TensorF& w, SpectralState& state, double beta, bool update);

}  // namespace rxf
