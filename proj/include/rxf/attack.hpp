#pragma once

#include <functional>
#include <span>

#include "rxf/dataset.hpp"
#include "rxf/layers.hpp"
#include "rxf/network.hpp"
#include "rxf/rng.hpp"
#include "rxf/tensor.hpp"

namespace rxf {

/// l-inf attack budget. Inputs live in [0, 1].
struct AttackConfig {
  double epsilon = 8.0 / 255.0;
  double alpha = 2.0 / 255.0;
  int steps = 7;
  bool random_start = true;
  /// BN treatment while crafting; batch_stats exists for sensitivity studies.
  Mode bn_mode = Mode::inference;

  /// 0 < alpha <= epsilon <= 1 and steps >= 1. epsilon = 0 is accepted as the
  /// zero-budget attack (alpha is then irrelevant: every step projects to 0).
  void validate() const;
};

/// Scalar objective of the attacked input, evaluated under the active tape.
using InputLoss = std::function<TensorF(const TensorF& x_adv)>;

/// Clamps delta to [-eps, eps] and then to [-x, 1 - x], elementwise.
TensorF project_linf(const TensorF& delta, const TensorF& x, double epsilon);

/// d loss / d x at x (model parameters are not tracked).
TensorF input_gradient(const TensorF& x, const InputLoss& loss);

/// x + eps * sign(grad), projected; sign(0) = 0.
TensorF fgsm(const TensorF& x, const InputLoss& loss, const AttackConfig& cfg);
/// N projected sign-gradient steps of size alpha from delta0 (uniform in
/// [-eps, eps] drawn from rng when random_start, else 0).
TensorF pgd(const TensorF& x, const InputLoss& loss, const AttackConfig& cfg, Rng& rng);
/// PGD from an explicit starting perturbation.
TensorF pgd_from(const TensorF& x, const InputLoss& loss, const AttackConfig& cfg, const TensorF& delta0);

/// Cross-entropy of the network on (x, y) with BN in cfg.bn_mode.
InputLoss cross_entropy_objective(Network& net, std::span<const int> labels, Mode bn_mode);

TensorF fgsm(Network& net, const TensorF& x, std::span<const int> y, const AttackConfig& cfg);
TensorF pgd(Network& net, const TensorF& x, std::span<const int> y, const AttackConfig& cfg, Rng& rng);

struct AccuracyReport {
  double clean_accuracy = 0.0;
  double robust_accuracy = 0.0;
  double clean_loss = 0.0;
  double robust_loss = 0.0;
  std::size_t examples = 0;
};

/// Clean and PGD accuracy over the dataset in inference mode. Example i
/// starts from a perturbation drawn from rng.fork(i), so results do not depend
/// on batching or on the number of workers.
AccuracyReport robust_accuracy(Network& net, const Dataset& ds, const AttackConfig& cfg, const Rng& rng,
                               std::size_t batch_size = 250, int workers = 1);

}  // namespace rxf
