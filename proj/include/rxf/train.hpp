#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "rxf/attack.hpp"
#include "rxf/dataset.hpp"
#include "rxf/network.hpp"

namespace rxf {

/// Step decay: lr(e) = base_lr * decay^(number of milestones <= e).
struct Schedule {
  double base_lr = 0.1;
  std::vector<int> milestones = {40, 70, 90};
  double decay = 0.2;
  int total_epochs = 100;

  double lr_at_epoch(int epoch) const;
};

/// Momentum SGD buffers keyed by parameter identity.
struct OptimState {
  double momentum = 0.9;
  double lr = 0.1;
  std::vector<TensorF> params;  // identity keys
  std::vector<std::vector<float>> velocity;

  const std::vector<float>* buffer_of(const TensorF& p) const;
};

/// v <- momentum * v + g; p <- p - lr * v for every parameter with
/// requires_grad. Parameters without requires_grad are skipped even when they
/// carry a gradient. Throws std::logic_error when a trainable parameter has no
/// gradient.
void sgd_step(std::vector<TensorF>& params, OptimState& state);

struct EpochMetrics {
  int epoch = 0;
  double lr = 0.0;
  double clean_loss = NAN;
  double adv_loss = NAN;
  double fdm_penalty = NAN;
  double clean_acc = NAN;
  double adv_acc = NAN;
  double feature_distance = NAN;  // mean per-example extractor feature distance
  double seconds = 0.0;
};

struct TrainConfig {
  int epochs = 100;
  std::size_t batch_size = 128;
  Schedule schedule;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  bool augment_flip = false;
  bool augment_crop = false;
  int crop_padding = 2;
  /// Adversarial regimes also report clean loss/accuracy (one extra
  /// inference-mode forward per batch).
  bool track_clean = true;
  std::function<void(const EpochMetrics&)> on_epoch;
  /// Called with the global step index after backward, before the update.
  std::function<void(std::size_t)> on_step;
};

struct TrainResult {
  std::vector<EpochMetrics> epochs;
};

/// Loss on one batch under the active tape; fills the per-batch metric sums.
struct StepStats {
  TensorF loss;
  double clean_loss = NAN, adv_loss = NAN, penalty = NAN, feature_distance = NAN;
  double clean_correct = NAN, adv_correct = NAN;
};
using StepFn = std::function<StepStats(const Batch& batch, Rng& attack_rng)>;

/// Shared epoch loop: seeded shuffling per epoch, optional flip/crop
/// augmentation, momentum SGD on net.trainable_parameters(). Batches smaller
/// than 2 are dropped (batch statistics need two samples).
TrainResult run_training(Network& net, const Dataset& ds, const TrainConfig& cfg, const StepFn& step);

TrainResult train_standard(Network& net, const Dataset& ds, const TrainConfig& cfg);
TrainResult train_adversarial(Network& net, const Dataset& ds, const AttackConfig& attack, const TrainConfig& cfg);

struct FdmConfig {
  double lambda = 0.01;
  int k = 1;  // blocks after the split; the split index is L - k
  /// Divide the penalty by the batch size (batch-size invariance studies).
  bool mean_over_batch = false;
};

struct FdmLoss {
  TensorF total;
  TensorF cross_entropy;
  double penalty = 0.0;           // (lambda / sqrt(d)) * sum_i ||f(x)_i - f(x~)_i||
  double mean_feature_distance = 0.0;
  std::int64_t feature_dim = 0;
  TensorF adv_logits;
};

/// Adversarial cross-entropy plus the scaled feature distance between the
/// extractor outputs for x and x_adv. The adversarial pass runs in `mode`; the
/// clean pass uses batch statistics without touching running statistics.
FdmLoss fdm_loss(Network& net, const TensorF& x, const TensorF& x_adv, std::span<const int> y, const FdmConfig& fdm,
                 Mode mode = Mode::train);

TrainResult train_source_fdm(Network& net, const Dataset& ds, const AttackConfig& attack, const FdmConfig& fdm,
                             const TrainConfig& cfg);

/// Flip/crop augmentation with a per-batch generator (deterministic).
TensorF augment(const TensorF& x, bool flip, bool crop, int padding, Rng& rng);

}  // namespace rxf
