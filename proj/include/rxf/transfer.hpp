#pragma once

#include <functional>
#include <string>
#include <vector>

#include "rxf/dataset.hpp"
#include "rxf/network.hpp"
#include "rxf/train.hpp"

namespace rxf {

enum class TransferMode { vanilla, neft, lwf };

std::string to_string(TransferMode mode);
TransferMode transfer_mode_from_string(const std::string& s);

/// Which BN tensors stay fixed during fine-tuning. Extractor affine
/// parameters are always frozen (the whole extractor is); sub-model running
/// statistics always update.
struct BnPolicy {
  bool extractor_stats_frozen = true;
  bool submodel_affine_frozen = true;
  /// Not allowed: fine-tuning with frozen sub-model statistics does not converge.
  bool submodel_stats_frozen = false;
};

nlohmann::json bn_policy_to_json(const BnPolicy& p);

/// Sets BN flags on both sides of the split. Throws ConfigError for frozen
/// sub-model statistics.
void apply_bn_policy(Network& net, std::size_t split_index, const BnPolicy& policy);

struct TransferConfig {
  TransferMode mode = TransferMode::vanilla;
  int k = 1;  // lwf: 0 or L (all blocks)
  double beta = 1.0;
  double lambda_d = 0.0;
  BnPolicy bn;
  TrainConfig train;
  /// Replace the classifier with a fresh one sized for the target classes.
  bool reinit_head = true;
  int power_iters_per_step = 1;
  int warmup_iters = 5;
  int bake_iters = 100;
};

struct LayerNormReport {
  std::string name;
  std::string kind;
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  double spectral_norm = 0.0;  // full-SVD value of the stored matrix
};

struct TransferResult {
  Network net;
  TrainResult train;
  BnPolicy applied_policy;
  int k = 0;
  std::size_t split_index = 0;
  std::vector<LayerNormReport> spectral_report;  // fine-tuned dense/conv layers
};

/// Per-step hook for inspection (called after backward, before the update).
using StepHook = std::function<void(std::size_t step, Network& net)>;

/// Vanilla, NEFT or LwF fine-tuning of a copy of `source` on `target`.
TransferResult transfer(const Network& source, const Dataset& target, const TransferConfig& cfg,
                        const StepHook& hook = nullptr);

/// Switches the sub-model to NEFT: spectral normalization with `beta` on every
/// dense/conv layer (u, v seeded, then `warmup_iters` power iterations) and
/// convex aggregation in residual blocks.
void neft_attach(Network& net, std::size_t split_index, double beta, int iters_per_step, int warmup_iters,
                 std::uint64_t seed);

/// Replaces each normalized weight by beta * W / sigma with sigma from `iters`
/// further power iterations, and removes the spectral state.
void neft_bake(Network& net, std::size_t split_index, int iters);

std::vector<LayerNormReport> spectral_report(Network& net, std::size_t split_index);

struct LwfLoss {
  TensorF total;
  TensorF cross_entropy;
  double penalty = 0.0;  // lambda_d * sum_i ||f^(L-1)(x; theta)_i - f^(L-1)(x; theta0)_i||
  TensorF logits;
};

/// Cross-entropy plus the penultimate feature distance to the snapshot.
/// The snapshot is evaluated in inference mode and never tracked.
LwfLoss lwf_loss(Network& net, Network& snapshot, const TensorF& x, std::span<const int> y, double lambda_d);

/// Largest ||f(x) - f(x')|| / ||x - x'|| over n_pairs random pairs with
/// 0 < ||x - x'|| <= radius. x is drawn from `anchor` when given (rows
/// cycled), else standard normal. A lower bound on the Lipschitz constant.
double empirical_lipschitz_probe(const std::function<TensorF(const TensorF&)>& fn, const Shape& sample_shape,
                                 std::size_t n_pairs, double radius, Rng& rng, const TensorF& anchor = TensorF());

/// Product of per-layer bounds over blocks [begin, end) in inference mode.
double lipschitz_bound_product(const Network& net, std::size_t begin, std::size_t end);

}  // namespace rxf
