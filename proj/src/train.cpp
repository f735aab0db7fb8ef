#include "rxf/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>

#include "rxf/error.hpp"
#include "rxf/ops.hpp"
#include "rxf/tape.hpp"

namespace rxf {

namespace {

// Rng streams per purpose, so the attack draws never shift the batch order.
constexpr std::uint64_t kShuffleStream = 0x5117;
constexpr std::uint64_t kAttackStream = 0xA77C;
constexpr std::uint64_t kAugmentStream = 0xA06E;

double count_correct(const TensorF& logits, std::span<const int> y) {
  const auto pred = ops::argmax_rows(logits);
  double c = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) c += pred[i] == y[i];
  return c;
}

void track_clean(Network& net, const Batch& b, StepStats& s) {
  NoGradScope<float> off;
  const TensorF logits = net.forward(b.x, Mode::inference);
  const auto ce = ops::cross_entropy_per_example(logits, b.y);
  double sum = 0.0;
  for (double v : ce) sum += v;
  s.clean_loss = sum / static_cast<double>(b.y.size());
  s.clean_correct = count_correct(logits, b.y);
}

struct Accumulator {
  double sum = 0.0;
  double weight = 0.0;
  void add(double v, double w) {
    if (std::isnan(v)) return;
    sum += v * w;
    weight += w;
  }
  double mean() const { return weight > 0.0 ? sum / weight : NAN; }
};

}  // namespace

double Schedule::lr_at_epoch(int epoch) const {
  if (epoch < 0 || epoch >= total_epochs) {
    throw std::out_of_range("epoch " + std::to_string(epoch) + " outside 0.." + std::to_string(total_epochs - 1));
  }
  double lr = base_lr;
  for (int m : milestones) {
    if (m <= epoch) lr *= decay;
  }
  return lr;
}

const std::vector<float>* OptimState::buffer_of(const TensorF& p) const {
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].same_as(p)) return &velocity[i];
  }
  return nullptr;
}

void sgd_step(std::vector<TensorF>& params, OptimState& state) {
  const auto mu = static_cast<float>(state.momentum);
  const auto lr = static_cast<float>(state.lr);
  for (auto& p : params) {
    if (!p.requires_grad()) continue;
    if (!p.has_grad()) throw std::logic_error("sgd_step: trainable parameter " + shape_str(p.shape()) + " has no gradient");
    auto* buf = const_cast<std::vector<float>*>(state.buffer_of(p));
    if (!buf) {
      state.params.push_back(p);
      state.velocity.emplace_back(p.numel(), 0.0f);
      buf = &state.velocity.back();
    }
    if (buf->size() != p.numel()) throw ShapeError("sgd_step: momentum buffer does not match parameter shape");
    const auto g = p.grad();
    auto w = p.data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      (*buf)[i] = mu * (*buf)[i] + g[i];
      w[i] = w[i] - lr * (*buf)[i];
    }
  }
}

TensorF augment(const TensorF& x, bool flip, bool crop, int padding, Rng& rng) {
  if ((!flip && !crop) || x.rank() != 4) return x;
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  TensorF out(x.shape());
  for (std::int64_t i = 0; i < n; ++i) {
    const bool mirror = flip && rng.uniform() < 0.5;
    std::int64_t dy = 0, dx = 0;
    if (crop) {
      dy = static_cast<std::int64_t>(rng.below(2 * padding + 1)) - padding;
      dx = static_cast<std::int64_t>(rng.below(2 * padding + 1)) - padding;
    }
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const float* src = x.ptr() + (i * c + ch) * h * w;
      float* dst = out.ptr() + (i * c + ch) * h * w;
      for (std::int64_t yy = 0; yy < h; ++yy) {
        for (std::int64_t xx = 0; xx < w; ++xx) {
          const std::int64_t sy = yy + dy;
          std::int64_t sx = xx + dx;
          if (mirror) sx = w - 1 - sx;
          dst[yy * w + xx] = (sy >= 0 && sy < h && sx >= 0 && sx < w) ? src[sy * w + sx] : 0.0f;
        }
      }
    }
  }
  return out;
}

TrainResult run_training(Network& net, const Dataset& ds, const TrainConfig& cfg, const StepFn& step) {
  ds.validate();
  if (ds.num_classes > net.classes()) {
    throw DataError("dataset has " + std::to_string(ds.num_classes) + " classes, network predicts " +
                    std::to_string(net.classes()));
  }
  if (cfg.epochs < 0) throw ConfigError("epoch count must be >= 0");
  if (cfg.epochs > cfg.schedule.total_epochs) throw ConfigError("schedule covers fewer epochs than requested");
  if (cfg.batch_size < 2) throw ConfigError("batch size must be >= 2");
  std::vector<TensorF> params = net.trainable_parameters();
  OptimState state;
  state.momentum = cfg.momentum;
  TrainResult result;
  const std::size_t n = ds.size();
  std::size_t global_step = 0;
  for (int e = 0; e < cfg.epochs; ++e) {
    const auto t0 = std::chrono::steady_clock::now();
    state.lr = cfg.schedule.lr_at_epoch(e);
    const auto order = Rng(cfg.seed, kShuffleStream).fork(static_cast<std::uint64_t>(e)).permutation(n);
    Accumulator clean_loss, adv_loss, penalty, distance, clean_acc, adv_acc;
    std::size_t batch_index = 0;
    for (std::size_t begin = 0; begin < n; begin += cfg.batch_size, ++batch_index) {
      const std::size_t end = std::min(n, begin + cfg.batch_size);
      if (end - begin < 2) continue;
      const std::uint64_t key = (static_cast<std::uint64_t>(e) << 32) | batch_index;
      Batch batch = gather(ds, std::span<const std::size_t>(order).subspan(begin, end - begin));
      if (cfg.augment_flip || cfg.augment_crop) {
        Rng arng = Rng(cfg.seed, kAugmentStream).fork(key);
        batch.x = augment(batch.x, cfg.augment_flip, cfg.augment_crop, cfg.crop_padding, arng);
      }
      Rng attack_rng = Rng(cfg.seed, kAttackStream).fork(key);
      for (auto& p : params) p.clear_grad();
      Tape<float> tape;
      StepStats s;
      {
        GradScope<float> scope(tape);
        s = step(batch, attack_rng);
      }
      tape.backward(s.loss);
      if (cfg.on_step) cfg.on_step(global_step);
      ++global_step;
      sgd_step(params, state);
      const auto bs = static_cast<double>(batch.y.size());
      clean_loss.add(s.clean_loss, bs);
      adv_loss.add(s.adv_loss, bs);
      penalty.add(s.penalty, 1.0);
      distance.add(s.feature_distance, bs);
      clean_acc.add(s.clean_correct / bs, bs);
      adv_acc.add(s.adv_correct / bs, bs);
    }
    for (auto& p : params) p.clear_grad();
    EpochMetrics m;
    m.epoch = e;
    m.lr = state.lr;
    m.clean_loss = clean_loss.mean();
    m.adv_loss = adv_loss.mean();
    m.fdm_penalty = penalty.mean();
    m.feature_distance = distance.mean();
    m.clean_acc = clean_acc.mean();
    m.adv_acc = adv_acc.mean();
    m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.epochs.push_back(m);
    if (cfg.on_epoch) cfg.on_epoch(m);
  }
  return result;
}

TrainResult train_standard(Network& net, const Dataset& ds, const TrainConfig& cfg) {
  return run_training(net, ds, cfg, [&](const Batch& b, Rng&) {
    StepStats s;
    const TensorF logits = net.forward(b.x, Mode::train);
    s.loss = ops::softmax_cross_entropy(logits, b.y);
    s.clean_loss = s.loss.item();
    s.clean_correct = count_correct(logits, b.y);
    return s;
  });
}

TrainResult train_adversarial(Network& net, const Dataset& ds, const AttackConfig& attack, const TrainConfig& cfg) {
  attack.validate();
  return run_training(net, ds, cfg, [&](const Batch& b, Rng& rng) {
    StepStats s;
    const TensorF x_adv = pgd(net, b.x, b.y, attack, rng);
    if (cfg.track_clean) track_clean(net, b, s);
    const TensorF logits = net.forward(x_adv, Mode::train);
    s.loss = ops::softmax_cross_entropy(logits, b.y);
    s.adv_loss = s.loss.item();
    s.adv_correct = count_correct(logits, b.y);
    return s;
  });
}

FdmLoss fdm_loss(Network& net, const TensorF& x, const TensorF& x_adv, std::span<const int> y, const FdmConfig& fdm,
                 Mode mode) {
  const int blocks = static_cast<int>(net.num_blocks());
  if (fdm.k < 1 || fdm.k > blocks) {
    throw ConfigError("FDM split k=" + std::to_string(fdm.k) + " does not fit a network of " + std::to_string(blocks) +
                      " blocks");
  }
  if (fdm.lambda < 0.0) throw ConfigError("FDM lambda must be >= 0");
  if (x.shape() != x_adv.shape()) throw ShapeError("fdm_loss: x and x_adv shapes differ");
  const std::size_t split_index = static_cast<std::size_t>(blocks - fdm.k);
  FdmLoss out;
  const TensorF feat_adv = net.forward_range(x_adv, 0, split_index, mode);
  out.adv_logits = net.forward_range(feat_adv, split_index, net.num_blocks(), mode);
  out.cross_entropy = ops::softmax_cross_entropy(out.adv_logits, y);
  const Mode clean_mode = mode == Mode::train ? Mode::batch_stats : mode;
  const TensorF feat_clean = net.forward_range(x, 0, split_index, clean_mode);
  const TensorF dist = ops::row_l2_distance_sum(ops::flatten(feat_clean), ops::flatten(feat_adv));
  out.feature_dim = static_cast<std::int64_t>(feat_adv.numel() / y.size());
  double coeff = fdm.lambda / std::sqrt(static_cast<double>(out.feature_dim));
  if (fdm.mean_over_batch) coeff /= static_cast<double>(y.size());
  out.total = ops::add(out.cross_entropy, ops::scale(dist, static_cast<float>(coeff)));
  out.penalty = coeff * dist.item();
  out.mean_feature_distance = dist.item() / static_cast<double>(y.size());
  return out;
}

TrainResult train_source_fdm(Network& net, const Dataset& ds, const AttackConfig& attack, const FdmConfig& fdm,
                             const TrainConfig& cfg) {
  attack.validate();
  return run_training(net, ds, cfg, [&](const Batch& b, Rng& rng) {
    StepStats s;
    const TensorF x_adv = pgd(net, b.x, b.y, attack, rng);
    if (cfg.track_clean) track_clean(net, b, s);
    FdmLoss f = fdm_loss(net, b.x, x_adv, b.y, fdm, Mode::train);
    s.loss = f.total;
    s.adv_loss = f.cross_entropy.item();
    s.penalty = f.penalty;
    s.feature_distance = f.mean_feature_distance;
    s.adv_correct = count_correct(f.adv_logits, b.y);
    return s;
  });
}

}  // namespace rxf
