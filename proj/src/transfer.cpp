#include "rxf/transfer.hpp"

#include <cmath>

#include "rxf/error.hpp"
#include "rxf/ops.hpp"
#include "rxf/tape.hpp"

namespace rxf {

namespace {

double count_correct(const TensorF& logits, std::span<const int> y) {
  const auto pred = ops::argmax_rows(logits);
  double c = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) c += pred[i] == y[i];
  return c;
}

/// Calls fn(name, layer) for every dense/conv layer in blocks [begin, L).
void for_each_weighted(Network& net, std::size_t begin,
                       const std::function<void(const std::string&, WeightedLayer&)>& fn) {
  for (std::size_t b = begin; b < net.num_blocks(); ++b) {
    int index = 0;
    net.visit_block(b, [&](Layer& l) {
      if (auto* w = dynamic_cast<WeightedLayer*>(&l)) {
        fn("b" + std::to_string(b) + "." + l.kind() + std::to_string(index), *w);
      }
      ++index;
    });
  }
}

}  // namespace

std::string to_string(TransferMode mode) {
  switch (mode) {
    case TransferMode::vanilla: return "vanilla";
    case TransferMode::neft: return "neft";
    case TransferMode::lwf: return "lwf";
  }
  return "?";
}

TransferMode transfer_mode_from_string(const std::string& s) {
  if (s == "vanilla") return TransferMode::vanilla;
  if (s == "neft") return TransferMode::neft;
  if (s == "lwf") return TransferMode::lwf;
  throw ConfigError("unknown transfer mode '" + s + "' (vanilla | neft | lwf)");
}

nlohmann::json bn_policy_to_json(const BnPolicy& p) {
  return {{"extractor_stats", p.extractor_stats_frozen ? "frozen" : "updating"},
          {"submodel_affine", p.submodel_affine_frozen ? "frozen" : "trainable"}};
}

void apply_bn_policy(Network& net, std::size_t split_index, const BnPolicy& policy) {
  if (policy.submodel_stats_frozen) {
    throw ConfigError(
        "BN policy rejected: freezing running statistics inside fine-tuned blocks makes the target model hard to "
        "converge");
  }
  if (split_index > net.num_blocks()) throw ConfigError("BN policy: split index beyond the network");
  for (std::size_t b = 0; b < net.num_blocks(); ++b) {
    const bool extractor = b < split_index;
    net.visit_block(b, [&](Layer& l) {
      auto* bn = dynamic_cast<BatchNorm*>(&l);
      if (!bn) return;
      if (extractor) {
        bn->stats_frozen = policy.extractor_stats_frozen;
        bn->set_affine_frozen(true);
      } else {
        bn->stats_frozen = false;
        bn->set_affine_frozen(policy.submodel_affine_frozen);
      }
    });
  }
}

void neft_attach(Network& net, std::size_t split_index, double beta, int iters_per_step, int warmup_iters,
                 std::uint64_t seed) {
  if (!(beta > 0.0 && beta <= 1.0)) throw ConfigError("NEFT beta must be in (0, 1]");
  if (iters_per_step < 1) throw ConfigError("power iterations per step must be >= 1");
  Rng rng(seed, 0x5EC7);
  std::uint64_t index = 0;
  for_each_weighted(net, split_index, [&](const std::string&, WeightedLayer& w) {
    const MatrixView m = as_matrix(w.weight);
    Rng r = rng.fork(index++);
    SpectralNorm sn{SpectralState::init(m.rows, m.cols, r), beta};
    sn.state.iters_per_step = iters_per_step;
    if (warmup_iters > 0) power_iteration(m, sn.state, warmup_iters);
    w.spectral = std::move(sn);
  });
  std::vector<std::string> agg = net.block_aggregation();
  for (std::size_t b = split_index; b < agg.size(); ++b) {
    if (dynamic_cast<ResidualBlock*>(&net.block(b))) agg[b] = "convex";
  }
  net.set_block_aggregation(agg);
}

void neft_bake(Network& net, std::size_t split_index, int iters) {
  for_each_weighted(net, split_index, [&](const std::string&, WeightedLayer& w) {
    if (!w.spectral) return;
    auto& sn = *w.spectral;
    const double sigma = power_iteration(as_matrix(w.weight), sn.state, iters);
    if (!sn.state.degenerate) {
      const double factor = sn.beta / sigma;
      for (auto& v : w.weight.data()) v = static_cast<float>(v * factor);
    }
    w.spectral.reset();
  });
}

std::vector<LayerNormReport> spectral_report(Network& net, std::size_t split_index) {
  std::vector<LayerNormReport> out;
  for_each_weighted(net, split_index, [&](const std::string& name, WeightedLayer& w) {
    const MatrixView m = as_matrix(w.weight);
    out.push_back({name, w.kind(), m.rows, m.cols, w.effective_spectral_norm()});
  });
  return out;
}

LwfLoss lwf_loss(Network& net, Network& snapshot, const TensorF& x, std::span<const int> y, double lambda_d) {
  if (lambda_d < 0.0) throw ConfigError("LwF lambda_d must be >= 0");
  const std::size_t penultimate = net.num_blocks() - 1;
  if (snapshot.num_blocks() != net.num_blocks()) throw ConfigError("LwF snapshot has a different block count");
  LwfLoss out;
  const TensorF feat = net.forward_range(x, 0, penultimate, Mode::train);
  out.logits = net.forward_range(feat, penultimate, net.num_blocks(), Mode::train);
  out.cross_entropy = ops::softmax_cross_entropy(out.logits, y);
  TensorF ref;
  {
    NoGradScope<float> off;
    ref = snapshot.forward_range(x, 0, penultimate, Mode::inference);
  }
  const TensorF dist = ops::row_l2_distance_sum(ops::flatten(feat), ops::flatten(ref));
  out.total = ops::add(out.cross_entropy, ops::scale(dist, static_cast<float>(lambda_d)));
  out.penalty = lambda_d * dist.item();
  return out;
}

TransferResult transfer(const Network& source, const Dataset& target, const TransferConfig& cfg, const StepHook& hook) {
  target.validate();
  const int blocks = static_cast<int>(source.num_blocks());
  int k = cfg.k;
  if (cfg.mode == TransferMode::lwf) {
    if (k == 0) k = blocks;
    if (k != blocks) {
      throw ConfigError("LwF fine-tunes every block: k must be " + std::to_string(blocks) + ", got " +
                        std::to_string(k));
    }
    if (cfg.lambda_d < 0.0) throw ConfigError("LwF lambda_d must be >= 0");
  }
  if (k < 1 || k > blocks) {
    throw ConfigError("fine-tuned block count k=" + std::to_string(k) + " outside 1.." + std::to_string(blocks));
  }

  TransferResult result{Network(source), {}, cfg.bn, k, static_cast<std::size_t>(blocks - k), {}};
  Network& net = result.net;
  if (cfg.reinit_head) {
    Rng head_rng(cfg.train.seed, 0x4EAD);
    net.reset_head(target.num_classes, head_rng);
  } else if (target.num_classes != net.classes()) {
    throw ConfigError("target has " + std::to_string(target.num_classes) + " classes, source head predicts " +
                      std::to_string(net.classes()) + "; enable head reinitialization");
  }
  // Re-enable everything, then freeze the extractor.
  for (std::size_t b = 0; b < net.num_blocks(); ++b) net.set_block_trainable(b, true);
  SplitView view = split(net, k);
  if (cfg.mode == TransferMode::neft) result.applied_policy.submodel_affine_frozen = true;
  apply_bn_policy(net, view.split_index(), result.applied_policy);

  TrainConfig tc = cfg.train;
  if (hook) tc.on_step = [&](std::size_t step) { hook(step, net); };

  if (cfg.mode == TransferMode::neft) {
    neft_attach(net, view.split_index(), cfg.beta, cfg.power_iters_per_step, cfg.warmup_iters, cfg.train.seed);
  }

  if (cfg.mode == TransferMode::lwf) {
    Network snapshot(source);
    for (std::size_t b = 0; b < snapshot.num_blocks(); ++b) snapshot.set_block_trainable(b, false);
    result.train = run_training(net, target, tc, [&](const Batch& b, Rng&) {
      StepStats s;
      LwfLoss l = lwf_loss(net, snapshot, b.x, b.y, cfg.lambda_d);
      s.loss = l.total;
      s.clean_loss = l.cross_entropy.item();
      s.penalty = l.penalty;
      s.clean_correct = count_correct(l.logits, b.y);
      return s;
    });
  } else {
    result.train = train_standard(net, target, tc);
  }

  if (cfg.mode == TransferMode::neft) neft_bake(net, view.split_index(), cfg.bake_iters);
  result.spectral_report = spectral_report(net, view.split_index());
  return result;
}

double empirical_lipschitz_probe(const std::function<TensorF(const TensorF&)>& fn, const Shape& sample_shape,
                                 std::size_t n_pairs, double radius, Rng& rng, const TensorF& anchor) {
  if (!(radius > 0.0)) throw std::invalid_argument("probe radius must be > 0");
  const auto d = static_cast<std::size_t>(shape_numel(sample_shape));
  const std::size_t chunk = 500;
  double best = 0.0;
  std::size_t anchor_row = 0;
  const std::size_t anchor_rows = anchor.defined() ? anchor.numel() / d : 0;
  for (std::size_t done = 0; done < n_pairs;) {
    const std::size_t m = std::min(chunk, n_pairs - done);
    Shape batch_shape{static_cast<std::int64_t>(m)};
    batch_shape.insert(batch_shape.end(), sample_shape.begin(), sample_shape.end());
    TensorF x(batch_shape), xp(batch_shape);
    std::vector<double> in_dist(m);
    for (std::size_t i = 0; i < m; ++i) {
      float* a = x.ptr() + i * d;
      float* b = xp.ptr() + i * d;
      if (anchor_rows > 0) {
        std::copy_n(anchor.ptr() + (anchor_row++ % anchor_rows) * d, d, a);
      } else {
        for (std::size_t j = 0; j < d; ++j) a[j] = static_cast<float>(rng.normal());
      }
      double dist = 0.0;
      while (dist == 0.0) {  // resample zero-distance pairs
        std::vector<double> dir(d);
        double norm = 0.0;
        for (auto& v : dir) {
          v = rng.normal();
          norm += v * v;
        }
        norm = std::sqrt(norm);
        const double len = radius * rng.uniform(0.1, 1.0);
        for (std::size_t j = 0; j < d; ++j) b[j] = static_cast<float>(a[j] + len * dir[j] / (norm > 0 ? norm : 1));
        dist = 0.0;
        for (std::size_t j = 0; j < d; ++j) dist += (double(b[j]) - a[j]) * (double(b[j]) - a[j]);
      }
      in_dist[i] = std::sqrt(dist);
    }
    NoGradScope<float> off;
    const TensorF fx = fn(x), fxp = fn(xp);
    const std::size_t od = fx.numel() / m;
    for (std::size_t i = 0; i < m; ++i) {
      double out = 0.0;
      for (std::size_t j = 0; j < od; ++j) {
        const double diff = double(fx[i * od + j]) - fxp[i * od + j];
        out += diff * diff;
      }
      best = std::max(best, std::sqrt(out) / in_dist[i]);
    }
    done += m;
  }
  return best;
}

double lipschitz_bound_product(const Network& net, std::size_t begin, std::size_t end) {
  double bound = 1.0;
  for (std::size_t b = begin; b < end; ++b) bound *= net.block(b).lipschitz_bound(net.block_input_shape(b));
  return bound;
}

}  // namespace rxf
