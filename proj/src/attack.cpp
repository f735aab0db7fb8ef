#include "rxf/attack.hpp"

#include <algorithm>
#include <exception>
#include <stdexcept>
#include <thread>

#include "rxf/error.hpp"
#include "rxf/ops.hpp"
#include "rxf/tape.hpp"

namespace rxf {

namespace {

float sign(float g) { return g > 0.0f ? 1.0f : (g < 0.0f ? -1.0f : 0.0f); }

TensorF clamp_unit(const TensorF& x, const TensorF& delta) {
  TensorF out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::clamp(x[i] + delta[i], 0.0f, 1.0f);
  return out;
}

TensorF random_start(const TensorF& x, double eps, Rng& rng) {
  TensorF d(x.shape());
  for (auto& v : d.data()) v = static_cast<float>(rng.uniform(-eps, eps));
  return d;
}

}  // namespace

void AttackConfig::validate() const {
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ConfigError("attack epsilon must be in [0, 1]");
  if (!(alpha > 0.0)) throw ConfigError("attack step size alpha must be > 0");
  if (epsilon > 0.0 && alpha > epsilon) throw ConfigError("attack step size alpha must not exceed epsilon");
  if (steps < 1) throw ConfigError("attack step count must be >= 1");
}

TensorF project_linf(const TensorF& delta, const TensorF& x, double epsilon) {
  if (delta.shape() != x.shape()) throw ShapeError("project_linf: delta and x shapes differ");
  const auto e = static_cast<float>(epsilon);
  TensorF out(delta.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const float d = std::clamp(delta[i], -e, e);
    out[i] = std::clamp(d, -x[i], 1.0f - x[i]);
  }
  return out;
}

TensorF input_gradient(const TensorF& x, const InputLoss& loss) {
  TensorF xa = x.clone();
  Tape<float> tape(false);
  tape.watch(xa);
  TensorF value;
  {
    GradScope<float> scope(tape);
    value = loss(xa);
  }
  tape.backward(value);
  if (!xa.has_grad()) throw std::logic_error("attack: loss does not depend on the input (gradient unavailable)");
  return TensorF(x.shape(), std::vector<float>(xa.grad().begin(), xa.grad().end()));
}

TensorF fgsm(const TensorF& x, const InputLoss& loss, const AttackConfig& cfg) {
  cfg.validate();
  const TensorF g = input_gradient(x, loss);
  const auto e = static_cast<float>(cfg.epsilon);
  TensorF step(x.shape());
  for (std::size_t i = 0; i < step.numel(); ++i) step[i] = e * sign(g[i]);
  return clamp_unit(x, project_linf(step, x, cfg.epsilon));
}

TensorF pgd_from(const TensorF& x, const InputLoss& loss, const AttackConfig& cfg, const TensorF& delta0) {
  cfg.validate();
  const auto a = static_cast<float>(cfg.alpha);
  TensorF delta = project_linf(delta0, x, cfg.epsilon);
  for (int s = 0; s < cfg.steps; ++s) {
    TensorF xa(x.shape());
    for (std::size_t i = 0; i < xa.numel(); ++i) xa[i] = x[i] + delta[i];
    const TensorF g = input_gradient(xa, loss);
    for (std::size_t i = 0; i < delta.numel(); ++i) delta[i] = delta[i] + a * sign(g[i]);
    delta = project_linf(delta, x, cfg.epsilon);
  }
  return clamp_unit(x, delta);
}

TensorF pgd(const TensorF& x, const InputLoss& loss, const AttackConfig& cfg, Rng& rng) {
  const TensorF start = cfg.random_start ? random_start(x, cfg.epsilon, rng) : TensorF(x.shape());
  return pgd_from(x, loss, cfg, start);
}

InputLoss cross_entropy_objective(Network& net, std::span<const int> labels, Mode bn_mode) {
  return [&net, labels, bn_mode](const TensorF& xa) {
    return ops::softmax_cross_entropy(net.forward(xa, bn_mode), labels);
  };
}

TensorF fgsm(Network& net, const TensorF& x, std::span<const int> y, const AttackConfig& cfg) {
  return fgsm(x, cross_entropy_objective(net, y, cfg.bn_mode), cfg);
}

TensorF pgd(Network& net, const TensorF& x, std::span<const int> y, const AttackConfig& cfg, Rng& rng) {
  return pgd(x, cross_entropy_objective(net, y, cfg.bn_mode), cfg, rng);
}

AccuracyReport robust_accuracy(Network& net, const Dataset& ds, const AttackConfig& cfg, const Rng& rng,
                               std::size_t batch_size, int workers) {
  if (ds.size() == 0) throw DataError("robust_accuracy: empty dataset");
  cfg.validate();
  if (batch_size == 0) batch_size = 1;
  const std::size_t n = ds.size();
  const std::size_t batches = (n + batch_size - 1) / batch_size;
  std::vector<double> correct_clean(batches), correct_adv(batches), loss_clean(batches), loss_adv(batches);
  auto run = [&](std::size_t b) {
    const std::size_t begin = b * batch_size, end = std::min(n, begin + batch_size);
    Batch batch = gather_range(ds, begin, end);
    TensorF start(batch.x.shape());
    if (cfg.random_start) {
      const std::size_t per = batch.x.numel() / batch.y.size();
      for (std::size_t i = 0; i < batch.y.size(); ++i) {
        Rng r = rng.fork(begin + i);
        for (std::size_t j = 0; j < per; ++j) start[i * per + j] = static_cast<float>(r.uniform(-cfg.epsilon, cfg.epsilon));
      }
    }
    const TensorF adv = pgd_from(batch.x, cross_entropy_objective(net, batch.y, cfg.bn_mode), cfg, start);
    NoGradScope<float> off;
    const TensorF lc = net.forward(batch.x, Mode::inference);
    const TensorF la = net.forward(adv, Mode::inference);
    const auto pc = ops::argmax_rows(lc), pa = ops::argmax_rows(la);
    const auto ec = ops::cross_entropy_per_example(lc, batch.y), ea = ops::cross_entropy_per_example(la, batch.y);
    for (std::size_t i = 0; i < batch.y.size(); ++i) {
      correct_clean[b] += pc[i] == batch.y[i];
      correct_adv[b] += pa[i] == batch.y[i];
      loss_clean[b] += ec[i];
      loss_adv[b] += ea[i];
    }
  };
  // Neither inference nor batch_stats mode writes to the network, so batches can run concurrently.
  const auto threads = static_cast<std::size_t>(std::clamp(workers, 1, 64));
  if (threads == 1 || batches == 1) {
    for (std::size_t b = 0; b < batches; ++b) run(b);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> failures(threads);
    for (std::size_t t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        try {
          for (std::size_t b = t; b < batches; b += threads) run(b);
        } catch (...) {
          failures[t] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& f : failures) {
      if (f) std::rethrow_exception(f);
    }
  }
  AccuracyReport r;
  r.examples = n;
  for (std::size_t b = 0; b < batches; ++b) {
    r.clean_accuracy += correct_clean[b];
    r.robust_accuracy += correct_adv[b];
    r.clean_loss += loss_clean[b];
    r.robust_loss += loss_adv[b];
  }
  r.clean_accuracy /= n;
  r.robust_accuracy /= n;
  r.clean_loss /= n;
  r.robust_loss /= n;
  return r;
}

}  // namespace rxf
