#include <doctest.h>

#include <cmath>
#include <stdexcept>

#include "oracles.hpp"
#include "rxf/attack.hpp"
#include "rxf/error.hpp"
#include "rxf/ops.hpp"
#include "rxf/tape.hpp"
#include "test_util.hpp"

using namespace rxf;
using namespace rxf::testing;

namespace {

// L(x) = w . x for a single 2-vector input.
InputLoss linear_loss(float w0, float w1) {
  return [=](const TensorF& x) {
    const TensorF w(Shape{1, 2}, std::vector<float>{w0, w1});
    return ops::sum(ops::mul(x, w));
  };
}

AttackConfig cfg_eps(double eps, double alpha, int steps, bool random_start) {
  AttackConfig c;
  c.epsilon = eps;
  c.alpha = alpha;
  c.steps = steps;
  c.random_start = random_start;
  return c;
}

bool box_ok(const TensorF& x, const TensorF& adv, double eps) {
  for (std::size_t i = 0; i < x.numel(); ++i) {
    if (std::abs(double(adv[i]) - x[i]) > eps + 1e-6) return false;
    if (adv[i] < 0.0f || adv[i] > 1.0f) return false;
  }
  return true;
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / v.size();
}

}  // namespace

TEST_CASE("project_linf examples") {
  const double eps = 8.0 / 255.0;
  const TensorF x(Shape{3}, std::vector<float>{0.5f, 0.5f, 0.99f});
  const TensorF d(Shape{3}, std::vector<float>{0.05f, -0.2f, static_cast<float>(eps)});
  const TensorF p = project_linf(d, x, eps);
  CHECK(p[0] == doctest::Approx(eps).epsilon(1e-6));
  CHECK(p[1] == doctest::Approx(-eps).epsilon(1e-6));
  CHECK(p[2] == doctest::Approx(0.01).epsilon(1e-4));
}

TEST_CASE("attack config validation") {
  CHECK_NOTHROW(cfg_eps(8.0 / 255, 2.0 / 255, 7, true).validate());
  CHECK_NOTHROW(cfg_eps(0.0, 2.0 / 255, 7, true).validate());
  CHECK_THROWS_AS(cfg_eps(0.1, 0.2, 7, true).validate(), ConfigError);
  CHECK_THROWS_AS(cfg_eps(0.1, 0.01, 0, true).validate(), ConfigError);
  CHECK_THROWS_AS(cfg_eps(1.5, 0.01, 3, true).validate(), ConfigError);
  CHECK_THROWS_AS(cfg_eps(0.1, 0.0, 3, true).validate(), ConfigError);
}

TEST_CASE("fgsm follows the gradient sign") {
  const double eps = 8.0 / 255.0;
  const TensorF x(Shape{1, 2}, 0.5f);
  const TensorF adv = fgsm(x, linear_loss(1.0f, -2.0f), cfg_eps(eps, eps, 1, false));
  CHECK(double(adv[0]) - 0.5 == doctest::Approx(eps).epsilon(1e-5));
  CHECK(double(adv[1]) - 0.5 == doctest::Approx(-eps).epsilon(1e-5));

  // constant model: zero gradient, sign(0) = 0, so nothing moves
  const TensorF adv0 = fgsm(x, linear_loss(0.0f, 0.0f), cfg_eps(eps, eps, 1, false));
  CHECK(adv0[0] == x[0]);
  CHECK(adv0[1] == x[1]);

  // a loss that ignores the input cannot be attacked
  const InputLoss detached = [](const TensorF&) { return TensorF(Shape{}, 1.0f); };
  CHECK_THROWS_AS(fgsm(x, detached, cfg_eps(eps, eps, 1, false)), std::logic_error);
}

TEST_CASE("pgd saturates a linear objective") {
  const double eps = 8.0 / 255.0;
  const TensorF x(Shape{1, 2}, 0.5f);
  Rng rng(5);
  const TensorF adv = pgd(x, linear_loss(1.0f, -2.0f), cfg_eps(eps, 2.0 / 255, 100, true), rng);
  CHECK(double(adv[0]) - 0.5 == doctest::Approx(eps).epsilon(1e-5));
  CHECK(double(adv[1]) - 0.5 == doctest::Approx(-eps).epsilon(1e-5));
}

TEST_CASE("pgd with one full step equals fgsm") {
  TinyProblem p = tiny_mlp_problem(3, 5);
  const Batch b = gather_range(p.data, 0, 64);
  const AttackConfig c = cfg_eps(0.1, 0.1, 1, false);
  Rng rng(1);
  const TensorF a = pgd(p.net, b.x, b.y, c, rng);
  const TensorF f = fgsm(p.net, b.x, b.y, c);
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a[i] == f[i]);
}

TEST_CASE("zero budget leaves inputs unchanged") {
  TinyProblem p = tiny_mlp_problem(4, 5);
  const Batch b = gather_range(p.data, 0, 50);
  Rng rng(2);
  const TensorF a = pgd(p.net, b.x, b.y, cfg_eps(0.0, 2.0 / 255, 7, true), rng);
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b.x[i]);
  const AccuracyReport r = robust_accuracy(p.net, p.data, cfg_eps(0.0, 0.01, 10, true), Rng(3));
  CHECK(r.robust_accuracy == r.clean_accuracy);
  CHECK(r.examples == p.data.size());
}

TEST_CASE("pgd matches the grid-search maximum on a 2-input model") {
  TinyProblem p = tiny_mlp_problem(7);
  const double eps = 0.1;
  const AttackConfig c = cfg_eps(eps, eps / 20, 100, true);
  Rng rng(9);
  int good = 0;
  const int points = 40;
  for (int i = 0; i < points; ++i) {
    const Batch b = gather_range(p.data, i * 7, i * 7 + 1);
    Rng r = rng.fork(i);
    const TensorF adv = pgd(p.net, b.x, b.y, c, r);
    CHECK(box_ok(b.x, adv, eps));
    const double reached = per_example_loss(p.net, adv, b.y)[0];
    const double best = grid_max_loss(p.net, b.x[0], b.x[1], b.y[0], eps);
    good += reached >= 0.95 * best;
  }
  CHECK(good >= 38);
}

TEST_CASE("robust accuracy of a linear classifier matches the closed form") {
  BlobSpec bs;
  bs.classes = 2;
  bs.per_class = 200;
  bs.separation = 0.3;
  bs.noise = 0.07;
  bs.seed = 12;
  const Dataset ds = synth_blobs(bs);
  TensorF w(Shape{2, 2}, std::vector<float>{1.5f, -0.5f, -1.0f, 2.0f});
  TensorF bias(Shape{2}, std::vector<float>{0.1f, -0.1f});
  std::vector<std::unique_ptr<Layer>> blocks;
  blocks.push_back(std::make_unique<Dense>(w, bias));
  ArchSpec a;
  a.family = "mlp";
  a.hidden = {};
  a.classes = 2;
  a.input = {2};
  Network net(a, std::move(blocks));
  for (double eps : {0.02, 0.05, 0.1}) {
    const AttackConfig c = cfg_eps(eps, eps / 4, 20, false);
    const AccuracyReport r = robust_accuracy(net, ds, c, Rng(1));
    const std::size_t expected = linear_robust_count(w, bias, ds.images, ds.labels, eps);
    CHECK(static_cast<std::size_t>(std::lround(r.robust_accuracy * ds.size())) == expected);
  }
}

TEST_CASE("constant-logit model is unaffected by attacks") {
  std::vector<std::unique_ptr<Layer>> blocks;
  blocks.push_back(std::make_unique<Dense>(TensorF(Shape{3, 2}, 0.0f), TensorF(Shape{3}, std::vector<float>{0, 1, 0})));
  ArchSpec a;
  a.family = "mlp";
  a.hidden = {};
  a.classes = 3;
  a.input = {2};
  Network net(a, std::move(blocks));
  BlobSpec bs;
  bs.classes = 3;
  bs.per_class = 20;
  const Dataset ds = synth_blobs(bs);
  const AccuracyReport r = robust_accuracy(net, ds, cfg_eps(0.2, 0.05, 10, true), Rng(4));
  CHECK(r.robust_accuracy == r.clean_accuracy);
  CHECK(r.clean_accuracy == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("attacks respect the box and leave the model untouched") {
  ArchSpec a;
  a.family = "small-cnn";
  a.depth = 2;
  a.classes = 3;
  a.input = {1, 8, 8};
  Network net = build_network(a, 2);
  Rng rng(6);
  net.forward(random_tensor<float>({8, 1, 8, 8}, rng, 0, 1), Mode::train);
  std::vector<TensorF> before;
  for (auto& t : net.named_tensors()) before.push_back(t.tensor.clone());
  for (Mode m : {Mode::inference, Mode::batch_stats}) {
    const TensorF x = random_tensor<float>({6, 1, 8, 8}, rng, 0, 1);
    const std::vector<int> y = {0, 1, 2, 0, 1, 2};
    AttackConfig c = cfg_eps(8.0 / 255, 2.0 / 255, 10, true);
    c.bn_mode = m;
    Rng r(1);
    const TensorF adv = pgd(net, x, y, c, r);
    CHECK(box_ok(x, adv, c.epsilon));
    CHECK(box_ok(x, fgsm(net, x, y, c), c.epsilon));
  }
  std::size_t i = 0;
  for (auto& t : net.named_tensors()) {
    CHECK(max_abs_diff(t.tensor.data(), before[i].data()) == 0.0);
    CHECK_FALSE(t.tensor.has_grad());
    ++i;
  }
}

TEST_CASE("stronger attacks find higher loss on average") {
  TinyProblem p = tiny_mlp_problem(5);
  const Batch b = gather_range(p.data, 0, 256);
  const double clean = mean(per_example_loss(p.net, b.x, b.y));
  const AttackConfig one = cfg_eps(0.1, 0.025, 1, true);
  const AttackConfig many = cfg_eps(0.1, 0.025, 20, true);
  const double f = mean(per_example_loss(p.net, fgsm(p.net, b.x, b.y, one), b.y));
  Rng r1(3), r2(3);
  const double p1 = mean(per_example_loss(p.net, pgd(p.net, b.x, b.y, one, r1), b.y));
  const double pn = mean(per_example_loss(p.net, pgd(p.net, b.x, b.y, many, r2), b.y));
  CHECK(f >= clean);
  CHECK(pn >= p1);
}

TEST_CASE("robust accuracy is reproducible and worker independent") {
  TinyProblem p = tiny_mlp_problem(8, 10);
  const AttackConfig c = cfg_eps(0.1, 0.02, 10, true);
  const AccuracyReport a = robust_accuracy(p.net, p.data, c, Rng(5), 50, 1);
  const AccuracyReport b = robust_accuracy(p.net, p.data, c, Rng(5), 50, 1);
  const AccuracyReport w = robust_accuracy(p.net, p.data, c, Rng(5), 50, 3);
  CHECK(a.robust_accuracy == b.robust_accuracy);
  CHECK(a.robust_loss == b.robust_loss);
  CHECK(a.robust_accuracy == w.robust_accuracy);
  CHECK(a.clean_accuracy == w.clean_accuracy);
  CHECK(a.robust_accuracy <= a.clean_accuracy);

  Dataset empty = p.data;
  empty.images = TensorF();
  empty.labels.clear();
  CHECK_THROWS(robust_accuracy(p.net, empty, c, Rng(5)));
}
