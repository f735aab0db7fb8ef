#include <doctest.h>

#include <cmath>
#include <stdexcept>

#include "oracles.hpp"
#include "rxf/error.hpp"
#include "rxf/train.hpp"
#include "test_util.hpp"

using namespace rxf;
using namespace rxf::testing;

namespace {

bool params_bit_equal(Network& a, Network& b) {
  auto x = a.named_tensors(), y = b.named_tensors();
  if (x.size() != y.size()) return false;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!bit_equal(x[i].tensor, y[i].tensor)) return false;
  }
  return true;
}

Dataset blobs(int classes, int per_class, double sep, double noise, std::uint64_t seed) {
  BlobSpec b;
  b.classes = classes;
  b.per_class = per_class;
  b.separation = sep;
  b.noise = noise;
  b.seed = seed;
  return synth_blobs(b);
}

Network mlp(int classes, std::uint64_t seed, std::vector<int> hidden = {16, 16}) {
  ArchSpec a;
  a.family = "mlp";
  a.hidden = std::move(hidden);
  a.classes = classes;
  a.input = {2};
  return build_network(a, seed);
}

/// A small BN network over 2-D glyph-like images.
Network bn_cnn(std::uint64_t seed) {
  ArchSpec a;
  a.family = "small-cnn";
  a.depth = 2;
  a.classes = 3;
  a.input = {1, 8, 8};
  return build_network(a, seed);
}

Dataset image_data(std::uint64_t seed) {
  Rng rng(seed);
  Dataset ds;
  ds.num_classes = 3;
  ds.images = random_tensor<float>({36, 1, 8, 8}, rng, 0.0, 1.0);
  for (int i = 0; i < 36; ++i) ds.labels.push_back(i % 3);
  // class-dependent brightness so there is something to learn
  for (int i = 0; i < 36; ++i) {
    for (int j = 0; j < 64; ++j) ds.images[i * 64 + j] *= 0.4f + 0.3f * (i % 3);
  }
  return ds;
}

TrainConfig quick(int epochs, std::size_t batch, std::uint64_t seed, double lr = 0.05) {
  TrainConfig t;
  t.epochs = epochs;
  t.batch_size = batch;
  t.schedule.base_lr = lr;
  t.schedule.milestones = {};
  t.schedule.total_epochs = std::max(epochs, 1);
  t.seed = seed;
  return t;
}

double accuracy(Network& net, const Dataset& ds) {
  NoGradScope<float> off;
  const auto pred = ops::argmax_rows(net.forward(ds.images, Mode::inference));
  double c = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) c += pred[i] == ds.labels[i];
  return c / ds.size();
}

}  // namespace

TEST_CASE("sgd_step examples") {
  TensorF p(Shape{1}, 1.0f);
  p.set_requires_grad(true);
  OptimState st;
  st.lr = 0.1;
  st.momentum = 0.9;
  std::vector<TensorF> params = {p};
  p.ensure_grad();
  p.grad()[0] = 1.0f;
  sgd_step(params, st);
  CHECK(p[0] == doctest::Approx(0.9).epsilon(1e-6));
  sgd_step(params, st);
  CHECK(1.0 - p[0] == doctest::Approx(0.1 + 0.19).epsilon(1e-6));
  REQUIRE(st.buffer_of(p) != nullptr);
  CHECK(st.buffer_of(p)->size() == 1);

  TensorF frozen(Shape{2}, 3.0f);
  frozen.ensure_grad();
  frozen.grad()[0] = 5.0f;
  std::vector<TensorF> fp = {frozen};
  sgd_step(fp, st);
  CHECK(frozen[0] == 3.0f);
  CHECK(frozen[1] == 3.0f);

  TensorF missing(Shape{1}, 0.0f);
  missing.set_requires_grad(true);
  std::vector<TensorF> mp = {missing};
  CHECK_THROWS_AS(sgd_step(mp, st), std::logic_error);
}

TEST_CASE("lr_at_epoch examples") {
  Schedule s;
  CHECK(s.lr_at_epoch(0) == doctest::Approx(0.1));
  CHECK(s.lr_at_epoch(39) == doctest::Approx(0.1));
  CHECK(s.lr_at_epoch(40) == doctest::Approx(0.02));
  CHECK(s.lr_at_epoch(70) == doctest::Approx(0.004));
  CHECK(s.lr_at_epoch(95) == doctest::Approx(0.0008));
  for (int e = 1; e < 100; ++e) CHECK(s.lr_at_epoch(e) <= s.lr_at_epoch(e - 1));
  CHECK_THROWS_AS(s.lr_at_epoch(100), std::out_of_range);
  CHECK_THROWS_AS(s.lr_at_epoch(-1), std::out_of_range);
}

TEST_CASE("standard training separates blobs") {
  const Dataset ds = blobs(2, 100, 0.5, 0.05, 1);
  Network net = mlp(2, 1);
  const TrainResult r = train_standard(net, ds, quick(20, 32, 1));
  CHECK(r.epochs.size() == 20);
  CHECK(accuracy(net, ds) >= 0.99);
  CHECK(r.epochs.back().clean_acc >= r.epochs.front().clean_acc);
}

TEST_CASE("zero epochs and determinism") {
  const Dataset ds = blobs(3, 30, 0.4, 0.05, 2);
  Network a = mlp(3, 4), untouched = mlp(3, 4);
  train_standard(a, ds, quick(0, 16, 4));
  CHECK(params_bit_equal(a, untouched));

  Network b = mlp(3, 4), c = mlp(3, 4);
  const TrainResult rb = train_standard(b, ds, quick(3, 16, 9));
  const TrainResult rc = train_standard(c, ds, quick(3, 16, 9));
  CHECK(rb.epochs.back().clean_loss == rc.epochs.back().clean_loss);
  CHECK(params_bit_equal(b, c));

  Network d = mlp(3, 4);
  train_standard(d, ds, quick(3, 16, 10));
  CHECK_FALSE(params_bit_equal(b, d));
}

TEST_CASE("invalid training inputs") {
  Dataset ds = blobs(2, 10, 0.5, 0.05, 3);
  ds.labels[0] = 5;
  Network net = mlp(2, 1);
  CHECK_THROWS_AS(train_standard(net, ds, quick(1, 8, 1)), DataError);
  const Dataset ok = blobs(3, 10, 0.3, 0.05, 3);
  CHECK_THROWS_AS(train_standard(net, ok, quick(1, 8, 1)), DataError);
  CHECK_THROWS_AS(train_standard(net, blobs(2, 10, 0.5, 0.05, 3), quick(1, 1, 1)), ConfigError);
}

TEST_CASE("adversarial training with zero budget equals standard training") {
  const Dataset ds = image_data(1);
  Network st = bn_cnn(3), at = bn_cnn(3);
  train_standard(st, ds, quick(2, 8, 5));
  AttackConfig zero;
  zero.epsilon = 0.0;
  train_adversarial(at, ds, zero, quick(2, 8, 5));
  CHECK(params_bit_equal(st, at));
}

TEST_CASE("one-step pgd training equals fgsm training") {
  const Dataset ds = image_data(2);
  AttackConfig one;
  one.epsilon = one.alpha = 0.05;
  one.steps = 1;
  one.random_start = false;
  Network a = bn_cnn(4), b = bn_cnn(4);
  train_adversarial(a, ds, one, quick(2, 12, 6));
  run_training(b, ds, quick(2, 12, 6), [&](const Batch& batch, Rng&) {
    StepStats s;
    const TensorF adv = fgsm(b, batch.x, batch.y, one);
    {
      NoGradScope<float> off;
      b.forward(batch.x, Mode::inference);
    }
    s.loss = ops::softmax_cross_entropy(b.forward(adv, Mode::train), batch.y);
    return s;
  });
  CHECK(params_bit_equal(a, b));
}

TEST_CASE("adversarial training improves robustness on blobs") {
  const Dataset ds = blobs(2, 150, 0.3, 0.06, 5);
  AttackConfig atk;
  atk.epsilon = 0.08;
  atk.alpha = 0.02;
  atk.steps = 7;
  Network st = mlp(2, 7), at = mlp(2, 7);
  train_standard(st, ds, quick(15, 32, 7));
  train_adversarial(at, ds, atk, quick(15, 32, 7));
  AttackConfig eval = atk;
  eval.steps = 20;
  const double rs = robust_accuracy(st, ds, eval, Rng(1)).robust_accuracy;
  const double ra = robust_accuracy(at, ds, eval, Rng(1)).robust_accuracy;
  MESSAGE("robust accuracy standard " << rs << " adversarial " << ra);
  CHECK(ra > rs);
}

TEST_CASE("fdm penalty examples") {
  std::vector<std::unique_ptr<Layer>> blocks;
  TensorF eye(Shape{4, 4}, 0.0f);
  for (int i = 0; i < 4; ++i) eye[i * 4 + i] = 1.0f;
  blocks.push_back(std::make_unique<Dense>(eye, TensorF(Shape{4}, 0.0f)));
  Rng rng(1);
  blocks.push_back(std::make_unique<Dense>(4, 2, rng));
  ArchSpec a;
  a.family = "mlp";
  a.hidden = {4};
  a.classes = 2;
  a.input = {4};
  Network net(a, std::move(blocks));
  const TensorF x(Shape{1, 4}, 0.0f), x_adv(Shape{1, 4}, 1.0f);
  const std::vector<int> y = {1};
  const FdmLoss l = fdm_loss(net, x, x_adv, y, FdmConfig{0.01, 1, false});
  CHECK(l.feature_dim == 4);
  CHECK(l.penalty == doctest::Approx(0.01).epsilon(1e-6));
  CHECK(l.total.item() == doctest::Approx(l.cross_entropy.item() + 0.01).epsilon(1e-6));

  const FdmLoss same = fdm_loss(net, x_adv, x_adv, y, FdmConfig{0.01, 1, false});
  CHECK(same.penalty == 0.0);
  CHECK(same.total.item() == same.cross_entropy.item());

  CHECK_THROWS_AS(fdm_loss(net, x, x_adv, y, FdmConfig{0.01, 3, false}), ConfigError);
  CHECK_THROWS_AS(fdm_loss(net, x, x_adv, y, FdmConfig{-1.0, 1, false}), ConfigError);
}

TEST_CASE("fdm penalty scales with lambda and is non-negative") {
  Network net = bn_cnn(2);
  Rng rng(3);
  const TensorF x = random_tensor<float>({6, 1, 8, 8}, rng, 0, 1);
  const TensorF xa = random_tensor<float>({6, 1, 8, 8}, rng, 0, 1);
  const std::vector<int> y = {0, 1, 2, 0, 1, 2};
  for (int k = 1; k <= static_cast<int>(net.num_blocks()); ++k) {
    Network a(net), b(net);
    const FdmLoss big = fdm_loss(a, x, xa, y, FdmConfig{0.01, k, false});
    const FdmLoss small = fdm_loss(b, x, xa, y, FdmConfig{0.005, k, false});
    CHECK(big.penalty > 0.0);
    CHECK(small.penalty == doctest::Approx(0.5 * big.penalty).epsilon(1e-6));
    Network c(net);
    const FdmLoss mean = fdm_loss(c, x, xa, y, FdmConfig{0.01, k, true});
    CHECK(mean.penalty == doctest::Approx(big.penalty / 6).epsilon(1e-6));
  }
}

TEST_CASE("fdm with zero lambda equals adversarial training") {
  const Dataset ds = image_data(4);
  AttackConfig atk;
  atk.epsilon = 0.06;
  atk.alpha = 0.02;
  atk.steps = 3;
  Network a = bn_cnn(8), b = bn_cnn(8);
  train_adversarial(a, ds, atk, quick(2, 12, 3));
  const TrainResult r = train_source_fdm(b, ds, atk, FdmConfig{0.0, 2, false}, quick(2, 12, 3));
  CHECK(params_bit_equal(a, b));
  CHECK(r.epochs.back().fdm_penalty == 0.0);
}

TEST_CASE("fdm shrinks the feature distance against a zero-lambda control") {
  const Dataset ds = blobs(2, 150, 0.3, 0.06, 9);
  AttackConfig atk;
  atk.epsilon = 0.08;
  atk.alpha = 0.02;
  atk.steps = 5;
  Network ctrl = mlp(2, 3, {32, 32}), fdm = mlp(2, 3, {32, 32});
  const TrainResult rc = train_source_fdm(ctrl, ds, atk, FdmConfig{0.0, 1, false}, quick(10, 32, 3));
  const TrainResult rf = train_source_fdm(fdm, ds, atk, FdmConfig{0.005, 1, false}, quick(10, 32, 3));
  MESSAGE("feature distance control " << rc.epochs.back().feature_distance << " fdm "
                                      << rf.epochs.back().feature_distance);
  CHECK(rf.epochs.back().feature_distance < rc.epochs.back().feature_distance);
}
