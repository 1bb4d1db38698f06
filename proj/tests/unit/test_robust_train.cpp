#include "helpers.hpp"

#include <cmath>
#include <numeric>

#include "robustq/train.hpp"

using namespace robustq;
using namespace testing;

namespace {

NetworkSpec blob_spec() {
  NetworkSpec s;
  s.in_channels = 2;
  s.height = s.width = 4;
  s.widths = {4, 8};
  s.blocks = {1, 1};
  s.num_classes = 2;
  return s;
}

TrainConfig quick_config(QuantVariant v, LossKind loss, std::size_t epochs) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size = 16;
  c.lr = 0.05;
  c.scheme.variant = v;
  c.loss.kind = loss;
  c.eval_samples = 0;
  c.seed = 3;
  return c;
}

struct Batch {
  Tensor x;
  std::vector<int> y;
};

Batch random_batch(Rng& rng, std::size_t n, std::size_t classes = 3) {
  Batch b{random_tensor(rng, {n, 1, 8, 8}, 0, 1), std::vector<int>(n)};
  for (auto& v : b.y) v = static_cast<int>(rng.index(classes));
  return b;
}

}  // namespace

TEST_CASE("loss names and spec validation") {
  CHECK(parse_loss("natural") == LossKind::Natural);
  CHECK(parse_loss("adversarial") == LossKind::Adversarial);
  CHECK(parse_loss("trades") == LossKind::Trades);
  CHECK(parse_loss("tradeoff") == LossKind::Tradeoff);
  CHECK_THROWS_AS(parse_loss("mixup"), ContractError);
  LossSpec s{LossKind::Tradeoff, 1.0, 8.0};
  CHECK_NOTHROW(s.validate());
  s.alpha = -1;
  CHECK_THROWS_AS(s.validate(), ContractError);
  s = LossSpec{LossKind::Tradeoff, 0.0, 0.0};
  CHECK_THROWS_AS(s.validate(), ContractError);
}

TEST_CASE("natural loss: uniform and saturated logits") {
  Network net = build_network(tiny_spec(), 1);
  Rng rng(2);
  const Batch b = random_batch(rng, 5);
  net.weight("m0.fc.weight").fill(0.0);
  CHECK(natural_loss(net, b.x, b.y) == doctest::Approx(std::log(3.0)).epsilon(1e-15));
  net.weight("m0.fc.bias") = Tensor::from({40, 0, 0});
  const std::vector<int> zeros(5, 0);
  CHECK(natural_loss(net, b.x, zeros) < 1e-4);
}

TEST_CASE("natural loss delegates to the cross-entropy op") {
  const Network net = build_network(tiny_spec(), 3);
  Rng rng(4);
  const Batch b = random_batch(rng, 6);
  Tape t;
  const double direct = t.value(t.softmax_cross_entropy(t.constant(net.logits(b.x)), b.y))[0];
  CHECK(natural_loss(net, b.x, b.y) == direct);
}

TEST_CASE("adversarial loss") {
  const Network net = build_network(tiny_spec(), 5);
  Rng rng(6);
  const Batch b = random_batch(rng, 6);
  PgdConfig zero;
  zero.eps = 0.0;
  Rng r0(1);
  CHECK(adversarial_loss(net, b.x, b.y, zero, r0) == natural_loss(net, b.x, b.y));
  Rng r1(2);
  CHECK(adversarial_loss(net, b.x, b.y, PgdConfig{}, r1) >= natural_loss(net, b.x, b.y) - 1e-9);
  // cross-entropy at the pgd point drawn from the same stream
  Rng r2(3), r3(3);
  const Tensor xt = pgd(as_logits_fn(net, Mode::Eval), b.x, b.y, PgdConfig{}, r2);
  CHECK(adversarial_loss(net, b.x, b.y, PgdConfig{}, r3) == natural_loss(net, xt, b.y));
}

TEST_CASE("trades loss") {
  const Network net = build_network(tiny_spec(), 7);
  Rng rng(8);
  const Batch b = random_batch(rng, 6);
  const double nat = natural_loss(net, b.x, b.y);
  Rng r0(1);
  CHECK(trades_loss(net, b.x, b.y, 0.0, PgdConfig{}, r0) == nat);
  PgdConfig stay;
  stay.eps = 0.0;
  stay.iters = 0;
  Rng r1(2);
  CHECK(trades_loss(net, b.x, b.y, 6.0, stay, r1) == doctest::Approx(nat).epsilon(1e-14));
  Tape t;
  const auto bound = net.bind(t, false);
  Rng r2(3);
  const LossGraph g = record_loss(t, net, bound, b.x, b.y, LossSpec{LossKind::Trades, 1.0, 6.0}, Mode::Eval, r2);
  CHECK(g.terms.has_robust);
  CHECK(g.terms.robust >= 0.0);
  CHECK(g.terms.total == doctest::Approx(g.terms.natural + 6.0 * g.terms.robust).epsilon(1e-14));
}

TEST_CASE("trade-off loss reductions and scaling") {
  const Network net = build_network(tiny_spec(), 9);
  Rng rng(10);
  const Batch b = random_batch(rng, 6);
  Rng a(5), c(5);
  CHECK(tradeoff_loss(net, b.x, b.y, 0.0, 1.0, PgdConfig{}, a) == adversarial_loss(net, b.x, b.y, PgdConfig{}, c));
  Rng d(6);
  CHECK(tradeoff_loss(net, b.x, b.y, 1.0, 0.0, PgdConfig{}, d) == natural_loss(net, b.x, b.y));
  Rng e(7), f(7);
  const double once = tradeoff_loss(net, b.x, b.y, 1.0, 8.0, PgdConfig{}, e);
  CHECK(tradeoff_loss(net, b.x, b.y, 2.0, 16.0, PgdConfig{}, f) == 2.0 * once);
  Rng g(7);
  CHECK(once == doctest::Approx(natural_loss(net, b.x, b.y) + 8.0 * adversarial_loss(net, b.x, b.y, PgdConfig{}, g))
                    .epsilon(1e-14));
}

TEST_CASE("training configuration") {
  TrainConfig c;
  c.epochs = 20;
  CHECK(c.resolved_cutoff() == 16);
  c.cutoff = 0;
  CHECK(c.resolved_cutoff() == 0);
  c.milestones = {10, 15};
  CHECK(c.lr_at(10) == 0.1);
  CHECK(c.lr_at(11) == doctest::Approx(0.01));
  CHECK(c.lr_at(16) == doctest::Approx(0.001));
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ContractError);
  c = TrainConfig{};
  c.rho = 1.0;
  CHECK_THROWS_AS(c.validate(), ContractError);
}

TEST_CASE("plain sgd on a quadratic matches the closed form") {
  // f(w) = |w|^2 / 2, gradient w, so w_k = (1 - lr)^k w_0
  QuantLayer l;
  l.name = "w";
  l.w = Tensor::from({1.5, -0.5, 2.0});
  QuantState st = make_quant_state(QuantScheme{QuantVariant::None}, {l}, 1.02, 0);
  Tensor v;
  const double lr = 0.1;
  for (int k = 1; k <= 50; ++k) {
    const Tensor g = st.layers[0].w;
    quant_step(st, {sgd_direction(v, g, &st.layers[0].w, 0.0, 0.0)}, lr);
    CHECK(st.layers[0].u == st.layers[0].w);
    for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(st.layers[0].w[i] - std::pow(1 - lr, k) * l.w[i]) < 1e-10);
  }
}

TEST_CASE("heavy-ball direction with decay on w") {
  Tensor v;
  const Tensor g = Tensor::from({1.0, -2.0}), w = Tensor::from({10.0, 20.0});
  CHECK(sgd_direction(v, g, &w, 0.9, 0.1) == Tensor::from({2.0, 0.0}));
  CHECK(sgd_direction(v, g, &w, 0.9, 0.1) == Tensor::from({0.9 * 2.0 + 2.0, 0.0}));
  Tensor u;
  CHECK(sgd_direction(u, g, nullptr, 0.9, 0.1) == g);
}

TEST_CASE("forward passes in training see u, never w") {
  TrainConfig c = quick_config(QuantVariant::Binary, LossKind::Natural, 2);
  TrainState st = init_training(tiny_spec(), c);
  Rng rng(11);
  const Batch b = random_batch(rng, 4);
  for (auto& l : st.quant.layers) l.u = QuantScheme{QuantVariant::Binary}.project(l.w).u;
  load_quantized(st);
  const Tensor ref = st.net.logits(b.x);
  for (auto& l : st.quant.layers)
    for (auto& x : l.w.storage()) x *= 7.0;  // w alone changes
  CHECK(st.net.logits(b.x) == ref);
  st.quant.layers[0].u[0] += 0.5;
  load_quantized(st);
  CHECK(st.net.logits(b.x) != ref);
}

TEST_CASE("gradients are taken at u") {
  const Dataset d = gen_synthetic(SyntheticKind::Blobs, 32, 0.05, 1);
  TrainConfig c = quick_config(QuantVariant::Binary, LossKind::Natural, 1);
  c.batch_size = 32;
  c.momentum = 0.0;
  c.weight_decay = 0.0;
  c.cutoff = 0;
  TrainState st = init_training(blob_spec(), c);
  for (auto& l : st.quant.layers) l.u = QuantScheme{QuantVariant::Binary}.project(l.w).u;
  load_quantized(st);
  TrainState copy = st;
  // expected step: gradient of the loss at u (the registry), applied to w
  Rng shuffle = st.rng;
  std::vector<std::size_t> order(32);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.index(i)]);
  Tape t;
  const auto bound = copy.net.bind(t, true);
  const auto lg = record_loss(t, copy.net, bound, d.gather_images(order), d.gather_labels(order),
                              c.loss, Mode::Train, shuffle);
  const Gradients g = t.backward(lg.total);
  train_epoch(st, d, c);
  for (std::size_t i = 0; i < st.quant.layers.size(); ++i) {
    const auto& before = copy.quant.layers[i];
    Tensor expect = before.w;
    for (std::size_t j = 0; j < expect.size(); ++j) expect[j] -= c.lr * g.of(bound[before.param])[j];
    CHECK(st.quant.layers[i].w == expect);
  }
}

TEST_CASE("float scheme keeps u equal to w") {
  const Dataset d = gen_synthetic(SyntheticKind::Moons, 64, 0.1, 2);
  TrainConfig c = quick_config(QuantVariant::None, LossKind::Natural, 2);
  TrainState st = init_training(blob_spec(), c);
  train_epoch(st, d, c);
  for (const auto& l : st.quant.layers) CHECK(l.u == l.w);
}

TEST_CASE("separable blobs are fit within five epochs") {
  const Dataset d = gen_synthetic(SyntheticKind::Blobs, 200, 0.05, 3);
  for (auto v : {QuantVariant::None, QuantVariant::Binary}) {
    TrainConfig c = quick_config(v, LossKind::Natural, 5);
    TrainState st = init_training(blob_spec(), c);
    double first = 0.0, last = 0.0;
    for (std::size_t e = 0; e < 5; ++e) {
      last = train_epoch(st, d, c).mean_loss;
      if (e == 0) first = last;
    }
    CHECK(last < first);
    CHECK(last < 0.1);
  }
}

TEST_CASE("seeded runs are bit-identical") {
  const Dataset d = gen_synthetic(SyntheticKind::Moons, 96, 0.1, 4);
  TrainConfig c = quick_config(QuantVariant::Ternary, LossKind::Tradeoff, 3);
  c.eval_samples = 32;
  c.loss.pgd.iters = 3;
  auto run = [&] {
    TrainState st = init_training(blob_spec(), c);
    run_training(st, d, d, c, 3);
    return st;
  };
  const TrainState a = run(), b = run();
  REQUIRE(a.history.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) CHECK(a.history[i].same_result(b.history[i]));
  for (std::size_t i = 0; i < a.net.params().size(); ++i) CHECK(a.net.params()[i].value == b.net.params()[i].value);
}

TEST_CASE("non-finite loss aborts the epoch") {
  const Dataset d = gen_synthetic(SyntheticKind::Blobs, 32, 0.05, 5);
  TrainConfig c = quick_config(QuantVariant::None, LossKind::Natural, 1);
  TrainState st = init_training(blob_spec(), c);
  st.net.weight("m0.fc.bias")[0] = std::nan("");
  CHECK_THROWS_AS(train_epoch(st, d, c), NumericError);
  Dataset empty;
  CHECK_THROWS_AS(train_epoch(st, empty, c), ContractError);
}

TEST_CASE("adversarial ascent holds per batch") {
  const Dataset d = gen_synthetic(SyntheticKind::Moons, 128, 0.1, 6);
  TrainConfig c = quick_config(QuantVariant::None, LossKind::Tradeoff, 2);
  TrainState st = init_training(blob_spec(), c);
  std::size_t violations = 0;
  for (int e = 0; e < 2; ++e) violations += train_epoch(st, d, c).ascent_violations;
  CHECK(violations == 0);
}

TEST_CASE("untrained net is at chance") {
  NetworkSpec s = tiny_spec();
  s.num_classes = 10;
  const Network net = build_network(s, 12);
  Rng rng(13);
  Dataset d;
  d.sample_shape = {1, 8, 8};
  d.num_classes = 10;
  d.images = random_tensor(rng, {1000, 1, 8, 8}, 0, 1);
  d.labels.resize(1000);
  for (auto& y : d.labels) y = static_cast<int>(rng.index(10));
  EvalSuite suite;
  suite.fgsm = suite.ifgsm = false;
  const AccuracyTable t = evaluate(net, d, suite);
  CHECK(std::abs(t.natural - 0.1) <= 0.05);
  CHECK_FALSE(t.fgsm.has_value());
}

TEST_CASE("attack ordering on a naturally trained net") {
  Dataset d = gen_synthetic(SyntheticKind::Moons, 400, 0.1, 7);
  TrainConfig c = quick_config(QuantVariant::None, LossKind::Natural, 8);
  TrainState st = init_training(blob_spec(), c);
  for (int e = 0; e < 8; ++e) train_epoch(st, d, c);
  EvalSuite suite;
  suite.cw = true;
  suite.attack.eps = 0.1;
  suite.attack.alpha = 0.01;
  suite.attack.cw_lr = 0.01;
  const AccuracyTable t = evaluate(st.net, d, suite);
  CHECK(t.natural > 0.8);
  CHECK(*t.fgsm <= t.natural);
  CHECK(*t.ifgsm <= *t.fgsm);
  CHECK(*t.cw < t.natural);
}

TEST_CASE("metrics rows") {
  MetricsRow r{3, 0.5, 0.9, 0.8, 0.7, std::nullopt, 0.25, 2.0, 0.1, 0.0, 1.5};
  CHECK(metrics_header() == "epoch,loss,N,A1,A2,A3,M_t,lambda,weight_sparsity,channel_sparsity,seconds");
  CHECK(metrics_csv_line(r) == "3,0.5,0.90000000000000002,0.80000000000000004,0.69999999999999996,,0.25,2,"
                               "0.10000000000000001,0,1.5");
  MetricsRow q = r;
  q.seconds = 99;
  CHECK(r.same_result(q));
  q.a3 = 0.1;
  CHECK_FALSE(r.same_result(q));
}
