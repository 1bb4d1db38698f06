#include "helpers.hpp"

#include <cmath>

#include "robustq/attacks.hpp"

using namespace robustq;
using namespace testing;

namespace {

// two-class linear model z = x W + b on flat inputs
struct Linear {
  Tensor w;  // d x 2
  Tensor b;  // 2

  LogitsFn fn() const {
    return [this](Tape& t, ValueId x) { return t.add_row_bias(t.matmul(x, t.constant(w)), t.constant(b)); };
  }
  // per-sample cross-entropy by hand
  double loss(const Tensor& x, std::size_t n, int y) const {
    const std::size_t d = w.dim(0);
    double z[2] = {b[0], b[1]};
    for (std::size_t k = 0; k < d; ++k)
      for (int c = 0; c < 2; ++c) z[c] += x[n * d + k] * w[k * 2 + c];
    const double m = z[1 - y] - z[y];
    return m > 0 ? m + std::log1p(std::exp(-m)) : std::log1p(std::exp(m));
  }
  // worst case over the l-infinity ball, no pixel bounds: margin shifts by eps * |w_other - w_y|_1
  double worst_loss(const Tensor& x, std::size_t n, int y, double eps) const {
    const std::size_t d = w.dim(0);
    double z[2] = {b[0], b[1]}, l1 = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
      for (int c = 0; c < 2; ++c) z[c] += x[n * d + k] * w[k * 2 + c];
      l1 += std::abs(w[k * 2 + 1 - y] - w[k * 2 + y]);
    }
    const double m = z[1 - y] - z[y] + eps * l1;
    return m > 0 ? m + std::log1p(std::exp(-m)) : std::log1p(std::exp(m));
  }
};

Linear random_linear(Rng& rng, std::size_t d) { return Linear{random_tensor(rng, {d, 2}), random_tensor(rng, {2})}; }

std::vector<int> random_labels(Rng& rng, std::size_t n) {
  std::vector<int> y(n);
  for (auto& v : y) v = static_cast<int>(rng.index(2));
  return y;
}

bool in_box(const Tensor& x, double lo, double hi) {
  for (double v : x.values())
    if (v < lo || v > hi) return false;
  return true;
}

}  // namespace

TEST_CASE("clip to the epsilon ball") {
  CHECK(clip_eps(Tensor::from({0.05, 0.01, -0.05}), 0.031) == Tensor::from({0.031, 0.01, -0.031}));
  CHECK(clip_eps(Tensor::from({0.031, -0.031}), 0.031) == Tensor::from({0.031, -0.031}));
}

TEST_CASE("attack configuration validation") {
  AttackConfig c;
  CHECK(c.eps == 0.031);
  CHECK(c.alpha == doctest::Approx(1.0 / 255));
  CHECK(c.iters == 20);
  CHECK(c.cw_lr == 0.0006);
  CHECK(c.cw_iters == 50);
  CHECK_NOTHROW(c.validate());
  c.iters = 0;
  CHECK_THROWS_AS(c.validate(), ContractError);
  c = AttackConfig{};
  c.lo = 1.0;
  CHECK_THROWS_AS(c.validate(), ContractError);
  c = AttackConfig{};
  c.kappa = -1;
  CHECK_THROWS_AS(c.validate(), ContractError);
  PgdConfig p;
  CHECK(p.eps == 0.031);
  CHECK(p.step == 0.007);
  CHECK(p.iters == 10);
}

TEST_CASE("fgsm with zero budget is the identity") {
  Rng rng(1);
  const Linear m = random_linear(rng, 6);
  const Tensor x = random_tensor(rng, {5, 6}, 0, 1);
  CHECK(fgsm(m.fn(), x, random_labels(rng, 5), 0.0) == x);
}

TEST_CASE("fgsm is the exact worst case of a linear model") {
  Rng rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    const Linear m = random_linear(rng, 8);
    const Tensor x = random_tensor(rng, {6, 8}, 0.2, 0.8);
    const auto y = random_labels(rng, 6);
    const Tensor adv = fgsm(m.fn(), x, y, 0.1);
    CHECK(linf(adv, x) <= 0.1 + 1e-15);
    for (std::size_t n = 0; n < 6; ++n) {
      CHECK(m.loss(adv, n, y[n]) >= m.loss(x, n, y[n]));
      CHECK(m.loss(adv, n, y[n]) == doctest::Approx(m.worst_loss(x, n, y[n], 0.1)).epsilon(1e-12));
    }
  }
}

TEST_CASE("fgsm keeps pixels in range") {
  Rng rng(3);
  const Linear m = random_linear(rng, 8);
  const Tensor x = random_tensor(rng, {20, 8}, 0, 1);
  const Tensor adv = fgsm(m.fn(), x, random_labels(rng, 20), 0.3);
  CHECK(in_box(adv, 0, 1));
  CHECK(linf(adv, x) <= 0.3 + 1e-15);
}

TEST_CASE("one large ifgsm step equals fgsm") {
  Rng rng(4);
  const Linear m = random_linear(rng, 5);
  const Tensor x = random_tensor(rng, {7, 5}, 0, 1);
  const auto y = random_labels(rng, 7);
  AttackConfig c;
  c.iters = 1;
  for (double alpha : {0.031, 0.05, 1.0}) {
    c.alpha = alpha;
    CHECK(ifgsm(m.fn(), x, y, c) == fgsm(m.fn(), x, y, c.eps));
  }
}

TEST_CASE("ifgsm stays in the ball and pixel range, per-step or final clip") {
  Rng rng(5);
  const NetworkSpec s = tiny_spec();
  const Network net = build_network(s, 6);
  const Tensor x = random_tensor(rng, {4, 1, 8, 8}, 0, 1);
  const std::vector<int> y = {0, 1, 2, 1};
  AttackConfig c;
  c.alpha = 0.01;
  for (bool final_only : {false, true}) {
    c.final_clip_only = final_only;
    const Tensor adv = ifgsm(as_logits_fn(net, Mode::Eval), x, y, c);
    CHECK(linf(adv, x) <= c.eps + 1e-15);
    CHECK(in_box(adv, 0, 1));
  }
}

TEST_CASE("ifgsm loss dominates fgsm on a linear model") {
  Rng rng(6);
  const Linear m = random_linear(rng, 10);
  const Tensor x = random_tensor(rng, {8, 10}, 0.2, 0.8);
  const auto y = random_labels(rng, 8);
  const Tensor a = ifgsm(m.fn(), x, y, AttackConfig{});
  for (std::size_t n = 0; n < 8; ++n)
    CHECK(m.loss(a, n, y[n]) == doctest::Approx(m.worst_loss(x, n, y[n], 0.031)).epsilon(1e-12));
}

TEST_CASE("c&w stays within the ball") {
  Rng rng(7);
  const Network net = build_network(tiny_spec(), 8);
  const Tensor x = random_tensor(rng, {4, 1, 8, 8}, 0, 1);
  const std::vector<int> y = {2, 0, 1, 0};
  const Tensor adv = cw_linf(as_logits_fn(net, Mode::Eval), x, y, AttackConfig{});
  CHECK(linf(adv, x) <= 0.031 + 1e-15);
  CHECK(in_box(adv, 0, 1));
}

TEST_CASE("c&w leaves an already misclassified point in the ball") {
  Linear m{Tensor::matrix(2, 2, {1, 0, 0, 1}), Tensor::from({0, 0})};
  const Tensor x = Tensor::matrix(1, 2, {0.9, 0.1});  // predicted class 0
  const int y[] = {1};
  Tape t;
  const double margin = t.value(t.cw_margin(t.constant(x.reshaped({1, 2})), y, 0.0))[0];
  CHECK(margin <= 0.0);
  const Tensor adv = cw_linf(m.fn(), x, y, AttackConfig{});
  CHECK(linf(adv, x) <= 0.031 + 1e-15);
}

TEST_CASE("c&w lowers the margin on a linear model") {
  Rng rng(9);
  const Linear m = random_linear(rng, 6);
  const Tensor x = random_tensor(rng, {10, 6}, 0.2, 0.8);
  const auto y = random_labels(rng, 10);
  AttackConfig c;
  c.cw_lr = 0.01;
  const Tensor adv = cw_linf(m.fn(), x, y, c);
  Tape t;
  const double before = t.value(t.cw_margin(t.constant(t.value(m.fn()(t, t.constant(x)))), y, 1e9))[0];
  const double after = t.value(t.cw_margin(t.constant(t.value(m.fn()(t, t.constant(adv)))), y, 1e9))[0];
  CHECK(after < before);
}

TEST_CASE("pgd without steps returns a random point in the ball") {
  Rng rng(10), a(3), b(3);
  const Linear m = random_linear(rng, 6);
  const Tensor x = random_tensor(rng, {5, 6}, 0.2, 0.8);
  const auto y = random_labels(rng, 5);
  PgdConfig c;
  c.iters = 0;
  const Tensor p = pgd(m.fn(), x, y, c, a);
  CHECK(p != x);
  CHECK(linf(p, x) <= c.eps + 1e-15);
  CHECK(p == pgd(m.fn(), x, y, c, b));
}

TEST_CASE("pgd reaches the closed-form maximizer of a linear model") {
  Rng rng(11), r(12);
  const Linear m = random_linear(rng, 6);
  const Tensor x = random_tensor(rng, {9, 6}, 0.2, 0.8);
  const auto y = random_labels(rng, 9);
  const Tensor p = pgd(m.fn(), x, y, PgdConfig{}, r);
  CHECK(linf(p, x) <= 0.031 + 1e-15);
  for (std::size_t n = 0; n < 9; ++n) {
    CHECK(m.loss(p, n, y[n]) >= m.loss(x, n, y[n]) - 1e-12);
    CHECK(m.loss(p, n, y[n]) == doctest::Approx(m.worst_loss(x, n, y[n], 0.031)).epsilon(1e-12));
  }
}

TEST_CASE("attacks are deterministic") {
  const Network net = build_network(tiny_spec(), 13);
  Rng rng(14);
  const Tensor x = random_tensor(rng, {3, 1, 8, 8}, 0, 1);
  const std::vector<int> y = {0, 1, 2};
  const LogitsFn f = as_logits_fn(net, Mode::Eval);
  CHECK(ifgsm(f, x, y, AttackConfig{}) == ifgsm(f, x, y, AttackConfig{}));
  CHECK(cw_linf(f, x, y, AttackConfig{}) == cw_linf(f, x, y, AttackConfig{}));
  Rng a(1), b(1);
  CHECK(pgd(f, x, y, PgdConfig{}, a) == pgd(f, x, y, PgdConfig{}, b));
}

TEST_CASE("non-finite gradients raise") {
  Linear m{Tensor::matrix(2, 2, {std::nan(""), 0, 0, 1}), Tensor::from({0, 0})};
  const Tensor x = Tensor::matrix(1, 2, {0.5, 0.5});
  const int y[] = {0};
  CHECK_THROWS_AS(fgsm(m.fn(), x, y, 0.1), NumericError);
  CHECK_THROWS_AS(ifgsm(m.fn(), x, y, AttackConfig{}), NumericError);
}

TEST_CASE("larger fgsm budgets never raise linear-model accuracy") {
  Rng rng(15);
  const Linear m = random_linear(rng, 10);
  const Tensor x = random_tensor(rng, {300, 10}, 0.3, 0.7);
  const auto y = random_labels(rng, 300);
  auto accuracy = [&](const Tensor& in) {
    Tape t;
    const Tensor z = t.value(m.fn()(t, t.constant(in)));
    std::size_t ok = 0;
    for (std::size_t n = 0; n < 300; ++n) ok += (z[n * 2 + y[n]] > z[n * 2 + 1 - y[n]]);
    return ok;
  };
  std::size_t prev = accuracy(x);
  for (double eps : {0.01, 0.03, 0.1, 0.2}) {
    const std::size_t acc = accuracy(fgsm(m.fn(), x, y, eps));
    CHECK(acc <= prev);
    prev = acc;
  }
}
