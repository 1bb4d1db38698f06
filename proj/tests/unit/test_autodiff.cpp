#include "helpers.hpp"

#include "robustq/autodiff.hpp"

using namespace robustq;
using namespace testing;

TEST_CASE("matmul by identity and by a column") {
  Tape t;
  const auto a = t.constant(Tensor::matrix(2, 2, {1, 2, 3, 4}));
  const auto i = t.constant(Tensor::matrix(2, 2, {1, 0, 0, 1}));
  CHECK(t.value(t.matmul(a, i)) == Tensor::matrix(2, 2, {1, 2, 3, 4}));
  const auto r = t.constant(Tensor::matrix(1, 2, {1, 0}));
  const auto c = t.constant(Tensor::matrix(2, 1, {2, 3}));
  CHECK(t.value(t.matmul(r, c)) == Tensor::matrix(1, 1, {2}));
}

TEST_CASE("matmul rejects mismatched inner dimensions") {
  Tape t;
  const auto a = t.constant(Tensor({2, 3}));
  const auto b = t.constant(Tensor({2, 3}));
  CHECK_THROWS_AS(t.matmul(a, b), DimensionError);
}

TEST_CASE("gradient of sum(a b) with respect to a is ones * b^T") {
  Rng rng(1);
  const Tensor a = random_tensor(rng, {3, 4}), b = random_tensor(rng, {4, 2});
  Tape t;
  const auto ia = t.leaf(a), ib = t.leaf(b);
  const auto g = t.backward(t.sum(t.matmul(ia, ib)));
  Tensor expect({3, 4});
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t k = 0; k < 4; ++k) expect[r * 4 + k] = b[k * 2] + b[k * 2 + 1];
  CHECK(rel_error(g.of(ia), expect) < 1e-12);
  auto f = [&](const Tensor& p) {
    Tape u;
    return scalar_of(u, u.sum(u.matmul(u.constant(p), u.constant(b))));
  };
  CHECK(rel_error(g.of(ia), numeric_gradient(f, a)) < 1e-4);
}

TEST_CASE("conv2d forward on simple inputs") {
  Tape t;
  const auto x = t.constant(Tensor({1, 1, 3, 3}, 1.0));
  CHECK(t.value(t.conv2d(x, t.constant(Tensor({1, 1, 3, 3}, 1.0)), 1)).at(0, 0, 1, 1) == 9.0);
  const Tensor zero = t.value(t.conv2d(x, t.constant(Tensor({2, 1, 3, 3}, 0.0)), 1));
  for (double v : zero.values()) CHECK(v == 0.0);
  // corner sees 4 of the 9 taps through the padding
  CHECK(t.value(t.conv2d(x, t.constant(Tensor({1, 1, 3, 3}, 1.0)), 1)).at(0, 0, 0, 0) == 4.0);
}

TEST_CASE("conv2d output size uses floor division") {
  Tape t;
  const auto x = t.constant(Tensor({1, 2, 7, 5}));
  const auto k = t.constant(Tensor({3, 2, 3, 3}));
  CHECK(t.value(t.conv2d(x, k, 2)).shape() == Shape{1, 3, 4, 3});
  CHECK(t.value(t.conv2d(x, k, 1)).shape() == Shape{1, 3, 7, 5});
  CHECK_THROWS_AS(t.conv2d(x, t.constant(Tensor({3, 1, 3, 3})), 1), DimensionError);
}

TEST_CASE("conv2d matches a direct loop") {
  Rng rng(2);
  const Tensor x = random_tensor(rng, {2, 3, 6, 5}), k = random_tensor(rng, {4, 3, 3, 3});
  for (std::size_t stride : {1u, 2u}) {
    Tape t;
    const Tensor y = t.value(t.conv2d(t.constant(x), t.constant(k), stride));
    const std::size_t oh = (6 - 1) / stride + 1, ow = (5 - 1) / stride + 1;
    REQUIRE(y.shape() == Shape{2, 4, oh, ow});
    double worst = 0.0;
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t o = 0; o < 4; ++o)
        for (std::size_t i = 0; i < oh; ++i)
          for (std::size_t j = 0; j < ow; ++j) {
            double s = 0.0;
            for (std::size_t c = 0; c < 3; ++c)
              for (int di = 0; di < 3; ++di)
                for (int dj = 0; dj < 3; ++dj) {
                  const long r = static_cast<long>(i * stride) + di - 1, q = static_cast<long>(j * stride) + dj - 1;
                  if (r < 0 || q < 0 || r >= 6 || q >= 5) continue;
                  s += x.at(n, c, r, q) * k.at(o, c, di, dj);
                }
            worst = std::max(worst, std::abs(s - y.at(n, o, i, j)));
          }
    CHECK(worst < 1e-12);
  }
}

TEST_CASE("conv2d gradients agree with central differences") {
  Rng rng(3);
  const Tensor x = random_tensor(rng, {2, 3, 8, 8}), k = random_tensor(rng, {4, 3, 3, 3});
  for (std::size_t stride : {1u, 2u}) {
    auto loss = [&](const Tensor& xv, const Tensor& kv) {
      Tape t;
      return scalar_of(t, t.sum(t.tanh(t.conv2d(t.constant(xv), t.constant(kv), stride))));
    };
    Tape t;
    const auto ix = t.leaf(x), ik = t.leaf(k);
    const auto g = t.backward(t.sum(t.tanh(t.conv2d(ix, ik, stride))));
    CHECK(rel_error(g.of(ix), numeric_gradient([&](const Tensor& p) { return loss(p, k); }, x, 1e-4)) < 1e-4);
    CHECK(rel_error(g.of(ik), numeric_gradient([&](const Tensor& p) { return loss(x, p); }, k, 1e-4)) < 1e-4);
  }
}

TEST_CASE("elementwise ops") {
  Tape t;
  CHECK(t.value(t.sign(t.constant(Tensor::from({1.5, -0.2, 0.0})))) == Tensor::from({1, -1, 0}));
  CHECK(t.value(t.mean(t.abs(t.constant(Tensor::from({1, -2, 3})))))[0] == 2.0);
  CHECK(t.value(t.tanh(t.constant(Tensor::from({0.0}))))[0] == 0.0);
  CHECK(t.value(t.relu(t.constant(Tensor::from({-1, 0, 2})))) == Tensor::from({0, 0, 2}));
  CHECK(t.value(t.mul_scalar(t.constant(Tensor::from({1, -2})), 3.0)) == Tensor::from({3, -6}));
  CHECK(t.value(t.add(t.constant(Tensor::from({1, 2})), t.constant(Tensor::from({3, 4})))) == Tensor::from({4, 6}));
}

TEST_CASE("softmax cross-entropy values") {
  Tape t;
  const int y0[] = {0};
  CHECK(t.value(t.softmax_cross_entropy(t.constant(Tensor::matrix(1, 2, {0.3, 0.3})), y0))[0] ==
        doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(t.value(t.softmax_cross_entropy(t.constant(Tensor::matrix(1, 2, {10, -10})), y0))[0] < 1e-4);
  // large logits stay finite
  CHECK(std::isfinite(t.value(t.softmax_cross_entropy(t.constant(Tensor::matrix(1, 2, {1000, -1000})), y0))[0]));
  const int bad[] = {2};
  CHECK_THROWS_AS(t.softmax_cross_entropy(t.constant(Tensor::matrix(1, 2, {0, 0})), bad), IndexError);
}

TEST_CASE("softmax cross-entropy gradient") {
  Rng rng(4);
  const Tensor z = random_tensor(rng, {4, 3}, -2, 2);
  const int y[] = {0, 2, 1, 2};
  auto f = [&](const Tensor& p) {
    Tape t;
    return scalar_of(t, t.softmax_cross_entropy(t.constant(p), y));
  };
  Tape t;
  const auto iz = t.leaf(z);
  const auto g = t.backward(t.softmax_cross_entropy(iz, y));
  CHECK(rel_error(g.of(iz), numeric_gradient(f, z)) < 1e-4);
}

TEST_CASE("kl divergence") {
  Tape t;
  Rng rng(5);
  const Tensor p = random_tensor(rng, {5, 4}, -3, 3), q = random_tensor(rng, {5, 4}, -3, 3);
  CHECK(t.value(t.kl_divergence(t.constant(p), t.constant(p)))[0] == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(t.value(t.kl_divergence(t.constant(p), t.constant(q)))[0] >= 0.0);
  // p = (1/4, 3/4), q = (1/2, 1/2)
  const double expect = 0.25 * std::log(0.5) + 0.75 * std::log(1.5);
  CHECK(t.value(t.kl_divergence(t.constant(Tensor::matrix(1, 2, {0.0, std::log(3.0)})),
                                t.constant(Tensor::matrix(1, 2, {0.0, 0.0}))))[0] ==
        doctest::Approx(expect).epsilon(1e-13));
  Tape g;
  const auto ip = g.leaf(p), iq = g.leaf(q);
  const auto gr = g.backward(g.kl_divergence(ip, iq));
  auto fp = [&](const Tensor& v) {
    Tape u;
    return scalar_of(u, u.kl_divergence(u.constant(v), u.constant(q)));
  };
  auto fq = [&](const Tensor& v) {
    Tape u;
    return scalar_of(u, u.kl_divergence(u.constant(p), u.constant(v)));
  };
  CHECK(rel_error(gr.of(ip), numeric_gradient(fp, p)) < 1e-4);
  CHECK(rel_error(gr.of(iq), numeric_gradient(fq, q)) < 1e-4);
}

TEST_CASE("soft cross-entropy equals kl plus the entropy of p") {
  Rng rng(6);
  const Tensor p = random_tensor(rng, {3, 4}, -2, 2), q = random_tensor(rng, {3, 4}, -2, 2);
  Tape t;
  const double ce = t.value(t.soft_cross_entropy(t.constant(p), t.constant(q)))[0];
  const double kl = t.value(t.kl_divergence(t.constant(p), t.constant(q)))[0];
  const double self = t.value(t.soft_cross_entropy(t.constant(p), t.constant(p)))[0];
  CHECK(ce == doctest::Approx(kl + self).epsilon(1e-12));
}

TEST_CASE("backward requires a scalar and zero-fills unreachable leaves") {
  Tape t;
  const auto a = t.leaf(Tensor::from({1, 2}));
  const auto b = t.leaf(Tensor::from({5, 6, 7}));
  CHECK_THROWS_AS(t.backward(t.relu(a)), ContractError);
  const auto g = t.backward(t.sum(a));
  CHECK(g.of(a) == Tensor::from({1, 1}));
  CHECK(g.of(b) == Tensor::from({0, 0, 0}));
}

TEST_CASE("grad_check on closed forms") {
  const ScalarFn square = [](Tape& t, ValueId x) {
    // x^2 via x . x
    return t.matmul(x, t.matmul(t.constant(Tensor::matrix(1, 1, {1})), x));
  };
  const Tensor three = Tensor::matrix(1, 1, {3});
  CHECK(gradient_at(square, three)[0] == doctest::Approx(6.0).epsilon(1e-12));
  CHECK(numeric_gradient(
            [](const Tensor& p) { return p[0] * p[0]; }, three, 1e-4)[0] == doctest::Approx(6.0).epsilon(1e-6));
  CHECK(grad_check(square, three, 1e-4) < 1e-6);
  const ScalarFn constant = [](Tape& t, ValueId) { return t.constant(Tensor::from({4.0})); };
  CHECK(gradient_at(constant, three)[0] == 0.0);
  CHECK(grad_check(constant, three, 1e-4) == 0.0);
}

TEST_CASE("two-layer net passes grad_check") {
  Rng rng(7);
  const Tensor w1 = random_tensor(rng, {5, 6}), w2 = random_tensor(rng, {6, 3}), b = random_tensor(rng, {3});
  const int y[] = {0, 1, 2, 1};
  const ScalarFn net = [&](Tape& t, ValueId x) {
    const auto h = t.tanh(t.matmul(x, t.constant(w1)));
    return t.softmax_cross_entropy(t.add_row_bias(t.matmul(h, t.constant(w2)), t.constant(b)), y);
  };
  CHECK(grad_check(net, random_tensor(rng, {4, 5}), 1e-4) < 1e-4);
}

TEST_CASE("batch norm, pooling and shortcut gradients") {
  Rng rng(8);
  const Tensor x = random_tensor(rng, {3, 2, 4, 4});
  const Tensor gamma = random_tensor(rng, {2}, 0.5, 1.5), beta = random_tensor(rng, {2});
  const Tensor mix = random_tensor(rng, {4, 3});
  const int y[] = {0, 2, 1};
  const ScalarFn f = [&](Tape& t, ValueId in) {
    const auto bn = t.batch_norm_train(in, t.constant(gamma), t.constant(beta), 1e-5);
    const auto sc = t.shortcut_downsample(t.relu(bn), 4, 2);
    return t.softmax_cross_entropy(t.matmul(t.global_avg_pool(sc), t.constant(mix)), y);
  };
  CHECK(grad_check(f, x, 1e-4) < 1e-4);
  const std::vector<double> rm = {0.1, -0.2}, rv = {1.5, 0.7};
  const ScalarFn e = [&](Tape& t, ValueId g) {
    const auto bn = t.batch_norm_eval(t.constant(x), g, t.constant(beta), rm, rv, 1e-5);
    return t.sum(t.tanh(bn));
  };
  CHECK(grad_check(e, gamma, 1e-4) < 1e-4);
}

TEST_CASE("cw margin value and gradient") {
  Tape t;
  const int y[] = {1, 0};
  const auto z = t.constant(Tensor::matrix(2, 3, {0.0, 2.0, 1.0, 0.5, 3.0, -1.0}));
  // sample 0: 2 - 1 = 1; sample 1: max(0.5 - 3, -0) = 0
  CHECK(t.value(t.cw_margin(z, y, 0.0))[0] == 1.0);
  CHECK(t.value(t.cw_margin(z, y, 1.0))[0] == 0.0);
  Rng rng(9);
  const ScalarFn f = [&](Tape& tp, ValueId in) { return tp.cw_margin(in, y, 5.0); };
  CHECK(grad_check(f, random_tensor(rng, {2, 3}), 1e-4) < 1e-4);
}

TEST_CASE("building the same graph twice gives identical results") {
  Rng rng(10);
  const Tensor x = random_tensor(rng, {2, 1, 5, 5}), k = random_tensor(rng, {3, 1, 3, 3});
  auto run = [&] {
    Tape t;
    const auto ik = t.leaf(k);
    const auto l = t.sum(t.tanh(t.conv2d(t.constant(x), ik, 1)));
    return std::make_pair(t.value(l), t.backward(l).of(ik));
  };
  const auto a = run(), b = run();
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
}
