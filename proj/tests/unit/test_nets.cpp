#include "helpers.hpp"

using namespace robustq;
using namespace testing;

namespace {

// copies every parameter of `from` whose name exists in `to`
void copy_params(const Network& from, Network& to, const std::string& from_prefix, const std::string& to_prefix) {
  for (auto& p : to.params()) {
    if (p.name.rfind(to_prefix, 0) != 0) continue;
    p.value = from.weight(from_prefix + p.name.substr(to_prefix.size()));
  }
}

}  // namespace

TEST_CASE("parameter count matches a hand count") {
  NetworkSpec s;
  s.in_channels = 3;
  s.height = s.width = 32;
  s.widths = {16, 32, 64};
  s.blocks = {3, 3, 3};
  s.num_classes = 10;
  // stem 3*16*9+32; stage 1: 6 convs 16->16; stage 2: 16->32 then 5 convs 32->32;
  // stage 3: 32->64 then 5 convs 64->64; bn adds 2 per filter; fc 64*10+10
  const std::size_t stem = 3 * 16 * 9 + 32;
  const std::size_t s1 = 6 * (16 * 16 * 9 + 32);
  const std::size_t s2 = (16 * 32 * 9 + 64) + 5 * (32 * 32 * 9 + 64);
  const std::size_t s3 = (32 * 64 * 9 + 128) + 5 * (64 * 64 * 9 + 128);
  const std::size_t fc = 64 * 10 + 10;
  const std::size_t hand = stem + s1 + s2 + s3 + fc;
  CHECK(hand == 269722);
  CHECK(expected_parameter_count(s) == hand);
  CHECK(build_network(s, 1).parameter_count() == hand);
  s.ensemble = 2;
  CHECK(build_network(s, 1).parameter_count() == 2 * hand);
}

TEST_CASE("spec validation") {
  NetworkSpec s = tiny_spec();
  CHECK_NOTHROW(s.validate());
  s.ensemble = 0;
  CHECK_THROWS_AS(s.validate(), ContractError);
  s = tiny_spec();
  s.noise_sigma = -0.1;
  CHECK_THROWS_AS(s.validate(), ContractError);
  s = tiny_spec();
  s.widths = {4, 0};
  CHECK_THROWS_AS(s.validate(), ContractError);
}

TEST_CASE("forward rejects a mismatched batch") {
  const Network net = build_network(tiny_spec(), 1);
  CHECK_THROWS_AS(net.logits(Tensor({2, 1, 9, 8})), DimensionError);
  CHECK_THROWS_AS(net.logits(Tensor({2, 3, 8, 8})), DimensionError);
  CHECK(net.logits(Tensor({2, 1, 8, 8})).shape() == Shape{2, 3});
}

TEST_CASE("eval mode is deterministic and ignores the rng") {
  NetworkSpec s = tiny_spec();
  s.noise_sigma = 0.3;
  const Network net = build_network(s, 2);
  Rng data(3), r1(4), r2(5);
  const Tensor x = random_tensor(data, {4, 1, 8, 8}, 0, 1);
  CHECK(net.logits(x, Mode::Eval, &r1) == net.logits(x, Mode::Eval, &r2));
  CHECK(net.logits(x, Mode::Eval, nullptr) == net.logits(x, Mode::Eval, &r1));
}

TEST_CASE("train mode noise is seeded") {
  NetworkSpec s = tiny_spec();
  s.noise_sigma = 0.3;
  const Network net = build_network(s, 2);
  Rng data(3);
  const Tensor x = random_tensor(data, {4, 1, 8, 8}, 0, 1);
  Rng a(9), b(9), c(10);
  const Tensor la = net.logits(x, Mode::Train, &a);
  CHECK(la == net.logits(x, Mode::Train, &b));
  CHECK(la != net.logits(x, Mode::Train, &c));
}

TEST_CASE("zero sigma: train output needs no noise and matches eval under the same statistics") {
  Network net = build_network(tiny_spec(), 4);
  Rng data(5), r1(1), r2(2);
  const Tensor x = random_tensor(data, {6, 1, 8, 8}, 0, 1);
  const Tensor train = net.logits(x, Mode::Train, nullptr);
  CHECK(train == net.logits(x, Mode::Train, &r1));
  CHECK(train == net.logits(x, Mode::Train, &r2));
  // put this batch's statistics into the running averages, then eval must agree
  Tape t;
  const auto res = net.forward(t, t.constant(x), net.bind(t, false), Mode::Train, nullptr);
  for (const auto& obs : res.bn_stats) {
    net.bn_states()[obs.bn].running_mean = obs.stats.mean;
    net.bn_states()[obs.bn].running_var = obs.stats.var;
  }
  CHECK(max_abs_diff(train, net.logits(x, Mode::Eval)) < 1e-12);
}

TEST_CASE("noise is drawn only for residual mappings") {
  NetworkSpec s = tiny_spec();
  s.noise_sigma = 0.1;
  s.blocks = {2, 1};
  const Network net = build_network(s, 6);
  Rng data(7);
  const std::size_t n = 3;
  const Tensor x = random_tensor(data, {n, 1, 8, 8}, 0, 1);
  Rng used(11), reference(11);
  net.logits(x, Mode::Train, &used);
  // residual outputs: two 4x8x8 blocks in stage 1, one 8x4x4 block in stage 2
  const std::size_t draws = n * (2 * 4 * 8 * 8 + 8 * 4 * 4);
  for (std::size_t i = 0; i < draws; ++i) reference.normal();
  CHECK(used.state() == reference.state());
}

TEST_CASE("ensemble output is the mean of its members") {
  NetworkSpec s2 = tiny_spec();
  s2.ensemble = 2;
  const Network pair = build_network(s2, 8);
  NetworkSpec s1 = tiny_spec();
  Network a = build_network(s1, 0), b = build_network(s1, 0);
  copy_params(pair, a, "m0.", "m0.");
  copy_params(pair, b, "m1.", "m0.");
  Rng data(9);
  const Tensor x = random_tensor(data, {5, 1, 8, 8}, 0, 1);
  const Tensor za = a.logits(x), zb = b.logits(x), z = pair.logits(x);
  double worst = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) worst = std::max(worst, std::abs(z[i] - 0.5 * (za[i] + zb[i])));
  CHECK(worst < 1e-12);
  CHECK(za != zb);
}

TEST_CASE("identical members reproduce the single network exactly") {
  NetworkSpec s2 = tiny_spec();
  s2.ensemble = 2;
  Network pair = build_network(s2, 10);
  copy_params(pair, pair, "m0.", "m1.");
  Network single = build_network(tiny_spec(), 0);
  copy_params(pair, single, "m0.", "m0.");
  Rng data(11);
  const Tensor x = random_tensor(data, {3, 1, 8, 8}, 0, 1);
  CHECK(pair.logits(x) == single.logits(x));
}

TEST_CASE("plain resnet and one-member zero-noise ensemble coincide") {
  NetworkSpec s = tiny_spec();
  const Network a = build_network(s, 12);
  s.ensemble = 1;
  s.noise_sigma = 0.0;
  const Network b = build_network(s, 12);
  Rng data(13), r(1);
  const Tensor x = random_tensor(data, {2, 1, 8, 8}, 0, 1);
  CHECK(a.logits(x, Mode::Train, nullptr) == b.logits(x, Mode::Train, &r));
}

TEST_CASE("conv channels enumerate every filter") {
  const Network net = build_network(tiny_spec(), 14);
  const auto ch = conv_channels(net);
  // stem 4, stage 1 block 4 + 4, stage 2 block 8 + 8
  CHECK(ch.size() == 4 + 4 + 4 + 8 + 8);
  for (const auto& c : ch) {
    const Tensor& k = net.params()[c.param].value;
    const std::size_t len = k.size() / k.dim(0);
    REQUIRE(c.weights.size() == len);
    for (std::size_t i = 0; i < len; ++i) CHECK(c.weights[i] == k[c.channel * len + i]);
  }
  NetworkSpec one = tiny_spec();
  one.widths = {16};
  one.blocks = {1};
  CHECK(conv_channels(build_network(one, 1)).size() == 48);
}

TEST_CASE("initialization is fan-in scaled") {
  NetworkSpec s = tiny_spec();
  s.widths = {32, 64};
  const Network net = build_network(s, 15);
  const Tensor& k = net.weight("m0.s1.b0.c2.conv");  // fan-in 64*9
  double ss = 0.0;
  for (double v : k.values()) ss += v * v;
  const double var = ss / static_cast<double>(k.size());
  CHECK(var == doctest::Approx(2.0 / (64 * 9)).epsilon(0.05));
}
