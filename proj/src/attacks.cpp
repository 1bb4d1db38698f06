#include "robustq/attacks.hpp"

#include <algorithm>
#include <cmath>

namespace robustq {

void AttackConfig::validate() const {
  if (!(eps > 0.0)) throw ContractError("attack: eps must be > 0");
  if (!(alpha > 0.0)) throw ContractError("attack: alpha must be > 0");
  if (iters < 1 || cw_iters < 1) throw ContractError("attack: iteration counts must be >= 1");
  if (!(cw_lr > 0.0)) throw ContractError("attack: C&W learning rate must be > 0");
  if (!(kappa >= 0.0)) throw ContractError("attack: kappa must be >= 0");
  if (!(lo < hi)) throw ContractError("attack: pixel range must satisfy lo < hi");
}

void PgdConfig::validate() const {
  if (!(eps >= 0.0)) throw ContractError("pgd: eps must be >= 0");
  if (!(step >= 0.0)) throw ContractError("pgd: step must be >= 0");
  if (!(lo < hi)) throw ContractError("pgd: pixel range must satisfy lo < hi");
}

namespace {

double sgn(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

void check_batch(const Tensor& x, std::span<const int> y) {
  if (x.rank() < 2 || x.dim(0) != y.size())
    throw DimensionError("attack: batch of " + shape_str(x.shape()) + " with " + std::to_string(y.size()) + " labels");
}

void require_finite(const Tensor& g, const char* who) {
  if (!g.all_finite()) throw NumericError(std::string(who) + ": non-finite input gradient");
}

// x + delta, clamped to the pixel range
Tensor apply(const Tensor& x, const Tensor& delta, double lo, double hi) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::clamp(x[i] + delta[i], lo, hi);
  return out;
}

template <class LossFn>
Tensor gradient_of(const LogitsFn& f, const Tensor& x, LossFn loss) {
  Tape tape;
  const ValueId xi = tape.leaf(x, true);
  const ValueId l = loss(tape, f(tape, xi));
  return std::move(tape.backward(l).of(xi));
}

}  // namespace

Tensor clip_eps(const Tensor& v, double eps) {
  if (!(eps >= 0.0)) throw ContractError("clip_eps: eps must be >= 0");
  Tensor out(v.shape());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = std::clamp(v[i], -eps, eps);
  return out;
}

Tensor input_gradient(const LogitsFn& f, const Tensor& x, std::span<const int> y) {
  check_batch(x, y);
  return gradient_of(f, x, [&](Tape& t, ValueId z) { return t.softmax_cross_entropy(z, y, Reduction::Sum); });
}

Tensor fgsm(const LogitsFn& f, const Tensor& x, std::span<const int> y, double eps, double lo, double hi) {
  if (!(eps >= 0.0)) throw ContractError("fgsm: eps must be >= 0");
  const Tensor g = input_gradient(f, x, y);
  require_finite(g, "fgsm");
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::clamp(x[i] + eps * sgn(g[i]), lo, hi);
  return out;
}

Tensor ifgsm(const LogitsFn& f, const Tensor& x, std::span<const int> y, const AttackConfig& cfg) {
  cfg.validate();
  check_batch(x, y);
  // the iterate is x + delta; the ball projection acts on delta, the pixel clamp on the iterate
  Tensor delta(x.shape(), 0.0);
  Tensor xk = x;
  for (std::size_t it = 0; it < cfg.iters; ++it) {
    const Tensor g = input_gradient(f, xk, y);
    require_finite(g, "ifgsm");
    for (std::size_t i = 0; i < x.size(); ++i) delta[i] += cfg.alpha * sgn(g[i]);
    if (!cfg.final_clip_only) {
      delta = clip_eps(delta, cfg.eps);
      xk = apply(x, delta, cfg.lo, cfg.hi);
    } else {
      for (std::size_t i = 0; i < x.size(); ++i) xk[i] = x[i] + delta[i];
    }
  }
  return apply(x, clip_eps(delta, cfg.eps), cfg.lo, cfg.hi);
}

Tensor cw_linf(const LogitsFn& f, const Tensor& x, std::span<const int> y, const AttackConfig& cfg) {
  cfg.validate();
  check_batch(x, y);
  const std::size_t n = x.dim(0), per = x.size() / n;
  Tensor delta(x.shape(), 0.0), m1(x.shape(), 0.0), m2(x.shape(), 0.0);
  Tensor best = x;
  std::vector<bool> found(n, false);
  constexpr double b1 = 0.9, b2 = 0.999, tiny = 1e-8;
  Tensor xk = x;
  for (std::size_t it = 1; it <= cfg.cw_iters + 1; ++it) {
    Tape tape;
    const ValueId xi = tape.leaf(xk, true);
    const ValueId z = f(tape, xi);
    const Tensor& zv = tape.value(z);
    const std::size_t k = zv.dim(1);
    for (std::size_t s = 0; s < n; ++s) {
      if (found[s]) continue;
      const double* row = zv.data() + s * k;
      const std::size_t pred = static_cast<std::size_t>(std::max_element(row, row + k) - row);
      if (pred != static_cast<std::size_t>(y[s])) {
        found[s] = true;
        std::copy_n(xk.data() + s * per, per, best.data() + s * per);
      }
    }
    if (it > cfg.cw_iters) break;
    const Tensor g = tape.backward(tape.cw_margin(z, y, cfg.kappa)).of(xi);
    require_finite(g, "cw_linf");
    // Adam on delta, descending the margin
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(it));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(it));
    for (std::size_t i = 0; i < x.size(); ++i) {
      m1[i] = b1 * m1[i] + (1.0 - b1) * g[i];
      m2[i] = b2 * m2[i] + (1.0 - b2) * g[i] * g[i];
      delta[i] -= cfg.cw_lr * (m1[i] / c1) / (std::sqrt(m2[i] / c2) + tiny);
    }
    delta = clip_eps(delta, cfg.eps);
    xk = apply(x, delta, cfg.lo, cfg.hi);
  }
  for (std::size_t s = 0; s < n; ++s)
    if (!found[s]) std::copy_n(xk.data() + s * per, per, best.data() + s * per);
  return best;
}

Tensor pgd(const LogitsFn& f, const Tensor& x, std::span<const int> y, const PgdConfig& cfg, Rng& rng,
           PgdObjective objective, const Tensor* clean_logits) {
  cfg.validate();
  check_batch(x, y);
  if (objective == PgdObjective::Kl && clean_logits == nullptr)
    throw ContractError("pgd: KL objective needs the clean logits");
  Tensor delta(x.shape());
  for (auto& v : delta.storage()) v = cfg.eps > 0.0 ? rng.uniform(-cfg.eps, cfg.eps) : 0.0;
  Tensor xk = apply(x, delta, cfg.lo, cfg.hi);
  for (std::size_t it = 0; it < cfg.iters; ++it) {
    Tensor g;
    if (objective == PgdObjective::CrossEntropy)
      g = input_gradient(f, xk, y);
    else
      g = gradient_of(f, xk, [&](Tape& t, ValueId z) { return t.kl_divergence(t.constant(*clean_logits), z); });
    require_finite(g, "pgd");
    for (std::size_t i = 0; i < x.size(); ++i) delta[i] += cfg.step * sgn(g[i]);
    delta = clip_eps(delta, cfg.eps);
    xk = apply(x, delta, cfg.lo, cfg.hi);
  }
  return xk;
}

}  // namespace robustq
