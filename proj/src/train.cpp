#include "robustq/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>

namespace robustq {

LossKind parse_loss(const std::string& name) {
  if (name == "natural") return LossKind::Natural;
  if (name == "adversarial" || name == "at") return LossKind::Adversarial;
  if (name == "trades") return LossKind::Trades;
  if (name == "tradeoff") return LossKind::Tradeoff;
  throw ContractError("unknown loss '" + name + "'");
}

std::string loss_name(LossKind kind) {
  switch (kind) {
    case LossKind::Natural: return "natural";
    case LossKind::Adversarial: return "adversarial";
    case LossKind::Trades: return "trades";
    case LossKind::Tradeoff: return "tradeoff";
  }
  return "unknown";
}

void LossSpec::validate() const {
  if (!(alpha >= 0.0) || !(beta >= 0.0)) throw ContractError("loss: alpha and beta must be >= 0");
  if (kind == LossKind::Tradeoff && alpha == 0.0 && beta == 0.0)
    throw ContractError("loss: tradeoff needs alpha or beta positive");
  pgd.validate();
}

LossGraph record_loss(Tape& tape, const Network& net, const std::vector<ValueId>& bound, const Tensor& x,
                      std::span<const int> y, const LossSpec& spec, Mode mode, Rng& rng) {
  spec.validate();
  LossGraph g{};
  auto forward = [&](const Tensor& input) {
    ForwardResult r = net.forward(tape, tape.constant(input), bound, mode, &rng);
    g.bn_stats.insert(g.bn_stats.end(), r.bn_stats.begin(), r.bn_stats.end());
    return r.logits;
  };
  const LogitsFn attack_view = as_logits_fn(net, mode, &rng);
  auto natural = [&]() {
    const ValueId l = tape.softmax_cross_entropy(forward(x), y);
    g.terms.natural = tape.value(l)[0];
    g.terms.has_natural = true;
    return l;
  };
  auto robust_ce = [&]() {
    const Tensor xt = pgd(attack_view, x, y, spec.pgd, rng);
    const ValueId l = tape.softmax_cross_entropy(forward(xt), y);
    g.terms.robust = tape.value(l)[0];
    g.terms.has_robust = true;
    return l;
  };

  switch (spec.kind) {
    case LossKind::Natural:
      g.total = natural();
      break;
    case LossKind::Adversarial:
      g.total = robust_ce();
      break;
    case LossKind::Tradeoff: {
      std::optional<ValueId> total;
      if (spec.alpha != 0.0) total = tape.mul_scalar(natural(), spec.alpha);
      if (spec.beta != 0.0) {
        const ValueId r = tape.mul_scalar(robust_ce(), spec.beta);
        total = total ? tape.add(*total, r) : r;
      }
      g.total = *total;
      break;
    }
    case LossKind::Trades: {
      const ValueId z = forward(x);
      const ValueId ln = tape.softmax_cross_entropy(z, y);
      g.terms.natural = tape.value(ln)[0];
      g.terms.has_natural = true;
      g.total = ln;
      if (spec.beta != 0.0) {
        const Tensor clean = tape.value(z);
        const Tensor xt = pgd(attack_view, x, y, spec.pgd, rng, PgdObjective::Kl, &clean);
        const ValueId zt = forward(xt);
        const ValueId div = spec.trades_soft_ce ? tape.soft_cross_entropy(z, zt) : tape.kl_divergence(z, zt);
        g.terms.robust = tape.value(div)[0];
        g.terms.has_robust = true;
        g.total = tape.add(ln, tape.mul_scalar(div, spec.beta));
      }
      break;
    }
  }
  g.terms.total = tape.value(g.total)[0];
  return g;
}

namespace {

double scalar_loss(const Network& net, const Tensor& x, std::span<const int> y, const LossSpec& spec, Rng& rng,
                   Mode mode) {
  Tape tape;
  const auto bound = net.bind(tape, false);
  return record_loss(tape, net, bound, x, y, spec, mode, rng).terms.total;
}

}  // namespace

double natural_loss(const Network& net, const Tensor& x, std::span<const int> y, Mode mode, Rng* noise) {
  Tape tape;
  const auto bound = net.bind(tape, false);
  const ValueId z = net.forward(tape, tape.constant(x), bound, mode, noise).logits;
  return tape.value(tape.softmax_cross_entropy(z, y))[0];
}

double adversarial_loss(const Network& net, const Tensor& x, std::span<const int> y, const PgdConfig& pgd, Rng& rng,
                        Mode mode) {
  LossSpec spec{LossKind::Adversarial, 0.0, 1.0, pgd};
  return scalar_loss(net, x, y, spec, rng, mode);
}

double trades_loss(const Network& net, const Tensor& x, std::span<const int> y, double beta, const PgdConfig& pgd,
                   Rng& rng, Mode mode) {
  LossSpec spec{LossKind::Trades, 1.0, beta, pgd};
  return scalar_loss(net, x, y, spec, rng, mode);
}

double tradeoff_loss(const Network& net, const Tensor& x, std::span<const int> y, double alpha, double beta,
                     const PgdConfig& pgd, Rng& rng, Mode mode) {
  LossSpec spec{LossKind::Tradeoff, alpha, beta, pgd};
  return scalar_loss(net, x, y, spec, rng, mode);
}

const Tensor& sgd_direction(Tensor& velocity, const Tensor& grad, const Tensor* w, double momentum,
                            double weight_decay) {
  if (velocity.shape() != grad.shape()) velocity = Tensor(grad.shape(), 0.0);
  for (std::size_t i = 0; i < grad.size(); ++i) {
    double d = grad[i];
    if (w && weight_decay != 0.0) d += weight_decay * (*w)[i];
    velocity[i] = momentum * velocity[i] + d;
  }
  return velocity;
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ContractError("train: epochs must be >= 1");
  if (batch_size < 1) throw ContractError("train: batch size must be >= 1");
  if (!(lr > 0.0)) throw ContractError("train: learning rate must be > 0");
  if (!(lr_decay > 0.0)) throw ContractError("train: lr decay must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ContractError("train: momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ContractError("train: weight decay must be >= 0");
  if (!(rho > 1.0)) throw ContractError("train: rho must exceed 1");
  loss.validate();
  attack.validate();
}

std::size_t TrainConfig::resolved_cutoff() const {
  if (cutoff) return *cutoff;
  return static_cast<std::size_t>(std::llround(0.8 * static_cast<double>(epochs)));
}

double TrainConfig::lr_at(std::size_t epoch) const {
  double v = lr;
  for (auto m : milestones)
    if (epoch > m) v *= lr_decay;
  return v;
}

std::size_t count_correct(const Tensor& logits, std::span<const int> labels) {
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (labels.size() != n) throw DimensionError("count_correct: label count");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = logits.data() + i * k;
    if (std::max_element(row, row + k) - row == labels[i]) ++correct;
  }
  return correct;
}

AccuracyTable evaluate(const Network& net, const Dataset& data, const EvalSuite& suite) {
  if (data.empty()) throw ContractError("evaluate: empty dataset");
  AccuracyTable t;
  t.samples = data.size();
  std::size_t clean = 0, a1 = 0, a2 = 0, a3 = 0;
  const LogitsFn f = as_logits_fn(net, Mode::Eval);
  const AttackConfig& ac = suite.attack;
  const std::size_t bs = std::max<std::size_t>(1, suite.batch_size);
  for (std::size_t b = 0; b < data.size(); b += bs) {
    const Dataset part = data.slice(b, std::min(data.size(), b + bs));
    const Tensor& x = part.images;
    const std::vector<int>& y = part.labels;
    clean += count_correct(net.logits(x), y);
    if (suite.fgsm) a1 += count_correct(net.logits(fgsm(f, x, y, ac.eps, ac.lo, ac.hi)), y);
    if (suite.ifgsm) a2 += count_correct(net.logits(ifgsm(f, x, y, ac)), y);
    if (suite.cw) a3 += count_correct(net.logits(cw_linf(f, x, y, ac)), y);
  }
  const double n = static_cast<double>(data.size());
  t.natural = static_cast<double>(clean) / n;
  if (suite.fgsm) t.fgsm = static_cast<double>(a1) / n;
  if (suite.ifgsm) t.ifgsm = static_cast<double>(a2) / n;
  if (suite.cw) t.cw = static_cast<double>(a3) / n;
  return t;
}

bool MetricsRow::same_result(const MetricsRow& o) const {
  return epoch == o.epoch && loss == o.loss && natural == o.natural && a1 == o.a1 && a2 == o.a2 && a3 == o.a3 &&
         m_t == o.m_t && lambda == o.lambda && weight_sparsity == o.weight_sparsity &&
         channel_sparsity == o.channel_sparsity;
}

std::string metrics_header() {
  return "epoch,loss,N,A1,A2,A3,M_t,lambda,weight_sparsity,channel_sparsity,seconds";
}

std::string metrics_csv_line(const MetricsRow& r) {
  auto num = [](double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  auto opt = [&](const std::optional<double>& v) { return v ? num(*v) : std::string(); };
  return std::to_string(r.epoch) + "," + num(r.loss) + "," + num(r.natural) + "," + opt(r.a1) + "," + opt(r.a2) + "," +
         opt(r.a3) + "," + num(r.m_t) + "," + num(r.lambda) + "," + num(r.weight_sparsity) + "," +
         num(r.channel_sparsity) + "," + num(r.seconds);
}

TrainState init_training(const NetworkSpec& spec, const TrainConfig& cfg) {
  cfg.validate();
  TrainState st{build_network(spec, cfg.seed), {}, {}, Rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL), {}, {}, 0};
  std::vector<std::size_t> stems, heads;
  for (const auto& m : st.net.members()) {
    stems.push_back(m.stem.conv);
    heads.push_back(m.fc_weight);
  }
  std::vector<QuantLayer> layers;
  for (std::size_t i = 0; i < st.net.params().size(); ++i) {
    const Param& p = st.net.params()[i];
    if (!p.is_weight()) continue;
    QuantLayer l;
    l.name = p.name;
    l.param = i;
    const bool is_stem = std::find(stems.begin(), stems.end(), i) != stems.end();
    const bool is_head = std::find(heads.begin(), heads.end(), i) != heads.end();
    l.quantized = !(cfg.exempt_first && is_stem) && !(cfg.exempt_last && is_head);
    l.w = p.value;
    l.u = p.value;
    layers.push_back(std::move(l));
  }
  st.quant = make_quant_state(cfg.scheme, std::move(layers), cfg.rho, cfg.resolved_cutoff());
  for (const auto& p : st.net.params()) st.velocity.emplace_back(p.value.shape(), 0.0);
  return st;
}

void load_quantized(TrainState& state) {
  for (const auto& l : state.quant.layers) state.net.params().at(l.param).value = l.u;
}

EpochResult train_epoch(TrainState& state, const Dataset& data, const TrainConfig& cfg) {
  if (data.empty()) throw ContractError("train: empty dataset");
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t epoch = state.epochs_done + 1;
  state.quant.epoch = epoch;
  const double lr = cfg.lr_at(epoch);

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[state.rng.index(i)]);

  std::vector<bool> is_quant_slot(state.net.params().size(), false);
  for (const auto& l : state.quant.layers) is_quant_slot[l.param] = true;

  EpochResult res;
  double loss_sum = 0.0;
  for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
    const std::span<const std::size_t> idx(order.data() + b, std::min(cfg.batch_size, order.size() - b));
    const Tensor x = data.gather_images(idx);
    const std::vector<int> y = data.gather_labels(idx);

    Tape tape;
    const auto bound = state.net.bind(tape, true);
    const LossGraph lg = record_loss(tape, state.net, bound, x, y, cfg.loss, Mode::Train, state.rng);
    if (!std::isfinite(lg.terms.total))
      throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                         std::to_string(b / cfg.batch_size));
    if (lg.terms.has_natural && lg.terms.has_robust && cfg.loss.kind != LossKind::Trades &&
        lg.terms.robust < lg.terms.natural - 1e-9)
      ++res.ascent_violations;
    const Gradients grads = tape.backward(lg.total);

    // gradients were taken at u; directions update the shadow weights
    std::vector<Tensor> dirs;
    dirs.reserve(state.quant.layers.size());
    for (const auto& l : state.quant.layers)
      dirs.push_back(sgd_direction(state.velocity[l.param], grads.of(bound[l.param]), &l.w, cfg.momentum,
                                   cfg.weight_decay));
    quant_step(state.quant, dirs, lr);
    for (std::size_t i = 0; i < state.net.params().size(); ++i) {
      if (is_quant_slot[i]) continue;
      const Tensor& g = grads.of(bound[i]);
      if (!g.all_finite()) throw NumericError("train: non-finite gradient for " + state.net.params()[i].name);
      const Tensor& d = sgd_direction(state.velocity[i], g, nullptr, cfg.momentum, 0.0);
      Tensor& v = state.net.params()[i].value;
      for (std::size_t j = 0; j < v.size(); ++j) v[j] -= lr * d[j];
    }
    load_quantized(state);
    state.net.commit_batch_stats(lg.bn_stats);
    loss_sum += lg.terms.total;
    ++res.batches;
  }
  res.mean_loss = loss_sum / static_cast<double>(res.batches);
  track_M(state.net, state.trace);
  res.m_t = state.trace.m_t.back();
  state.epochs_done = epoch;
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

void run_training(TrainState& state, const Dataset& train, const Dataset& eval, const TrainConfig& cfg,
                  std::size_t until_epoch, const EpochCallback& on_epoch) {
  cfg.validate();
  if (until_epoch > cfg.epochs) throw ContractError("train: target epoch beyond configured epochs");
  while (state.epochs_done < until_epoch) {
    const EpochResult er = train_epoch(state, train, cfg);
    const auto t0 = std::chrono::steady_clock::now();
    MetricsRow row;
    row.epoch = state.epochs_done;
    row.loss = er.mean_loss;
    row.m_t = er.m_t;
    row.lambda = state.quant.lambda;
    if (cfg.eval_samples > 0 && !eval.empty()) {
      EvalSuite suite;
      suite.fgsm = suite.ifgsm = cfg.eval_attacks;
      suite.attack = cfg.attack;
      const AccuracyTable t = evaluate(state.net, eval.slice(0, std::min(cfg.eval_samples, eval.size())), suite);
      row.natural = t.natural;
      row.a1 = t.fgsm;
      row.a2 = t.ifgsm;
    }
    const SparsityReport sr = sparsity_report(state.net);
    row.weight_sparsity = sr.weight_sparsity;
    row.channel_sparsity = sr.channel_sparsity;
    row.seconds = er.seconds + std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    state.history.push_back(row);
    if (on_epoch) on_epoch(state, row);
  }
}

}  // namespace robustq
