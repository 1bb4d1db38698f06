#include "robustq/theory.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "robustq/tensor.hpp"

namespace robustq {

void ToyProblem::validate() const {
  if (dim < 1 || dim > 3) throw ContractError("toy problem: dim must be 1..3");
  if (resolution < 1 || resolution % 2 == 0) throw ContractError("toy problem: resolution must be odd");
  if (!(delta >= 0.0)) throw ContractError("toy problem: delta must be >= 0");
  for (const auto& s : samples) {
    if (s.x.size() != dim) throw DimensionError("toy problem: sample dimension");
    if (s.y != 1 && s.y != -1) throw ContractError("toy problem: labels must be -1 or +1");
  }
}

std::size_t ToyProblem::center_index() const {
  const std::size_t mid = (resolution - 1) / 2;
  std::size_t idx = 0;
  for (std::size_t d = 0; d < dim; ++d) idx = idx * resolution + mid;
  return idx;
}

std::vector<std::vector<double>> ToyProblem::grid(const std::vector<double>& x) const {
  std::vector<double> offsets(resolution, 0.0);
  if (resolution > 1)
    for (std::size_t i = 0; i < resolution; ++i) {
      const double t = (2.0 * static_cast<double>(i) - static_cast<double>(resolution - 1)) /
                       static_cast<double>(resolution - 1);
      offsets[i] = delta * t;
    }
  std::size_t total = 1;
  for (std::size_t d = 0; d < dim; ++d) total *= resolution;
  std::vector<std::vector<double>> pts(total, x);
  for (std::size_t k = 0; k < total; ++k) {
    std::size_t rem = k;
    for (std::size_t d = dim; d-- > 0;) {
      pts[k][d] = x[d] + offsets[rem % resolution];
      rem /= resolution;
    }
  }
  return pts;
}

Phi parse_phi(const std::string& name) {
  if (name == "01" || name == "zero_one" || name == "0-1") return Phi::ZeroOne;
  if (name == "hinge") return Phi::Hinge;
  if (name == "sigmoid") return Phi::Sigmoid;
  if (name == "logistic") return Phi::Logistic;
  throw ContractError("unknown loss '" + name + "'");
}

std::string phi_name(Phi phi) {
  switch (phi) {
    case Phi::ZeroOne: return "zero_one";
    case Phi::Hinge: return "hinge";
    case Phi::Sigmoid: return "sigmoid";
    case Phi::Logistic: return "logistic";
  }
  return "unknown";
}

double phi_value(Phi phi, double theta) {
  switch (phi) {
    case Phi::ZeroOne: return theta < 0.0 ? 1.0 : 0.0;
    case Phi::Hinge: return std::max(1.0 - theta, 0.0);
    case Phi::Sigmoid: return 1.0 - std::tanh(theta);
    case Phi::Logistic: return std::log2(1.0 + std::exp(-theta));
  }
  return 0.0;
}

double activate(Activation s, double v) { return s == Activation::Tanh ? std::tanh(v) : v; }

double ToyClassifier::operator()(const std::vector<double>& x) const {
  if (x.size() != w.size()) throw DimensionError("toy classifier: input dimension");
  double t = b;
  for (std::size_t i = 0; i < x.size(); ++i) t += w[i] * x[i];
  switch (kind) {
    case ClassifierKind::Affine: return t;
    case ClassifierKind::Cubic: return t * t * t - 0.5 * t;
    case ClassifierKind::Sine: return std::sin(3.0 * t);
  }
  return t;
}

namespace {

double criterion_value(double fx, double fxp, int y, Phi phi, Activation act, Criterion c) {
  const double sp = activate(act, fxp);
  return c == Criterion::Label ? phi_value(phi, sp * y) : phi_value(phi, sp * activate(act, fx));
}

}  // namespace

std::vector<double> worst_case_perturbation(const ToyClassifier& f, const ToySample& s, const ToyProblem& p, Phi phi,
                                            Activation act, Criterion c) {
  const auto pts = p.grid(s.x);
  const double fx = f(s.x);
  const std::size_t center = p.center_index();
  std::size_t best = center;
  double best_v = criterion_value(fx, fx, s.y, phi, act, c);
  for (std::size_t k = 0; k < pts.size(); ++k) {
    const double v = criterion_value(fx, f(pts[k]), s.y, phi, act, c);
    if (v > best_v) {  // strict: x, then earlier indices, win ties
      best_v = v;
      best = k;
    }
  }
  return best == center ? s.x : pts[best];
}

PartitionSets partition(const ToyClassifier& f, const ToyProblem& p, Phi phi, Activation act) {
  p.validate();
  PartitionSets out;
  for (std::size_t i = 0; i < p.samples.size(); ++i) {
    const auto& s = p.samples[i];
    const auto xp = worst_case_perturbation(f, s, p, phi, act, Criterion::Label);
    const bool clean_ok = f(s.x) * s.y >= 0.0;
    const bool adv_ok = f(xp) * s.y >= 0.0;
    (clean_ok ? (adv_ok ? out.B : out.D) : (adv_ok ? out.E : out.F)).push_back(i);
  }
  return out;
}

namespace {

double risk(const ToyClassifier& f, const ToyProblem& p, Phi phi, Activation act, Criterion c) {
  p.validate();
  if (p.samples.empty()) throw ContractError("risk: empty problem");
  double first = 0.0, second = 0.0;
  for (const auto& s : p.samples) {
    const double sfx = activate(act, f(s.x));
    const auto xp = worst_case_perturbation(f, s, p, phi, act, c);
    const double sfxp = activate(act, f(xp));
    first += phi_value(phi, sfx * s.y);
    second += c == Criterion::Agreement ? phi_value(phi, sfxp * sfx) : phi_value(phi, sfxp * s.y);
  }
  const double n = static_cast<double>(p.samples.size());
  return first / n + second / n;
}

}  // namespace

double risk_R(const ToyClassifier& f, const ToyProblem& p, Phi phi, Activation act) {
  return risk(f, p, phi, act, Criterion::Agreement);
}

double risk_R_star(const ToyClassifier& f, const ToyProblem& p, Phi phi, Activation act) {
  return risk(f, p, phi, act, Criterion::Label);
}

ToyProblem random_problem(Rng& rng, std::size_t dim, std::size_t min_n, std::size_t max_n, std::size_t resolution) {
  ToyProblem p;
  p.dim = dim;
  p.resolution = resolution;
  p.delta = 0.5 * (1.0 - rng.uniform());  // (0, 0.5]
  const std::size_t n = min_n + rng.index(max_n - min_n + 1);
  for (std::size_t i = 0; i < n; ++i) {
    ToySample s;
    for (std::size_t d = 0; d < dim; ++d) s.x.push_back(rng.uniform(-1.0, 1.0));
    s.y = rng.uniform() < 0.5 ? -1 : 1;
    p.samples.push_back(std::move(s));
  }
  return p;
}

ToyClassifier random_classifier(Rng& rng, std::size_t dim, ClassifierKind kind) {
  ToyClassifier f;
  f.kind = kind;
  for (std::size_t d = 0; d < dim; ++d) f.w.push_back(rng.normal());
  f.b = 0.5 * rng.normal();
  return f;
}

Prop1Report verify_prop1(std::size_t trials, std::uint64_t seed, std::size_t max_dim) {
  Prop1Report r;
  Rng rng(seed);
  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t dim = 1 + rng.index(max_dim);
    const ToyProblem p = random_problem(rng, dim);
    const ToyClassifier f = random_classifier(rng, dim);
    const double R = risk_R(f, p, Phi::ZeroOne, Activation::Identity);
    const double Rs = risk_R_star(f, p, Phi::ZeroOne, Activation::Identity);
    const PartitionSets sets = partition(f, p);
    ++r.trials;
    r.max_gap = std::max(r.max_gap, Rs - R);
    const bool bad = R > Rs;
    if (bad) ++r.violations;
    if (!sets.E.empty()) ++r.nonempty_E;
    if ((bad || !sets.E.empty()) && !r.witness)
      r.witness = Witness{p, f, std::nullopt, bad ? "R exceeds R*" : "set E is not empty"};
  }
  return r;
}

Prop2Report verify_prop2(Phi phi, std::size_t trials, std::uint64_t seed, std::size_t max_dim) {
  if (phi == Phi::ZeroOne) throw ContractError("verify_prop2: needs a margin loss");
  Prop2Report r;
  r.phi = phi;
  Rng rng(seed);
  constexpr ClassifierKind kinds[] = {ClassifierKind::Cubic, ClassifierKind::Sine};
  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t dim = 1 + rng.index(max_dim);
    const ToyProblem p = random_problem(rng, dim);
    const ClassifierKind kind = (t % 4 == 3) ? kinds[(t / 4) % 2] : ClassifierKind::Affine;
    const ToyClassifier f = random_classifier(rng, dim, kind);
    ++r.trials;
    double agree_B = 0.0, label_B = 0.0, agree_Bc = 0.0, label_Bc = 0.0;
    bool e_seen = false;
    for (std::size_t i = 0; i < p.samples.size(); ++i) {
      const auto& s = p.samples[i];
      const auto xp = worst_case_perturbation(f, s, p, phi, Activation::Tanh, Criterion::Label);
      const double fx = f(s.x), fxp = f(xp);
      const double sfx = std::tanh(fx), sfxp = std::tanh(fxp);
      const double agree = phi_value(phi, sfxp * sfx);
      const double label = phi_value(phi, sfxp * s.y);
      const bool clean_ok = fx * s.y >= 0.0, adv_ok = fxp * s.y >= 0.0;
      std::string fail;
      if (!clean_ok && adv_ok) {
        e_seen = true;
        fail = "sample in E";
      } else if (clean_ok && adv_ok) {
        ++r.samples_B;
        agree_B += agree;
        label_B += label;
        if (agree < label) {
          ++r.violations_B;
          fail = "agreement term below label term on B";
        }
      } else {
        ++r.samples_Bc;
        agree_Bc += agree;
        label_Bc += label;
        if (agree > label) {
          ++r.violations_Bc;
          fail = "agreement term above label term on B complement";
        }
      }
      if (!fail.empty() && !r.witness) r.witness = Witness{p, f, i, fail};
    }
    if (e_seen) ++r.nonempty_E;
    if (agree_B < label_B || agree_Bc > label_Bc) {
      ++r.aggregate_violations;
      if (!r.witness) r.witness = Witness{p, f, std::nullopt, "set sums out of order"};
    }
  }
  return r;
}

bool monotone_decreasing_on_unit(Phi phi, std::size_t points) {
  if (points < 2) throw ContractError("monotonicity audit needs two points");
  double prev = phi_value(phi, -1.0);
  for (std::size_t i = 1; i < points; ++i) {
    const double theta = -1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(points - 1);
    const double v = phi_value(phi, theta);
    if (v > prev) return false;
    prev = v;
  }
  return true;
}

}  // namespace robustq
