#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "robustq/rng.hpp"

namespace robustq {

struct ToySample {
  std::vector<double> x;
  int y = 1;  // -1 or +1
};

/// Finite sample set with an l-infinity ball of radius delta around every x,
/// searched on a uniform grid of `resolution` points per axis.
struct ToyProblem {
  std::vector<ToySample> samples;
  std::size_t dim = 1;
  double delta = 0.1;
  std::size_t resolution = 41;  // odd, so x itself is a grid point

  void validate() const;
  /// Grid points of the ball around x, axis 0 varying slowest.
  std::vector<std::vector<double>> grid(const std::vector<double>& x) const;
  /// Index of x itself in grid(x).
  std::size_t center_index() const;
};

enum class Activation { Identity, Tanh };
enum class Phi { ZeroOne, Hinge, Sigmoid, Logistic };

Phi parse_phi(const std::string& name);
std::string phi_name(Phi phi);
double phi_value(Phi phi, double theta);
double activate(Activation s, double v);

enum class ClassifierKind { Affine, Cubic, Sine };

/// t = w.x + b; affine f = t, cubic f = t^3 - t/2, sine f = sin(3t).
struct ToyClassifier {
  ClassifierKind kind = ClassifierKind::Affine;
  std::vector<double> w;
  double b = 0.0;

  double operator()(const std::vector<double>& x) const;
};

/// Which quantity the ball search maximises.
enum class Criterion {
  Label,      // phi(s(f(x')) y)
  Agreement,  // phi(s(f(x')) s(f(x)))
};

/// Exhaustive argmax over the grid. Ties keep x, then the lowest grid index.
std::vector<double> worst_case_perturbation(const ToyClassifier& f, const ToySample& s, const ToyProblem& p, Phi phi,
                                            Activation act, Criterion c);

struct PartitionSets {
  std::vector<std::size_t> B, D, E, F;
};

/// Split by the signs of f(x) y and f(x') y, x' from the label criterion.
PartitionSets partition(const ToyClassifier& f, const ToyProblem& p, Phi phi = Phi::ZeroOne,
                        Activation act = Activation::Identity);

double risk_R(const ToyClassifier& f, const ToyProblem& p, Phi phi, Activation act);
double risk_R_star(const ToyClassifier& f, const ToyProblem& p, Phi phi, Activation act);

/// Random problem: n in [min_n, max_n], x uniform in [-1, 1]^dim, delta in (0, 0.5].
ToyProblem random_problem(Rng& rng, std::size_t dim, std::size_t min_n = 5, std::size_t max_n = 20,
                          std::size_t resolution = 41);
ToyClassifier random_classifier(Rng& rng, std::size_t dim, ClassifierKind kind = ClassifierKind::Affine);

struct Witness {
  ToyProblem problem;
  ToyClassifier classifier;
  std::optional<std::size_t> sample;  // pointwise failures
  std::string what;
};

struct Prop1Report {
  std::size_t trials = 0;
  std::size_t violations = 0;        // R > R*
  std::size_t nonempty_E = 0;        // trials with a non-empty E
  double max_gap = 0.0;              // max of R* - R
  std::optional<Witness> witness;
  bool passed() const { return violations == 0 && nonempty_E == 0; }
};

/// phi = 0-1, activation identity; random affine classifiers on random problems.
Prop1Report verify_prop1(std::size_t trials, std::uint64_t seed, std::size_t max_dim = 2);

struct Prop2Report {
  Phi phi = Phi::Hinge;
  std::size_t trials = 0;
  std::size_t samples_B = 0;
  std::size_t samples_Bc = 0;
  std::size_t violations_B = 0;   // agreement term < label term on B
  std::size_t violations_Bc = 0;  // agreement term > label term on D or F
  std::size_t nonempty_E = 0;
  std::size_t aggregate_violations = 0;  // per-trial set sums out of order
  std::optional<Witness> witness;
  bool passed() const { return violations_B == 0 && violations_Bc == 0 && aggregate_violations == 0 && nonempty_E == 0; }
};

/// Activation tanh; pointwise comparison of the two second terms at the
/// label-criterion x'. Every fourth classifier is cubic or sine.
Prop2Report verify_prop2(Phi phi, std::size_t trials, std::uint64_t seed, std::size_t max_dim = 2);

/// Dense check that phi is non-increasing on [-1, 1].
bool monotone_decreasing_on_unit(Phi phi, std::size_t points = 100001);

}  // namespace robustq
