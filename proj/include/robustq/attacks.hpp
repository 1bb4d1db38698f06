#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "robustq/nets.hpp"
#include "robustq/rng.hpp"
#include "robustq/tensor.hpp"

namespace robustq {

struct AttackConfig {
  double eps = 0.031;
  double alpha = 1.0 / 255.0;  // IFGSM step
  std::size_t iters = 20;      // IFGSM iterations
  double cw_lr = 0.0006;
  std::size_t cw_iters = 50;
  double kappa = 0.0;
  double lo = 0.0;
  double hi = 1.0;
  bool final_clip_only = false;  // IFGSM: clip once after the last step instead of every step

  void validate() const;
};

struct PgdConfig {
  double eps = 0.031;
  double step = 0.007;
  std::size_t iters = 10;
  double lo = 0.0;
  double hi = 1.0;

  void validate() const;
};

// What PGD ascends: label cross-entropy, or KL(f(x) || f(x~)) against fixed
// clean logits.
enum class PgdObjective { CrossEntropy, Kl };

Tensor clip_eps(const Tensor& v, double eps);

/// Gradient of the summed per-sample cross-entropy w.r.t. the input batch.
Tensor input_gradient(const LogitsFn& f, const Tensor& x, std::span<const int> y);

Tensor fgsm(const LogitsFn& f, const Tensor& x, std::span<const int> y, double eps, double lo = 0.0, double hi = 1.0);
Tensor ifgsm(const LogitsFn& f, const Tensor& x, std::span<const int> y, const AttackConfig& cfg);
Tensor cw_linf(const LogitsFn& f, const Tensor& x, std::span<const int> y, const AttackConfig& cfg);
Tensor pgd(const LogitsFn& f, const Tensor& x, std::span<const int> y, const PgdConfig& cfg, Rng& rng,
           PgdObjective objective = PgdObjective::CrossEntropy, const Tensor* clean_logits = nullptr);

}  // namespace robustq
