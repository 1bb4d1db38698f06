#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "robustq/tensor.hpp"

namespace robustq {

enum class QuantVariant { None, Binary, Ternary, FourBit };

QuantVariant parse_variant(const std::string& name);
std::string variant_name(QuantVariant v);

/// Result of projecting one layer onto its grid.
struct Projection {
  double scale = 0.0;
  Tensor u;
  bool degenerate = false;  // all-zero input
};

// Binary grid {+-s}: s = mean|w|, zeros map to +s.
Projection project_binary(const Tensor& w);

// Ternary grid {0, +-s}: exact l2 minimiser by a sorted scan over support sizes.
Projection project_ternary(const Tensor& w);

// Threshold heuristic: support |w| > 0.7 mean|w|, s = mean of the support.
Projection project_ternary_threshold(const Tensor& w);

// 15 symmetric levels {0, +-s k/7}, k = 1..7, by alternating minimisation.
Projection project_4bit(const Tensor& w, std::vector<double>* objective_log = nullptr);

struct QuantScheme {
  QuantVariant variant = QuantVariant::Binary;
  bool ternary_threshold = false;

  Projection project(const Tensor& w) const;
  /// Exact membership of every component in the grid of scale `s`.
  bool on_grid(const Tensor& u, double s) const;
};

/// u = (lambda * proj + w) / (lambda + 1), component-wise. lambda = inf gives proj.
Tensor relax_blend(const Tensor& w, const Tensor& proj, double lambda);

struct QuantLayer {
  std::string name;
  std::size_t param = 0;  // index into the network registry
  bool quantized = true;  // false: exempt layer, u tracks w
  Tensor w;               // shadow float weights
  Tensor u;               // weights used by the forward pass
  double scale = 0.0;     // scale of the latest projection
};

/// Full Binary-Relax / Binary-Connect schedule state.
struct QuantState {
  QuantScheme scheme;
  std::vector<QuantLayer> layers;
  double lambda = 1.0;  // lambda_0 = 1
  double rho = 1.02;    // growth per mini-batch
  std::size_t cutoff = 0;  // epochs t < cutoff run the relaxed step
  std::size_t epoch = 1;   // 1-based, current epoch t
  std::size_t steps = 0;   // mini-batches taken

  bool relaxed_phase() const { return epoch < cutoff; }
};

/// One state per listed weight, with u_0 = w_0.
QuantState make_quant_state(QuantScheme scheme, std::vector<QuantLayer> layers, double rho, std::size_t cutoff);

/// Relaxed step: w <- w - lr * g; u <- blend(w, Proj(w), lambda); lambda <- rho * lambda.
/// `grads` is one tensor per layer, taken at u.
void br_step(QuantState& state, const std::vector<Tensor>& grads, double lr);

/// Binary-Connect step: w <- w - lr * g; u <- Proj(w).
void bc_step(QuantState& state, const std::vector<Tensor>& grads, double lr);

/// Dispatches on the phase of the current epoch.
void quant_step(QuantState& state, const std::vector<Tensor>& grads, double lr);

}  // namespace robustq
