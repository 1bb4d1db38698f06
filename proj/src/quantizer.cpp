#include "robustq/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace robustq {

QuantVariant parse_variant(const std::string& name) {
  if (name == "none" || name == "float") return QuantVariant::None;
  if (name == "binary") return QuantVariant::Binary;
  if (name == "ternary" || name == "tnn") return QuantVariant::Ternary;
  if (name == "four_bit" || name == "4bit" || name == "4-bit") return QuantVariant::FourBit;
  throw ContractError("unknown quantization variant '" + name + "'");
}

std::string variant_name(QuantVariant v) {
  switch (v) {
    case QuantVariant::None: return "none";
    case QuantVariant::Binary: return "binary";
    case QuantVariant::Ternary: return "ternary";
    case QuantVariant::FourBit: return "four_bit";
  }
  return "unknown";
}

namespace {

void require_nonempty(const Tensor& w, const char* what) {
  if (w.empty()) throw ContractError(std::string(what) + ": empty weight tensor");
}

double sign_of(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

// Extended accumulator so that, e.g., the mean of n copies of a is exactly a.
using Acc = long double;

// Projection onto {0, +-s} restricted to a support; s is the mean magnitude
// over the support, summed in index order.
Projection ternary_on_support(const Tensor& w, const std::vector<bool>& support) {
  Projection p{0.0, Tensor(w.shape(), 0.0), false};
  Acc total = 0.0;
  std::size_t k = 0;
  for (std::size_t i = 0; i < w.size(); ++i)
    if (support[i]) {
      total += std::abs(w[i]);
      ++k;
    }
  if (k == 0 || total == 0.0) {
    p.degenerate = true;
    return p;
  }
  p.scale = static_cast<double>(total / static_cast<Acc>(k));
  for (std::size_t i = 0; i < w.size(); ++i)
    if (support[i]) p.u[i] = p.scale * sign_of(w[i]);
  return p;
}

}  // namespace

Projection project_binary(const Tensor& w) {
  require_nonempty(w, "project_binary");
  Acc total = 0.0;
  for (double v : w.values()) total += std::abs(v);
  Projection p{static_cast<double>(total / static_cast<Acc>(w.size())), Tensor(w.shape(), 0.0), false};
  if (p.scale == 0.0) {
    p.degenerate = true;
    return p;
  }
  for (std::size_t i = 0; i < w.size(); ++i) p.u[i] = w[i] >= 0.0 ? p.scale : -p.scale;
  return p;
}

Projection project_ternary(const Tensor& w) {
  require_nonempty(w, "project_ternary");
  std::vector<std::size_t> order(w.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return std::abs(w[a]) > std::abs(w[b]); });
  // minimising ||w - u||^2 over supports of size k reduces to maximising S_k^2 / k
  double prefix = 0.0, best_gain = 0.0;
  std::size_t best_k = 0;
  for (std::size_t k = 1; k <= order.size(); ++k) {
    prefix += std::abs(w[order[k - 1]]);
    const double gain = prefix * prefix / static_cast<double>(k);
    if (gain > best_gain) {
      best_gain = gain;
      best_k = k;
    }
  }
  std::vector<bool> support(w.size(), false);
  for (std::size_t k = 0; k < best_k; ++k) support[order[k]] = true;
  return ternary_on_support(w, support);
}

Projection project_ternary_threshold(const Tensor& w) {
  require_nonempty(w, "project_ternary_threshold");
  Acc total = 0.0;
  for (double v : w.values()) total += std::abs(v);
  const double delta = 0.7 * static_cast<double>(total / static_cast<Acc>(w.size()));
  std::vector<bool> support(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) support[i] = std::abs(w[i]) > delta;
  return ternary_on_support(w, support);
}

Projection project_4bit(const Tensor& w, std::vector<double>* objective_log) {
  require_nonempty(w, "project_4bit");
  constexpr int kLevels = 7;
  constexpr int kIterations = 10;
  double s = 0.0;
  for (double v : w.values()) s = std::max(s, std::abs(v));
  Projection p{0.0, Tensor(w.shape(), 0.0), false};
  if (s == 0.0) {
    p.degenerate = true;
    return p;
  }
  std::vector<double> k(w.size());
  for (int it = 0; it < kIterations; ++it) {
    const double step = s / kLevels;
    double wk = 0.0, kk = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      k[i] = std::clamp(std::round(w[i] / step), -static_cast<double>(kLevels), static_cast<double>(kLevels));
      wk += w[i] * k[i];
      kk += k[i] * k[i];
    }
    if (kk > 0.0) s = kLevels * wk / kk;
    if (objective_log) {
      double obj = 0.0;
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double d = w[i] - s * k[i] / kLevels;
        obj += d * d;
      }
      objective_log->push_back(obj);
    }
  }
  p.scale = s;
  for (std::size_t i = 0; i < w.size(); ++i) p.u[i] = s * k[i] / kLevels;
  p.degenerate = !(s > 0.0);
  return p;
}

Projection QuantScheme::project(const Tensor& w) const {
  switch (variant) {
    case QuantVariant::None: return Projection{0.0, w, false};
    case QuantVariant::Binary: return project_binary(w);
    case QuantVariant::Ternary: return ternary_threshold ? project_ternary_threshold(w) : project_ternary(w);
    case QuantVariant::FourBit: return project_4bit(w);
  }
  throw ContractError("unknown quantization variant");
}

bool QuantScheme::on_grid(const Tensor& u, double s) const {
  for (double v : u.values()) {
    switch (variant) {
      case QuantVariant::None:
        break;
      case QuantVariant::Binary:
        if (s == 0.0 ? v != 0.0 : (v != s && v != -s)) return false;
        break;
      case QuantVariant::Ternary:
        if (v != 0.0 && v != s && v != -s) return false;
        break;
      case QuantVariant::FourBit: {
        if (v == 0.0) break;
        if (s == 0.0) return false;
        const double k = std::round(v * 7.0 / s);
        if (std::abs(k) > 7.0 || s * k / 7.0 != v) return false;
        break;
      }
    }
  }
  return true;
}

Tensor relax_blend(const Tensor& w, const Tensor& proj, double lambda) {
  check_same_shape(w, proj, "relax_blend");
  if (!(lambda >= 0.0)) throw ContractError("relax_blend: lambda must be >= 0");
  if (std::isinf(lambda)) return proj;
  Tensor u(w.shape());
  for (std::size_t i = 0; i < w.size(); ++i) u[i] = (lambda * proj[i] + w[i]) / (lambda + 1.0);
  return u;
}

QuantState make_quant_state(QuantScheme scheme, std::vector<QuantLayer> layers, double rho, std::size_t cutoff) {
  if (!(rho > 1.0)) throw ContractError("quant state: growth rate rho must exceed 1");
  QuantState st;
  st.scheme = scheme;
  st.layers = std::move(layers);
  for (auto& l : st.layers) {
    l.u = l.w;
    l.scale = 0.0;
    if (scheme.variant == QuantVariant::None) l.quantized = false;
  }
  st.rho = rho;
  st.cutoff = cutoff;
  return st;
}

namespace {

void descend(QuantState& state, const std::vector<Tensor>& grads, double lr) {
  if (grads.size() != state.layers.size()) throw DimensionError("quant step: one gradient per layer required");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    check_same_shape(grads[i], state.layers[i].w, "quant step");
    if (!grads[i].all_finite())
      throw NumericError("quant step rejected: non-finite gradient for " + state.layers[i].name);
  }
  for (std::size_t i = 0; i < grads.size(); ++i) {
    Tensor& w = state.layers[i].w;
    for (std::size_t j = 0; j < w.size(); ++j) w[j] -= lr * grads[i][j];
  }
}

}  // namespace

void br_step(QuantState& state, const std::vector<Tensor>& grads, double lr) {
  descend(state, grads, lr);
  for (auto& layer : state.layers) {
    if (!layer.quantized) {
      layer.u = layer.w;
      continue;
    }
    Projection p = state.scheme.project(layer.w);
    layer.u = relax_blend(layer.w, p.u, state.lambda);
    layer.scale = p.scale;
  }
  state.lambda *= state.rho;
  ++state.steps;
}

void bc_step(QuantState& state, const std::vector<Tensor>& grads, double lr) {
  descend(state, grads, lr);
  for (auto& layer : state.layers) {
    if (!layer.quantized) {
      layer.u = layer.w;
      continue;
    }
    Projection p = state.scheme.project(layer.w);
    layer.u = std::move(p.u);
    layer.scale = p.scale;
  }
  ++state.steps;
}

void quant_step(QuantState& state, const std::vector<Tensor>& grads, double lr) {
  if (state.relaxed_phase())
    br_step(state, grads, lr);
  else
    bc_step(state, grads, lr);
}

}  // namespace robustq
