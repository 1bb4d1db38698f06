#include "robustq/sparsity.hpp"

#include <algorithm>
#include <cmath>

namespace robustq {

namespace {

bool filter_is_zero(const Tensor& k, std::size_t c) {
  const std::size_t len = k.size() / k.dim(0);
  const double* p = k.data() + c * len;
  return std::all_of(p, p + len, [](double v) { return v == 0.0; });
}

// Every conv unit with a flag telling whether its output reaches a skip-add.
std::vector<std::pair<const ConvUnit*, bool>> units(const Network& net) {
  std::vector<std::pair<const ConvUnit*, bool>> out;
  for (const auto& m : net.members()) {
    out.emplace_back(&m.stem, true);
    for (const auto& b : m.blocks) {
      out.emplace_back(&b.first, false);
      out.emplace_back(&b.second, true);
    }
  }
  return out;
}

}  // namespace

double weight_sparsity(const std::vector<Tensor>& u) {
  std::size_t zeros = 0, total = 0;
  for (const auto& t : u) {
    total += t.size();
    zeros += static_cast<std::size_t>(std::count(t.values().begin(), t.values().end(), 0.0));
  }
  return total == 0 ? 0.0 : static_cast<double>(zeros) / static_cast<double>(total);
}

bool channel_removable(const Network& net, const ConvUnit& unit, std::size_t c) {
  if (!filter_is_zero(net.params().at(unit.conv).value, c)) return false;
  const BnState& bn = net.bn_states().at(unit.bn);
  const double gamma = net.params().at(unit.gamma).value[c];
  const double beta = net.params().at(unit.beta).value[c];
  // same expression order as the eval-mode batch norm
  const double is = 1.0 / std::sqrt(bn.running_var[c] + Network::kBnEps);
  const double out = gamma * ((0.0 - bn.running_mean[c]) * is) + beta;
  return !(out > 0.0);
}

SparsityReport sparsity_report(const Network& net) {
  SparsityReport r;
  for (const auto& [unit, feeds_skip] : units(net)) {
    const Param& p = net.params().at(unit->conv);
    LayerSparsity l;
    l.name = p.name;
    l.weights = p.value.size();
    l.zero_weights = static_cast<std::size_t>(std::count(p.value.values().begin(), p.value.values().end(), 0.0));
    l.channels = p.value.dim(0);
    for (std::size_t c = 0; c < l.channels; ++c) {
      if (!filter_is_zero(p.value, c)) continue;
      ++l.zero_channels;
      if (!feeds_skip && channel_removable(net, *unit, c))
        ++r.prunable_channels;
      else
        ++r.masked_channels;
    }
    r.total_weights += l.weights;
    r.zero_weights += l.zero_weights;
    r.total_channels += l.channels;
    r.zero_channels += l.zero_channels;
    r.layers.push_back(std::move(l));
  }
  // keep registry order for the breakdown
  std::sort(r.layers.begin(), r.layers.end(), [&](const LayerSparsity& a, const LayerSparsity& b) {
    return net.param_index(a.name) < net.param_index(b.name);
  });
  if (r.total_weights) r.weight_sparsity = static_cast<double>(r.zero_weights) / static_cast<double>(r.total_weights);
  if (r.total_channels)
    r.channel_sparsity = static_cast<double>(r.zero_channels) / static_cast<double>(r.total_channels);
  return r;
}

double channel_sparsity(const Network& net) { return sparsity_report(net).channel_sparsity; }

void BoundTrace::append(double mt) {
  if (!std::isfinite(mt)) throw NumericError("bound trace: non-finite M_t");
  m_t.push_back(mt);
  running_max.push_back(std::max(M(), mt));
}

double layer_mean_bound(const Network& net) {
  double best = 0.0;
  for (std::size_t idx : net.conv_params()) {
    const Tensor& u = net.params()[idx].value;
    double s = 0.0;
    for (double v : u.values()) s += std::abs(v);
    best = std::max(best, s / static_cast<double>(u.size()));
  }
  return best;
}

void track_M(const Network& net, BoundTrace& trace) { trace.append(layer_mean_bound(net)); }

namespace {

Tensor keep_rows(const Tensor& t, const std::vector<std::size_t>& keep) {
  Shape s = t.shape();
  const std::size_t len = t.size() / s[0];
  s[0] = keep.size();
  Tensor out(s);
  for (std::size_t i = 0; i < keep.size(); ++i) std::copy_n(t.data() + keep[i] * len, len, out.data() + i * len);
  return out;
}

// kernel [O x C x 3 x 3] -> [O x keep x 3 x 3]
Tensor keep_inputs(const Tensor& k, const std::vector<std::size_t>& keep) {
  const std::size_t o = k.dim(0), c = k.dim(1);
  Tensor out({o, keep.size(), 3, 3});
  for (std::size_t oi = 0; oi < o; ++oi)
    for (std::size_t i = 0; i < keep.size(); ++i)
      std::copy_n(k.data() + (oi * c + keep[i]) * 9, 9, out.data() + (oi * keep.size() + i) * 9);
  return out;
}

std::vector<double> keep_values(const std::vector<double>& v, const std::vector<std::size_t>& keep) {
  std::vector<double> out;
  out.reserve(keep.size());
  for (auto i : keep) out.push_back(v.at(i));
  return out;
}

}  // namespace

PruneResult prune_channels(const Network& net) {
  net.check_structure();
  PruneResult result{net, {}};
  Network& out = result.net;
  result.report.params_before = net.parameter_count();
  for (const auto& [unit, feeds_skip] : units(net)) {
    const Tensor& k = net.params()[unit->conv].value;
    for (std::size_t c = 0; c < k.dim(0); ++c)
      if (filter_is_zero(k, c) && (feeds_skip || !channel_removable(net, *unit, c)))
        result.report.masked.push_back({net.params()[unit->conv].name, c});
  }
  for (const auto& member : out.members()) {
    for (const auto& block : member.blocks) {
      const ConvUnit& first = block.first;
      const Tensor& k = net.params()[first.conv].value;
      std::vector<std::size_t> keep;
      for (std::size_t c = 0; c < k.dim(0); ++c) {
        if (channel_removable(net, first, c))
          result.report.removed.push_back({net.params()[first.conv].name, c});
        else
          keep.push_back(c);
      }
      if (keep.size() == k.dim(0)) continue;
      if (keep.empty()) {
        // a conv needs at least one filter; retain channel 0 (it contributes exact zeros)
        keep.push_back(0);
        result.report.removed.erase(std::find_if(result.report.removed.begin(), result.report.removed.end(),
                                                 [&](const PrunedChannel& p) {
                                                   return p.layer == net.params()[first.conv].name && p.channel == 0;
                                                 }));
        result.report.masked.push_back({net.params()[first.conv].name, 0});
      }
      auto& params = out.params();
      params[first.conv].value = keep_rows(k, keep);
      params[first.gamma].value = keep_rows(net.params()[first.gamma].value, keep);
      params[first.beta].value = keep_rows(net.params()[first.beta].value, keep);
      BnState& bn = out.bn_states()[first.bn];
      bn.running_mean = keep_values(bn.running_mean, keep);
      bn.running_var = keep_values(bn.running_var, keep);
      params[block.second.conv].value = keep_inputs(net.params()[block.second.conv].value, keep);
    }
  }
  out.check_structure();
  result.report.params_after = out.parameter_count();
  return result;
}

}  // namespace robustq
