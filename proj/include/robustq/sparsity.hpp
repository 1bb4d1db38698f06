#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "robustq/nets.hpp"
#include "robustq/tensor.hpp"

namespace robustq {

struct LayerSparsity {
  std::string name;
  std::size_t weights = 0;
  std::size_t zero_weights = 0;
  std::size_t channels = 0;
  std::size_t zero_channels = 0;
};

struct SparsityReport {
  std::vector<LayerSparsity> layers;  // conv layers, registry order
  std::size_t total_weights = 0;
  std::size_t zero_weights = 0;
  std::size_t total_channels = 0;
  std::size_t zero_channels = 0;
  std::size_t prunable_channels = 0;  // zero channels prune_channels removes
  std::size_t masked_channels = 0;    // zero channels kept in place
  double weight_sparsity = 0.0;
  double channel_sparsity = 0.0;
};

/// Fraction of exactly-zero entries over all tensors.
double weight_sparsity(const std::vector<Tensor>& u);

/// Counts over the conv layers of `net` (whose weights are the quantized u).
SparsityReport sparsity_report(const Network& net);
double channel_sparsity(const Network& net);

/// Running record of M_t = max over conv layers of mean|u|.
struct BoundTrace {
  std::vector<double> m_t;
  std::vector<double> running_max;  // M after each epoch
  double M() const { return running_max.empty() ? 0.0 : running_max.back(); }
  void append(double mt);
};

double layer_mean_bound(const Network& net);
void track_M(const Network& net, BoundTrace& trace);

struct PrunedChannel {
  std::string layer;
  std::size_t channel;  // index in the unpruned layer
};

struct PruneReport {
  std::vector<PrunedChannel> removed;
  std::vector<PrunedChannel> masked;  // all-zero but structurally kept
  std::size_t params_before = 0;
  std::size_t params_after = 0;
};

struct PruneResult {
  Network net;
  PruneReport report;
};

/// True when channel `c` of a block's first conv emits exact zeros after its
/// eval-mode batch norm and relu, so the channel and its consumer slice can go.
bool channel_removable(const Network& net, const ConvUnit& unit, std::size_t c);

/// Removes all-zero filters of block-internal convs together with the matching
/// input slices of the next conv. Channels that reach a skip-add, or whose
/// batch norm turns zero into a positive constant, are reported as masked.
/// Eval-mode logits of the result equal those of `net` bit for bit.
PruneResult prune_channels(const Network& net);

}  // namespace robustq
