#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "robustq/autodiff.hpp"
#include "robustq/rng.hpp"
#include "robustq/tensor.hpp"

namespace robustq {

/// Architecture of a (possibly ensembled) residual network.
struct NetworkSpec {
  std::size_t in_channels = 1;
  std::size_t height = 28;
  std::size_t width = 28;
  std::size_t stem_stride = 1;
  std::vector<std::size_t> blocks = {1, 1, 1};    // residual blocks per stage
  std::vector<std::size_t> widths = {8, 16, 32};  // channels per stage
  std::size_t ensemble = 1;                       // members averaged at the output
  double noise_sigma = 0.0;                       // stddev injected at residual mappings in train mode
  std::size_t num_classes = 10;

  void validate() const;
  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

enum class ParamKind { Conv, FcWeight, FcBias, BnGamma, BnBeta };

struct Param {
  std::string name;
  ParamKind kind;
  Tensor value;
  bool is_weight() const { return kind == ParamKind::Conv || kind == ParamKind::FcWeight; }
};

struct BnState {
  std::string name;
  std::vector<double> running_mean;
  std::vector<double> running_var;
};

enum class Mode { Train, Eval };

/// Collected batch statistics from one training-mode forward pass.
struct BnObservation {
  std::size_t bn;  // index into Network::bn_states()
  BatchStats stats;
};

struct ForwardResult {
  ValueId logits;
  std::vector<BnObservation> bn_stats;  // filled in Train mode only
};

/// conv + batch norm, all by index into the network's registries.
struct ConvUnit {
  std::size_t conv;
  std::size_t gamma;
  std::size_t beta;
  std::size_t bn;
  std::size_t stride;
};

struct ResidualBlock {
  ConvUnit first;
  ConvUnit second;  // feeds the skip-add
};

struct Member {
  ConvUnit stem;
  std::vector<ResidualBlock> blocks;
  std::size_t fc_weight;
  std::size_t fc_bias;
};

/// One output filter of a conv layer.
struct ChannelRef {
  std::string layer;
  std::size_t param;    // index into Network::params()
  std::size_t channel;  // output-channel index
  std::vector<double> weights;  // the C x 3 x 3 filter, row-major
};

class Network {
 public:
  static constexpr double kBnEps = 1e-5;
  static constexpr double kBnMomentum = 0.1;

  const NetworkSpec& spec() const { return spec_; }
  NetworkSpec& spec() { return spec_; }
  const std::vector<Param>& params() const { return params_; }
  std::vector<Param>& params() { return params_; }
  const std::vector<BnState>& bn_states() const { return bn_; }
  std::vector<BnState>& bn_states() { return bn_; }
  const std::vector<Member>& members() const { return members_; }
  std::vector<Member>& members() { return members_; }

  std::size_t param_index(const std::string& name) const;
  Tensor& weight(const std::string& name) { return params_.at(param_index(name)).value; }
  const Tensor& weight(const std::string& name) const { return params_.at(param_index(name)).value; }

  /// Indices of conv parameters in registry order.
  std::vector<std::size_t> conv_params() const;
  std::size_t parameter_count() const;

  /// Leaves for every parameter, in registry order.
  std::vector<ValueId> bind(Tape& tape, bool requires_grad) const;

  /// Logits averaged over ensemble members. Train mode uses batch statistics
  /// and, when sigma > 0, adds N(0, sigma^2) noise drawn from `noise` to each
  /// residual mapping. Eval mode uses running statistics and no noise.
  ForwardResult forward(Tape& tape, ValueId x, const std::vector<ValueId>& bound, Mode mode, Rng* noise) const;

  /// Convenience inference on a batch.
  Tensor logits(const Tensor& batch, Mode mode = Mode::Eval, Rng* noise = nullptr) const;

  /// Fold observed batch statistics into the running averages.
  void commit_batch_stats(const std::vector<BnObservation>& observed);

  /// Throws ContractError when layer shapes do not chain.
  void check_structure() const;

  friend Network build_network(const NetworkSpec& spec, std::uint64_t seed);

 private:
  ValueId conv_unit(Tape& tape, ValueId x, const ConvUnit& unit, const std::vector<ValueId>& bound, Mode mode,
                    std::vector<BnObservation>* stats) const;

  NetworkSpec spec_;
  std::vector<Param> params_;
  std::vector<BnState> bn_;
  std::vector<Member> members_;
};

Network build_network(const NetworkSpec& spec, std::uint64_t seed);

/// Parameter count of a freshly built network, from the spec alone.
std::size_t expected_parameter_count(const NetworkSpec& spec);

/// One entry per output channel of every conv layer.
std::vector<ChannelRef> conv_channels(const Network& net);

/// Differentiable model view used by attacks and losses.
using LogitsFn = std::function<ValueId(Tape&, ValueId)>;

/// Binds `net` as a function of its input with parameters held constant.
LogitsFn as_logits_fn(const Network& net, Mode mode, Rng* noise = nullptr);

}  // namespace robustq
