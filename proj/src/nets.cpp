#include "robustq/nets.hpp"

#include <cmath>
#include <string>

namespace robustq {

void NetworkSpec::validate() const {
  if (in_channels == 0 || height == 0 || width == 0) throw ContractError("network spec: empty input shape");
  if (stem_stride != 1 && stem_stride != 2) throw ContractError("network spec: stem stride must be 1 or 2");
  if (blocks.empty() || blocks.size() != widths.size())
    throw ContractError("network spec: blocks and widths must be non-empty and equally long");
  for (auto w : widths)
    if (w == 0) throw ContractError("network spec: widths must be positive");
  for (std::size_t s = 1; s < widths.size(); ++s)
    if (widths[s] < widths[s - 1]) throw ContractError("network spec: widths must be non-decreasing");
  if (ensemble < 1) throw ContractError("network spec: ensemble count must be >= 1");
  if (!(noise_sigma >= 0.0)) throw ContractError("network spec: noise sigma must be >= 0");
  if (num_classes < 2) throw ContractError("network spec: need at least two classes");
}

namespace {

struct Builder {
  Network& net;
  Rng& rng;
  std::vector<Param>& params;
  std::vector<BnState>& bn;

  std::size_t add_param(std::string name, ParamKind kind, Tensor value) {
    params.push_back(Param{std::move(name), kind, std::move(value)});
    return params.size() - 1;
  }

  Tensor gaussian(Shape shape, double stddev) {
    Tensor t(std::move(shape));
    for (auto& v : t.storage()) v = stddev * rng.normal();
    return t;
  }

  ConvUnit conv_unit(const std::string& name, std::size_t in, std::size_t out, std::size_t stride) {
    ConvUnit u{};
    const double fan_in = static_cast<double>(in * 9);
    u.conv = add_param(name + ".conv", ParamKind::Conv, gaussian({out, in, 3, 3}, std::sqrt(2.0 / fan_in)));
    u.gamma = add_param(name + ".bn.gamma", ParamKind::BnGamma, Tensor({out}, 1.0));
    u.beta = add_param(name + ".bn.beta", ParamKind::BnBeta, Tensor({out}, 0.0));
    bn.push_back(BnState{name + ".bn", std::vector<double>(out, 0.0), std::vector<double>(out, 1.0)});
    u.bn = bn.size() - 1;
    u.stride = stride;
    return u;
  }
};

}  // namespace

Network build_network(const NetworkSpec& spec, std::uint64_t seed) {
  spec.validate();
  Network net;
  net.spec_ = spec;
  Rng rng(seed);
  Builder b{net, rng, net.params_, net.bn_};
  for (std::size_t m = 0; m < spec.ensemble; ++m) {
    const std::string prefix = "m" + std::to_string(m);
    Member member{};
    member.stem = b.conv_unit(prefix + ".stem", spec.in_channels, spec.widths[0], spec.stem_stride);
    std::size_t channels = spec.widths[0];
    for (std::size_t s = 0; s < spec.widths.size(); ++s) {
      for (std::size_t k = 0; k < spec.blocks[s]; ++k) {
        const std::size_t stride = (s > 0 && k == 0) ? 2 : 1;
        const std::string name = prefix + ".s" + std::to_string(s) + ".b" + std::to_string(k);
        ResidualBlock block{};
        block.first = b.conv_unit(name + ".c1", channels, spec.widths[s], stride);
        block.second = b.conv_unit(name + ".c2", spec.widths[s], spec.widths[s], 1);
        member.blocks.push_back(block);
        channels = spec.widths[s];
      }
    }
    member.fc_weight = b.add_param(prefix + ".fc.weight", ParamKind::FcWeight,
                                   b.gaussian({channels, spec.num_classes}, std::sqrt(1.0 / static_cast<double>(channels))));
    member.fc_bias = b.add_param(prefix + ".fc.bias", ParamKind::FcBias, Tensor({spec.num_classes}, 0.0));
    net.members_.push_back(std::move(member));
  }
  net.check_structure();
  return net;
}

std::size_t expected_parameter_count(const NetworkSpec& spec) {
  auto conv_bn = [](std::size_t in, std::size_t out) { return in * out * 9 + 2 * out; };
  std::size_t per_member = conv_bn(spec.in_channels, spec.widths[0]);
  std::size_t channels = spec.widths[0];
  for (std::size_t s = 0; s < spec.widths.size(); ++s)
    for (std::size_t k = 0; k < spec.blocks[s]; ++k) {
      per_member += conv_bn(channels, spec.widths[s]) + conv_bn(spec.widths[s], spec.widths[s]);
      channels = spec.widths[s];
    }
  per_member += channels * spec.num_classes + spec.num_classes;
  return per_member * spec.ensemble;
}

std::size_t Network::param_index(const std::string& name) const {
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (params_[i].name == name) return i;
  throw IndexError("no parameter named " + name);
}

std::vector<std::size_t> Network::conv_params() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (params_[i].kind == ParamKind::Conv) out.push_back(i);
  return out;
}

std::size_t Network::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

std::vector<ValueId> Network::bind(Tape& tape, bool requires_grad) const {
  std::vector<ValueId> ids;
  ids.reserve(params_.size());
  for (const auto& p : params_) ids.push_back(tape.leaf(p.value, requires_grad));
  return ids;
}

ValueId Network::conv_unit(Tape& tape, ValueId x, const ConvUnit& unit, const std::vector<ValueId>& bound, Mode mode,
                           std::vector<BnObservation>* stats) const {
  const ValueId c = tape.conv2d(x, bound.at(unit.conv), unit.stride);
  if (mode == Mode::Train) {
    const ValueId y = tape.batch_norm_train(c, bound.at(unit.gamma), bound.at(unit.beta), kBnEps);
    if (stats) stats->push_back(BnObservation{unit.bn, tape.batch_stats(y)});
    return y;
  }
  const BnState& s = bn_.at(unit.bn);
  return tape.batch_norm_eval(c, bound.at(unit.gamma), bound.at(unit.beta), s.running_mean, s.running_var, kBnEps);
}

ForwardResult Network::forward(Tape& tape, ValueId x, const std::vector<ValueId>& bound, Mode mode, Rng* noise) const {
  if (bound.size() != params_.size()) throw ContractError("forward: parameter binding size mismatch");
  const Tensor& xv = tape.value(x);
  if (xv.rank() != 4 || xv.dim(1) != spec_.in_channels || xv.dim(2) != spec_.height || xv.dim(3) != spec_.width)
    throw DimensionError("forward: batch shape " + shape_str(xv.shape()) + " does not match network input [N x " +
                         std::to_string(spec_.in_channels) + "x" + std::to_string(spec_.height) + "x" +
                         std::to_string(spec_.width) + "]");
  const bool inject = mode == Mode::Train && spec_.noise_sigma > 0.0;
  if (inject && noise == nullptr) throw ContractError("forward: noise injection needs an rng");

  ForwardResult result{};
  std::vector<BnObservation>* stats = mode == Mode::Train ? &result.bn_stats : nullptr;
  ValueId total = 0;
  for (std::size_t m = 0; m < members_.size(); ++m) {
    const Member& member = members_[m];
    ValueId h = tape.relu(conv_unit(tape, x, member.stem, bound, mode, stats));
    for (const auto& block : member.blocks) {
      const ValueId a = tape.relu(conv_unit(tape, h, block.first, bound, mode, stats));
      ValueId r = conv_unit(tape, a, block.second, bound, mode, stats);
      if (inject) {
        Tensor eta(tape.value(r).shape());
        for (auto& v : eta.storage()) v = spec_.noise_sigma * noise->normal();
        r = tape.add(r, tape.constant(std::move(eta)));
      }
      const Tensor& hv = tape.value(h);
      const std::size_t out_ch = tape.value(r).dim(1);
      const ValueId shortcut = (block.first.stride != 1 || hv.dim(1) != out_ch)
                                   ? tape.shortcut_downsample(h, out_ch, block.first.stride)
                                   : h;
      h = tape.relu(tape.add(r, shortcut));
    }
    const ValueId pooled = tape.global_avg_pool(h);
    const ValueId z = tape.add_row_bias(tape.matmul(pooled, bound.at(member.fc_weight)), bound.at(member.fc_bias));
    total = (m == 0) ? z : tape.add(total, z);
  }
  result.logits = members_.size() == 1 ? total : tape.mul_scalar(total, 1.0 / static_cast<double>(members_.size()));
  return result;
}

Tensor Network::logits(const Tensor& batch, Mode mode, Rng* noise) const {
  Tape tape;
  const auto bound = bind(tape, false);
  const ValueId x = tape.constant(batch);
  return tape.value(forward(tape, x, bound, mode, noise).logits);
}

void Network::commit_batch_stats(const std::vector<BnObservation>& observed) {
  for (const auto& obs : observed) {
    BnState& s = bn_.at(obs.bn);
    const std::size_t c = s.running_mean.size();
    if (obs.stats.mean.size() != c) throw DimensionError("commit_batch_stats: channel mismatch");
    for (std::size_t i = 0; i < c; ++i) {
      s.running_mean[i] = (1.0 - kBnMomentum) * s.running_mean[i] + kBnMomentum * obs.stats.mean[i];
      s.running_var[i] = (1.0 - kBnMomentum) * s.running_var[i] + kBnMomentum * obs.stats.var[i];
    }
  }
}

void Network::check_structure() const {
  auto check_unit = [&](const ConvUnit& u, std::size_t in) {
    const Tensor& k = params_.at(u.conv).value;
    if (k.rank() != 4 || k.dim(1) != in || k.dim(2) != 3 || k.dim(3) != 3)
      throw ContractError("structure: conv " + params_[u.conv].name + " has shape " + shape_str(k.shape()) +
                          ", expected input channels " + std::to_string(in));
    const std::size_t out = k.dim(0);
    if (params_.at(u.gamma).value.size() != out || params_.at(u.beta).value.size() != out ||
        bn_.at(u.bn).running_mean.size() != out || bn_.at(u.bn).running_var.size() != out)
      throw ContractError("structure: batch norm of " + params_[u.conv].name + " does not match its filters");
    return out;
  };
  for (const auto& member : members_) {
    std::size_t ch = check_unit(member.stem, spec_.in_channels);
    for (const auto& block : member.blocks) {
      const std::size_t mid = check_unit(block.first, ch);
      const std::size_t out = check_unit(block.second, mid);
      if (out < ch) throw ContractError("structure: residual block narrows its input");
      ch = out;
    }
    const Tensor& w = params_.at(member.fc_weight).value;
    if (w.rank() != 2 || w.dim(0) != ch || w.dim(1) != spec_.num_classes ||
        params_.at(member.fc_bias).value.size() != spec_.num_classes)
      throw ContractError("structure: classifier shape mismatch");
  }
}

std::vector<ChannelRef> conv_channels(const Network& net) {
  std::vector<ChannelRef> out;
  for (std::size_t idx : net.conv_params()) {
    const Param& p = net.params()[idx];
    const std::size_t filters = p.value.dim(0);
    const std::size_t len = p.value.size() / filters;
    for (std::size_t c = 0; c < filters; ++c) {
      ChannelRef ref{p.name, idx, c, {}};
      ref.weights.assign(p.value.data() + c * len, p.value.data() + (c + 1) * len);
      out.push_back(std::move(ref));
    }
  }
  return out;
}

LogitsFn as_logits_fn(const Network& net, Mode mode, Rng* noise) {
  return [&net, mode, noise](Tape& tape, ValueId x) {
    const auto bound = net.bind(tape, false);
    return net.forward(tape, x, bound, mode, noise).logits;
  };
}

}  // namespace robustq
