#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "robustq/tensor.hpp"

namespace robustq {

using ValueId = std::size_t;

enum class OpKind {
  Leaf,
  MatMul,
  Conv2d,
  Add,
  Sub,
  MulScalar,
  Relu,
  Tanh,
  Sign,
  Abs,
  Mean,
  Sum,
  SoftmaxCrossEntropy,
  KlDivergence,
  CwMargin,
  BatchNormTrain,
  BatchNormEval,
  GlobalAvgPool,
  AddRowBias,
  ShortcutDownsample,
};

enum class Reduction { Mean, Sum };

/// Per-channel statistics observed by a training-mode batch-norm node.
struct BatchStats {
  std::vector<double> mean;
  std::vector<double> var;  // biased
};

/// Gradients produced by Tape::backward, indexed by value id.
class Gradients {
 public:
  explicit Gradients(std::vector<Tensor> grads) : grads_(std::move(grads)) {}
  const Tensor& of(ValueId id) const { return grads_.at(id); }
  Tensor& of(ValueId id) { return grads_.at(id); }
  std::size_t size() const { return grads_.size(); }

 private:
  std::vector<Tensor> grads_;
};

// Records operations eagerly (values are computed as nodes are added) and
// replays them in reverse for gradients. Ids are positions in the record, so
// the record is topologically ordered by construction. A tape is
// single-writer; independent tapes may be used from different threads.
class Tape {
 public:
  ValueId leaf(Tensor value, bool requires_grad = true);
  ValueId constant(Tensor value) { return leaf(std::move(value), false); }

  ValueId matmul(ValueId a, ValueId b);
  // 3x3 cross-correlation with zero padding 1; stride 1 or 2.
  ValueId conv2d(ValueId x, ValueId kernel, std::size_t stride);
  ValueId add(ValueId a, ValueId b);
  ValueId sub(ValueId a, ValueId b);
  ValueId mul_scalar(ValueId a, double c);
  ValueId relu(ValueId a);
  ValueId tanh(ValueId a);
  ValueId sign(ValueId a);  // sign(0) = 0, zero gradient
  ValueId abs(ValueId a);
  ValueId mean(ValueId a);
  ValueId sum(ValueId a);

  ValueId softmax_cross_entropy(ValueId logits, std::span<const int> labels,
                                Reduction reduction = Reduction::Mean);
  // Batch mean of KL(softmax(p) || softmax(q)).
  ValueId kl_divergence(ValueId p_logits, ValueId q_logits);
  // Batch mean of -sum_j softmax(p)_j log softmax(q)_j.
  ValueId soft_cross_entropy(ValueId p_logits, ValueId q_logits);
  // Batch sum of max(Z_y - max_{j != y} Z_j, -kappa).
  ValueId cw_margin(ValueId logits, std::span<const int> labels, double kappa);

  ValueId batch_norm_train(ValueId x, ValueId gamma, ValueId beta, double eps);
  ValueId batch_norm_eval(ValueId x, ValueId gamma, ValueId beta, std::span<const double> running_mean,
                          std::span<const double> running_var, double eps);
  ValueId global_avg_pool(ValueId x);
  ValueId add_row_bias(ValueId x, ValueId bias);
  // Parameter-free residual shortcut: spatial subsampling by `stride` and zero
  // padding of the channel axis up to `out_channels`.
  ValueId shortcut_downsample(ValueId x, std::size_t out_channels, std::size_t stride);

  const Tensor& value(ValueId id) const { return nodes_.at(id).value; }
  bool requires_grad(ValueId id) const { return nodes_.at(id).requires_grad; }
  OpKind kind(ValueId id) const { return nodes_.at(id).op; }
  const BatchStats& batch_stats(ValueId bn_node) const;
  std::size_t size() const { return nodes_.size(); }

  /// Reverse sweep from a scalar loss. Returns a gradient for every leaf;
  /// leaves the loss does not depend on get zeros. Intermediate entries are
  /// released during the sweep and come back empty.
  Gradients backward(ValueId loss) const;

 private:
  struct Node {
    OpKind op = OpKind::Leaf;
    std::vector<ValueId> inputs;
    Tensor value;
    bool requires_grad = false;
    std::vector<Tensor> saved;
    std::vector<int> labels;
    double scalar = 0.0;
    std::size_t param = 0;
    BatchStats stats;
  };

  ValueId push(Node node);
  ValueId soft_divergence(ValueId p_logits, ValueId q_logits, bool cross_entropy);
  bool any_requires_grad(std::initializer_list<ValueId> ids) const;
  void backprop(const Node& node, const Tensor& g, std::vector<Tensor>& grads) const;

  std::vector<Node> nodes_;
};

using ScalarFn = std::function<ValueId(Tape&, ValueId)>;

/// Largest |analytic - numeric| / max(1, |analytic|, |numeric|) over all
/// coordinates of `point`, numeric derivatives by central differences.
double grad_check(const ScalarFn& fn, const Tensor& point, double h);

/// Analytic gradient of a scalar function at a point.
Tensor gradient_at(const ScalarFn& fn, const Tensor& point);

}  // namespace robustq
