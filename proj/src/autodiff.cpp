#include "robustq/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "gemm.hpp"

namespace robustq {

namespace {

void require_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank)
    throw DimensionError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
}

void add_into(Tensor& dst, const Tensor& src) {
  if (dst.empty()) {
    dst = src;
    return;
  }
  double* d = dst.data();
  const double* s = src.data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

std::size_t conv_out(std::size_t in, std::size_t stride) { return (in + 2 - 3) / stride + 1; }

// One image at a time so the column buffer stays cache resident.
// col[(c*9 + kh*3 + kw), oh*Wo + ow] = x[c, oh*s + kh - 1, ow*s + kw - 1]
void im2col(const double* x, std::size_t c, std::size_t h, std::size_t w, std::size_t stride, std::size_t ho,
            std::size_t wo, double* col) {
  const std::size_t p = ho * wo;
  std::fill(col, col + c * 9 * p, 0.0);
  for (std::size_t ci = 0; ci < c; ++ci) {
    const double* plane = x + ci * h * w;
    for (std::size_t kh = 0; kh < 3; ++kh)
      for (std::size_t kw = 0; kw < 3; ++kw) {
        double* dst = col + (ci * 9 + kh * 3 + kw) * p;
        for (std::size_t oh = 0; oh < ho; ++oh) {
          const long ih = static_cast<long>(oh * stride + kh) - 1;
          if (ih < 0 || ih >= static_cast<long>(h)) continue;
          for (std::size_t ow = 0; ow < wo; ++ow) {
            const long iw = static_cast<long>(ow * stride + kw) - 1;
            if (iw < 0 || iw >= static_cast<long>(w)) continue;
            dst[oh * wo + ow] = plane[ih * w + iw];
          }
        }
      }
  }
}

void col2im(const double* col, std::size_t c, std::size_t h, std::size_t w, std::size_t stride, std::size_t ho,
            std::size_t wo, double* dx) {
  const std::size_t p = ho * wo;
  for (std::size_t ci = 0; ci < c; ++ci) {
    double* plane = dx + ci * h * w;
    for (std::size_t kh = 0; kh < 3; ++kh)
      for (std::size_t kw = 0; kw < 3; ++kw) {
        const double* src = col + (ci * 9 + kh * 3 + kw) * p;
        for (std::size_t oh = 0; oh < ho; ++oh) {
          const long ih = static_cast<long>(oh * stride + kh) - 1;
          if (ih < 0 || ih >= static_cast<long>(h)) continue;
          for (std::size_t ow = 0; ow < wo; ++ow) {
            const long iw = static_cast<long>(ow * stride + kw) - 1;
            if (iw < 0 || iw >= static_cast<long>(w)) continue;
            plane[ih * w + iw] += src[oh * wo + ow];
          }
        }
      }
  }
}

// Row-wise log-softmax with max subtraction.
Tensor log_softmax(const Tensor& logits) {
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  Tensor out(logits.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = logits.data() + i * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] = row[j] - lz;
  }
  return out;
}

void check_labels(std::span<const int> labels, std::size_t n, std::size_t k) {
  if (labels.size() != n)
    throw DimensionError("label count " + std::to_string(labels.size()) + " does not match batch " +
                         std::to_string(n));
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= k)
      throw IndexError("label " + std::to_string(y) + " outside [0, " + std::to_string(k) + ")");
}

// Best competitor index (lowest index on ties).
std::size_t runner_up(const double* row, std::size_t k, std::size_t y) {
  std::size_t best = (y == 0) ? 1 : 0;
  for (std::size_t j = 0; j < k; ++j)
    if (j != y && row[j] > row[best]) best = j;
  return best;
}

}  // namespace

ValueId Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return nodes_.size() - 1;
}

bool Tape::any_requires_grad(std::initializer_list<ValueId> ids) const {
  for (auto id : ids)
    if (nodes_.at(id).requires_grad) return true;
  return false;
}

const BatchStats& Tape::batch_stats(ValueId bn_node) const {
  const Node& n = nodes_.at(bn_node);
  if (n.op != OpKind::BatchNormTrain) throw ContractError("batch_stats on a non batch-norm node");
  return n.stats;
}

ValueId Tape::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.op = OpKind::Leaf;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  return push(std::move(n));
}

ValueId Tape::matmul(ValueId a, ValueId b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  require_rank(av, 2, "matmul");
  require_rank(bv, 2, "matmul");
  if (av.dim(1) != bv.dim(0))
    throw DimensionError("matmul: inner dims disagree " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  Node n;
  n.op = OpKind::MatMul;
  n.inputs = {a, b};
  n.value = Tensor({av.dim(0), bv.dim(1)});
  detail::gemm(av.data(), bv.data(), n.value.data(), av.dim(0), av.dim(1), bv.dim(1), false);
  n.requires_grad = any_requires_grad({a, b});
  return push(std::move(n));
}

ValueId Tape::conv2d(ValueId x, ValueId kernel, std::size_t stride) {
  const Tensor& xv = value(x);
  const Tensor& kv = value(kernel);
  require_rank(xv, 4, "conv2d input");
  require_rank(kv, 4, "conv2d kernel");
  if (kv.dim(2) != 3 || kv.dim(3) != 3) throw DimensionError("conv2d: kernel must be 3x3");
  if (kv.dim(1) != xv.dim(1))
    throw DimensionError("conv2d: channel mismatch, input has " + std::to_string(xv.dim(1)) + ", kernel expects " +
                         std::to_string(kv.dim(1)));
  if (stride != 1 && stride != 2) throw DimensionError("conv2d: stride must be 1 or 2");
  const std::size_t nb = xv.dim(0), o = kv.dim(0), c9 = kv.dim(1) * 9;
  const std::size_t ho = conv_out(xv.dim(2), stride), wo = conv_out(xv.dim(3), stride);
  const std::size_t p = ho * wo;

  Node n;
  n.op = OpKind::Conv2d;
  n.inputs = {x, kernel};
  n.param = stride;
  n.value = Tensor({nb, o, ho, wo});
  const std::size_t c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  std::vector<double> col(c9 * p);
  for (std::size_t ni = 0; ni < nb; ++ni) {
    im2col(xv.data() + ni * c * h * w, c, h, w, stride, ho, wo, col.data());
    detail::gemm(kv.data(), col.data(), n.value.data() + ni * o * p, o, c9, p, false);
  }
  n.requires_grad = any_requires_grad({x, kernel});
  return push(std::move(n));
}

ValueId Tape::add(ValueId a, ValueId b) {
  check_same_shape(value(a), value(b), "add");
  Node n;
  n.op = OpKind::Add;
  n.inputs = {a, b};
  n.value = value(a);
  const Tensor& bv = value(b);
  for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] += bv[i];
  n.requires_grad = any_requires_grad({a, b});
  return push(std::move(n));
}

ValueId Tape::sub(ValueId a, ValueId b) {
  check_same_shape(value(a), value(b), "sub");
  Node n;
  n.op = OpKind::Sub;
  n.inputs = {a, b};
  n.value = value(a);
  const Tensor& bv = value(b);
  for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] -= bv[i];
  n.requires_grad = any_requires_grad({a, b});
  return push(std::move(n));
}

ValueId Tape::mul_scalar(ValueId a, double c) {
  Node n;
  n.op = OpKind::MulScalar;
  n.inputs = {a};
  n.scalar = c;
  n.value = value(a);
  for (auto& v : n.value.storage()) v *= c;
  n.requires_grad = any_requires_grad({a});
  return push(std::move(n));
}

ValueId Tape::relu(ValueId a) {
  Node n;
  n.op = OpKind::Relu;
  n.inputs = {a};
  n.value = value(a);
  for (auto& v : n.value.storage()) v = v > 0.0 ? v : 0.0;
  n.requires_grad = any_requires_grad({a});
  return push(std::move(n));
}

ValueId Tape::tanh(ValueId a) {
  Node n;
  n.op = OpKind::Tanh;
  n.inputs = {a};
  n.value = value(a);
  for (auto& v : n.value.storage()) v = std::tanh(v);
  n.requires_grad = any_requires_grad({a});
  return push(std::move(n));
}

ValueId Tape::sign(ValueId a) {
  Node n;
  n.op = OpKind::Sign;
  n.inputs = {a};
  n.value = value(a);
  for (auto& v : n.value.storage()) v = (v > 0.0) ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
  n.requires_grad = any_requires_grad({a});
  return push(std::move(n));
}

ValueId Tape::abs(ValueId a) {
  Node n;
  n.op = OpKind::Abs;
  n.inputs = {a};
  n.value = value(a);
  for (auto& v : n.value.storage()) v = std::abs(v);
  n.requires_grad = any_requires_grad({a});
  return push(std::move(n));
}

ValueId Tape::mean(ValueId a) {
  const Tensor& av = value(a);
  double s = 0.0;
  for (double v : av.values()) s += v;
  Node n;
  n.op = OpKind::Mean;
  n.inputs = {a};
  n.value = Tensor::scalar(s / static_cast<double>(av.size()));
  n.requires_grad = any_requires_grad({a});
  return push(std::move(n));
}

ValueId Tape::sum(ValueId a) {
  double s = 0.0;
  for (double v : value(a).values()) s += v;
  Node n;
  n.op = OpKind::Sum;
  n.inputs = {a};
  n.value = Tensor::scalar(s);
  n.requires_grad = any_requires_grad({a});
  return push(std::move(n));
}

ValueId Tape::softmax_cross_entropy(ValueId logits, std::span<const int> labels, Reduction reduction) {
  const Tensor& lv = value(logits);
  require_rank(lv, 2, "softmax_cross_entropy");
  const std::size_t nb = lv.dim(0), k = lv.dim(1);
  check_labels(labels, nb, k);
  Tensor lsm = log_softmax(lv);
  double total = 0.0;
  for (std::size_t i = 0; i < nb; ++i) total -= lsm[i * k + static_cast<std::size_t>(labels[i])];
  const double scale = reduction == Reduction::Mean ? 1.0 / static_cast<double>(nb) : 1.0;
  Node n;
  n.op = OpKind::SoftmaxCrossEntropy;
  n.inputs = {logits};
  n.labels.assign(labels.begin(), labels.end());
  n.scalar = scale;
  n.value = Tensor::scalar(total * scale);
  n.requires_grad = any_requires_grad({logits});
  if (n.requires_grad) n.saved.push_back(std::move(lsm));
  return push(std::move(n));
}

ValueId Tape::kl_divergence(ValueId p_logits, ValueId q_logits) { return soft_divergence(p_logits, q_logits, false); }

ValueId Tape::soft_cross_entropy(ValueId p_logits, ValueId q_logits) {
  return soft_divergence(p_logits, q_logits, true);
}

// Batch mean of sum_j p_j c_j with c = log p - log q (KL) or c = -log q (soft CE).
ValueId Tape::soft_divergence(ValueId p_logits, ValueId q_logits, bool cross_entropy) {
  const Tensor& pv = value(p_logits);
  const Tensor& qv = value(q_logits);
  check_same_shape(pv, qv, "kl_divergence");
  require_rank(pv, 2, "kl_divergence");
  const std::size_t nb = pv.dim(0), k = pv.dim(1);
  Tensor lp = log_softmax(pv), lq = log_softmax(qv);
  Tensor row_kl({nb});
  double total = 0.0;
  for (std::size_t i = 0; i < nb; ++i) {
    double r = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const double lpj = lp[i * k + j];
      r += std::exp(lpj) * (cross_entropy ? -lq[i * k + j] : lpj - lq[i * k + j]);
    }
    // Gibbs: rounding can produce tiny negatives
    row_kl[i] = r;
    total += r;
  }
  Node n;
  n.op = OpKind::KlDivergence;
  n.inputs = {p_logits, q_logits};
  n.scalar = cross_entropy ? 1.0 : 0.0;
  n.value = Tensor::scalar(std::max(0.0, total / static_cast<double>(nb)));
  n.requires_grad = any_requires_grad({p_logits, q_logits});
  if (n.requires_grad) {
    n.saved.push_back(std::move(lp));
    n.saved.push_back(std::move(lq));
    n.saved.push_back(std::move(row_kl));
  }
  return push(std::move(n));
}

ValueId Tape::cw_margin(ValueId logits, std::span<const int> labels, double kappa) {
  const Tensor& lv = value(logits);
  require_rank(lv, 2, "cw_margin");
  const std::size_t nb = lv.dim(0), k = lv.dim(1);
  if (k < 2) throw DimensionError("cw_margin needs at least two classes");
  check_labels(labels, nb, k);
  double total = 0.0;
  for (std::size_t i = 0; i < nb; ++i) {
    const double* row = lv.data() + i * k;
    const auto y = static_cast<std::size_t>(labels[i]);
    const double m = row[y] - row[runner_up(row, k, y)];
    total += std::max(m, -kappa);
  }
  Node n;
  n.op = OpKind::CwMargin;
  n.inputs = {logits};
  n.labels.assign(labels.begin(), labels.end());
  n.scalar = kappa;
  n.value = Tensor::scalar(total);
  n.requires_grad = any_requires_grad({logits});
  return push(std::move(n));
}

ValueId Tape::batch_norm_train(ValueId x, ValueId gamma, ValueId beta, double eps) {
  const Tensor& xv = value(x);
  require_rank(xv, 4, "batch_norm");
  const std::size_t nb = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  if (value(gamma).size() != c || value(beta).size() != c) throw DimensionError("batch_norm: parameter size");
  const Tensor& g = value(gamma);
  const Tensor& b = value(beta);
  const double count = static_cast<double>(nb * hw);

  Node n;
  n.op = OpKind::BatchNormTrain;
  n.inputs = {x, gamma, beta};
  n.scalar = eps;
  n.stats.mean.assign(c, 0.0);
  n.stats.var.assign(c, 0.0);
  Tensor xhat(xv.shape());
  Tensor inv_std({c});
  n.value = Tensor(xv.shape());
  for (std::size_t ci = 0; ci < c; ++ci) {
    double s = 0.0;
    for (std::size_t ni = 0; ni < nb; ++ni) {
      const double* p = xv.data() + (ni * c + ci) * hw;
      for (std::size_t j = 0; j < hw; ++j) s += p[j];
    }
    const double mu = s / count;
    double v = 0.0;
    for (std::size_t ni = 0; ni < nb; ++ni) {
      const double* p = xv.data() + (ni * c + ci) * hw;
      for (std::size_t j = 0; j < hw; ++j) v += (p[j] - mu) * (p[j] - mu);
    }
    v /= count;
    const double is = 1.0 / std::sqrt(v + eps);
    n.stats.mean[ci] = mu;
    n.stats.var[ci] = v;
    inv_std[ci] = is;
    for (std::size_t ni = 0; ni < nb; ++ni) {
      const std::size_t off = (ni * c + ci) * hw;
      for (std::size_t j = 0; j < hw; ++j) {
        const double xh = (xv[off + j] - mu) * is;
        xhat[off + j] = xh;
        n.value[off + j] = g[ci] * xh + b[ci];
      }
    }
  }
  n.requires_grad = any_requires_grad({x, gamma, beta});
  if (n.requires_grad) {
    n.saved.push_back(std::move(xhat));
    n.saved.push_back(std::move(inv_std));
  }
  return push(std::move(n));
}

ValueId Tape::batch_norm_eval(ValueId x, ValueId gamma, ValueId beta, std::span<const double> running_mean,
                              std::span<const double> running_var, double eps) {
  const Tensor& xv = value(x);
  require_rank(xv, 4, "batch_norm");
  const std::size_t nb = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  if (value(gamma).size() != c || value(beta).size() != c || running_mean.size() != c || running_var.size() != c)
    throw DimensionError("batch_norm: parameter size");
  const Tensor& g = value(gamma);
  const Tensor& b = value(beta);
  Node n;
  n.op = OpKind::BatchNormEval;
  n.inputs = {x, gamma, beta};
  Tensor xhat(xv.shape());
  Tensor inv_std({c});
  n.value = Tensor(xv.shape());
  for (std::size_t ci = 0; ci < c; ++ci) {
    const double is = 1.0 / std::sqrt(running_var[ci] + eps);
    inv_std[ci] = is;
    for (std::size_t ni = 0; ni < nb; ++ni) {
      const std::size_t off = (ni * c + ci) * hw;
      for (std::size_t j = 0; j < hw; ++j) {
        const double xh = (xv[off + j] - running_mean[ci]) * is;
        xhat[off + j] = xh;
        n.value[off + j] = g[ci] * xh + b[ci];
      }
    }
  }
  n.requires_grad = any_requires_grad({x, gamma, beta});
  if (n.requires_grad) {
    n.saved.push_back(std::move(xhat));
    n.saved.push_back(std::move(inv_std));
  }
  return push(std::move(n));
}

ValueId Tape::global_avg_pool(ValueId x) {
  const Tensor& xv = value(x);
  require_rank(xv, 4, "global_avg_pool");
  const std::size_t nb = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  Node n;
  n.op = OpKind::GlobalAvgPool;
  n.inputs = {x};
  n.value = Tensor({nb, c});
  for (std::size_t i = 0; i < nb * c; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < hw; ++j) s += xv[i * hw + j];
    n.value[i] = s / static_cast<double>(hw);
  }
  n.requires_grad = any_requires_grad({x});
  return push(std::move(n));
}

ValueId Tape::add_row_bias(ValueId x, ValueId bias) {
  const Tensor& xv = value(x);
  const Tensor& bv = value(bias);
  require_rank(xv, 2, "add_row_bias");
  if (bv.size() != xv.dim(1)) throw DimensionError("add_row_bias: bias length does not match columns");
  Node n;
  n.op = OpKind::AddRowBias;
  n.inputs = {x, bias};
  n.value = xv;
  const std::size_t k = xv.dim(1);
  for (std::size_t i = 0; i < xv.size(); ++i) n.value[i] += bv[i % k];
  n.requires_grad = any_requires_grad({x, bias});
  return push(std::move(n));
}

ValueId Tape::shortcut_downsample(ValueId x, std::size_t out_channels, std::size_t stride) {
  const Tensor& xv = value(x);
  require_rank(xv, 4, "shortcut_downsample");
  const std::size_t nb = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  if (out_channels < c) throw DimensionError("shortcut_downsample: cannot drop channels");
  const std::size_t ho = conv_out(h, stride), wo = conv_out(w, stride);
  Node n;
  n.op = OpKind::ShortcutDownsample;
  n.inputs = {x};
  n.param = stride;
  n.value = Tensor({nb, out_channels, ho, wo});
  for (std::size_t ni = 0; ni < nb; ++ni)
    for (std::size_t ci = 0; ci < c; ++ci)
      for (std::size_t oh = 0; oh < ho; ++oh)
        for (std::size_t ow = 0; ow < wo; ++ow) n.value.at(ni, ci, oh, ow) = xv.at(ni, ci, oh * stride, ow * stride);
  n.requires_grad = any_requires_grad({x});
  return push(std::move(n));
}

Gradients Tape::backward(ValueId loss) const {
  if (loss >= nodes_.size()) throw IndexError("backward: unknown value id");
  if (nodes_[loss].value.size() != 1) throw ContractError("backward: loss must be a scalar");
  std::vector<Tensor> grads(nodes_.size());
  grads[loss] = Tensor(nodes_[loss].value.shape(), 1.0);
  for (std::size_t i = loss + 1; i-- > 0;) {
    const Node& node = nodes_[i];
    if (node.op == OpKind::Leaf) continue;
    if (!grads[i].empty() && node.requires_grad) backprop(node, grads[i], grads);
    grads[i] = Tensor();  // intermediates are released once propagated
  }
  for (std::size_t i = 0; i < nodes_.size(); ++i)
    if (nodes_[i].op == OpKind::Leaf && grads[i].empty()) grads[i] = Tensor(nodes_[i].value.shape(), 0.0);
  return Gradients(std::move(grads));
}

void Tape::backprop(const Node& node, const Tensor& g, std::vector<Tensor>& grads) const {
  auto wants = [&](std::size_t slot) { return nodes_[node.inputs[slot]].requires_grad; };
  auto accumulate = [&](std::size_t slot, const Tensor& t) { add_into(grads[node.inputs[slot]], t); };

  switch (node.op) {
    case OpKind::Leaf:
      break;
    case OpKind::MatMul: {
      const Tensor& a = value(node.inputs[0]);
      const Tensor& b = value(node.inputs[1]);
      const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
      if (wants(0)) {
        std::vector<double> bt(n * k);
        detail::transpose(b.data(), bt.data(), k, n);
        Tensor da({m, k});
        detail::gemm(g.data(), bt.data(), da.data(), m, n, k, false);
        accumulate(0, da);
      }
      if (wants(1)) {
        std::vector<double> at(k * m);
        detail::transpose(a.data(), at.data(), m, k);
        Tensor db({k, n});
        detail::gemm(at.data(), g.data(), db.data(), k, m, n, false);
        accumulate(1, db);
      }
      break;
    }
    case OpKind::Conv2d: {
      const Tensor& x = value(node.inputs[0]);
      const Tensor& kern = value(node.inputs[1]);
      const std::size_t nb = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
      const std::size_t o = kern.dim(0), c9 = c * 9;
      const std::size_t stride = node.param, ho = g.dim(2), wo = g.dim(3), p = ho * wo;
      std::vector<double> col(c9 * p), colt(p * c9), dcol(c9 * p), kt(c9 * o);
      Tensor dk, dx;
      if (wants(1)) dk = Tensor(kern.shape());
      if (wants(0)) {
        dx = Tensor(x.shape());
        detail::transpose(kern.data(), kt.data(), o, c9);
      }
      for (std::size_t ni = 0; ni < nb; ++ni) {
        const double* gi = g.data() + ni * o * p;
        if (wants(1)) {
          // col is recomputed rather than kept from the forward pass
          im2col(x.data() + ni * c * h * w, c, h, w, stride, ho, wo, col.data());
          detail::transpose(col.data(), colt.data(), c9, p);
          detail::gemm(gi, colt.data(), dk.data(), o, p, c9, ni > 0);
        }
        if (wants(0)) {
          detail::gemm(kt.data(), gi, dcol.data(), c9, o, p, false);
          col2im(dcol.data(), c, h, w, stride, ho, wo, dx.data() + ni * c * h * w);
        }
      }
      if (wants(1)) accumulate(1, dk);
      if (wants(0)) accumulate(0, dx);
      break;
    }
    case OpKind::Add:
      if (wants(0)) accumulate(0, g);
      if (wants(1)) accumulate(1, g);
      break;
    case OpKind::Sub:
      if (wants(0)) accumulate(0, g);
      if (wants(1)) {
        Tensor neg = g;
        for (auto& v : neg.storage()) v = -v;
        accumulate(1, neg);
      }
      break;
    case OpKind::MulScalar: {
      Tensor d = g;
      for (auto& v : d.storage()) v *= node.scalar;
      accumulate(0, d);
      break;
    }
    case OpKind::Relu: {
      Tensor d = g;
      for (std::size_t i = 0; i < d.size(); ++i)
        if (!(node.value[i] > 0.0)) d[i] = 0.0;
      accumulate(0, d);
      break;
    }
    case OpKind::Tanh: {
      Tensor d = g;
      for (std::size_t i = 0; i < d.size(); ++i) d[i] *= 1.0 - node.value[i] * node.value[i];
      accumulate(0, d);
      break;
    }
    case OpKind::Sign:
      break;  // zero almost everywhere
    case OpKind::Abs: {
      const Tensor& a = value(node.inputs[0]);
      Tensor d = g;
      for (std::size_t i = 0; i < d.size(); ++i) d[i] *= (a[i] > 0.0) ? 1.0 : (a[i] < 0.0 ? -1.0 : 0.0);
      accumulate(0, d);
      break;
    }
    case OpKind::Mean: {
      const Tensor& a = value(node.inputs[0]);
      accumulate(0, Tensor(a.shape(), g[0] / static_cast<double>(a.size())));
      break;
    }
    case OpKind::Sum:
      accumulate(0, Tensor(value(node.inputs[0]).shape(), g[0]));
      break;
    case OpKind::SoftmaxCrossEntropy: {
      const Tensor& lsm = node.saved.at(0);
      const std::size_t nb = lsm.dim(0), k = lsm.dim(1);
      Tensor d(lsm.shape());
      const double s = g[0] * node.scalar;
      for (std::size_t i = 0; i < nb; ++i)
        for (std::size_t j = 0; j < k; ++j) {
          const double onehot = (static_cast<int>(j) == node.labels[i]) ? 1.0 : 0.0;
          d[i * k + j] = s * (std::exp(lsm[i * k + j]) - onehot);
        }
      accumulate(0, d);
      break;
    }
    case OpKind::KlDivergence: {
      const Tensor& lp = node.saved.at(0);
      const Tensor& lq = node.saved.at(1);
      const Tensor& row_kl = node.saved.at(2);
      const std::size_t nb = lp.dim(0), k = lp.dim(1);
      const double s = g[0] / static_cast<double>(nb);
      if (wants(0)) {
        Tensor d(lp.shape());
        for (std::size_t i = 0; i < nb; ++i)
          for (std::size_t j = 0; j < k; ++j) {
            const double pj = std::exp(lp[i * k + j]);
            const double c = node.scalar != 0.0 ? -lq[i * k + j] : lp[i * k + j] - lq[i * k + j];
            d[i * k + j] = s * pj * (c - row_kl[i]);
          }
        accumulate(0, d);
      }
      if (wants(1)) {
        Tensor d(lq.shape());
        for (std::size_t i = 0; i < nb * k; ++i) d[i] = s * (std::exp(lq[i]) - std::exp(lp[i]));
        accumulate(1, d);
      }
      break;
    }
    case OpKind::CwMargin: {
      const Tensor& lv = value(node.inputs[0]);
      const std::size_t nb = lv.dim(0), k = lv.dim(1);
      Tensor d(lv.shape());
      for (std::size_t i = 0; i < nb; ++i) {
        const double* row = lv.data() + i * k;
        const auto y = static_cast<std::size_t>(node.labels[i]);
        const std::size_t r = runner_up(row, k, y);
        if (row[y] - row[r] > -node.scalar) {
          d[i * k + y] = g[0];
          d[i * k + r] = -g[0];
        }
      }
      accumulate(0, d);
      break;
    }
    case OpKind::BatchNormTrain:
    case OpKind::BatchNormEval: {
      const Tensor& xhat = node.saved.at(0);
      const Tensor& inv_std = node.saved.at(1);
      const Tensor& gamma = value(node.inputs[1]);
      const std::size_t nb = xhat.dim(0), c = xhat.dim(1), hw = xhat.dim(2) * xhat.dim(3);
      const double count = static_cast<double>(nb * hw);
      Tensor dgamma({c}), dbeta({c});
      Tensor dx(xhat.shape());
      for (std::size_t ci = 0; ci < c; ++ci) {
        double sg = 0.0, sgx = 0.0;
        for (std::size_t ni = 0; ni < nb; ++ni) {
          const std::size_t off = (ni * c + ci) * hw;
          for (std::size_t j = 0; j < hw; ++j) {
            sg += g[off + j];
            sgx += g[off + j] * xhat[off + j];
          }
        }
        dgamma[ci] = sgx;
        dbeta[ci] = sg;
        if (!wants(0)) continue;
        const double gi = gamma[ci] * inv_std[ci];
        for (std::size_t ni = 0; ni < nb; ++ni) {
          const std::size_t off = (ni * c + ci) * hw;
          for (std::size_t j = 0; j < hw; ++j) {
            if (node.op == OpKind::BatchNormTrain)
              dx[off + j] = gi * (g[off + j] - sg / count - xhat[off + j] * sgx / count);
            else
              dx[off + j] = gi * g[off + j];
          }
        }
      }
      if (wants(0)) accumulate(0, dx);
      if (wants(1)) accumulate(1, dgamma);
      if (wants(2)) accumulate(2, dbeta);
      break;
    }
    case OpKind::GlobalAvgPool: {
      const Tensor& x = value(node.inputs[0]);
      const std::size_t hw = x.dim(2) * x.dim(3);
      Tensor d(x.shape());
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double v = g[i] / static_cast<double>(hw);
        for (std::size_t j = 0; j < hw; ++j) d[i * hw + j] = v;
      }
      accumulate(0, d);
      break;
    }
    case OpKind::AddRowBias: {
      if (wants(0)) accumulate(0, g);
      if (wants(1)) {
        const std::size_t k = g.dim(1);
        Tensor db({k});
        for (std::size_t i = 0; i < g.size(); ++i) db[i % k] += g[i];
        accumulate(1, db);
      }
      break;
    }
    case OpKind::ShortcutDownsample: {
      const Tensor& x = value(node.inputs[0]);
      const std::size_t nb = x.dim(0), c = x.dim(1), stride = node.param;
      Tensor d(x.shape());
      for (std::size_t ni = 0; ni < nb; ++ni)
        for (std::size_t ci = 0; ci < c; ++ci)
          for (std::size_t oh = 0; oh < g.dim(2); ++oh)
            for (std::size_t ow = 0; ow < g.dim(3); ++ow) d.at(ni, ci, oh * stride, ow * stride) += g.at(ni, ci, oh, ow);
      accumulate(0, d);
      break;
    }
  }
}

Tensor gradient_at(const ScalarFn& fn, const Tensor& point) {
  Tape tape;
  const ValueId x = tape.leaf(point, true);
  const ValueId y = fn(tape, x);
  return tape.backward(y).of(x);
}

double grad_check(const ScalarFn& fn, const Tensor& point, double h) {
  if (!(h > 0.0)) throw ContractError("grad_check: step must be positive");
  const Tensor analytic = gradient_at(fn, point);
  auto eval = [&](const Tensor& p) {
    Tape tape;
    const ValueId x = tape.leaf(p, false);
    const ValueId y = fn(tape, x);
    if (tape.value(y).size() != 1) throw ContractError("grad_check: function must be scalar-valued");
    return tape.value(y)[0];
  };
  double worst = 0.0;
  Tensor probe = point;
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = eval(probe);
    probe[i] = orig - h;
    const double fm = eval(probe);
    probe[i] = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    const double denom = std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace robustq
