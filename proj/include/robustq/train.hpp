#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "robustq/attacks.hpp"
#include "robustq/data.hpp"
#include "robustq/nets.hpp"
#include "robustq/quantizer.hpp"
#include "robustq/sparsity.hpp"

namespace robustq {

enum class LossKind { Natural, Adversarial, Trades, Tradeoff };
LossKind parse_loss(const std::string& name);
std::string loss_name(LossKind kind);

struct LossSpec {
  LossKind kind = LossKind::Tradeoff;
  double alpha = 1.0;  // tradeoff only
  double beta = 1.0;   // trades and tradeoff
  PgdConfig pgd;
  bool trades_soft_ce = false;  // inner term as soft-label cross-entropy instead of KL

  void validate() const;
};

struct LossTerms {
  double natural = 0.0;  // mean CE on clean inputs, when computed
  double robust = 0.0;   // CE at x~ (AT, tradeoff) or the divergence term (TRADES)
  double total = 0.0;
  bool has_natural = false;
  bool has_robust = false;
};

struct LossGraph {
  ValueId total;
  LossTerms terms;
  std::vector<BnObservation> bn_stats;  // every train-mode pass on the tape, in order
};

/// Records the objective of `spec` on `tape`. Attack passes run on their own
/// tapes in the same mode and never contribute batch statistics. Terms with a
/// zero coefficient are skipped entirely, so tradeoff(0, 1) is exactly the
/// adversarial loss and tradeoff(1, 0) exactly the natural loss.
LossGraph record_loss(Tape& tape, const Network& net, const std::vector<ValueId>& bound, const Tensor& x,
                      std::span<const int> y, const LossSpec& spec, Mode mode, Rng& rng);

double natural_loss(const Network& net, const Tensor& x, std::span<const int> y, Mode mode = Mode::Eval,
                    Rng* noise = nullptr);
double adversarial_loss(const Network& net, const Tensor& x, std::span<const int> y, const PgdConfig& pgd, Rng& rng,
                        Mode mode = Mode::Eval);
double trades_loss(const Network& net, const Tensor& x, std::span<const int> y, double beta, const PgdConfig& pgd,
                   Rng& rng, Mode mode = Mode::Eval);
double tradeoff_loss(const Network& net, const Tensor& x, std::span<const int> y, double alpha, double beta,
                     const PgdConfig& pgd, Rng& rng, Mode mode = Mode::Eval);

/// Heavy-ball direction: v <- mu v + (g + wd w); returns v. `w` may be null.
const Tensor& sgd_direction(Tensor& velocity, const Tensor& grad, const Tensor* w, double momentum,
                            double weight_decay);

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 64;
  double lr = 0.1;
  std::vector<std::size_t> milestones;  // lr is multiplied by lr_decay for epochs after each
  double lr_decay = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;  // shadow conv/fc weights only
  std::uint64_t seed = 1;

  QuantScheme scheme{QuantVariant::Binary};
  double rho = 1.02;
  std::optional<std::size_t> cutoff;  // default: 80% of epochs
  bool exempt_first = false;
  bool exempt_last = false;

  LossSpec loss;

  std::size_t eval_samples = 500;  // per-epoch evaluation subset, 0 = skip
  bool eval_attacks = true;
  AttackConfig attack;

  void validate() const;
  std::size_t resolved_cutoff() const;
  double lr_at(std::size_t epoch) const;  // 1-based
};

struct AccuracyTable {
  double natural = 0.0;                // N
  std::optional<double> fgsm;          // A1
  std::optional<double> ifgsm;         // A2
  std::optional<double> cw;            // A3
  std::size_t samples = 0;

  friend bool operator==(const AccuracyTable&, const AccuracyTable&) = default;
};

struct EvalSuite {
  bool fgsm = true;
  bool ifgsm = true;
  bool cw = false;
  AttackConfig attack;
  std::size_t batch_size = 250;
};

std::size_t count_correct(const Tensor& logits, std::span<const int> labels);

/// Clean and attacked accuracy of `net` in eval mode (its weights being u).
AccuracyTable evaluate(const Network& net, const Dataset& data, const EvalSuite& suite);

struct MetricsRow {
  std::size_t epoch = 0;
  double loss = 0.0;
  double natural = 0.0;
  std::optional<double> a1, a2, a3;
  double m_t = 0.0;
  double lambda = 0.0;
  double weight_sparsity = 0.0;
  double channel_sparsity = 0.0;
  double seconds = 0.0;

  /// Everything except wall time.
  bool same_result(const MetricsRow& o) const;
};

std::string metrics_header();
std::string metrics_csv_line(const MetricsRow& row);

/// Complete resumable training state.
struct TrainState {
  Network net;  // quantized layers hold u
  QuantState quant;
  std::vector<Tensor> velocity;  // per network parameter
  Rng rng;
  BoundTrace trace;
  std::vector<MetricsRow> history;
  std::size_t epochs_done = 0;
};

TrainState init_training(const NetworkSpec& spec, const TrainConfig& cfg);

/// Copies every u into the network registry.
void load_quantized(TrainState& state);

struct EpochResult {
  double mean_loss = 0.0;
  double m_t = 0.0;
  double seconds = 0.0;
  std::size_t batches = 0;
  std::size_t ascent_violations = 0;  // batches where CE(x~) < CE(x) - 1e-9
};

/// One epoch of relaxed or projected updates over `data`.
EpochResult train_epoch(TrainState& state, const Dataset& data, const TrainConfig& cfg);

using EpochCallback = std::function<void(const TrainState&, const MetricsRow&)>;

/// Runs epochs until `until_epoch` (inclusive), evaluating on `eval` after each.
void run_training(TrainState& state, const Dataset& train, const Dataset& eval, const TrainConfig& cfg,
                  std::size_t until_epoch, const EpochCallback& on_epoch = {});

}  // namespace robustq
