#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>

#include <CLI11.hpp>
#include <json.hpp>

#include "robustq/io.hpp"
#include "robustq/theory.hpp"

using namespace robustq;
namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

struct Common {
  std::string config_file;
  std::string out_dir = "out";
  std::optional<std::uint64_t> seed;
  std::vector<std::string> sets;  // key=value overrides
  std::map<std::string, std::string> flags;  // named flags mapped onto config keys
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config_file, "key=value configuration file")->check(CLI::ExistingFile);
  app->add_option("--out-dir", c.out_dir, "directory for outputs")->capture_default_str();
  app->add_option("--seed", c.seed, "random seed");
  app->add_option("--set", c.sets, "override a config key, key=value (repeatable)");
}

// defaults < config file < flags
ConfigMap resolve(const Common& c, ConfigMap base = default_config()) {
  ConfigMap cfg = base;
  if (!c.config_file.empty()) cfg = merge_config(cfg, load_config_file(c.config_file));
  ConfigMap over;
  for (const auto& s : c.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw CLI::ValidationError("--set", "expects key=value, got '" + s + "'");
    over[s.substr(0, eq)] = s.substr(eq + 1);
  }
  for (const auto& [k, v] : c.flags) over[k] = v;
  if (c.seed) over["seed"] = std::to_string(*c.seed);
  return merge_config(cfg, over);
}

void bind_flag(CLI::App* app, Common& c, const std::string& flag, const std::string& key, const std::string& help) {
  app->add_option_function<std::string>(flag, [&c, key](const std::string& v) { c.flags[key] = v; }, help);
}

std::string out_path(const Common& c, const std::string& name) {
  fs::create_directories(c.out_dir);
  return (fs::path(c.out_dir) / name).string();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path);
  out << text;
}

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f%%", 100.0 * v);
  return buf;
}

ordered_json table_json(const AccuracyTable& t) {
  ordered_json j;
  j["samples"] = t.samples;
  j["N"] = t.natural;
  if (t.fgsm) j["A1"] = *t.fgsm;
  if (t.ifgsm) j["A2"] = *t.ifgsm;
  if (t.cw) j["A3"] = *t.cw;
  return j;
}

void print_table(const AccuracyTable& t) {
  std::cout << "N=" << pct(t.natural);
  if (t.fgsm) std::cout << " A1=" << pct(*t.fgsm);
  if (t.ifgsm) std::cout << " A2=" << pct(*t.ifgsm);
  if (t.cw) std::cout << " A3=" << pct(*t.cw);
  std::cout << " (" << t.samples << " samples)\n";
}

void finish(const Common& c, const std::string& command, const ConfigMap& cfg, std::vector<std::string> artifacts,
            std::map<std::string, std::string> extra = {}) {
  Manifest m;
  m.command = command;
  m.seed = std::stoull(cfg.at("seed"));
  m.config = cfg;
  m.artifacts = std::move(artifacts);
  m.extra = std::move(extra);
  const std::string path = out_path(c, "manifest.json");
  write_manifest(path, m);
  std::cout << "manifest: " << path << "\n";
}

// config stored in a checkpoint, with command-line overrides on top
ConfigMap checkpoint_config(const Checkpoint& ck, const Common& c) {
  return resolve(c, merge_config(default_config(), parse_config_text(ck.config_text, "checkpoint")));
}

// ---- train ----

struct TrainArgs {
  Common c;
  std::string resume;
  std::size_t checkpoint_every = 0;
  bool final_eval = true;
  bool cw = false;
};

int cmd_train(TrainArgs& a) {
  ConfigMap cfg;
  TrainState state;
  if (!a.resume.empty()) {
    Checkpoint ck = load_checkpoint(a.resume);
    cfg = checkpoint_config(ck, a.c);
    state = std::move(ck.state);
    std::cout << "resuming " << a.resume << " after epoch " << state.epochs_done << "\n";
  }
  else {
    cfg = resolve(a.c);
  }
  const TrainConfig tc = train_config_from(cfg);
  const DataSplit data = load_data(cfg);
  if (data.train.empty()) throw ContractError("train: empty training set");
  if (a.resume.empty()) state = init_training(network_spec_from(cfg, data.train), tc);
  const std::string cfg_text = render_config(cfg);

  std::set<std::size_t> marks(tc.milestones.begin(), tc.milestones.end());
  marks.insert(tc.resolved_cutoff());
  marks.insert(tc.epochs);
  std::vector<std::string> artifacts;
  const std::string metrics = out_path(a.c, "metrics.csv");

  std::cout << "train " << data.train.size() << " / test " << data.test.size() << " samples, "
            << state.net.parameter_count() << " parameters, " << variant_name(tc.scheme.variant) << " "
            << loss_name(tc.loss.kind) << "\n";
  std::cout << metrics_header() << "\n";
  run_training(state, data.train, data.test, tc, tc.epochs, [&](const TrainState& st, const MetricsRow& row) {
    std::cout << metrics_csv_line(row) << std::endl;
    write_metrics_csv(metrics, st.history);
    if (marks.count(row.epoch) || (a.checkpoint_every && row.epoch % a.checkpoint_every == 0)) {
      const std::string p = out_path(a.c, "epoch-" + std::to_string(row.epoch) + ".rqck");
      save_checkpoint(p, st, cfg_text);
      artifacts.push_back(p);
    }
  });
  const std::string final_ck = out_path(a.c, "final.rqck");
  save_checkpoint(final_ck, state, cfg_text);
  artifacts.push_back(final_ck);
  artifacts.push_back(metrics);

  if (a.final_eval && !data.test.empty()) {
    EvalSuite suite;
    suite.attack = tc.attack;
    suite.cw = a.cw;
    const AccuracyTable t = evaluate(state.net, data.test, suite);
    std::cout << "test: ";
    print_table(t);
    const std::string p = out_path(a.c, "eval.json");
    write_text(p, table_json(t).dump(2) + "\n");
    artifacts.push_back(p);
  }
  std::cout << "M=" << state.trace.M() << "\n";
  finish(a.c, "train", cfg, artifacts);
  return 0;
}

// ---- attack ----

struct AttackArgs {
  Common c;
  std::string checkpoint;
  std::string method = "ifgsm";
  std::size_t limit = 0;
};

int cmd_attack(AttackArgs& a) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const ConfigMap cfg = checkpoint_config(ck, a.c);
  const AttackConfig ac = attack_config_from(cfg);
  DataSplit data = load_data(cfg);
  Dataset test = data.test;
  if (a.limit && a.limit < test.size()) test = test.slice(0, a.limit);
  if (test.empty()) throw ContractError("attack: empty test set");

  const Network& net = ck.state.net;
  const LogitsFn f = as_logits_fn(net, Mode::Eval);
  Rng rng(std::stoull(cfg.at("seed")));
  PgdConfig pc;
  pc.eps = ac.eps;
  pc.step = ac.alpha;
  pc.iters = ac.iters;
  pc.validate();

  std::size_t clean = 0, robust = 0;
  double max_pert = 0.0;
  for (std::size_t b = 0; b < test.size(); b += 250) {
    const Dataset part = test.slice(b, std::min(test.size(), b + 250));
    const Tensor& x = part.images;
    Tensor adv;
    if (a.method == "fgsm") adv = fgsm(f, x, part.labels, ac.eps, ac.lo, ac.hi);
    else if (a.method == "ifgsm") adv = ifgsm(f, x, part.labels, ac);
    else if (a.method == "cw") adv = cw_linf(f, x, part.labels, ac);
    else adv = pgd(f, x, part.labels, pc, rng, PgdObjective::CrossEntropy, nullptr);
    max_pert = std::max(max_pert, max_abs_diff(adv, x));
    clean += count_correct(net.logits(x), part.labels);
    robust += count_correct(net.logits(adv), part.labels);
  }
  const double n = static_cast<double>(test.size());
  ordered_json j;
  j["method"] = a.method;
  j["eps"] = ac.eps;
  j["samples"] = test.size();
  j["clean_accuracy"] = clean / n;
  j["adversarial_accuracy"] = robust / n;
  j["max_perturbation"] = max_pert;
  std::cout << a.method << " eps=" << ac.eps << ": clean " << pct(clean / n) << ", adversarial " << pct(robust / n)
            << ", max |delta| " << max_pert << "\n";
  const std::string p = out_path(a.c, "attack.json");
  write_text(p, j.dump(2) + "\n");
  finish(a.c, "attack", cfg, {p}, {{"checkpoint", a.checkpoint}, {"checkpoint_sha256", sha256_file(a.checkpoint)}});
  return 0;
}

// ---- analyze ----

int cmd_analyze(Common& c, const std::string& checkpoint) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  const ConfigMap cfg = checkpoint_config(ck, c);
  const SparsityReport r = sparsity_report(ck.state.net);

  std::string csv = "layer,weights,zero_weights,channels,zero_channels\n";
  for (const auto& l : r.layers)
    csv += l.name + "," + std::to_string(l.weights) + "," + std::to_string(l.zero_weights) + "," +
           std::to_string(l.channels) + "," + std::to_string(l.zero_channels) + "\n";
  const std::string sp = out_path(c, "sparsity.csv");
  write_text(sp, csv);

  const BoundTrace& tr = ck.state.trace;
  std::string bcsv = "epoch,M_t,M\n";
  for (std::size_t i = 0; i < tr.m_t.size(); ++i) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g\n", i + 1, tr.m_t[i], tr.running_max[i]);
    bcsv += buf;
  }
  const std::string bp = out_path(c, "bound.csv");
  write_text(bp, bcsv);

  std::cout << "weights: " << r.zero_weights << " / " << r.total_weights << " zero (" << pct(r.weight_sparsity)
            << ")\n"
            << "channels: " << r.zero_channels << " / " << r.total_channels << " zero (" << pct(r.channel_sparsity)
            << "), " << r.prunable_channels << " prunable, " << r.masked_channels << " masked only\n"
            << "M = " << tr.M() << " over " << tr.m_t.size() << " epochs\n";
  finish(c, "analyze", cfg, {sp, bp}, {{"checkpoint", checkpoint}});
  return 0;
}

// ---- prune ----

int cmd_prune(Common& c, const std::string& checkpoint, std::string output) {
  Checkpoint ck = load_checkpoint(checkpoint);
  const ConfigMap cfg = checkpoint_config(ck, c);
  PruneResult pr = prune_channels(ck.state.net);
  // the pruned net is for inference; training state no longer matches its shapes
  TrainState st{std::move(pr.net), {}, {}, ck.state.rng, ck.state.trace, ck.state.history, ck.state.epochs_done};
  st.quant.scheme = ck.state.quant.scheme;
  st.quant.lambda = ck.state.quant.lambda;
  st.quant.rho = ck.state.quant.rho;
  st.quant.cutoff = ck.state.quant.cutoff;
  st.quant.epoch = ck.state.quant.epoch;
  st.quant.steps = ck.state.quant.steps;
  if (output.empty()) output = out_path(c, "pruned.rqck");
  save_checkpoint(output, st, ck.config_text);
  std::cout << "removed " << pr.report.removed.size() << " channels, masked " << pr.report.masked.size()
            << "; parameters " << pr.report.params_before << " -> " << pr.report.params_after << "\n"
            << "wrote " << output << "\n";
  finish(c, "prune", cfg, {output},
         {{"checkpoint", checkpoint},
          {"params_before", std::to_string(pr.report.params_before)},
          {"params_after", std::to_string(pr.report.params_after)}});
  return 0;
}

// ---- verify ----

ordered_json witness_json(const Witness& w) {
  ordered_json j;
  j["what"] = w.what;
  j["dim"] = w.problem.dim;
  j["delta"] = w.problem.delta;
  j["resolution"] = w.problem.resolution;
  ordered_json samples = ordered_json::array();
  for (const auto& s : w.problem.samples) samples.push_back({{"x", s.x}, {"y", s.y}});
  j["samples"] = samples;
  static const char* kinds[] = {"affine", "cubic", "sine"};
  j["classifier"] = {{"kind", kinds[static_cast<int>(w.classifier.kind)]}, {"w", w.classifier.w}, {"b", w.classifier.b}};
  if (w.sample) j["sample"] = *w.sample;
  return j;
}

struct VerifyArgs {
  Common c;
  int prop = 1;
  std::size_t trials = 1000;
  std::vector<std::string> losses = {"hinge", "sigmoid", "logistic"};
};

int cmd_verify(VerifyArgs& a) {
  const ConfigMap cfg = resolve(a.c);
  const std::uint64_t seed = std::stoull(cfg.at("seed"));
  ordered_json j;
  j["prop"] = a.prop;
  j["trials"] = a.trials;
  j["seed"] = seed;
  bool ok = true;
  if (a.prop == 1) {
    const Prop1Report r = verify_prop1(a.trials, seed);
    ok = r.passed();
    j["violations"] = r.violations;
    j["nonempty_E"] = r.nonempty_E;
    j["max_gap"] = r.max_gap;
    if (r.witness) j["witness"] = witness_json(*r.witness);
    std::cout << "prop 1, 0-1 loss: " << r.trials << " trials, " << r.violations << " violations, " << r.nonempty_E
              << " trials with non-empty E -> " << (ok ? "PASS" : "FAIL") << "\n";
  } else {
    ordered_json per = ordered_json::array();
    for (const auto& name : a.losses) {
      const Prop2Report r = verify_prop2(parse_phi(name), a.trials, seed);
      ok = ok && r.passed();
      ordered_json e{{"loss", name},
                     {"samples_B", r.samples_B},
                     {"samples_Bc", r.samples_Bc},
                     {"violations_B", r.violations_B},
                     {"violations_Bc", r.violations_Bc},
                     {"aggregate_violations", r.aggregate_violations},
                     {"nonempty_E", r.nonempty_E}};
      if (r.witness) e["witness"] = witness_json(*r.witness);
      per.push_back(e);
      std::cout << "prop 2, " << name << ": " << r.trials << " trials, violations B " << r.violations_B << ", B^c "
                << r.violations_Bc << ", aggregate " << r.aggregate_violations << " -> "
                << (r.passed() ? "PASS" : "FAIL") << "\n";
    }
    j["losses"] = per;
  }
  j["passed"] = ok;
  const std::string p = out_path(a.c, "verify.json");
  write_text(p, j.dump(2) + "\n");
  finish(a.c, "verify", cfg, {p});
  return ok ? 0 : 3;
}

// ---- data ----

ordered_json dataset_json(const Dataset& d) {
  std::vector<std::size_t> hist(d.num_classes, 0);
  for (int y : d.labels) ++hist.at(static_cast<std::size_t>(y));
  double lo = 0.0, hi = 0.0;
  if (!d.empty()) {
    lo = *std::min_element(d.images.values().begin(), d.images.values().end());
    hi = *std::max_element(d.images.values().begin(), d.images.values().end());
  }
  return {{"name", d.name}, {"size", d.size()},     {"sample_shape", d.sample_shape},
          {"classes", d.num_classes}, {"class_counts", hist}, {"min", lo}, {"max", hi}};
}

int cmd_data(Common& c) {
  const ConfigMap cfg = resolve(c);
  const DataSplit d = load_data(cfg);
  ordered_json j{{"train", dataset_json(d.train)}, {"test", dataset_json(d.test)}};
  std::cout << j.dump(2) << "\n";
  const std::string p = out_path(c, "data.json");
  write_text(p, j.dump(2) + "\n");
  finish(c, "data", cfg, {p});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"robust quantized network training and analysis"};
  app.require_subcommand(1);

  TrainArgs train;
  auto* t = app.add_subcommand("train", "train a network and write metrics, checkpoints and a manifest");
  add_common(t, train.c);
  bind_flag(t, train.c, "--epochs", "epochs", "number of epochs");
  bind_flag(t, train.c, "--lr", "lr", "initial learning rate");
  bind_flag(t, train.c, "--loss", "loss", "natural | adversarial | trades | tradeoff");
  bind_flag(t, train.c, "--alpha", "alpha", "trade-off weight of the adversarial term");
  bind_flag(t, train.c, "--beta", "beta", "trade-off weight of the boundary term");
  bind_flag(t, train.c, "--quant", "quant", "none | binary | ternary | four_bit");
  bind_flag(t, train.c, "--dataset", "dataset", "mnist | blobs | moons");
  bind_flag(t, train.c, "--data-dir", "data_dir", "directory holding IDX files");
  t->add_option("--resume", train.resume, "continue from a checkpoint")->check(CLI::ExistingFile);
  t->add_option("--checkpoint-every", train.checkpoint_every, "also checkpoint every k epochs");
  t->add_flag("!--no-final-eval", train.final_eval, "skip the full test-set evaluation");
  t->add_flag("--cw", train.cw, "include C&W in the final evaluation");

  AttackArgs attack;
  auto* at = app.add_subcommand("attack", "attack a checkpoint on the test set");
  add_common(at, attack.c);
  at->add_option("--checkpoint", attack.checkpoint)->required()->check(CLI::ExistingFile);
  at->add_option("--method", attack.method)->check(CLI::IsMember({"fgsm", "ifgsm", "cw", "pgd"}))->capture_default_str();
  bind_flag(at, attack.c, "--eps", "eps", "l-infinity radius");
  bind_flag(at, attack.c, "--alpha", "attack_alpha", "step size");
  bind_flag(at, attack.c, "--iters", "iters", "iterations");
  bind_flag(at, attack.c, "--cw-lr", "cw_lr", "C&W learning rate");
  at->add_option("--limit", attack.limit, "attack only the first n test samples");

  Common analyze_c;
  std::string analyze_ck;
  auto* an = app.add_subcommand("analyze", "sparsity report and bound trace of a checkpoint");
  add_common(an, analyze_c);
  an->add_option("--checkpoint", analyze_ck)->required()->check(CLI::ExistingFile);

  Common prune_c;
  std::string prune_ck, prune_out;
  auto* pr = app.add_subcommand("prune", "remove zero channels and write a new checkpoint");
  add_common(pr, prune_c);
  pr->add_option("--checkpoint", prune_ck)->required()->check(CLI::ExistingFile);
  pr->add_option("--output", prune_out, "pruned checkpoint path (default: <out-dir>/pruned.rqck)");

  VerifyArgs verify;
  auto* ve = app.add_subcommand("verify", "randomized check of the agreement vs label risk inequalities");
  add_common(ve, verify.c);
  ve->add_option("--prop", verify.prop)->check(CLI::IsMember({1, 2}))->required();
  ve->add_option("--trials", verify.trials)->capture_default_str();
  ve->add_option("--loss", verify.losses, "surrogate losses for prop 2")->check(
      CLI::IsMember({"hinge", "sigmoid", "logistic"}));

  Common data_c;
  auto* da = app.add_subcommand("data", "load or generate a dataset and summarize it");
  add_common(da, data_c);
  bind_flag(da, data_c, "--dataset", "dataset", "mnist | blobs | moons");
  bind_flag(da, data_c, "--data-dir", "data_dir", "directory holding IDX files");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*t) return cmd_train(train);
    if (*at) return cmd_attack(attack);
    if (*an) return cmd_analyze(analyze_c, analyze_ck);
    if (*pr) return cmd_prune(prune_c, prune_ck, prune_out);
    if (*ve) return cmd_verify(verify);
    if (*da) return cmd_data(data_c);
  } catch (const CLI::Error& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
