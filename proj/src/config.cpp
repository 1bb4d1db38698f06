#include <charconv>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "robustq/io.hpp"

namespace robustq {

ConfigMap default_config() {
  return {
      {"dataset", "mnist"},
      {"data_dir", "data/mnist10k"},
      {"train_limit", "0"},
      {"test_limit", "0"},
      {"synthetic_n", "400"},
      {"synthetic_noise", "0.1"},
      {"widths", "8,16,32"},
      {"blocks", "1,1,1"},
      {"stem_stride", "2"},
      {"ensemble", "1"},
      {"noise_sigma", "0.1"},
      {"epochs", "20"},
      {"batch_size", "64"},
      {"lr", "0.1"},
      {"milestones", "10,15"},
      {"lr_decay", "0.1"},
      {"momentum", "0.9"},
      {"weight_decay", "0.0005"},
      {"seed", "1"},
      {"quant", "binary"},
      {"ternary_threshold", "false"},
      {"rho", "1.02"},
      {"cutoff", "auto"},
      {"exempt_first", "false"},
      {"exempt_last", "false"},
      {"loss", "tradeoff"},
      {"alpha", "1"},
      {"beta", "1"},
      {"pgd_eps", "0.031"},
      {"pgd_step", "0.007"},
      {"pgd_iters", "10"},
      {"trades_soft_ce", "false"},
      {"eps", "0.031"},
      {"attack_alpha", "0.00392156862745098"},
      {"iters", "20"},
      {"cw_lr", "0.0006"},
      {"cw_iters", "50"},
      {"kappa", "0"},
      {"final_clip_only", "false"},
      {"eval_samples", "500"},
      {"eval_attacks", "true"},
  };
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

const std::string& get(const ConfigMap& cfg, const std::string& key) {
  auto it = cfg.find(key);
  if (it == cfg.end()) throw ContractError("config: missing key '" + key + "'");
  return it->second;
}

double get_double(const ConfigMap& cfg, const std::string& key) {
  const std::string& v = get(cfg, key);
  double out = 0.0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ContractError("config: '" + key + "' expects a number, got '" + v + "'");
  return out;
}

std::size_t parse_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ContractError("config: '" + key + "' expects a non-negative integer, got '" + v + "'");
  return out;
}

std::size_t get_size(const ConfigMap& cfg, const std::string& key) { return parse_size(key, get(cfg, key)); }

bool get_bool(const ConfigMap& cfg, const std::string& key) {
  const std::string& v = get(cfg, key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ContractError("config: '" + key + "' expects true/false, got '" + v + "'");
}

std::vector<std::size_t> get_list(const ConfigMap& cfg, const std::string& key) {
  std::vector<std::size_t> out;
  std::stringstream ss(get(cfg, key));
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(parse_size(key, item));
  }
  return out;
}

std::string find_idx(const std::string& dir, const std::string& stem) {
  for (const char* suffix : {"", ".gz"}) {
    const std::string p = dir + "/" + stem + suffix;
    if (std::filesystem::exists(p)) return p;
  }
  throw FormatError("no " + stem + "[.gz] under " + dir);
}

}  // namespace

ConfigMap parse_config_text(const std::string& text, const std::string& origin) {
  ConfigMap out;
  std::stringstream ss(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ContractError(origin + ":" + std::to_string(lineno) + ": expected key=value");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ContractError(origin + ":" + std::to_string(lineno) + ": empty key");
    out[key] = trim(line.substr(eq + 1));
  }
  return out;
}

ConfigMap load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ContractError("cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path);
}

ConfigMap merge_config(const ConfigMap& base, const ConfigMap& overrides) {
  ConfigMap out = base;
  for (const auto& [k, v] : overrides) {
    if (!base.count(k)) throw ContractError("config: unknown key '" + k + "'");
    out[k] = v;
  }
  return out;
}

std::string render_config(const ConfigMap& cfg) {
  std::string out;
  for (const auto& [k, v] : cfg) out += k + "=" + v + "\n";
  return out;
}

NetworkSpec network_spec_from(const ConfigMap& cfg, const Dataset& sample) {
  if (sample.sample_shape.size() != 3) throw ContractError("network: dataset is not image shaped");
  NetworkSpec s;
  s.in_channels = sample.sample_shape[0];
  s.height = sample.sample_shape[1];
  s.width = sample.sample_shape[2];
  s.num_classes = sample.num_classes;
  s.widths = get_list(cfg, "widths");
  s.blocks = get_list(cfg, "blocks");
  s.stem_stride = get_size(cfg, "stem_stride");
  s.ensemble = get_size(cfg, "ensemble");
  s.noise_sigma = get_double(cfg, "noise_sigma");
  s.validate();
  return s;
}

AttackConfig attack_config_from(const ConfigMap& cfg) {
  AttackConfig a;
  a.eps = get_double(cfg, "eps");
  a.alpha = get_double(cfg, "attack_alpha");
  a.iters = get_size(cfg, "iters");
  a.cw_lr = get_double(cfg, "cw_lr");
  a.cw_iters = get_size(cfg, "cw_iters");
  a.kappa = get_double(cfg, "kappa");
  a.final_clip_only = get_bool(cfg, "final_clip_only");
  a.validate();
  return a;
}

TrainConfig train_config_from(const ConfigMap& cfg) {
  TrainConfig t;
  t.epochs = get_size(cfg, "epochs");
  t.batch_size = get_size(cfg, "batch_size");
  t.lr = get_double(cfg, "lr");
  t.milestones = get_list(cfg, "milestones");
  t.lr_decay = get_double(cfg, "lr_decay");
  t.momentum = get_double(cfg, "momentum");
  t.weight_decay = get_double(cfg, "weight_decay");
  t.seed = get_size(cfg, "seed");
  t.scheme.variant = parse_variant(get(cfg, "quant"));
  t.scheme.ternary_threshold = get_bool(cfg, "ternary_threshold");
  t.rho = get_double(cfg, "rho");
  if (get(cfg, "cutoff") != "auto") t.cutoff = get_size(cfg, "cutoff");
  t.exempt_first = get_bool(cfg, "exempt_first");
  t.exempt_last = get_bool(cfg, "exempt_last");
  t.loss.kind = parse_loss(get(cfg, "loss"));
  t.loss.alpha = get_double(cfg, "alpha");
  t.loss.beta = get_double(cfg, "beta");
  t.loss.pgd.eps = get_double(cfg, "pgd_eps");
  t.loss.pgd.step = get_double(cfg, "pgd_step");
  t.loss.pgd.iters = get_size(cfg, "pgd_iters");
  t.loss.trades_soft_ce = get_bool(cfg, "trades_soft_ce");
  t.eval_samples = get_size(cfg, "eval_samples");
  t.eval_attacks = get_bool(cfg, "eval_attacks");
  t.attack = attack_config_from(cfg);
  t.validate();
  return t;
}

DataSplit load_data(const ConfigMap& cfg) {
  const std::string kind = get(cfg, "dataset");
  DataSplit d;
  if (kind == "mnist" || kind == "fmnist" || kind == "idx") {
    const std::string dir = get(cfg, "data_dir");
    d.train = load_idx(find_idx(dir, "train-images-idx3-ubyte"), find_idx(dir, "train-labels-idx1-ubyte"), kind);
    d.test = load_idx(find_idx(dir, "t10k-images-idx3-ubyte"), find_idx(dir, "t10k-labels-idx1-ubyte"), kind);
  } else {
    const Dataset all = gen_synthetic(parse_synthetic(kind), get_size(cfg, "synthetic_n"),
                                      get_double(cfg, "synthetic_noise"), get_size(cfg, "seed"));
    auto [train, test] = split_dataset(all, all.size() * 4 / 5, get_size(cfg, "seed") + 1);
    d.train = std::move(train);
    d.test = std::move(test);
  }
  const std::size_t tl = get_size(cfg, "train_limit"), el = get_size(cfg, "test_limit");
  if (tl > 0 && tl < d.train.size()) d.train = d.train.slice(0, tl);
  if (el > 0 && el < d.test.size()) d.test = d.test.slice(0, el);
  d.train.validate();
  d.test.validate();
  return d;
}

}  // namespace robustq
