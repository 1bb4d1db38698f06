#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "robustq/data.hpp"
#include "robustq/train.hpp"

namespace robustq {

// ---- configuration: UTF-8 key=value lines, '#' comments ----

using ConfigMap = std::map<std::string, std::string>;

ConfigMap default_config();
ConfigMap parse_config_text(const std::string& text, const std::string& origin = "config");
ConfigMap load_config_file(const std::string& path);
/// Later maps win; unknown keys are rejected.
ConfigMap merge_config(const ConfigMap& base, const ConfigMap& overrides);
std::string render_config(const ConfigMap& cfg);

NetworkSpec network_spec_from(const ConfigMap& cfg, const Dataset& sample);
TrainConfig train_config_from(const ConfigMap& cfg);
AttackConfig attack_config_from(const ConfigMap& cfg);

struct DataSplit {
  Dataset train;
  Dataset test;
};

/// mnist (IDX files under data_dir), or a synthetic set split 80/20.
DataSplit load_data(const ConfigMap& cfg);

// ---- checkpoints ----

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  TrainState state;
  std::string config_text;  // resolved configuration that produced the state
  std::string config_digest;
};

void save_checkpoint(const std::string& path, const TrainState& state, const std::string& config_text);
Checkpoint load_checkpoint(const std::string& path);

// ---- provenance ----

std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::string& path);

struct Manifest {
  std::string command;
  std::uint64_t seed = 0;
  ConfigMap config;
  std::vector<std::string> artifacts;  // paths; hashed when written
  std::map<std::string, std::string> extra;
};

void write_manifest(const std::string& path, const Manifest& m);

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows);

}  // namespace robustq
