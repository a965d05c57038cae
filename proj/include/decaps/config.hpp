#pragma once

#include <functional>
#include <string>
#include <vector>

#include "decaps/capsnet.hpp"
#include "decaps/training.hpp"

namespace decaps {

// Flat `section.key = value` run configuration. Every field has a default
// matching the reference hyperparameters; the echo is canonical (one line per
// key, fixed order) and parsing it back reproduces the config exactly.
struct RunConfig {
  // model
  int model_heads = 4;
  int model_d_l = 64;
  int model_d_out = 16;
  int model_n_iter = 3;
  bool model_coord_add = true;
  std::string model_routing = "idr";  // idr | baseline
  int model_input = 64;
  int model_classes = 3;
  // peekaboo
  double peekaboo_theta_c = 0.5;
  double peekaboo_theta_d = 0.3;
  bool peekaboo_crop = true;
  bool peekaboo_drop = true;
  bool peekaboo_distill = true;
  std::string peekaboo_head_select = "random";  // random | average
  // loss
  double loss_m_plus = 0.9;
  double loss_m_minus = 0.1;
  double loss_lambda = 0.5;
  double loss_har_weight = 1.0;
  double loss_gamma = 1e-4;
  // optim
  double optim_beta1 = 0.5;
  double optim_beta2 = 0.999;
  double optim_lr = 1e-4;
  int optim_epochs = 12;
  int optim_batch = 8;
  int optim_threads = 0;  // 0 = hardware concurrency
  // data / run
  std::string data_manifest;
  uint64_t seed = 1;
  std::string out_dir = "runs/default";

  ModelConfig model_config() const;
  PeekabooConfig peekaboo_config() const;
  LossConfig loss_config() const;
  void validate() const;
};

struct ConfigKey {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

const std::vector<ConfigKey>& config_keys();

// Parses `key = value` lines ('#' comments, blank lines allowed). Unknown
// keys are rejected with the offending name.
RunConfig parse_config_text(const std::string& text);
RunConfig load_config_file(const std::string& path);
void apply_config_value(RunConfig& cfg, const std::string& key, const std::string& value);
std::string config_echo(const RunConfig& cfg);

}  // namespace decaps
