#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "dgl/data.hpp"
#include "dgl/greedy_net.hpp"

namespace dgl {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class RunMode { Sync, Sequential, Pipelined, Async, AsyncQuantized };

std::string to_string(RunMode mode);
RunMode parse_run_mode(const std::string& text);

enum class Precision { Float32, Float64 };

/// Every experiment knob. Optimizer defaults follow the CIFAR protocol (lr 0.1,
/// momentum 0.9, weight decay 5e-4, x0.2 every 15 epochs, 50 epochs, batch 128);
/// architecture and data default to the desk-scale analogue (width 16, 4
/// modules, synthetic Gaussians).
struct ExperimentConfig {
  // [run]
  RunMode mode = RunMode::Sync;
  std::uint64_t seed = 1;
  std::size_t eval_every = 1;
  bool track_drift = false;
  Precision precision = Precision::Float32;

  // [architecture]
  std::size_t width = 16;
  std::size_t modules = 4;
  AuxKind aux = AuxKind::MlpSr;
  std::size_t head_width = 0;  // 0 = 4 x first module width

  // [optimizer]
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double decay_factor = 0.2;
  int decay_period = 15;
  std::size_t epochs = 50;
  std::size_t batch_size = 128;

  // [delay]  slow_module is 1-based; 0 means no slow module
  std::size_t slow_module = 0;
  double slowdown = 1.0;
  std::vector<double> pmf;  // explicit pmf overrides slow_module/slowdown

  // [buffer]
  std::size_t buffer_capacity = 2;
  bool buffer_in_samples = false;  // capacity given in samples, converted to ceil(M / batch)

  // [quantizer]
  std::size_t atoms = 256;
  std::size_t groups = 32;
  double ema_decay = 0.99;
  double ema_epsilon = 1e-5;
  std::uint64_t dead_after = 1024;
  std::uint64_t sync_period = 1;
  double sync_rate = -1.0;  // in [0, 1] selects the rate policy instead of the period
  bool ema_when_frozen = false;

  // [async]
  bool threaded = false;
  std::uint64_t starvation_warning = 1000;

  // [pipeline]
  std::size_t channel_capacity = 2;

  // [dataset]
  DatasetSpec dataset;

  bool operator==(const ExperimentConfig&) const = default;

  /// Capacity in batches after unit conversion.
  std::size_t buffer_batches() const;
  /// Throws ConfigError on inconsistent values.
  void validate() const;
};

/// Line-oriented format: `[section]` headers, `key = value` lines, `#` or `;`
/// comments, blank lines ignored. Unknown sections or keys are errors.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::string& path);
/// Canonical text with every key, parseable by parse_config.
std::string serialize_config(const ExperimentConfig& config);

}  // namespace dgl
