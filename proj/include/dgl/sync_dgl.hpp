#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "dgl/data.hpp"
#include "dgl/diagnostics.hpp"
#include "dgl/greedy_net.hpp"
#include "dgl/metrics.hpp"

namespace dgl {

struct TrainOptions {
  SgdOptions sgd;  // sgd.lr is the base rate of the step-decay schedule
  double decay_factor = 0.2;
  int decay_period = 15;
  std::size_t epochs = 50;  // per-module budget, counted in that module's own updates
  std::size_t batch_size = 128;
  std::size_t eval_every = 1;  // epochs between test evaluations; 0 = final only
  bool track_drift = false;    // measure module-input drift every half epoch
  std::size_t drift_probe = 256;
  std::uint64_t seed = 1;  // data order; module initialization comes from the partition seed
  std::size_t channel_capacity = 2;  // pipelined mode
};

template <typename T>
struct TrainState {
  TrainState(const NetworkSpec& spec, std::uint64_t init_seed, const TrainOptions& opt);

  Partition<T> partition;
  LrSchedule schedule;
  SgdOptions sgd;
  std::vector<std::uint64_t> updates;  // t_j

  /// Optimizer settings for module j's next update, from its own epoch count.
  SgdOptions step_options(std::size_t j, std::size_t batches_per_epoch) const;
};

template <typename T>
struct TrainHooks {
  /// Called before module j performs update number t (1-based). May sleep or throw.
  std::function<void(std::size_t module, std::uint64_t t)> before_update;
  /// Called after module j performs update number t.
  std::function<void(std::size_t module, std::uint64_t t, GreedyModule<T>& m)> after_update;
};

template <typename T>
struct TrainResult {
  std::vector<MetricRecord> records;
  std::vector<std::uint64_t> updates;
  std::vector<double> test_acc;                    // per module, at the end of training
  std::vector<std::vector<double>> epoch_loss;     // [module][epoch] mean training loss
  std::vector<std::vector<double>> epoch_grad_sq;  // [module][epoch] mean squared local gradient norm
  std::vector<std::vector<double>> epoch_lr;       // [module][epoch]
  std::vector<std::vector<double>> drift;          // [module][window]; empty unless tracked
  std::vector<std::string> warnings;

  double final_accuracy() const { return test_acc.empty() ? 0.0 : test_acc.back(); }
};

/// Maps module j's output to the next module's input (identity when empty).
template <typename T>
using Link = std::function<Tensor<T>(std::size_t j, const Tensor<T>& x)>;

/// Test accuracy of each module's head on `data`, all modules in evaluation mode.
template <typename T>
std::vector<double> evaluate_modules(Partition<T>& p, const Dataset& data, const Link<T>& link = {},
                                     std::size_t chunk = 256);

/// Per batch, modules 1..J update in order from their own local losses.
template <typename T>
TrainResult<T> train_sync(const Dataset& train, const Dataset& test, TrainState<T>& state, const TrainOptions& opt,
                          const TrainHooks<T>& hooks = {});

/// Module j trains for the whole budget with modules < j frozen (evaluation mode)
/// before module j+1 starts. Every module sees the same batch order.
template <typename T>
TrainResult<T> train_sequential(const Dataset& train, const Dataset& test, TrainState<T>& state,
                                const TrainOptions& opt, const TrainHooks<T>& hooks = {});

/// One worker thread per module joined by bounded FIFO channels. Same arithmetic
/// as train_sync; test accuracy is evaluated once, after training. A throwing
/// worker aborts the run with std::runtime_error naming the module.
template <typename T>
TrainResult<T> train_pipelined(const Dataset& train, const Dataset& test, TrainState<T>& state,
                               const TrainOptions& opt, const TrainHooks<T>& hooks = {});

/// Running statistics of one module between records.
struct ModuleWindow {
  double loss_sum = 0.0;
  double grad_sq_sum = 0.0;
  std::size_t correct = 0;
  std::size_t samples = 0;
  std::size_t steps = 0;

  void add(double loss, std::size_t n_correct, std::size_t batch, double grad_sq) {
    loss_sum += loss;
    grad_sq_sum += grad_sq;
    correct += n_correct;
    samples += batch;
    ++steps;
  }
  double mean_loss() const;
  double accuracy() const;
  double mean_grad_sq() const;
};

/// Compares each module's input features on a fixed probe batch between calls.
template <typename T>
class DriftTracker {
 public:
  DriftTracker(const Dataset& data, std::size_t probe, std::uint64_t seed);
  /// Estimate for module j versus the previous call for j; NaN on the first call.
  double update(Partition<T>& p, std::size_t j, const Link<T>& link = {});

 private:
  Tensor<T> probe_;
  std::uint64_t seed_;
  std::vector<std::optional<Tensor<T>>> previous_;
};

}  // namespace dgl
