#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dgl/async_scheduler.hpp"
#include "dgl/config.hpp"
#include "dgl/gradcheck.hpp"

namespace dgl {

struct RunSummary {
  ExperimentConfig config;
  std::vector<MetricRecord> records;
  std::vector<double> test_acc;  // per module
  std::vector<std::uint64_t> updates;
  std::vector<LinkAccounting> links;  // async modes only
  double total_bits_sent = 0.0;
  std::uint64_t ticks = 0;  // async modes only
  std::vector<std::uint64_t> starvations;
  std::vector<std::string> warnings;

  double final_accuracy() const { return test_acc.empty() ? 0.0 : test_acc.back(); }
};

/// The configured reference network sized for `data`'s images and classes.
NetworkSpec network_for(const ExperimentConfig& config, const Dataset& data);

/// Options the trainers see, with data-order seed derived from config.seed.
TrainOptions train_options(const ExperimentConfig& config);

/// Runs the configured mode. Deterministic for every mode except threaded async.
RunSummary run_experiment(const ExperimentConfig& config);
RunSummary run_experiment(const ExperimentConfig& config, const DataSplit& data);

/// summary.json content; excludes anything time-dependent.
std::string summary_json(const RunSummary& summary);

/// Writes metrics.csv, summary.json and the resolved config.ini into `dir`.
void write_run_artifacts(const RunSummary& summary, const std::string& dir);

struct CompressionRow {
  std::size_t module = 0;  // 1-based index of the sending module
  std::uint64_t N = 0, K = 0, K_prev = 0, C = 0, M = 0, B = 0, k = 0;
  double alpha = 0.0;
  double batch_bits = 0.0;
  double bandwidth = 0.0;  // C_b
  std::uint64_t buffer_bits = 0;
  double buffer = 0.0;  // C_n
};

/// Bandwidth and buffer compression for every sending module of `net` over the
/// cross product of codebook sizes and buffer sizes (in samples).
std::vector<CompressionRow> compress_report(const NetworkSpec& net, std::uint64_t batch, std::uint64_t groups,
                                            double alpha, std::span<const std::uint64_t> atoms,
                                            std::span<const std::uint64_t> samples);
std::string compression_csv(const std::vector<CompressionRow>& rows);
std::string compression_table(const std::vector<CompressionRow>& rows);

/// Each module's local-loss gradient against central differences, in 64-bit,
/// on the given batch, at slightly jittered parameters.
std::vector<GradCheckReport> network_gradient_check(const NetworkSpec& net, const Tensor<double>& x,
                                           std::span<const int> labels, std::uint64_t seed,
                                           const GradCheckOptions& opt = {});

struct SweepPoint {
  double slowdown = 1.0;
  std::vector<double> accuracies;  // one per (seed, slow position)
  double mean = 0.0;
  double min = 0.0;
  double max = 0.0;
};

/// Async runs at slowdown S for every seed and every slow position (one run
/// per seed when S == 1, where the position is irrelevant).
SweepPoint slowdown_sweep(const ExperimentConfig& base, double slowdown, std::span<const std::uint64_t> seeds,
                          const DataSplit& data);

}  // namespace dgl
