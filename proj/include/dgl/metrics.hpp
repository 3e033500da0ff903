#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace dgl {

/// One row per (module, evaluation point). Unmeasured values are NaN and
/// print as "nan".
struct MetricRecord {
  std::uint64_t step = 0;  // global scheduler ticks (batches in synchronous modes)
  std::size_t module_id = 0;  // 1-based
  double epoch_equivalent = 0.0;  // this module's updates / batches per epoch
  double train_loss = 0.0;
  double train_acc = 0.0;
  double test_acc = 0.0;
  double grad_norm = 0.0;  // root of the mean squared local gradient norm over the window
  double drift = 0.0;
  double bits_sent = 0.0;  // cumulative bits this module has forwarded
  std::uint64_t buffer_bytes = 0;
  std::uint64_t starvation_count = 0;

  bool operator==(const MetricRecord&) const = default;
};

inline constexpr const char* kMetricsVersionLine = "# dgl-metrics v1";

/// Versioned CSV: the version line, a header row, then one line per record.
std::string metrics_csv(const std::vector<MetricRecord>& records);
void write_metrics_csv(const std::string& path, const std::vector<MetricRecord>& records);
std::vector<MetricRecord> parse_metrics_csv(const std::string& text);

/// Shortest round-tripping text for a double ("nan", "inf" for non-finite).
std::string format_number(double v);

}  // namespace dgl
