#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dgl/sync_dgl.hpp"
#include "dgl/vq_codec.hpp"

namespace dgl {

/// Module-selection probabilities of the asynchronous loop.
struct DelayModel {
  std::vector<double> pmf;
  std::optional<std::size_t> slow_module;  // 0-based
  double slowdown = 1.0;

  std::size_t modules() const { return pmf.size(); }
  /// Throws unless every p(j) > 0 and the pmf sums to 1 within 1e-9.
  void validate() const;
};

/// p(j*) = 1 / (S (J - 1) + 1), the rest share the remainder equally.
DelayModel pmf_from_slowdown(std::size_t modules, std::size_t slow_module, double slowdown);
/// S = (1 / (J - 1)) (1 / p(j) - 1).
double slowdown_from_pmf(std::span<const double> pmf, std::size_t module);
DelayModel uniform_delay(std::size_t modules);
DelayModel explicit_delay(std::vector<double> pmf);

/// Inverse-CDF draws on the portable uniform generator; one draw per call.
class ModuleSampler {
 public:
  ModuleSampler(const DelayModel& delay, std::uint64_t seed);
  std::size_t next();

 private:
  std::vector<double> cdf_;
  Rng rng_;
};

std::vector<std::uint32_t> sample_schedule(const DelayModel& delay, std::size_t draws, std::uint64_t seed);

enum class TickOutcome : std::uint8_t { Updated, Forwarded, Starved };

struct ScheduleTrace {
  std::size_t modules = 0;
  std::vector<std::uint32_t> selected;  // module chosen at each tick
  std::vector<TickOutcome> outcome;
  std::vector<std::uint64_t> staleness;  // newest seq minus the read entry's seq (0 for module 1 or starved)
};

struct ScheduleReport {
  std::uint64_t ticks = 0;
  std::vector<std::uint64_t> selections;
  std::vector<std::uint64_t> updates;
  std::vector<std::uint64_t> forwards;
  std::vector<std::uint64_t> starvations;
  std::map<std::uint64_t, std::uint64_t> staleness_histogram;  // only non-starved reads by modules > 1
};

ScheduleReport schedule_report(const ScheduleTrace& trace);

struct QuantizerOptions {
  std::size_t atoms = 256;       // C
  std::size_t groups = 32;       // k, clamped to each link's channel count
  SyncPolicy sync = SyncPolicy::every(1);
  VqOptions vq;
  bool ema_when_frozen = false;
};

struct AsyncOptions {
  std::size_t buffer_capacity = 2;  // batches
  std::uint64_t starvation_warning = 1000;
  std::optional<QuantizerOptions> quantizer;  // set for the quantized loop
};

/// Per-link quantities of the quantized loop.
struct LinkAccounting {
  std::size_t groups = 0;  // effective k
  std::uint64_t forwarded = 0;
  std::uint64_t syncs = 0;
  double bits_sent = 0.0;
  double batch_bits = 0.0;  // per forwarded batch
  double bandwidth_compression = 0.0;
  std::uint64_t buffer_bytes = 0;
  double buffer_compression = 0.0;  // at the buffer's capacity in samples
};

template <typename T>
struct AsyncResult {
  TrainResult<T> train;
  ScheduleTrace trace;
  std::vector<LinkAccounting> links;  // J - 1 entries
};

/// Buffer-mediated loop: each tick draws one module from the pmf; module 1
/// reads the stream cyclically, module j > 1 samples buffer j - 1 (a miss is a
/// counted, skipped tick). Modules below budget update and write; modules at
/// budget only forward. Ends when every module has spent its budget of
/// epochs x batches-per-epoch updates. With `quantizer` set, buffers carry
/// codebook indices and readers decode with their own, possibly stale, copy.
template <typename T>
AsyncResult<T> run_async(const Dataset& train, const Dataset& test, TrainState<T>& state, const DelayModel& delay,
                         const TrainOptions& opt, const AsyncOptions& async);

/// Free-running variant: one thread per module, raw buffers only. Budgets are
/// honoured but the interleaving, and therefore the trajectory, is not reproducible.
template <typename T>
TrainResult<T> run_async_threaded(const Dataset& train, const Dataset& test, TrainState<T>& state,
                                  const TrainOptions& opt, std::size_t buffer_capacity);

}  // namespace dgl
