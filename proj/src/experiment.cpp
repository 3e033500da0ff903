#include "dgl/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace dgl {

NetworkSpec network_for(const ExperimentConfig& config, const Dataset& data) {
  const Shape& s = data.sample;
  if (s.height != s.width) throw ConfigError("images must be square, got " + s.str());
  return build_reference_net(config.width, config.modules, data.classes, config.aux, s.channels, s.height);
}

TrainOptions train_options(const ExperimentConfig& c) {
  TrainOptions o;
  o.sgd = {c.lr, c.momentum, c.weight_decay};
  o.decay_factor = c.decay_factor;
  o.decay_period = c.decay_period;
  o.epochs = c.epochs;
  o.batch_size = c.batch_size;
  o.eval_every = c.eval_every;
  o.track_drift = c.track_drift;
  o.seed = derive_seed(c.seed, "data-order");
  o.channel_capacity = c.channel_capacity;
  return o;
}

namespace {

DelayModel delay_for(const ExperimentConfig& c) {
  if (!c.pmf.empty()) {
    auto d = explicit_delay(c.pmf);
    return d;
  }
  if (c.slow_module == 0 || c.modules < 2) return uniform_delay(c.modules);
  return pmf_from_slowdown(c.modules, c.slow_module - 1, c.slowdown);
}

template <typename T>
RunSummary run_typed(const ExperimentConfig& config, const DataSplit& data) {
  const NetworkSpec spec = network_for(config, data.train);
  const TrainOptions opt = train_options(config);
  TrainState<T> state(spec, derive_seed(config.seed, "init"), opt);
  RunSummary s;
  s.config = config;
  auto take = [&](TrainResult<T>&& r) {
    s.records = std::move(r.records);
    s.test_acc = std::move(r.test_acc);
    s.updates = std::move(r.updates);
    s.warnings.insert(s.warnings.end(), r.warnings.begin(), r.warnings.end());
  };
  switch (config.mode) {
    case RunMode::Sync:
      take(train_sync(data.train, data.test, state, opt));
      break;
    case RunMode::Sequential:
      take(train_sequential(data.train, data.test, state, opt));
      break;
    case RunMode::Pipelined:
      take(train_pipelined(data.train, data.test, state, opt));
      break;
    case RunMode::Async:
    case RunMode::AsyncQuantized: {
      if (config.buffer_in_samples)
        s.warnings.push_back("buffer capacity of " + std::to_string(config.buffer_capacity) + " samples converted to " +
                             std::to_string(config.buffer_batches()) + " batches of " +
                             std::to_string(config.batch_size));
      if (config.threaded) {
        take(run_async_threaded(data.train, data.test, state, opt, config.buffer_batches()));
        break;
      }
      AsyncOptions ao;
      ao.buffer_capacity = config.buffer_batches();
      ao.starvation_warning = config.starvation_warning;
      if (config.mode == RunMode::AsyncQuantized) {
        QuantizerOptions q;
        q.atoms = config.atoms;
        q.groups = config.groups;
        q.sync = config.sync_rate >= 0.0 ? SyncPolicy::fraction(config.sync_rate) : SyncPolicy::every(config.sync_period);
        q.vq = {config.ema_decay, config.ema_epsilon, config.dead_after};
        q.ema_when_frozen = config.ema_when_frozen;
        ao.quantizer = q;
        for (std::size_t j = 0; j + 1 < spec.size(); ++j)
          if (config.groups > spec.modules[j].output.channels)
            s.warnings.push_back("module " + std::to_string(j + 1) + ": " + std::to_string(config.groups) +
                                 " codebook groups exceed its " + std::to_string(spec.modules[j].output.channels) +
                                 " channels; using one group per channel");
      }
      auto r = run_async(data.train, data.test, state, delay_for(config), opt, ao);
      s.links = r.links;
      s.ticks = r.trace.selected.size();
      s.starvations = schedule_report(r.trace).starvations;
      take(std::move(r.train));
      break;
    }
  }
  for (const auto& l : s.links) s.total_bits_sent += l.bits_sent;
  if (s.links.empty())
    for (const auto& rec : s.records)
      if (rec.epoch_equivalent == static_cast<double>(config.epochs)) s.total_bits_sent += rec.bits_sent;
  return s;
}

}  // namespace

RunSummary run_experiment(const ExperimentConfig& config, const DataSplit& data) {
  config.validate();
  if (config.precision == Precision::Float64) return run_typed<double>(config, data);
  return run_typed<float>(config, data);
}

RunSummary run_experiment(const ExperimentConfig& config) {
  config.validate();
  return run_experiment(config, load_dataset(config.dataset));
}

std::string summary_json(const RunSummary& s) {
  using nlohmann::ordered_json;
  auto num = [](double v) { return std::isfinite(v) ? ordered_json(v) : ordered_json(nullptr); };
  ordered_json j;
  j["mode"] = to_string(s.config.mode);
  j["seed"] = s.config.seed;
  j["final_test_accuracy"] = num(s.final_accuracy());
  auto acc = ordered_json::array();
  for (double a : s.test_acc) acc.push_back(num(a));
  j["module_test_accuracy"] = acc;
  j["updates"] = s.updates;
  j["total_bits_sent"] = s.total_bits_sent;
  if (!s.links.empty()) {
    auto links = ordered_json::array();
    for (std::size_t i = 0; i < s.links.size(); ++i) {
      const auto& l = s.links[i];
      links.push_back({{"module", i + 1},
                       {"groups", l.groups},
                       {"forwarded_batches", l.forwarded},
                       {"codebook_syncs", l.syncs},
                       {"bits_per_batch", l.batch_bits},
                       {"bits_sent", l.bits_sent},
                       {"bandwidth_compression", l.bandwidth_compression},
                       {"buffer_bytes", l.buffer_bytes},
                       {"buffer_compression", l.buffer_compression}});
    }
    j["links"] = links;
    j["ticks"] = s.ticks;
    j["starvations"] = s.starvations;
  }
  j["warnings"] = s.warnings;
  return j.dump(2) + "\n";
}

void write_run_artifacts(const RunSummary& s, const std::string& dir) {
  std::filesystem::create_directories(dir);
  const std::filesystem::path d(dir);
  write_metrics_csv((d / "metrics.csv").string(), s.records);
  std::ofstream((d / "summary.json").string(), std::ios::binary) << summary_json(s);
  std::ofstream((d / "config.ini").string(), std::ios::binary) << serialize_config(s.config);
}

std::vector<CompressionRow> compress_report(const NetworkSpec& net, std::uint64_t batch, std::uint64_t groups,
                                            double alpha, std::span<const std::uint64_t> atoms,
                                            std::span<const std::uint64_t> samples) {
  std::vector<CompressionRow> rows;
  for (std::size_t j = 0; j + 1 < net.size(); ++j) {
    const auto& m = net.modules[j];
    for (auto C : atoms)
      for (auto M : samples) {
        CompressionRow r;
        r.module = j + 1;
        r.N = m.output.height;
        r.K = m.output.channels;
        r.K_prev = m.input.channels;
        r.C = C;
        r.M = M;
        r.B = batch;
        r.k = std::min<std::uint64_t>(groups, r.K);
        r.alpha = alpha;
        r.batch_bits = batch_bits(r.B, r.N, r.K_prev, r.K, C, r.k, alpha);
        r.bandwidth = bandwidth_compression(r.B, r.N, r.K_prev, r.K, C, r.k, alpha);
        r.buffer_bits = buffer_bits(M, r.N, r.K, C, r.k);
        r.buffer = buffer_compression(M, r.N, r.K, C, r.k);
        rows.push_back(r);
      }
  }
  return rows;
}

std::string compression_csv(const std::vector<CompressionRow>& rows) {
  std::ostringstream out;
  out << "module,N,K,K_prev,C,M,B,k,alpha,batch_bits,bandwidth_compression,buffer_bits,buffer_compression\n";
  for (const auto& r : rows)
    out << r.module << ',' << r.N << ',' << r.K << ',' << r.K_prev << ',' << r.C << ',' << r.M << ',' << r.B << ','
        << r.k << ',' << format_number(r.alpha) << ',' << format_number(r.batch_bits) << ','
        << format_number(r.bandwidth) << ',' << r.buffer_bits << ',' << format_number(r.buffer) << '\n';
  return out.str();
}

std::string compression_table(const std::vector<CompressionRow>& rows) {
  std::ostringstream out;
  out << std::left << std::setw(7) << "module" << std::right << std::setw(5) << "N" << std::setw(6) << "K"
      << std::setw(7) << "K_prev" << std::setw(8) << "C" << std::setw(8) << "M" << std::setw(15) << "batch_bits"
      << std::setw(10) << "C_b" << std::setw(10) << "C_n" << '\n';
  for (const auto& r : rows)
    out << std::left << std::setw(7) << r.module << std::right << std::setw(5) << r.N << std::setw(6) << r.K
        << std::setw(7) << r.K_prev << std::setw(8) << r.C << std::setw(8) << r.M << std::setw(15) << std::fixed
        << std::setprecision(0) << r.batch_bits << std::setw(10) << std::setprecision(2) << r.bandwidth
        << std::setw(10) << r.buffer << '\n';
  return out.str();
}

std::vector<GradCheckReport> network_gradient_check(const NetworkSpec& net, const Tensor<double>& x,
                                           std::span<const int> labels, std::uint64_t seed,
                                           const GradCheckOptions& opt) {
  Partition<double> part(net, seed);
  // Zero-initialized biases put ReLU inputs exactly on the kink wherever an
  // upstream channel is dead; nudging every parameter moves the check to a
  // generic point.
  Rng jitter(derive_seed(seed, "gradcheck-jitter"));
  for (std::size_t j = 0; j < part.size(); ++j)
    for (auto* p : part[j].parameters())
      for (auto& v : p->value.values()) v += 0.05 * normal(jitter);
  std::vector<GradCheckReport> reports;
  Tensor<double> in = x;
  for (std::size_t j = 0; j < part.size(); ++j) {
    auto& m = part[j];
    const std::function<double(bool)> loss = [&](bool backward) {
      if (backward) return m.local_loss(in, labels).loss;
      return cross_entropy(m.logits(m.forward(in, Mode::Train), Mode::Train), labels).loss;
    };
    const std::function<std::uint64_t()> pattern = [&] { return splitmix64(m.body().pattern()) ^ m.head().pattern(); };
    reports.push_back(gradient_check_report<double>(m.parameters(), loss, opt, pattern));
    in = m.forward(in, Mode::Train);
  }
  return reports;
}

SweepPoint slowdown_sweep(const ExperimentConfig& base, double slowdown, std::span<const std::uint64_t> seeds,
                          const DataSplit& data) {
  SweepPoint p;
  p.slowdown = slowdown;
  for (auto seed : seeds) {
    const std::size_t positions = slowdown == 1.0 ? 1 : base.modules;
    for (std::size_t j = 0; j < positions; ++j) {
      ExperimentConfig c = base;
      c.mode = RunMode::Async;
      c.seed = seed;
      c.pmf.clear();
      c.slow_module = slowdown == 1.0 ? 0 : j + 1;
      c.slowdown = slowdown;
      p.accuracies.push_back(run_experiment(c, data).final_accuracy());
    }
  }
  if (!p.accuracies.empty()) {
    p.mean = std::accumulate(p.accuracies.begin(), p.accuracies.end(), 0.0) / static_cast<double>(p.accuracies.size());
    p.min = *std::min_element(p.accuracies.begin(), p.accuracies.end());
    p.max = *std::max_element(p.accuracies.begin(), p.accuracies.end());
  }
  return p;
}

}  // namespace dgl
