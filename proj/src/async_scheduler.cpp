#include "dgl/async_scheduler.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <thread>

#include "dgl/replay_buffer.hpp"

namespace dgl {

void DelayModel::validate() const {
  if (pmf.empty()) throw std::invalid_argument("delay model has no modules");
  double s = 0.0;
  for (std::size_t j = 0; j < pmf.size(); ++j) {
    if (!(pmf[j] > 0.0))
      throw std::invalid_argument("delay pmf entry for module " + std::to_string(j + 1) + " must be positive");
    s += pmf[j];
  }
  if (std::abs(s - 1.0) > 1e-9) throw std::invalid_argument("delay pmf sums to " + std::to_string(s) + ", not 1");
}

DelayModel pmf_from_slowdown(std::size_t modules, std::size_t slow_module, double slowdown) {
  if (modules < 2) throw std::invalid_argument("a slowdown needs at least two modules");
  if (slow_module >= modules)
    throw std::invalid_argument("slow module " + std::to_string(slow_module + 1) + " out of range");
  if (!(slowdown > 0.0)) throw std::invalid_argument("slowdown must be positive");
  const double others = static_cast<double>(modules - 1);
  DelayModel d;
  const double slow_p = 1.0 / (slowdown * others + 1.0);
  d.pmf.assign(modules, (1.0 - slow_p) / others);
  d.pmf[slow_module] = slow_p;
  d.slow_module = slow_module;
  d.slowdown = slowdown;
  return d;
}

double slowdown_from_pmf(std::span<const double> pmf, std::size_t module) {
  if (pmf.size() < 2) throw std::invalid_argument("a slowdown needs at least two modules");
  if (module >= pmf.size()) throw std::invalid_argument("module index out of range");
  return (1.0 / static_cast<double>(pmf.size() - 1)) * (1.0 / pmf[module] - 1.0);
}

DelayModel uniform_delay(std::size_t modules) {
  if (modules == 0) throw std::invalid_argument("delay model needs at least one module");
  DelayModel d;
  d.pmf.assign(modules, 1.0 / static_cast<double>(modules));
  return d;
}

DelayModel explicit_delay(std::vector<double> pmf) {
  DelayModel d;
  d.pmf = std::move(pmf);
  d.validate();
  return d;
}

ModuleSampler::ModuleSampler(const DelayModel& delay, std::uint64_t seed) : rng_(seed) {
  delay.validate();
  double acc = 0.0;
  for (double p : delay.pmf) {
    acc += p;
    cdf_.push_back(acc);
  }
  cdf_.back() = 1.0;
}

std::size_t ModuleSampler::next() {
  const double u = uniform01(rng_);
  return static_cast<std::size_t>(std::upper_bound(cdf_.begin(), cdf_.end(), u) - cdf_.begin());
}

std::vector<std::uint32_t> sample_schedule(const DelayModel& delay, std::size_t draws, std::uint64_t seed) {
  ModuleSampler s(delay, seed);
  std::vector<std::uint32_t> out(draws);
  for (auto& v : out) v = static_cast<std::uint32_t>(s.next());
  return out;
}

ScheduleReport schedule_report(const ScheduleTrace& trace) {
  ScheduleReport r;
  r.ticks = trace.selected.size();
  std::size_t J = trace.modules;
  for (auto j : trace.selected) J = std::max<std::size_t>(J, j + 1);
  r.selections.assign(J, 0);
  r.updates.assign(J, 0);
  r.forwards.assign(J, 0);
  r.starvations.assign(J, 0);
  for (std::size_t t = 0; t < trace.selected.size(); ++t) {
    const auto j = trace.selected[t];
    ++r.selections[j];
    const auto o = t < trace.outcome.size() ? trace.outcome[t] : TickOutcome::Updated;
    if (o == TickOutcome::Updated) ++r.updates[j];
    if (o == TickOutcome::Forwarded) ++r.forwards[j];
    if (o == TickOutcome::Starved) ++r.starvations[j];
    if (o != TickOutcome::Starved && j > 0 && t < trace.staleness.size()) ++r.staleness_histogram[trace.staleness[t]];
  }
  return r;
}

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

bool is_eval_epoch(const TrainOptions& opt, std::size_t e) {
  return e + 1 == opt.epochs || (opt.eval_every != 0 && (e + 1) % opt.eval_every == 0);
}

MetricRecord make_record(std::uint64_t step, std::size_t j, double epoch_eq, const ModuleWindow& w) {
  MetricRecord r;
  r.step = step;
  r.module_id = j + 1;
  r.epoch_equivalent = epoch_eq;
  r.train_loss = w.mean_loss();
  r.train_acc = w.accuracy();
  r.grad_norm = std::sqrt(w.mean_grad_sq());
  r.test_acc = kNaN;
  r.drift = kNaN;
  return r;
}

}  // namespace

template <typename T>
AsyncResult<T> run_async(const Dataset& train, const Dataset& test, TrainState<T>& state, const DelayModel& delay,
                         const TrainOptions& opt, const AsyncOptions& async) {
  auto& p = state.partition;
  const std::size_t J = p.size();
  if (delay.modules() != J)
    throw std::invalid_argument("delay model covers " + std::to_string(delay.modules()) + " modules, network has " +
                                std::to_string(J));
  BatchStream stream(train, opt.batch_size, opt.seed);
  const std::size_t bpe = stream.batches_per_epoch();
  const std::uint64_t budget = static_cast<std::uint64_t>(opt.epochs) * bpe;
  const auto& spec = p.spec();
  const bool quant = async.quantizer.has_value();

  std::vector<std::unique_ptr<ReplayBuffer<Tensor<T>>>> raw;
  std::vector<std::unique_ptr<ReplayBuffer<QuantizedBatch>>> coded;
  std::vector<Codebook> encoders, decoders;
  std::vector<Rng> codebook_rng;
  std::vector<std::uint64_t> reads(J, 0);
  AsyncResult<T> res;
  res.links.resize(J > 0 ? J - 1 : 0);
  for (std::size_t j = 0; j + 1 < J; ++j) {
    const auto& m = spec.modules[j];
    auto& link = res.links[j];
    if (quant) {
      const auto& qo = *async.quantizer;
      link.groups = std::min(qo.groups, m.output.channels);
      coded.push_back(std::make_unique<ReplayBuffer<QuantizedBatch>>(async.buffer_capacity));
      encoders.emplace_back(m.output.channels, link.groups, qo.atoms);
      decoders.emplace_back(m.output.channels, link.groups, qo.atoms);
      codebook_rng.emplace_back(derive_seed(opt.seed, "codebook", j));
      link.batch_bits = batch_bits(opt.batch_size, m.output.height, m.input.channels, m.output.channels, qo.atoms,
                                   link.groups, qo.sync.alpha());
      link.bandwidth_compression = bandwidth_compression(opt.batch_size, m.output.height, m.input.channels,
                                                         m.output.channels, qo.atoms, link.groups, qo.sync.alpha());
      link.buffer_compression = buffer_compression(async.buffer_capacity * opt.batch_size, m.output.height,
                                                   m.output.channels, qo.atoms, link.groups);
    } else {
      raw.push_back(std::make_unique<ReplayBuffer<Tensor<T>>>(async.buffer_capacity));
      link.batch_bits = 32.0 * static_cast<double>(opt.batch_size * m.output.per_sample());
      link.bandwidth_compression = 1.0;
      link.buffer_compression = 1.0;
    }
  }

  // Test-time path between modules mirrors what the reader sees.
  Link<T> link_fn;
  if (quant)
    link_fn = [&](std::size_t j, const Tensor<T>& x) {
      if (!encoders[j].initialized()) return x;
      return decode<T>(encode(x, encoders[j]), decoders[j]);
    };

  auto buffer_bytes = [&](std::size_t j) -> std::uint64_t {
    if (j + 1 >= J) return 0;
    if (quant) {
      const auto& qo = *async.quantizer;
      const std::uint64_t shared = 32ULL * spec.modules[j].output.channels * qo.atoms;
      return coded[j]->stats([](const QuantizedBatch& q) { return index_bits(q); }, shared).total_bytes;
    }
    return raw[j]->stats([](const Tensor<T>& x) { return raw_bits(x); }).total_bytes;
  };

  TrainResult<T>& tr = res.train;
  tr.epoch_loss.assign(J, {});
  tr.epoch_grad_sq.assign(J, {});
  tr.epoch_lr.assign(J, {});
  tr.drift.assign(J, {});
  std::optional<DriftTracker<T>> drift;
  if (opt.track_drift) {
    drift.emplace(train, opt.drift_probe, opt.seed);
    for (std::size_t j = 0; j < J; ++j) drift->update(p, j, link_fn);
  }
  std::vector<ModuleWindow> window(J);
  std::vector<std::uint64_t> starved(J, 0);
  res.trace.modules = J;

  ModuleSampler sampler(delay, derive_seed(opt.seed, "schedule"));
  std::uint64_t tick = 0;
  std::size_t remaining = budget == 0 ? 0 : J;
  while (remaining > 0) {
    ++tick;
    const std::size_t j = sampler.next();
    res.trace.selected.push_back(static_cast<std::uint32_t>(j));

    Tensor<T> x;
    std::vector<int> y;
    std::uint64_t stale = 0;
    bool have = true;
    if (j == 0) {
      auto b = stream.next_cyclic<T>();
      x = std::move(b.x);
      y = std::move(b.y);
    } else if (quant) {
      auto e = coded[j - 1]->sample();
      if (e) {
        ++reads[j - 1];
        if (sync_codebooks(encoders[j - 1], decoders[j - 1], async.quantizer->sync, reads[j - 1]))
          ++res.links[j - 1].syncs;
        x = decode<T>(e->payload, decoders[j - 1]);
        y = std::move(e->labels);
        stale = coded[j - 1]->last_seq() - e->seq;
      }
      have = e.has_value();
    } else {
      auto e = raw[j - 1]->sample();
      if (e) {
        x = std::move(e->payload);
        y = std::move(e->labels);
        stale = raw[j - 1]->last_seq() - e->seq;
      }
      have = e.has_value();
    }
    if (!have) {
      ++starved[j];
      res.trace.outcome.push_back(TickOutcome::Starved);
      res.trace.staleness.push_back(0);
      if (starved[j] == async.starvation_warning)
        tr.warnings.push_back("module " + std::to_string(j + 1) + " starved " + std::to_string(starved[j]) +
                              " times");
      continue;
    }
    res.trace.staleness.push_back(stale);

    const bool updating = state.updates[j] < budget;
    Tensor<T> out;
    if (updating) {
      const auto sgd = state.step_options(j, bpe);
      auto r = p[j].train_step(x, y, sgd);
      ++state.updates[j];
      window[j].add(static_cast<double>(r.loss), r.correct, y.size(), r.grad_norm_sq);
      out = std::move(r.output);
      res.trace.outcome.push_back(TickOutcome::Updated);
    } else {
      out = p[j].forward(x, Mode::Eval);
      res.trace.outcome.push_back(TickOutcome::Forwarded);
    }

    if (j + 1 < J) {
      auto& link = res.links[j];
      ++link.forwarded;
      link.bits_sent += link.batch_bits;
      if (quant) {
        const auto& qo = *async.quantizer;
        auto& enc = encoders[j];
        if (!enc.initialized()) {
          enc.seed_from(out, codebook_rng[j]);
          decoders[j].copy_atoms_from(enc);
        }
        auto q = encode(out, enc);
        if (updating || qo.ema_when_frozen) ema_update(enc, out, q, qo.vq, codebook_rng[j]);
        q.labels = y;
        coded[j]->push(std::move(q), std::move(y));
      } else {
        raw[j]->push(std::move(out), std::move(y));
      }
    }

    if (updating && state.updates[j] % bpe == 0) {
      const std::size_t epoch = state.updates[j] / bpe;
      auto rec = make_record(tick, j, static_cast<double>(epoch), window[j]);
      if (is_eval_epoch(opt, epoch - 1)) rec.test_acc = evaluate_modules(p, test, link_fn)[j];
      if (drift) {
        tr.drift[j].push_back(drift->update(p, j, link_fn));
        rec.drift = tr.drift[j].back();
      }
      if (j + 1 < J) rec.bits_sent = res.links[j].bits_sent;
      rec.buffer_bytes = buffer_bytes(j);
      rec.starvation_count = starved[j];
      tr.records.push_back(rec);
      tr.epoch_loss[j].push_back(window[j].mean_loss());
      tr.epoch_grad_sq[j].push_back(window[j].mean_grad_sq());
      tr.epoch_lr[j].push_back(state.schedule.rate(static_cast<long>(epoch - 1)));
      window[j] = {};
      if (state.updates[j] == budget) --remaining;
    }
  }

  for (std::size_t j = 0; j + 1 < J; ++j) res.links[j].buffer_bytes = buffer_bytes(j);
  tr.test_acc = evaluate_modules(p, test, link_fn);
  tr.updates = state.updates;
  return res;
}

template <typename T>
TrainResult<T> run_async_threaded(const Dataset& train, const Dataset& test, TrainState<T>& state,
                                  const TrainOptions& opt, std::size_t buffer_capacity) {
  auto& p = state.partition;
  const std::size_t J = p.size();
  BatchStream stream(train, opt.batch_size, opt.seed);
  const std::size_t bpe = stream.batches_per_epoch();
  const std::uint64_t budget = static_cast<std::uint64_t>(opt.epochs) * bpe;
  std::vector<std::unique_ptr<ReplayBuffer<Tensor<T>>>> buffers;
  for (std::size_t j = 0; j + 1 < J; ++j)
    buffers.push_back(std::make_unique<ReplayBuffer<Tensor<T>>>(buffer_capacity));
  std::atomic<std::size_t> done{budget == 0 ? J : 0};
  std::atomic<bool> abort{false};
  std::mutex err_mu;
  std::optional<std::pair<std::size_t, std::string>> failure;
  std::vector<std::vector<ModuleWindow>> epochs(J);
  std::vector<std::uint64_t> starved(J, 0);

  auto worker = [&](std::size_t j) {
    try {
      ModuleWindow window;
      while (done.load() < J && !abort) {
        Tensor<T> x;
        std::vector<int> y;
        if (j == 0) {
          auto b = stream.next_cyclic<T>();
          x = std::move(b.x);
          y = std::move(b.y);
        } else {
          auto e = buffers[j - 1]->sample();
          if (!e) {
            ++starved[j];
            std::this_thread::sleep_for(std::chrono::microseconds(50));
            continue;
          }
          x = std::move(e->payload);
          y = std::move(e->labels);
        }
        Tensor<T> out;
        if (state.updates[j] < budget) {
          auto r = p[j].train_step(x, y, state.step_options(j, bpe));
          ++state.updates[j];
          window.add(static_cast<double>(r.loss), r.correct, y.size(), r.grad_norm_sq);
          if (state.updates[j] % bpe == 0) {
            epochs[j].push_back(window);
            window = {};
          }
          if (state.updates[j] == budget) ++done;
          out = std::move(r.output);
        } else {
          out = p[j].forward(x, Mode::Eval);
          std::this_thread::yield();
        }
        if (j + 1 < J) buffers[j]->push(std::move(out), std::move(y));
      }
    } catch (const std::exception& ex) {
      std::lock_guard lock(err_mu);
      if (!failure) failure.emplace(j, ex.what());
      abort = true;
    }
  };
  std::vector<std::thread> threads;
  for (std::size_t j = 0; j < J; ++j) threads.emplace_back(worker, j);
  for (auto& t : threads) t.join();
  if (failure)
    throw std::runtime_error("module " + std::to_string(failure->first + 1) + " failed: " + failure->second);

  TrainResult<T> res;
  res.epoch_loss.assign(J, {});
  res.epoch_grad_sq.assign(J, {});
  res.epoch_lr.assign(J, {});
  res.drift.assign(J, {});
  res.test_acc = evaluate_modules(p, test);
  for (std::size_t j = 0; j < J; ++j)
    for (std::size_t e = 0; e < epochs[j].size(); ++e) {
      auto rec = make_record((e + 1) * bpe, j, static_cast<double>(e + 1), epochs[j][e]);
      if (e + 1 == epochs[j].size()) rec.test_acc = res.test_acc[j];
      rec.starvation_count = starved[j];
      res.records.push_back(rec);
      res.epoch_loss[j].push_back(epochs[j][e].mean_loss());
      res.epoch_grad_sq[j].push_back(epochs[j][e].mean_grad_sq());
      res.epoch_lr[j].push_back(state.schedule.rate(static_cast<long>(e)));
    }
  res.updates = state.updates;
  return res;
}

template AsyncResult<float> run_async<float>(const Dataset&, const Dataset&, TrainState<float>&, const DelayModel&,
                                             const TrainOptions&, const AsyncOptions&);
template AsyncResult<double> run_async<double>(const Dataset&, const Dataset&, TrainState<double>&,
                                               const DelayModel&, const TrainOptions&, const AsyncOptions&);
template TrainResult<float> run_async_threaded<float>(const Dataset&, const Dataset&, TrainState<float>&,
                                                      const TrainOptions&, std::size_t);
template TrainResult<double> run_async_threaded<double>(const Dataset&, const Dataset&, TrainState<double>&,
                                                        const TrainOptions&, std::size_t);

}  // namespace dgl
