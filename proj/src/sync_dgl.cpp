#include "dgl/sync_dgl.hpp"

#include <atomic>
#include <cmath>
#include <limits>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <thread>

#include "dgl/channel.hpp"

namespace dgl {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

template <typename T>
Tensor<T> module_inputs(Partition<T>& p, Tensor<T> x, std::size_t j, const Link<T>& link) {
  for (std::size_t i = 0; i < j; ++i) {
    x = p[i].forward(x, Mode::Eval);
    if (link) x = link(i, x);
  }
  return x;
}

MetricRecord make_record(std::uint64_t step, std::size_t j, double epoch_eq, const ModuleWindow& w, double test_acc,
                         double drift, double bits) {
  MetricRecord r;
  r.step = step;
  r.module_id = j + 1;
  r.epoch_equivalent = epoch_eq;
  r.train_loss = w.mean_loss();
  r.train_acc = w.accuracy();
  r.test_acc = test_acc;
  r.grad_norm = std::sqrt(w.mean_grad_sq());
  r.drift = drift;
  r.bits_sent = bits;
  return r;
}

bool is_eval_epoch(const TrainOptions& opt, std::size_t e) {
  return e + 1 == opt.epochs || (opt.eval_every != 0 && (e + 1) % opt.eval_every == 0);
}

template <typename T>
void init_result(TrainResult<T>& r, std::size_t J) {
  r.epoch_loss.assign(J, {});
  r.epoch_grad_sq.assign(J, {});
  r.epoch_lr.assign(J, {});
  r.drift.assign(J, {});
}

double last_or_nan(const std::vector<double>& v) { return v.empty() ? kNaN : v.back(); }

}  // namespace

double ModuleWindow::mean_loss() const { return steps == 0 ? kNaN : loss_sum / static_cast<double>(steps); }
double ModuleWindow::accuracy() const {
  return samples == 0 ? kNaN : static_cast<double>(correct) / static_cast<double>(samples);
}
double ModuleWindow::mean_grad_sq() const { return steps == 0 ? kNaN : grad_sq_sum / static_cast<double>(steps); }

template <typename T>
TrainState<T>::TrainState(const NetworkSpec& spec, std::uint64_t init_seed, const TrainOptions& opt)
    : partition(spec, init_seed),
      schedule(opt.sgd.lr, opt.decay_factor, opt.decay_period),
      sgd(opt.sgd),
      updates(spec.size(), 0) {}

template <typename T>
SgdOptions TrainState<T>::step_options(std::size_t j, std::size_t batches_per_epoch) const {
  SgdOptions o = sgd;
  o.lr = schedule.rate(static_cast<long>(updates[j] / batches_per_epoch));
  return o;
}

template <typename T>
std::vector<double> evaluate_modules(Partition<T>& p, const Dataset& data, const Link<T>& link, std::size_t chunk) {
  const std::size_t J = p.size();
  std::vector<std::size_t> correct(J, 0);
  if (data.size() == 0) return std::vector<double>(J, kNaN);
  for (std::size_t first = 0; first < data.size(); first += chunk) {
    auto b = slice<T>(data, first, chunk);
    Tensor<T> x = std::move(b.x);
    for (std::size_t j = 0; j < J; ++j) {
      x = p[j].forward(x, Mode::Eval);
      correct[j] += count_correct(p[j].logits(x, Mode::Eval), b.y);
      if (link && j + 1 < J) x = link(j, x);
    }
  }
  std::vector<double> acc(J);
  for (std::size_t j = 0; j < J; ++j) acc[j] = static_cast<double>(correct[j]) / static_cast<double>(data.size());
  return acc;
}

template <typename T>
DriftTracker<T>::DriftTracker(const Dataset& data, std::size_t probe, std::uint64_t seed) : seed_(seed) {
  probe_ = slice<T>(data, 0, std::min(probe, data.size())).x;
}

template <typename T>
double DriftTracker<T>::update(Partition<T>& p, std::size_t j, const Link<T>& link) {
  if (previous_.size() < p.size()) previous_.resize(p.size());
  Tensor<T> feats = module_inputs(p, probe_, j, link);
  double value = kNaN;
  if (previous_[j]) {
    DriftOptions o;
    o.seed = derive_seed(seed_, "drift", j);
    value = estimate_drift(*previous_[j], feats, o).value;
  }
  previous_[j] = std::move(feats);
  return value;
}

template <typename T>
TrainResult<T> train_sync(const Dataset& train, const Dataset& test, TrainState<T>& state, const TrainOptions& opt,
                          const TrainHooks<T>& hooks) {
  auto& p = state.partition;
  const std::size_t J = p.size();
  BatchStream stream(train, opt.batch_size, opt.seed);
  const std::size_t bpe = stream.batches_per_epoch();
  TrainResult<T> res;
  init_result(res, J);
  std::optional<DriftTracker<T>> drift;
  if (opt.track_drift) {
    drift.emplace(train, opt.drift_probe, opt.seed);
    for (std::size_t j = 0; j < J; ++j) drift->update(p, j);
  }
  std::vector<ModuleWindow> window(J);
  std::vector<double> bits(J, 0.0);
  std::uint64_t step = 0;
  std::vector<double> acc;

  for (std::size_t e = 0; e < opt.epochs; ++e) {
    stream.begin_epoch(e);
    Batch<T> b;
    std::size_t i = 0;
    while (stream.next(b)) {
      ++step;
      Tensor<T> x = std::move(b.x);
      for (std::size_t j = 0; j < J; ++j) {
        const auto sgd = state.step_options(j, bpe);
        if (hooks.before_update) hooks.before_update(j, state.updates[j] + 1);
        auto r = p[j].train_step(x, b.y, sgd);
        ++state.updates[j];
        window[j].add(static_cast<double>(r.loss), r.correct, b.y.size(), r.grad_norm_sq);
        if (hooks.after_update) hooks.after_update(j, state.updates[j], p[j]);
        if (j + 1 < J) bits[j] += 32.0 * static_cast<double>(r.output.size());
        x = std::move(r.output);
      }
      ++i;
      if (drift && (i == bpe / 2 || i == bpe))
        for (std::size_t j = 0; j < J; ++j) res.drift[j].push_back(drift->update(p, j));
    }
    const bool eval = is_eval_epoch(opt, e);
    if (eval) acc = evaluate_modules(p, test);
    for (std::size_t j = 0; j < J; ++j) {
      res.records.push_back(make_record(step, j, static_cast<double>(state.updates[j]) / static_cast<double>(bpe),
                                        window[j], eval ? acc[j] : kNaN, last_or_nan(res.drift[j]), bits[j]));
      res.epoch_loss[j].push_back(window[j].mean_loss());
      res.epoch_grad_sq[j].push_back(window[j].mean_grad_sq());
      res.epoch_lr[j].push_back(state.schedule.rate(static_cast<long>(e)));
      window[j] = {};
    }
  }
  res.test_acc = acc.empty() ? evaluate_modules(p, test) : acc;
  res.updates = state.updates;
  return res;
}

template <typename T>
TrainResult<T> train_sequential(const Dataset& train, const Dataset& test, TrainState<T>& state,
                                const TrainOptions& opt, const TrainHooks<T>& hooks) {
  auto& p = state.partition;
  const std::size_t J = p.size();
  TrainResult<T> res;
  init_result(res, J);
  std::optional<DriftTracker<T>> drift;
  if (opt.track_drift) drift.emplace(train, opt.drift_probe, opt.seed);
  std::uint64_t step = 0;

  for (std::size_t j = 0; j < J; ++j) {
    BatchStream stream(train, opt.batch_size, opt.seed);
    const std::size_t bpe = stream.batches_per_epoch();
    if (drift) drift->update(p, j);
    ModuleWindow window;
    double bits = 0.0;
    for (std::size_t e = 0; e < opt.epochs; ++e) {
      stream.begin_epoch(e);
      Batch<T> b;
      std::size_t i = 0;
      while (stream.next(b)) {
        ++step;
        const Tensor<T> x = module_inputs(p, std::move(b.x), j, {});
        const auto sgd = state.step_options(j, bpe);
        if (hooks.before_update) hooks.before_update(j, state.updates[j] + 1);
        auto r = p[j].train_step(x, b.y, sgd);
        ++state.updates[j];
        window.add(static_cast<double>(r.loss), r.correct, b.y.size(), r.grad_norm_sq);
        if (hooks.after_update) hooks.after_update(j, state.updates[j], p[j]);
        if (j + 1 < J) bits += 32.0 * static_cast<double>(r.output.size());
        ++i;
        if (drift && (i == bpe / 2 || i == bpe)) res.drift[j].push_back(drift->update(p, j));
      }
      double acc = kNaN;
      if (is_eval_epoch(opt, e)) acc = evaluate_modules(p, test)[j];
      res.records.push_back(make_record(step, j, static_cast<double>(state.updates[j]) / static_cast<double>(bpe),
                                        window, acc, last_or_nan(res.drift[j]), bits));
      res.epoch_loss[j].push_back(window.mean_loss());
      res.epoch_grad_sq[j].push_back(window.mean_grad_sq());
      res.epoch_lr[j].push_back(state.schedule.rate(static_cast<long>(e)));
      window = {};
    }
  }
  res.test_acc = evaluate_modules(p, test);
  res.updates = state.updates;
  return res;
}

template <typename T>
TrainResult<T> train_pipelined(const Dataset& train, const Dataset& test, TrainState<T>& state,
                               const TrainOptions& opt, const TrainHooks<T>& hooks) {
  struct Packet {
    Tensor<T> x;
    std::vector<int> y;
  };
  auto& p = state.partition;
  const std::size_t J = p.size();
  BatchStream stream(train, opt.batch_size, opt.seed);
  const std::size_t bpe = stream.batches_per_epoch();
  TrainResult<T> res;
  init_result(res, J);
  std::vector<std::vector<ModuleWindow>> epochs(J);
  std::vector<std::vector<double>> bits(J);

  std::vector<std::unique_ptr<BoundedChannel<Packet>>> channels;
  for (std::size_t j = 0; j + 1 < J; ++j) channels.push_back(std::make_unique<BoundedChannel<Packet>>(opt.channel_capacity));

  std::atomic<bool> abort{false};
  std::mutex err_mu;
  std::optional<std::pair<std::size_t, std::string>> failure;
  auto fail = [&](std::size_t j, const std::string& what) {
    {
      std::lock_guard lock(err_mu);
      if (!failure) failure.emplace(j, what);
    }
    abort = true;
    for (auto& c : channels) c->close();
  };

  auto worker = [&](std::size_t j) {
    try {
      ModuleWindow window;
      double sent = 0.0;
      auto process = [&](Tensor<T> x, std::vector<int> y) {
        const auto sgd = state.step_options(j, bpe);
        if (hooks.before_update) hooks.before_update(j, state.updates[j] + 1);
        auto r = p[j].train_step(x, y, sgd);
        ++state.updates[j];
        window.add(static_cast<double>(r.loss), r.correct, y.size(), r.grad_norm_sq);
        if (hooks.after_update) hooks.after_update(j, state.updates[j], p[j]);
        if (state.updates[j] % bpe == 0) {
          epochs[j].push_back(window);
          window = {};
        }
        if (j + 1 < J) {
          sent += 32.0 * static_cast<double>(r.output.size());
          if (state.updates[j] % bpe == 0) bits[j].push_back(sent);
          return channels[j]->push({std::move(r.output), std::move(y)});
        }
        return true;
      };
      if (j == 0) {
        for (std::size_t e = 0; e < opt.epochs && !abort; ++e) {
          stream.begin_epoch(e);
          Batch<T> b;
          while (!abort && stream.next(b))
            if (!process(std::move(b.x), std::move(b.y))) return;
        }
      } else {
        while (auto packet = channels[j - 1]->pop()) {
          if (abort) return;
          if (!process(std::move(packet->x), std::move(packet->y))) return;
        }
      }
      if (j + 1 < J) channels[j]->close();
    } catch (const std::exception& ex) {
      fail(j, ex.what());
    }
  };

  std::vector<std::thread> threads;
  for (std::size_t j = 0; j < J; ++j) threads.emplace_back(worker, j);
  for (auto& t : threads) t.join();
  if (failure)
    throw std::runtime_error("module " + std::to_string(failure->first + 1) + " failed: " + failure->second);

  res.test_acc = evaluate_modules(p, test);
  for (std::size_t e = 0; e < opt.epochs; ++e)
    for (std::size_t j = 0; j < J; ++j) {
      const auto& w = epochs[j][e];
      const double sent = j + 1 < J ? bits[j][e] : 0.0;
      res.records.push_back(make_record((e + 1) * bpe, j, static_cast<double>(e + 1), w,
                                        e + 1 == opt.epochs ? res.test_acc[j] : kNaN, kNaN, sent));
      res.epoch_loss[j].push_back(w.mean_loss());
      res.epoch_grad_sq[j].push_back(w.mean_grad_sq());
      res.epoch_lr[j].push_back(state.schedule.rate(static_cast<long>(e)));
    }
  res.updates = state.updates;
  return res;
}

#define DGL_INSTANTIATE(T)                                                                                         \
  template struct TrainState<T>;                                                                                   \
  template class DriftTracker<T>;                                                                                  \
  template std::vector<double> evaluate_modules<T>(Partition<T>&, const Dataset&, const Link<T>&, std::size_t);   \
  template TrainResult<T> train_sync<T>(const Dataset&, const Dataset&, TrainState<T>&, const TrainOptions&,       \
                                        const TrainHooks<T>&);                                                     \
  template TrainResult<T> train_sequential<T>(const Dataset&, const Dataset&, TrainState<T>&, const TrainOptions&, \
                                              const TrainHooks<T>&);                                               \
  template TrainResult<T> train_pipelined<T>(const Dataset&, const Dataset&, TrainState<T>&, const TrainOptions&,  \
                                             const TrainHooks<T>&);

DGL_INSTANTIATE(float)
DGL_INSTANTIATE(double)
#undef DGL_INSTANTIATE

}  // namespace dgl
