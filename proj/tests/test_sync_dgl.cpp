#include <atomic>
#include <chrono>
#include <cmath>
#include <mutex>
#include <thread>

#include "dgl/sync_dgl.hpp"
#include "doctest.h"

using namespace dgl;

namespace {

struct Fixture {
  DataSplit data;
  NetworkSpec net;
  TrainOptions opt;

  explicit Fixture(std::size_t train_size = 96) {
    DatasetSpec ds;
    ds.train_size = train_size;
    ds.test_size = 64;
    ds.separation = 0.3;
    data = load_dataset(ds);
    net = build_reference_net(8, 4, 4, AuxKind::MlpSr, 3, 8);
    opt.sgd.lr = 0.02;
    opt.epochs = 2;
    opt.batch_size = 16;
    opt.decay_period = 1;
    opt.decay_factor = 0.5;
  }
  std::uint64_t budget() const { return opt.epochs * (data.train.size() / opt.batch_size); }
};

template <typename T>
double max_abs_diff(Partition<T>& a, Partition<T>& b) {
  const auto x = a.flat_parameters(), y = b.flat_parameters();
  REQUIRE(x.size() == y.size());
  double m = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) m = std::max(m, std::abs(static_cast<double>(x[i]) - y[i]));
  return m;
}

template <typename T>
std::vector<T> module_parameters(GreedyModule<T>& m) {
  std::vector<T> out;
  for (auto* p : m.parameters()) out.insert(out.end(), p->value.values().begin(), p->value.values().end());
  return out;
}

}  // namespace

TEST_CASE("a single-module sync run is ordinary end-to-end backpropagation") {
  Fixture f;
  const Shape in{1, 3, 8, 8};
  const auto net = build_network(in, {{{8, false}, {8, true}, {16, false}}}, 4, AuxKind::Mlp);
  const std::uint64_t init = 9;
  TrainState<double> state(net, init, f.opt);
  train_sync(f.data.train, f.data.test, state, f.opt);

  // Plain training loop over separately constructed layers with the same initial values.
  Rng rng(derive_seed(init, "module", 0));
  Sequential<double> body(net.modules[0].body, rng), head(net.modules[0].head, rng);
  std::vector<Parameter<double>*> params = body.parameters();
  for (auto* p : head.parameters()) params.push_back(p);
  const LrSchedule lr(f.opt.sgd.lr, f.opt.decay_factor, f.opt.decay_period);
  BatchStream stream(f.data.train, f.opt.batch_size, f.opt.seed);
  for (std::size_t e = 0; e < f.opt.epochs; ++e) {
    stream.begin_epoch(e);
    Batch<double> b;
    while (stream.next(b)) {
      for (auto* p : params) p->zero_grad();
      const auto ce = cross_entropy(head.forward(body.forward(b.x, Mode::Train), Mode::Train), b.y);
      body.backward(head.backward(ce.grad));
      SgdOptions o = f.opt.sgd;
      o.lr = lr.rate(static_cast<long>(e));
      sgd_step(params, o);
    }
  }
  std::vector<double> plain;
  for (auto* p : params) plain.insert(plain.end(), p->value.values().begin(), p->value.values().end());
  CHECK(module_parameters(state.partition[0]) == plain);
}

TEST_CASE("every mode gives each module exactly its update budget, in order") {
  Fixture f;
  for (int mode = 0; mode < 3; ++mode) {
    TrainState<float> state(f.net, 1, f.opt);
    std::mutex mu;
    std::vector<std::uint64_t> last(4, 0);
    bool ordered = true;
    TrainHooks<float> hooks;
    hooks.before_update = [&](std::size_t j, std::uint64_t t) {
      std::lock_guard lock(mu);
      ordered = ordered && t == last[j] + 1;
      last[j] = t;
    };
    TrainResult<float> r;
    if (mode == 0) r = train_sync(f.data.train, f.data.test, state, f.opt, hooks);
    if (mode == 1) r = train_sequential(f.data.train, f.data.test, state, f.opt, hooks);
    if (mode == 2) r = train_pipelined(f.data.train, f.data.test, state, f.opt, hooks);
    CAPTURE(mode);
    CHECK(ordered);
    CHECK(r.updates == std::vector<std::uint64_t>(4, f.budget()));
    CHECK(last == std::vector<std::uint64_t>(4, f.budget()));
    CHECK(r.records.size() == 4 * f.opt.epochs);
    CHECK(r.epoch_lr[2] == std::vector<double>{0.02, 0.01});
  }
}

TEST_CASE("update counters after five batches") {
  Fixture f(80);
  f.opt.epochs = 1;
  TrainState<float> state(f.net, 1, f.opt);
  train_sync(f.data.train, f.data.test, state, f.opt);
  CHECK(state.updates == std::vector<std::uint64_t>(4, 5));
}

TEST_CASE("two-module local losses fall in nearly every epoch") {
  DatasetSpec ds;
  ds.classes = 2;
  ds.train_size = 200;
  ds.test_size = 64;
  ds.separation = 0.15;
  const auto data = load_dataset(ds);
  const auto net = build_network({1, 3, 8, 8}, {{{8, false}}, {{16, true}}}, 2, AuxKind::MlpSr);
  TrainOptions opt;
  opt.sgd.lr = 0.002;
  opt.sgd.momentum = 0.9;
  opt.epochs = 20;
  opt.batch_size = 20;
  opt.decay_period = 100;
  opt.eval_every = 0;
  TrainState<float> state(net, 1, opt);
  const auto r = train_sync(data.train, data.test, state, opt);
  for (std::size_t j = 0; j < 2; ++j) {
    std::size_t falls = 0;
    for (std::size_t e = 1; e < 20; ++e) falls += r.epoch_loss[j][e] < r.epoch_loss[j][e - 1];
    CAPTURE(j);
    // 19 epoch-to-epoch transitions; at most one may fail to decrease.
    CHECK(falls >= 18);
  }
}

TEST_CASE("sequential and sync train module 1 identically") {
  Fixture f;
  TrainState<float> sync(f.net, 4, f.opt), seq(f.net, 4, f.opt);
  train_sync(f.data.train, f.data.test, sync, f.opt);
  train_sequential(f.data.train, f.data.test, seq, f.opt);
  CHECK(module_parameters(sync.partition[0]) == module_parameters(seq.partition[0]));
  CHECK(module_parameters(sync.partition[3]) != module_parameters(seq.partition[3]));
}

TEST_CASE("sequential training freezes predecessors while a module trains") {
  Fixture f;
  TrainState<float> state(f.net, 2, f.opt);
  std::vector<std::vector<float>> frozen(4);
  bool unchanged = true;
  TrainHooks<float> hooks;
  hooks.before_update = [&](std::size_t j, std::uint64_t t) {
    if (t == 1 && j > 0) frozen[j - 1] = module_parameters(state.partition[j - 1]);
    if (j > 0) unchanged = unchanged && module_parameters(state.partition[j - 1]) == frozen[j - 1];
  };
  train_sequential(f.data.train, f.data.test, state, f.opt, hooks);
  CHECK(unchanged);
}

TEST_CASE("pipelined workers reproduce the sync trajectory exactly") {
  Fixture f(3200);  // 200 batches per epoch
  f.opt.epochs = 1;
  f.net = build_reference_net(4, 4, 4, AuxKind::MlpSr, 3, 8);
  TrainState<double> a(f.net, 3, f.opt), b(f.net, 3, f.opt);
  const auto rs = train_sync(f.data.train, f.data.test, a, f.opt);
  const auto rp = train_pipelined(f.data.train, f.data.test, b, f.opt);
  CHECK(max_abs_diff(a.partition, b.partition) == 0.0);
  CHECK(rs.test_acc == rp.test_acc);
  CHECK(rs.epoch_loss == rp.epoch_loss);
}

TEST_CASE("pipelined runs complete with capacity-1 channels") {
  Fixture f;
  f.opt.channel_capacity = 1;
  TrainState<float> a(f.net, 5, f.opt), b(f.net, 5, f.opt);
  train_sync(f.data.train, f.data.test, a, f.opt);
  const auto r = train_pipelined(f.data.train, f.data.test, b, f.opt);
  CHECK(r.updates == std::vector<std::uint64_t>(4, f.budget()));
  CHECK(max_abs_diff(a.partition, b.partition) == 0.0);
}

TEST_CASE("capacity-1 channels stay live over a thousand batches") {
  Fixture f(1000);
  f.opt.epochs = 1;
  f.opt.batch_size = 1;
  f.opt.channel_capacity = 1;
  f.net = build_reference_net(2, 4, 4, AuxKind::Cnn, 3, 8);
  TrainState<float> state(f.net, 7, f.opt);
  const auto r = train_pipelined(f.data.train, f.data.test, state, f.opt);
  CHECK(r.updates == std::vector<std::uint64_t>(4, 1000));
}

TEST_CASE("pipelining overlaps the modules' work") {
  using clock = std::chrono::steady_clock;
  Fixture f(480);
  f.opt.epochs = 1;
  f.opt.batch_size = 16;  // 30 batches
  f.net = build_reference_net(2, 4, 4, AuxKind::Cnn, 3, 8);
  const auto delay = std::chrono::milliseconds(20);
  TrainHooks<float> hooks;
  hooks.before_update = [&](std::size_t, std::uint64_t) { std::this_thread::sleep_for(delay); };
  const auto time = [&](bool pipelined) {
    TrainState<float> state(f.net, 1, f.opt);
    const auto start = clock::now();
    if (pipelined)
      train_pipelined(f.data.train, f.data.test, state, f.opt, hooks);
    else
      train_sync(f.data.train, f.data.test, state, f.opt, hooks);
    return std::chrono::duration<double>(clock::now() - start).count() / 30.0;
  };
  const double d = std::chrono::duration<double>(delay).count();
  const double sync_period = time(false), pipe_period = time(true);
  MESSAGE("per-batch period: sync " << sync_period << " s, pipelined " << pipe_period << " s, d = " << d << " s");
  CHECK(sync_period >= 4 * d);
  // Steady state is one delay per batch plus the pipeline fill of J-1 delays.
  CHECK(pipe_period < 1.5 * d);
}

TEST_CASE("a failing worker aborts the run and names the module") {
  Fixture f;
  TrainState<float> state(f.net, 1, f.opt);
  TrainHooks<float> hooks;
  hooks.before_update = [](std::size_t j, std::uint64_t t) {
    if (j == 2 && t == 3) throw std::runtime_error("injected fault");
  };
  CHECK_THROWS_WITH_AS(train_pipelined(f.data.train, f.data.test, state, f.opt, hooks),
                       doctest::Contains("module 3 failed: injected fault"), std::runtime_error);
}

TEST_CASE("the first module updates again before the last module's first update finishes") {
  Fixture f;
  TrainState<float> state(f.net, 1, f.opt);
  std::atomic<std::uint64_t> first_updates{0};
  std::atomic<bool> unlocked{false};
  TrainHooks<float> hooks;
  hooks.after_update = [&](std::size_t j, std::uint64_t t, GreedyModule<float>&) {
    if (j == 0) first_updates = t;
  };
  hooks.before_update = [&](std::size_t j, std::uint64_t t) {
    if (j != 3 || t != 1) return;
    // Hold the last module until module 1 has gone on to later batches.
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(10);
    while (first_updates < 3 && std::chrono::steady_clock::now() < deadline)
      std::this_thread::sleep_for(std::chrono::milliseconds(1));
    unlocked = first_updates >= 3;
  };
  train_pipelined(f.data.train, f.data.test, state, f.opt, hooks);
  CHECK(unlocked);
}

TEST_CASE("training lowers the local losses") {
  Fixture f(512);
  f.opt.epochs = 6;
  f.opt.decay_period = 4;
  f.opt.decay_factor = 0.2;
  f.net = build_reference_net(16, 4, 4, AuxKind::MlpSr, 3, 8);
  TrainState<float> state(f.net, 1, f.opt);
  const auto r = train_sync(f.data.train, f.data.test, state, f.opt);
  for (std::size_t j = 0; j < 4; ++j) CHECK(r.epoch_loss[j].back() < r.epoch_loss[j].front());
  CHECK(r.final_accuracy() > 0.5);
}

TEST_CASE("evaluation cadence and drift tracking") {
  Fixture f;
  f.opt.epochs = 3;
  f.opt.eval_every = 2;
  f.opt.track_drift = true;
  f.opt.drift_probe = 32;
  TrainState<float> state(f.net, 1, f.opt);
  const auto r = train_sync(f.data.train, f.data.test, state, f.opt);
  std::vector<bool> evaluated;
  for (const auto& rec : r.records)
    if (rec.module_id == 1) evaluated.push_back(!std::isnan(rec.test_acc));
  CHECK(evaluated == std::vector<bool>{false, true, true});
  REQUIRE(r.drift[0].size() == 6);
  // Module 1 always sees the raw probe, so its input never drifts.
  for (double d : r.drift[0]) CHECK(d == 0.0);
  bool moved = false;
  for (double d : r.drift[3]) moved = moved || d > 0.0;
  CHECK(moved);
}

TEST_CASE("evaluating on an empty set gives NaN") {
  Fixture f;
  Partition<float> p(f.net, 1);
  for (double a : evaluate_modules(p, Dataset{})) CHECK(std::isnan(a));
}
