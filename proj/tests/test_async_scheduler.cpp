#include <cmath>

#include "dgl/async_scheduler.hpp"
#include "doctest.h"

using namespace dgl;

namespace {

struct Fixture {
  DataSplit data;
  NetworkSpec net;
  TrainOptions opt;

  Fixture() {
    DatasetSpec ds;
    ds.train_size = 96;
    ds.test_size = 64;
    ds.separation = 0.3;
    data = load_dataset(ds);
    net = build_reference_net(8, 4, 4, AuxKind::MlpSr, 3, 8);
    opt.sgd.lr = 0.02;
    opt.sgd.momentum = 0.9;
    opt.epochs = 2;
    opt.batch_size = 16;
    opt.eval_every = 0;
  }
  std::uint64_t budget() const { return opt.epochs * (data.train.size() / opt.batch_size); }
};

template <typename T>
std::vector<T> flat_parameters(Partition<T>& p) {
  std::vector<T> out;
  for (std::size_t j = 0; j < p.size(); ++j)
    for (auto* param : p[j].parameters()) out.insert(out.end(), param->value.values().begin(), param->value.values().end());
  return out;
}

AsyncOptions quantized(std::size_t atoms, std::uint64_t period = 1) {
  AsyncOptions a;
  QuantizerOptions q;
  q.atoms = atoms;
  q.groups = 4;
  q.sync = SyncPolicy::every(period);
  a.quantizer = q;
  return a;
}

}  // namespace

TEST_CASE("slowdown pmf closed form") {
  CHECK(pmf_from_slowdown(4, 1, 2.0).pmf[1] == doctest::Approx(1.0 / 7).epsilon(1e-15));
  CHECK(pmf_from_slowdown(6, 0, 2.0).pmf[0] == doctest::Approx(1.0 / 11).epsilon(1e-15));
  for (double p : pmf_from_slowdown(5, 3, 1.0).pmf) CHECK(p == doctest::Approx(0.2).epsilon(1e-15));
  const auto d = pmf_from_slowdown(4, 2, 2.0);
  CHECK(d.pmf[0] == doctest::Approx(2.0 / 7));
  CHECK(d.slow_module == 2u);
  CHECK_THROWS_AS(pmf_from_slowdown(1, 0, 2.0), std::invalid_argument);
  CHECK_THROWS_AS(pmf_from_slowdown(4, 4, 2.0), std::invalid_argument);
  CHECK_THROWS_AS(pmf_from_slowdown(4, 0, 0.0), std::invalid_argument);
}

TEST_CASE("property: slowdown and pmf round-trip to machine precision") {
  Rng gen(3);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t J = 2 + uniform_index(gen, 9);
    const std::size_t slow = uniform_index(gen, J);
    const double S = 0.1 + 20.0 * uniform01(gen);
    const auto d = pmf_from_slowdown(J, slow, S);
    CHECK_NOTHROW(d.validate());
    CHECK(slowdown_from_pmf(d.pmf, slow) == doctest::Approx(S).epsilon(1e-12));
    const auto again = pmf_from_slowdown(J, slow, slowdown_from_pmf(d.pmf, slow));
    for (std::size_t j = 0; j < J; ++j) CHECK(std::abs(again.pmf[j] - d.pmf[j]) < 1e-15);
  }
}

TEST_CASE("explicit pmfs are validated") {
  CHECK_THROWS_AS(explicit_delay({0.5, 0.0, 0.5}), std::invalid_argument);
  CHECK_THROWS_AS(explicit_delay({0.5, 0.4}), std::invalid_argument);
  CHECK_THROWS_AS(explicit_delay({}), std::invalid_argument);
  CHECK_NOTHROW(explicit_delay({0.25, 0.75}));
}

TEST_CASE("the sampler is an inverse CDF over one uniform draw per call") {
  const auto d = explicit_delay({0.1, 0.2, 0.3, 0.4});
  const auto got = sample_schedule(d, 2000, 42);
  Rng oracle(42);
  for (std::size_t i = 0; i < got.size(); ++i) {
    const double u = uniform01(oracle);
    std::uint32_t j = 0;
    double acc = d.pmf[0];
    while (u >= acc && j + 1 < d.pmf.size()) acc += d.pmf[++j];
    REQUIRE(got[i] == j);
  }
  CHECK(sample_schedule(d, 100, 7) == sample_schedule(d, 100, 7));
  CHECK(sample_schedule(d, 100, 7) != sample_schedule(d, 100, 8));
}

TEST_CASE("selection counts stay within three standard deviations") {
  const auto d = pmf_from_slowdown(4, 1, 2.0);
  const std::size_t n = 100000;
  std::vector<double> count(4, 0.0);
  for (auto j : sample_schedule(d, n, 9)) count[j] += 1;
  for (std::size_t j = 0; j < 4; ++j) {
    const double mean = n * d.pmf[j], sd = std::sqrt(n * d.pmf[j] * (1 - d.pmf[j]));
    CHECK(std::abs(count[j] - mean) <= 3 * sd);
  }
}

TEST_CASE("a 1/7 slow module is picked about 10^4 times in 7x10^4 draws") {
  const auto d = pmf_from_slowdown(4, 2, 2.0);
  std::size_t slow = 0;
  for (auto j : sample_schedule(d, 70000, 10)) slow += j == 2;
  const double sd = std::sqrt(70000.0 * (1.0 / 7) * (6.0 / 7));
  CHECK(std::abs(static_cast<double>(slow) - 10000.0) <= 3 * sd);
}

TEST_CASE("an empty trace gives an empty report") {
  const auto r = schedule_report(ScheduleTrace{});
  CHECK(r.ticks == 0);
  CHECK(r.staleness_histogram.empty());
  for (auto n : r.updates) CHECK(n == 0);
}

TEST_CASE("schedule report tallies outcomes") {
  ScheduleTrace t;
  t.modules = 3;
  t.selected = {0, 1, 2, 1, 0, 2};
  t.outcome = {TickOutcome::Updated, TickOutcome::Updated, TickOutcome::Starved,
               TickOutcome::Forwarded, TickOutcome::Updated, TickOutcome::Updated};
  t.staleness = {0, 0, 0, 1, 0, 2};
  const auto r = schedule_report(t);
  CHECK(r.ticks == 6);
  CHECK(r.selections == std::vector<std::uint64_t>{2, 2, 2});
  CHECK(r.updates == std::vector<std::uint64_t>{2, 1, 1});
  CHECK(r.forwards == std::vector<std::uint64_t>{0, 1, 0});
  CHECK(r.starvations == std::vector<std::uint64_t>{0, 0, 1});
  CHECK(r.staleness_histogram == std::map<std::uint64_t, std::uint64_t>{{0, 1}, {1, 1}, {2, 1}});
}

TEST_CASE("every module spends exactly its budget whatever the pmf") {
  Fixture f;
  for (const auto& delay : {uniform_delay(4), pmf_from_slowdown(4, 0, 2.0), pmf_from_slowdown(4, 3, 3.0)}) {
    TrainState<float> state(f.net, 1, f.opt);
    const auto r = run_async(f.data.train, f.data.test, state, delay, f.opt, AsyncOptions{});
    const auto rep = schedule_report(r.trace);
    for (std::size_t j = 0; j < 4; ++j) {
      CHECK(r.train.updates[j] == f.budget());
      CHECK(rep.updates[j] == f.budget());
      CHECK(rep.selections[j] == rep.updates[j] + rep.forwards[j] + rep.starvations[j]);
    }
    CHECK(rep.starvations[0] == 0);
    CHECK(r.train.test_acc.size() == 4);
    CHECK(r.train.epoch_loss[3].size() == f.opt.epochs);
  }
}

TEST_CASE("a delay model of the wrong size is rejected") {
  Fixture f;
  TrainState<float> state(f.net, 1, f.opt);
  CHECK_THROWS_AS(run_async(f.data.train, f.data.test, state, uniform_delay(3), f.opt, AsyncOptions{}),
                  std::invalid_argument);
}

TEST_CASE("seeded async runs are reproducible") {
  Fixture f;
  const auto once = [&](const AsyncOptions& a) {
    TrainState<float> state(f.net, 5, f.opt);
    auto r = run_async(f.data.train, f.data.test, state, pmf_from_slowdown(4, 2, 2.0), f.opt, a);
    return std::make_pair(flat_parameters(state.partition), r.trace.selected);
  };
  CHECK(once(AsyncOptions{}) == once(AsyncOptions{}));
  CHECK(once(quantized(16)) == once(quantized(16)));
}

TEST_CASE("raw and quantized runs share one schedule") {
  Fixture f;
  const auto delay = pmf_from_slowdown(4, 1, 2.0);
  TrainState<float> a(f.net, 2, f.opt), b(f.net, 2, f.opt);
  const auto raw = run_async(f.data.train, f.data.test, a, delay, f.opt, AsyncOptions{});
  const auto q = run_async(f.data.train, f.data.test, b, delay, f.opt, quantized(16));
  CHECK(raw.trace.selected == q.trace.selected);
  CHECK(raw.trace.outcome == q.trace.outcome);
  CHECK(raw.trace.staleness == q.trace.staleness);
  // Module 1 never reads a buffer, so its trajectory is unaffected by quantization.
  CHECK(a.partition[0].parameters()[0]->value.storage() == b.partition[0].parameters()[0]->value.storage());
}

TEST_CASE("link accounting matches the bit formulas") {
  Fixture f;
  const std::uint64_t period = 4;
  const std::size_t C = 16;
  TrainState<float> state(f.net, 3, f.opt);
  AsyncOptions a = quantized(C, period);
  a.buffer_capacity = 3;
  const auto r = run_async(f.data.train, f.data.test, state, uniform_delay(4), f.opt, a);
  const auto rep = schedule_report(r.trace);
  REQUIRE(r.links.size() == 3);
  for (std::size_t j = 0; j < 3; ++j) {
    const auto& m = f.net.modules[j];
    const auto& link = r.links[j];
    const std::uint64_t B = f.opt.batch_size, N = m.output.height, K = m.output.channels;
    CAPTURE(j);
    CHECK(link.groups == 4);
    CHECK(link.forwarded == rep.selections[j] - rep.starvations[j]);
    const double per_batch = double(B * 4 * N * N * bits_per_index(C)) + 32.0 * double((K + m.input.channels) * C) / period;
    CHECK(link.batch_bits == doctest::Approx(per_batch).epsilon(1e-12));
    CHECK(link.bits_sent == doctest::Approx(per_batch * link.forwarded).epsilon(1e-12));
    CHECK(link.bandwidth_compression == doctest::Approx(32.0 * B * N * N * K / per_batch).epsilon(1e-12));
    // The buffer ends full: 3 batches of indices plus one codebook.
    CHECK(link.buffer_bytes == (3 * B * 4 * N * N * bits_per_index(C) + 32 * K * C + 7) / 8);
    // Reads of buffer j by module j+1, every period-th of which syncs.
    const std::uint64_t reads = rep.selections[j + 1] - rep.starvations[j + 1];
    CHECK(link.syncs == reads / period);
  }
}

TEST_CASE("groups are clamped to the link width") {
  Fixture f;
  TrainState<float> state(f.net, 3, f.opt);
  AsyncOptions a = quantized(4);
  a.quantizer->groups = 1000;
  const auto r = run_async(f.data.train, f.data.test, state, uniform_delay(4), f.opt, a);
  for (std::size_t j = 0; j < 3; ++j) CHECK(r.links[j].groups == f.net.modules[j].output.channels);
}

TEST_CASE("raw links report unit compression and 32-bit payloads") {
  Fixture f;
  TrainState<float> state(f.net, 4, f.opt);
  const auto r = run_async(f.data.train, f.data.test, state, uniform_delay(4), f.opt, AsyncOptions{});
  for (std::size_t j = 0; j < 3; ++j) {
    const auto& m = f.net.modules[j];
    CHECK(r.links[j].bandwidth_compression == 1.0);
    CHECK(r.links[j].batch_bits == 32.0 * f.opt.batch_size * m.output.per_sample());
    CHECK(r.links[j].buffer_bytes == 2 * f.opt.batch_size * m.output.per_sample() * 4);
  }
}

TEST_CASE("threaded async honours the budget") {
  Fixture f;
  TrainState<float> state(f.net, 6, f.opt);
  const auto r = run_async_threaded(f.data.train, f.data.test, state, f.opt, 2);
  for (std::size_t j = 0; j < 4; ++j) CHECK(r.updates[j] == f.budget());
  CHECK(r.test_acc.size() == 4);
}

TEST_CASE("two modules with a uniform pmf and a large buffer match sync") {
  DatasetSpec ds;
  ds.train_size = 512;
  ds.test_size = 1024;
  ds.separation = 0.3;
  const auto data = load_dataset(ds);
  const auto net = build_network({1, 3, 8, 8}, {{{8, false}}, {{16, true}}}, 4, AuxKind::MlpSr);
  TrainOptions opt;
  opt.sgd.lr = 0.02;
  opt.sgd.momentum = 0.9;
  opt.epochs = 10;
  opt.batch_size = 32;
  opt.decay_period = 4;
  opt.eval_every = 0;
  AsyncOptions a;
  a.buffer_capacity = 16;
  TrainState<double> s(net, 3, opt), q(net, 3, opt);
  const auto sync = train_sync(data.train, data.test, s, opt);
  const auto async = run_async(data.train, data.test, q, uniform_delay(2), opt, a);
  MESSAGE("sync " << sync.final_accuracy() << ", async " << async.train.final_accuracy());
  CHECK(std::abs(sync.final_accuracy() - async.train.final_accuracy()) <= 0.01);
}
