#include <cmath>
#include <numbers>

#include "dgl/diagnostics.hpp"
#include "dgl/experiment.hpp"
#include "dgl/rng.hpp"
#include "doctest.h"

using namespace dgl;

namespace {

std::vector<double> gaussian_rows(std::size_t n, std::size_t dim, double shift, Rng& rng) {
  std::vector<double> v(n * dim);
  for (auto& x : v) x = shift + normal(rng);
  return v;
}

double normal_pdf(double x, double mean) {
  return std::exp(-0.5 * (x - mean) * (x - mean)) / std::sqrt(2.0 * std::numbers::pi);
}

}  // namespace

TEST_CASE("drift of a sample against itself is zero") {
  Rng gen(1);
  const auto a = gaussian_rows(200, 6, 0.0, gen);
  const auto e = estimate_drift(a, a, 6);
  CHECK(e.value == 0.0);
  CHECK(e.per_projection.size() == 8);
  CHECK_FALSE(e.small_sample);
}

TEST_CASE("well separated samples have drift near one") {
  Rng gen(2);
  const auto a = gaussian_rows(500, 6, 0.0, gen);
  const auto b = gaussian_rows(500, 6, 20.0, gen);
  CHECK(estimate_drift(a, b, 6).value >= 0.95);
}

TEST_CASE("independent samples of one distribution have small drift") {
  Rng gen(3);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto a = gaussian_rows(1024, 10, 0.0, gen);
    const auto b = gaussian_rows(1024, 10, 0.0, gen);
    DriftOptions opt;
    opt.seed = gen();
    worst = std::max(worst, estimate_drift(a, b, 10, opt).value);
  }
  MESSAGE("largest null drift over 100 trials: " << worst);
  CHECK(worst < 0.15);
}

TEST_CASE("property: drift is symmetric and bounded") {
  Rng gen(4);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t dim = 1 + uniform_index(gen, 8);
    const auto a = gaussian_rows(10 + uniform_index(gen, 100), dim, 0.0, gen);
    const auto b = gaussian_rows(10 + uniform_index(gen, 100), dim, 3.0 * uniform01(gen), gen);
    DriftOptions opt;
    opt.seed = gen();
    const auto ab = estimate_drift(a, b, dim, opt), ba = estimate_drift(b, a, dim, opt);
    CHECK(ab.value == ba.value);
    CHECK(ab.value >= 0.0);
    CHECK(ab.value <= 1.0);
  }
}

TEST_CASE("drift input validation and small samples") {
  const std::vector<double> a(10, 0.0), b(12, 0.0);
  CHECK_THROWS_AS(estimate_drift(a, b, 3), std::invalid_argument);
  CHECK(estimate_drift(a, a, 5).small_sample);
  CHECK(estimate_drift(std::vector<double>{}, a, 5).small_sample);

  Tensor<float> t({4, 2, 1, 1}), u({5, 3, 1, 1});
  CHECK_THROWS_AS(estimate_drift(t, u), ShapeError);
  Rng gen(5);
  Tensor<double> x({40, 2, 2, 2}), y({30, 2, 2, 2});
  for (auto& v : x.values()) v = normal(gen);
  for (auto& v : y.values()) v = normal(gen) + 1.0;
  const auto via_tensor = estimate_drift(x, y);
  const auto via_span = estimate_drift(x.values(), y.values(), 8);
  CHECK(via_tensor.value == via_span.value);
}

TEST_CASE("mixture drift ceiling matches numerical integration") {
  QuadraticProbe probe;
  // Integral of |N(s, 1) - N(0, 1)| along the shifted axis by the trapezoid rule.
  for (double s : {0.5, 2.0, 4.0}) {
    probe.separation = s;
    double integral = 0.0;
    const double h = 1e-3;
    for (double x = -15.0; x < 15.0 + s; x += h)
      integral += h * 0.5 *
                  (std::abs(normal_pdf(x, s) - normal_pdf(x, 0)) + std::abs(normal_pdf(x + h, s) - normal_pdf(x + h, 0)));
    CHECK(probe.max_drift() == doctest::Approx(integral).epsilon(1e-6));
  }
}

TEST_CASE("descent inequality holds with and without drift") {
  QuadraticProbe probe;
  probe.trajectories = 4000;
  probe.steps = 40;
  probe.step_size = [](std::size_t t) { return 0.5 / std::sqrt(t + 1.0); };
  probe.drift = [](std::size_t) { return 0.0; };
  const auto still = check_descent_inequality(probe);
  CHECK(still.passed);
  CHECK(still.accumulation_passed);
  CHECK(still.expected_loss.size() == 41);
  CHECK(still.expected_loss.front() == doctest::Approx(probe.loss(std::vector<double>{3.0, 3.0})));
  CHECK(still.expected_loss.back() < still.expected_loss.front());

  probe.drift = [](std::size_t t) { return 0.5 * std::pow(2.0, -static_cast<double>(t)); };
  const auto moving = check_descent_inequality(probe);
  CHECK(moving.passed);
  CHECK(moving.accumulation_passed);
  CHECK(moving.drift[1] == 0.25);
  // G bounds the second moment at the starting point.
  CHECK(moving.G >= 2.0 * 1.0 + 2.0 * 9.0);
}

TEST_CASE("an oversized step still satisfies the inequality") {
  QuadraticProbe probe;
  probe.trajectories = 4000;
  probe.steps = 6;
  probe.step_size = [](std::size_t) { return 10.0; };  // 10 / L
  probe.drift = [](std::size_t t) { return 0.5 * std::pow(2.0, -static_cast<double>(t)); };
  const auto r = check_descent_inequality(probe);
  CHECK(r.passed);
  CHECK(r.accumulation_passed);
  CHECK(r.expected_loss.back() > r.expected_loss.front());  // diverging, yet bounded above
}

TEST_CASE("a unit step jumps to the sample, so the next loss is twice the noise floor") {
  QuadraticProbe probe;
  probe.dim = 3;
  probe.trajectories = 20000;
  probe.steps = 1;
  probe.step_size = [](std::size_t) { return 1.0; };
  probe.drift = [](std::size_t) { return 0.0; };
  const auto r = check_descent_inequality(probe);
  // theta_1 = z ~ N(0, I): E L = E|z|^2 / 2 + 3/2 = 3.
  CHECK(std::abs(r.expected_loss[1] - 3.0) < 4.0 * std::sqrt(1.5 / 20000.0));
}

TEST_CASE("unreachable drift and bad probes are rejected") {
  QuadraticProbe probe;
  probe.step_size = [](std::size_t) { return 0.1; };
  probe.drift = [&](std::size_t) { return probe.max_drift() + 0.1; };
  CHECK_THROWS_AS(check_descent_inequality(probe), std::invalid_argument);
  probe.drift = {};
  CHECK_THROWS_AS(check_descent_inequality(probe), std::invalid_argument);
}

TEST_CASE("step schedules and Robbins-Monro classification") {
  StepSchedule inv{StepFamily::InverseT, 2.0};
  CHECK(inv(0) == 2.0);
  CHECK(inv(3) == 0.5);
  StepSchedule sq{StepFamily::InverseSqrtT, 1.0};
  CHECK(sq(3) == 0.5);
  StepSchedule step{StepFamily::StepDecay, 0.1, 0.2, 15};
  CHECK(step(14) == 0.1);
  CHECK(step(15) == doctest::Approx(0.02));
  CHECK(step(30) == doctest::Approx(0.004));

  double harmonic = 0.0, squares = 0.0;
  for (int t = 1; t <= 1000; ++t) {
    harmonic += 1.0 / t;
    squares += 1.0 / (double(t) * t);
  }
  const auto c = check_schedule(StepSchedule{StepFamily::InverseT, 1.0}, 1000);
  CHECK(c.sum_eta == doctest::Approx(harmonic));
  CHECK(c.sum_eta_sq == doctest::Approx(squares));
  CHECK(c.robbins_monro());

  CHECK(check_schedule(StepSchedule{StepFamily::Constant, 0.1}, 100).verdict == RobbinsMonro::Fails);
  CHECK(check_schedule(StepSchedule{StepFamily::Constant, 0.1}, 100).sum_eta == doctest::Approx(10.0));
  CHECK(check_schedule(sq, 10).verdict == RobbinsMonro::Fails);
  CHECK(check_schedule(step, 50).verdict == RobbinsMonro::FiniteHorizon);
  CHECK(check_schedule([](std::size_t) { return 1.0; }, 5).verdict == RobbinsMonro::Unknown);
  CHECK(to_string(RobbinsMonro::FiniteHorizon) == "finite-horizon");
}

TEST_CASE("rate summary by hand") {
  const std::vector<double> g = {4, 2, 3}, eta = {1, 1, 1}, drift = {0, 0, 0};
  const auto r = rate_summary(g, eta, drift, 1.0, 2.0, 1.0);
  CHECK(r.running_min == std::vector<double>{4, 2, 2});
  CHECK(r.bound[0] == doctest::Approx(2.0));
  CHECK(r.bound[1] == doctest::Approx(1.5));
  CHECK(r.bound[2] == doctest::Approx(4.0 / 3.0));
  CHECK(r.final_ratio == doctest::Approx(1.5));

  const auto smooth = rate_summary(g, eta, drift, 1.0, 2.0, 1.0, 2);
  CHECK(smooth.running_min == std::vector<double>{4, 3, 2.5});

  // Constant gradients without drift: bound_t = (L0 + (L G / 2) sum eta^2) / sum eta.
  std::vector<double> flat(50, 2.0), steps(50), none(50, 0.0);
  for (std::size_t t = 0; t < 50; ++t) steps[t] = 1.0 / std::sqrt(t + 1.0);
  const auto c = rate_summary(flat, steps, none, 5.0, 3.0, 1.0);
  double se = 0.0, se2 = 0.0;
  for (std::size_t t = 0; t < 50; ++t) {
    se += steps[t];
    se2 += steps[t] * steps[t];
    CHECK(c.bound[t] == doctest::Approx((5.0 + 1.5 * se2) / se));
  }
  CHECK(std::isfinite(c.final_ratio));
  CHECK(c.final_ratio == doctest::Approx(2.0 / c.bound.back()));

  const std::vector<double> d2 = {0.5, 0, 0};
  CHECK(rate_summary(g, eta, d2, 1.0, 2.0, 1.0).bound[0] == doctest::Approx(1.0 + 2.0 * 1.5));
  CHECK_THROWS_AS(rate_summary(g, eta, std::vector<double>{0}, 1.0, 2.0, 1.0), std::invalid_argument);
}

TEST_CASE("desk sync run: module 2's smallest squared gradient norm falls tenfold") {
  ExperimentConfig c;
  c.mode = RunMode::Sync;
  c.eval_every = 0;
  c.width = 16;
  c.lr = 0.02;
  c.decay_period = 4;
  c.epochs = 10;
  c.batch_size = 32;
  c.dataset.train_size = 512;
  c.dataset.test_size = 256;
  c.dataset.separation = 0.3;
  const auto s = run_experiment(c);
  std::vector<double> g2;
  for (const auto& r : s.records)
    if (r.module_id == 2) g2.push_back(r.grad_norm * r.grad_norm);
  REQUIRE(g2.size() == 10);
  const double final_min = *std::min_element(g2.begin(), g2.end());
  MESSAGE("module 2 squared gradient norm: epoch 1 " << g2.front() << ", running min " << final_min);
  CHECK(final_min * 10 <= g2.front());
}

TEST_CASE("sequential training: a module's input does not drift while it trains") {
  ExperimentConfig c;
  c.mode = RunMode::Sequential;
  c.eval_every = 0;
  c.track_drift = true;
  c.width = 4;
  c.epochs = 2;
  c.batch_size = 16;
  c.dataset.train_size = 96;
  c.dataset.test_size = 32;
  const auto data = load_dataset(c.dataset);
  TrainState<float> state(network_for(c, data.train), 1, train_options(c));
  const auto r = train_sequential(data.train, data.test, state, train_options(c));
  for (std::size_t j = 0; j < 4; ++j) {
    REQUIRE(r.drift[j].size() == 4);
    for (double d : r.drift[j]) CHECK(d == 0.0);
  }
}
