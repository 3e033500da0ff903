#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dgl/tensor.hpp"

namespace dgl {

// ---- distribution drift -----------------------------------------------------

struct DriftOptions {
  std::size_t projections = 8;
  std::size_t bins = 32;
  std::uint64_t seed = 0;
  std::size_t min_samples = 16;  // below this the estimate is flagged as unreliable
};

struct DriftEstimate {
  double value = 0.0;              // max over projections, in [0, 1]
  bool small_sample = false;
  std::vector<double> per_projection;
};

/// Proxy for the total-variation distance between two feature samples.
///
/// Each sample row (one per batch item, flattened) is projected onto R seeded
/// random unit directions; per direction both projections are histogrammed
/// over their common range and compared by half the L1 distance. The result
/// is the maximum over directions. Symmetric, and 0 for identical inputs.
/// This is a windowed proxy: the true limiting density is not observable.
DriftEstimate estimate_drift(std::span<const double> a, std::span<const double> b, std::size_t dim,
                             const DriftOptions& opt = {});

template <typename T>
DriftEstimate estimate_drift(const Tensor<T>& a, const Tensor<T>& b, const DriftOptions& opt = {});

// ---- descent inequality on a drifting quadratic -----------------------------

/// l(theta; z) = 0.5 * |theta - z|^2 with z drawn from the mixture
/// (1 - w_t) N(0, sigma^2 I) + w_t N(mu_q, sigma^2 I), |mu_q| = separation.
/// The limiting distribution is N(0, sigma^2 I), so L(theta) = 0.5 |theta|^2 +
/// dim sigma^2 / 2 with L-smoothness 1, and the integrated absolute density
/// difference is c_t = w_t * 2 * (2 Phi(separation / (2 sigma)) - 1).
struct QuadraticProbe {
  std::size_t dim = 2;
  double sigma = 1.0;
  double separation = 2.0;
  double start = 3.0;  // theta_0 = start * (1, ..., 1)
  std::function<double(std::size_t)> drift;      // target c_t; must be reachable (w_t <= 1)
  std::function<double(std::size_t)> step_size;  // eta_t
  std::size_t trajectories = 10000;
  std::size_t steps = 50;
  std::uint64_t seed = 1;

  double smoothness() const { return 1.0; }
  /// c_t when w_t = 1.
  double max_drift() const;
  double loss(std::span<const double> theta) const;
};

struct DescentCheck {
  bool passed = false;                 // descent inequality at every step within 3 standard errors
  double G = 0.0;                      // sup of conditional second moments over visited iterates
  std::vector<double> expected_loss;   // E[L(theta_t)], t = 0..steps
  std::vector<double> bound;           // right-hand side at each step
  std::vector<double> slack_mean;      // mean of (rhs - lhs) paired per trajectory
  std::vector<double> slack_se;
  std::vector<double> drift;           // c_t
  bool accumulation_passed = false;    // summed bound over the whole run
  double accumulation_lhs = 0.0;
  double accumulation_rhs = 0.0;
  double accumulation_se = 0.0;
};

DescentCheck check_descent_inequality(const QuadraticProbe& probe);

// ---- step-size schedules -----------------------------------------------------

enum class StepFamily { Constant, InverseT, InverseSqrtT, StepDecay };

struct StepSchedule {
  StepFamily family = StepFamily::InverseT;
  double base = 1.0;
  double decay_factor = 0.2;  // StepDecay only
  std::size_t decay_period = 15;

  /// t counts from 0; the 1/t families use 1/(t+1).
  double operator()(std::size_t t) const;
};

enum class RobbinsMonro { Holds, Fails, FiniteHorizon, Unknown };
std::string to_string(RobbinsMonro v);

struct ScheduleCheck {
  double sum_eta = 0.0;
  double sum_eta_sq = 0.0;
  RobbinsMonro verdict = RobbinsMonro::Unknown;
  bool robbins_monro() const { return verdict == RobbinsMonro::Holds; }
};

/// Partial sums over t < horizon plus the analytic classification of the family.
/// Step decay is only ever run for a finite horizon and is reported as such.
ScheduleCheck check_schedule(const StepSchedule& schedule, std::size_t horizon);
/// Unrecognized generator: partial sums only, verdict Unknown.
ScheduleCheck check_schedule(const std::function<double(std::size_t)>& eta, std::size_t horizon);

// ---- averaged-rate summary ---------------------------------------------------

struct RateSummary {
  std::vector<double> running_min;  // min so far of the smoothed squared gradient norm
  std::vector<double> bound;        // (L0 + G sum eta (sqrt(2c) + L eta / 2)) / sum eta
  double final_ratio = 0.0;         // running_min.back() / bound.back()
};

RateSummary rate_summary(std::span<const double> grad_norm_sq, std::span<const double> eta,
                         std::span<const double> drift, double initial_loss, double G, double smoothness,
                         std::size_t smooth_window = 1);

}  // namespace dgl
