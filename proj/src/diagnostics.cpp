#include "dgl/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "dgl/rng.hpp"

namespace dgl {

DriftEstimate estimate_drift(std::span<const double> a, std::span<const double> b, std::size_t dim,
                             const DriftOptions& opt) {
  if (dim == 0 || a.size() % dim != 0 || b.size() % dim != 0)
    throw std::invalid_argument("estimate_drift: sample sizes are not multiples of the feature dimension");
  if (opt.bins == 0 || opt.projections == 0) throw std::invalid_argument("estimate_drift: need bins and projections");
  const std::size_t na = a.size() / dim, nb = b.size() / dim;
  DriftEstimate est;
  est.small_sample = std::min(na, nb) < opt.min_samples;
  if (na == 0 || nb == 0) {
    est.small_sample = true;
    return est;
  }
  std::vector<double> dir(dim), pa(na), pb(nb);
  for (std::size_t r = 0; r < opt.projections; ++r) {
    Rng rng(derive_seed(opt.seed, "drift-projection", r));
    double norm = 0.0;
    for (auto& v : dir) {
      v = normal(rng);
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (auto& v : dir) v /= norm;
    auto project = [&](std::span<const double> x, std::vector<double>& out) {
      for (std::size_t i = 0; i < out.size(); ++i) {
        double s = 0.0;
        for (std::size_t c = 0; c < dim; ++c) s += x[i * dim + c] * dir[c];
        out[i] = s;
      }
    };
    project(a, pa);
    project(b, pb);
    const double lo = std::min(*std::min_element(pa.begin(), pa.end()), *std::min_element(pb.begin(), pb.end()));
    const double hi = std::max(*std::max_element(pa.begin(), pa.end()), *std::max_element(pb.begin(), pb.end()));
    std::vector<double> ha(opt.bins, 0.0), hb(opt.bins, 0.0);
    auto bin = [&](double v) {
      if (!(hi > lo)) return std::size_t{0};
      const auto k = static_cast<std::size_t>((v - lo) / (hi - lo) * static_cast<double>(opt.bins));
      return std::min(k, opt.bins - 1);
    };
    for (double v : pa) ha[bin(v)] += 1.0 / static_cast<double>(na);
    for (double v : pb) hb[bin(v)] += 1.0 / static_cast<double>(nb);
    double tv = 0.0;
    for (std::size_t k = 0; k < opt.bins; ++k) tv += std::abs(ha[k] - hb[k]);
    tv = std::min(1.0, 0.5 * tv);
    est.per_projection.push_back(tv);
    est.value = std::max(est.value, tv);
  }
  return est;
}

template <typename T>
DriftEstimate estimate_drift(const Tensor<T>& a, const Tensor<T>& b, const DriftOptions& opt) {
  if (a.shape().per_sample() != b.shape().per_sample())
    throw ShapeError("estimate_drift: feature shapes " + a.shape().str() + " and " + b.shape().str() + " differ");
  std::vector<double> da(a.values().begin(), a.values().end());
  std::vector<double> db(b.values().begin(), b.values().end());
  return estimate_drift(da, db, a.shape().per_sample(), opt);
}

template DriftEstimate estimate_drift<float>(const Tensor<float>&, const Tensor<float>&, const DriftOptions&);
template DriftEstimate estimate_drift<double>(const Tensor<double>&, const Tensor<double>&, const DriftOptions&);

namespace {

double std_normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

struct MeanSe {
  double mean = 0.0;
  double se = 0.0;
};

MeanSe mean_se(const std::vector<double>& v) {
  MeanSe m;
  const auto n = static_cast<double>(v.size());
  m.mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
  double ss = 0.0;
  for (double x : v) ss += (x - m.mean) * (x - m.mean);
  m.se = v.size() > 1 ? std::sqrt(ss / (n - 1.0) / n) : 0.0;
  return m;
}

// Passing means the mean violation is within 3 standard errors, with a relative
// floor for runs whose per-trajectory values are all identical.
bool within_noise(const MeanSe& violation, double scale) {
  return violation.mean <= 3.0 * violation.se + 1e-12 * std::max(1.0, scale);
}

}  // namespace

double QuadraticProbe::max_drift() const { return 2.0 * (2.0 * std_normal_cdf(separation / (2.0 * sigma)) - 1.0); }

double QuadraticProbe::loss(std::span<const double> theta) const {
  double s = 0.0;
  for (double v : theta) s += v * v;
  return 0.5 * s + 0.5 * static_cast<double>(dim) * sigma * sigma;
}

DescentCheck check_descent_inequality(const QuadraticProbe& probe) {
  if (!probe.drift || !probe.step_size) throw std::invalid_argument("theory probe needs drift and step-size schedules");
  if (probe.dim == 0 || probe.trajectories < 2 || probe.steps == 0)
    throw std::invalid_argument("theory probe needs dim >= 1, >= 2 trajectories and >= 1 step");
  const std::size_t D = probe.dim, N = probe.trajectories, T = probe.steps;
  const double cmax = probe.max_drift();
  DescentCheck out;
  std::vector<double> w(T), eta(T);
  for (std::size_t t = 0; t < T; ++t) {
    const double c = probe.drift(t);
    if (c < 0.0 || c > cmax + 1e-15)
      throw std::invalid_argument("drift " + std::to_string(c) + " at step " + std::to_string(t) +
                                  " exceeds what the mixture can produce (" + std::to_string(cmax) + ")");
    out.drift.push_back(c);
    w[t] = cmax > 0.0 ? std::min(1.0, c / cmax) : 0.0;
    eta[t] = probe.step_size(t);
  }

  // Iterates for every trajectory: theta[(i * (T + 1) + t) * D + d].
  std::vector<double> theta(N * (T + 1) * D);
  Rng rng(derive_seed(probe.seed, "quadratic-probe"));
  for (std::size_t i = 0; i < N; ++i) {
    double* th = &theta[i * (T + 1) * D];
    std::fill(th, th + D, probe.start);
    for (std::size_t t = 0; t < T; ++t) {
      const bool shifted = uniform01(rng) < w[t];
      for (std::size_t d = 0; d < D; ++d) {
        const double mean = shifted && d == 0 ? probe.separation : 0.0;
        const double z = mean + probe.sigma * normal(rng);
        th[(t + 1) * D + d] = th[t * D + d] - eta[t] * (th[t * D + d] - z);
      }
    }
  }

  // G: largest conditional second moment of the stochastic gradient at any
  // visited iterate, under the drifting and the limiting distribution.
  const double wmax = *std::max_element(w.begin(), w.end());
  const double noise = static_cast<double>(D) * probe.sigma * probe.sigma;
  double G = 0.0;
  for (std::size_t k = 0; k < N * (T + 1); ++k) {
    const double* th = &theta[k * D];
    double near = 0.0, far = 0.0;
    for (std::size_t d = 0; d < D; ++d) {
      near += th[d] * th[d];
      const double diff = th[d] - (d == 0 ? probe.separation : 0.0);
      far += diff * diff;
    }
    G = std::max(G, noise + std::max(near, (1.0 - wmax) * near + wmax * far));
  }
  out.G = G;
  const double L = probe.smoothness();

  auto loss_at = [&](std::size_t i, std::size_t t) { return probe.loss({&theta[(i * (T + 1) + t) * D], D}); };
  auto grad_sq_at = [&](std::size_t i, std::size_t t) {
    const double* th = &theta[(i * (T + 1) + t) * D];
    double s = 0.0;
    for (std::size_t d = 0; d < D; ++d) s += th[d] * th[d];
    return s;
  };

  out.passed = true;
  std::vector<double> violation(N);
  for (std::size_t t = 0; t <= T; ++t) {
    double m = 0.0;
    for (std::size_t i = 0; i < N; ++i) m += loss_at(i, t);
    out.expected_loss.push_back(m / static_cast<double>(N));
  }
  for (std::size_t t = 0; t < T; ++t) {
    const double extra = eta[t] * G * std::sqrt(2.0 * out.drift[t]) + 0.5 * L * G * eta[t] * eta[t];
    double rhs = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      const double lhs = loss_at(i, t + 1);
      const double r = loss_at(i, t) - eta[t] * grad_sq_at(i, t) + extra;
      violation[i] = lhs - r;
      rhs += r;
    }
    out.bound.push_back(rhs / static_cast<double>(N));
    const auto v = mean_se(violation);
    out.slack_mean.push_back(-v.mean);
    out.slack_se.push_back(v.se);
    if (!within_noise(v, out.bound.back())) out.passed = false;
  }

  double extra_sum = 0.0;
  for (std::size_t t = 0; t < T; ++t) extra_sum += eta[t] * (std::sqrt(2.0 * out.drift[t]) + 0.5 * L * eta[t]);
  for (std::size_t i = 0; i < N; ++i) {
    double lhs = 0.0;
    for (std::size_t t = 0; t < T; ++t) lhs += eta[t] * grad_sq_at(i, t);
    violation[i] = lhs - (loss_at(i, 0) + G * extra_sum);
  }
  const auto v = mean_se(violation);
  out.accumulation_rhs = out.expected_loss.front() + G * extra_sum;
  out.accumulation_lhs = v.mean + out.accumulation_rhs;
  out.accumulation_se = v.se;
  out.accumulation_passed = within_noise(v, out.accumulation_rhs);
  return out;
}

double StepSchedule::operator()(std::size_t t) const {
  const auto tt = static_cast<double>(t);
  switch (family) {
    case StepFamily::Constant:
      return base;
    case StepFamily::InverseT:
      return base / (tt + 1.0);
    case StepFamily::InverseSqrtT:
      return base / std::sqrt(tt + 1.0);
    case StepFamily::StepDecay:
      return base * std::pow(decay_factor, static_cast<double>(t / decay_period));
  }
  return base;
}

std::string to_string(RobbinsMonro v) {
  switch (v) {
    case RobbinsMonro::Holds:
      return "holds";
    case RobbinsMonro::Fails:
      return "fails";
    case RobbinsMonro::FiniteHorizon:
      return "finite-horizon";
    case RobbinsMonro::Unknown:
      return "unknown";
  }
  return "unknown";
}

ScheduleCheck check_schedule(const std::function<double(std::size_t)>& eta, std::size_t horizon) {
  ScheduleCheck c;
  for (std::size_t t = 0; t < horizon; ++t) {
    const double e = eta(t);
    c.sum_eta += e;
    c.sum_eta_sq += e * e;
  }
  return c;
}

ScheduleCheck check_schedule(const StepSchedule& schedule, std::size_t horizon) {
  auto c = check_schedule(std::function<double(std::size_t)>(schedule), horizon);
  switch (schedule.family) {
    case StepFamily::Constant:
      c.verdict = RobbinsMonro::Fails;  // squares diverge
      break;
    case StepFamily::InverseT:
      c.verdict = schedule.base > 0.0 ? RobbinsMonro::Holds : RobbinsMonro::Fails;
      break;
    case StepFamily::InverseSqrtT:
      c.verdict = RobbinsMonro::Fails;  // squares sum like the harmonic series
      break;
    case StepFamily::StepDecay:
      c.verdict = RobbinsMonro::FiniteHorizon;
      break;
  }
  return c;
}

RateSummary rate_summary(std::span<const double> grad_norm_sq, std::span<const double> eta,
                         std::span<const double> drift, double initial_loss, double G, double smoothness,
                         std::size_t smooth_window) {
  if (grad_norm_sq.size() != eta.size() || eta.size() != drift.size())
    throw std::invalid_argument("rate_summary: traces have lengths " + std::to_string(grad_norm_sq.size()) + ", " +
                                std::to_string(eta.size()) + ", " + std::to_string(drift.size()));
  if (smooth_window == 0) smooth_window = 1;
  RateSummary r;
  double best = std::numeric_limits<double>::infinity();
  double window = 0.0, sum_eta = 0.0, sum_extra = 0.0;
  for (std::size_t t = 0; t < eta.size(); ++t) {
    window += grad_norm_sq[t];
    if (t >= smooth_window) window -= grad_norm_sq[t - smooth_window];
    const double smoothed = window / static_cast<double>(std::min(t + 1, smooth_window));
    best = std::min(best, smoothed);
    r.running_min.push_back(best);
    sum_eta += eta[t];
    sum_extra += eta[t] * (std::sqrt(2.0 * std::max(0.0, drift[t])) + 0.5 * smoothness * eta[t]);
    r.bound.push_back(sum_eta > 0.0 ? (initial_loss + G * sum_extra) / sum_eta
                                    : std::numeric_limits<double>::infinity());
  }
  if (!r.bound.empty() && r.bound.back() > 0.0) r.final_ratio = r.running_min.back() / r.bound.back();
  return r;
}

}  // namespace dgl
