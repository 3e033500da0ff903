#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "dgl/optim.hpp"
#include "dgl/rng.hpp"

namespace dgl {

struct GradCheckOptions {
  double step = 1e-5;     // central-difference half width
  double epsilon = 1e-4;  // denominator floor in the relative error
  std::size_t max_entries = 0;  // per tensor; 0 checks every entry, otherwise a seeded sample
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  double max_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // entries whose perturbation crossed a kink
};

/// Compares accumulated autodiff gradients against central differences.
///
/// `loss` evaluates the objective; when called with `backward == true` it must
/// also zero and repopulate the gradients of `params`. The error of an entry is
/// |autodiff - numeric| / (|numeric| + epsilon). When `pattern` is given it is
/// read after every evaluation, and entries whose +h or -h evaluation selects a
/// different linear piece than the base point are skipped: central differences
/// are meaningless across a ReLU or max-pool kink.
template <typename T>
GradCheckReport gradient_check_report(const std::vector<Parameter<T>*>& params,
                                      const std::function<T(bool backward)>& loss, const GradCheckOptions& opt = {},
                                      const std::function<std::uint64_t()>& pattern = {}) {
  GradCheckReport r;
  if (params.empty()) return r;
  const T base = loss(true);
  if (!std::isfinite(static_cast<double>(base))) throw std::runtime_error("gradient_check: non-finite loss");
  const std::uint64_t base_pattern = pattern ? pattern() : 0;
  std::vector<std::vector<T>> analytic;
  for (const auto* p : params) analytic.emplace_back(p->grad.values().begin(), p->grad.values().end());

  const T h = static_cast<T>(opt.step);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto v = params[k]->value.values();
    std::vector<std::size_t> entries(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) entries[i] = i;
    if (opt.max_entries > 0 && entries.size() > opt.max_entries) {
      Rng rng(derive_seed(opt.seed, "gradcheck-entries", k));
      shuffle(entries.begin(), entries.end(), rng);
      entries.resize(opt.max_entries);
    }
    for (const std::size_t i : entries) {
      const T saved = v[i];
      v[i] = saved + h;
      const T up = loss(false);
      bool crossed = pattern && pattern() != base_pattern;
      v[i] = saved - h;
      const T down = loss(false);
      crossed = crossed || (pattern && pattern() != base_pattern);
      v[i] = saved;
      if (!std::isfinite(static_cast<double>(up)) || !std::isfinite(static_cast<double>(down)))
        throw std::runtime_error("gradient_check: non-finite intermediate loss");
      if (crossed) {
        ++r.skipped;
        continue;
      }
      const double numeric = (static_cast<double>(up) - static_cast<double>(down)) / (2.0 * opt.step);
      const double err = std::abs(static_cast<double>(analytic[k][i]) - numeric) / (std::abs(numeric) + opt.epsilon);
      r.max_error = std::max(r.max_error, err);
      ++r.checked;
    }
  }
  return r;
}

/// Max relative error over all entries; see gradient_check_report.
template <typename T>
double gradient_check(const std::vector<Parameter<T>*>& params, const std::function<T(bool backward)>& loss,
                      const GradCheckOptions& opt = {}, const std::function<std::uint64_t()>& pattern = {}) {
  return gradient_check_report<T>(params, loss, opt, pattern).max_error;
}

}  // namespace dgl
