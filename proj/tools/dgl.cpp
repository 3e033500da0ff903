// Command-line entry point: train, compress-report, check-grad, theory-probe.
//
// Exit codes: 0 success, 1 configuration or usage error, 2 runtime failure.

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numbers>

#include "CLI11.hpp"
#include "dgl/experiment.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 1;
constexpr int kRuntimeError = 2;

std::string default_out_dir(const dgl::ExperimentConfig& c) {
  const char* env = std::getenv("DGL_OUT_DIR");
  const std::filesystem::path base = env && *env ? env : "runs";
  return (base / (dgl::to_string(c.mode) + "-seed" + std::to_string(c.seed))).string();
}

int cmd_train(const std::string& config_path, const std::optional<std::uint64_t>& seed, std::string out) {
  dgl::ExperimentConfig config;
  try {
    config = dgl::load_config(config_path);
    if (seed) config.seed = *seed;
    config.validate();
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  }
  if (out.empty()) out = default_out_dir(config);
  std::cout << "# resolved configuration\n" << dgl::serialize_config(config) << '\n';
  dgl::RunSummary s;
  try {
    const auto started = std::chrono::steady_clock::now();
    s = dgl::run_experiment(config);
    dgl::write_run_artifacts(s, out);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    std::cout << dgl::summary_json(s) << "wall time " << secs << " s; artifacts in " << out << '\n';
  } catch (const dgl::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "run failed: " << e.what() << '\n';
    return kRuntimeError;
  }
  for (const auto& w : s.warnings) std::cerr << "warning: " << w << '\n';
  return kOk;
}

int cmd_compress(std::size_t width, std::size_t modules, std::uint64_t batch, std::uint64_t groups, double alpha,
                 const std::vector<std::uint64_t>& atoms, const std::vector<std::uint64_t>& samples,
                 const std::string& csv) {
  try {
    const auto net = dgl::build_reference_net(width, modules, 10);
    const auto rows = dgl::compress_report(net, batch, groups, alpha, atoms, samples);
    std::cout << dgl::compression_table(rows);
    if (!csv.empty()) {
      std::ofstream f(csv);
      if (!f) throw std::runtime_error("cannot write " + csv);
      f << dgl::compression_csv(rows);
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "failed: " << e.what() << '\n';
    return kRuntimeError;
  }
  return kOk;
}

int cmd_check_grad(std::size_t width, std::size_t modules, std::size_t batch, std::uint64_t seed, double tolerance,
                   std::size_t entries) {
  try {
    dgl::DatasetSpec ds;
    ds.train_size = batch;
    ds.test_size = 0;
    ds.seed = seed;
    const auto data = dgl::load_dataset(ds);
    const auto net = dgl::build_reference_net(width, modules, data.train.classes, dgl::AuxKind::MlpSr,
                                              data.train.sample.channels, data.train.sample.height);
    const auto b = dgl::slice<double>(data.train, 0, batch);
    dgl::GradCheckOptions opt;
    opt.max_entries = entries;
    opt.seed = seed;
    const auto reports = dgl::network_gradient_check(net, b.x, b.y, seed, opt);
    double worst = 0.0;
    for (std::size_t j = 0; j < reports.size(); ++j) {
      const auto& r = reports[j];
      std::cout << "module " << j + 1 << ": max relative error " << r.max_error << " over " << r.checked
                << " entries (" << r.skipped << " skipped at kinks)\n";
      worst = std::max(worst, r.max_error);
    }
    std::cout << "network: max relative error " << worst << (worst < tolerance ? " (ok)" : " (FAILED)") << '\n';
    return worst < tolerance ? kOk : kRuntimeError;
  } catch (const std::exception& e) {
    std::cerr << "failed: " << e.what() << '\n';
    return kRuntimeError;
  }
}

int cmd_theory(std::size_t trajectories, std::size_t steps, std::uint64_t seed) {
  struct Case {
    const char* name;
    std::function<double(std::size_t)> drift;
    std::function<double(std::size_t)> eta;
  };
  const std::vector<Case> cases = {
      {"no drift", [](std::size_t) { return 0.0; }, [](std::size_t t) { return 0.5 / std::sqrt(t + 1.0); }},
      {"drift 0.5*2^-t", [](std::size_t t) { return 0.5 * std::pow(2.0, -static_cast<double>(t)); },
       [](std::size_t t) { return 0.5 / std::sqrt(t + 1.0); }},
      {"large step 10/L", [](std::size_t t) { return 0.5 * std::pow(2.0, -static_cast<double>(t)); },
       [](std::size_t) { return 10.0; }},
  };
  bool all = true;
  for (const auto& c : cases) {
    dgl::QuadraticProbe probe;
    probe.drift = c.drift;
    probe.step_size = c.eta;
    probe.trajectories = trajectories;
    probe.steps = c.eta(0) > 1.0 ? std::min<std::size_t>(steps, 20) : steps;
    probe.seed = seed;
    const auto r = dgl::check_descent_inequality(probe);
    double worst = std::numeric_limits<double>::infinity();
    for (std::size_t t = 0; t < r.slack_mean.size(); ++t)
      worst = std::min(worst, r.slack_se[t] > 0 ? r.slack_mean[t] / r.slack_se[t] : r.slack_mean[t]);
    std::cout << c.name << ": per-step inequality " << (r.passed ? "holds" : "VIOLATED")
              << " (worst slack " << worst << " standard errors), accumulation bound "
              << (r.accumulation_passed ? "holds" : "VIOLATED") << " (" << r.accumulation_lhs << " <= "
              << r.accumulation_rhs << "), G = " << r.G << '\n';
    all = all && r.passed && r.accumulation_passed;
  }
  return all ? kOk : kRuntimeError;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Decoupled greedy learning experiments"};
  app.require_subcommand(1);

  auto* train = app.add_subcommand("train", "Run an experiment from a config file");
  std::string config_path, out_dir;
  std::optional<std::uint64_t> seed;
  train->add_option("config", config_path, "Config file")->required();
  train->add_option("--seed", seed, "Override run.seed");
  train->add_option("--out", out_dir, "Output directory (default $DGL_OUT_DIR/<mode>-seed<seed> or runs/...)");

  auto* compress = app.add_subcommand("compress-report", "Tabulate bandwidth and buffer compression factors");
  std::size_t width = 128, modules = 4;
  std::uint64_t batch = 128, groups = 32;
  double alpha = 1.0;
  std::vector<std::uint64_t> atoms = {2, 4, 16, 64, 256, 1024, 4096, 65536};
  std::vector<std::uint64_t> samples = {256};
  std::string csv;
  compress->add_option("--width", width, "First-module width");
  compress->add_option("--modules", modules, "Module count (4 or 6)");
  compress->add_option("--batch", batch, "Batch size B");
  compress->add_option("--groups", groups, "Codebook groups k");
  compress->add_option("--alpha", alpha, "Codebook sync fraction");
  compress->add_option("--atoms", atoms, "Codebook sizes C")->delimiter(',');
  compress->add_option("--samples", samples, "Buffer sizes M in samples")->delimiter(',');
  compress->add_option("--csv", csv, "Also write the table as CSV");

  auto* grad = app.add_subcommand("check-grad", "Finite-difference check of every module's local gradient");
  std::size_t grad_width = 16, grad_batch = 8;
  std::uint64_t grad_seed = 1;
  double tolerance = 1e-5;
  std::size_t grad_modules = 4;
  std::size_t grad_entries = 64;
  grad->add_option("--width", grad_width, "First-module width");
  grad->add_option("--modules", grad_modules, "Module count (4 or 6)");
  grad->add_option("--batch", grad_batch, "Samples in the checked batch");
  grad->add_option("--seed", grad_seed, "Seed for data and parameters");
  grad->add_option("--tolerance", tolerance, "Pass threshold on the max relative error");
  grad->add_option("--entries", grad_entries, "Entries checked per parameter tensor (0 = all)");

  auto* theory = app.add_subcommand("theory-probe", "Monte-Carlo check of the descent inequality on a drifting quadratic");
  std::size_t trajectories = 10000, steps = 50;
  std::uint64_t theory_seed = 1;
  theory->add_option("--trajectories", trajectories, "Monte-Carlo trajectories");
  theory->add_option("--steps", steps, "SGD steps per trajectory");
  theory->add_option("--seed", theory_seed, "Seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  if (*train) return cmd_train(config_path, seed, out_dir);
  if (*compress) return cmd_compress(width, modules, batch, groups, alpha, atoms, samples, csv);
  if (*grad) return cmd_check_grad(grad_width, grad_modules, grad_batch, grad_seed, tolerance, grad_entries);
  if (*theory) return cmd_theory(trajectories, steps, theory_seed);
  return kConfigError;
}
