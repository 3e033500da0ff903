#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dgl/layers.hpp"
#include "dgl/loss.hpp"
#include "dgl/optim.hpp"

namespace dgl {

/// Auxiliary head families.
///  - Cnn:   two 3x3 conv+BN+ReLU at module width, average to 2x2, projection.
///  - Mlp:   average to 2x2, three dense layers of constant width, projection.
///  - MlpSr: average-pool spatial extent down 4x, three 1x1 convs of module
///           width, then the Mlp head.
enum class AuxKind { Cnn, Mlp, MlpSr };

std::string to_string(AuxKind kind);
AuxKind parse_aux_kind(const std::string& text);

struct ModuleSpec {
  std::vector<LayerSpec> body;
  std::vector<LayerSpec> head;  // auxiliary head, or the final classifier when `final`
  bool final = false;
  Shape input{};   // per-sample extents, batch = 1
  Shape output{};
};

struct NetworkSpec {
  std::vector<ModuleSpec> modules;
  std::size_t class_count = 0;
  Shape input{};
  AuxKind aux = AuxKind::Mlp;
  std::size_t head_width = 0;

  /// Throws if adjacent module extents disagree or the final-classifier flag is misplaced.
  void validate() const;
  std::size_t size() const { return modules.size(); }
};

/// One 3x3 conv + BN + ReLU layer, optionally preceded by a 2x2 max-pool.
struct ConvStage {
  std::size_t width = 0;
  bool pool_before = false;
};

/// Builds a partition from conv stages grouped into modules. `head_width == 0`
/// selects 4 * (output width of module 1), the flatten size of its 2x2-averaged output.
NetworkSpec build_network(Shape input, const std::vector<std::vector<ConvStage>>& modules,
                          std::size_t class_count, AuxKind aux, std::size_t head_width = 0);

/// The VGG-like CIFAR family: 3x3 convs, 2x2 max-pool ahead of modules 2 and 4,
/// width doubled at each downsampling. depth_modules must be 4 or 6.
NetworkSpec build_reference_net(std::size_t width, std::size_t depth_modules, std::size_t class_count,
                                AuxKind aux = AuxKind::MlpSr, std::size_t input_channels = 3,
                                std::size_t input_extent = 32);

std::vector<LayerSpec> make_aux_head(AuxKind kind, std::size_t channels, std::size_t extent,
                                     std::size_t class_count, std::size_t hidden);
std::vector<LayerSpec> make_final_classifier(std::size_t channels, std::size_t extent, std::size_t class_count,
                                             std::size_t hidden);

/// Output channel count of each module.
std::vector<std::size_t> channel_plan(const NetworkSpec& net);

struct FlopReport {
  std::vector<std::uint64_t> module_flops;  // module bodies, per sample
  std::vector<std::uint64_t> aux_flops;     // 0 for the final module
  std::uint64_t classifier_flops = 0;       // final module's classifier
  std::uint64_t largest_module = 0;
  std::vector<double> aux_ratio;            // aux_flops[j] / largest_module
  /// Ratio of the first module's auxiliary head, where spatial resolution is highest.
  double first_aux_ratio = 0.0;
  double max_aux_ratio = 0.0;
};

FlopReport flop_report(const NetworkSpec& net);

template <typename T>
struct StepResult {
  T loss{};
  std::size_t correct = 0;
  double grad_norm_sq = 0.0;  // squared norm of the local gradient before weight decay
  Tensor<T> output;           // x_j, detached
};

/// One trainable module with its auxiliary head (or the final classifier).
template <typename T>
class GreedyModule {
 public:
  GreedyModule(ModuleSpec spec, Rng& rng);

  /// Computes x_j = body(x_{j-1}) and the head's cross-entropy on it, then
  /// backpropagates into this module's parameters only (grads are zeroed first).
  StepResult<T> local_loss(const Tensor<T>& input, std::span<const int> labels);

  /// local_loss followed by an SGD step.
  StepResult<T> train_step(const Tensor<T>& input, std::span<const int> labels, const SgdOptions& opt);

  Tensor<T> forward(const Tensor<T>& input, Mode mode) { return body_.forward(input, mode); }
  Tensor<T> logits(const Tensor<T>& output, Mode mode) { return head_.forward(output, mode); }

  std::vector<Parameter<T>*> parameters();
  const ModuleSpec& spec() const { return spec_; }
  Sequential<T>& body() { return body_; }
  Sequential<T>& head() { return head_; }

 private:
  ModuleSpec spec_;
  Sequential<T> body_;
  Sequential<T> head_;
};

template <typename T>
class Partition {
 public:
  Partition(const NetworkSpec& spec, std::uint64_t seed);

  std::size_t size() const { return modules_.size(); }
  GreedyModule<T>& operator[](std::size_t j) { return modules_[j]; }
  const NetworkSpec& spec() const { return spec_; }

  /// Runs module bodies [0, count) on x0.
  Tensor<T> forward(const Tensor<T>& x0, Mode mode, std::size_t count);
  Tensor<T> forward(const Tensor<T>& x0, Mode mode) { return forward(x0, mode, size()); }

  /// Flattened copy of every parameter value, module by module.
  std::vector<T> flat_parameters();

 private:
  NetworkSpec spec_;
  std::vector<GreedyModule<T>> modules_;
};

}  // namespace dgl
