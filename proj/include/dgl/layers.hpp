#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "dgl/optim.hpp"
#include "dgl/rng.hpp"
#include "dgl/tensor.hpp"

namespace dgl {

enum class Mode { Train, Eval };

enum class LayerKind { Conv, Dense, Relu, MaxPool, AvgPool, BatchNorm };

/// Precision-independent description of one building block.
///
/// Conv is stride 1 with shape-preserving padding (kernel / 2). Dense flattens
/// its input per sample and emits B x out x 1 x 1. AvgPool averages down to a
/// `target` x `target` spatial extent, which must divide the input extent.
struct LayerSpec {
  LayerKind kind = LayerKind::Relu;
  std::size_t in_channels = 0;   // conv/batchnorm channels, dense input features
  std::size_t out_channels = 0;  // conv output channels, dense output features
  std::size_t kernel = 3;
  std::size_t target = 0;  // avg-pool output extent

  static LayerSpec conv(std::size_t in, std::size_t out, std::size_t kernel = 3) {
    return {LayerKind::Conv, in, out, kernel, 0};
  }
  static LayerSpec dense(std::size_t in, std::size_t out) { return {LayerKind::Dense, in, out, 1, 0}; }
  static LayerSpec relu() { return {LayerKind::Relu, 0, 0, 0, 0}; }
  static LayerSpec max_pool() { return {LayerKind::MaxPool, 0, 0, 2, 0}; }
  static LayerSpec avg_pool_to(std::size_t target) { return {LayerKind::AvgPool, 0, 0, 0, target}; }
  static LayerSpec batch_norm(std::size_t channels) { return {LayerKind::BatchNorm, channels, channels, 0, 0}; }

  std::string name() const;

  /// Output extents for `in`; throws ShapeError naming the layer and the offending extents.
  Shape output_shape(const Shape& in) const;

  /// Flops per sample. A multiply-accumulate counts as 2; average pooling
  /// counts one add per input element; ReLU, max-pool and batchnorm count 0.
  std::uint64_t flops(const Shape& in) const;

  bool operator==(const LayerSpec&) const = default;
};

template <typename T>
class Layer {
 public:
  virtual ~Layer() = default;

  virtual Tensor<T> forward(const Tensor<T>& input, Mode mode) = 0;
  /// Backpropagates through the most recent forward call, accumulating into parameter grads.
  virtual Tensor<T> backward(const Tensor<T>& grad_output) = 0;
  virtual std::vector<Parameter<T>*> parameters() { return {}; }
  virtual std::unique_ptr<Layer> clone() const = 0;
  /// Hash of the linear piece selected by the last forward (ReLU masks,
  /// max-pool winners); 0 for layers that are smooth in their input.
  virtual std::uint64_t pattern() const { return 0; }

  const LayerSpec& spec() const { return spec_; }

 protected:
  explicit Layer(LayerSpec spec) : spec_(spec) {}
  LayerSpec spec_;
};

/// Kaiming-uniform weights, zero biases, batchnorm scale 1 shift 0.
template <typename T>
std::unique_ptr<Layer<T>> make_layer(const LayerSpec& spec, Rng& rng);

/// Runs one layer on an input; convenience for tests and tools.
template <typename T>
Tensor<T> layer_forward(const Tensor<T>& input, Layer<T>& layer, Mode mode = Mode::Train);

template <typename T>
class Sequential {
 public:
  Sequential() = default;
  Sequential(const std::vector<LayerSpec>& specs, Rng& rng);
  Sequential(const Sequential& other);
  Sequential& operator=(const Sequential& other);
  Sequential(Sequential&&) noexcept = default;
  Sequential& operator=(Sequential&&) noexcept = default;

  void push_back(std::unique_ptr<Layer<T>> layer) { layers_.push_back(std::move(layer)); }

  Tensor<T> forward(const Tensor<T>& input, Mode mode);
  Tensor<T> backward(const Tensor<T>& grad_output);
  std::vector<Parameter<T>*> parameters();
  void zero_grad();
  std::uint64_t pattern() const;

  std::size_t size() const { return layers_.size(); }
  bool empty() const { return layers_.empty(); }
  Layer<T>& layer(std::size_t i) { return *layers_[i]; }
  std::vector<LayerSpec> specs() const;

 private:
  std::vector<std::unique_ptr<Layer<T>>> layers_;
};

/// Output shape and total per-sample flops of a layer stack.
Shape stack_output_shape(const std::vector<LayerSpec>& specs, Shape in);
std::uint64_t stack_flops(const std::vector<LayerSpec>& specs, Shape in);

}  // namespace dgl
