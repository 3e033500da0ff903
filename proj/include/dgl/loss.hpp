#pragma once

#include <span>

#include "dgl/tensor.hpp"

namespace dgl {

template <typename T>
struct LossResult {
  T loss{};            // mean over batch of -log softmax(logits)[label]
  Tensor<T> grad;      // d loss / d logits, same shape as logits
  std::size_t correct = 0;
};

/// Softmax cross-entropy on logits flattened to batch x classes.
/// Throws std::out_of_range for a label outside [0, classes).
template <typename T>
LossResult<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels);

/// Count of argmax(logits) == label; ties go to the lowest class index.
template <typename T>
std::size_t count_correct(const Tensor<T>& logits, std::span<const int> labels);

}  // namespace dgl
